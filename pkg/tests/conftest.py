import os

import numpy as np
import pytest

MNIST_DIR = os.environ.get("SPARSENN_MNIST_DIR", "/root/data/mnist")

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def mnist_available() -> bool:
    names = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    return all(os.path.exists(os.path.join(MNIST_DIR, n)) or os.path.exists(os.path.join(MNIST_DIR, n + ".gz"))
               for n in names)


@pytest.fixture(scope="session")
def mnist():
    if not mnist_available():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR} (set SPARSENN_MNIST_DIR)")
    from sparsenn.cli import load_mnist
    return load_mnist(MNIST_DIR)
