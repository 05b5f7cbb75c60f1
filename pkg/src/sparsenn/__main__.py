import sys

from sparsenn.cli import main

sys.exit(main())
