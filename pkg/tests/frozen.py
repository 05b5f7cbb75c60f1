"""Reference values computed once with an independent framework and frozen here."""

import numpy as np

X_FROZEN = (((np.arange(50) % 7) - 3) / 4).reshape(1, 2, 5, 5)
W_FROZEN = (((np.arange(54) % 5) - 2) / 3).reshape(3, 2, 3, 3)
B_FROZEN = np.array([0.5, -0.25, 0.0])
CONV_S2P1 = [
    1.083333333333, -0.583333333333, 0.083333333333, -0.5, -0.333333333333, 0.916666666667, 1.25, 2.083333333333,
    -0.333333333333, -1.25, 0.333333333333, 0.916666666667, 0.083333333333, 0.666666666667, -1.166666666667, 0.0,
    -1.25, -0.083333333333, 1.166666666667, 0.583333333333, -1.0, 0.0, -1.5, 1.083333333333, -0.666666666667,
    -0.25, -0.083333333333,
]
WDW_FROZEN = (((np.arange(18) % 4) - 1.5) / 2).reshape(2, 1, 3, 3)
DEPTHWISE_S1P1 = [
    0.5, 1.125, -0.1875, -0.625, -0.5, -0.6875, 0.4375, 1.5625, 1.375, -0.625, -0.1875, -1.375, -1.125, 0.4375, 2.0,
    1.625, -0.125, -0.75, -1.375, -0.625, -0.3125, 1.6875, 0.125, -0.125, -0.5, 0.25, -0.375, -1.0625, -0.875, 0.5,
    1.1875, 0.75, -0.625, -1.125, -0.6875, -0.5625, 0.875, 2.125, 0.75, -0.1875, -0.5625, -1.1875, -0.8125, 0.875,
    1.625, 0.75, -0.4375, -0.875, -0.875, -0.3125,
]
AVG_2_1 = [
    0.0, -0.1875, -0.375, -0.125, 0.375, 0.1875, 0.0, -0.1875, -0.125, 0.125, 0.375, 0.1875, -0.1875, -0.375, -0.125,
    0.125, 0.125, 0.375, 0.1875, 0.0, -0.375, -0.125, 0.125, 0.375, 0.0, -0.1875, -0.375, -0.125, 0.375, 0.1875, 0.0,
    -0.1875,
]
MAX_3_2 = [0.75] * 8

# conv (stride 2, pad 1) followed by inference-mode batchnorm
BN_GAMMA = np.array([1.5, 0.5, 2.0])
BN_BETA = np.array([0.1, -0.2, 0.3])
BN_MEAN = np.array([0.2, 0.0, -0.1])
BN_VAR = np.array([0.5, 2.0, 1.0])
BN_EPS = 1e-5
CONV_BN_S2P1 = [
    1.973814232096, -1.561684319028, -0.147484898579, -1.384909391472, -1.03135953636, 1.620264376983,
    2.327364087208, 4.09511336277, -1.03135953636, -0.641940633391, -0.082149164429, 0.12408979782,
    -0.170537291107, 0.035701671142, -0.612477924499, -0.2, -0.641940633391, -0.229462708893, 2.833320666762,
    1.666659833385, -1.499991000067, 0.499999000008, -2.499986000105, 2.666654833422, -0.833327666709,
    1.499989e-06, 0.333333166668,
]

# single dense layer + softmax cross-entropy, mean over the batch
CE_W = np.array([[0.1, -0.2, 0.3], [0.4, 0.5, -0.6]])
CE_B = np.array([0.01, -0.02])
CE_X = np.array([[1.0, 2.0, 3.0], [-1.0, 0.0, 1.0]])
CE_LABELS = np.array([0, 1])
CE_LOSS = 0.8958496716285118
CE_DW = [
    -0.5184513392180168, -0.2630841041665798, -0.007716869115142744,
    0.5184513392180168, 0.26308410416657985, 0.007716869115142855,
]
CE_DB = [0.25536723505143705, -0.255367235051437]
