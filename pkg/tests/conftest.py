import numpy as np
import pytest

from nanoconv import numerics


def conv_oracle(x, k):
    """Full-mode true convolution by four nested loops."""
    H, W = x.shape
    h, w = k.shape
    out = np.zeros((H + h - 1, W + w - 1))
    for i in range(H):
        for j in range(W):
            for a in range(h):
                for b in range(w):
                    out[i + a, j + b] += x[i, j] * k[a, b]
    return out


def crop_mode(full, xshape, kshape, mode):
    H, W = xshape
    h, w = kshape
    if mode == "full":
        return full
    if mode == "same":
        return full[(h - 1) // 2 : (h - 1) // 2 + H, (w - 1) // 2 : (w - 1) // 2 + W]
    return full[h - 1 : H, w - 1 : W]


@pytest.fixture
def f64():
    with numerics.precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
