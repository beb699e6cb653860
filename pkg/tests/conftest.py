import numpy as np
import pytest

from warpgeo.camera import CameraIntrinsics


def expm_oracle(A: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a truncated Taylor series."""
    norm = np.abs(A).sum(axis=1).max()
    k = max(0, int(np.ceil(np.log2(norm + 1e-300))) + 4)
    B = A / 2.0**k
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for n in range(1, 30):
        term = term @ B / n
        out = out + term
    for _ in range(k):
        out = out @ out
    return out


def twist_matrix(twist) -> np.ndarray:
    w, v = np.asarray(twist[:3], float), np.asarray(twist[3:], float)
    m = np.zeros((4, 4))
    m[:3, :3] = [[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]]
    m[:3, 3] = v
    return m


@pytest.fixture
def K_small():
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=101, height=101)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
