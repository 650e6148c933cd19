import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_rotation(rng):
    """Uniform random rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0.0:
        q[:, 2] *= -1.0
    return q


def random_f(rng, spread=0.5, min_gap=0.0):
    """Random deformation gradient; optionally reject near-equal singular values."""
    while True:
        F = np.eye(3) + spread * rng.normal(size=(3, 3))
        s = np.linalg.svd(F, compute_uv=False)
        gaps = [abs(s[0] - s[1]), abs(s[1] - s[2]), s[1] + s[2]]
        if min(gaps) > min_gap:
            return F
