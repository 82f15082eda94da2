import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def haar_unitary(rng, n):
    z = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    return q * (np.diag(r) / np.abs(np.diag(r)))


def perm_matrix(rng, k):
    return np.eye(k)[rng.permutation(k)]
