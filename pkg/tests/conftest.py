import numpy as np
import pytest

from mcfdr.completion import FactorModel, ObservationSet


def random_factors(d1, d2, r, rng, spectrum=None):
    U, _ = np.linalg.qr(rng.standard_normal((d1, r)))
    V, _ = np.linalg.qr(rng.standard_normal((d2, r)))
    S = np.sort(rng.uniform(1, 3, r))[::-1] if spectrum is None else np.asarray(spectrum, float)
    return FactorModel(U, V, S, (U * S) @ V.T)


def explicit_complement(Q):
    """Orthonormal basis of the orthogonal complement via a full QR."""
    full, _ = np.linalg.qr(Q, mode="complete")
    return full[:, Q.shape[1]:]


def full_observation(M):
    d1, d2 = M.shape
    i, j = np.meshgrid(np.arange(d1), np.arange(d2), indexing="ij")
    return ObservationSet(d1, d2, i.ravel(), j.ravel(), M.ravel())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
