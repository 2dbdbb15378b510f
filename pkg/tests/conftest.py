import numpy as np
import pytest


def batch_means_se(chain: np.ndarray, n_batches: int = 20) -> float:
    """Standard error of a correlated chain's mean via batch means."""
    chain = np.asarray(chain, dtype=float).ravel()
    usable = (len(chain) // n_batches) * n_batches
    means = chain[:usable].reshape(n_batches, -1).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))


@pytest.fixture(scope="session")
def session_rng():
    return np.random.default_rng(20240817)
