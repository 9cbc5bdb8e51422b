import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from serec import InteractionMatrix, SocialGraph


def random_interactions(rng, n_users, n_items, density=0.3):
    """Random click matrix with at least one click."""
    mask = rng.random((n_users, n_items)) < density
    if not mask.any():
        mask[rng.integers(n_users), rng.integers(n_items)] = True
    users, items = np.nonzero(mask)
    return InteractionMatrix(n_users, n_items, list(zip(users.tolist(), items.tolist())))


def random_graph(rng, n_users, density=0.1):
    mask = rng.random((n_users, n_users)) < density
    np.fill_diagonal(mask, False)
    srcs, dsts = np.nonzero(mask)
    return SocialGraph(n_users, list(zip(srcs.tolist(), dsts.tolist())))


def dense_clicks(matrix):
    out = np.zeros((matrix.n_users, matrix.n_items))
    out[matrix.user_idx, matrix.item_idx] = 1.0
    return out


class MatrixProvider:
    """Test double: exposure prior given as an explicit dense matrix."""

    kind = "matrix"

    def __init__(self, mu, bypass=False):
        self.mu = np.asarray(mu, dtype=float)
        self.bypass_bayes = bypass
        self.updates = 0

    def mu_block(self, j0, j1):
        return self.mu[:, j0:j1]

    def update(self, posterior, y):
        self.updates += 1

    def save(self, out_dir):
        pass


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def toy_matrix():
    # 4 users x 5 items, hand picked so every user has a click
    pairs = [(0, 0), (0, 2), (1, 1), (1, 2), (2, 3), (3, 0), (3, 4)]
    return InteractionMatrix(4, 5, pairs)


@pytest.fixture
def toy_graph():
    return SocialGraph(4, [(0, 1), (1, 0), (1, 2), (3, 1)])


def data_dir():
    return os.environ.get("SEREC_DATA_DIR")


needs_data = pytest.mark.skipif(
    data_dir() is None,
    reason="set SEREC_DATA_DIR to run tests against the original data files",
)
