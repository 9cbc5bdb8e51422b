"""Exposure priors that ignore the social graph.

``PopularityExposure`` shares one prior per item, updated as the mode of a
Beta posterior over how many users saw the item.  ``FixedExposure`` pins
the posterior to constants, which turns the EM engine into plain weighted
matrix factorization.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from serec.data import InteractionMatrix
from serec.engine import MU_EPS, _clicked_in_block, _iter_blocks


def popularity_update_mu(p, n_users: int, alpha1: float = 1.0, alpha2: float = 1.0) -> np.ndarray:
    """Per-item prior from posterior mass: (a1 + sum_u p_ui - 1)/(a1 + a2 + U - 2).

    ``p`` may be the full (U, V) posterior array or precomputed column
    sums.  With a1 = a2 = 1 this is exactly the column mean before the
    boundary clamp to [1e-6, 1 - 1e-6].
    """
    if alpha1 + alpha2 + n_users <= 2:
        raise ValueError("alpha1 + alpha2 + n_users must exceed 2")
    p = np.asarray(p, dtype=np.float64)
    col = p.sum(axis=0) if p.ndim == 2 else p
    mu = (alpha1 + col - 1.0) / (alpha1 + alpha2 + n_users - 2.0)
    return np.clip(mu, MU_EPS, 1.0 - MU_EPS)


def fixed_exposure_p(y_ui, mu_unobserved: float):
    """Fixed-weight assignment: clicked pairs weigh 1, the rest mu_unobserved."""
    out = np.where(np.asarray(y_ui) != 0, 1.0, mu_unobserved)
    if out.ndim == 0:
        return float(out)
    return out


def _posterior_column_sums(post) -> np.ndarray:
    """Column sums of p, blockwise so memmap-backed posteriors stream."""
    arr = post.p
    out = np.empty(arr.shape[1], dtype=np.float64)
    for j0, j1 in _iter_blocks(arr.shape[1], 8192):
        out[j0:j1] = np.asarray(arr[:, j0:j1]).sum(axis=0)
    return out


class PopularityExposure:
    """Item-popularity exposure prior (no social information).

    Initialized from raw click counts as if the posterior equalled the
    click matrix, then refreshed each EM iteration from the actual
    posterior column sums.
    """

    kind = "expomf"

    def __init__(self, y: InteractionMatrix, alpha1: float = 1.0, alpha2: float = 1.0) -> None:
        if alpha1 <= 0 or alpha2 <= 0:
            raise ValueError("Beta parameters must be positive")
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.n_users = y.n_users
        self.mu_items = popularity_update_mu(
            y.item_counts().astype(np.float64), y.n_users, alpha1, alpha2
        )

    def mu_block(self, j0: int, j1: int) -> np.ndarray:
        return np.broadcast_to(self.mu_items[j0:j1], (self.n_users, j1 - j0))

    def update(self, post, y: InteractionMatrix) -> None:
        self.mu_items = popularity_update_mu(
            _posterior_column_sums(post), self.n_users, self.alpha1, self.alpha2
        )

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        np.savetxt(out_dir / "mu_items.tsv", self.mu_items, fmt="%.17g", delimiter="\t")
        with open(out_dir / "exposure.json", "w", encoding="utf-8") as fh:
            json.dump({"alpha1": self.alpha1, "alpha2": self.alpha2}, fh, indent=2)

    @classmethod
    def load(cls, model_dir, y: InteractionMatrix) -> "PopularityExposure":
        model_dir = Path(model_dir)
        with open(model_dir / "exposure.json", encoding="utf-8") as fh:
            params = json.load(fh)
        provider = cls(y, alpha1=params["alpha1"], alpha2=params["alpha2"])
        provider.mu_items = np.loadtxt(model_dir / "mu_items.tsv", delimiter="\t", ndmin=1)
        return provider


class FixedExposure:
    """Constant exposure weights: the WMF special case.

    The engine skips the Bayes E-step for this provider (``bypass_bayes``)
    and stores the prior directly as p, so unobserved pairs keep weight
    ``mu_unobserved`` and clicked pairs weight 1 throughout training.
    """

    kind = "wmf"
    bypass_bayes = True

    def __init__(self, y: InteractionMatrix, mu_unobserved: float = 0.4) -> None:
        if not 0.0 < mu_unobserved <= 1.0:
            raise ValueError("mu_unobserved must be in (0, 1]")
        self.mu_unobserved = mu_unobserved
        self._y = y

    def mu_block(self, j0: int, j1: int) -> np.ndarray:
        block = np.full((self._y.n_users, j1 - j0), self.mu_unobserved, dtype=np.float64)
        rows, cols = _clicked_in_block(self._y, j0, j1)
        block[rows, cols] = 1.0
        return block

    def update(self, post, y: InteractionMatrix) -> None:
        pass  # weights are fixed by definition

    def save(self, out_dir) -> None:
        with open(Path(out_dir) / "exposure.json", "w", encoding="utf-8") as fh:
            json.dump({"mu_unobserved": self.mu_unobserved}, fh, indent=2)

    @classmethod
    def load(cls, model_dir, y: InteractionMatrix) -> "FixedExposure":
        with open(Path(model_dir) / "exposure.json", encoding="utf-8") as fh:
            params = json.load(fh)
        return cls(y, mu_unobserved=params["mu_unobserved"])
