"""Social regularization: factorize the exposure prior, tying users to the
people they trust.

The prior is a low-rank bilinear form mu_ui = X_u . T_i + gamma_i.  The
trust graph enters as a second factorization task sharing X: for an edge
(u, k) the product X_u . B_k should approach 1, for a non-edge 0.  Both
tasks are fit jointly by SGD over (i, u, k) triplets.

Regression targets: an observed pair pulls mu toward the item's audience
share n_i / U; a sampled unobserved pair pulls it toward the current
posterior p_ui, the exposure estimate the likelihood itself produces.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from serec.data import InteractionMatrix, SocialGraph
from serec.engine import MU_EPS, TrainingError

DIVERGENCE_FACTOR = 10.0


@dataclass
class ExposureTargets:
    """Regression targets for the prior fit, clamped to [1e-6, 1 - 1e-6]."""

    observed_per_item: np.ndarray  # n_i / U per item
    posterior: object = field(repr=False)  # (U, V) array-like for Y- lookups
    _csr_indptr: np.ndarray = field(repr=False, default=None)
    _csr_indices: np.ndarray = field(repr=False, default=None)

    def is_observed(self, u: int, i: int) -> bool:
        row = self._csr_indices[self._csr_indptr[u] : self._csr_indptr[u + 1]]
        pos = np.searchsorted(row, i)
        return pos < row.size and row[pos] == i

    def lookup(self, u: int, i: int) -> float:
        if self.is_observed(u, i):
            return float(self.observed_per_item[i])
        return float(np.clip(self.posterior[u, i], MU_EPS, 1.0 - MU_EPS))


def build_targets(y: InteractionMatrix, p) -> ExposureTargets:
    """Targets per the module contract: n_i / U on clicks, p_ui elsewhere."""
    arr = p.p if hasattr(p, "p") else np.asarray(p)
    per_item = np.clip(y.item_counts() / y.n_users, MU_EPS, 1.0 - MU_EPS)
    csr = y.to_csr()
    return ExposureTargets(
        observed_per_item=per_item,
        posterior=arr,
        _csr_indptr=csr.indptr,
        _csr_indices=csr.indices,
    )


def triplet_gradients(state, triplet, target: float, s_uk: int):
    """The four half-gradients of the sampled loss at one (i, u, k) triplet.

    err = X_u.T_i + gamma_i - target, serr = X_u.B_k - s_uk:
        dT_i    = err * X_u + lambda_t * T_i
        dX_u    = err * T_i + lambda_sr * serr * B_k + lambda_x * X_u
        dB_k    = lambda_sr * serr * X_u + lambda_b * B_k
        dgamma  = err + lambda_gamma * gamma_i
    """
    i, u, k = triplet
    h = state.hyper
    xu, ti, bk = state.x[u], state.t[i], state.b[k]
    # overflow lands on the finite-guard in the step, not on a warning
    with np.errstate(over="ignore", invalid="ignore"):
        err = float(xu @ ti) + state.gamma[i] - target
        serr = float(xu @ bk) - s_uk
        g_t = err * xu + h["lambda_t"] * ti
        g_x = err * ti + h["lambda_sr"] * serr * bk + h["lambda_x"] * xu
        g_b = h["lambda_sr"] * serr * xu + h["lambda_b"] * bk
        g_gamma = err + h["lambda_gamma"] * state.gamma[i]
    return g_t, g_x, g_b, g_gamma


def sampled_triplet_loss(state, triplet, target: float, s_uk: int) -> float:
    """Half of (squared errors plus decay terms) for one triplet; its exact
    gradient is what :func:`triplet_gradients` returns."""
    i, u, k = triplet
    h = state.hyper
    xu, ti, bk = state.x[u], state.t[i], state.b[k]
    err = float(xu @ ti) + state.gamma[i] - target
    serr = float(xu @ bk) - s_uk
    return 0.5 * (
        err**2
        + h["lambda_sr"] * serr**2
        + h["lambda_x"] * float(xu @ xu)
        + h["lambda_t"] * float(ti @ ti)
        + h["lambda_b"] * float(bk @ bk)
        + h["lambda_gamma"] * state.gamma[i] ** 2
    )


def sgd_triplet_step(state, triplet, target: float, s_uk: int, lr: float):
    """One simultaneous SGD step: all four gradients evaluated at the
    current point, then applied together."""
    i, u, k = triplet
    g_t, g_x, g_b, g_gamma = triplet_gradients(state, triplet, target, s_uk)
    if not (
        np.all(np.isfinite(g_t))
        and np.all(np.isfinite(g_x))
        and np.all(np.isfinite(g_b))
        and np.isfinite(g_gamma)
    ):
        raise TrainingError(f"non-finite gradient at triplet (i={i}, u={u}, k={k})")
    state.t[i] -= lr * g_t
    state.x[u] -= lr * g_x
    state.b[k] -= lr * g_b
    state.gamma[i] -= lr * g_gamma
    return state


def _sample_negatives(y: InteractionMatrix, n: int, rng) -> np.ndarray:
    """n unobserved (u, i) pairs, rejection-sampled."""
    observed = set((y.user_idx * y.n_items + y.item_idx).tolist())
    if len(observed) >= y.n_users * y.n_items:
        raise ValueError("every pair is observed; nothing to sample")
    out = np.empty((n, 2), dtype=np.int64)
    filled = 0
    while filled < n:
        m = max(2 * (n - filled), 16)
        cand_u = rng.integers(0, y.n_users, size=m)
        cand_i = rng.integers(0, y.n_items, size=m)
        for u, i in zip(cand_u, cand_i):
            if int(u) * y.n_items + int(i) in observed:
                continue
            out[filled] = (u, i)
            filled += 1
            if filled == n:
                break
    return out


def _draw_trust_partner(graph: SocialGraph, u: int, rng) -> tuple[int, int]:
    """A trustee for u: a friend with s=1, or a random non-friend with s=0."""
    friends = graph.friends_of(u)
    if friends.size:
        return int(friends[rng.integers(friends.size)]), 1
    k = int(rng.integers(graph.n_users))
    while k == u and graph.n_users > 1:
        k = int(rng.integers(graph.n_users))
    return k, 0


def _epoch_sample(y, graph, targets: ExposureTargets, seed: int, epoch: int):
    """Triplets for one epoch: all clicks plus an equal-size fresh negative
    sample, each paired with a trust partner."""
    rng = np.random.default_rng([seed, epoch])
    pos = np.column_stack([y.user_idx, y.item_idx])
    neg = _sample_negatives(y, len(pos), rng)
    pairs = np.vstack([pos, neg])
    t_vals = np.empty(len(pairs))
    t_vals[: len(pos)] = targets.observed_per_item[pos[:, 1]]
    arr = targets.posterior
    t_vals[len(pos) :] = np.clip(
        np.asarray([arr[u, i] for u, i in neg]), MU_EPS, 1.0 - MU_EPS
    )
    partners = np.empty(len(pairs), dtype=np.int64)
    s_flags = np.empty(len(pairs), dtype=np.int64)
    for idx, (u, _) in enumerate(pairs):
        partners[idx], s_flags[idx] = _draw_trust_partner(graph, int(u), rng)
    order = rng.permutation(len(pairs))
    return pairs[order], t_vals[order], partners[order], s_flags[order]


def _sampled_objective(state, pairs, t_vals, partners, s_flags) -> float:
    """The joint objective on a fixed sample: squared prediction and trust
    errors plus the global decay terms (counted once)."""
    h = state.hyper
    u_idx = pairs[:, 0]
    i_idx = pairs[:, 1]
    with np.errstate(over="ignore", invalid="ignore"):
        pred = np.einsum("ij,ij->i", state.x[u_idx], state.t[i_idx]) + state.gamma[i_idx]
        serr = np.einsum("ij,ij->i", state.x[u_idx], state.b[partners]) - s_flags
        return float(
            np.sum((pred - t_vals) ** 2)
            + h["lambda_sr"] * np.sum(serr**2)
            + h["lambda_x"] * np.sum(state.x**2)
            + h["lambda_t"] * np.sum(state.t**2)
            + h["lambda_b"] * np.sum(state.b**2)
            + h["lambda_gamma"] * np.sum(state.gamma**2)
        )


def fit_exposure(state, y: InteractionMatrix, p, social: SocialGraph, seed: int = 0):
    """Run the configured number of SGD epochs over clicks plus negatives.

    The objective is tracked on the first epoch's sample; growth past 10x
    its starting value aborts with a hint to lower the learning rate.
    Returns the state (updated in place).
    """
    h = state.hyper
    if h["n_sgd_epochs"] == 0:
        return state
    targets = build_targets(y, p)
    lr = h["learning_rate"]
    ref = None
    initial = None
    for epoch in range(h["n_sgd_epochs"]):
        pairs, t_vals, partners, s_flags = _epoch_sample(y, social, targets, seed, epoch)
        if ref is None:
            ref = (pairs, t_vals, partners, s_flags)
            initial = _sampled_objective(state, *ref)
        try:
            for (u, i), tgt, k, s_uk in zip(pairs, t_vals, partners, s_flags):
                sgd_triplet_step(state, (int(i), int(u), int(k)), float(tgt), int(s_uk), lr)
        except TrainingError as exc:
            raise TrainingError(f"{exc}; try a smaller learning_rate") from None
        current = _sampled_objective(state, *ref)
        if current > DIVERGENCE_FACTOR * initial:
            raise TrainingError(
                f"exposure SGD diverged at epoch {epoch + 1} "
                f"(objective {current:.3g} vs initial {initial:.3g}); "
                "try a smaller learning_rate"
            )
    state.last_objective = (initial, current)
    return state


def regular_mu(state, u: int, i: int) -> float:
    """Prior for one pair: clamp(X_u . T_i + gamma_i)."""
    raw = float(state.x[u] @ state.t[i]) + float(state.gamma[i])
    return float(np.clip(raw, MU_EPS, 1.0 - MU_EPS))


class RegularExposure:
    """Low-rank social-regularized exposure prior.

    Truster/item/trustee vectors start as small seeded noise; the item
    bias gamma starts at each item's audience share so the untrained prior
    already tracks popularity.  ``refit_every`` controls how often the SGD
    refit runs across EM iterations: "once" (default, after the first
    E-step only), or a positive integer n for every n-th iteration.
    """

    kind = "serec-regular"

    def __init__(
        self,
        y: InteractionMatrix,
        graph: SocialGraph,
        k_sr: int = 30,
        lambda_sr: float = 5.0,
        lambda_x: float = 1.0,
        lambda_t: float = 1.0,
        lambda_b: float = 1.0,
        lambda_gamma: float = 1.0,
        learning_rate: float = 0.01,
        n_sgd_epochs: int = 10,
        refit_every: int | str = "once",
        seed: int = 0,
        init_scale: float = 0.01,
    ) -> None:
        if k_sr <= 0:
            raise ValueError("k_sr must be positive")
        if refit_every != "once" and (not isinstance(refit_every, int) or refit_every < 1):
            raise ValueError('refit_every must be "once" or a positive integer')
        if graph.n_users != y.n_users:
            raise ValueError("graph and interactions disagree on n_users")
        rng = np.random.default_rng(seed)
        self.x = rng.normal(0.0, init_scale, size=(y.n_users, k_sr))
        self.t = rng.normal(0.0, init_scale, size=(y.n_items, k_sr))
        self.b = rng.normal(0.0, init_scale, size=(y.n_users, k_sr))
        self.gamma = y.item_counts() / y.n_users
        self.hyper = {
            "k_sr": k_sr,
            "lambda_sr": lambda_sr,
            "lambda_x": lambda_x,
            "lambda_t": lambda_t,
            "lambda_b": lambda_b,
            "lambda_gamma": lambda_gamma,
            "learning_rate": learning_rate,
            "n_sgd_epochs": n_sgd_epochs,
        }
        self.refit_every = refit_every
        self.seed = seed
        self.graph = graph
        self.last_objective = None
        self._n_updates = 0

    def mu_block(self, j0: int, j1: int) -> np.ndarray:
        raw = self.x @ self.t[j0:j1].T + self.gamma[j0:j1]
        return np.clip(raw, MU_EPS, 1.0 - MU_EPS)

    def update(self, post, y: InteractionMatrix) -> None:
        due = (
            self._n_updates == 0
            if self.refit_every == "once"
            else self._n_updates % self.refit_every == 0
        )
        if due:
            fit_exposure(self, y, post, self.graph, seed=self.seed + self._n_updates)
        self._n_updates += 1

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        np.savetxt(out_dir / "X.tsv", self.x, fmt="%.17g", delimiter="\t")
        np.savetxt(out_dir / "T.tsv", self.t, fmt="%.17g", delimiter="\t")
        np.savetxt(out_dir / "B.tsv", self.b, fmt="%.17g", delimiter="\t")
        np.savetxt(out_dir / "gamma.tsv", self.gamma, fmt="%.17g", delimiter="\t")
        with open(out_dir / "exposure.json", "w", encoding="utf-8") as fh:
            json.dump({**self.hyper, "refit_every": self.refit_every, "seed": self.seed}, fh, indent=2)

    @classmethod
    def load(cls, model_dir, y: InteractionMatrix, graph: SocialGraph) -> "RegularExposure":
        model_dir = Path(model_dir)
        with open(model_dir / "exposure.json", encoding="utf-8") as fh:
            params = json.load(fh)
        refit = params.pop("refit_every", "once")
        seed = params.pop("seed", 0)
        provider = cls(y, graph, refit_every=refit, seed=seed, **params)
        provider.x = np.loadtxt(model_dir / "X.tsv", delimiter="\t", ndmin=2)
        provider.t = np.loadtxt(model_dir / "T.tsv", delimiter="\t", ndmin=2)
        provider.b = np.loadtxt(model_dir / "B.tsv", delimiter="\t", ndmin=2)
        provider.gamma = np.loadtxt(model_dir / "gamma.tsv", delimiter="\t", ndmin=1)
        return provider
