"""EM inference for exposure-aware matrix factorization.

Clicks y_ui are modeled through a latent exposure bit alpha_ui: a click is
impossible without exposure, and given exposure the response is Gaussian
around the preference score theta_u . beta_i with precision lambda_y.  The
exposure prior mu_ui comes from a pluggable provider; this module is
generic over providers and alternates

    E-step   p_ui = E[alpha_ui | y_ui]           (Bayes rule per pair)
    M-step   ridge solves for theta and beta weighted by p
    prior    provider.update(posterior, y)

Provider protocol (duck-typed):
    mu_block(j0, j1) -> (n_users, j1 - j0) array of priors in [0, 1]
    update(posterior, y) -> None        refresh internal state from p
    kind -> str                         short model name for persistence
    save(dir_path) -> None              write provider state files
    bypass_bayes -> bool (optional)     when True the E-step stores the
                                        prior directly as p (fixed-weight
                                        mode; clicked pairs still get 1)
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from serec.data import InteractionMatrix

MU_EPS = 1e-6
DEFAULT_DENSE_BUDGET = 200_000_000  # posterior entries kept in RAM
META_NAME = "meta.json"


class TrainingError(RuntimeError):
    """Raised when training produces non-finite values or diverges."""


@dataclass
class TrainConfig:
    """Hyperparameters for :func:`fit`.

    Defaults follow the reference configuration: K=20 latent factors and
    0.01 for all three precisions.
    """

    k: int = 20
    lambda_theta: float = 0.01
    lambda_beta: float = 0.01
    lambda_y: float = 0.01
    max_em_iters: int = 50
    convergence_tol: float = 1e-5
    seed: int = 0
    init_scale: float = 0.01
    n_threads: int = 1
    dense_budget: int = DEFAULT_DENSE_BUDGET
    block_size: int = 4096

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("k must be positive")
        for name in ("lambda_theta", "lambda_beta", "lambda_y", "init_scale", "convergence_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_em_iters < 0:
            raise ValueError("max_em_iters must be >= 0")
        if self.n_threads < 1 or self.block_size < 1:
            raise ValueError("n_threads and block_size must be >= 1")


@dataclass
class FactorModel:
    """User and item latent factors with their precision hyperparameters."""

    theta: np.ndarray  # (n_users, k)
    beta: np.ndarray  # (n_items, k)
    lambda_theta: float = 0.01
    lambda_beta: float = 0.01
    lambda_y: float = 0.01

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.theta.ndim != 2 or self.beta.ndim != 2:
            raise ValueError("theta and beta must be 2-d")
        if self.theta.shape[1] != self.beta.shape[1]:
            raise ValueError("theta and beta disagree on k")
        if min(self.lambda_theta, self.lambda_beta, self.lambda_y) <= 0:
            raise ValueError("precisions must be positive")

    @property
    def n_users(self) -> int:
        return self.theta.shape[0]

    @property
    def n_items(self) -> int:
        return self.beta.shape[0]

    @property
    def k(self) -> int:
        return self.theta.shape[1]

    def validate_finite(self, where: str = "model") -> None:
        if not np.all(np.isfinite(self.theta)) or not np.all(np.isfinite(self.beta)):
            raise TrainingError(f"non-finite factor values in {where}")


class ExposurePosterior:
    """Storage for p_ui = E[alpha_ui | y_ui] over all user-item pairs.

    Held densely in RAM while n_users * n_items fits the budget, otherwise
    spilled to a disk-backed memmap and processed in item blocks.  Either
    way ``.p`` supports the same slicing, so callers never branch.
    """

    def __init__(
        self,
        provider,
        n_users: int,
        n_items: int,
        dense_budget: int = DEFAULT_DENSE_BUDGET,
        storage_dir: str | None = None,
    ) -> None:
        self.provider = provider
        self.n_users = n_users
        self.n_items = n_items
        self._tmpdir = None
        if n_users * n_items <= dense_budget:
            self.p = np.zeros((n_users, n_items), dtype=np.float64)
        else:
            if storage_dir is None:
                self._tmpdir = tempfile.mkdtemp(prefix="serec-posterior-")
                storage_dir = self._tmpdir
            path = os.path.join(storage_dir, "posterior.dat")
            self.p = np.memmap(path, dtype=np.float64, mode="w+", shape=(n_users, n_items))

    @property
    def is_dense(self) -> bool:
        return not isinstance(self.p, np.memmap)

    def close(self) -> None:
        """Release the backing file if the posterior was spilled to disk."""
        if isinstance(self.p, np.memmap):
            path = self.p.filename
            del self.p
            self.p = np.zeros((0, 0))
            try:
                os.unlink(path)
                if self._tmpdir is not None:
                    os.rmdir(self._tmpdir)
            except OSError:
                pass


@dataclass
class FitResult:
    model: FactorModel
    trace: list[float]
    converged: bool
    n_iters: int
    posterior: ExposurePosterior | None = field(default=None, repr=False)


def _iter_blocks(n: int, size: int):
    for j0 in range(0, n, size):
        yield j0, min(j0 + size, n)


def _log_pdf_const(lambda_y: float) -> float:
    return 0.5 * math.log(lambda_y / (2.0 * math.pi))


def _gaussian_pdf0(scores: np.ndarray, lambda_y: float) -> np.ndarray:
    """Density of N(mean=scores, var=1/lambda_y) evaluated at 0."""
    return math.sqrt(lambda_y / (2.0 * math.pi)) * np.exp(-0.5 * lambda_y * scores**2)


def e_step_pair(mu, score, lambda_y: float):
    """Posterior exposure probability for an unclicked pair.

    Bayes rule over alpha in {0, 1}: the prior mu against the evidence
    that a zero response is certain without exposure but Gaussian around
    ``score`` with it.  Exact at mu = 0 and mu = 1.  Accepts scalars or
    arrays (broadcast together).
    """
    mu = np.asarray(mu, dtype=np.float64)
    num = mu * _gaussian_pdf0(np.asarray(score, dtype=np.float64), lambda_y)
    out = num / (num + (1.0 - mu))
    if out.ndim == 0:
        return float(out)
    return out


def _clicked_in_block(y: InteractionMatrix, j0: int, j1: int):
    """Row indices and block-local column indices of clicks in items [j0, j1)."""
    csc = y.to_csc()
    start, end = csc.indptr[j0], csc.indptr[j1]
    rows = csc.indices[start:end]
    counts = np.diff(csc.indptr[j0 : j1 + 1])
    cols = np.repeat(np.arange(j1 - j0), counts)
    return rows, cols


def _provider_mu_block(provider, y: InteractionMatrix, j0: int, j1: int) -> np.ndarray:
    mu = np.asarray(provider.mu_block(j0, j1), dtype=np.float64)
    if mu.shape != (y.n_users, j1 - j0):
        raise ValueError(
            f"provider returned mu of shape {mu.shape}, expected {(y.n_users, j1 - j0)}"
        )
    if not np.all(np.isfinite(mu)) or mu.min() < 0.0 or mu.max() > 1.0:
        raise ValueError("provider contract violation: mu outside [0, 1]")
    return mu


def e_step(
    y: InteractionMatrix,
    model: FactorModel,
    provider,
    out: ExposurePosterior | None = None,
    block_size: int = 4096,
) -> ExposurePosterior:
    """Fill the exposure posterior for every pair.

    Clicked pairs get p = 1 exactly; unclicked pairs get the Bayes update
    of the provider's prior against the Gaussian evidence at 0.  Providers
    flagged ``bypass_bayes`` have their prior stored as p directly (the
    fixed-weight mode).  Priors are clamped to [1e-6, 1 - 1e-6] before the
    Bayes rule so the posterior stays numerically stable; values outside
    [0, 1] are a provider contract violation and raise.
    """
    if model.n_users != y.n_users or model.n_items != y.n_items:
        raise ValueError("model and interaction matrix disagree on dimensions")
    post = out if out is not None else ExposurePosterior(provider, y.n_users, y.n_items)
    bypass = bool(getattr(provider, "bypass_bayes", False))
    for j0, j1 in _iter_blocks(y.n_items, block_size):
        mu = _provider_mu_block(provider, y, j0, j1)
        if bypass:
            p_block = np.array(mu, dtype=np.float64)
        else:
            mu = np.clip(mu, MU_EPS, 1.0 - MU_EPS)
            scores = model.theta @ model.beta[j0:j1].T
            num = mu * _gaussian_pdf0(scores, model.lambda_y)
            p_block = num / (num + (1.0 - mu))
        rows, cols = _clicked_in_block(y, j0, j1)
        p_block[rows, cols] = 1.0
        post.p[:, j0:j1] = p_block
    return post


def _posterior_array(p) -> np.ndarray:
    return p.p if isinstance(p, ExposurePosterior) else np.asarray(p)


def _clicked_weights(y: InteractionMatrix, p_arr) -> np.ndarray:
    """p values at the clicked pairs, in entry order."""
    # memmap-safe: row-wise gather instead of one giant fancy index
    out = np.empty(y.n_entries, dtype=np.float64)
    csr = y.to_csr()
    for u in range(y.n_users):
        s, e = csr.indptr[u], csr.indptr[u + 1]
        if s != e:
            out[s:e] = p_arr[u][csr.indices[s:e]]
    return out


def _run_phase(work, n_rows: int, n_threads: int) -> None:
    """Run ``work(lo, hi)`` over row chunks, in threads when asked.

    Chunks write disjoint output rows, so the phase needs no locking; the
    executor shutdown is the barrier before the next phase.
    """
    if n_threads <= 1 or n_rows < 2:
        work(0, n_rows)
        return
    n_chunks = min(n_threads * 4, n_rows)
    bounds = np.linspace(0, n_rows, n_chunks + 1).astype(int)
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        futures = [
            pool.submit(work, int(lo), int(hi))
            for lo, hi in zip(bounds[:-1], bounds[1:])
            if lo < hi
        ]
        for f in futures:
            f.result()


def _ridge_update(
    p_arr,
    grams: np.ndarray,
    clicked_rhs: np.ndarray,
    factors: np.ndarray,
    lambda_y: float,
    lambda_reg: float,
    n_threads: int,
    transpose: bool,
) -> np.ndarray:
    """Shared body of the two factor updates.

    Solves, for every row u of the output,
        (lambda_y * sum_j p_uj f_j f_j^T + lambda_reg I) x = clicked_rhs[u]
    where f ranges over the opposite side's factor rows.  ``grams`` holds
    the flattened outer products f_j f_j^T, so the weighted sum is one
    matmul per chunk.  ``transpose`` selects columns of p instead of rows
    (the item update).
    """
    k = factors.shape[1]
    n_out = clicked_rhs.shape[0]
    out = np.empty((n_out, k), dtype=np.float64)
    diag = np.arange(k)

    def work(lo: int, hi: int) -> None:
        if transpose:
            p_chunk = np.ascontiguousarray(p_arr[:, lo:hi].T)
        else:
            p_chunk = np.asarray(p_arr[lo:hi])
        a = lambda_y * (p_chunk @ grams).reshape(-1, k, k)
        a[:, diag, diag] += lambda_reg
        out[lo:hi] = np.linalg.solve(a, clicked_rhs[lo:hi, :, None])[:, :, 0]

    _run_phase(work, n_out, n_threads)
    return out


def update_user_factors(
    y: InteractionMatrix, p, model: FactorModel, n_threads: int = 1
) -> np.ndarray:
    """Exact per-user ridge solve of the M-step.

    theta_u = (lambda_y * sum_i p_ui beta_i beta_i^T + lambda_theta I)^-1
              (lambda_y * sum_{i clicked} p_ui beta_i)

    The left-hand sum runs over all items; only clicks contribute to the
    right-hand side.  Unique minimizer since lambda_theta > 0.
    """
    p_arr = _posterior_array(p)
    beta = model.beta
    v, k = beta.shape
    grams = (beta[:, :, None] * beta[:, None, :]).reshape(v, k * k)
    w = y.to_csr().copy()
    w.data = _clicked_weights(y, p_arr)
    rhs = model.lambda_y * (w @ beta)
    return _ridge_update(
        p_arr, grams, rhs, beta, model.lambda_y, model.lambda_theta, n_threads, transpose=False
    )


def update_item_factors(
    y: InteractionMatrix, p, model: FactorModel, n_threads: int = 1
) -> np.ndarray:
    """Per-item ridge solve, the mirror image of the user update."""
    p_arr = _posterior_array(p)
    theta = model.theta
    u, k = theta.shape
    grams = (theta[:, :, None] * theta[:, None, :]).reshape(u, k * k)
    w = y.to_csr().copy()
    w.data = _clicked_weights(y, p_arr)
    rhs = model.lambda_y * (w.T @ theta)
    return _ridge_update(
        p_arr, grams, rhs, theta, model.lambda_y, model.lambda_beta, n_threads, transpose=True
    )


def log_likelihood(
    y: InteractionMatrix, model: FactorModel, provider, block_size: int = 4096
) -> float:
    """Marginal log likelihood of the clicks plus the Gaussian factor priors.

    Unclicked pairs contribute log(mu * N(0 | score) + 1 - mu), computed
    via logaddexp so mu = 0 and mu = 1 are exact; clicked pairs contribute
    log(mu * N(1 | score)).  A clicked pair with mu = 0 is inconsistent
    (zero exposure prior, observed click) and raises.
    """
    total = -0.5 * model.lambda_theta * float(np.sum(model.theta**2))
    total += -0.5 * model.lambda_beta * float(np.sum(model.beta**2))
    log_c = _log_pdf_const(model.lambda_y)
    ly = model.lambda_y
    for j0, j1 in _iter_blocks(y.n_items, block_size):
        mu = _provider_mu_block(provider, y, j0, j1)
        scores = model.theta @ model.beta[j0:j1].T
        log_n0 = log_c - 0.5 * ly * scores**2
        with np.errstate(divide="ignore"):  # exact mu in {0, 1} is legal here
            unobs = np.logaddexp(np.log(mu) + log_n0, np.log1p(-mu))
        rows, cols = _clicked_in_block(y, j0, j1)
        if rows.size:
            mu_obs = mu[rows, cols]
            if np.any(mu_obs == 0.0):
                raise ValueError("observed click with zero exposure prior")
            s_obs = scores[rows, cols]
            obs = np.log(mu_obs) + log_c - 0.5 * ly * (1.0 - s_obs) ** 2
            total += float(np.sum(obs)) - float(np.sum(unobs[rows, cols]))
        total += float(np.sum(unobs))
    return total


def fit(train: InteractionMatrix, provider, cfg: TrainConfig) -> FitResult:
    """Alternate E-step, factor solves, and provider updates until converged.

    Initialization draws theta then beta from seeded zero-mean Gaussians of
    scale ``cfg.init_scale`` (this order is part of the reproducibility
    contract).  Each iteration runs {E-step; theta solve; beta solve with
    the new theta; provider.update}, then records the log likelihood.
    Stops when the relative likelihood change drops below
    ``cfg.convergence_tol`` or after ``max_em_iters`` iterations.
    """
    rng = np.random.default_rng(cfg.seed)
    theta = rng.normal(0.0, cfg.init_scale, size=(train.n_users, cfg.k))
    beta = rng.normal(0.0, cfg.init_scale, size=(train.n_items, cfg.k))
    model = FactorModel(theta, beta, cfg.lambda_theta, cfg.lambda_beta, cfg.lambda_y)
    post = ExposurePosterior(provider, train.n_users, train.n_items, cfg.dense_budget)
    trace: list[float] = []
    converged = False
    n_iters = 0
    for it in range(1, cfg.max_em_iters + 1):
        n_iters = it
        e_step(train, model, provider, out=post, block_size=cfg.block_size)
        model.theta = update_user_factors(train, post, model, cfg.n_threads)
        model.beta = update_item_factors(train, post, model, cfg.n_threads)
        try:
            model.validate_finite(f"EM iteration {it}")
        except TrainingError:
            raise TrainingError(f"non-finite factors after EM iteration {it}") from None
        provider.update(post, train)
        ll = log_likelihood(train, model, provider, block_size=cfg.block_size)
        if not math.isfinite(ll):
            raise TrainingError(f"non-finite log likelihood at EM iteration {it}")
        trace.append(ll)
        if len(trace) >= 2:
            prev = trace[-2]
            if abs(ll - prev) / max(abs(prev), 1e-12) < cfg.convergence_tol:
                converged = True
                break
    return FitResult(model=model, trace=trace, converged=converged, n_iters=n_iters, posterior=post)


def predict_scores(model: FactorModel, u: int) -> np.ndarray:
    """Preference scores theta_u . beta_i for all items.

    Exposure never enters ranking; it only reweights training.
    """
    if not 0 <= u < model.n_users:
        raise IndexError(f"user index {u} out of range")
    return model.beta @ model.theta[u]


def save_model(
    out_dir: str | Path,
    result: FitResult,
    provider,
    cfg: TrainConfig,
    extra_meta: dict | None = None,
) -> None:
    """Write theta/beta TSVs, provider state, and a meta.json manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savetxt(out_dir / "theta.tsv", result.model.theta, fmt="%.17g", delimiter="\t")
    np.savetxt(out_dir / "beta.tsv", result.model.beta, fmt="%.17g", delimiter="\t")
    meta = {
        "kind": getattr(provider, "kind", "unknown"),
        "k": result.model.k,
        "n_users": result.model.n_users,
        "n_items": result.model.n_items,
        "lambda_theta": result.model.lambda_theta,
        "lambda_beta": result.model.lambda_beta,
        "lambda_y": result.model.lambda_y,
        "seed": cfg.seed,
        "n_iters": result.n_iters,
        "converged": result.converged,
        "final_log_likelihood": result.trace[-1] if result.trace else None,
    }
    if extra_meta:
        meta.update(extra_meta)
    with open(out_dir / META_NAME, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
    with open(out_dir / "trace.tsv", "w", encoding="utf-8") as fh:
        fh.write("iteration\tlog_likelihood\n")
        for i, ll in enumerate(result.trace, start=1):
            fh.write(f"{i}\t{ll:.17g}\n")
    if hasattr(provider, "save"):
        provider.save(out_dir)


def load_model(model_dir: str | Path) -> tuple[FactorModel, dict]:
    """Read back the factor matrices and the meta manifest."""
    model_dir = Path(model_dir)
    with open(model_dir / META_NAME, encoding="utf-8") as fh:
        meta = json.load(fh)
    theta = np.loadtxt(model_dir / "theta.tsv", delimiter="\t", ndmin=2)
    beta = np.loadtxt(model_dir / "beta.tsv", delimiter="\t", ndmin=2)
    model = FactorModel(
        theta,
        beta,
        lambda_theta=meta["lambda_theta"],
        lambda_beta=meta["lambda_beta"],
        lambda_y=meta["lambda_y"],
    )
    return model, meta
