"""Top-N ranking evaluation: Recall@K, MAP@K, NDCG@K, friend-count groups.

Relevance is binary (implicit data).  Recall normalizes by min(k, number
of relevant items), MAP by the same; NDCG uses the binary ideal DCG.  Ties
in scores break by ascending item index so rankings are deterministic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from serec.data import DatasetSplit, SocialGraph
from serec.engine import FactorModel

DEFAULT_CUTOFFS = (10, 50, 100)
DEFAULT_FRIEND_BUCKETS = ((0, 0), (1, 5), (6, 15), (16, None))


@dataclass
class RankedList:
    """Top-n items for one user, best first, after exclusions."""

    user: int
    items: np.ndarray
    excluded: frozenset = frozenset()


@dataclass
class EvalReport:
    """Mean metric values over the evaluated users.

    ``metrics`` maps names like "recall@50" to means in [0, 1]; ``groups``
    optionally holds the same maps per friend-count bucket.
    """

    metrics: dict[str, float]
    n_users_evaluated: int
    model_kind: str | None = None
    groups: dict[str, dict] | None = None
    target: str = "test"

    def to_json(self) -> str:
        payload = {
            "metrics": self.metrics,
            "n_users_evaluated": self.n_users_evaluated,
            "model_kind": self.model_kind,
            "target": self.target,
        }
        if self.groups is not None:
            payload["groups"] = self.groups
        return json.dumps(payload, indent=2)

    def to_table(self) -> str:
        """Aligned metric-per-row text table."""
        rows = [("metric", "value")]
        rows += [(name, f"{val:.4f}") for name, val in sorted(self.metrics.items())]
        width = max(len(r[0]) for r in rows)
        lines = [f"{name.ljust(width)}  {val}" for name, val in rows]
        lines.append(f"{'n_users'.ljust(width)}  {self.n_users_evaluated}")
        return "\n".join(lines)

    def to_tsv(self) -> str:
        lines = ["metric\tvalue"]
        lines += [f"{name}\t{val:.17g}" for name, val in sorted(self.metrics.items())]
        return "\n".join(lines) + "\n"


def rank_items(scores: np.ndarray, excluded, n: int) -> RankedList:
    """Indices of the n best-scoring items, excluded ones removed first.

    Stable argsort of the negated scores: equal scores rank by ascending
    item index.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    scores = np.asarray(scores)
    order = np.argsort(-scores, kind="stable")
    exc = frozenset(int(e) for e in excluded)
    if exc:
        keep = np.fromiter((i not in exc for i in order), dtype=bool, count=len(order))
        order = order[keep]
    return RankedList(user=-1, items=order[:n], excluded=exc)


def _check_relevant(relevant) -> set:
    rel = set(int(r) for r in relevant)
    if not rel:
        raise ValueError("relevant set is empty; user should be skipped, not scored")
    return rel


def recall_at_k(ranked: RankedList, relevant, k: int) -> float:
    rel = _check_relevant(relevant)
    hits = sum(1 for i in ranked.items[:k] if int(i) in rel)
    return hits / min(k, len(rel))


def map_at_k(ranked: RankedList, relevant, k: int) -> float:
    """Average precision at k, normalized by min(k, |relevant|)."""
    rel = _check_relevant(relevant)
    hits = 0
    total = 0.0
    for rank, item in enumerate(ranked.items[:k], start=1):
        if int(item) in rel:
            hits += 1
            total += hits / rank
    return total / min(k, len(rel))


def ndcg_at_k(ranked: RankedList, relevant, k: int) -> float:
    rel = _check_relevant(relevant)
    dcg = sum(
        1.0 / math.log2(rank + 1)
        for rank, item in enumerate(ranked.items[:k], start=1)
        if int(item) in rel
    )
    idcg = sum(1.0 / math.log2(rank + 1) for rank in range(1, min(k, len(rel)) + 1))
    return dcg / idcg


def _per_user_metrics(
    model: FactorModel, split: DatasetSplit, cutoffs, target: str
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Metric arrays (one entry per evaluated user) plus the user indices."""
    if target not in ("test", "validation"):
        raise ValueError('target must be "test" or "validation"')
    if model.n_users != split.n_users or model.n_items != split.n_items:
        raise ValueError("model and split disagree on dimensions")
    cutoffs = sorted(int(c) for c in cutoffs)
    if not cutoffs or cutoffs[0] < 1:
        raise ValueError("cutoffs must be positive")
    target_matrix = split.test if target == "test" else split.validation
    names = [
        f"{metric}@{k}" for metric in ("recall", "map", "ndcg") for k in cutoffs
    ]
    values: dict[str, list[float]] = {name: [] for name in names}
    users = []
    n_max = max(cutoffs)
    for u in range(split.n_users):
        excluded = set(split.train.items_of(u).tolist())
        if target == "test":
            excluded |= set(split.validation.items_of(u).tolist())
        relevant = set(target_matrix.items_of(u).tolist()) - excluded
        if not relevant:
            continue
        scores = model.beta @ model.theta[u]
        ranked = rank_items(scores, excluded, n_max)
        ranked.user = u
        for k in cutoffs:
            values[f"recall@{k}"].append(recall_at_k(ranked, relevant, k))
            values[f"map@{k}"].append(map_at_k(ranked, relevant, k))
            values[f"ndcg@{k}"].append(ndcg_at_k(ranked, relevant, k))
        users.append(u)
    if not users:
        raise ValueError("no users with relevant items in the target split")
    return {name: np.asarray(vals) for name, vals in values.items()}, np.asarray(users)


def evaluate(
    model: FactorModel,
    exposure_kind: str | None,
    split: DatasetSplit,
    cutoffs=DEFAULT_CUTOFFS,
    target: str = "test",
    groups: dict[str, np.ndarray] | None = None,
) -> EvalReport:
    """Rank by preference scores and average the metrics over users.

    Target "test" excludes each user's train and validation items from the
    candidate list; "validation" excludes train items.  Users with no
    relevant items in the target split are skipped.  Exposure never enters
    the ranking; ``exposure_kind`` is recorded for reporting only.  When
    ``groups`` maps labels to user-index arrays, per-group means are
    reported alongside the overall ones.
    """
    per_user, users = _per_user_metrics(model, split, cutoffs, target)
    report = EvalReport(
        metrics={name: float(vals.mean()) for name, vals in per_user.items()},
        n_users_evaluated=len(users),
        model_kind=exposure_kind,
        target=target,
    )
    if groups is not None:
        position = {int(u): idx for idx, u in enumerate(users)}
        report.groups = {}
        for label, members in groups.items():
            idx = [position[int(u)] for u in members if int(u) in position]
            if not idx:
                continue
            report.groups[label] = {
                "n_users": len(idx),
                **{name: float(vals[idx].mean()) for name, vals in per_user.items()},
            }
    return report


def group_by_friends(graph: SocialGraph, buckets=DEFAULT_FRIEND_BUCKETS) -> dict[str, np.ndarray]:
    """Partition users by out-degree into labeled buckets.

    Default buckets follow the usual presentation: 0, 1-5, 6-15, and 15+
    friends, where "15+" means degree 16 or more.  Buckets must not
    overlap and must cover every observed degree.
    """
    spans = []
    for lo, hi in buckets:
        if hi is not None and hi < lo:
            raise ValueError(f"bucket ({lo}, {hi}) is inverted")
        spans.append((int(lo), None if hi is None else int(hi)))
    spans_sorted = sorted(spans, key=lambda s: s[0])
    for (lo1, hi1), (lo2, _) in zip(spans_sorted, spans_sorted[1:]):
        if hi1 is None or lo2 <= hi1:
            raise ValueError("buckets overlap")
    degrees = graph.out_degree()
    out: dict[str, np.ndarray] = {}
    assigned = np.zeros(graph.n_users, dtype=bool)
    for lo, hi in spans:
        if lo == hi:
            label = str(lo)
        elif hi is None:
            label = f"{lo - 1}+"
        else:
            label = f"{lo}-{hi}"
        mask = degrees >= lo if hi is None else (degrees >= lo) & (degrees <= hi)
        out[label] = np.flatnonzero(mask)
        assigned |= mask
    if not assigned.all():
        missing = degrees[~assigned]
        raise ValueError(f"degrees {sorted(set(missing.tolist()))} fall in no bucket")
    return out
