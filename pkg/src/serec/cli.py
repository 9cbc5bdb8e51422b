"""Command-line front end for the full experiment cycle.

Subcommands: stats, split, train, evaluate, friend-groups, exposure-curve,
robustness, generate.  Tabular output is TSV, structured output is JSON.
Exit codes: 0 success, 1 usage error, 2 runtime failure.

Configuration precedence is command line over config file over defaults:
``--config run.json`` loads a JSON object of RunConfig fields and
``--set key=value`` (repeatable) overrides single keys.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from serec import data as dm
from serec import engine, metrics, synthetic
from serec.exposure.popularity import FixedExposure, PopularityExposure
from serec.exposure.social_boost import BoostExposure
from serec.exposure.social_regular import RegularExposure

MODEL_KINDS = ("wmf", "expomf", "serec-regular", "serec-boost")


class UsageError(Exception):
    """Bad flags or config values; maps to exit code 1."""


@dataclass
class RunConfig:
    """Every tunable in one place; defaults follow the reference setup."""

    model: str = "serec-boost"
    # factorization
    k: int = 20
    lambda_theta: float = 0.01
    lambda_beta: float = 0.01
    lambda_y: float = 0.01
    max_em_iters: int = 50
    convergence_tol: float = 1e-5
    seed: int = 0
    init_scale: float = 0.01
    n_threads: int = 0  # 0 means all available cores
    dense_budget: int = engine.DEFAULT_DENSE_BUDGET
    block_size: int = 4096
    # exposure priors
    alpha1: float = 1.0
    alpha2: float = 1.0
    s_coeff: float = 5.0
    mu_unobserved: float = 0.4
    k_sr: int = 30
    lambda_sr: float = 5.0
    lambda_x: float = 1.0
    lambda_t: float = 1.0
    lambda_b: float = 1.0
    lambda_gamma: float = 1.0
    learning_rate: float = 0.01
    n_sgd_epochs: int = 10
    refit_every: object = "once"
    # evaluation
    cutoffs: tuple = (10, 50, 100)
    target: str = "test"
    repeats: int = 1
    deterministic: bool = False

    def train_config(self) -> engine.TrainConfig:
        n_threads = 1 if self.deterministic else (self.n_threads or os.cpu_count() or 1)
        return engine.TrainConfig(
            k=self.k,
            lambda_theta=self.lambda_theta,
            lambda_beta=self.lambda_beta,
            lambda_y=self.lambda_y,
            max_em_iters=self.max_em_iters,
            convergence_tol=self.convergence_tol,
            seed=self.seed,
            init_scale=self.init_scale,
            n_threads=n_threads,
            dense_budget=self.dense_budget,
            block_size=self.block_size,
        )


def _coerce(name: str, value, current):
    if name == "refit_every":
        if value == "once":
            return value
        try:
            return int(value)
        except (TypeError, ValueError):
            raise UsageError('refit_every must be "once" or a positive integer') from None
    if name == "cutoffs":
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        return tuple(int(v) for v in value)
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        return str(value).lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def load_config(config_path: str | None, overrides: list[str] | None) -> RunConfig:
    cfg = RunConfig()
    valid = {f.name for f in dataclasses.fields(RunConfig)}
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise UsageError(f"{config_path}: config must be a JSON object")
        for key, value in loaded.items():
            if key not in valid:
                raise UsageError(f"{config_path}: unknown config key {key!r}")
            setattr(cfg, key, _coerce(key, value, getattr(cfg, key)))
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        if key not in valid:
            raise UsageError(f"--set: unknown config key {key!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        setattr(cfg, key, _coerce(key, value, getattr(cfg, key)))
    if cfg.model not in MODEL_KINDS:
        raise UsageError(f"model must be one of {', '.join(MODEL_KINDS)}")
    return cfg


def make_provider(cfg: RunConfig, y: dm.InteractionMatrix, graph: dm.SocialGraph | None):
    """Build the exposure provider for the configured model kind.

    The boost model tolerates a missing social file (it degenerates to the
    popularity prior); the regularized model cannot express itself without
    a graph and refuses.
    """
    if cfg.model == "wmf":
        return FixedExposure(y, mu_unobserved=cfg.mu_unobserved)
    if cfg.model == "expomf":
        return PopularityExposure(y, alpha1=cfg.alpha1, alpha2=cfg.alpha2)
    if cfg.model == "serec-boost":
        if graph is None:
            graph = dm.SocialGraph(y.n_users, np.empty((0, 2), dtype=np.int64))
        return BoostExposure(
            y,
            graph,
            s_coeff=cfg.s_coeff,
            alpha1=cfg.alpha1,
            alpha2=cfg.alpha2,
            dense_budget=cfg.dense_budget,
        )
    if cfg.model == "serec-regular":
        if graph is None:
            raise UsageError("serec-regular requires --social")
        return RegularExposure(
            y,
            graph,
            k_sr=cfg.k_sr,
            lambda_sr=cfg.lambda_sr,
            lambda_x=cfg.lambda_x,
            lambda_t=cfg.lambda_t,
            lambda_b=cfg.lambda_b,
            lambda_gamma=cfg.lambda_gamma,
            learning_rate=cfg.learning_rate,
            n_sgd_epochs=cfg.n_sgd_epochs,
            refit_every=cfg.refit_every,
            seed=cfg.seed,
        )
    raise UsageError(f"unknown model kind {cfg.model!r}")


def load_provider(model_dir: Path, kind: str, y, graph):
    if kind == "wmf":
        return FixedExposure.load(model_dir, y)
    if kind == "expomf":
        return PopularityExposure.load(model_dir, y)
    if kind == "serec-boost":
        if graph is None:
            graph = dm.SocialGraph(y.n_users, np.empty((0, 2), dtype=np.int64))
        return BoostExposure.load(model_dir, y, graph)
    if kind == "serec-regular":
        if graph is None:
            raise UsageError("serec-regular models need --social to reload")
        return RegularExposure.load(model_dir, y, graph)
    raise ValueError(f"model directory has unknown kind {kind!r}")


def _load_graph(path: str | None, id_map: dm.IdMap) -> dm.SocialGraph | None:
    if path is None:
        return None
    graph, _ = dm.load_social(path, id_map)
    return graph


def _parse_floats(text: str, flag: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated numbers") from None
    if not values:
        raise UsageError(f"{flag} must not be empty")
    return values


# ---------------------------------------------------------------- commands


def cmd_stats(args) -> int:
    y, id_map = dm.load_interactions(args.interactions, min_rating=args.min_rating)
    graph, load_stats = dm.load_social(args.social, id_map)
    report = dm.dataset_stats(y, graph)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    if load_stats.n_unknown_users or load_stats.n_self_loops:
        print(
            f"dropped {load_stats.n_unknown_users} edges with unknown users, "
            f"{load_stats.n_self_loops} self-loops",
            file=sys.stderr,
        )
    return 0


def cmd_split(args) -> int:
    ratios = _parse_floats(args.ratios, "--ratios")
    if len(ratios) != 2:
        raise UsageError("--ratios expects two fractions, e.g. 0.7,0.2")
    y, id_map = dm.load_interactions(args.interactions, min_rating=args.min_rating)
    split = dm.split_interactions(y, ratios=(ratios[0], ratios[1]), seed=args.seed)
    dm.save_split(args.out_dir, split, id_map)
    print(
        f"split {y.n_entries} interactions into "
        f"{split.train.n_entries}/{split.validation.n_entries}/{split.test.n_entries} "
        f"at {args.out_dir}"
    )
    return 0


def _train_once(cfg: RunConfig, train, graph):
    provider = make_provider(cfg, train, graph)
    t0 = time.perf_counter()
    result = engine.fit(train, provider, cfg.train_config())
    elapsed = time.perf_counter() - t0
    return result, provider, elapsed


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.model:
        cfg.model = args.model
        if cfg.model not in MODEL_KINDS:
            raise UsageError(f"model must be one of {', '.join(MODEL_KINDS)}")
    if args.deterministic:
        cfg.deterministic = True
    if args.repeats is not None:
        cfg.repeats = args.repeats
    if cfg.repeats < 1:
        raise UsageError("repeats must be >= 1")
    split, id_map = dm.load_split(args.split_dir)
    graph = _load_graph(args.social, id_map)
    samples = []
    result = provider = None
    for _ in range(cfg.repeats):
        res, prov, elapsed = _train_once(cfg, split.train, graph)
        samples.append(elapsed)
        if result is None:
            result, provider = res, prov
    out_dir = Path(args.out_dir)
    engine.save_model(
        out_dir,
        result,
        provider,
        cfg.train_config(),
        extra_meta={"config": dataclasses.asdict(cfg) | {"cutoffs": list(cfg.cutoffs)}},
    )
    mean = sum(samples) / len(samples)
    timing = {
        "samples": samples,
        "mean": mean,
        "max_deviation": max(abs(s - mean) for s in samples),
    }
    with open(out_dir / "timing.json", "w", encoding="utf-8") as fh:
        json.dump(timing, fh, indent=2)
    ll = result.trace[-1] if result.trace else float("nan")
    print(
        f"trained {cfg.model} for {result.n_iters} iterations "
        f"(converged={result.converged}, log-likelihood {ll:.6g}) in {mean:.2f}s"
    )
    return 0


def _evaluate_model(args, cutoffs, groups=None):
    model, meta = engine.load_model(args.model_dir)
    split, id_map = dm.load_split(args.split_dir)
    if model.n_users != split.n_users or model.n_items != split.n_items:
        raise ValueError(
            f"model is {model.n_users}x{model.n_items} but split is "
            f"{split.n_users}x{split.n_items}"
        )
    target = getattr(args, "target", "test")
    report = metrics.evaluate(
        model, meta.get("kind"), split, cutoffs=cutoffs, target=target, groups=groups
    )
    return report, model, meta, split, id_map


def cmd_evaluate(args) -> int:
    cutoffs = [int(c) for c in _parse_floats(args.cutoffs, "--cutoffs")]
    report, _, _, _, _ = _evaluate_model(args, cutoffs)
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.model_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out_dir / "report.tsv").write_text(report.to_tsv(), encoding="utf-8")
    print(report.to_table())
    return 0


def cmd_friend_groups(args) -> int:
    split, id_map = dm.load_split(args.split_dir)
    graph = _load_graph(args.social, id_map)
    groups = metrics.group_by_friends(graph)
    report, _, _, _, _ = _evaluate_model(args, cutoffs=[50], groups=groups)
    lines = ["bucket\tn_users\trecall@50"]
    for label in ("0", "1-5", "6-15", "15+"):
        if report.groups and label in report.groups:
            g = report.groups[label]
            lines.append(f"{label}\t{g['n_users']}\t{g['recall@50']:.17g}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_exposure_curve(args) -> int:
    model, meta = engine.load_model(args.model_dir)
    split, id_map = dm.load_split(args.split_dir)
    if args.user not in id_map.user_index:
        raise ValueError(f"unknown user id {args.user!r}")
    u = id_map.user_index[args.user]
    y = split.train
    graph = _load_graph(args.social, id_map)
    provider = load_provider(Path(args.model_dir), meta.get("kind"), y, graph)
    post = engine.e_step(y, model, provider)
    if meta.get("kind") == "serec-boost":
        # the stored prior is a click proxy; one refresh sweep restores the
        # training-time prior from the actual posterior
        provider.update(post, y)
        post = engine.e_step(y, model, provider)
    popularity = y.item_counts()
    mu_user = np.concatenate(
        [provider.mu_block(j0, j1)[u] for j0, j1 in engine._iter_blocks(y.n_items, 8192)]
    )
    p_user = np.asarray(post.p[u])
    edges = np.linspace(0, popularity.max() + 1, args.bins + 1)
    which = np.clip(np.digitize(popularity, edges) - 1, 0, args.bins - 1)
    lines = ["bin_lo\tbin_hi\tn_items\tmean_popularity\tmean_mu\tmean_p"]
    for b in range(args.bins):
        mask = which == b
        if not mask.any():
            continue
        lines.append(
            f"{edges[b]:.17g}\t{edges[b + 1]:.17g}\t{int(mask.sum())}\t"
            f"{popularity[mask].mean():.17g}\t{mu_user[mask].mean():.17g}\t"
            f"{p_user[mask].mean():.17g}"
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_robustness(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.model:
        cfg.model = args.model
    if args.deterministic:
        cfg.deterministic = True
    keep_probs = _parse_floats(args.keep_probs, "--keep-probs")
    if any(not 0.0 <= kp <= 1.0 for kp in keep_probs):
        raise UsageError("--keep-probs values must be in [0, 1]")
    split, id_map = dm.load_split(args.split_dir)
    graph = _load_graph(args.social, id_map)
    if graph is None:
        raise UsageError("robustness needs --social")
    cutoffs = sorted(set(int(c) for c in cfg.cutoffs))
    rows = []
    for kp in keep_probs:
        pruned = dm.prune_social(graph, kp, seed=args.seed)
        provider = make_provider(cfg, split.train, pruned)
        result = engine.fit(split.train, provider, cfg.train_config())
        report = metrics.evaluate(
            result.model, cfg.model, split, cutoffs=cutoffs, target=cfg.target
        )
        rows.append((kp, report.metrics))
    names = sorted(rows[0][1])
    lines = ["keep_prob\t" + "\t".join(names)]
    for kp, vals in rows:
        lines.append(f"{kp:g}\t" + "\t".join(f"{vals[n]:.17g}" for n in names))
    ref = max(rows, key=lambda r: r[0])[1]
    low = min(rows, key=lambda r: r[0])[1]
    decay = {
        n: (ref[n] - low[n]) / ref[n] if ref[n] != 0 else 0.0 for n in names
    }
    lines.append("decay_ratio\t" + "\t".join(f"{decay[n]:.17g}" for n in names))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_generate(args) -> int:
    spec = synthetic.SyntheticSpec(
        n_users=args.n_users,
        n_items=args.n_items,
        k=args.k,
        lambda_theta=args.lambda_theta,
        lambda_beta=args.lambda_beta,
        lambda_y=args.lambda_y,
        social_density=args.social_density,
        base_exposure=args.base_exposure,
        s_coeff=args.s_coeff,
        seed=args.seed,
    )
    y, graph, truth = synthetic.generate(spec)
    out_dir = Path(args.out_dir)
    truth_dir = out_dir / "truth"
    truth_dir.mkdir(parents=True, exist_ok=True)
    dm.write_interactions(out_dir / "interactions.tsv", y)
    dm.write_social(out_dir / "social.tsv", graph)
    np.savetxt(truth_dir / "theta.tsv", truth.theta, fmt="%.17g", delimiter="\t")
    np.savetxt(truth_dir / "beta.tsv", truth.beta, fmt="%.17g", delimiter="\t")
    np.savetxt(truth_dir / "mu.tsv", truth.mu, fmt="%.17g", delimiter="\t")
    np.savetxt(truth_dir / "alpha.tsv", truth.alpha.astype(int), fmt="%d", delimiter="\t")
    print(
        f"generated {y.n_entries} interactions over {spec.n_users} users x "
        f"{spec.n_items} items with {graph.n_edges} social edges at {out_dir}"
    )
    return 0


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_config_flags(p):
    p.add_argument("--config", help="JSON file of config overrides")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--deterministic", action="store_true", help="force single-threaded runs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="serec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="dataset statistics as JSON")
    p.add_argument("--interactions", required=True)
    p.add_argument("--social", required=True)
    p.add_argument("--min-rating", type=float, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("split", help="train/validation/test split")
    p.add_argument("--interactions", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--ratios", default="0.7,0.2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-rating", type=float, default=None)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="fit a model on a split")
    p.add_argument("--split-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--social")
    p.add_argument("--repeats", type=int, default=None, help="timing repetitions")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="ranking metrics for a trained model")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--split-dir", required=True)
    p.add_argument("--cutoffs", default="10,50,100")
    p.add_argument("--target", choices=("test", "validation"), default="test")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("friend-groups", help="recall@50 by friend-count bucket")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--split-dir", required=True)
    p.add_argument("--social", required=True)
    p.add_argument("--target", choices=("test", "validation"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_friend_groups)

    p = sub.add_parser("exposure-curve", help="prior and posterior vs item popularity")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--split-dir", required=True)
    p.add_argument("--user", required=True, help="raw user id as in the input files")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--social")
    p.add_argument("--out")
    p.set_defaults(func=cmd_exposure_curve)

    p = sub.add_parser("robustness", help="metric decay as social edges are pruned")
    p.add_argument("--split-dir", required=True)
    p.add_argument("--social", required=True)
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--keep-probs", default="1.0,0.6,0.2")
    p.add_argument("--seed", type=int, default=0, help="pruning seed")
    p.add_argument("--out")
    _add_config_flags(p)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("generate", help="sample a synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-users", type=int, default=100)
    p.add_argument("--n-items", type=int, default=150)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--lambda-theta", type=float, default=1.0)
    p.add_argument("--lambda-beta", type=float, default=1.0)
    p.add_argument("--lambda-y", type=float, default=1.0)
    p.add_argument("--social-density", type=float, default=0.05)
    p.add_argument("--base-exposure", type=float, default=0.1)
    p.add_argument("--s-coeff", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
