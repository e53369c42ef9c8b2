"""``graphflow`` command line: train, eval, sample, export and l1 sweeps.

A run directory holds ``model.bin`` (parameters, masks, run config and
standardization statistics), ``state.json``, ``history.jsonl``,
``graph_step{k}.dot/.json`` and ``metrics.json``.

Exit codes: 0 success, 2 usage or configuration error, 3 divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import data, flow, graph, trainer
from .conditioners import KINDS
from .normalizers import NumericalError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("graphflow")

METRICS_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3
NORMALIZERS = ("affine", "monotonic")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    dataset: str = "tree"
    n: int = 10_000
    n_test: int | None = None
    data_seed: int | None = None
    csv: str | None = None
    permute: bool = False
    conditioner: str = "graphical"
    normalizer: str = "affine"
    topology: str = "learn"
    n_steps: int = 1
    l1: float = 0.0
    batch_size: int = 100
    lr: float = 1e-3
    weight_decay: float = 1e-5
    embed_size: int = 30
    hidden: list[int] = field(default_factory=lambda: [100, 100, 100])
    integrand_hidden: list[int] = field(default_factory=lambda: [50, 50, 50])
    n_nodes: int = 50
    max_epochs: int = 1000
    patience: int = 10
    mu_init: float = 1e-3
    edge_floor: float = 0.2
    out: str = "runs/default"
    seed: int | None = None

    def validate(self) -> "RunConfig":
        if self.conditioner not in KINDS:
            raise UsageError(f"unknown conditioner {self.conditioner!r}; allowed: {', '.join(KINDS)}")
        if self.normalizer not in NORMALIZERS:
            raise UsageError(f"unknown normalizer {self.normalizer!r}; allowed: {', '.join(NORMALIZERS)}")
        mode = self.topology.split(":", 1)[0]
        if mode not in ("learn", "prescribed", "autoregressive", "coupling"):
            raise UsageError(
                f"unknown topology {self.topology!r}; allowed: learn, prescribed:<file>, autoregressive, coupling:<k>"
            )
        if mode == "prescribed" and self.conditioner != "graphical":
            raise UsageError("a prescribed topology needs the graphical conditioner")
        if mode in ("autoregressive", "coupling") and self.conditioner not in ("graphical", mode):
            raise UsageError(f"topology {mode!r} conflicts with conditioner {self.conditioner!r}")
        for name in ("n", "batch_size", "embed_size", "max_epochs", "n_steps"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1")
        if self.l1 < 0 or self.lr <= 0 or self.weight_decay < 0:
            raise UsageError("l1 and weight_decay must be >= 0 and lr > 0")
        return self


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return int(seed)
    env = os.environ.get("GRAPHFLOW_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"GRAPHFLOW_SEED must be an integer, got {env!r}") from None
    return 0


def load_config(path: str | Path | None, overrides: dict) -> RunConfig:
    """File values first, then non-``None`` overrides; unknown keys are errors."""
    values: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                values = tomllib.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from None
    known = {f.name for f in fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    values.update({k: v for k, v in overrides.items() if v is not None and k in known})
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    cfg.seed = resolve_seed(cfg.seed)
    return cfg.validate()


def read_topology_file(path: str | Path, d: int) -> np.ndarray:
    """Binary parent matrix from JSON (graph export or nested list) or a text matrix."""
    p = Path(path)
    if not p.exists():
        raise UsageError(f"topology file not found: {path}")
    if p.suffix == ".json":
        doc = json.loads(p.read_text())
        if isinstance(doc, dict):
            M = graph.from_json(p.read_text()).matrix
        else:
            M = np.asarray(doc, dtype=np.float64)
    else:
        M = np.loadtxt(p, delimiter="," if p.suffix == ".csv" else None, ndmin=2)
    if M.shape != (d, d):
        raise UsageError(f"topology file has shape {M.shape}, data has d={d}")
    if not np.isin(M, (0.0, 1.0)).all():
        raise UsageError("topology file must be a binary matrix")
    cycle = graph.find_cycle(M)
    if cycle is not None:
        raise UsageError(f"topology file is not acyclic: {graph.CycleError(cycle)}")
    return M


def load_bundle(cfg: RunConfig) -> data.DatasetBundle:
    seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
    try:
        if cfg.csv:
            b = data.load_csv(cfg.csv, rng=seed)
        else:
            b = data.make_dataset(cfg.dataset, n=cfg.n, seed=seed, n_test=cfg.n_test)
    except (data.ConfigError, data.ParseError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from None
    if cfg.permute:
        b = data.permute_features(b, np.random.default_rng([seed, 7]))
    return b


def build_model(cfg: RunConfig, b: data.DatasetBundle) -> flow.FlowModel:
    mode, _, arg = cfg.topology.partition(":")
    conditioner, topology, k = cfg.conditioner, None, None
    if mode == "learn" and conditioner == "coupling":
        mode = "coupling"
    if mode == "prescribed":
        topology = read_topology_file(arg, b.d)
    elif mode == "autoregressive":
        conditioner = "autoregressive"
    elif mode == "coupling":
        conditioner = "coupling"
        if arg:
            try:
                k = int(arg)
            except ValueError:
                raise UsageError(f"coupling split must be an integer, got {arg!r}") from None
    try:
        return flow.build_flow(
            b.d, conditioner, cfg.normalizer, topology=topology, n_steps=cfg.n_steps, embed_size=cfg.embed_size,
            hidden=cfg.hidden, integrand_hidden=cfg.integrand_hidden, n_nodes=cfg.n_nodes, coupling_k=k,
            names=b.columns, rng=cfg.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def train_config(cfg: RunConfig) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        batch_size=cfg.batch_size, lr=cfg.lr, weight_decay=cfg.weight_decay, l1=cfg.l1,
        max_epochs=cfg.max_epochs, patience=cfg.patience, stop_patience=cfg.patience,
        mu_init=cfg.mu_init, edge_floor=cfg.edge_floor, seed=cfg.seed,
    )


def _bundle_extra(cfg: RunConfig, b: data.DatasetBundle) -> dict:
    return {
        "run_config": asdict(cfg),
        "columns": b.columns,
        "mean": None if b.mean is None else b.mean.tolist(),
        "std": None if b.std is None else b.std.tolist(),
        "permutation": b.permutation,
        "adjacency": None if b.adjacency is None else b.adjacency.tolist(),
    }


def summarize(model: flow.FlowModel, X: np.ndarray) -> dict:
    dags = flow.binary_dags(model)
    return {
        "test_loglik_nats": trainer.mean_loglik(model, X),
        "edges": int(sum(g.n_edges for g in dags)),
        "depth": int(max(g.depth for g in dags)),
    }


def cross_edges(dag_matrix: np.ndarray, truth: np.ndarray) -> int:
    """Learned edges absent from the ground-truth skeleton (direction ignored)."""
    skeleton = (truth + truth.T) > 0
    return int(((dag_matrix > 0) & ~skeleton).sum())


def run_training(cfg: RunConfig) -> dict:
    """Train, write the run directory and return the metrics dict."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    b = load_bundle(cfg)
    model = build_model(cfg, b)
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2))
    b.write_manifest(out / "dataset.json")
    t0 = time.perf_counter()
    model, history, state = trainer.train(
        model, b.train, b.val, train_config(cfg), history_path=out / "history.jsonl"
    )
    wall = time.perf_counter() - t0
    flow.save_model(model, out / "model.bin", _bundle_extra(cfg, b))
    (out / "state.json").write_text(json.dumps(state.to_json(), indent=2))
    flow.export_bn(model, out, b.columns)
    metrics = {"version": METRICS_VERSION, **summarize(model, b.test), "epochs": len(history),
               "wall_seconds": wall}
    if b.adjacency is not None:
        metrics["cross_edges"] = cross_edges(model.steps[0].adjacency.dag.matrix, b.adjacency)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    return metrics


def _load_checkpoint(path: str | Path) -> tuple[flow.FlowModel, dict]:
    p = Path(path)
    if p.is_dir():
        p = p / "model.bin"
    if not p.exists():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return flow.load_model(p)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _standardize_with(extra: dict, X: np.ndarray) -> np.ndarray:
    if extra.get("mean") is None:
        return X
    return (X - np.asarray(extra["mean"])) / np.asarray(extra["std"])


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    metrics = run_training(cfg)
    print(json.dumps(metrics))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, extra = _load_checkpoint(args.checkpoint)
    if args.csv:
        try:
            cols, X = data.read_csv(args.csv)
        except (data.ParseError, FileNotFoundError) as exc:
            raise UsageError(str(exc)) from None
        X = _standardize_with(extra, X)
    elif extra.get("run_config"):
        cfg = RunConfig(**extra["run_config"])
        X = load_bundle(cfg).test
    else:
        raise UsageError("checkpoint has no dataset record; pass --csv")
    if X.shape[1] != model.d:
        raise UsageError(f"data has d={X.shape[1]}, checkpoint has d={model.d}")
    if not model.is_binary:
        raise UsageError("checkpoint masks are not binary; post-process before evaluating")
    metrics = {"version": METRICS_VERSION, **summarize(model, X), "n": int(X.shape[0])}
    text = json.dumps(metrics, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_sample(args) -> int:
    model, extra = _load_checkpoint(args.checkpoint)
    if not model.is_binary:
        raise UsageError("checkpoint masks are not binary; post-process the adjacency before sampling")
    if args.n < 0:
        raise UsageError("n must be >= 0")
    seed = resolve_seed(args.seed)
    X = flow.sample(model, n=args.n, rng=seed) if args.n else np.zeros((0, model.d))
    if extra.get("mean") is not None:
        X = X * np.asarray(extra["std"]) + np.asarray(extra["mean"])
    columns = extra.get("columns") or model.names or [f"x{i + 1}" for i in range(model.d)]
    data.write_csv(args.out, X, columns)
    return EXIT_OK


def cmd_export(args) -> int:
    model, extra = _load_checkpoint(args.checkpoint)
    if not model.is_binary:
        raise UsageError("checkpoint masks are not binary; nothing to export")
    flow.export_bn(model, args.out, extra.get("columns"))
    return EXIT_OK


def parse_floats(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"cannot parse number list {text!r}") from None
    if not vals:
        raise UsageError("the lambda list is empty")
    return vals


def run_sweep(cfg: RunConfig, lambdas: list[float]) -> list[dict]:
    """One run per lambda under ``cfg.out/l1_<lambda>``; divergences are recorded."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for lam in lambdas:
        run = replace(cfg, l1=lam, out=str(out / f"l1_{lam:g}"))
        row = {"l1": lam, "status": "ok", "test_loglik_nats": None, "edges": None, "cross_edges": None}
        try:
            m = run_training(run)
            row.update(test_loglik_nats=m["test_loglik_nats"], edges=m["edges"],
                       cross_edges=m.get("cross_edges"))
        except NumericalError as exc:
            row.update(status="diverged", error=str(exc))
            log.warning("l1=%g diverged: %s", lam, exc)
        rows.append(row)
    (out / "sweep.json").write_text(json.dumps({"version": METRICS_VERSION, "rows": rows}, indent=2))
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["l1", "test_loglik_nats", "edges", "cross_edges", "status"])
        for r in rows:
            w.writerow(["" if r[k] is None else r[k] for k in ("l1", "test_loglik_nats", "edges", "cross_edges", "status")])
    return rows


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    rows = run_sweep(cfg, parse_floats(args.lambdas))
    print(json.dumps(rows))
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file; flags override its values")
    p.add_argument("--dataset", help="tree, arith_circuit or <k>pairs")
    p.add_argument("--csv", help="train on a CSV file instead of a generator")
    p.add_argument("--n", type=int, help="training rows for generated data")
    p.add_argument("--n-test", type=int, dest="n_test")
    p.add_argument("--data-seed", type=int, dest="data_seed")
    p.add_argument("--permute", action="store_const", const=True, help="randomly permute the features")
    p.add_argument("--conditioner")
    p.add_argument("--normalizer")
    p.add_argument("--topology", help="learn | prescribed:<file> | autoregressive | coupling:<k>")
    p.add_argument("--n-steps", type=int, dest="n_steps")
    p.add_argument("--l1", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--embed-size", type=int, dest="embed_size")
    p.add_argument("--hidden", type=_int_list)
    p.add_argument("--integrand-hidden", type=_int_list, dest="integrand_hidden")
    p.add_argument("--n-nodes", type=int, dest="n_nodes")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--patience", type=int)
    p.add_argument("--mu-init", type=float, dest="mu_init")
    p.add_argument("--edge-floor", type=float, dest="edge_floor")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)


def _overrides(args) -> dict:
    return {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphflow", description="Graphical normalizing flows.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a flow and write a run directory")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test log-likelihood of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--csv", help="evaluate on this CSV instead of the run's test split")
    p.add_argument("--out", help="write the metrics here as well")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="draw samples to CSV")
    p.add_argument("checkpoint")
    p.add_argument("-n", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("export", help="write DOT/JSON graphs of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("sweep-l1", help="one training run per l1 value")
    _add_run_flags(p)
    p.add_argument("--lambdas", required=True, help="comma-separated l1 values")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"graphflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"graphflow: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
