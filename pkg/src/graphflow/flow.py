"""Flow steps built from a conditioner, a normalizer and an adjacency mask.

Steps apply in list order on the way from data to latent; sampling inverts
them in reverse. The latent is a standard normal on ``R^d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import graph
from .autodiff import ShapeError, Value
from .conditioners import ConditionerSpec, embed_all, implied_adjacency
from .graph import AdjacencyParam, BinaryDag
from .nn import Params, load_params, save_params
from .normalizers import AffineNormalizer, DivergenceError, MonotonicNormalizer, NumericalError, make_normalizer

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class FlowStep:
    conditioner: ConditionerSpec
    normalizer: AffineNormalizer | MonotonicNormalizer
    adjacency: AdjacencyParam

    @property
    def learnable(self) -> bool:
        return self.adjacency.mode == "learnable" and not self.adjacency.is_binary


@dataclass
class FlowModel:
    d: int
    steps: list[FlowStep]
    params: Params = field(default_factory=dict)
    names: list[str] | None = None
    build: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, s in enumerate(self.steps):
            if s.conditioner.d != self.d or s.adjacency.d != self.d:
                raise ShapeError(f"step {k} has dimension {s.conditioner.d}, model has {self.d}")

    @property
    def is_binary(self) -> bool:
        return all(s.adjacency.is_binary for s in self.steps)

    @property
    def learnable_steps(self) -> list[int]:
        return [k for k, s in enumerate(self.steps) if s.learnable]

    def adjacency_leaves(self) -> dict[int, Value]:
        return {k: ad.Value(self.steps[k].adjacency.A, name=f"s{k}.A") for k in self.learnable_steps}

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def build_flow(
    d: int,
    conditioner: str = "graphical",
    normalizer: str = "affine",
    *,
    topology: np.ndarray | str | None = None,
    n_steps: int = 1,
    embed_size: int = 30,
    hidden: Sequence[int] = (100, 100, 100),
    integrand_hidden: Sequence[int] = (50, 50, 50),
    n_nodes: int = 50,
    coupling_k: int | None = None,
    adjacency_init: float = 1.0,
    temperature: float = graph.TEMPERATURE,
    alpha: float | None = None,
    double_square: bool = False,
    names: list[str] | None = None,
    rng: np.random.Generator | int | None = 0,
) -> FlowModel:
    """Build and initialize a flow.

    ``topology`` applies to graphical conditioners: a binary matrix prescribes
    the graph, ``None`` or ``"learn"`` makes it learnable.
    """
    build = dict(
        d=d, conditioner=conditioner, normalizer=normalizer, n_steps=n_steps, embed_size=embed_size,
        hidden=list(hidden), integrand_hidden=list(integrand_hidden), n_nodes=n_nodes, coupling_k=coupling_k,
        adjacency_init=adjacency_init, temperature=temperature, alpha=alpha, double_square=double_square,
    )
    rng = np.random.default_rng(rng)
    steps = []
    params: Params = {}
    for k in range(n_steps):
        cond = ConditionerSpec(conditioner, d, embed_size, list(hidden), coupling_k, name=f"s{k}.cond")
        if normalizer == "monotonic":
            norm = MonotonicNormalizer(embed_size, list(integrand_hidden), n_nodes=n_nodes, name=f"s{k}.umnn")
        elif normalizer == "affine":
            norm = AffineNormalizer(embed_size, name=f"s{k}.affine")
        else:
            make_normalizer(normalizer, embed_size)  # raises with the allowed set
        if conditioner == "graphical":
            if topology is None or (isinstance(topology, str) and topology == "learn"):
                adj = AdjacencyParam.learnable(
                    d, adjacency_init, temperature=temperature, alpha=alpha, double_square=double_square
                )
            else:
                adj = AdjacencyParam.prescribed(np.asarray(topology, dtype=np.float64))
        else:
            adj = AdjacencyParam.prescribed(implied_adjacency(cond))
        params.update(cond.init(rng))
        params.update(norm.init(rng))
        steps.append(FlowStep(cond, norm, adj))
    return FlowModel(d, steps, params, names, build)


def step_mask(step: FlowStep, A: Value | None, rng: np.random.Generator | None, training: bool):
    adj = step.adjacency
    if adj.is_binary:
        return adj.dag.matrix
    if training:
        if rng is None:
            raise ValueError("training-mode masks need an rng")
        return graph.stochastic_mask(adj, rng, A)
    return graph.expected_mask(adj, A)


def _check_finite(v: Value, what: str, step: int) -> None:
    bad = ~np.isfinite(v.data)
    if bad.any():
        dim = int(np.argwhere(bad)[0][-1])
        raise NumericalError(f"non-finite {what} in step {step}, dimension {dim}")


def forward(
    model: FlowModel,
    params,
    X,
    *,
    adjacency: dict[int, Value] | None = None,
    rng: np.random.Generator | None = None,
    training: bool = False,
    masks: dict[int, Value | np.ndarray] | None = None,
):
    """Tape forward pass.

    Returns ``(logp, z, log_det, masks)``; ``logp`` has shape ``(B,)``.
    ``masks`` may be supplied to reuse specific masks (e.g. fixed noise).
    """
    h = ad.as_value(X)
    if h.ndim != 2 or h.shape[1] != model.d:
        raise ShapeError(f"expected inputs of shape (B, {model.d}), got {h.shape}")
    adjacency = adjacency or {}
    used = {}
    log_det = None
    for k, step in enumerate(model.steps):
        mask = masks[k] if masks and k in masks else step_mask(step, adjacency.get(k), rng, training)
        used[k] = mask
        c = embed_all(step.conditioner, params, h, mask)
        h, ld = step.normalizer.apply(params, h, c)
        _check_finite(h, "latent", k)
        _check_finite(ld, "log-derivative", k)
        ld_sum = ad.vsum(ld, axis=1)
        log_det = ld_sum if log_det is None else log_det + ld_sum
    base = ad.vsum(h * h, axis=1) * -0.5 - 0.5 * model.d * LOG_2PI
    return base + log_det, h, log_det, used


def log_density(model: FlowModel, X, training: bool = False, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Log-density of each row of ``X`` and its latent (plain arrays)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    logp, z, _, _ = forward(model, model.params, X, training=training, rng=rng)
    return logp.data, z.data


def transform(model: FlowModel, X) -> np.ndarray:
    return log_density(model, X)[1]


def diag_log_jacobian(model: FlowModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return forward(model, model.params, X)[2].data


def invert_step(model: FlowModel, k: int, Z: np.ndarray, tol: float = 1e-8, max_sweeps: int | None = None):
    """Fixed-point inversion of step ``k``. Returns ``(X, sweeps)``.

    Every sweep recomputes all embeddings from the current estimate and
    inverts all dimensions. After ``s`` sweeps the nodes at depth ``< s`` are
    exact, so ``depth + 1`` sweeps suffice for a DAG mask. Raises
    ``NumericalError`` if the fixed point itself lies outside float64 range
    and ``DivergenceError`` if it is not reached within the sweep limit.
    """
    step = model.steps[k]
    if not step.adjacency.is_binary:
        raise ValueError(f"step {k} mask is not binary; post-process the adjacency before sampling")
    dag = step.adjacency.dag
    limit = dag.depth + 1 if max_sweeps is None else max_sweeps
    X = Z.copy()
    sweeps = 0
    while True:
        # Nodes that are not exact yet may overflow; an inf there would turn
        # into nan through the 0 * inf of the mask and reach exact nodes too.
        finite = np.where(np.isfinite(X), X, 0.0)
        c = embed_all(step.conditioner, model.params, finite, dag.matrix).data
        with np.errstate(over="ignore"):
            X_new = step.normalizer.invert(model.params, Z, c, tol=tol)
        both = np.isfinite(X_new) & np.isfinite(X)
        same_pattern = np.array_equal(np.isfinite(X_new), np.isfinite(X))
        delta = np.max(np.abs(X_new[both] - X[both]), initial=0.0) if same_pattern else np.inf
        X = X_new
        if delta < tol and sweeps >= 1:
            bad = ~np.isfinite(X)
            if bad.any():
                raise NumericalError(
                    f"step {k}: inverse overflows float64 in {int(bad.any(axis=1).sum())} rows"
                )
            return X, sweeps
        sweeps += 1
        if sweeps > limit:
            raise DivergenceError(
                f"step {k}: fixed point not reached after {limit} sweeps (max |dx| = {delta:.3g})"
            )


def sample(model: FlowModel, z=None, *, n: int | None = None, rng=None, tol: float = 1e-8, return_sweeps: bool = False):
    """Draw samples by inverting every step (last step first)."""
    if z is None:
        rng = np.random.default_rng(rng)
        z = rng.standard_normal((n or 1, model.d))
    Z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if Z.shape[1] != model.d:
        raise ShapeError(f"latent has dimension {Z.shape[1]}, model has {model.d}")
    sweeps = []
    X = Z
    for k in reversed(range(len(model.steps))):
        if X.shape[0] == 0:
            sweeps.append(0)
            continue
        X, s = invert_step(model, k, X, tol=tol)
        sweeps.append(s)
    return (X, sweeps[::-1]) if return_sweeps else X


def export_bn(model: FlowModel, out_dir: str | Path | None = None, names=None) -> list[tuple[str, str]]:
    """DOT and JSON text for every step's binary graph; written when ``out_dir`` is set."""
    names = names or model.names
    docs = []
    for k, step in enumerate(model.steps):
        if not step.adjacency.is_binary:
            raise ValueError(f"step {k} mask is not binary; post-process before exporting")
        dag = step.adjacency.dag
        docs.append((graph.to_dot(dag, names, graph_name=f"step{k}"), graph.to_json(dag, names)))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for k, (dot, js) in enumerate(docs):
            (out / f"graph_step{k}.dot").write_text(dot)
            (out / f"graph_step{k}.json").write_text(js)
    return docs


def binary_dags(model: FlowModel) -> list[BinaryDag]:
    return [s.adjacency.dag for s in model.steps]


MODEL_FORMAT = 1


def save_model(model: FlowModel, path: str | Path, extra: dict | None = None) -> None:
    """Parameters, adjacencies and build arguments in one container file."""
    arrays = dict(model.params)
    steps = []
    for k, s in enumerate(model.steps):
        adj = s.adjacency
        arrays[f"adj{k}.A"] = adj.A
        if adj.is_binary:
            arrays[f"adj{k}.dag"] = adj.dag.matrix
        steps.append({"mode": adj.mode, "binary": adj.is_binary,
                      "threshold": None if adj.dag is None else adj.dag.threshold})
    meta = {"format": MODEL_FORMAT, "build": model.build, "names": model.names, "steps": steps,
            "extra": extra or {}}
    save_params(path, arrays, meta)


def load_model(path: str | Path) -> tuple[FlowModel, dict]:
    """Inverse of :func:`save_model`; returns the model and the ``extra`` dict."""
    arrays, meta = load_params(path)
    if meta.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path}: unsupported model format {meta.get('format')!r}")
    b = dict(meta["build"])
    d = b.pop("d")
    conditioner, normalizer = b.pop("conditioner"), b.pop("normalizer")
    topology = None
    if conditioner == "graphical" and meta["steps"] and meta["steps"][0]["mode"] == "prescribed":
        topology = arrays["adj0.dag"]
    model = build_flow(d, conditioner, normalizer, topology=topology, names=meta.get("names"), rng=0, **b)
    for k, (step, info) in enumerate(zip(model.steps, meta["steps"])):
        adj = step.adjacency
        adj.A = arrays.pop(f"adj{k}.A")
        mat = arrays.pop(f"adj{k}.dag", None)
        if info["binary"]:
            adj.dag = graph.make_dag(mat, threshold=info["threshold"])
    missing = set(model.params) - set(arrays)
    if missing:
        raise ValueError(f"{path}: missing parameters {sorted(missing)[:3]}")
    model.params = {k: arrays[k] for k in model.params}
    return model, meta.get("extra", {})
