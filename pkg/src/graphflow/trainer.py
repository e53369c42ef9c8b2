"""Augmented-Lagrangian training of graphical flows.

Each batch maximizes

    mean log p(x) - l1 * mean(A') - lam * w(A') - mu/2 * w(A')^2

with one Gumbel draw of ``A'`` per batch. When the validation loss stalls for
``patience`` epochs the multipliers are updated; once ``w`` of the noise-free
mask drops below ``dag_threshold`` the adjacency is thresholded into a DAG,
frozen, and training continues on the network parameters alone.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import graph
from .flow import FlowModel, forward
from .nn import AdamState, adam_step
from .normalizers import NumericalError

log = logging.getLogger(__name__)


class TrainingDiverged(NumericalError):
    """Non-finite loss; ``model`` holds the last good parameters."""

    def __init__(self, msg: str, model: FlowModel | None = None, history: list | None = None):
        super().__init__(msg)
        self.model = model
        self.history = history or []


@dataclass
class TrainConfig:
    batch_size: int = 100
    lr: float = 1e-3
    weight_decay: float = 1e-5
    adjacency_lr: float | None = None
    l1: float = 0.0
    l1_reduction: str = "mean"
    max_epochs: int = 1000
    patience: int = 10
    stop_patience: int = 10
    lambda_init: float = 0.0
    mu_init: float = 1e-3
    mu_factor: float = 10.0
    progress_ratio: float = 0.9
    mu_max: float = 1e16
    dag_threshold: float = 1e-8
    edge_floor: float = 0.2
    eval_batch: int = 500
    seed: int = 0


@dataclass
class TrainState:
    lam: float = 0.0
    mu: float = 1.0
    l1: float = 0.0
    l1_reduction: str = "mean"
    epoch: int = 0
    best_val: float = math.inf
    bad_epochs: int = 0
    w_prev: float = math.inf
    post_processed: bool = False
    n_dual_updates: int = 0
    seed: int = 0
    mu_factor: float = 10.0
    progress_ratio: float = 0.9
    mu_max: float = 1e16
    adam_theta: AdamState = field(default_factory=AdamState)
    adam_adj: AdamState = field(default_factory=AdamState)

    def to_json(self) -> dict:
        doc = {k: v for k, v in asdict(self).items() if k not in ("adam_theta", "adam_adj")}
        doc["adam_theta"] = self.adam_theta.to_json()
        doc["adam_adj"] = self.adam_adj.to_json()
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in doc.items()}


def batch_objective(model: FlowModel, params, X, state: TrainState, *, adjacency=None, rng=None, masks=None):
    """Scalar objective to maximize and a dict of its parts (plain floats).

    ``adjacency`` maps step index to the bound ``A`` leaf. Models without a
    learnable mask get the bare mean log-likelihood.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("batch_objective: empty batch")
    learnable = model.learnable_steps
    logp, _, _, used = forward(
        model, params, X, adjacency=adjacency, rng=rng, training=bool(learnable), masks=masks
    )
    loglik = ad.mean(logp)
    info = {"loglik": float(loglik.data)}
    if not learnable:
        return loglik, info
    obj = loglik
    w_total = None
    l1_total = None
    for k in learnable:
        M = ad.as_value(used[k])
        l1 = ad.vsum(M) if state.l1_reduction == "sum" else ad.mean(M)
        w = graph.acyclicity_penalty(M, model.steps[k].adjacency.alpha)
        l1_total = l1 if l1_total is None else l1_total + l1
        w_total = w if w_total is None else w_total + w
    obj = obj - state.l1 * l1_total - state.lam * w_total - (0.5 * state.mu) * (w_total * w_total)
    info.update(l1=float(l1_total.data), w=float(w_total.data))
    if not np.isfinite(obj.data):
        amax = max(float(np.abs(model.steps[k].adjacency.A).max()) for k in learnable)
        raise NumericalError(f"non-finite objective (w={info['w']:.4g}, max|A|={amax:.4g})")
    return obj, info


def dual_update(state: TrainState, w_val: float) -> TrainState:
    """``lam += mu * w``; ``mu *= 10`` unless ``w`` shrank below 0.9 of its last value."""
    state.lam = state.lam + state.mu * w_val
    if w_val > state.progress_ratio * state.w_prev:
        state.mu = min(state.mu * state.mu_factor, state.mu_max)
    state.w_prev = w_val
    state.n_dual_updates += 1
    return state


def mean_loglik(model: FlowModel, X: np.ndarray, chunk: int = 500) -> float:
    """Average log-likelihood under noise-free (or binary) masks."""
    total = 0.0
    for start in range(0, X.shape[0], chunk):
        logp, _, _, _ = forward(model, model.params, X[start : start + chunk])
        total += float(logp.data.sum())
    return total / X.shape[0]


def current_w(model: FlowModel) -> float:
    w = 0.0
    for k in model.learnable_steps:
        adj = model.steps[k].adjacency
        w += float(graph.acyclicity_penalty(graph.expected_mask(adj), adj.alpha).data)
    return w


def edge_count(model: FlowModel) -> int:
    n = 0
    for step in model.steps:
        adj = step.adjacency
        n += adj.dag.n_edges if adj.is_binary else int((graph.expected_mask(adj).data > 0.5).sum())
    return n


def post_process(model: FlowModel, edge_floor: float = 0.0) -> None:
    """Threshold every learnable mask; entries with ``|A| <= edge_floor`` never become edges."""
    for k in model.learnable_steps:
        model.steps[k].adjacency.freeze(edge_floor)


def _snapshot(model: FlowModel):
    return {k: v.copy() for k, v in model.params.items()}, [copy.deepcopy(s.adjacency) for s in model.steps]


def _restore(model: FlowModel, snap) -> None:
    params, adjs = snap
    model.params = {k: v.copy() for k, v in params.items()}
    for s, a in zip(model.steps, adjs):
        s.adjacency = copy.deepcopy(a)


def train(
    model: FlowModel,
    train_X: np.ndarray,
    val_X: np.ndarray,
    config: TrainConfig | None = None,
    *,
    history_path: str | Path | None = None,
    callback=None,
) -> tuple[FlowModel, list[dict], TrainState]:
    """Run the main loop; returns the best-validation model, history and final state.

    On a learnable run the returned model always has binary masks: if the
    epoch cap is hit before the constraint vanishes, the adjacency is
    thresholded at the end.
    """
    cfg = config or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    state = TrainState(
        lam=cfg.lambda_init, mu=cfg.mu_init, l1=cfg.l1, l1_reduction=cfg.l1_reduction, seed=cfg.seed,
        mu_factor=cfg.mu_factor, progress_ratio=cfg.progress_ratio, mu_max=cfg.mu_max,
        adam_theta=AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay),
        adam_adj=AdamState(lr=cfg.adjacency_lr or cfg.lr),
    )
    learning_graph = bool(model.learnable_steps)
    state.post_processed = False
    history: list[dict] = []
    hist_fh = open(history_path, "w") if history_path else None
    best = _snapshot(model)
    last_good = best
    n = train_X.shape[0]
    try:
        for epoch in range(cfg.max_epochs):
            t0 = time.perf_counter()
            order = rng.permutation(n)
            losses, nlls = [], []
            for start in range(0, n, cfg.batch_size):
                Xb = train_X[order[start : start + cfg.batch_size]]
                bound = ad.bind(model.params)
                adj_leaves = model.adjacency_leaves()
                try:
                    obj, info = batch_objective(model, bound, Xb, state, adjacency=adj_leaves, rng=rng)
                except NumericalError as exc:
                    _restore(model, last_good)
                    raise TrainingDiverged(f"epoch {epoch}: {exc}", model, history) from exc
                loss = -obj
                grads = ad.backward(loss, list(bound.values()) + list(adj_leaves.values()))
                adam_step(model.params, {k: grads[v.id] for k, v in bound.items()}, state.adam_theta)
                if adj_leaves:
                    adj_params = {str(k): model.steps[k].adjacency.A for k in adj_leaves}
                    adj_grads = {str(k): grads[v.id] for k, v in adj_leaves.items()}
                    adam_step(adj_params, adj_grads, state.adam_adj)
                    for k in adj_leaves:
                        np.fill_diagonal(model.steps[k].adjacency.A, 0.0)
                losses.append(float(loss.data))
                nlls.append(-info["loglik"])
            if not all(np.isfinite(losses)) or not all(np.isfinite(p).all() for p in model.params.values()):
                _restore(model, last_good)
                raise TrainingDiverged(f"epoch {epoch}: non-finite loss or parameters", model, history)

            val = -mean_loglik(model, val_X, cfg.eval_batch)
            if not np.isfinite(val):
                _restore(model, last_good)
                raise TrainingDiverged(f"epoch {epoch}: non-finite validation loss", model, history)
            last_good = _snapshot(model)
            state.epoch = epoch + 1
            rec = {
                "epoch": state.epoch,
                "train_loss": float(np.mean(losses)),
                "train_nll": float(np.mean(nlls)),
                "val_loss": val,
                "edges": edge_count(model),
                "post_processed": state.post_processed,
                "seconds": time.perf_counter() - t0,
            }

            final_phase = state.post_processed or not learning_graph
            if val < state.best_val:
                state.best_val = val
                state.bad_epochs = 0
                if final_phase:
                    best = _snapshot(model)
            else:
                state.bad_epochs += 1

            stop = False
            if final_phase:
                stop = state.bad_epochs >= cfg.stop_patience
            else:
                w_val = current_w(model)
                rec["dual_update"] = False
                if state.bad_epochs >= cfg.patience:
                    dual_update(state, w_val)
                    state.bad_epochs = 0
                    rec["dual_update"] = True
                rec.update(w=w_val, **{"lambda": state.lam}, mu=state.mu)
                if w_val < cfg.dag_threshold:
                    post_process(model, cfg.edge_floor)
                    state.post_processed = True
                    state.best_val = math.inf
                    state.bad_epochs = 0
                    rec["edges"] = edge_count(model)
                    rec["post_processed"] = True
                    best = _snapshot(model)
                    log.info("epoch %d: constraint satisfied, adjacency frozen (%d edges)", state.epoch, rec["edges"])
            history.append(rec)
            if hist_fh:
                hist_fh.write(json.dumps(rec) + "\n")
                hist_fh.flush()
            if callback:
                callback(rec, model, state)
            if stop:
                break
    finally:
        if hist_fh:
            hist_fh.close()

    if learning_graph and not state.post_processed:
        log.warning("epoch cap reached before the acyclicity constraint vanished; thresholding now")
        post_process(model, cfg.edge_floor)
        state.post_processed = True
        best = _snapshot(model)
    _restore(model, best)
    return model, history, state
