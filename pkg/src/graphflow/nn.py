"""Shared MLPs, the Adam optimizer and parameter serialization."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Value

Params = dict[str, np.ndarray]

_MAGIC = b"GFPARAM1"


@dataclass
class MLP:
    """Fully connected network with ELU hidden activations and a linear head.

    Parameters live outside the object, in a flat ``{name: array}`` mapping,
    under the keys ``f"{name}.W{k}"`` and ``f"{name}.b{k}"``.
    """

    sizes: list[int]
    name: str = "mlp"
    activation: str = "elu"

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError("MLP needs at least an input and an output size")
        if self.activation != "elu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def keys(self) -> list[str]:
        return [f"{self.name}.{p}{k}" for k in range(self.n_layers) for p in ("W", "b")]

    def n_params(self) -> int:
        return sum(i * o + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))

    def init(self, rng: np.random.Generator) -> Params:
        params = {}
        for k, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            params[f"{self.name}.W{k}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            params[f"{self.name}.b{k}"] = rng.uniform(-bound, bound, size=(fan_out,))
        return params

    def __call__(self, params: Mapping[str, Value | np.ndarray], x) -> Value:
        return mlp_forward(self, params, x)


def mlp_forward(net: MLP, params: Mapping[str, Value | np.ndarray], x) -> Value:
    """Apply ``net`` to the last axis of ``x`` (any number of leading axes)."""
    h = ad.as_value(x)
    if h.shape[-1] != net.sizes[0]:
        raise ShapeError(f"{net.name}: input width {h.shape[-1]} != first layer width {net.sizes[0]}")
    for k in range(net.n_layers):
        W = ad.as_value(params[f"{net.name}.W{k}"])
        b = ad.as_value(params[f"{net.name}.b{k}"])
        h = ad.matmul(h, W) + b
        if k < net.n_layers - 1:
            h = ad.elu(h)
    return h


def one_hot_concat(x_masked, i: int, one_based: bool = True):
    """Append the one-hot code of index ``i`` to the masked input vector.

    ``i`` is 1-based by default, matching variable labels x_1..x_d.
    """
    x_masked = np.asarray(x_masked, dtype=np.float64)
    d = x_masked.shape[-1]
    pos = i - 1 if one_based else i
    if not 0 <= pos < d:
        raise ValueError(f"index {i} out of range for d={d}")
    code = np.zeros(x_masked.shape[:-1] + (d,))
    code[..., pos] = 1.0
    return np.concatenate([x_masked, code], axis=-1)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "t")}


def adam_step(params: Params, grads: Mapping[str, np.ndarray], state: AdamState) -> tuple[Params, AdamState]:
    """One Adam update with bias correction and decoupled weight decay.

    Updates ``params`` and ``state`` in place and returns both. Parameters
    without an entry in ``grads`` only receive the weight decay.
    """
    state.t += 1
    lr, b1, b2 = state.lr, state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, p in params.items():
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        g = grads.get(k)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient for {k} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def save_params(path: str | Path, params: Mapping[str, np.ndarray], header: Mapping | None = None) -> None:
    """Write arrays to a flat little-endian float64 blob behind a JSON header.

    Layout: 8-byte magic, uint64 header length, UTF-8 JSON header, payload.
    The header records every array's name, shape and byte offset alongside
    the caller's metadata (layer sizes, activation, seed, ...).
    """
    entries = []
    offset = 0
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    head = json.dumps({"meta": dict(header or {}), "arrays": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path: str | Path) -> tuple[Params, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a parameter container")
    (n,) = struct.unpack("<Q", raw[8:16])
    head = json.loads(raw[16 : 16 + n])
    base = 16 + n
    params = {}
    for e in head["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return params, head["meta"]
