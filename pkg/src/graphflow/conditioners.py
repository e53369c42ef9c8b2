"""Masked-input conditioners: graphical, autoregressive and coupling.

All three share one code path. The conditioner network sees
``concat(x * mask_row_i, one_hot(i))`` and returns the embedding ``c^i``;
autoregressive and coupling conditioners are graphical conditioners whose
mask is fixed to their implied adjacency. Coupling dimensions ``i < k``
(0-based) ignore the network and use a trainable constant embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Value
from .nn import MLP, Params

KINDS = ("graphical", "autoregressive", "coupling")


@dataclass
class ConditionerSpec:
    kind: str
    d: int
    embed_size: int = 30
    hidden: list[int] = field(default_factory=lambda: [100, 100, 100])
    k: int | None = None
    name: str = "cond"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown conditioner kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.kind == "coupling":
            if self.k is None:
                self.k = self.d // 2
            if not 1 <= self.k < self.d:
                raise ValueError(f"coupling split k={self.k} must satisfy 1 <= k < d={self.d}")
        self.network = MLP([2 * self.d, *self.hidden, self.embed_size], name=f"{self.name}.net")

    @property
    def const_key(self) -> str:
        return f"{self.name}.const"

    def init(self, rng: np.random.Generator) -> Params:
        params = self.network.init(rng)
        if self.kind == "coupling":
            params[self.const_key] = np.zeros((self.d, self.embed_size))
        return params


def implied_adjacency(spec: ConditionerSpec, A: np.ndarray | None = None) -> np.ndarray:
    """Binary parent matrix encoded by the conditioner (``M[i, j] = 1``: j -> i)."""
    d = spec.d
    if spec.kind == "autoregressive":
        return np.tril(np.ones((d, d)), k=-1)
    if spec.kind == "coupling":
        M = np.zeros((d, d))
        M[spec.k:, : spec.k] = 1.0
        return M
    if A is None:
        raise ValueError("graphical conditioner needs an adjacency matrix")
    return np.asarray(A, dtype=np.float64)


def embed_all(spec: ConditionerSpec, params, X, mask) -> Value:
    """Embeddings for every dimension of every row: ``(B, d) -> (B, d, |c|)``."""
    X, mask = ad.as_value(X), ad.as_value(mask)
    d = spec.d
    if X.ndim != 2 or X.shape[1] != d:
        raise ShapeError(f"embed: expected inputs of shape (B, {d}), got {X.shape}")
    if mask.shape != (d, d):
        raise ShapeError(f"embed: expected a ({d}, {d}) mask, got {mask.shape}")
    if np.any(np.diag(mask.data) != 0):
        raise ValueError("embed: mask has a non-zero diagonal (a variable would condition on itself)")
    B = X.shape[0]
    masked = ad.reshape(X, (B, 1, d)) * ad.reshape(mask, (1, d, d))
    code = np.broadcast_to(np.eye(d), (B, d, d))
    c = spec.network(params, ad.concat([masked, code], axis=-1))
    if spec.kind == "coupling":
        free = np.zeros((d, 1))
        free[spec.k:] = 1.0
        const = ad.as_value(params[spec.const_key]) * (1.0 - free)
        c = c * free + const
    return c


def embed(spec: ConditionerSpec, params, x, mask_row, i: int) -> Value:
    """Embedding ``c^i`` of a single vector ``x`` (``i`` is 0-based)."""
    mask_row = ad.as_value(mask_row)
    if not 0 <= i < spec.d:
        raise ValueError(f"index {i} out of range for d={spec.d}")
    if mask_row.data[i] != 0:
        raise ValueError(f"mask_row[{i}] must be 0: a variable cannot condition on itself")
    if spec.kind == "coupling" and i < spec.k:
        return ad.as_value(params[spec.const_key])[i]
    x = ad.as_value(x)
    code = np.zeros(spec.d)
    code[i] = 1.0
    return spec.network(params, ad.concat([x * mask_row, code], axis=-1))
