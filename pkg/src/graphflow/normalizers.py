"""Invertible scalar normalizers: affine and integral-based monotonic (UMNN).

Both act elementwise on ``(B, d)`` inputs given ``(B, d, |c|)`` embeddings
and return ``(z, log_diag)`` where ``log_diag = log dz/dx``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .nn import MLP, Params

POSITIVE_EPS = 1e-6
MAX_DOUBLINGS = 64


class NumericalError(ArithmeticError):
    pass


class DivergenceError(NumericalError):
    pass


# ---------------------------------------------------------------------------
# quadrature


@lru_cache(maxsize=32)
def clenshaw_curtis(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the ``n``-point Clenshaw-Curtis rule on ``[-1, 1]``.

    The nodes are the Chebyshev extrema ``cos(k pi / N)``, ``N = n - 1``; the
    rule integrates polynomials of degree ``N`` exactly.
    """
    if n < 2:
        raise ValueError("Clenshaw-Curtis needs at least 2 nodes")
    N = n - 1
    theta = np.pi * np.arange(N + 1) / N
    x = np.cos(theta)
    w = np.zeros(N + 1)
    inner = np.arange(1, N)
    v = np.ones(N - 1)
    if N % 2 == 0:
        w[0] = w[N] = 1.0 / (N * N - 1)
        for k in range(1, N // 2):
            v -= 2.0 * np.cos(2 * k * theta[inner]) / (4 * k * k - 1)
        v -= np.cos(N * theta[inner]) / (N * N - 1)
    else:
        w[0] = w[N] = 1.0 / (N * N)
        for k in range(1, (N - 1) // 2 + 1):
            v -= 2.0 * np.cos(2 * k * theta[inner]) / (4 * k * k - 1)
    w[inner] = 2.0 * v / N
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def quadrature(fn: Callable[[np.ndarray], np.ndarray], a: float, b: float, n: int = 50) -> float:
    """Clenshaw-Curtis estimate of ``int_a^b fn(t) dt`` (``fn`` is vectorized)."""
    if n < 8:
        raise ValueError("quadrature needs n >= 8 nodes")
    nodes, weights = clenshaw_curtis(n)
    t = a + (b - a) * (nodes + 1.0) / 2.0
    vals = np.asarray(fn(t), dtype=np.float64)
    bad = ~np.isfinite(vals)
    if bad.any():
        raise NumericalError(f"integrand is not finite at t={t[np.argmax(bad)]!r}")
    return float((b - a) / 2.0 * np.dot(weights, vals))


# ---------------------------------------------------------------------------
# affine


def affine_apply(x, m, s):
    """``z = x * exp(s) + m``; ``log_diag = s``."""
    x, m, s = ad.as_value(x), ad.as_value(m), ad.as_value(s)
    return x * ad.exp(s) + m, s


def affine_invert(z, m, s):
    return (np.asarray(z) - m) * np.exp(-np.asarray(s))


@dataclass
class AffineNormalizer:
    """Linear projection of the embedding onto ``(m, s)``."""

    embed_size: int
    name: str = "affine"
    kind: str = field(default="affine", init=False)

    def __post_init__(self):
        self.projection = MLP([self.embed_size, 2], name=f"{self.name}.proj")

    def init(self, rng: np.random.Generator) -> Params:
        return self.projection.init(rng)

    def _ms(self, params, c):
        out = self.projection(params, c)
        return out[..., 0], out[..., 1]

    def apply(self, params, x, c) -> tuple[Value, Value]:
        m, s = self._ms(params, c)
        return affine_apply(x, m, s)

    def invert(self, params, z: np.ndarray, c, tol: float = 0.0) -> np.ndarray:
        m, s = self._ms(params, ad.as_value(c))
        return affine_invert(z, m.data, s.data)


# ---------------------------------------------------------------------------
# monotonic


@dataclass
class MonotonicNormalizer:
    """``z = int_0^x f(t, c) dt + beta(c)`` with ``f > 0`` by construction.

    ``f`` is an MLP on ``(t, c)`` whose output goes through ``ELU + 1 + eps``;
    ``beta`` is an MLP on ``c``. The integral uses a fixed ``n``-node
    Clenshaw-Curtis rule. Gradients with respect to ``x`` use ``dz/dx = f(x, c)``
    instead of differentiating the quadrature nodes.
    """

    embed_size: int
    hidden: list[int] = field(default_factory=lambda: [50, 50, 50])
    offset_hidden: list[int] = field(default_factory=list)
    n_nodes: int = 50
    name: str = "umnn"
    kind: str = field(default="monotonic", init=False)

    def __post_init__(self):
        if self.n_nodes < 8:
            raise ValueError("n_nodes must be >= 8")
        self.integrand_net = MLP([1 + self.embed_size, *self.hidden, 1], name=f"{self.name}.f")
        self.offset_net = MLP([self.embed_size, *self.offset_hidden, 1], name=f"{self.name}.beta")

    def init(self, rng: np.random.Generator) -> Params:
        return {**self.integrand_net.init(rng), **self.offset_net.init(rng)}

    def integrand(self, params, t, c) -> Value:
        """``f(t, c)`` for ``t`` of shape ``(..., m)`` and ``c`` of shape ``(..., C)``.

        The first layer is split into its ``t`` column and ``c`` block so the
        embedding is projected once and shared by all ``m`` evaluation points.
        """
        net = self.integrand_net
        t, c = ad.as_value(t), ad.as_value(c)
        W0 = ad.as_value(params[f"{net.name}.W0"])
        b0 = ad.as_value(params[f"{net.name}.b0"])
        lead = c.shape[:-1]
        proj = ad.matmul(c, W0[1:]) + b0
        h = ad.reshape(t, t.shape + (1,)) * W0[0] + ad.reshape(proj, lead + (1, proj.shape[-1]))
        for k in range(1, net.n_layers):
            h = ad.elu(h)
            W = ad.as_value(params[f"{net.name}.W{k}"])
            b = ad.as_value(params[f"{net.name}.b{k}"])
            h = ad.matmul(h, W) + b
        u = ad.reshape(h, h.shape[:-1])
        return ad.elu(u) + (1.0 + POSITIVE_EPS)

    def offset(self, params, c) -> Value:
        out = self.offset_net(params, c)
        return ad.reshape(out, out.shape[:-1])

    def apply(self, params, x, c) -> tuple[Value, Value]:
        x, c = ad.as_value(x), ad.as_value(c)
        nodes, weights = clenshaw_curtis(self.n_nodes)
        xd = x.data
        t = ad.constant(xd[..., None] * (nodes + 1.0) / 2.0)
        t_all = ad.concat([t, ad.reshape(x, x.shape + (1,))], axis=-1)
        F = self.integrand(params, t_all, c)
        fq = F[..., : self.n_nodes]
        fx = F[..., self.n_nodes]
        integral = ad.vsum(fq * weights, axis=-1) * (xd / 2.0)
        z = ad.upper_limit_integral(integral, x, fx.data) + self.offset(params, c)
        return z, ad.log(fx)

    def forward_z(self, params, x: np.ndarray, c) -> np.ndarray:
        """Plain-array evaluation of ``z`` (no tape)."""
        nodes, weights = clenshaw_curtis(self.n_nodes)
        t = x[..., None] * (nodes + 1.0) / 2.0
        f = self.integrand(params, t, c).data
        return (f @ weights) * x / 2.0 + self.offset(params, c).data

    def invert(self, params, z: np.ndarray, c, tol: float = 1e-8) -> np.ndarray:
        """Solve ``z = g(x; c)`` by bracket doubling from ``[-1, 1]`` then bisection."""
        if tol <= 0:
            raise ValueError("tol must be positive")
        z = np.asarray(z, dtype=np.float64)
        c = ad.as_value(c).data
        params = {k: np.asarray(getattr(v, "data", v)) for k, v in params.items()}
        lo = -np.ones_like(z)
        hi = np.ones_like(z)
        for _ in range(MAX_DOUBLINGS):
            glo = self.forward_z(params, lo, c)
            ghi = self.forward_z(params, hi, c)
            low_bad = glo > z
            high_bad = ghi < z
            if not (low_bad.any() or high_bad.any()):
                break
            lo = np.where(low_bad, 2.0 * lo, lo)
            hi = np.where(high_bad, 2.0 * hi, hi)
        else:
            raise DivergenceError("umnn_invert: no bracket found within 64 doublings")
        x = 0.5 * (lo + hi)
        for _ in range(200):
            gx = self.forward_z(params, x, c)
            err = gx - z
            if np.all(np.abs(err) < tol):
                return x
            # shrink only the still-unconverged brackets
            active = np.abs(err) >= tol
            lo = np.where(active & (err < 0), x, lo)
            hi = np.where(active & (err > 0), x, hi)
            x = np.where(active, 0.5 * (lo + hi), x)
        raise DivergenceError(f"umnn_invert: bisection did not reach tol={tol}")


def umnn_apply(norm: MonotonicNormalizer, params, x, c):
    return norm.apply(params, x, c)


def umnn_invert(norm: MonotonicNormalizer, params, z, c, tol: float = 1e-8):
    return norm.invert(params, z, c, tol)


def make_normalizer(kind: str, embed_size: int, **kw):
    if kind == "affine":
        return AffineNormalizer(embed_size)
    if kind == "monotonic":
        return MonotonicNormalizer(embed_size, **kw)
    raise ValueError(f"unknown normalizer kind {kind!r}; expected one of affine, monotonic")
