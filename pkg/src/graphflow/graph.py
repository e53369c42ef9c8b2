"""Learnable adjacency matrices and the DAG machinery around them.

Convention: ``A[i, j] != 0`` means variable ``j`` is a parent of ``i``
(edge ``j -> i``); row ``i`` of the mask gates the inputs of ``c^i``.
Indices are 0-based throughout.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Value

TEMPERATURE = 0.5
PROB_FLOOR = 1e-12


class CycleError(ValueError):
    """Raised for a graph that should be acyclic but is not."""

    def __init__(self, cycle: Sequence[int]):
        self.cycle = list(cycle)
        path = " -> ".join(str(c) for c in self.cycle + self.cycle[:1])
        super().__init__(f"graph contains a cycle: {path}")


@dataclass
class AdjacencyParam:
    """Real-valued adjacency ``A`` (zero diagonal) plus its sampling settings.

    In ``learnable`` mode ``A`` is optimized and masks are drawn with the
    Gumbel-softmax relaxation; once :attr:`dag` is set (post-processing, or
    ``prescribed`` mode) the mask is that fixed binary matrix.
    """

    A: np.ndarray
    mode: str = "learnable"
    temperature: float = TEMPERATURE
    alpha: float | None = None
    double_square: bool = False
    dag: "BinaryDag | None" = None

    def __post_init__(self):
        self.A = np.array(self.A, dtype=np.float64)
        if self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1]:
            raise ShapeError(f"adjacency must be square, got {self.A.shape}")
        if self.mode not in ("learnable", "prescribed"):
            raise ValueError(f"unknown adjacency mode {self.mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        np.fill_diagonal(self.A, 0.0)
        if self.alpha is None:
            self.alpha = 1.0 / self.d
        if self.mode == "prescribed" and self.dag is None:
            if not np.isin(self.A, (0.0, 1.0)).all():
                raise ValueError("prescribed adjacency must be binary")
            self.dag = make_dag(self.A)

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def is_binary(self) -> bool:
        return self.dag is not None

    @classmethod
    def prescribed(cls, A) -> "AdjacencyParam":
        return cls(np.asarray(A, dtype=np.float64), mode="prescribed")

    @classmethod
    def learnable(cls, d: int, init: float = 1.0, **kw) -> "AdjacencyParam":
        A = np.full((d, d), float(init))
        return cls(A, mode="learnable", **kw)

    def freeze(self, min_threshold: float = 0.0) -> "BinaryDag":
        """Threshold ``A`` into a DAG and stop stochastic sampling."""
        self.dag = post_process_threshold(self.A, min_threshold)
        return self.dag

    def binary_matrix(self) -> np.ndarray:
        if self.dag is None:
            raise ValueError("adjacency has not been post-processed into a binary DAG")
        return self.dag.matrix


def edge_strength(A, double_square: bool = False) -> Value:
    """Squash ``A`` into ``[0, 1)``: ``2 * (sigmoid(2 A^2) - 1/2)``.

    With ``double_square`` the argument is squared once more, i.e. the
    squashing ``2 (sigmoid(2 a^2) - 1/2)`` is applied to ``a = A^2``.
    """
    A = ad.as_value(A)
    arg = A * A
    if double_square:
        arg = arg * arg
    return 2.0 * (ad.sigmoid(2.0 * arg) - 0.5)


def sample_gumbel(rng: np.random.Generator, d: int) -> np.ndarray:
    """Two independent Gumbel(0, 1) draws per entry, shape ``(2, d, d)``."""
    return rng.gumbel(size=(2, d, d))


def relaxed_mask(A, gumbel: np.ndarray | None, temperature: float = TEMPERATURE,
                 double_square: bool = False) -> Value:
    """Gumbel-softmax mask ``A'`` for given noise (``gumbel=None`` -> noise-free).

    ``e^{(log s + g1)/T} / (e^{(log s + g1)/T} + e^{(log(1-s) + g2)/T})`` is
    evaluated as the sigmoid of the difference of the two exponents. Entries
    with ``s < PROB_FLOOR`` and the diagonal are set to exactly zero.
    """
    A = ad.as_value(A)
    s = edge_strength(A, double_square)
    logit = ad.log(s) - ad.log(1.0 - s)
    if gumbel is not None:
        logit = logit + (gumbel[0] - gumbel[1])
    keep = (s.data >= PROB_FLOOR).astype(np.float64)
    if keep.ndim == 2 and keep.shape[0] == keep.shape[1]:
        np.fill_diagonal(keep, 0.0)
    return ad.sigmoid(logit * (1.0 / temperature)) * keep


def stochastic_mask(adj: AdjacencyParam, rng: np.random.Generator, A: Value | None = None) -> Value:
    """Draw ``A'`` for ``adj``; pass ``A`` to differentiate through a bound leaf."""
    g = sample_gumbel(rng, adj.d)
    return relaxed_mask(adj.A if A is None else A, g, adj.temperature, adj.double_square)


def expected_mask(adj: AdjacencyParam, A: Value | None = None) -> Value:
    """Noise-free relaxed mask (both Gumbel draws at zero)."""
    return relaxed_mask(adj.A if A is None else A, None, adj.temperature, adj.double_square)


def acyclicity_penalty(M, alpha: float | None = None) -> Value:
    """``w(M) = tr((I + alpha M)^d) - d``; zero iff the weighted graph is acyclic."""
    M = ad.as_value(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeError(f"acyclicity_penalty: expected a square matrix, got {M.shape}")
    if (M.data < 0).any():
        raise ValueError("acyclicity_penalty: entries must be non-negative")
    d = M.shape[0]
    return ad.power_trace(M, 1.0 / d if alpha is None else alpha, d)


# ---------------------------------------------------------------------------
# binary DAGs


@dataclass
class BinaryDag:
    matrix: np.ndarray
    order: list[int]
    depth: int
    threshold: float | None = None
    names: list[str] | None = field(default=None)

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_edges(self) -> int:
        return int(self.matrix.sum())

    def edges(self) -> list[tuple[int, int]]:
        """Edges as ``(parent, child)`` pairs."""
        child, parent = np.nonzero(self.matrix)
        return sorted(zip(parent.tolist(), child.tolist()))


def find_cycle(M: np.ndarray) -> list[int] | None:
    """One directed cycle of the graph ``M`` (as a node list), or ``None``."""
    M = np.asarray(M) != 0
    d = M.shape[0]
    children = [np.nonzero(M[:, j])[0].tolist() for j in range(d)]
    state = [0] * d  # 0 new, 1 on stack, 2 done
    for root in range(d):
        if state[root]:
            continue
        stack = [(root, iter(children[root]))]
        path = [root]
        state[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
                path.pop()
            elif state[nxt] == 1:
                return path[path.index(nxt):]
            elif state[nxt] == 0:
                state[nxt] = 1
                path.append(nxt)
                stack.append((nxt, iter(children[nxt])))
    return None


def is_acyclic(M: np.ndarray) -> bool:
    return find_cycle(M) is None


def topological_order(M: np.ndarray) -> list[int]:
    """Kahn's algorithm; among ready nodes the smallest index goes first."""
    M = np.asarray(M) != 0
    d = M.shape[0]
    indeg = M.sum(axis=1).astype(int)
    ready = [i for i in range(d) if indeg[i] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        j = heapq.heappop(ready)
        order.append(j)
        for i in np.nonzero(M[:, j])[0]:
            indeg[i] -= 1
            if indeg[i] == 0:
                heapq.heappush(ready, int(i))
    if len(order) < d:
        raise CycleError(find_cycle(M))
    return order


def dag_depth(M: np.ndarray, order: Sequence[int] | None = None) -> int:
    """Number of edges on the longest directed path."""
    M = np.asarray(M) != 0
    order = topological_order(M) if order is None else order
    level = np.zeros(M.shape[0], dtype=int)
    for i in order:
        parents = np.nonzero(M[i])[0]
        if parents.size:
            level[i] = level[parents].max() + 1
    return int(level.max()) if level.size else 0


def make_dag(M: np.ndarray, threshold: float | None = None, names=None) -> BinaryDag:
    M = (np.asarray(M) != 0).astype(np.float64)
    order = topological_order(M)
    return BinaryDag(M, order, dag_depth(M, order), threshold, names)


def post_process_threshold(A: np.ndarray, min_threshold: float = 0.0) -> BinaryDag:
    """Binarize ``|A| > tau`` with the smallest ``tau`` giving an acyclic graph.

    Candidates are ``min_threshold`` and the distinct off-diagonal magnitudes
    above it. Acyclicity is monotone in ``tau`` (raising it only removes
    edges), so a bisection over the sorted candidates returns the same
    minimum as a linear scan.
    """
    if min_threshold < 0:
        raise ValueError("min_threshold must be non-negative")
    mag = np.abs(np.asarray(A, dtype=np.float64))
    np.fill_diagonal(mag, 0.0)
    cands = np.unique(np.concatenate([[float(min_threshold)], mag[mag > min_threshold]]))
    lo, hi = 0, len(cands) - 1  # the largest candidate leaves no edges
    while lo < hi:
        mid = (lo + hi) // 2
        if is_acyclic(mag > cands[mid]):
            hi = mid
        else:
            lo = mid + 1
    tau = float(cands[lo])
    return make_dag(mag > tau, threshold=tau)


def to_dot(dag: BinaryDag, names: Sequence[str] | None = None, graph_name: str = "bn") -> str:
    names = list(names or dag.names or [f"x{i + 1}" for i in range(dag.d)])
    lines = [f"digraph {graph_name} {{"]
    for i, n in enumerate(names):
        lines.append(f'  {i} [label="{n}"];')
    for j, i in dag.edges():
        lines.append(f"  {j} -> {i};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def to_json(dag: BinaryDag, names: Sequence[str] | None = None) -> str:
    doc = {
        "d": dag.d,
        "edges": [[j, i] for j, i in dag.edges()],
        "order": list(map(int, dag.order)),
        "depth": int(dag.depth),
    }
    if names or dag.names:
        doc["names"] = list(names or dag.names)
    return json.dumps(doc)


def from_json(text: str) -> BinaryDag:
    doc = json.loads(text)
    M = np.zeros((doc["d"], doc["d"]))
    for j, i in doc["edges"]:
        M[i, j] = 1.0
    return make_dag(M, names=doc.get("names"))
