"""Synthetic datasets with known Bayesian networks, CSV loading and splits.

The 2D toys follow the usual FFJORD parameterizations. ``eight_gaussians``
is rescaled so its centres sit at radius 2 (spread 0.25).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn import datasets as skd

from .graph import find_cycle, is_acyclic, topological_order, CycleError

TOY_NAMES = (
    "circles",
    "eight_gaussians",
    "moons",
    "pinwheel",
    "swissroll",
    "checkerboard",
    "two_spirals",
    "rings",
)

# Toys ranked by how much of their dependence an affine conditional can
# express (strongest first); ``<k>pairs`` uses the first k.
PAIR_ORDER = (
    "moons",
    "pinwheel",
    "two_spirals",
    "eight_gaussians",
    "swissroll",
    "checkerboard",
    "circles",
    "rings",
)


class ConfigError(ValueError):
    pass


class ParseError(ValueError):
    pass


@dataclass
class DatasetBundle:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    columns: list[str]
    adjacency: np.ndarray | None = None
    permutation: list[int] | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.train.shape[1]

    def manifest(self) -> dict:
        return {
            **self.meta,
            "d": self.d,
            "columns": self.columns,
            "split_sizes": [len(self.train), len(self.val), len(self.test)],
            "permutation": self.permutation,
            "adjacency": None if self.adjacency is None else self.adjacency.astype(int).tolist(),
            "mean": None if self.mean is None else self.mean.tolist(),
            "std": None if self.std is None else self.std.tolist(),
        }

    def write_manifest(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2))


# ---------------------------------------------------------------------------
# 2D toys


def _seed(rng: np.random.Generator) -> int:
    return int(rng.integers(2**31 - 1))


def gen_2d_toy(name: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` samples of the named 2D toy distribution, shape ``(n, 2)``."""
    if name not in TOY_NAMES:
        raise ConfigError(f"unknown toy {name!r}; expected one of {', '.join(TOY_NAMES)}")
    if n <= 0:
        raise ValueError("n must be positive")
    if name == "circles":
        X = skd.make_circles(n_samples=n, factor=0.5, noise=0.08, random_state=_seed(rng))[0] * 3.0
        return X[rng.permutation(n)]
    if name == "moons":
        X = skd.make_moons(n_samples=n, noise=0.1, random_state=_seed(rng))[0]
        return (X * 2 + np.array([-1.0, -0.2]))[rng.permutation(n)]
    if name == "swissroll":
        X = skd.make_swiss_roll(n_samples=n, noise=1.0, random_state=_seed(rng))[0]
        return X[:, [0, 2]] / 5.0
    if name == "eight_gaussians":
        angles = np.arange(8) * np.pi / 4
        centers = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        idx = rng.integers(8, size=n)
        return centers[idx] + 0.25 * rng.standard_normal((n, 2))
    if name == "pinwheel":
        radial_std, tangential_std, num_classes, rate = 0.3, 0.1, 5, 0.25
        rads = np.linspace(0, 2 * np.pi, num_classes, endpoint=False)
        labels = rng.integers(num_classes, size=n)
        feats = rng.standard_normal((n, 2)) * np.array([radial_std, tangential_std])
        feats[:, 0] += 1.0
        ang = rads[labels] + rate * np.exp(feats[:, 0])
        rot = np.stack([np.cos(ang), -np.sin(ang), np.sin(ang), np.cos(ang)], axis=1).reshape(-1, 2, 2)
        return 2.0 * np.einsum("ti,tij->tj", feats, rot)
    if name == "checkerboard":
        x1 = rng.random(n) * 4 - 2
        x2 = rng.random(n) - rng.integers(0, 2, n) * 2
        x2 = x2 + np.floor(x1) % 2
        return np.stack([x1, x2], axis=1) * 2
    if name == "two_spirals":
        half = n // 2
        m = np.sqrt(rng.random((n, 1))) * 540 * (2 * np.pi) / 360
        dx = -np.cos(m) * m + rng.random((n, 1)) * 0.5
        dy = np.sin(m) * m + rng.random((n, 1)) * 0.5
        sign = np.where(np.arange(n)[:, None] < half, 1.0, -1.0)
        X = sign * np.hstack([dx, dy]) / 3
        X = X + rng.standard_normal(X.shape) * 0.1
        return X[rng.permutation(n)]
    # rings: four concentric circles, radii 3, 2.25, 1.5, 0.75
    sizes = [n - 3 * (n // 4)] + [n // 4] * 3
    pts = []
    for size, radius in zip(sizes, (0.25, 0.5, 0.75, 1.0)):
        theta = np.linspace(0, 2 * np.pi, size, endpoint=False)
        pts.append(radius * np.stack([np.cos(theta), np.sin(theta)], axis=1))
    X = np.concatenate(pts) * 3.0
    X = X[rng.permutation(n)]
    return X + rng.normal(scale=0.08, size=X.shape)


# ---------------------------------------------------------------------------
# bundles


def split_bundle(
    X: np.ndarray,
    n_train: int,
    columns: Sequence[str],
    adjacency: np.ndarray | None = None,
    val_fraction: float = 0.1,
    standardize: bool = True,
    meta: dict | None = None,
) -> DatasetBundle:
    """First ``n_train`` rows -> train/val (last ``val_fraction`` is val); rest -> test."""
    n_val = int(round(val_fraction * n_train))
    train, val, test = X[: n_train - n_val], X[n_train - n_val : n_train], X[n_train:]
    bundle = DatasetBundle(train, val, test, list(columns), adjacency, meta=dict(meta or {}))
    return standardize_bundle(bundle) if standardize else bundle


def standardize_bundle(b: DatasetBundle) -> DatasetBundle:
    mean = b.train.mean(axis=0)
    std = b.train.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    f = lambda A: (A - mean) / std  # noqa: E731
    return replace(b, train=f(b.train), val=f(b.val), test=f(b.test), mean=mean, std=std)


def destandardize(b: DatasetBundle, X: np.ndarray) -> np.ndarray:
    if b.mean is None:
        return X
    return X * b.std + b.mean


def sample_pairs(n: int, rng: np.random.Generator, toys: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    cols = [gen_2d_toy(t, n, rng) for t in toys]
    d = 2 * len(toys)
    A = np.zeros((d, d))
    for k in range(len(toys)):
        A[2 * k + 1, 2 * k] = 1.0
    return np.concatenate(cols, axis=1), A


def gen_pairs(n: int, rng: np.random.Generator, toys: Sequence[str], n_test: int | None = None,
              standardize: bool = True) -> DatasetBundle:
    """Independent 2D toys side by side; one edge per pair, ``(2k) -> (2k+1)``."""
    if n <= 0:
        raise ValueError("n must be positive")
    n_test = n // 2 if n_test is None else n_test
    X, A = sample_pairs(n + n_test, rng, toys)
    cols = [f"{t}_{c}" for t in toys for c in ("a", "b")]
    return split_bundle(X, n, cols, A, standardize=standardize, meta={"name": f"{len(toys)}pairs", "toys": list(toys)})


def gen_8pairs(n: int, rng: np.random.Generator, **kw) -> DatasetBundle:
    return gen_pairs(n, rng, TOY_NAMES, **kw)


def tree_adjacency() -> np.ndarray:
    A = np.zeros((7, 7))
    for parent, child in [(0, 1), (2, 3), (0, 4), (1, 4), (2, 5), (3, 5), (4, 6), (5, 6)]:
        A[child, parent] = 1.0
    return A


def sample_tree(n: int, rng: np.random.Generator) -> np.ndarray:
    x12 = gen_2d_toy("circles", n, rng)
    x34 = gen_2d_toy("eight_gaussians", n, rng)
    x5 = rng.normal(np.maximum(x12[:, 0], x12[:, 1]), 1.0)
    x6 = rng.normal(np.minimum(x34[:, 0], x34[:, 1]), 1.0)
    s = x5 + x6
    x7 = np.where(rng.random(n) < 0.5, np.sin(s), np.cos(s)) + rng.standard_normal(n)
    return np.column_stack([x12, x34, x5, x6, x7])


def gen_tree(n: int, rng: np.random.Generator, n_test: int | None = None, standardize: bool = True) -> DatasetBundle:
    if n <= 0:
        raise ValueError("n must be positive")
    n_test = n // 2 if n_test is None else n_test
    X = sample_tree(n + n_test, rng)
    cols = [f"x{i}" for i in range(1, 8)]
    return split_bundle(X, n, cols, tree_adjacency(), standardize=standardize, meta={"name": "tree"})


# ---------------------------------------------------------------------------
# structural equation models

_LINKS = {"tanh": np.tanh, "sin": np.sin, "identity": lambda x: x, "square": np.square}


def default_circuit_spec() -> dict:
    return json.loads(resources.files("graphflow").joinpath("resources/arith_circuit.json").read_text())


def sem_adjacency(spec: dict) -> np.ndarray:
    names = [node["name"] for node in spec["nodes"]]
    index = {nm: i for i, nm in enumerate(names)}
    A = np.zeros((len(names), len(names)))
    for i, node in enumerate(spec["nodes"]):
        for p in node.get("parents", []):
            if p not in index:
                raise ConfigError(f"node {node['name']!r} has unknown parent {p!r}")
            A[i, index[p]] = 1.0
    return A


def sample_sem(spec: dict, n: int, rng: np.random.Generator) -> np.ndarray:
    A = sem_adjacency(spec)
    order = topological_order(A)  # raises CycleError
    nodes = spec["nodes"]
    index = {node["name"]: i for i, node in enumerate(nodes)}
    X = np.zeros((n, len(nodes)))
    for i in order:
        node = nodes[i]
        law = node.get("noise", "normal")
        if law == "normal":
            eps = rng.standard_normal(n)
        elif law == "student_t":
            eps = rng.standard_t(node.get("df", 3.0), n)
        else:
            raise ConfigError(f"unknown noise law {law!r}")
        val = node.get("scale", 1.0) * eps + node.get("bias", 0.0)
        parents = node.get("parents", [])
        if parents:
            link = _LINKS[node.get("link", "tanh")]
            weights = node.get("weights", [1.0] * len(parents))
            for w, p in zip(weights, parents):
                val = val + w * link(X[:, index[p]])
        X[:, i] = val
    return X


def gen_arith_circuit(n: int, rng: np.random.Generator, spec: dict | None = None,
                      n_test: int | None = None, standardize: bool = True) -> DatasetBundle:
    spec = default_circuit_spec() if spec is None else spec
    if n <= 0:
        raise ValueError("n must be positive")
    A = sem_adjacency(spec)
    cyc = find_cycle(A)
    if cyc is not None:
        raise CycleError(cyc)
    n_test = n // 2 if n_test is None else n_test
    X = sample_sem(spec, n + n_test, rng)
    cols = [node["name"] for node in spec["nodes"]]
    meta = {"name": spec.get("name", "sem"), "stand_in": bool(spec.get("stand_in", False))}
    return split_bundle(X, n, cols, A, standardize=standardize, meta=meta)


# ---------------------------------------------------------------------------
# CSV


def read_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        rows = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ParseError(f"{path}:{reader.line_num}: non-numeric cell in {row!r}") from None
    X = np.array(rows, dtype=np.float64).reshape(-1, len(header))
    return [h.strip() for h in header], X


def write_csv(path: str | Path, X: np.ndarray, columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in np.asarray(X):
            w.writerow([repr(float(v)) for v in row])


def load_csv(path: str | Path, fractions: Sequence[float] = (0.8, 0.1, 0.1), standardize: bool = True,
             rng: np.random.Generator | int | None = 0, adjacency: np.ndarray | None = None) -> DatasetBundle:
    """Shuffle rows and split into train/val/test by ``fractions``."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("fractions must be three numbers summing to 1")
    columns, X = read_csv(path)
    rng = np.random.default_rng(rng)
    X = X[rng.permutation(len(X))]
    n_train = int(round(fractions[0] * len(X)))
    n_val = int(round(fractions[1] * len(X)))
    b = DatasetBundle(X[:n_train], X[n_train : n_train + n_val], X[n_train + n_val :], columns, adjacency,
                      meta={"name": Path(path).stem, "source": str(path)})
    return standardize_bundle(b) if standardize else b


# ---------------------------------------------------------------------------


def permute_features(b: DatasetBundle, rng: np.random.Generator | None = None,
                     perm: Sequence[int] | None = None) -> DatasetBundle:
    """Relabel variables: new column ``j`` is old column ``perm[j]``.

    The adjacency is conjugated (``A'[i, j] = A[perm[i], perm[j]]``) and the
    cumulative permutation is recorded in ``permutation``.
    """
    d = b.d
    perm = np.asarray(rng.permutation(d) if perm is None else perm, dtype=int)
    if sorted(perm.tolist()) != list(range(d)):
        raise ValueError("perm must be a permutation of range(d)")
    A = None if b.adjacency is None else b.adjacency[np.ix_(perm, perm)]
    prev = np.arange(d) if b.permutation is None else np.asarray(b.permutation)
    return replace(
        b,
        train=b.train[:, perm],
        val=b.val[:, perm],
        test=b.test[:, perm],
        columns=[b.columns[p] for p in perm],
        adjacency=A,
        permutation=prev[perm].tolist(),
        mean=None if b.mean is None else b.mean[perm],
        std=None if b.std is None else b.std[perm],
    )


def inverse_permutation(perm: Sequence[int]) -> list[int]:
    inv = np.empty(len(perm), dtype=int)
    inv[np.asarray(perm)] = np.arange(len(perm))
    return inv.tolist()


GENERATORS = {
    "tree": gen_tree,
    "8pairs": gen_8pairs,
    "arith_circuit": gen_arith_circuit,
}


def make_dataset(name: str, n: int = 10_000, seed: int = 0, n_test: int | None = None,
                 standardize: bool = True, permute: bool = False) -> DatasetBundle:
    """Named synthetic bundle; ``"<k>pairs"`` uses the first ``k`` toys of ``PAIR_ORDER``."""
    rng = np.random.default_rng(seed)
    if name in GENERATORS:
        b = GENERATORS[name](n, rng, n_test=n_test, standardize=standardize)
    elif name.endswith("pairs") and name[:-5].isdigit() and 1 <= int(name[:-5]) <= len(TOY_NAMES):
        b = gen_pairs(n, rng, PAIR_ORDER[: int(name[:-5])], n_test=n_test, standardize=standardize)
    else:
        raise ConfigError(f"unknown dataset {name!r}; expected tree, arith_circuit or <k>pairs (k <= 8)")
    b.meta.update(seed=seed, n=n)
    if permute:
        b = permute_features(b, np.random.default_rng([seed, 1]))
    assert b.adjacency is None or is_acyclic(b.adjacency)
    return b
