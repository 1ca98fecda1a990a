"""Isolation Forest built from scratch.

Trees are fit on random subsamples with uniformly chosen split features and
uniform split values between the node's min and max. The anomaly score of a
point is ``2 ** (-E[h(x)] / c(psi))`` where ``h`` is the path length (plus
``c(size)`` at non-singleton leaves) and ``c`` is the average unsuccessful
search length in a binary search tree.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

EULER_GAMMA = 0.5772156649


class DegenerateData(UserWarning):
    """All training points are identical; the forest scores everything 0.5."""


def harmonic(i: float) -> float:
    return math.log(i) + EULER_GAMMA


def c_factor(n: int) -> float:
    """Average path length of an unsuccessful BST search over ``n`` points."""
    if n < 2:
        return 0.0
    return 2.0 * harmonic(n - 1) - 2.0 * (n - 1) / n


@dataclass(frozen=True)
class Leaf:
    size: int


@dataclass(frozen=True)
class Split:
    feature: int
    value: float
    left: "Node"
    right: "Node"


Node = Union[Leaf, Split]


@dataclass(frozen=True)
class IsolationForest:
    trees: tuple[Node, ...]
    subsample_size: int
    n_trees: int
    height_limit: int
    n_features: int
    degenerate: bool = False

    def score(self, point: Sequence[float]) -> float:
        return iforest_score(self, point)


def tree_depth(node: Node) -> int:
    if isinstance(node, Leaf):
        return 0
    return 1 + max(tree_depth(node.left), tree_depth(node.right))


def _build(X: np.ndarray, depth: int, limit: int, rng: np.random.Generator) -> Node:
    n = X.shape[0]
    if depth >= limit or n <= 1:
        return Leaf(n)
    lo = X.min(axis=0)
    hi = X.max(axis=0)
    splittable = np.flatnonzero(hi > lo)
    if splittable.size == 0:
        return Leaf(n)
    q = int(splittable[rng.integers(splittable.size)])
    p = float(rng.uniform(lo[q], hi[q]))
    while p <= lo[q]:  # keep both sides non-empty
        p = float(rng.uniform(lo[q], hi[q]))
    mask = X[:, q] < p
    return Split(
        q,
        p,
        _build(X[mask], depth + 1, limit, rng),
        _build(X[~mask], depth + 1, limit, rng),
    )


def iforest_fit(points, subsample_size: int = 256, n_trees: int = 100, seed: int = 0) -> IsolationForest:
    X = np.asarray(points, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least two equal-length feature vectors")
    if n_trees < 1 or subsample_size < 2:
        raise ValueError("n_trees must be >= 1 and subsample_size >= 2")
    n = X.shape[0]
    psi = min(subsample_size, n)
    limit = math.ceil(math.log2(psi))
    degenerate = bool(np.all(X == X[0]))
    if degenerate:
        warnings.warn("all training points identical", DegenerateData, stacklevel=2)
    rng = np.random.default_rng(seed)
    trees = []
    for _ in range(n_trees):
        idx = rng.choice(n, size=psi, replace=False) if psi < n else np.arange(n)
        trees.append(_build(X[idx], 0, limit, rng))
    return IsolationForest(tuple(trees), psi, n_trees, limit, X.shape[1], degenerate)


def path_length(node: Node, x: np.ndarray) -> float:
    depth = 0
    while isinstance(node, Split):
        node = node.left if x[node.feature] < node.value else node.right
        depth += 1
    return depth + c_factor(node.size)


def iforest_score(forest: IsolationForest, point: Sequence[float]) -> float:
    x = np.asarray(point, dtype=float)
    if x.shape != (forest.n_features,):
        raise ValueError(f"expected {forest.n_features} features, got shape {x.shape}")
    if forest.degenerate:
        return 0.5
    mean_path = sum(path_length(t, x) for t in forest.trees) / len(forest.trees)
    return 2.0 ** (-mean_path / c_factor(forest.subsample_size))
