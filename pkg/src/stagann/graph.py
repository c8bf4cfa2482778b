"""Message-passing layers and adjacency helpers.

Adjacencies are dense ``(N, N)`` arrays (or ``(B, N, N)`` stacks of them);
row ``i`` holds the weights sensor ``i`` uses to aggregate its neighbours.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class Adjacency:
    weights: np.ndarray
    self_loops: bool = False
    normalization: str = "none"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape[-1] != self.weights.shape[-2]:
            raise ad.DimensionError(f"adjacency must be square, got {self.weights.shape}")
        if np.any(self.weights < 0):
            raise ValueError("adjacency weights must be non-negative")

    @property
    def n(self) -> int:
        return self.weights.shape[-1]

    def subgraph(self, idx) -> "Adjacency":
        idx = np.asarray(idx)
        return Adjacency(self.weights[np.ix_(idx, idx)], self.self_loops, "none")


def row_normalize(weights: np.ndarray, self_loops: bool = False) -> Adjacency:
    """Row-stochastic copy; rows without any edge stay all-zero."""
    w = np.array(weights, dtype=np.float64)
    if not self_loops:
        idx = np.arange(w.shape[-1])
        w[..., idx, idx] = 0.0
    rows = w.sum(axis=-1, keepdims=True)
    w = np.divide(w, rows, out=np.zeros_like(w), where=rows > 0)
    return Adjacency(w, self_loops, "row-stochastic")


def _weights(a) -> np.ndarray | Tensor:
    if isinstance(a, Adjacency):
        return a.weights
    return a


def _check(x: Tensor, a) -> None:
    n = a.shape[-1]
    if a.shape[-2] != n or x.shape[-2] != n:
        raise ad.DimensionError(f"features {x.shape} do not align with adjacency {a.shape}")


def masked_gnn_layer(x, adjacency, mlp: Callable[[Tensor], Tensor]) -> Tensor:
    """Neighbour-only aggregation followed by ``mlp``: ``mlp(A @ X)``."""
    x = ad.as_tensor(x)
    a = _weights(adjacency)
    _check(x, a)
    return mlp(ad.matmul(a, x))


def gin_layer(x, adjacency, eps, mlp: Callable[[Tensor], Tensor]) -> Tensor:
    """Isomorphism layer: ``mlp((1 + eps) * X + A @ X)``; ``eps`` may be learnable."""
    x = ad.as_tensor(x)
    a = _weights(adjacency)
    _check(x, a)
    self_term = ad.mul(ad.add(eps, 1.0), x)
    return mlp(ad.add(self_term, ad.matmul(a, x)))


def topk_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest off-diagonal scores in every row.

    Ties are resolved towards the lowest column index (stable sort).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    s = np.asarray(scores, dtype=np.float64)
    n = s.shape[-1]
    keep = min(k, n - 1)
    mask = np.zeros(s.shape, dtype=bool)
    if keep <= 0:
        return mask
    work = s.copy()
    idx = np.arange(n)
    work[..., idx, idx] = -np.inf
    order = np.argsort(-work, axis=-1, kind="stable")[..., :keep]
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def topk_sparsify(scores, k: int) -> Tensor:
    """Keep the top-``k`` neighbours per row and softmax over the survivors.

    ``scores`` may be a Tensor so that gradients reach the score producer.
    With a single sensor the result is the all-zero ``(1, 1)`` adjacency.
    """
    scores = ad.as_tensor(scores)
    n = scores.shape[-1]
    if n < 2:
        return Tensor(np.zeros(scores.shape))
    mask = topk_mask(scores.data, k)
    return ad.softmax_rows(scores, mask=mask)
