"""Input/output metric pairs (d_X, d_Y) used by the Lipschitz quotient.

d_X is euclidean on the input space.  d_Y choices cover the tasks:
abs-diff for scalar regressors, euclidean for vector outputs, KL
divergence for probability vectors (classifiers), and mean squared
difference over logits.  ``dist`` evaluates d_Y per batch row as a tape
node so the quotient can be differentiated with respect to both sides.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T

_DX = ("euclidean",)
_DY = ("abs-diff", "euclidean", "kl-divergence", "mean-squared-logit")

# probability clamp floor: keeps log and its gradients finite at the boundary
_KL_FLOOR = 1e-12
_SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class MetricPair:
    dX: str = "euclidean"
    dY: str = "abs-diff"

    def __post_init__(self):
        if self.dX not in _DX:
            raise ValueError(f"unsupported dX: {self.dX!r}")
        if self.dY not in _DY:
            raise ValueError(f"unsupported dY: {self.dY!r}")


def _check_simplex(p: np.ndarray, name: str):
    if (p <= 0).any():
        raise ValueError(f"kl-divergence needs strictly positive {name} entries")
    if np.abs(p.sum(axis=-1) - 1.0).max() > _SIMPLEX_TOL:
        raise ValueError(f"kl-divergence {name} rows must sum to 1 within {_SIMPLEX_TOL}")


def _clamp_renorm(p: T.Node) -> T.Node:
    # clamp to [floor, 1] then renormalize; gradients stay finite at the boundary
    q = T.clip(p, _KL_FLOOR, 1.0)
    return T.div(q, T.sum_(q, axis=-1, keepdims=True))


def dist(pair: MetricPair, a: T.Node, b: T.Node) -> T.Node:
    """d_Y(a, b) per batch row; rows are the leading axis.

    Inputs of shape (n, m) give an (n,) node; 1-D inputs are treated as
    a single row.  Differentiable with respect to both arguments.
    """
    if a.shape != b.shape:
        raise T.ShapeError(f"dist[{pair.dY}]", a.shape, b.shape)
    dy = pair.dY
    if dy == "abs-diff":
        out = T.absval(T.sub(a, b))
        if len(out.shape) > 1:
            out = T.sum_(out, axis=-1)  # scalar outputs carried as (n, 1)
        return out
    if dy == "euclidean":
        return T.l2norm(T.sub(a, b), axis=-1)
    if dy == "mean-squared-logit":
        return T.mean(T.square(T.sub(a, b)), axis=-1)
    # kl-divergence
    _check_simplex(a.val, "left")
    _check_simplex(b.val, "right")
    p = _clamp_renorm(a)
    q = _clamp_renorm(b)
    return T.sum_(T.mul(p, T.sub(T.log(p), T.log(q))), axis=-1)


def dist_proxy(pair: MetricPair, a: T.Node, b: T.Node) -> T.Node:
    """d_Y for direction finding, twice differentiable at a == b.

    abs-diff has no curvature at zero, so squared difference substitutes
    as the proxy objective there; kl needs no substitute (its Hessian at
    a == b is the Fisher metric) and the smooth metrics are their own
    proxies.
    """
    if pair.dY == "abs-diff":
        out = T.square(T.sub(a, b))
        if len(out.shape) > 1:
            out = T.sum_(out, axis=-1)
        return out
    return dist(pair, a, b)
