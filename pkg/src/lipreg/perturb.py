"""Adversarial perturbations by power iteration on the output metric.

Approximates argmax_r dY(f(x), f(x+r)) / dX(x, x+r) per batch element:
start from a random unit vector, repeatedly take the gradient of
dY(f(x), f(x + xi*r)) with respect to r and renormalize, then scale the
final direction by an epsilon drawn from P_eps.  The model closure has
signature f(tape, x_node) -> output node.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import tape as T
from .metrics import MetricPair, dist, dist_proxy


@dataclass(frozen=True)
class EpsilonDist:
    """Distribution of the perturbation scale: fixed(eps) or uniform(lo, hi)."""

    kind: str
    lo: float
    hi: float

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform"):
            raise ValueError(f"unknown EpsilonDist kind: {self.kind!r}")
        if self.lo <= 0 or self.hi <= 0:
            raise ValueError("epsilon values must be positive")
        if self.kind == "uniform" and not self.lo < self.hi:
            raise ValueError("uniform EpsilonDist needs lo < hi")
        if self.kind == "fixed" and self.lo != self.hi:
            raise ValueError("fixed EpsilonDist needs lo == hi")

    @classmethod
    def fixed(cls, eps: float) -> "EpsilonDist":
        return cls("fixed", float(eps), float(eps))

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "EpsilonDist":
        return cls("uniform", float(lo), float(hi))

    def draw(self, rng: T.Rng, n: int) -> np.ndarray:
        if self.kind == "fixed":
            return np.full(n, self.lo)
        return rng.uniform((n,), self.lo, self.hi)


@dataclass(frozen=True)
class PerturbConfig:
    xi: float = 10.0
    k: int = 1
    eps: EpsilonDist = EpsilonDist.uniform(0.1, 10.0)

    def __post_init__(self):
        if self.xi == 0:
            raise ValueError("xi must be nonzero")
        if self.k < 0:
            raise ValueError("k must be >= 0")


class DirectionResult(NamedTuple):
    direction: np.ndarray  # unit rows
    degenerate: np.ndarray  # rows where a zero gradient froze the iterate


class PerturbationResult(NamedTuple):
    direction: np.ndarray
    epsilon: np.ndarray
    r_adv: np.ndarray
    quotient: np.ndarray
    degenerate: np.ndarray


def _as_points(x) -> np.ndarray:
    a = x.a if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a batch of points, got shape {a.shape}")
    return a


def adversarial_direction(f: Callable, x, pair: MetricPair, xi: float, k: int,
                          rng: T.Rng) -> DirectionResult:
    """Power-iteration estimate of the adversarial unit direction per element.

    The reference output f(x) is evaluated once and held fixed; each of
    the k iterations differentiates dY(f(x), f(x + xi*r_i)) with respect
    to r and renormalizes row-wise.  Rows whose gradient vanishes keep
    their previous iterate and are flagged.
    """
    if xi == 0:
        raise ValueError("xi must be nonzero")
    if k < 0:
        raise ValueError("k must be >= 0")
    xa = _as_points(x)
    n, d = xa.shape
    r = rng.unit_vectors(n, d)
    flags = np.zeros(n, dtype=bool)
    if k == 0:
        return DirectionResult(r, flags)

    tp0 = T.Tape()
    ref_val = f(tp0, tp0.leaf(xa)).val.copy()

    for _ in range(k):
        tp = T.Tape()
        r_node = tp.leaf(xi * r)
        out = f(tp, T.add(tp.const(xa), r_node))
        dvals = dist_proxy(pair, tp.const(ref_val), out)
        g = T.grad(T.sum_(dvals), r_node).a
        norms = np.linalg.norm(g, axis=1)
        zero = norms == 0.0
        flags |= zero
        live = ~zero
        nxt = r.copy()
        nxt[live] = g[live] / norms[live, None]
        r = nxt
    return DirectionResult(r, flags)


def perturb(f: Callable, x, pair: MetricPair, cfg: PerturbConfig,
            rng: T.Rng) -> PerturbationResult:
    """Adversarial perturbation r_adv = eps * direction with its true quotient.

    Epsilon is drawn independently per batch element.  The quotient uses
    the real dY (the proxy only ever steers direction finding).
    """
    xa = _as_points(x)
    res = adversarial_direction(f, xa, pair, cfg.xi, cfg.k, rng)
    eps = cfg.eps.draw(rng, xa.shape[0])
    r_adv = eps[:, None] * res.direction
    tp = T.Tape()
    out_ref = f(tp, tp.leaf(xa))
    out_pert = f(tp, tp.leaf(xa + r_adv))
    num = dist(pair, out_ref, out_pert).val
    den = np.linalg.norm(r_adv, axis=1)
    return PerturbationResult(res.direction, eps, r_adv, num / den, res.degenerate)


def virtual_adversarial_direction(f: Callable, x, pair: MetricPair, xi: float,
                                  k: int, eps: EpsilonDist, rng: T.Rng) -> DirectionResult:
    """Alias of adversarial_direction specialized to the VAT configuration.

    Requires dY = kl-divergence and a fixed epsilon; delegates directly,
    so outputs are bit-identical to the general routine.
    """
    if pair.dY != "kl-divergence":
        raise ValueError("virtual adversarial direction requires dY = kl-divergence")
    if eps.kind != "fixed":
        raise ValueError("virtual adversarial direction requires a fixed epsilon")
    return adversarial_direction(f, x, pair, xi, k, rng)
