"""Lipschitz regularization terms as loss-builders over tape nodes.

The adversarial penalty evaluates the Lipschitz quotient at perturbed
pairs (x, x + r_adv) with r_adv from the power-iteration search; the
competing penalties regularize the input-gradient norm directly (one- or
two-sided) or the quotient at random pairs.  Each builder records onto
the caller's tape so parameter gradients flow through the penalty; the
perturbation direction itself is a constant, never differentiated
through.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import tape as T
from .metrics import MetricPair, dist
from .perturb import EpsilonDist, adversarial_direction, virtual_adversarial_direction


@dataclass(frozen=True)
class AlrConfig:
    """Adversarial Lipschitz penalty settings.

    ``sided`` picks hinge (one) or absolute deviation (two) around K;
    ``form`` applies the violation linearly, squared, or as their sum.
    ``fix_reference`` stops gradients through the f(x) term.
    ``square_expectation`` squares the batch mean of the linear hinge
    instead of averaging squared hinges.
    """

    K: float = 1.0
    lam: float = 1.0
    xi: float = 10.0
    k: int = 1
    eps: EpsilonDist = field(default_factory=lambda: EpsilonDist.uniform(0.1, 10.0))
    sided: str = "one"
    form: str = "squared"
    fix_reference: bool = False
    square_expectation: bool = False

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.xi == 0:
            raise ValueError("xi must be nonzero")
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.sided not in ("one", "two"):
            raise ValueError(f"unknown sided: {self.sided!r}")
        if self.form not in ("linear", "squared", "both"):
            raise ValueError(f"unknown form: {self.form!r}")
        if self.square_expectation and self.form != "squared":
            raise ValueError("square_expectation only applies to the squared form")


class PenaltyReport(NamedTuple):
    penalty_value: float
    violations: int  # batch elements with quotient above K
    mean_quotient: float
    max_quotient: float
    dropped: int  # excluded pairs / degenerate direction rows


def penalty_from_quotient(q: T.Node, K: float, sided: str, form: str) -> T.Node:
    """Per-element penalty from the quotient node; monotone in the quotient."""
    v = T.sub(q, q.tape.const(K))
    v = T.relu(v) if sided == "one" else T.absval(v)
    if form == "linear":
        return v
    if form == "squared":
        return T.square(v)
    return T.add(v, T.square(v))


def alp(tp: T.Tape, f: Callable, x, pair: MetricPair, cfg: AlrConfig,
        rng: T.Rng) -> tuple:
    """Adversarial Lipschitz penalty: lambda * mean over the batch of the
    (hinged) quotient violation at adversarially perturbed pairs.

    Returns the loss node on ``tp`` plus a report of the quotients seen.
    """
    xa = x.a if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float64)
    if xa.shape[0] == 0:
        raise ValueError("empty batch")
    dres = adversarial_direction(f, xa, pair, cfg.xi, cfg.k, rng)
    eps = cfg.eps.draw(rng, xa.shape[0])
    r_adv = eps[:, None] * dres.direction
    dxv = np.linalg.norm(r_adv, axis=1)

    out_ref = f(tp, tp.const(xa))
    out_pert = f(tp, tp.const(xa + r_adv))
    ref = tp.const(out_ref.val) if cfg.fix_reference else out_ref
    q = T.div(dist(pair, ref, out_pert), tp.const(dxv))
    if cfg.square_expectation:
        v = T.sub(q, tp.const(cfg.K))
        v = T.relu(v) if cfg.sided == "one" else T.absval(v)
        loss = T.mul(tp.const(cfg.lam), T.square(T.mean(v)))
    else:
        per = penalty_from_quotient(q, cfg.K, cfg.sided, cfg.form)
        loss = T.mul(tp.const(cfg.lam), T.mean(per))
    qv = q.val
    report = PenaltyReport(loss.item(), int((qv > cfg.K).sum()),
                           float(qv.mean()), float(qv.max()),
                           int(dres.degenerate.sum()))
    return loss, report


def lp(tp: T.Tape, f: Callable, x, lam: float, K: float = 1.0) -> T.Node:
    """One-sided gradient-norm penalty lambda * mean((||grad f|| - K)+^2).

    Differentiating the result with respect to parameters backpropagates
    through the gradient norm (double backprop).
    """
    xa = x.a if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float64)
    xn = tp.leaf(xa)
    out = f(tp, xn)
    g = T.grad(T.sum_(out), xn, create_graph=True)
    gn = T.l2norm(g, axis=1)
    hinge = T.relu(T.sub(gn, tp.const(K)))
    return T.mul(tp.const(lam), T.mean(T.square(hinge)))


def gp(tp: T.Tape, f: Callable, x, lam: float) -> T.Node:
    """Two-sided gradient penalty lambda * mean((||grad f|| - 1)^2)."""
    xa = x.a if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float64)
    xn = tp.leaf(xa)
    out = f(tp, xn)
    g = T.grad(T.sum_(out), xn, create_graph=True)
    gn = T.l2norm(g, axis=1)
    diff = T.sub(gn, tp.const(1.0))
    return T.mul(tp.const(lam), T.mean(T.square(diff)))


def explicit_random_pair(tp: T.Tape, f: Callable, x, y, lam: float,
                         K: float = 1.0) -> tuple:
    """Hinged squared quotient violation at given sample pairs.

    Pairs closer than 1e-12 in the input space carry no usable quotient;
    they are dropped and counted.  A batch of only such pairs is an error.
    """
    xa = x.a if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float64)
    ya = y.a if isinstance(y, T.Tensor) else np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape:
        raise T.ShapeError("explicit_random_pair", xa.shape, ya.shape)
    dxv = np.linalg.norm(xa - ya, axis=1)
    keep = dxv >= 1e-12
    dropped = int((~keep).sum())
    if not keep.any():
        raise ValueError("all pairs degenerate (dX < 1e-12)")
    xa, ya, dxv = xa[keep], ya[keep], dxv[keep]

    fx = f(tp, tp.const(xa))
    fy = f(tp, tp.const(ya))
    num = dist(MetricPair(dY="abs-diff"), fx, fy)
    q = T.div(num, tp.const(dxv))
    per = penalty_from_quotient(q, K, "one", "squared")
    loss = T.mul(tp.const(lam), T.mean(per))
    qv = q.val
    report = PenaltyReport(loss.item(), int((qv > K).sum()),
                           float(qv.mean()), float(qv.max()), dropped)
    return loss, report


def interpolate_pairs(xr: np.ndarray, xg: np.ndarray, rng: T.Rng) -> np.ndarray:
    """Random convex combinations t*xr + (1-t)*xg, one t per pair."""
    xr = np.asarray(xr, dtype=np.float64)
    xg = np.asarray(xg, dtype=np.float64)
    if xr.shape != xg.shape:
        raise ValueError(f"batch shapes differ: {xr.shape} vs {xg.shape}")
    t = rng.uniform((xr.shape[0], 1))
    return t * xr + (1.0 - t) * xg


def lds_vat(tp: T.Tape, f: Callable, x, pair: MetricPair, eps: EpsilonDist,
            xi: float, k: int, rng: T.Rng) -> T.Node:
    """Local distributional smoothness: mean KL(p(x) || p(x + r_vadv)).

    ``f`` outputs logits; the KL runs on their softmax with the reference
    distribution held constant (the fix-reference semantics of the
    virtual adversarial objective).
    """
    def fp(tape, xn):
        return T.softmax(f(tape, xn))

    xa = x.a if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float64)
    dres = virtual_adversarial_direction(fp, xa, pair, xi, k, eps, rng)
    epsv = eps.draw(rng, xa.shape[0])
    r_adv = epsv[:, None] * dres.direction
    out_ref = fp(tp, tp.const(xa))
    out_pert = fp(tp, tp.const(xa + r_adv))
    return T.mean(dist(pair, tp.const(out_ref.val), out_pert))


def entropy_min(tp: T.Tape, f: Callable, x) -> T.Node:
    """Mean Shannon entropy of the softmax outputs (logits in)."""
    xa = x.a if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float64)
    ls = T.log_softmax(f(tp, tp.const(xa)))
    p = T.exp(ls)
    ent = T.neg(T.sum_(T.mul(p, ls), axis=-1))
    return T.mean(ent)
