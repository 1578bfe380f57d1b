"""MLPs with optional batch norm, Adam, and spectral weight normalization.

Parameters live in plain numpy arrays; ``forward`` binds them onto a
tape (memoized per tape, so a model closure evaluated several times in
one loss shares a single set of leaves) and records the network.
ParamSet snapshots are treated as immutable: the optimizer returns a new
set instead of writing in place.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tape as T

_BN_MOMENTUM = 0.9
_BN_EPS = 1e-5


class NonFiniteGradient(Exception):
    """A gradient entry went NaN/inf; training divergence surfaced, not hidden."""


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    hidden: tuple
    out_dim: int
    activation: str = "relu"
    batchnorm: tuple | None = None  # flag per hidden layer; None = all off

    def __post_init__(self):
        hidden = tuple(int(w) for w in self.hidden)
        if len(hidden) < 1:
            raise ValueError("need at least one hidden layer")
        if min(hidden) < 1 or self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("widths must be positive")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation: {self.activation!r}")
        bn = self.batchnorm
        bn = (False,) * len(hidden) if bn is None else tuple(bool(b) for b in bn)
        if len(bn) != len(hidden):
            raise ValueError("batchnorm flags must match hidden layer count")
        object.__setattr__(self, "hidden", hidden)
        object.__setattr__(self, "batchnorm", bn)

    def widths(self) -> list:
        return [self.in_dim, *self.hidden, self.out_dim]

    def to_dict(self) -> dict:
        return {"in_dim": self.in_dim, "hidden": list(self.hidden),
                "out_dim": self.out_dim, "activation": self.activation,
                "batchnorm": list(self.batchnorm)}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(in_dim=d["in_dim"], hidden=tuple(d["hidden"]),
                   out_dim=d["out_dim"], activation=d.get("activation", "relu"),
                   batchnorm=tuple(d["batchnorm"]) if d.get("batchnorm") is not None else None)


class ParamSet:
    """Weights, biases, optional batchnorm scale/shift, and running stats."""

    __slots__ = ("weights", "biases", "gammas", "betas", "run_mean", "run_var")

    def __init__(self, weights, biases, gammas, betas, run_mean, run_var):
        self.weights = list(weights)
        self.biases = list(biases)
        self.gammas = list(gammas)
        self.betas = list(betas)
        self.run_mean = list(run_mean)
        self.run_var = list(run_var)

    def flat(self) -> list:
        """Trainable arrays in a fixed order (running stats excluded)."""
        out = []
        for i in range(len(self.weights)):
            out.append(self.weights[i])
            out.append(self.biases[i])
            if self.gammas[i] is not None:
                out.append(self.gammas[i])
                out.append(self.betas[i])
        return out

    def replace_flat(self, arrays) -> "ParamSet":
        arrays = list(arrays)
        w, b, g, be = [], [], [], []
        j = 0
        for i in range(len(self.weights)):
            w.append(arrays[j]); j += 1
            b.append(arrays[j]); j += 1
            if self.gammas[i] is not None:
                g.append(arrays[j]); j += 1
                be.append(arrays[j]); j += 1
            else:
                g.append(None)
                be.append(None)
        return ParamSet(w, b, g, be,
                        [m.copy() if m is not None else None for m in self.run_mean],
                        [v.copy() if v is not None else None for v in self.run_var])

    def copy(self) -> "ParamSet":
        return self.replace_flat([a.copy() for a in self.flat()])


def init_params(spec: MlpSpec, rng: T.Rng) -> ParamSet:
    """He-scaled Gaussian weights, zero biases, unit batchnorm scales."""
    widths = spec.widths()
    weights, biases, gammas, betas, rmean, rvar = [], [], [], [], [], []
    for li in range(len(widths) - 1):
        fan_in, fan_out = widths[li], widths[li + 1]
        weights.append(rng.normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
        hidden_bn = li < len(spec.hidden) and spec.batchnorm[li]
        if hidden_bn:
            gammas.append(np.ones(fan_out))
            betas.append(np.zeros(fan_out))
            rmean.append(np.zeros(fan_out))
            rvar.append(np.ones(fan_out))
        else:
            gammas.append(None)
            betas.append(None)
            rmean.append(None)
            rvar.append(None)
    return ParamSet(weights, biases, gammas, betas, rmean, rvar)


class BoundParams(NamedTuple):
    weights: list
    biases: list
    gammas: list
    betas: list


def bind(tp: T.Tape, params: ParamSet) -> BoundParams:
    """Leaf nodes for the parameter arrays, memoized per tape.

    Every closure that runs the model on the same tape sees the same
    leaves, so gradients from loss and penalty terms accumulate onto one
    set of parameter nodes.
    """
    key = id(params)
    got = tp.cache.get(key)
    if got is None:
        got = BoundParams(
            [tp.leaf(w) for w in params.weights],
            [tp.leaf(b) for b in params.biases],
            [tp.leaf(g) if g is not None else None for g in params.gammas],
            [tp.leaf(b) if b is not None else None for b in params.betas],
        )
        tp.cache[key] = got
    return got


def forward(tp: T.Tape, spec: MlpSpec, params: ParamSet, x: T.Node,
            mode: str = "train", update_running: bool = False) -> T.Node:
    """Run the MLP; batch statistics in train mode, running stats in eval.

    ``update_running`` folds the batch statistics into the running
    averages (momentum 0.9); only the training loop's main pass sets it.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode: {mode!r}")
    if len(x.shape) != 2 or x.shape[1] != spec.in_dim:
        raise T.ShapeError("forward", x.shape, ("batch", spec.in_dim))
    bp = bind(tp, params)
    h = x
    n_layers = len(params.weights)
    for li in range(n_layers):
        h = T.affine(h, bp.weights[li], bp.biases[li])
        is_hidden = li < n_layers - 1
        if is_hidden and spec.batchnorm[li]:
            if mode == "train":
                h, bmean, bvar = T.batchnorm_train(h, bp.gammas[li], bp.betas[li], eps=_BN_EPS)
                if update_running:
                    params.run_mean[li] = _BN_MOMENTUM * params.run_mean[li] + (1 - _BN_MOMENTUM) * bmean
                    params.run_var[li] = _BN_MOMENTUM * params.run_var[li] + (1 - _BN_MOMENTUM) * bvar
            else:
                h = T.batchnorm_eval(h, bp.gammas[li], bp.betas[li],
                                     params.run_mean[li], params.run_var[li], eps=_BN_EPS)
        if is_hidden:
            h = T.relu(h)
    return h


def net_fn(spec: MlpSpec, params: ParamSet, mode: str = "eval"):
    """Batched numpy closure (N, in_dim) -> (N, out_dim) for the oracles."""
    def f(pts: np.ndarray) -> np.ndarray:
        tp = T.Tape()
        return forward(tp, spec, params, tp.leaf(pts), mode=mode).val
    return f


def net_grad_fn(spec: MlpSpec, params: ParamSet, mode: str = "eval"):
    """Batched input-gradient closure for scalar-output nets."""
    def g(pts: np.ndarray) -> np.ndarray:
        tp = T.Tape()
        x = tp.leaf(pts)
        out = forward(tp, spec, params, x, mode=mode)
        return T.grad(T.sum_(out), x).a
    return g


class AdamState:
    """First/second moments plus step counter; single-writer."""

    __slots__ = ("m", "v", "step", "beta1", "beta2", "eps")

    def __init__(self, params: ParamSet, beta1: float = 0.0, beta2: float = 0.9,
                 eps: float = 1e-8):
        flats = params.flat()
        self.m = [np.zeros_like(a) for a in flats]
        self.v = [np.zeros_like(a) for a in flats]
        self.step = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(state: AdamState, params: ParamSet, grads, lr: float) -> ParamSet:
    """One Adam update; returns a new ParamSet, mutates the state.

    ``grads`` aligns with ``params.flat()``.  The learning-rate schedule
    is the caller's business.
    """
    flats = params.flat()
    if len(grads) != len(flats):
        raise ValueError(f"expected {len(flats)} gradient arrays, got {len(grads)}")
    garrs = []
    for i, g in enumerate(grads):
        ga = g.a if isinstance(g, T.Tensor) else np.asarray(g, dtype=np.float64)
        if not np.isfinite(ga).all():
            raise NonFiniteGradient(f"non-finite gradient for parameter {i} "
                                    f"(shape {ga.shape}) at step {state.step + 1}")
        garrs.append(ga)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new = []
    for i, (p, g) in enumerate(zip(flats, garrs)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        mhat = state.m[i] / bc1
        vhat = state.v[i] / bc2
        new.append(p - lr * mhat / (np.sqrt(vhat) + state.eps))
    return params.replace_flat(new)


class SnState:
    """Persistent left/right power-iteration vectors for one weight matrix."""

    __slots__ = ("u", "v")

    def __init__(self, shape: tuple, rng: T.Rng | None = None):
        rows, cols = shape
        if rng is None:
            self.u = np.ones(rows) / np.sqrt(rows)
            self.v = np.ones(cols) / np.sqrt(cols)
        else:
            self.u = rng.unit_vectors(1, rows)[0]
            self.v = rng.unit_vectors(1, cols)[0]


class SnResult(NamedTuple):
    matrix: np.ndarray
    sigma: float
    degenerate: bool


def spectral_normalize(W: np.ndarray, iters: int = 1, state: SnState | None = None) -> SnResult:
    """Divide W by the power-iteration estimate of its largest singular value.

    ``state`` persists the iteration vectors across training steps (the
    usual one-iteration-per-step regime); passing a larger ``iters``
    converges the estimate in place.  A zero matrix comes back unchanged
    with the degenerate flag set.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError("expected a 2-D weight matrix")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not np.any(W):
        return SnResult(W.copy(), 0.0, True)
    if state is None:
        state = SnState(W.shape)
    u, v = state.u, state.v
    for _ in range(iters):
        v = W.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return SnResult(W.copy(), 0.0, True)
        v = v / nv
        u = W @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return SnResult(W.copy(), 0.0, True)
        u = u / nu
    state.u, state.v = u, v
    sigma = float(u @ W @ v)
    return SnResult(W / sigma, sigma, False)


# ---------------------------------------------------------------------------
# checkpoints

def _arr(a):
    return None if a is None else np.asarray(a, dtype=np.float64).tolist()


def _unarr(a):
    return None if a is None else np.asarray(a, dtype=np.float64)


def save_checkpoint(path, spec: MlpSpec, params: ParamSet, rng_seed: int):
    """JSON checkpoint; float round-trip is bit-exact via repr serialization."""
    for a in params.flat():
        if not np.isfinite(a).all():
            raise ValueError("refusing to checkpoint non-finite parameters")
    doc = {
        "spec": spec.to_dict(),
        "params": {
            "weights": [_arr(w) for w in params.weights],
            "biases": [_arr(b) for b in params.biases],
            "gammas": [_arr(g) for g in params.gammas],
            "betas": [_arr(b) for b in params.betas],
        },
        "running": {
            "mean": [_arr(m) for m in params.run_mean],
            "var": [_arr(v) for v in params.run_var],
        },
        "rng_seed": int(rng_seed),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    spec = MlpSpec.from_dict(doc["spec"])
    p = doc["params"]
    params = ParamSet(
        [_unarr(w) for w in p["weights"]],
        [_unarr(b) for b in p["biases"]],
        [_unarr(g) for g in p["gammas"]],
        [_unarr(b) for b in p["betas"]],
        [_unarr(m) for m in doc["running"]["mean"]],
        [_unarr(v) for v in doc["running"]["var"]],
    )
    return spec, params, doc["rng_seed"]
