"""Brute-force ground truth for everything the penalties approximate.

Finite-difference gradients, exhaustive perturbation search, grid
Lipschitz estimation, exact spectral norms and top eigenvectors.  All
oracles treat the function under test as a black-box closure over numpy
arrays and share no code with the differentiation tape; independence is
the point.

Closures passed to the batch oracles map an (N, d) array of points to
(N,) or (N, m) outputs.  ``fd_gradient`` takes a plain scalar closure.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np


class OracleError(Exception):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Rectangular evaluation grid: per-dimension bounds and node counts.

    Nodes include both endpoints, so a resolution of 256 over [-4, 4]
    steps by 8/255.
    """

    bounds: tuple = ((-4.0, 4.0), (-4.0, 4.0))
    resolution: tuple = (256, 256)

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        res = tuple(int(r) for r in self.resolution)
        if len(bounds) != len(res):
            raise ValueError("bounds and resolution must have one entry per dimension")
        for lo, hi in bounds:
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValueError(f"bounds must be finite with lo < hi, got ({lo}, {hi})")
        for r in res:
            if r < 2:
                raise ValueError(f"resolution must be >= 2, got {r}")
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "resolution", res)

    @property
    def ndim(self) -> int:
        return len(self.bounds)

    def axes(self) -> list:
        return [np.linspace(lo, hi, r) for (lo, hi), r in zip(self.bounds, self.resolution)]

    def points(self) -> np.ndarray:
        """All grid nodes as an (N, d) array, dimension 0 varying slowest."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)


def fd_gradient(f: Callable, x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar closure, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy(); xp[idx] += h
        xm = x.copy(); xm[idx] -= h
        fp, fm = float(f(xp)), float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite evaluation near coordinate {idx}")
        g[idx] = (fp - fm) / (2.0 * h)
    return g


def _rowwise_euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a - b).reshape(a.shape[0], -1)
    return np.sqrt((d * d).sum(axis=1))


def _eval_rows(f, pts: np.ndarray) -> np.ndarray:
    out = np.asarray(f(pts), dtype=np.float64)
    if out.ndim == 1:
        out = out[:, None]
    return out


# splitmix64 mix, used only to seed deterministic direction sets in d > 2
_MASK64 = (1 << 64) - 1


def _mix_stream(seed: int, n: int) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = np.uint64(seed) + np.arange(1, n + 1, dtype=np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def _direction_set(d: int, n: int) -> np.ndarray:
    """Deterministic unit directions: equal angles in 2-D, hashed Gaussians above."""
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        theta = np.arange(n) * (2.0 * np.pi / n)
        return np.stack([np.cos(theta), np.sin(theta)], axis=1)
    u = _mix_stream(0xD1CE, 2 * n * d)
    u1 = np.clip(u[: n * d], 1e-300, 1.0)
    u2 = u[n * d:]
    g = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    g = g.reshape(n, d)
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return g / norms


def brute_force_max_quotient(
    f: Callable,
    x,
    dx: Callable | None = None,
    dy: Callable | None = None,
    eps_set=None,
    n_directions: int = 1000,
    n_restarts: int = 8,
    refine_iters: int = 40,
) -> float:
    """Max of dy(f(x), f(x+r)) / dx(x, x+r) over perturbations r = eps * u.

    Exhaustive over a deterministic direction set crossed with ``eps_set``,
    then coordinate ascent (direction nudges, eps rescales) from the best
    candidates.  ``dx``/``dy`` are row-wise metrics; euclidean by default.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = x.shape[0]
    if dx is None:
        dx = _rowwise_euclidean
    if dy is None:
        dy = _rowwise_euclidean
    if eps_set is None:
        eps_set = np.geomspace(1e-2, 10.0, 13)
    eps_set = np.asarray(eps_set, dtype=np.float64)
    if (eps_set <= 0).any():
        raise ValueError("eps_set entries must be positive")

    dirs = _direction_set(d, n_directions)
    fx = _eval_rows(f, x[None, :])

    def quotients(units: np.ndarray, eps: np.ndarray) -> np.ndarray:
        pts = x[None, :] + units * eps[:, None]
        base = np.broadcast_to(x, pts.shape)
        num = dy(_eval_rows(f, pts), np.broadcast_to(fx, (pts.shape[0], fx.shape[1])))
        den = dx(pts, base)
        out = np.zeros(pts.shape[0])
        ok = den > 1e-300
        out[ok] = num[ok] / den[ok]
        return out

    units = np.repeat(dirs, len(eps_set), axis=0)
    eps = np.tile(eps_set, len(dirs))
    q = quotients(units, eps)
    order = np.argsort(q)[::-1][:n_restarts]

    # refinement stays inside the sampled perturbation budget
    e_lo, e_hi = float(eps_set.min()), float(eps_set.max())
    best = float(q.max(initial=0.0))
    for idx in order:
        u, e, qu = units[idx].copy(), float(eps[idx]), float(q[idx])
        ang_step = 2.0 * np.pi / n_directions
        eps_step = 1.5
        for _ in range(refine_iters):
            cand_u = [u]
            for axis in range(d):
                for s in (ang_step, -ang_step):
                    v = u.copy()
                    v[axis] += s
                    v /= np.linalg.norm(v)
                    cand_u.append(v)
            cand_e = [e, min(e * eps_step, e_hi), max(e / eps_step, e_lo)]
            us = np.array([cu for cu in cand_u for _ in cand_e])
            es = np.array([ce for _ in cand_u for ce in cand_e])
            qs = quotients(us, es)
            j = int(np.argmax(qs))
            if qs[j] > qu:
                u, e, qu = us[j], float(es[j]), float(qs[j])
            else:
                ang_step *= 0.5
                eps_step = 1.0 + (eps_step - 1.0) * 0.5
                if ang_step < 1e-10 and eps_step - 1.0 < 1e-10:
                    break
        best = max(best, qu)
    return best


def grid_lipschitz(
    f: Callable,
    grid: GridSpec,
    mode: str = "grad-norm",
    grad_fn: Callable | None = None,
    h: float = 1e-4,
    chunk: int = 8192,
):
    """Empirical Lipschitz estimate over a grid.

    grad-norm mode: per-node gradient norm, from ``grad_fn`` (batched
    (N, d) -> (N, d)) when supplied, else central differences on ``f``.
    pairwise-quotient mode: |f(a)-f(b)| / ||a-b|| over axis-adjacent node
    pairs, with each node keeping the max over its incident edges.

    Returns (max value, per-node array shaped like ``grid.resolution``).
    """
    pts = grid.points()
    n = pts.shape[0]
    if mode == "grad-norm":
        if grad_fn is not None:
            norms = np.empty(n)
            for lo in range(0, n, chunk):
                g = np.asarray(grad_fn(pts[lo:lo + chunk]), dtype=np.float64)
                norms[lo:lo + chunk] = np.linalg.norm(g, axis=1)
        else:
            sq = np.zeros(n)
            for axis in range(grid.ndim):
                diffs = np.empty(n)
                for lo in range(0, n, chunk):
                    block = pts[lo:lo + chunk]
                    e = np.zeros(grid.ndim)
                    e[axis] = h
                    fp = _eval_rows(f, block + e)[:, 0]
                    fm = _eval_rows(f, block - e)[:, 0]
                    diffs[lo:lo + chunk] = (fp - fm) / (2.0 * h)
                sq += diffs * diffs
            norms = np.sqrt(sq)
        cells = norms.reshape(grid.resolution)
        return float(cells.max()), cells
    if mode == "pairwise-quotient":
        vals = np.empty(n)
        for lo in range(0, n, chunk):
            vals[lo:lo + chunk] = _eval_rows(f, pts[lo:lo + chunk])[:, 0]
        vals = vals.reshape(grid.resolution)
        cells = np.zeros_like(vals)
        for axis in range(grid.ndim):
            lo_b, hi_b = grid.bounds[axis]
            step = (hi_b - lo_b) / (grid.resolution[axis] - 1)
            jump = np.abs(np.diff(vals, axis=axis)) / step
            head = tuple(slice(None, -1) if a == axis else slice(None) for a in range(grid.ndim))
            tail = tuple(slice(1, None) if a == axis else slice(None) for a in range(grid.ndim))
            np.maximum(cells[head], jump, out=cells[head])
            np.maximum(cells[tail], jump, out=cells[tail])
        return float(cells.max()), cells
    raise ValueError(f"unknown mode: {mode!r}")


def _power_svd(W: np.ndarray, v0: np.ndarray, tol: float, max_iters: int) -> float:
    v = v0 / np.linalg.norm(v0)
    sigma = 0.0
    for _ in range(max_iters):
        u = W @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        u /= nu
        v = W.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0
        v /= nv
        s = float(u @ W @ v)
        if abs(s - sigma) <= tol * max(abs(s), 1.0):
            return s
        sigma = s
    return sigma


def exact_spectral_norm(W, tol: float = 1e-12, max_iters: int = 200000) -> float:
    """Largest singular value by two-sided power iteration, converged to ``tol``.

    Several deterministic starting vectors guard against a start that is
    orthogonal to the top singular direction.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if max(W.shape) > 64:
        raise ValueError("matrix dimension exceeds 64")
    if not np.any(W):
        return 0.0
    n = W.shape[1]
    starts = [np.ones(n)]
    e1 = np.zeros(n); e1[0] = 1.0
    starts.append(e1)
    starts.append(2.0 * _mix_stream(0x5EED, n) - 1.0 + 1e-3)
    best = 0.0
    for v0 in starts:
        if np.linalg.norm(v0) == 0.0:
            continue
        best = max(best, _power_svd(W, v0, tol, max_iters))
    return best


class EigResult(NamedTuple):
    vector: np.ndarray
    value: float
    degenerate: bool


def exact_top_eigvec(A, tol: float = 1e-12, max_iters: int = 200000) -> EigResult:
    """Unit eigenvector of the largest-|lambda| eigenvalue of a symmetric matrix.

    Iterates on A^2 so eigenvalue sign cannot stall convergence, then
    deflates to estimate the runner-up; an absolute-value eigengap below
    1e-9 sets ``degenerate`` (the direction is ill-defined there).
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("expected a square matrix")
    if A.shape[0] > 64:
        raise ValueError("matrix dimension exceeds 64")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise ValueError("matrix is not symmetric")
    n = A.shape[0]
    if not np.any(A):
        return EigResult(np.eye(n)[:, 0], 0.0, True)

    def top_of_square(deflate_v=None):
        best_vec, best_lam2 = None, -1.0
        e1 = np.zeros(n); e1[0] = 1.0
        for v0 in (np.ones(n), e1, 2.0 * _mix_stream(0xE16, n) - 1.0 + 1e-3):
            v = v0.copy()
            if deflate_v is not None:
                v -= (deflate_v @ v) * deflate_v
            nv = np.linalg.norm(v)
            if nv == 0.0:
                continue
            v /= nv
            lam2 = 0.0
            for _ in range(max_iters):
                w = A @ (A @ v)
                if deflate_v is not None:
                    # project out the converged top direction each step so
                    # roundoff cannot reintroduce it
                    w -= (deflate_v @ w) * deflate_v
                nw = np.linalg.norm(w)
                if nw == 0.0:
                    lam2 = 0.0
                    break
                w /= nw
                # vector convergence, not eigenvalue convergence: the value
                # settles quadratically faster than the direction does
                moved = min(np.linalg.norm(w - v), np.linalg.norm(w + v))
                v = w
                lam2 = nw
                if moved <= tol:
                    break
            if lam2 > best_lam2:
                best_vec, best_lam2 = v, lam2
        return best_vec, best_lam2

    v1, lam2_top = top_of_square()
    lam1 = float(v1 @ A @ v1)
    _, lam2_second = top_of_square(deflate_v=v1)
    gap = np.sqrt(max(lam2_top, 0.0)) - np.sqrt(max(lam2_second, 0.0))
    return EigResult(v1, lam1, bool(gap < 1e-9))
