"""Dense float64 tensors and a reverse-mode differentiation tape.

The tape records every operation as a node holding its forward value and
the local vector-Jacobian actions of its inputs.  Adjoint accumulation in
``grad`` is itself expressed through the same differentiable primitives,
so gradients can be differentiated again (double backprop), which the
gradient-norm penalties need.

Everything is float64 and CPU-only; arrays are numpy throughout.
"""
from __future__ import annotations

import numpy as np


class TapeError(Exception):
    """Raised for invalid differentiation requests (non-scalar output, foreign node)."""


class ShapeError(TapeError):
    """Raised when operand shapes do not conform to an op.

    Carries the op name and the offending shapes so failures are
    diagnosable without a debugger.
    """

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {self.shapes}")


class Tensor:
    """Immutable dense array of 64-bit floats, row-major."""

    __slots__ = ("a",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64, order="C")
        arr.flags.writeable = False
        self.a = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path: takes ownership of a freshly computed array.
        t = object.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        t.a = arr
        return t

    @property
    def shape(self) -> tuple:
        return tuple(self.a.shape)

    @property
    def data(self) -> np.ndarray:
        """Row-major flat view of the buffer."""
        return self.a.reshape(-1)

    def item(self) -> float:
        return float(self.a)

    def tolist(self):
        return self.a.tolist()

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def _as_array(values) -> np.ndarray:
    if isinstance(values, Tensor):
        return values.a
    if isinstance(values, Node):
        raise TapeError("expected a plain value, got a tape node; use .value")
    return np.asarray(values, dtype=np.float64)


class Tape:
    """Recording context for one differentiation graph.

    A tape and its nodes belong to a single worker; parallelism happens
    across independent tapes.  ``cache`` memoizes parameter bindings so a
    model closure called twice on the same tape reuses one set of leaves.
    """

    __slots__ = ("cache",)

    def __init__(self):
        self.cache: dict = {}

    def leaf(self, values) -> "Node":
        return Node(self, _as_array(values), ())

    # A constant is a leaf nothing differentiates against; alias kept for intent.
    def const(self, values) -> "Node":
        return Node(self, _as_array(values), ())


class Node:
    """A value recorded on a tape, with the local backward actions of its inputs.

    ``parents`` is a tuple of ``(input_node, vjp)`` pairs where ``vjp``
    maps the adjoint node of this value to the adjoint contribution of
    that input, built from tape primitives so it is differentiable again.
    """

    __slots__ = ("tape", "val", "parents")

    def __init__(self, tape: Tape, val: np.ndarray, parents):
        self.tape = tape
        self.val = val
        self.parents = parents

    @property
    def value(self) -> Tensor:
        return Tensor._wrap(self.val)

    @property
    def shape(self) -> tuple:
        return tuple(self.val.shape)

    def item(self) -> float:
        return float(self.val)

    # Operator sugar; plain values are promoted to constants on the same tape.
    def __add__(self, other):
        return add(self, _promote(self, other))

    def __radd__(self, other):
        return add(_promote(self, other), self)

    def __sub__(self, other):
        return sub(self, _promote(self, other))

    def __rsub__(self, other):
        return sub(_promote(self, other), self)

    def __mul__(self, other):
        return mul(self, _promote(self, other))

    def __rmul__(self, other):
        return mul(_promote(self, other), self)

    def __truediv__(self, other):
        return div(self, _promote(self, other))

    def __rtruediv__(self, other):
        return div(_promote(self, other), self)

    def __matmul__(self, other):
        return matmul(self, _promote(self, other))

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Node(shape={self.shape})"


def _promote(like: Node, other) -> Node:
    if isinstance(other, Node):
        if other.tape is not like.tape:
            raise TapeError("operands recorded on different tapes")
        return other
    return like.tape.const(other)


def _check_same_tape(op: str, *nodes: Node):
    t = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not t:
            raise TapeError(f"{op}: operands recorded on different tapes")


# ---------------------------------------------------------------------------
# broadcasting helpers

def _sum_to(node: Node, shape: tuple) -> Node:
    """Reduce a broadcast adjoint back to the shape of the input it belongs to."""
    if node.shape == shape:
        return node
    nd_extra = len(node.shape) - len(shape)
    axes = tuple(range(nd_extra))
    axes += tuple(
        i + nd_extra
        for i, (s, t) in enumerate(zip(shape, node.shape[nd_extra:]))
        if s == 1 and t != 1
    )
    out = sum_(node, axis=axes, keepdims=False) if axes else node
    if out.shape != shape:
        out = reshape(out, shape)
    return out


# ---------------------------------------------------------------------------
# primitives

def add(a: Node, b: Node) -> Node:
    _check_same_tape("add", a, b)
    try:
        val = a.val + b.val
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return Node(a.tape, val, (
        (a, lambda g: _sum_to(g, sa)),
        (b, lambda g: _sum_to(g, sb)),
    ))


def sub(a: Node, b: Node) -> Node:
    _check_same_tape("sub", a, b)
    try:
        val = a.val - b.val
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return Node(a.tape, val, (
        (a, lambda g: _sum_to(g, sa)),
        (b, lambda g: _sum_to(neg(g), sb)),
    ))


def neg(a: Node) -> Node:
    return Node(a.tape, -a.val, ((a, lambda g: neg(g)),))


def mul(a: Node, b: Node) -> Node:
    _check_same_tape("mul", a, b)
    try:
        val = a.val * b.val
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return Node(a.tape, val, (
        (a, lambda g: _sum_to(mul(g, b), sa)),
        (b, lambda g: _sum_to(mul(g, a), sb)),
    ))


def div(a: Node, b: Node) -> Node:
    _check_same_tape("div", a, b)
    try:
        val = a.val / b.val
    except ValueError:
        raise ShapeError("div", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    out = Node(a.tape, val, ())
    out.parents = (
        (a, lambda g: _sum_to(div(g, b), sa)),
        (b, lambda g: _sum_to(neg(div(mul(g, out), b)), sb)),
    )
    return out


def matmul(a: Node, b: Node) -> Node:
    _check_same_tape("matmul", a, b)
    if a.val.ndim != 2 or b.val.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    val = a.val @ b.val
    return Node(a.tape, val, (
        (a, lambda g: matmul(g, transpose(b))),
        (b, lambda g: matmul(transpose(a), g)),
    ))


def transpose(a: Node) -> Node:
    if a.val.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return Node(a.tape, a.val.T, ((a, lambda g: transpose(g)),))


def relu(a: Node) -> Node:
    # Subgradient at 0 is 0 by convention.
    mask = (a.val > 0.0).astype(np.float64)
    return Node(a.tape, a.val * mask, ((a, lambda g: mul(g, g.tape.const(mask))),))


def absval(a: Node) -> Node:
    sign = np.sign(a.val)
    return Node(a.tape, np.abs(a.val), ((a, lambda g: mul(g, g.tape.const(sign))),))


def exp(a: Node) -> Node:
    out = Node(a.tape, np.exp(a.val), ())
    out.parents = ((a, lambda g: mul(g, out)),)
    return out


def log(a: Node) -> Node:
    return Node(a.tape, np.log(a.val), ((a, lambda g: div(g, a)),))


def square(a: Node) -> Node:
    return Node(a.tape, a.val * a.val, (
        (a, lambda g: mul(g, mul(g.tape.const(2.0), a))),
    ))


def sqrt(a: Node) -> Node:
    out = Node(a.tape, np.sqrt(a.val), ())
    out.parents = ((a, lambda g: div(mul(g, g.tape.const(0.5)), out)),)
    return out


def sum_(a: Node, axis=None, keepdims: bool = False) -> Node:
    val = a.val.sum(axis=axis, keepdims=keepdims)
    sa = a.shape

    def vjp(g):
        return _spread(g, sa, axis, keepdims)

    return Node(a.tape, val, ((a, vjp),))


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    val = a.val.mean(axis=axis, keepdims=keepdims)
    sa = a.shape
    count = a.val.size if axis is None else int(np.prod([sa[i] for i in _norm_axes(axis, len(sa))]))

    def vjp(g):
        return _spread(div(g, g.tape.const(float(count))), sa, axis, keepdims)

    return Node(a.tape, val, ((a, vjp),))


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _spread(g: Node, target_shape: tuple, axis, keepdims: bool) -> Node:
    """Broadcast a reduced adjoint back over the reduced axes."""
    if not keepdims and axis is not None:
        kept = list(target_shape)
        for ax in _norm_axes(axis, len(target_shape)):
            kept[ax] = 1
        g = reshape(g, tuple(kept))
    elif not keepdims:
        g = reshape(g, (1,) * len(target_shape)) if target_shape else g
    return broadcast_to(g, target_shape)


def broadcast_to(a: Node, shape: tuple) -> Node:
    if a.shape == tuple(shape):
        return a
    try:
        val = np.broadcast_to(a.val, shape)
    except ValueError:
        raise ShapeError("broadcast", a.shape, shape) from None
    sa = a.shape
    return Node(a.tape, np.ascontiguousarray(val), ((a, lambda g: _sum_to(g, sa)),))


def reshape(a: Node, shape: tuple) -> Node:
    sa = a.shape
    try:
        val = a.val.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return Node(a.tape, val, ((a, lambda g: reshape(g, sa)),))


def l2norm(a: Node, axis=None, keepdims: bool = False) -> Node:
    """Euclidean norm over ``axis``; subgradient at the origin is 0."""
    val = np.sqrt((a.val * a.val).sum(axis=axis, keepdims=keepdims))
    sa = a.shape

    def vjp(g):
        t = g.tape
        # Rows of zero norm get a zero subgradient instead of a division blowup.
        safe = val + (val == 0.0)
        gn = _spread(div(g, t.const(safe)), sa, axis, keepdims) if val.shape != sa else div(g, t.const(safe))
        return mul(gn, a)

    return Node(a.tape, val, ((a, vjp),))


def concat(nodes, axis: int = 0) -> Node:
    nodes = list(nodes)
    _check_same_tape("concat", *nodes)
    try:
        val = np.concatenate([n.val for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[n.shape for n in nodes]) from None
    parents = []
    start = 0
    for n in nodes:
        width = n.shape[axis]
        key = tuple(
            slice(start, start + width) if d == axis % val.ndim else slice(None)
            for d in range(val.ndim)
        )
        parents.append((n, lambda g, key=key: slice_(g, key)))
        start += width
    return Node(nodes[0].tape, val, tuple(parents))


def slice_(a: Node, key) -> Node:
    val = a.val[key]
    sa = a.shape
    return Node(a.tape, np.ascontiguousarray(val), ((a, lambda g: embed(g, sa, key)),))


def embed(g: Node, shape: tuple, key) -> Node:
    """Scatter ``g`` into zeros of ``shape`` at ``key`` (adjoint of slice)."""
    out = np.zeros(shape, dtype=np.float64)
    out[key] = g.val
    return Node(g.tape, out, ((g, lambda h: slice_(h, key)),))


def clip(a: Node, lo: float, hi: float) -> Node:
    """Clamp to [lo, hi]; gradient passes only through the interior and edges."""
    val = np.clip(a.val, lo, hi)
    mask = ((a.val >= lo) & (a.val <= hi)).astype(np.float64)
    return Node(a.tape, val, ((a, lambda g: mul(g, g.tape.const(mask))),))


def stop_gradient(a: Node) -> Node:
    """The value of ``a``, detached: no adjoint flows into its history."""
    return Node(a.tape, a.val, ())


# ---------------------------------------------------------------------------
# composites (differentiate through their primitive decomposition)

def affine(x: Node, w: Node, b: Node) -> Node:
    return add(matmul(x, w), b)


def log_softmax(z: Node) -> Node:
    """Row-wise log softmax over the last axis, max-shifted for stability."""
    shift = z.tape.const(z.val.max(axis=-1, keepdims=True))
    s = sub(z, shift)
    lse = log(sum_(exp(s), axis=-1, keepdims=True))
    return sub(s, lse)


def softmax(z: Node) -> Node:
    return exp(log_softmax(z))


def batchnorm_train(x: Node, gamma: Node, beta: Node, eps: float = 1e-5):
    """Batch normalization over axis 0 with batch statistics.

    Returns the output node plus the raw batch mean/variance so the
    caller can fold them into running statistics.
    """
    mu = mean(x, axis=0, keepdims=True)
    xc = sub(x, mu)
    var = mean(square(xc), axis=0, keepdims=True)
    inv = div(x.tape.const(1.0), sqrt(add(var, x.tape.const(eps))))
    out = add(mul(mul(xc, inv), gamma), beta)
    return out, mu.val.reshape(-1).copy(), var.val.reshape(-1).copy()


def batchnorm_eval(x: Node, gamma: Node, beta: Node,
                   running_mean: np.ndarray, running_var: np.ndarray,
                   eps: float = 1e-5) -> Node:
    t = x.tape
    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = mul(sub(x, t.const(running_mean)), t.const(inv))
    return add(mul(xhat, gamma), beta)


# ---------------------------------------------------------------------------
# generic recording entry point

_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "transpose": transpose,
    "relu": relu,
    "abs": absval,
    "exp": exp,
    "log": log,
    "square": square,
    "sqrt": sqrt,
    "stopgrad": stop_gradient,
}


def record(kind: str, inputs, params: dict | None = None) -> Node:
    """Record one operation by name.

    ``inputs`` is a node or sequence of nodes; ``params`` carries op
    options (axis, shape, slice key, batchnorm eps, ...).  Unknown kinds
    and nonconforming shapes raise a structured error.
    """
    params = dict(params or {})
    if isinstance(inputs, Node):
        inputs = (inputs,)
    else:
        inputs = tuple(inputs)
    if kind in _OPS:
        return _OPS[kind](*inputs)
    if kind == "sum":
        return sum_(inputs[0], **params)
    if kind == "mean":
        return mean(inputs[0], **params)
    if kind == "l2norm":
        return l2norm(inputs[0], **params)
    if kind == "softmax-log":
        return log_softmax(inputs[0])
    if kind == "affine":
        return affine(*inputs)
    if kind == "concat":
        return concat(inputs, **params)
    if kind == "slice":
        return slice_(inputs[0], params["key"])
    if kind == "reshape":
        return reshape(inputs[0], params["shape"])
    if kind == "broadcast":
        return broadcast_to(inputs[0], params["shape"])
    if kind == "clip":
        return clip(inputs[0], params["lo"], params["hi"])
    if kind == "batchnorm":
        out, _, _ = batchnorm_train(*inputs, eps=params.get("eps", 1e-5))
        return out
    raise TapeError(f"unknown op kind: {kind!r}")


# ---------------------------------------------------------------------------
# reverse pass

def _topo_order(output: Node) -> list:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order  # inputs before consumers


def grad(output: Node, wrt, create_graph: bool = False):
    """Adjoints of a scalar ``output`` with respect to each node in ``wrt``.

    With ``create_graph`` the returned adjoints are tape nodes, so a
    second call differentiates through the first (double backprop);
    otherwise plain tensors come back.  Nodes in ``wrt`` that the output
    does not depend on get zero adjoints.
    """
    single = isinstance(wrt, Node)
    wrt_list = [wrt] if single else list(wrt)
    if output.val.size != 1:
        raise TapeError(f"grad output must be scalar, got shape {output.shape}")
    for w in wrt_list:
        if not isinstance(w, Node):
            raise TapeError("wrt entries must be tape nodes")
        if w.tape is not output.tape:
            raise TapeError("wrt node is not on the output's tape")

    order = _topo_order(output)
    adj: dict[int, Node] = {id(output): output.tape.const(np.ones(output.shape))}
    for node in reversed(order):
        g = adj.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            prev = adj.get(id(parent))
            adj[id(parent)] = contrib if prev is None else add(prev, contrib)

    results = []
    for w in wrt_list:
        g = adj.get(id(w))
        if g is None:
            g = output.tape.const(np.zeros(w.shape))
        results.append(g if create_graph else g.value)
    return results[0] if single else results


# ---------------------------------------------------------------------------
# deterministic random streams

_MASK64 = (1 << 64) - 1
_GOLD = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class Rng:
    """Seedable splitmix64 counter stream.

    Self-contained so that identical seeds reproduce identical draws
    regardless of the numpy version or platform in use.
    """

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = int(seed) & _MASK64

    def _raw(self, n: int) -> np.ndarray:
        start = self._state
        self._state = (start + n * _GOLD) & _MASK64
        with np.errstate(over="ignore"):
            z = np.uint64(start) + np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GOLD)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        return z

    def uniform(self, shape=(), lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        out = lo + (hi - lo) * u
        return out.reshape(shape) if shape else out[0]

    def normal(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        # Box-Muller; u1 is kept strictly positive for the log.
        u1 = ((self._raw(m) >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)
        u2 = (self._raw(m) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * m, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        out = z[:n]
        return out.reshape(shape) if shape else out[0]

    def integers(self, lo: int, hi: int, shape=()) -> np.ndarray:
        """Integers in [lo, hi); modulo draw (bias negligible for small ranges)."""
        n = int(np.prod(shape)) if shape else 1
        span = np.uint64(hi - lo)
        vals = (self._raw(n) % span).astype(np.int64) + lo
        return vals.reshape(shape) if shape else int(vals[0])

    def unit_vectors(self, n: int, d: int) -> np.ndarray:
        """Rows uniform on the unit sphere via normalized Gaussian draws."""
        g = self.normal((n, d))
        norms = np.sqrt((g * g).sum(axis=1, keepdims=True))
        degenerate = norms[:, 0] < 1e-150
        if degenerate.any():
            g[degenerate] = 0.0
            g[degenerate, 0] = 1.0
            norms[degenerate] = 1.0
        return g / norms

    def spawn(self, key: int) -> "Rng":
        """Derive an independent deterministic stream for a worker."""
        mixed = Rng((self._state ^ (key * _MIX1)) & _MASK64)
        mixed._raw(2)
        return mixed
