"""Reverse-mode automatic differentiation over float64 numpy arrays.

A small tape-based engine: every primitive applied while a recording scope is
active appends one node to the active graph.  Calling ``Graph.backward`` on a
scalar root walks the tape once in reverse and deposits ``.grad`` arrays on
every reachable leaf tensor.  Outside a recording scope the same primitives
compute values only, with no bookkeeping, so inference-style code pays nothing
for the existence of the tape.

Only the primitives needed by the diffusion engine are provided:

    matmul, add, sub, mul, scale, exp, log, sum, mean, max,
    softmax, reshape, slice, concat, transpose, area_resize

Everything else (sigmoid, rms-norm, attention, ...) is composed from these.
"""

from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

OP_KINDS = frozenset({
    "matmul", "add", "sub", "mul", "scale", "exp", "log", "sum", "mean",
    "max", "softmax", "reshape", "slice", "concat", "transpose",
    "area_resize",
})

_ids = itertools.count(1)
_scopes = threading.local()


def _graph_stack() -> list:
    stack = getattr(_scopes, "stack", None)
    if stack is None:
        stack = []
        _scopes.stack = stack
    return stack


def active_graph() -> "Graph | None":
    """The innermost recording graph on this thread, or None."""
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array with an optional link into a recorded graph.

    Attributes:
        data: the underlying ``np.ndarray`` (always float64).
        grad: populated by ``Graph.backward`` for reachable leaves.
        node: integer node id once the tensor has entered a graph, else None.
    """

    __slots__ = ("data", "grad", "node")

    def __init__(self, data, node: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, node={self.node})"

    # Operator sugar; everything routes through apply_primitive.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def softmax(self, axis=-1):
        return softmax(self, axis=axis)


class _Node:
    __slots__ = ("op", "out_id", "inputs")

    def __init__(self, op: str, out_id: int, inputs):
        self.op = op
        self.out_id = out_id
        # inputs: list of (input_node_id, vjp callable) pairs
        self.inputs = inputs


class Graph:
    """An ordered tape of recorded primitive applications.

    The tape is append-only and in execution order, so every node's inputs
    precede it; the backward sweep visits each node at most once.  A graph is
    confined to the thread that records it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()

    def __len__(self) -> int:
        return len(self.nodes)

    def _enter_id(self, t: Tensor) -> int:
        """Assign an id to a tensor entering this graph as an op input."""
        if t.node is None:
            t.node = next(_ids)
        if t.node not in self._produced:
            self._leaves.setdefault(t.node, t)
        return t.node

    def _record(self, op: str, inputs, out: Tensor) -> None:
        out.node = next(_ids)
        self._produced.add(out.node)
        self.nodes.append(_Node(op, out.node, inputs))

    def backward(self, root: Tensor, wrt: "list[Tensor] | None" = None) -> None:
        """Accumulate gradients of a scalar root along the recorded tape.

        Args:
            root: a tensor with exactly one element, produced on this graph.
            wrt: optional list of tensors; when given, gradient propagation is
                pruned to paths that can reach them (their grads are still
                exact, everything else is skipped for speed).

        Every leaf tensor reachable from the root receives ``.grad`` with the
        shape of its data.  Each tape node is visited at most once.
        """
        if root.node is None:
            raise ValueError("backward: root tensor was not recorded on a graph")
        if root.size != 1:
            raise ValueError(
                f"backward: root must be scalar, got shape {root.shape}")

        if root.node not in self._produced:
            raise ValueError("backward: root does not belong to this graph")

        keep: set[int] | None = None
        if wrt is not None:
            keep = set()
            for t in wrt:
                if t.node is not None:
                    keep.add(t.node)
            for node in self.nodes:  # forward closure: ops depending on wrt
                if any(i in keep for i, _ in node.inputs):
                    keep.add(node.out_id)

        grads: dict[int, np.ndarray] = {
            root.node: np.ones_like(root.data)
        }
        for node in reversed(self.nodes):
            g = grads.pop(node.out_id, None)
            if g is None:
                continue
            for in_id, vjp in node.inputs:
                if keep is not None and in_id not in keep:
                    continue
                contrib = vjp(g)
                acc = grads.get(in_id)
                if acc is None:
                    grads[in_id] = contrib
                else:
                    np.add(acc, contrib, out=acc)

        for node_id, tensor in self._leaves.items():
            if node_id in grads:
                tensor.grad = grads[node_id]


@contextlib.contextmanager
def record():
    """Context manager opening a fresh recording scope on this thread."""
    g = Graph()
    stack = _graph_stack()
    stack.append(g)
    try:
        yield g
    finally:
        stack.pop()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _finish(op: str, out_data: np.ndarray, vjps) -> Tensor:
    """Wrap a forward result, recording the op if a graph is active.

    ``vjps`` is a list of (input tensor, vjp callable) pairs; it is only
    consulted when recording is active, so callers should build the closures
    lazily where that matters.
    """
    out = Tensor(out_data)
    g = active_graph()
    if g is not None:
        inputs = [(g._enter_id(t), fn) for t, fn in vjps]
        g._record(op, inputs, out)
    return out


def apply_primitive(op: str, inputs, **attrs) -> Tensor:
    """Apply one primitive by name.  ``inputs`` is a list of tensors/arrays.

    This is the single dispatch point for the engine; the named helper
    functions below are thin wrappers over it.
    """
    if op not in OP_KINDS:
        raise ValueError(f"apply_primitive: unknown op kind {op!r}")
    fn = _DISPATCH[op]
    return fn(*inputs, **attrs)


# --- primitive implementations -------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting on leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(
            f"matmul: operands must have ndim >= 2, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(
            f"matmul: incompatible shapes {ad.shape} and {bd.shape}")

    if bd.ndim == 2 and ad.ndim > 2:
        # Collapse batch dims into one large GEMM.
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))

        def vjp_a(g, bd=bd, shape=ad.shape):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(shape)

        def vjp_b(g, a2=a2):
            g2 = g.reshape(-1, g.shape[-1])
            return a2.T @ g2

        return _finish("matmul", out, [(a, vjp_a), (b, vjp_b)])

    out = ad @ bd

    def vjp_a(g, ad=ad, bd=bd):
        return _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)

    def vjp_b(g, ad=ad, bd=bd):
        return _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)

    return _finish("matmul", out, [(a, vjp_a), (b, vjp_b)])


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def vjp_a(g, shape=a.data.shape):
        return _unbroadcast(g, shape)

    def vjp_b(g, shape=b.data.shape):
        return _unbroadcast(g, shape)

    return _finish("add", out, [(a, vjp_a), (b, vjp_b)])


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def vjp_a(g, shape=a.data.shape):
        return _unbroadcast(g, shape)

    def vjp_b(g, shape=b.data.shape):
        return -_unbroadcast(g, shape)

    return _finish("sub", out, [(a, vjp_a), (b, vjp_b)])


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def vjp_a(g, bd=b.data, shape=a.data.shape):
        return _unbroadcast(g * bd, shape)

    def vjp_b(g, ad=a.data, shape=b.data.shape):
        return _unbroadcast(g * ad, shape)

    return _finish("mul", out, [(a, vjp_a), (b, vjp_b)])


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar (not differentiated through)."""
    a = _as_tensor(a)
    c = float(c)
    out = a.data * c

    def vjp(g, c=c):
        return g * c

    return _finish("scale", out, [(a, vjp)])


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def vjp(g, out=out):
        return g * out

    return _finish("exp", out, [(a, vjp)])


def log(a) -> Tensor:
    a = _as_tensor(a)
    if not np.all(a.data > 0.0):
        raise ValueError("log: input must be strictly positive")
    out = np.log(a.data)

    def vjp(g, ad=a.data):
        return g / ad

    return _finish("log", out, [(a, vjp)])


def _norm_axes(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g: np.ndarray, shape, axes, keepdims: bool) -> np.ndarray:
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return g


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g, shape=a.data.shape, axes=axes, keepdims=keepdims):
        g = _expand_reduced(g, shape, axes, keepdims)
        return np.broadcast_to(g, shape).copy()

    return _finish("sum", np.asarray(out), [(a, vjp)])


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g, shape=a.data.shape, axes=axes, keepdims=keepdims, count=count):
        g = _expand_reduced(g, shape, axes, keepdims)
        return np.broadcast_to(g, shape) / count

    return _finish("mean", np.asarray(out), [(a, vjp)])


def max_(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; ties share the gradient equally."""
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    out = a.data.max(axis=axes, keepdims=keepdims)

    def vjp(g, ad=a.data, axes=axes, keepdims=keepdims):
        full = ad.max(axis=axes, keepdims=True)
        mask = (ad == full)
        counts = mask.sum(axis=axes, keepdims=True)
        g = _expand_reduced(g, ad.shape, axes, keepdims)
        return mask * (g / counts)

    return _finish("max", np.asarray(out), [(a, vjp)])


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis (rows sum to one)."""
    a = _as_tensor(a)
    ad = a.data
    row_max = ad.max(axis=axis, keepdims=True)
    # The shift only matters when exp could overflow or vanish entirely;
    # for comfortably bounded logits skip the extra full-array pass.
    if np.abs(row_max).max(initial=0.0) < 300.0:
        out = np.exp(ad)
        out /= out.sum(axis=axis, keepdims=True)
    else:
        out = ad - row_max
        np.exp(out, out=out)
        out /= out.sum(axis=axis, keepdims=True)

    def vjp(g, out=out, axis=axis):
        tmp = g * out
        inner = tmp.sum(axis=axis, keepdims=True)
        np.subtract(g, inner, out=tmp)
        tmp *= out
        return tmp

    return _finish("softmax", out, [(a, vjp)])


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g, shape=a.data.shape):
        return g.reshape(shape)

    return _finish("reshape", out, [(a, vjp)])


def slice_(a, key) -> Tensor:
    """Basic (non-fancy) indexing: ints and slices only."""
    a = _as_tensor(a)
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (int, np.integer, type(Ellipsis))) and not isinstance(k, slice):
            raise ValueError(f"slice: unsupported index component {k!r}")
    out = a.data[key]

    def vjp(g, shape=a.data.shape, key=key):
        full = np.zeros(shape, dtype=np.float64)
        full[key] = g
        return full

    return _finish("slice", np.ascontiguousarray(out), [(a, vjp)])


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    datas = [t.data for t in ts]
    nd = datas[0].ndim
    for d in datas[1:]:
        if d.ndim != nd:
            raise ValueError(
                f"concat: rank mismatch {datas[0].shape} vs {d.shape}")
    axis = axis % nd
    out = np.concatenate(datas, axis=axis)

    vjps = []
    offset = 0
    for t in ts:
        start, stop = offset, offset + t.data.shape[axis]
        offset = stop

        def vjp(g, start=start, stop=stop, axis=axis):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, stop)
            return np.ascontiguousarray(g[tuple(idx)])

        vjps.append((t, vjp))
    return _finish("concat", out, vjps)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def vjp(g, inv=inv):
        return np.ascontiguousarray(g.transpose(inv))

    return _finish("transpose", out, [(a, vjp)])


def area_resize(a, src_hw: tuple[int, int], dst_hw: tuple[int, int]) -> Tensor:
    """Resize axis 0 of a (H*W, ...) tensor between spatial grids.

    Downsampling (integer factor) averages blocks; upsampling (integer
    factor) replicates cells.  Both are linear maps with exact adjoints.
    """
    a = _as_tensor(a)
    H, W = src_hw
    h, w = dst_hw
    if a.data.shape[0] != H * W:
        raise ValueError(
            f"area_resize: axis 0 is {a.data.shape[0]}, expected {H}x{W}={H*W}")
    rest = a.data.shape[1:]

    if (H, W) == (h, w):
        out = a.data.copy()

        def vjp(g):
            return g

        return _finish("area_resize", out, [(a, vjp)])

    if H % h == 0 and W % w == 0:
        fh, fw = H // h, W // w
        grid = a.data.reshape((h, fh, w, fw) + rest)
        out = grid.mean(axis=(1, 3)).reshape((h * w,) + rest)

        def vjp(g, H=H, W=W, h=h, w=w, fh=fh, fw=fw, rest=rest):
            gg = g.reshape((h, 1, w, 1) + rest) / (fh * fw)
            gg = np.broadcast_to(gg, (h, fh, w, fw) + rest)
            return gg.reshape((H * W,) + rest)

        return _finish("area_resize", out, [(a, vjp)])

    if h % H == 0 and w % W == 0:
        fh, fw = h // H, w // W
        grid = a.data.reshape((H, 1, W, 1) + rest)
        out = np.broadcast_to(grid, (H, fh, W, fw) + rest).reshape(
            (h * w,) + rest).copy()

        def vjp(g, H=H, W=W, fh=fh, fw=fw, rest=rest):
            gg = g.reshape((H, fh, W, fw) + rest)
            return gg.sum(axis=(1, 3)).reshape((H * W,) + rest)

        return _finish("area_resize", out, [(a, vjp)])

    raise ValueError(
        f"area_resize: {src_hw} -> {dst_hw} is not an integer-factor resize")


_DISPATCH = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "exp": exp,
    "log": log,
    "sum": sum_,
    "mean": mean,
    "max": max_,
    "softmax": softmax,
    "reshape": reshape,
    "slice": slice_,
    "concat": concat,
    "transpose": transpose,
    "area_resize": area_resize,
}


def finite_difference_check(f, x: np.ndarray, h: float = 1e-5,
                            coords=None) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    Args:
        f: callable mapping a Tensor to a scalar Tensor, pure and
            deterministic.
        x: the input point (any shape), float64.
        h: central-difference step.
        coords: optional iterable of flat indices to probe; all by default.

    Returns:
        max over probed coordinates of
        ``|analytic - fd| / max(|analytic|, 1e-12)``.
    """
    x = np.asarray(x, dtype=np.float64)
    with record() as g:
        xt = Tensor(x.copy())
        y = f(xt)
        if y.size != 1:
            raise ValueError("finite_difference_check: f must return a scalar")
        g.backward(y, wrt=[xt])
    analytic = xt.grad
    if analytic is None:
        analytic = np.zeros_like(x)

    flat = x.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    worst = 0.0
    for idx in coords:
        bumped = flat.copy()
        bumped[idx] += h
        f_hi = float(f(Tensor(bumped.reshape(x.shape))).data)
        bumped[idx] -= 2 * h
        f_lo = float(f(Tensor(bumped.reshape(x.shape))).data)
        fd = (f_hi - f_lo) / (2 * h)
        a = analytic.reshape(-1)[idx]
        rel = abs(a - fd) / max(abs(a), 1e-12)
        worst = max(worst, rel)
    return worst
