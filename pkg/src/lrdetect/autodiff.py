"""Dense float32 tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy float32 array. Operations executed while a Tape is
active are recorded as nodes; calling backward() on a scalar result walks
the tape once in reverse order and accumulates vector-Jacobian products.
Tensors created outside a tape (or via detach()) are plain constants.

Conventions fixed for determinism: relu'(0) = 0, sign(0) = 0, max-pool ties
resolve to the first (row-major) element. Elementwise ops require equal
shapes or a python/0-d scalar operand; there is no general broadcasting.
"""

from __future__ import annotations

import threading

import numpy as np

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape():
    """Return the innermost active Tape for this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense n-dimensional float32 array, optionally linked to a tape node."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, _tape=None, _node=None):
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.tape = _tape
        self.node = _node

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, no tape linkage."""
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # Operator sugar. Right-hand scalars are allowed; Tensor-Tensor ops
    # require equal shapes (checked in the op functions).
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const_like(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _const_like(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Tape:
    """Append-only record of operations for one backward pass.

    Node ids are append-ordered, so parents always precede children and a
    reverse id sweep is a reverse topological order. Use as a context
    manager; tapes are single-threaded.
    """

    def __init__(self):
        # each node: (kind, parent ids, vjp) where vjp(grad_out) returns
        # one gradient array per parent; leaves have vjp=None
        self._nodes = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, kind, parents, vjp) -> int:
        self._nodes.append((kind, tuple(parents), vjp))
        return len(self._nodes) - 1

    def watch(self, tensor: Tensor) -> Tensor:
        """Register a leaf so backward() reports its gradient."""
        if tensor.tape is self and tensor.node is not None:
            return tensor
        tensor.tape = self
        # leaves carry their shape in the vjp slot so backward can emit
        # zero gradients for leaves the root does not reach
        tensor.node = self._record("leaf", (), tensor.data.shape)
        return tensor

    def leaf_ids(self):
        return [i for i, (kind, _, _) in enumerate(self._nodes) if kind == "leaf"]


def _link(out: Tensor, kind, inputs, vjp_builder):
    """Record `out` on the active tape if any input is linked to it.

    vjp_builder(positions) -> vjp taking grad_out and returning one array
    per linked parent, where positions lists which inputs are linked.
    """
    tape = active_tape()
    if tape is None:
        return out
    parents = []
    positions = []
    for i, t in enumerate(inputs):
        if isinstance(t, Tensor) and t.tape is tape and t.node is not None:
            parents.append(t.node)
            positions.append(i)
    if not parents:
        return out
    out.tape = tape
    out.node = tape._record(kind, parents, vjp_builder(tuple(positions)))
    return out


def backward(tape: Tape, root: Tensor) -> dict:
    """Run reverse-mode accumulation from a scalar root.

    Returns {leaf node id: gradient array}. Leaves not reachable from the
    root get zero gradients. Every tape node is visited at most once, in
    reverse topological (descending id) order.
    """
    if root.tape is not tape or root.node is None:
        raise ValueError("backward root is not recorded on this tape")
    if root.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    grads = {root.node: np.ones_like(root.data)}
    leaf_grads = {}
    for node_id in range(root.node, -1, -1):
        g = grads.pop(node_id, None)
        if g is None:
            continue
        kind, parents, vjp = tape._nodes[node_id]
        if kind == "leaf":
            leaf_grads[node_id] = g
            continue
        parent_grads = vjp(g)
        for pid, pg in zip(parents, parent_grads):
            acc = grads.get(pid)
            grads[pid] = pg if acc is None else acc + pg
    for leaf_id in tape.leaf_ids():
        if leaf_id not in leaf_grads:
            shape = tape._nodes[leaf_id][2]
            leaf_grads[leaf_id] = np.zeros(shape, dtype=np.float32)
    return leaf_grads


def gradients(tape: Tape, root: Tensor, leaves) -> list:
    """Gradients of `root` with respect to each watched leaf tensor."""
    leaf_grads = backward(tape, root)
    out = []
    for t in leaves:
        if t.tape is not tape or t.node is None:
            raise ValueError("gradient requested for a tensor not watched on this tape")
        out.append(leaf_grads[t.node])
    return out


def _check_elementwise(a: np.ndarray, b: np.ndarray, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) or (
        isinstance(x, np.ndarray) and x.ndim == 0
    )


def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        out = Tensor(a.data + np.float32(b))
        return _link(out, "add", (a,), lambda pos: lambda g: (g,))
    _check_elementwise(a.data, b.data, "add")
    out = Tensor(a.data + b.data)

    def build(pos):
        return lambda g: tuple(g for _ in pos)

    return _link(out, "add", (a, b), build)


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        out = Tensor(a.data - np.float32(b))
        return _link(out, "sub", (a,), lambda pos: lambda g: (g,))
    _check_elementwise(a.data, b.data, "sub")
    out = Tensor(a.data - b.data)

    def build(pos):
        signs = {0: 1.0, 1: -1.0}
        return lambda g: tuple(g if signs[p] > 0 else -g for p in pos)

    return _link(out, "sub", (a, b), build)


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        s = np.float32(b)
        out = Tensor(a.data * s)
        return _link(out, "smul", (a,), lambda pos: lambda g: (g * s,))
    _check_elementwise(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)

    def build(pos):
        others = {0: bd, 1: ad}
        return lambda g: tuple(g * others[p] for p in pos)

    return _link(out, "mul", (a, b), build)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {ad.shape} vs {bd.shape}")
    out = Tensor(ad @ bd)

    def build(pos):
        def vjp(g):
            grads = {0: lambda: g @ bd.T, 1: lambda: ad.T @ g}
            return tuple(grads[p]() for p in pos)

        return vjp

    return _link(out, "matmul", (a, b), build)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis of x. Explicit, not broadcasting."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ValueError(f"bias_add: shape mismatch {x.shape} vs {b.shape}")
    out = Tensor(x.data + b.data)

    def build(pos):
        axes = tuple(range(x.ndim - 1))

        def vjp(g):
            grads = {0: lambda: g, 1: lambda: g.sum(axis=axes)}
            return tuple(grads[p]() for p in pos)

        return vjp

    return _link(out, "bias_add", (x, b), build)


def scale_columns(x: Tensor, s: Tensor) -> Tensor:
    """Multiply by a vector along the last axis of x. Explicit, not broadcasting."""
    if s.ndim != 1 or x.shape[-1] != s.shape[0]:
        raise ValueError(f"scale_columns: shape mismatch {x.shape} vs {s.shape}")
    out = Tensor(x.data * s.data)

    def build(pos):
        axes = tuple(range(x.ndim - 1))

        def vjp(g):
            grads = {0: lambda: g * s.data, 1: lambda: (g * x.data).sum(axis=axes)}
            return tuple(grads[p]() for p in pos)

        return vjp

    return _link(out, "scale_columns", (x, s), build)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, np.float32(0.0)))
    return _link(out, "relu", (x,), lambda pos: lambda g: (g * mask,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    out = Tensor(np.log(xd))
    return _link(out, "log", (x,), lambda pos: lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    od = np.exp(x.data)
    out = Tensor(od)
    return _link(out, "exp", (x,), lambda pos: lambda g: (g * od,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def build(pos):
        # ds_i/dx_j = s_i (delta_ij - s_j); vjp is s * (g - sum(g*s))
        def vjp(g):
            dot = (g * s).sum(axis=axis, keepdims=True)
            return (s * (g - dot),)

        return vjp

    return _link(out, "softmax", (x,), build)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    xd = x.data
    out = Tensor(xd.sum(axis=axis))

    def build(pos):
        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, xd.shape).astype(np.float32),)
            ge = np.expand_dims(g, axis)
            return (np.broadcast_to(ge, xd.shape).astype(np.float32),)

        return vjp

    return _link(out, "sum", (x,), build)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    xd = x.data
    count = xd.size if axis is None else xd.shape[axis]
    out = Tensor(xd.mean(axis=axis))
    inv = np.float32(1.0 / count)

    def build(pos):
        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g * inv, xd.shape).astype(np.float32),)
            ge = np.expand_dims(g * inv, axis)
            return (np.broadcast_to(ge, xd.shape).astype(np.float32),)

        return vjp

    return _link(out, "mean", (x,), build)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    out = Tensor(x.data.reshape(shape))
    return _link(out, "reshape", (x,), lambda pos: lambda g: (g.reshape(old),))


def flatten(x: Tensor, start_axis: int = 1) -> Tensor:
    """Collapse axes from start_axis onward into one."""
    lead = x.data.shape[:start_axis]
    return reshape(x, lead + (-1,))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis))
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum(sizes)[:-1]

    def build(pos):
        def vjp(g):
            pieces = np.split(g, offsets, axis=axis)
            return tuple(pieces[p] for p in pos)

        return vjp

    return _link(out, "concat", tuple(tensors), build)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    xd = x.data
    ax = axis % xd.ndim
    if start < 0 or length <= 0 or start + length > xd.shape[ax]:
        raise ValueError(
            f"narrow: slice [{start}, {start + length}) out of range for "
            f"axis {ax} of shape {xd.shape}"
        )
    index = tuple(
        slice(start, start + length) if i == ax else slice(None) for i in range(xd.ndim)
    )
    out = Tensor(xd[index])

    def build(pos):
        def vjp(g):
            full = np.zeros_like(xd)
            full[index] = g
            return (full,)

        return vjp

    return _link(out, "narrow", (x,), build)


def _pad2d(x: np.ndarray, ph0: int, ph1: int, pw0: int, pw1: int) -> np.ndarray:
    if ph0 == ph1 == pw0 == pw1 == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: str = "valid") -> Tensor:
    """2-D convolution, stride 1. x: (N,C,H,W), w: (O,C,kh,kw), b: (O,)."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[1]:
        raise ValueError(f"conv2d: incompatible shapes {xd.shape} vs {wd.shape}")
    n, c, h, wid = xd.shape
    o, _, kh, kw = wd.shape
    if padding == "same":
        ph0, ph1 = (kh - 1) // 2, kh // 2
        pw0, pw1 = (kw - 1) // 2, kw // 2
    elif padding == "valid":
        ph0 = ph1 = pw0 = pw1 = 0
        if kh > h or kw > wid:
            raise ValueError(f"conv2d: kernel {wd.shape} larger than input {xd.shape}")
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    xp = _pad2d(xd, ph0, ph1, pw0, pw1)
    hp, wp = xp.shape[2], xp.shape[3]
    oh, ow = hp - kh + 1, wp - kw + 1

    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + oh, j : j + ow]
    cols2 = cols.reshape(n, c * kh * kw, oh * ow)
    w2 = wd.reshape(o, c * kh * kw)
    out_d = np.matmul(w2[None, :, :], cols2).reshape(n, o, oh, ow)
    if b is not None:
        if b.data.shape != (o,):
            raise ValueError(f"conv2d: bias shape {b.data.shape} vs {o} filters")
        out_d = out_d + b.data[None, :, None, None]
    out = Tensor(out_d)

    inputs = (x, w) if b is None else (x, w, b)

    def build(pos):
        def vjp(g):
            g2 = g.reshape(n, o, oh * ow)
            grads = {}
            if 0 in pos:
                dcols = np.matmul(w2.T[None, :, :], g2).reshape(n, c, kh, kw, oh, ow)
                dxp = np.zeros((n, c, hp, wp), dtype=np.float32)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + oh, j : j + ow] += dcols[:, :, i, j]
                grads[0] = dxp[:, :, ph0 : hp - ph1, pw0 : wp - pw1]
            if 1 in pos:
                dw2 = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0)
                grads[1] = dw2.reshape(o, c, kh, kw)
            if 2 in pos:
                grads[2] = g.sum(axis=(0, 2, 3))
            return tuple(grads[p] for p in pos)

        return vjp

    return _link(out, "conv2d", inputs, build)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/cols are dropped."""
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"maxpool2: expected (N,C,H,W), got {xd.shape}")
    n, c, h, w = xd.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ValueError(f"maxpool2: input {xd.shape} smaller than 2x2 window")
    win = (
        xd[:, :, : 2 * h2, : 2 * w2]
        .reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    arg = win.argmax(axis=-1)
    out = Tensor(np.take_along_axis(win, arg[..., None], axis=-1)[..., 0])

    def build(pos):
        def vjp(g):
            dwin = np.zeros((n, c, h2, w2, 4), dtype=np.float32)
            np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
            dx = np.zeros_like(xd)
            dx[:, :, : 2 * h2, : 2 * w2] = (
                dwin.reshape(n, c, h2, w2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, 2 * h2, 2 * w2)
            )
            return (dx,)

        return vjp

    return _link(out, "maxpool2", (x,), build)


def sign(x: Tensor) -> np.ndarray:
    """Entrywise -1/0/+1 with sign(0) = 0. Constant: never on the tape."""
    return np.sign(x.data) if isinstance(x, Tensor) else np.sign(np.asarray(x, np.float32))
