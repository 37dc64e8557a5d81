"""Small reverse-mode autodiff engine over float64 numpy arrays.

Operations are recorded eagerly: calling an op computes its value and, when
any input requires a gradient, links a node holding the backward rule.
``backward`` walks that graph once in reverse topological order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

OP_KINDS = (
    "leaf", "add", "mul", "matmul", "conv2d", "relu", "softmax", "concat",
    "pool", "reshape", "log", "sum", "scale", "bias_add", "bce",
)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class GraphError(RuntimeError):
    """Raised on misuse of the backward pass."""


class Tensor:
    """Dense float64 array with optional gradient tracking.

    ``data`` is always a C-contiguous float64 ndarray.  ``grad`` is only ever
    allocated on tensors with ``requires_grad`` set, and only by ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed=None) -> None:
        backward(self, seed)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar, kept to the ops the engine defines
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], rule) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and linear algebra

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis; the only broadcast the engine allows."""
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError(f"bias_add: shape mismatch {x.shape} vs {b.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return _make(x.data + b.data, "bias_add", (x, b), lambda g: (g, g.sum(axis=axes)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.log(xd), "log", (x,), lambda g: (g / xd,))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, "softmax", (x,), rule)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the op name
    x = as_tensor(x)
    shape = x.shape
    return _make(np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _make(out, "reshape", (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat: no inputs")
    nd = xs[0].data.ndim
    ax = axis % nd
    for x in xs[1:]:
        if x.data.ndim != nd or x.shape[:ax] + x.shape[ax + 1:] != xs[0].shape[:ax] + xs[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shape mismatch {xs[0].shape} vs {x.shape} on axis {ax}")
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def rule(g):
        idx = [slice(None)] * nd
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return _make(np.concatenate([x.data for x in xs], axis=ax), "concat", xs, rule)


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, detached: a constant leaf that backward never crosses."""
    x = as_tensor(x)
    return Tensor(x.data.copy())


# ---------------------------------------------------------------------------
# convolution and pooling, NCHW layout

def _columns(xp: np.ndarray, kh: int, kw: int, s: int) -> np.ndarray:
    """Patch matrix of shape (c*kh*kw, n*ho*wo) from a padded NCHW array."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]  # n c ho wo kh kw
    c = xp.shape[1]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, -1)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if c % groups or o % groups or cg != c // groups:
        raise ShapeError(f"conv2d: shape mismatch input {x.shape} vs weight {w.shape} (groups={groups})")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: shape mismatch bias {b.shape} vs {o} output channels")
    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    hp, wp = h + 2 * p, wd + 2 * p
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {(hp, wp)}")
    og = o // groups
    need_cols = w.requires_grad
    cols, outs = [], []
    for gi in range(groups):
        col = _columns(xp[:, gi * cg:(gi + 1) * cg], kh, kw, s)
        outs.append(w.data[gi * og:(gi + 1) * og].reshape(og, -1) @ col)
        cols.append(col if need_cols else None)
    out = outs[0] if groups == 1 else np.concatenate(outs, axis=0)  # o, n*ho*wo
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    wdata = w.data

    def rule(g):
        gt = g.transpose(1, 0, 2, 3)  # o n ho wo
        dw = dx = None
        if w.requires_grad:
            g2 = gt.reshape(o, -1)
            dw = np.concatenate(
                [(g2[gi * og:(gi + 1) * og] @ cols[gi].T).reshape(og, cg, kh, kw) for gi in range(groups)],
                axis=0)
        if x.requires_grad:
            # input gradient = full correlation of the (dilated) output gradient with the flipped kernel
            hd, wdd = (ho - 1) * s + 1, (wo - 1) * s + 1
            gd = np.zeros((n, o, hp + kh - 1, wp + kw - 1))
            gd[:, :, kh - 1:kh - 1 + hd:s, kw - 1:kw - 1 + wdd:s] = g
            parts = []
            for gi in range(groups):
                colg = _columns(gd[:, gi * og:(gi + 1) * og], kh, kw, 1)
                wf = wdata[gi * og:(gi + 1) * og, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cg, -1)
                parts.append(wf @ colg)
            dxp = (parts[0] if groups == 1 else np.concatenate(parts, axis=0)).reshape(c, n, hp, wp)
            dx = np.ascontiguousarray(dxp[:, :, p:p + h, p:p + wd].transpose(1, 0, 2, 3))
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, "conv2d", parents, rule)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped.

    Tied maxima share the incoming gradient equally.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool: input {x.shape} smaller than window {size}")
    blocks = x.data[:, :, :ho * size, :wo * size].reshape(n, c, ho, size, wo, size)
    out = blocks.max(axis=(3, 5))

    def rule(g):
        mask = blocks == out[:, :, :, None, :, None]
        share = g / mask.sum(axis=(3, 5))
        dx = np.zeros_like(x.data)
        dx[:, :, :ho * size, :wo * size] = (mask * share[:, :, :, None, :, None]).reshape(n, c, ho * size, wo * size)
        return (dx,)

    return _make(out, "pool", (x,), rule)


def global_avg_pool(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"pool: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape

    def rule(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _make(x.data.mean(axis=(2, 3)), "pool", (x,), rule)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    out = x.data[:, :, :ho * size, :wo * size].reshape(n, c, ho, size, wo, size).mean(axis=(3, 5))

    def rule(g):
        dx = np.zeros_like(x.data)
        up = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
        dx[:, :, :ho * size, :wo * size] = up
        return (dx,)

    return _make(out, "pool", (x,), rule)


# ---------------------------------------------------------------------------
# loss

LOG_P_MIN = float(np.log(1e-12))
LOG_P_MAX = float(np.log1p(-1e-12))


def weighted_bce(p: Tensor, y, weights=(0.2, 1.0)) -> Tensor:
    """Class-weighted binary cross-entropy on probabilities, mean over samples.

    ``p`` holds the probability of class 1, clamped to [1e-12, 1 - 1e-12].
    Clamped entries get zero gradient.
    """
    p = as_tensor(p)
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    wv = np.where(y > 0.5, weights[1], weights[0])
    pc = np.clip(p.data, 1e-12, 1 - 1e-12)
    inside = (p.data >= 1e-12) & (p.data <= 1 - 1e-12)
    per = -wv * (y * np.log(pc) + (1 - y) * np.log1p(-pc))
    m = per.size

    def rule(g):
        dp = -wv * (y / pc - (1 - y) / (1 - pc)) * inside / m
        return (g * dp,)

    return _make(np.asarray(per.mean()), "bce", (p,), rule)


def weighted_bce_logits(logits: Tensor, y, weights=(0.2, 1.0)) -> Tensor:
    """Weighted BCE on p = softmax(logits)[:, 1], fused with log-sum-exp.

    Equal in value to ``weighted_bce(softmax(logits)[:, 1], y, weights)``
    within the clamp range, but stable for saturated logits.
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 2 or logits.shape[1] != 2:
        raise ShapeError(f"bce: expected (n, 2) logits, got {logits.shape}")
    z = logits.data
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != z.shape[0]:
        raise ShapeError(f"bce: shape mismatch {z.shape} vs labels {y.shape}")
    wv = np.where(y > 0.5, weights[1], weights[0])
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    logp = z - lse[:, None]  # log softmax
    target = np.where(y > 0.5, 1, 0)
    lp = logp[np.arange(len(y)), target]
    clamped = (lp < LOG_P_MIN) | (lp > LOG_P_MAX)
    lpc = np.clip(lp, LOG_P_MIN, LOG_P_MAX)
    per = -wv * lpc
    m = len(y)
    probs = np.exp(logp)

    def rule(g):
        onehot = np.zeros_like(z)
        onehot[np.arange(m), target] = 1.0
        d = (probs - onehot) * (wv * ~clamped / m)[:, None]
        return (g * d,)

    return _make(np.asarray(per.mean()), "bce", (logits,), rule)


def cross_entropy_logits(logits: Tensor, y) -> Tensor:
    """Unweighted multi-class cross-entropy, mean over samples."""
    logits = as_tensor(logits)
    z = logits.data
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if z.ndim != 2 or y.shape[0] != z.shape[0]:
        raise ShapeError(f"xent: shape mismatch {z.shape} vs labels {y.shape}")
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    probs = e / e.sum(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(e.sum(axis=1))
    m = len(y)
    per = lse - z[np.arange(m), y]

    def rule(g):
        d = probs.copy()
        d[np.arange(m), y] -= 1.0
        return (g * d / m,)

    return _make(np.asarray(per.mean()), "bce", (logits,), rule)


# ---------------------------------------------------------------------------
# backward

def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order[::-1]


def backward(root: Tensor, seed=None) -> None:
    """Accumulate d(root)/d(leaf), contracted with ``seed``, into every leaf's ``grad``.

    Leaf gradients add up across calls; zero them between optimizer steps.
    The graph is single use: a second call on the same root raises.
    """
    if root._consumed:
        raise GraphError("backward already ran on this graph; run the forward pass again")
    if not root.requires_grad:
        raise GraphError("backward called on a tensor with no recorded forward graph")
    seed = np.ones(root.shape) if seed is None else np.asarray(as_tensor(seed).data, dtype=np.float64)
    if seed.shape != root.shape:
        raise ShapeError(f"backward: seed shape {seed.shape} vs output shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): seed}
    for t in _topo(root):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            k = id(parent)
            grads[k] = pg if k not in grads else grads[k] + pg
    root._consumed = True


# ---------------------------------------------------------------------------
# FCT1 container

MAGIC = b"FCT1"


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray | Tensor]) -> None:
    """Write named float64 arrays to the FCT1 binary container."""
    buf = bytearray(MAGIC)
    buf += struct.pack("<Q", len(tensors))
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an FCT1 container")
    (count,) = struct.unpack_from("<Q", raw, 4)
    off = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", raw, off)
        off += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(dims)
        off += 8 * n
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes in FCT1 container")
    return out


def tensors_bytes(tensors: Iterable[tuple[str, np.ndarray]]) -> bytes:
    """Byte serialization used for bit-identity snapshots."""
    out = bytearray()
    for name, arr in tensors:
        out += name.encode() + b"\0" + np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return bytes(out)
