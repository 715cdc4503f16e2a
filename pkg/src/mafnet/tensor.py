"""Minimal reverse-mode tensor engine.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient (and recording is not disabled with :func:`no_grad`), the output keeps
a reference to its inputs, a backward rule and a global sequence number. The
sequence numbers give the execution order, so the tape for a loss is simply the
set of reachable nodes sorted by sequence number.

Arrays are numpy ``float32`` (training) or ``float64`` (gradient checking);
``longdouble`` is accepted for extended-precision reference evaluations.
There is no implicit broadcasting apart from Python scalars.
"""

from __future__ import annotations

import builtins
import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "NumericError",
    "ContractError",
    "Tensor",
    "Tape",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "is_recording",
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "sum",
    "matmul",
    "softmax",
    "conv2d",
    "maxpool2d",
    "upsample_bilinear",
    "reshape",
    "transpose",
    "concat",
    "slice",
    "backward",
    "grad_check",
    "GradCheckReport",
    "kink_monitor",
]


_FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64), np.dtype(np.longdouble))


class DimensionError(ValueError):
    """Operand shapes are incompatible with the operation."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ContractError(ValueError):
    """An operation was called outside its contract."""


_SEQ = itertools.count()
_RECORDING = True
_KINK_LOG: list | None = None


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


def is_recording() -> bool:
    return _RECORDING


@contextlib.contextmanager
def kink_monitor():
    """Collect relu masks and maxpool argmax indices of every op run inside.

    Used by :func:`grad_check` to detect perturbations that cross a kink.
    """
    global _KINK_LOG
    prev = _KINK_LOG
    log: list = []
    _KINK_LOG = log
    try:
        yield log
    finally:
        _KINK_LOG = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "_seq")

    # numpy must defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        if any(s < 1 for s in arr.shape):
            raise DimensionError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def astype(self, dtype) -> Tensor:
        """Leaf copy in another precision; keeps ``requires_grad`` and name."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

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

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice(self, index)


def _bad_item(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, dtype=np.float32, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad, name=name)


def zeros(shape, dtype=np.float32, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad, name=name)


def ones(shape, dtype=np.float32, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _RECORDING and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._seq = next(_SEQ)
    return out


# ---------------------------------------------------------------- elementwise


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _check_same(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = _as_tensor(a)
        return _make(a.data + a.data.dtype.type(b), (a,), lambda g: (g,))
    if _is_scalar(a):
        return add(b, a)
    _check_same("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -b)
    if _is_scalar(a):
        return add(neg(b), a)
    _check_same("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        a = _as_tensor(a)
        c = a.data.dtype.type(b)
        return _make(a.data * c, (a,), lambda g: (g * c,))
    if _is_scalar(a):
        return mul(b, a)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _KINK_LOG is not None:
        _KINK_LOG.append(mask)
    return _make(np.where(mask, x.data, x.data.dtype.type(0)), (x,), lambda g: (g * mask,))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)
    if out.ndim == 0:
        out = out.reshape(1)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), shape).astype(g.dtype),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, shape).copy(),)

    return _make(out, (x,), back)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading axes, if any, must be identical on both operands (batched product).
    ``b`` may also be a plain 2-D matrix shared across the batch of ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            k = ad.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for rank {x.ndim}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains non-finite values")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), back)


# ---------------------------------------------------------------- spatial ops


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding, NCHW layout."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects x[N,C,H,W] and w[O,C,kh,kw], got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({co},)")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ContractError("conv2d: stride, dilation >= 1 and padding >= 0 required")
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: output extent {ho}x{wo} < 1 for input {h}x{wd}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # cols[c, i, j, n, y, x]: tap (i, j) of channel c for output pixel (y, x)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            win = xp[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride]
            cols[:, i, j] = win.transpose(1, 0, 2, 3)
    cols2 = cols.reshape(c * kh * kw, n * ho * wo)
    w2 = w.data.reshape(co, -1)
    out = (w2 @ cols2).reshape(co, n, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def back(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(co, -1)
        gw = (g2 @ cols2.T).reshape(w.shape)
        dcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kh):
            r0 = i * dilation
            for j in range(kw):
                c0 = j * dilation
                gxp[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride] += \
                    dcols[:, i, j].transpose(1, 0, 2, 3)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, back)


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """k×k max pooling with stride k; ties go to the first element in row-major window order."""
    if k != stride:
        raise ContractError("maxpool2d supports only non-overlapping windows (k == stride)")
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"maxpool2d: extents {h}x{w} not divisible by {k}")
    win = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    idx = win.argmax(axis=-1)[..., None]
    if _KINK_LOG is not None:
        _KINK_LOG.append(idx)
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def back(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make(out, (x,), back)


def interp_matrix(src: int, dst: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights [dst, src] with half-pixel centres.

    Destination pixel i samples source coordinate (i + 0.5) * src / dst - 0.5,
    clamped to [0, src - 1].
    """
    m = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for i in range(dst):
        s = min(max((i + 0.5) * scale - 0.5, 0.0), src - 1.0)
        i0 = int(math.floor(s))
        i1 = min(i0 + 1, src - 1)
        frac = s - i0
        if i1 == i0 or frac == 0.0:
            m[i, i0] = 1.0
        else:
            m[i, i0] = 1.0 - frac
            m[i, i1] = frac
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, height: int, width: int) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"upsample_bilinear expects [N,C,h,w], got {x.shape}")
    h, w = x.shape[2:]
    if height < h or width < w:
        raise DimensionError(f"upsample_bilinear: target {height}x{width} smaller than source {h}x{w}")
    ah = interp_matrix(h, height, x.dtype)
    aw = interp_matrix(w, width, x.dtype)
    out = (ah @ x.data) @ aw.T

    def back(g):
        return ((ah.T @ g) @ aw,)

    return _make(out, (x,), back)


# ---------------------------------------------------------------- layout ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if -1 in shape:
        known = math.prod(s for s in shape if s != -1)
        if known == 0 or x.size % known:
            raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
        shape = tuple(x.size // known if s == -1 else s for s in shape)
    if math.prod(shape) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ContractError("concat needs at least one operand")
    rank = xs[0].ndim
    axis = axis % rank
    for t in xs[1:]:
        if t.ndim != rank or any(t.shape[d] != xs[0].shape[d] for d in range(rank) if d != axis):
            raise DimensionError(f"concat: extents disagree off axis {axis}: {[t.shape for t in xs]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return _make(np.concatenate([t.data for t in xs], axis=axis), xs, back)


def slice(x: Tensor, index) -> Tensor:  # noqa: A001
    """Basic (non-fancy) indexing; integer indices drop the axis."""
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not isinstance(ix, (int, np.integer, type(Ellipsis), builtins.slice)):
            raise ContractError(f"slice supports ints and slices only, got {ix!r}")
    out = x.data[index]
    if out.size == 0:
        raise DimensionError(f"slice {index} of {x.shape} is empty")
    out = np.array(out, copy=True)
    if out.ndim == 0:
        out = out.reshape(1)
    src_shape = x.shape
    view_shape = x.data[index].shape

    def back(g):
        gx = np.zeros(src_shape, dtype=g.dtype)
        gx[index] = g.reshape(view_shape)
        return (gx,)

    return _make(out, (x,), back)



# ---------------------------------------------------------------- reverse mode


@dataclass
class Tape:
    """Ordered record of the operations that produced a tensor."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> Tape:
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, params: Iterable[Tensor] | None = None,
             tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss``.

    Returns a mapping from leaf tensor to gradient array. With ``params`` given,
    exactly those tensors are keys and untouched ones get zeros; otherwise every
    reachable leaf with ``requires_grad`` is returned.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._backward is None:
                leaves[id(p)] = p
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=p.dtype).reshape(p.shape)
    if loss._backward is None and loss.requires_grad:
        leaves[id(loss)] = loss
    if params is None:
        return {t: grads[id(t)] for t in leaves.values()}
    return {p: grads.get(id(p), np.zeros(p.shape, dtype=p.dtype)) for p in params}


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    skipped: int
    worst: str = ""
    worst_analytic: float = 0.0
    worst_numeric: float = 0.0
    failed: int = 0
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_error={self.max_rel_error:.3e} tol={self.tol:.0e} "
                f"checked={self.checked} failed={self.failed} skipped={self.skipped} worst={self.worst} "
                f"(analytic {self.worst_analytic:.6g}, numeric {self.worst_numeric:.6g})")


def _kink_signature(f) -> tuple[float, list]:
    with kink_monitor() as log:
        val = f()
    return float(val.data.reshape(-1)[0]), log


def _same_kinks(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               tol: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``f`` re-evaluates the scalar objective from the current contents of
    ``params`` (float64 expected). Coordinates whose ±eps perturbation flips a
    relu mask or a maxpool argmax anywhere are skipped. ``max_coords`` limits
    the number of randomly chosen coordinates checked per parameter.
    """
    params = list(params)
    analytic = backward(f(), params)
    rng = rng if rng is not None else np.random.default_rng(0)
    _, base_kinks = _kink_signature(f)
    worst, worst_name, worst_pair = 0.0, "", (0.0, 0.0)
    checked = skipped = failed = 0
    failures: list = []
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        ga = analytic[p].reshape(-1)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + eps
            fp, kp = _kink_signature(f)
            flat[k] = orig - eps
            fm, km = _kink_signature(f)
            flat[k] = orig
            if not (_same_kinks(kp, base_kinks) and _same_kinks(km, base_kinks)):
                skipped += 1
                continue
            gfd = (fp - fm) / (2 * eps)
            gad = float(ga[k])
            err = abs(gad - gfd) / max(abs(gad), abs(gfd), 1e-8)
            checked += 1
            if not err < tol:
                failed += 1
                failures.append((f"{p.name or f'param{pi}'}[{int(k)}]", gad, gfd))
            if err > worst or not math.isfinite(err):
                worst = err
                worst_name = f"{p.name or f'param{pi}'}[{int(k)}]"
                worst_pair = (gad, gfd)
    return GradCheckReport(worst, tol, checked, skipped, worst_name, *worst_pair, failed, failures)
