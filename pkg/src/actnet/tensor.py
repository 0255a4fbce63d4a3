"""Dense tensors with a reverse-mode gradient tape.

Every differentiable primitive runs its forward pass in numpy and, when any
input requires a gradient, appends a record ``(output, inputs, backward_fn)``
to the thread's live tape. :func:`backward` replays that tape in reverse.
"""

from __future__ import annotations

import builtins
import contextlib
import math
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "default_dtype",
    "set_default_dtype",
    "precision",
    "set_debug",
    "current_tape",
    "new_tape",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "linear",
    "conv3d",
    "max_pool3d",
    "avg_pool3d",
    "global_avg_pool",
    "relu",
    "gelu",
    "layer_norm",
    "softmax",
    "log_softmax",
    "log",
    "exp",
    "reshape",
    "transpose",
    "concat",
    "getitem",
    "sum",
    "mean",
    "dropout",
    "l2_normalize",
    "attention",
    "cross_entropy",
]


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""

    def __init__(self, primitive: str, detail: str):
        super().__init__(f"{primitive}: {detail}")
        self.primitive = primitive


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# global state

_state = threading.local()
_dtype = np.float32
_debug = False


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def is_grad_enabled() -> bool:
    return _grad_enabled()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def default_dtype() -> type:
    return _dtype


def set_default_dtype(dtype) -> None:
    global _dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default floating dtype (e.g. to float64 for checks)."""
    prev = _dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_debug(flag: bool) -> None:
    """In debug mode every primitive rejects non-finite inputs."""
    global _debug
    _debug = bool(flag)


class Tape:
    """Ordered record of executed operations for one backward pass."""

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)

    def push(self, out: "Tensor", inputs: tuple["Tensor", ...], fn: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self.records.append((out, inputs, fn))


def current_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _state.tape = tape
    return tape


def new_tape() -> Tape:
    """Discard the live tape (without backward) and start a fresh one."""
    _state.tape = Tape()
    return _state.tape


# --------------------------------------------------------------------------
# Tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_leaf", "name")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype.type if arr.dtype.kind == "f" else _dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._leaf = True
        self.name = name

    # ---- basic properties
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        """Stop-gradient: same values, never on the tape."""
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # ---- operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype if dtype is not None else _dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _dtype
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{name}: non-finite input")


def _make(name: str, data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    """Wrap a forward result and register its backward closure if needed."""
    if _debug:
        _check_finite(name, *(t.data for t in inputs))
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        tape = current_tape()
        out._tape = tape
        tape.push(out, inputs, fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(name, f"cannot broadcast {a.shape} with {b.shape}") from None


# --------------------------------------------------------------------------
# backward


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``root``.

    Leaf gradients accumulate additively across calls; the tape is consumed.
    """
    if root.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
    tape = root._tape
    if tape is None:
        raise TapeError("root has no live tape (absent tape: computed without gradient tracking)")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for out, inputs, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._leaf:
                gi = np.asarray(gi, dtype=t.data.dtype)
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    tape.consumed = True
    tape.records.clear()
    if getattr(_state, "tape", None) is tape:
        _state.tape = Tape()


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    ``x`` is a tensor or a sequence of tensors passed positionally to ``f``.
    Error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    With ``max_coords`` set, a seeded random subset of coordinates is probed.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    leaves = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in xs]
    new_tape()
    y = f(*leaves)
    if not np.all(np.isfinite(y.data)):
        raise NonFiniteError("grad_check: f(x) is not finite")
    backward(y)
    analytic = [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves
    ]

    coords = [(i, j) for i, t in enumerate(leaves) for j in range(t.size)]
    if max_coords is not None and len(coords) > max_coords:
        pick = np.random.default_rng(seed).choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = leaves[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + step
            fp = float(f(*leaves).data)
            flat[j] = orig - step
            fm = float(f(*leaves).data)
            flat[j] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError("grad_check: f(x +/- step) is not finite")
            num = (fp - fm) / (2.0 * step)
            a = float(analytic[i].reshape(-1)[j])
            worst = max(worst, abs(a - num) / max(1.0, abs(num)))
    return worst


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor, approximate: bool = False) -> Tensor:
    """GELU: exact erf form, or the tanh form when ``approximate`` is set."""
    x = a.data
    if approximate:
        c = x.dtype.type(_SQRT_2_OVER_PI)
        k = x.dtype.type(0.044715)
        t = np.tanh(c * (x + k * x * x * x))
        out = 0.5 * x * (1 + t)

        def bw(g):
            dt = (1 - t * t) * c * (1 + 3 * k * x * x)
            return (g * (0.5 * (1 + t) + 0.5 * x * dt),)

        return _make("gelu", out.astype(x.dtype, copy=False), (a,), bw)

    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    out = (x * cdf).astype(x.dtype)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make("gelu", out, (a,), bw)


# --------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make("sum", np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    shape = a.shape
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape),)

    return _make("mean", np.asarray(out, dtype=a.dtype), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} into {shape}") from None
    src = a.shape
    return _make("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", f"axes {axes} invalid for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    # materialise: downstream reductions over the last axis are much faster on C-order data
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make("transpose", out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat", "no inputs")
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != axis and n != m for i, (n, m) in enumerate(zip(t.shape, ref))
        ):
            raise ShapeError("concat", f"shape {t.shape} incompatible with {ref} on axis {axis}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make("concat", out, tensors, bw)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic slicing and integer-array indexing."""
    if isinstance(idx, Tensor):
        idx = idx.data
    out = a.data[idx]
    shape, dtype = a.shape, a.dtype
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g  # basic indexing never repeats an element
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make("slice", np.array(out, copy=True), (a,), bw)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # fold batch dims into one big GEMM
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused ``x @ w + b`` for x of shape (..., D_in) and w of shape (D_in, D_out)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError("linear", f"input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError("linear", f"bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out += b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ wd.T) if x.requires_grad else None
        gw = (xd.reshape(-1, xd.shape[-1]).T @ g2) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (_col_sum(g2) if b.requires_grad else None)

    return _make("linear", out, (x, w) if b is None else (x, w, b), bw)


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


def _pad3(x: np.ndarray, pad, value=0.0) -> np.ndarray:
    if not any(pad):
        return x
    pt, ph, pw = pad
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)), constant_values=value)


def _out_len(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3-D convolution (cross-correlation), NCTHW input, OCkkk weights."""
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError("conv3d", f"expected 5-D input and weight, got {x.shape} and {w.shape}")
    B, C, T, H, W = x.shape
    O, Cw, kt, kh, kw = w.shape
    if C != Cw:
        raise ShapeError("conv3d", f"input channels {C} != weight channels {Cw}")
    To, Ho, Wo = (_out_len(n, k, s, p) for n, k, s, p in zip((T, H, W), (kt, kh, kw), stride, padding))
    if min(To, Ho, Wo) < 1:
        raise ShapeError("conv3d", f"kernel {(kt, kh, kw)} larger than padded input {(T, H, W)}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError("conv3d", f"bias shape {bias.shape} != ({O},)")
    st, sh, sw = stride
    xp = _pad3(x.data, padding)
    wd = w.data

    if (kt, kh, kw) == (1, 1, 1):
        cols = xp[:, :, ::st, ::sh, ::sw][:, :, :To, :Ho, :Wo]
        out = np.tensordot(wd[:, :, 0, 0, 0], cols, axes=([1], [1]))  # O,B,T,H,W
        out = out.transpose(1, 0, 2, 3, 4)
    else:
        win = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))
        cols = win[:, :, ::st, ::sh, ::sw][:, :, :To, :Ho, :Wo]  # B,C,To,Ho,Wo,kt,kh,kw
        out = np.tensordot(cols, wd, axes=([1, 5, 6, 7], [1, 2, 3, 4]))  # B,To,Ho,Wo,O
        out = out.transpose(0, 4, 1, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1, 1, 1)
    out = np.ascontiguousarray(out)
    pt, ph, pw = padding

    def bw(g):
        gw = gx = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        if w.requires_grad:
            if (kt, kh, kw) == (1, 1, 1):
                gw = np.tensordot(g, cols, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
                gw = gw.reshape(O, C, 1, 1, 1)
            else:
                gw = np.tensordot(g, cols, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            # g: B,O,To,Ho,Wo ; dcols: B,To,Ho,Wo,C,kt,kh,kw
            dcols = np.tensordot(g, wd, axes=([1], [0]))
            dcols = dcols.transpose(0, 4, 1, 2, 3, 5, 6, 7)  # B,C,To,Ho,Wo,kt,kh,kw
            for a in range(kt):
                for b in range(kh):
                    for c in range(kw):
                        gxp[
                            :,
                            :,
                            a : a + st * To : st,
                            b : b + sh * Ho : sh,
                            c : c + sw * Wo : sw,
                        ] += dcols[:, :, :, :, :, a, b, c]
            gx = gxp[:, :, pt : pt + T, ph : ph + H, pw : pw + W]
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make("conv3d", out, inputs, bw)


def max_pool3d(x: Tensor, kernel, stride=None, padding=0) -> Tensor:
    kernel = _triple(kernel)
    stride = kernel if stride is None else _triple(stride)
    padding = _triple(padding)
    if x.ndim != 5:
        raise ShapeError("max_pool3d", f"expected 5-D input, got {x.shape}")
    B, C, T, H, W = x.shape
    kt, kh, kw = kernel
    st, sh, sw = stride
    To, Ho, Wo = (_out_len(n, k, s, p) for n, k, s, p in zip((T, H, W), kernel, stride, padding))
    if min(To, Ho, Wo) < 1:
        raise ShapeError("max_pool3d", f"kernel {kernel} larger than input {(T, H, W)}")
    xp = _pad3(x.data, padding, value=-np.inf)
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw][:, :, :To, :Ho, :Wo]
    flat = win.reshape(B, C, To, Ho, Wo, -1)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    pt, ph, pw = padding

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        j = 0
        for a in range(kt):
            for b in range(kh):
                for c in range(kw):
                    gxp[:, :, a : a + st * To : st, b : b + sh * Ho : sh, c : c + sw * Wo : sw] += g * (arg == j)
                    j += 1
        return (gxp[:, :, pt : pt + T, ph : ph + H, pw : pw + W],)

    return _make("max_pool3d", np.ascontiguousarray(out), (x,), bw)


def avg_pool3d(x: Tensor, kernel, stride=None) -> Tensor:
    """Windowed average pooling without padding."""
    kernel = _triple(kernel)
    stride = kernel if stride is None else _triple(stride)
    if x.ndim != 5:
        raise ShapeError("avg_pool3d", f"expected 5-D input, got {x.shape}")
    B, C, T, H, W = x.shape
    kt, kh, kw = kernel
    st, sh, sw = stride
    To, Ho, Wo = (_out_len(n, k, s, 0) for n, k, s in zip((T, H, W), kernel, stride))
    if min(To, Ho, Wo) < 1:
        raise ShapeError("avg_pool3d", f"kernel {kernel} larger than input {(T, H, W)}")
    win = sliding_window_view(x.data, kernel, axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw][:, :, :To, :Ho, :Wo]
    k = kt * kh * kw
    out = win.mean(axis=(5, 6, 7)).astype(x.dtype)

    def bw(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        gk = g / k
        for a in range(kt):
            for b in range(kh):
                for c in range(kw):
                    gx[:, :, a : a + st * To : st, b : b + sh * Ho : sh, c : c + sw * Wo : sw] += gk
        return (gx,)

    return _make("avg_pool3d", out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over every axis after the channel axis: (B, C, ...) -> (B, C)."""
    if x.ndim < 3:
        raise ShapeError("global_avg_pool", f"expected rank >= 3, got {x.shape}")
    return mean(x, axis=tuple(range(2, x.ndim)))


# --------------------------------------------------------------------------
# normalisation / probabilities


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    D = x.shape[-1]
    if gain.shape != (D,) or bias.shape != (D,):
        raise ShapeError("layer_norm", f"gain/bias {gain.shape}/{bias.shape} do not match last dim {D}")
    xd = x.data
    mu = _last_mean(xd)
    xc = xd - mu
    var = _last_mean(xc * xc)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data
    gd = gain.data

    def bw(g):
        gg = _col_sum(g * xhat) if gain.requires_grad else None
        gbias = _col_sum(g) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - _last_mean(gh) - xhat * _last_mean(gh * xhat))
        return gx, gg, gbias

    return _make("layer_norm", out.astype(xd.dtype, copy=False), (x, gain, bias), bw)


def _last_sum(x: np.ndarray) -> np.ndarray:
    """Sum over the last axis, keepdims. A GEMV is several times faster than
    numpy's reduction when that axis is short."""
    return np.matmul(x, np.ones((x.shape[-1], 1), dtype=x.dtype))


def _col_sum(x: np.ndarray) -> np.ndarray:
    """Sum over every axis but the last (GEMV against ones)."""
    x2 = x.reshape(-1, x.shape[-1])
    return np.ones(x2.shape[0], dtype=x.dtype) @ x2


def _last_mean(x: np.ndarray) -> np.ndarray:
    return _last_sum(x) * x.dtype.type(1.0 / x.shape[-1])


def _last_max(x: np.ndarray) -> np.ndarray:
    """Max over the last axis, keepdims (reduced over a transposed copy, which is faster)."""
    return np.ascontiguousarray(np.moveaxis(x, -1, 0)).max(axis=0)[..., None]


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - _last_max(z))
    return e / _last_sum(e)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    out = _softmax_np(x.data)

    def bw(g):
        return (out * (g - _last_sum(g * out)),)

    return _make("softmax", out, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (x,), bw)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit length; zero vectors are an error."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("l2_normalize: zero-norm vector")
    y = xd / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make("l2_normalize", y, (x,), bw)


def dropout(x: Tensor, p: float, rng, train: bool = True) -> Tensor:
    """Inverted dropout: kept activations are scaled by 1 / (1 - p).

    ``rng`` is a Generator, or a list of ``(Generator, rows)`` pairs that
    draw the mask for consecutive row blocks of ``x`` independently.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    if isinstance(rng, np.random.Generator):
        u = rng.random(x.shape)
    else:
        if builtins.sum(n for _, n in rng) != x.shape[0]:
            raise ShapeError("dropout", f"rng segments {[n for _, n in rng]} do not cover {x.shape[0]} rows")
        u = np.concatenate([g.random((n, *x.shape[1:])) for g, n in rng])
    keep = (u >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _make("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# --------------------------------------------------------------------------
# composites


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over the second-to-last axis."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention", f"q {q.shape}, k {k.shape}, v {v.shape} incompatible")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = mul(matmul(q, transpose(k, _swap_last(k.ndim))), scale)
    return matmul(softmax(scores), v)


def multi_head_attention(qkv: Tensor, heads: int) -> Tensor:
    """Fused multi-head self-attention core over axis -2.

    ``qkv`` is (..., L, 3*D) laid out as [q | k | v], each split into
    ``heads`` contiguous chunks of D/heads. Returns the concatenated head
    outputs, (..., L, D). Equivalent to splitting, calling ``attention`` per
    head and merging, with one tape record instead of a dozen.
    """
    *lead, L, D3 = qkv.shape
    if D3 % (3 * heads):
        raise ShapeError("multi_head_attention", f"last dim {D3} not divisible by 3*heads={3 * heads}")
    D = D3 // 3
    dh = D // heads
    n = len(lead)
    x = qkv.data.reshape(*lead, L, 3, heads, dh)
    # (3, ..., H, L, dh)
    x = np.ascontiguousarray(np.moveaxis(x, (n + 1, n + 2), (0, n + 1)))
    q, k, v = x[0], x[1], x[2]
    scale = q.dtype.type(1.0 / math.sqrt(dh))
    p = _softmax_np(np.matmul(q, np.swapaxes(k, -1, -2)) * scale)
    o = np.matmul(p, v)  # ..., H, L, dh
    out = np.ascontiguousarray(np.moveaxis(o, n, n + 1)).reshape(*lead, L, D)

    def bw(g):
        go = np.ascontiguousarray(np.moveaxis(g.reshape(*lead, L, heads, dh), n + 1, n))
        dp = np.matmul(go, np.swapaxes(v, -1, -2))
        dv = np.matmul(np.swapaxes(p, -1, -2), go)
        ds = p * (dp - _last_sum(dp * p)) * scale
        dq = np.matmul(ds, k)
        dk = np.matmul(np.swapaxes(ds, -1, -2), q)
        d = np.stack([dq, dk, dv])  # 3, ..., H, L, dh
        d = np.moveaxis(d, (0, n + 1), (n + 1, n + 2))  # ..., L, 3, H, dh
        return (np.ascontiguousarray(d).reshape(*lead, L, D3),)

    return _make("multi_head_attention", out, (qkv,), bw)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample ``-log softmax(logits)[label]`` for (B, K) logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", f"logits {logits.shape} vs labels {labels.shape}")
    K = logits.shape[1]
    if K < 2:
        raise ShapeError("cross_entropy", f"need at least 2 classes, got {K}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"cross_entropy: label out of range [0, {K})")
    logp = log_softmax(logits)
    return neg(getitem(logp, (np.arange(len(labels)), labels)))
