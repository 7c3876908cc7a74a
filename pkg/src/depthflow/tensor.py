"""Dense float tensors with reverse-mode automatic differentiation.

Just enough machinery to train a tiny UNet on a CPU: a `Tensor` wrapping a
row-major numpy buffer, a `Tape` that records forward operations in creation
order (which is already a topological order), and `backward` walking the tape
once in reverse. Operations are float32 by default; `using_dtype("float64")`
switches new tensors to float64 for sharper finite-difference checks.

Supported ops: conv2d (3x3, stride 1, "same"), linear, add, mul, silu,
concat_channels, avgpool2, upsample_nearest2, mse. Broadcasting is limited to
bias-add and per-channel scale; every other shape must match exactly.
"""

from __future__ import annotations

import contextlib
import ctypes
import ctypes.util
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .exceptions import DetachedGraph, NonFiniteValue, NotScalarLoss, ShapeMismatch


def _tune_malloc() -> None:
    """Keep large allocations on the heap instead of per-call mmap.

    Training churns through multi-megabyte conv buffers every step; with
    glibc's default thresholds each one costs an mmap/munmap round trip and
    fresh page faults. Raising the thresholds roughly halves the step time.
    Best effort: silently skipped on non-glibc platforms.
    """
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6",
                           use_errno=True)
        m_trim_threshold, m_mmap_threshold = -1, -3
        libc.mallopt(m_mmap_threshold, 1 << 30)
        libc.mallopt(m_trim_threshold, 1 << 30)
    except (OSError, AttributeError):
        pass


_tune_malloc()

_DEFAULT_DTYPE = np.float32


def default_dtype():
    """Dtype used for newly created tensors."""
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default dtype (e.g. to float64 for grad checks)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """A dense tensor: shape + row-major float buffer + requires_grad flag."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad,
                      dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    """One recorded operation: output, inputs, and the saved-state backward."""

    __slots__ = ("out", "inputs", "backward_fn", "op_kind")

    def __init__(self, op_kind: str, out: Tensor, inputs: tuple[Tensor, ...],
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.op_kind = op_kind
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; creation order is topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _finite_or_raise(arr: np.ndarray, op_kind: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteValue(f"{op_kind} produced non-finite values")


def _result(op_kind: str, out_data: np.ndarray, inputs: tuple[Tensor, ...],
            backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    _finite_or_raise(out_data, op_kind)
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires, dtype=out_data.dtype)
    tape = _active_tape()
    if requires and tape is not None:
        tape.nodes.append(_Node(op_kind, out, inputs, backward_fn))
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


# --- elementwise and shape ops ---

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; `b` may also be a channel bias ((C,) against (...,C,H,W)
    or (N,C) against (N,C,H,W), or (F,) against (N,F))."""
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        def bw(g):
            return g, g
        return _result("add", ad + bd, (a, b), bw)
    axes = _bias_axes(ad.shape, bd.shape)
    if axes is None:
        raise ShapeMismatch(f"add: {ad.shape} vs {bd.shape}")
    bexp = bd[_bias_expand(ad.ndim, axes)]

    def bw(g):
        return g, g.sum(axis=axes)
    return _result("add", ad + bexp, (a, b), bw)


def _bias_axes(big: tuple[int, ...], small: tuple[int, ...]) -> tuple[int, ...] | None:
    """Axes of `big` summed over when broadcasting `small` as a bias/scale.

    Allowed: (C,) vs (N,C,H,W) or (C,H,W); (N,C) vs (N,C,H,W); (F,) vs (N,F).
    """
    if len(big) == 4 and small == (big[1],):
        return (0, 2, 3)
    if len(big) == 3 and small == (big[0],):
        return (1, 2)
    if len(big) == 4 and small == big[:2]:
        return (2, 3)
    if len(big) == 2 and small == (big[1],):
        return (0,)
    return None


def _bias_expand(big_ndim: int, axes: tuple[int, ...]):
    return tuple(None if i in axes else slice(None) for i in range(big_ndim))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise multiply; `b` may be a per-channel scale like in `add`."""
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        def bw(g):
            return g * bd, g * ad
        return _result("mul", ad * bd, (a, b), bw)
    axes = _bias_axes(ad.shape, bd.shape)
    if axes is None:
        raise ShapeMismatch(f"mul: {ad.shape} vs {bd.shape}")
    bexp = bd[_bias_expand(ad.ndim, axes)]

    def bw(g):
        return g * bexp, (g * ad).sum(axis=axes)
    return _result("mul", ad * bexp, (a, b), bw)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid(x.data)
    out = x.data * s

    def bw(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)
    return _result("silu", out, (x,), bw)


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate along the channel axis (axis 1 for NCHW, axis 0 for CHW)."""
    if not tensors:
        raise ShapeMismatch("concat_channels: no inputs")
    nd = tensors[0].ndim
    if nd not in (3, 4):
        raise ShapeMismatch("concat_channels: expects CHW or NCHW tensors")
    axis = 1 if nd == 4 else 0
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:axis] != ref[:axis] \
                or t.shape[axis + 1:] != ref[axis + 1:]:
            raise ShapeMismatch(f"concat_channels: {ref} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(sizes)))
    return _result("concat_channels", out, tensors, bw)


# --- spatial ops ---

def _as_nchw(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeMismatch(f"expected CHW or NCHW, got {x.shape}")


def _im2col_ref(xd: np.ndarray) -> np.ndarray:
    """(N,C,H,W) -> (N,H,W,C,3,3) patches, zero padded; numpy reference."""
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))   # (N,C,H,W,3,3)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def _col2im_ref(g6: np.ndarray, h: int, w: int) -> np.ndarray:
    """Adjoint of _im2col_ref: (N,H,W,C,3,3) -> (N,C,H,W); numpy reference."""
    n, ci = g6.shape[0], g6.shape[3]
    gxp = np.zeros((n, ci, h + 2, w + 2), dtype=g6.dtype)
    for ky in range(3):
        for kx in range(3):
            gxp[:, :, ky:ky + h, kx:kx + w] += \
                g6[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    return gxp[:, :, 1:-1, 1:-1]


try:
    from ._convkernels import col2im3x3 as _col2im_fast
    from ._convkernels import im2col3x3 as _im2col_fast
    _HAVE_FAST_CONV = True
except ImportError:           # numba unavailable; use the numpy paths
    _HAVE_FAST_CONV = False

_USE_FAST_CONV = _HAVE_FAST_CONV


def use_fast_conv(enabled: bool) -> bool:
    """Toggle the JIT conv kernels (tests compare both paths); returns the
    previous setting."""
    global _USE_FAST_CONV
    prev = _USE_FAST_CONV
    _USE_FAST_CONV = bool(enabled) and _HAVE_FAST_CONV
    return prev


def _im2col(xd: np.ndarray) -> np.ndarray:
    return _im2col_fast(xd) if _USE_FAST_CONV else _im2col_ref(xd)


def _col2im(g6: np.ndarray, h: int, w: int) -> np.ndarray:
    return _col2im_fast(g6, h, w) if _USE_FAST_CONV else _col2im_ref(g6, h, w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 convolution, stride 1, zero "same" padding.

    x: (N,Cin,H,W) or (Cin,H,W); weight: (Cout,Cin,3,3); bias: (Cout,) or None.
    """
    xd, squeeze = _as_nchw(x)
    wd = weight.data
    if wd.ndim != 4 or wd.shape[2:] != (3, 3):
        raise ShapeMismatch(f"conv2d: weight must be (Cout,Cin,3,3), got {wd.shape}")
    n, cin, h, w = xd.shape
    cout = wd.shape[0]
    if wd.shape[1] != cin:
        raise ShapeMismatch(f"conv2d: input has {cin} channels, weight expects {wd.shape[1]}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeMismatch(f"conv2d: bias shape {bias.shape} != ({cout},)")

    patches = _im2col(xd).reshape(n * h * w, cin * 9)
    wmat = wd.reshape(cout, cin * 9)
    out = patches @ wmat.T                                      # (NHW, Cout)
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, h, w, cout).transpose(0, 3, 1, 2))
    if squeeze:
        out = out[0]

    def bw(g):
        gd = g[None] if squeeze else g
        go = np.ascontiguousarray(gd.transpose(0, 2, 3, 1)).reshape(n * h * w, cout)
        gw = (go.T @ patches).reshape(cout, cin, 3, 3)
        gcols = (go @ wmat).reshape(n, h, w, cin, 3, 3)
        gx = _col2im(gcols, h, w)
        if squeeze:
            gx = gx[0]
        if bias is not None:
            return gx, gw, go.sum(axis=0)
        return gx, gw
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("conv2d", out, inputs, bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias with x: (N,Fin) or (Fin,), weight: (Fout,Fin)."""
    xd = x.data
    wd = weight.data
    vec = xd.ndim == 1
    if vec:
        xd = xd[None]
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise ShapeMismatch(f"linear: {x.shape} @ {weight.shape}.T")
    if bias is not None and bias.shape != (wd.shape[0],):
        raise ShapeMismatch(f"linear: bias shape {bias.shape} != ({wd.shape[0]},)")
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    if vec:
        out = out[0]

    def bw(g):
        gd = g[None] if vec else g
        gx = gd @ wd
        gw = gd.T @ xd
        if vec:
            gx = gx[0]
        if bias is not None:
            return gx, gw, gd.sum(axis=0)
        return gx, gw
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("linear", out, inputs, bw)


def avgpool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 on the last two axes."""
    xd, squeeze = _as_nchw(x)
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"avgpool2: spatial dims must be even, got {h}x{w}")
    out = xd.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    if squeeze:
        out = out[0]

    def bw(g):
        gd = g[None] if squeeze else g
        gx = np.repeat(np.repeat(gd, 2, axis=2), 2, axis=3) * 0.25
        return (gx[0] if squeeze else gx,)
    return _result("avgpool2", out, (x,), bw)


def upsample_nearest2(x: Tensor) -> Tensor:
    """2x nearest-neighbor upsampling on the last two axes."""
    xd, squeeze = _as_nchw(x)
    out = np.repeat(np.repeat(xd, 2, axis=2), 2, axis=3)
    if squeeze:
        out = out[0]
    n, c, h, w = xd.shape

    def bw(g):
        gd = g[None] if squeeze else g
        gx = gd.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
        return (gx[0] if squeeze else gx,)
    return _result("upsample_nearest2", out, (x,), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements; returns a scalar tensor."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"mse: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.asarray((diff * diff).mean(), dtype=a.data.dtype)
    scale = 2.0 / diff.size

    def bw(g):
        gd = g * scale * diff
        return gd, -gd
    return _result("mse", out, (a, b), bw)


_OPS: dict[str, Callable] = {
    "conv2d": conv2d,
    "linear": linear,
    "add": add,
    "mul": mul,
    "silu": silu,
    "concat_channels": concat_channels,
    "avgpool2": avgpool2,
    "upsample_nearest2": upsample_nearest2,
    "mse": mse,
}


def forward(op_kind: str, *inputs: Tensor, **attrs) -> Tensor:
    """Dispatch a forward op by name, recording it on the active tape."""
    try:
        op = _OPS[op_kind]
    except KeyError:
        raise ShapeMismatch(f"unknown op_kind {op_kind!r}") from None
    return op(*inputs, **attrs)


def backward(tape: Tape, loss: Tensor,
             params: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Reverse-sweep the tape from `loss`, returning {leaf tensor -> gradient}.

    Leaves are requires_grad tensors that are inputs of recorded nodes but not
    outputs of any. Tensors in `params` that never participated get zero
    gradients. Each node is visited exactly once.
    """
    if loss.size != 1:
        raise NotScalarLoss(f"loss has shape {loss.shape}")
    idx = None
    for i in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[i].out is loss:
            idx = i
            break
    if idx is None:
        raise DetachedGraph("loss was not produced on this tape")

    produced = {id(node.out) for node in tape.nodes}
    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)
    }
    leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}

    for node in reversed(tape.nodes[:idx + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            if id(inp) in produced:
                acc = grads.get(id(inp))
                grads[id(inp)] = ig if acc is None else acc + ig
            else:
                prev = leaf_grads.get(id(inp))
                leaf_grads[id(inp)] = (inp, ig if prev is None else prev[1] + ig)

    result = {t: Tensor(g, dtype=g.dtype) for t, g in leaf_grads.values()}
    if params is not None:
        for p in params:
            if p.requires_grad and p not in result:
                result[p] = Tensor(np.zeros_like(p.data), dtype=p.data.dtype)
    return result


def grad_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
               h: float | None = None, max_coords_per_param: int = 8,
               seed: int = 0, coord_selection: str = "largest") -> float:
    """Max relative error between analytic gradients of f and central differences.

    f must be deterministic in `params`. Error per sampled coordinate is
    |analytic - cd| / max(|analytic|, |cd|, 1e-8). By default the coordinates
    with the largest analytic gradients are checked: in 32-bit arithmetic the
    difference quotient carries absolute noise of roughly eps*|f|/h, so
    near-zero-gradient coordinates are noise-dominated no matter how accurate
    the backward pass is. Pass coord_selection="random" (used with the
    float64 switch) to sample uniformly instead.
    """
    if h is None:
        h = 1e-3 if _DEFAULT_DTYPE == np.float32 else 1e-5

    with Tape() as tape:
        loss = f(params)
    grads = backward(tape, loss, params=params)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        if not p.requires_grad:
            continue
        analytic = grads[p].data.reshape(-1)
        n = p.size
        if n <= max_coords_per_param:
            coords = np.arange(n)
        elif coord_selection == "largest":
            coords = np.argsort(np.abs(analytic))[-max_coords_per_param:]
        elif coord_selection == "random":
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            raise ValueError(f"unknown coord_selection {coord_selection!r}")
        flat = p.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = f(params).item()
            flat[c] = orig - h
            down = f(params).item()
            flat[c] = orig
            cd = (up - down) / (2.0 * h)
            a = float(analytic[c])
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
            worst = max(worst, err)
    return worst
