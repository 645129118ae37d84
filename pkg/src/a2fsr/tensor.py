"""Dense NCHW tensor kernel with hand-written backward passes.

Tensors are plain numpy arrays of rank 4 laid out as (n, c, h, w).  Every
operation has a forward function and a matching ``*_backward`` that maps the
upstream gradient back onto the operation's inputs.  Ops preserve the dtype of
their inputs, so the same code runs in float32 for training and float64 for
gradient verification.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NumericalError

DTYPE = np.float32
WIDE_DTYPE = np.float64

SUPPORTED_KERNELS = (1, 3, 5, 7)


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise ConfigurationError(f"expected a rank-4 (n, c, h, w) tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ConfigurationError(f"all tensor dimensions must be >= 1, got {arr.shape}")
    return arr


@dataclass
class GradSlot:
    """A parameter value paired with its additive gradient accumulator."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ConfigurationError(
                f"grad shape {self.grad.shape} differs from value shape {self.value.shape}"
            )

    def zero_grad(self):
        self.grad[...] = 0

    def accumulate(self, g):
        self.grad += g

    def astype(self, dtype) -> "GradSlot":
        return GradSlot(self.value.astype(dtype), self.grad.astype(dtype))

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size


@dataclass
class ConvParams:
    """Weights (out_ch, in_ch, k, k) and bias (out_ch,) of a stride-1 'same' convolution."""

    weight: GradSlot
    bias: GradSlot

    def __post_init__(self):
        w = self.weight.value
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ConfigurationError(f"conv weight must be (out, in, k, k), got {w.shape}")
        if w.shape[2] not in SUPPORTED_KERNELS:
            raise ConfigurationError(f"kernel size {w.shape[2]} not in {SUPPORTED_KERNELS}")
        if self.bias.value.shape != (w.shape[0],):
            raise ConfigurationError(
                f"bias shape {self.bias.value.shape} does not match out_ch={w.shape[0]}"
            )

    @classmethod
    def zeros(cls, in_ch, out_ch, k, dtype=DTYPE) -> "ConvParams":
        return cls(
            GradSlot(np.zeros((out_ch, in_ch, k, k), dtype=dtype)),
            GradSlot(np.zeros((out_ch,), dtype=dtype)),
        )

    @property
    def in_ch(self) -> int:
        return self.weight.value.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weight.value.shape[0]

    @property
    def kernel(self) -> int:
        return self.weight.value.shape[2]

    def slots(self):
        return [self.weight, self.bias]


# --------------------------------------------------------------------------
# threading


@contextlib.contextmanager
def deterministic():
    """Pin BLAS to one thread so reductions happen in a fixed order."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


# --------------------------------------------------------------------------
# convolution


def _check_conv(x, weight, bias):
    if x.ndim != 4:
        raise ConfigurationError(f"conv2d input must be rank 4, got shape {x.shape}")
    out_ch, in_ch, kh, kw = weight.shape
    if x.shape[1] != in_ch:
        raise ConfigurationError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, weight expects {in_ch}"
        )
    if kh != kw or kh % 2 == 0:
        raise ConfigurationError(f"conv2d kernel must be square and odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (out_ch,):
        raise ConfigurationError(f"conv2d bias shape {bias.shape} != ({out_ch},)")


def _im2col(xn: np.ndarray, k: int) -> np.ndarray:
    """NHWC input -> (n*h*w, k*k*c) patch matrix, zero padding k//2, column order (i, j, c)."""
    n, h, w, c = xn.shape
    if k == 1:
        return xn.reshape(n * h * w, c)
    pad = k // 2
    xp = np.pad(xn, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # n, h, w, c, k, k
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def _to_nhwc(x):
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _to_nchw(rows, n, h, w):
    return np.ascontiguousarray(rows.reshape(n, h, w, -1).transpose(0, 3, 1, 2))


def _weight_matrix(weight):
    """(out, in, k, k) -> (k*k*in, out) matching the patch column order."""
    out_ch = weight.shape[0]
    return weight.transpose(2, 3, 1, 0).reshape(-1, out_ch)


def conv2d(x, weight, bias=None, *, return_cols=False):
    """Stride-1 cross-correlation with zero padding k//2 plus per-channel bias.

    With ``return_cols`` the patch matrix is returned too, so the backward pass
    can reuse it instead of rebuilding it.
    """
    _check_conv(x, weight, bias)
    n, _, h, w = x.shape
    k = weight.shape[2]
    cols = _im2col(_to_nhwc(x), k)
    out = cols @ _weight_matrix(weight)
    if bias is not None:
        out += bias
    out = _to_nchw(out, n, h, w)
    if return_cols:
        return out, cols
    return out


def conv2d_backward(grad_out, x, weight, cols=None, need_input_grad=True):
    """Returns (grad_input, grad_weight, grad_bias).  grad_input is None if not requested.

    The input gradient of a stride-1 'same' convolution is itself a 'same'
    convolution of the upstream gradient with the spatially flipped,
    channel-transposed kernel.
    """
    n, c, h, w = x.shape
    out_ch, _, k, _ = weight.shape
    if grad_out.shape != (n, out_ch, h, w):
        raise ConfigurationError(
            f"conv2d_backward grad shape {grad_out.shape} != {(n, out_ch, h, w)}"
        )
    if cols is None:
        cols = _im2col(_to_nhwc(x), k)
    gn = _to_nhwc(grad_out)
    g = gn.reshape(n * h * w, out_ch)
    grad_w = (g.T @ cols).reshape(out_ch, k, k, c).transpose(0, 3, 1, 2)
    grad_w = np.ascontiguousarray(grad_w)
    grad_b = g.sum(axis=0)
    grad_x = None
    if need_input_grad:
        if c <= out_ch:
            grad_x = _to_nchw(_col2im(g @ _weight_matrix(weight).T, (n, h, w, c), k), n, h, w)
        else:
            flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            grad_x = _to_nchw(_im2col(gn, k) @ _weight_matrix(flipped), n, h, w)
    return grad_x, grad_w, grad_b


def _col2im(cols, shape_nhwc, k):
    """Adjoint of :func:`_im2col`; returns NHWC."""
    n, h, w, c = shape_nhwc
    if k == 1:
        return cols.reshape(n, h, w, c)
    pad = k // 2
    cols = cols.reshape(n, h, w, k, k, c)
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + h, j:j + w, :] += cols[:, :, :, i, j, :]
    return out[:, pad:pad + h, pad:pad + w, :]


# --------------------------------------------------------------------------
# elementwise


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    # subgradient at 0 is 0
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep the open interval (0, 1) even where the dtype saturates
    info = np.finfo(out.dtype)
    return np.clip(out, info.tiny, 1 - info.epsneg, out=out)


def sigmoid_backward(grad_out, y):
    """``y`` is the forward output."""
    return grad_out * y * (1 - y)


def add(a, b):
    if a.shape != b.shape:
        raise ConfigurationError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def add_backward(grad_out):
    return grad_out, grad_out


# --------------------------------------------------------------------------
# reductions and reshapes


def global_avg_pool(x):
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(grad_out, input_shape):
    n, c, h, w = input_shape
    return np.broadcast_to(grad_out / (h * w), input_shape).copy()


def pixel_shuffle(x, p: int):
    """(n, c*p*p, h, w) -> (n, c, h*p, w*p) with out[., c, h*p+i, w*p+j] = in[., c*p*p+i*p+j, h, w]."""
    n, cp, h, w = x.shape
    if p < 1 or cp % (p * p):
        raise ConfigurationError(f"pixel_shuffle: {cp} channels not divisible by p^2={p * p}")
    c = cp // (p * p)
    return np.ascontiguousarray(
        x.reshape(n, c, p, p, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * p, w * p)
    )


def pixel_unshuffle(x, p: int):
    """Inverse of :func:`pixel_shuffle` (space-to-depth)."""
    n, c, hp, wp = x.shape
    if p < 1 or hp % p or wp % p:
        raise ConfigurationError(f"pixel_unshuffle: spatial size {hp}x{wp} not divisible by {p}")
    h, w = hp // p, wp // p
    return np.ascontiguousarray(
        x.reshape(n, c, h, p, w, p).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * p * p, h, w)
    )


pixel_shuffle_backward = pixel_unshuffle


def channel_concat(parts: Sequence[np.ndarray]):
    if not parts:
        raise ConfigurationError("channel_concat needs at least one tensor")
    n, _, h, w = parts[0].shape
    for t in parts[1:]:
        if t.shape[0] != n or t.shape[2:] != (h, w):
            raise ConfigurationError(
                f"channel_concat mismatch: {t.shape} vs batch {n} and spatial {(h, w)}"
            )
    if len(parts) == 1:
        return parts[0].copy()
    return np.concatenate(parts, axis=1)


def channel_split(x, sizes: Sequence[int]):
    """Backward of :func:`channel_concat`: split along channels at the same offsets."""
    if sum(sizes) != x.shape[1]:
        raise ConfigurationError(f"channel_split sizes {list(sizes)} do not sum to {x.shape[1]}")
    offsets = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(x, offsets, axis=1)]


def channel_scale(x, s):
    if s.shape != (x.shape[0], x.shape[1], 1, 1):
        raise ConfigurationError(
            f"channel_scale: scale shape {s.shape} does not match {(x.shape[0], x.shape[1], 1, 1)}"
        )
    return x * s


def channel_scale_backward(grad_out, x, s):
    return grad_out * s, (grad_out * x).sum(axis=(2, 3), keepdims=True)


def weighted_sum3(a, b, c, la, lb, lc):
    """la*a + lb*b + lc*c with scalar weights (0-d or 1-element arrays)."""
    if a.shape != b.shape or a.shape != c.shape:
        raise ConfigurationError(f"weighted_sum3 shape mismatch: {a.shape}, {b.shape}, {c.shape}")
    dt = a.dtype
    return dt.type(la) * a + dt.type(lb) * b + dt.type(lc) * c


def weighted_sum3_backward(grad_out, a, b, c, la, lb, lc):
    """Returns (ga, gb, gc, g_la, g_lb, g_lc); scalar grads are <grad_out, operand>."""
    dt = grad_out.dtype
    return (
        dt.type(la) * grad_out,
        dt.type(lb) * grad_out,
        dt.type(lc) * grad_out,
        _dot(grad_out, a),
        _dot(grad_out, b),
        _dot(grad_out, c),
    )


def _dot(u, v):
    return np.dot(u.ravel(), v.ravel())


def scalar(slot: GradSlot):
    return slot.value.reshape(-1)[0]


# --------------------------------------------------------------------------
# verification


@dataclass
class GradcheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst_param: str | None = None


def gradcheck_report(
    f: Callable[[], float],
    params: dict[str, GradSlot] | Iterable[GradSlot],
    eps: float = 1e-5,
    max_samples: int = 256,
    seed: int = 0,
    kink_tol: float | None = None,
) -> GradcheckReport:
    """Compare analytic gradients against central differences.

    ``f`` evaluates the scalar objective at the current parameter values and
    accumulates analytic gradients into each slot's ``grad``.  Up to
    ``max_samples`` coordinates are sampled across all slots without
    replacement.  The error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.

    With ``kink_tol`` set, the forward and backward one-sided slopes are
    compared (see :func:`_checked_difference`), so that ReLU kinks inside the
    step are not mistaken for gradient errors.  Suspected kinks are counted
    and skipped.  A wrong analytic gradient
    is still caught, since both one-sided slopes agree with each other there
    but not with the analytic value.
    """
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(f"param{i}", s) for i, s in enumerate(params)]
    for _, slot in named:
        slot.zero_grad()
    base = float(f())
    if not np.isfinite(base):
        raise NumericalError("objective is not finite at the base point")
    analytic = {name: slot.grad.copy() for name, slot in named}

    coords = [(i, j) for i, (_, slot) in enumerate(named) for j in range(slot.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > max_samples:
        pick = rng.choice(len(coords), size=max_samples, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    report = GradcheckReport(0.0, 0, 0)
    for i, j in coords:
        name, slot = named[i]
        a = float(analytic[name].reshape(-1)[j])
        if not np.isfinite(a):
            raise NumericalError(f"non-finite analytic gradient for {name}[{j}]", name)
        num = _checked_difference(f, base, slot, j, eps, name, kink_tol)
        if num is None:
            report.skipped_kinks += 1
            continue
        err = abs(a - num) / max(abs(a), abs(num), 1e-8)
        report.checked += 1
        if err >= report.max_rel_error:
            report.max_rel_error = err
            report.worst_param = name
    for _, slot in named:
        slot.zero_grad()
    return report


def _checked_difference(f, base, slot, j, eps, name, kink_tol):
    """Central difference for coordinate ``j``, or None when a kink is suspected.

    The gap ``G(s)`` between the forward and backward slopes at step ``s`` is
    proportional to ``s`` for a smooth function, so ``G(s) - 2 G(s/2)`` vanishes
    up to third-order terms.  A kink at offset ``d`` inside the step adds a
    part ``J (s - |d|) / s`` that breaks this scaling, and no single offset can
    cancel both ``G(eps) - 2 G(eps/2)`` and ``G(eps/2) - 2 G(eps/4)``.  The
    estimate at ``eps`` is accepted when the gap is tiny or both residuals are
    below ``kink_tol`` (relative to the slope).
    """
    num, up, down = _central(f, base, slot, j, eps, name)
    if kink_tol is None:
        return num
    scale = max(abs(up), abs(down), 1e-8)
    gaps = [up - down]
    if abs(gaps[0]) <= kink_tol * scale:
        return num
    for step in (eps / 2, eps / 4):
        _, up, down = _central(f, base, slot, j, step, name)
        gaps.append(up - down)
    if all(abs(g - 2 * h) <= kink_tol * scale for g, h in zip(gaps, gaps[1:])):
        return num
    return None


def _central(f, base: float, slot: GradSlot, j: int, eps: float, name: str):
    """(central, forward, backward) difference quotients for coordinate ``j``."""
    flat = slot.value.reshape(-1)
    orig = flat[j]
    flat[j] = orig + eps
    step_up = float(flat[j]) - float(orig)
    fp = float(f())
    flat[j] = orig - eps
    step_down = float(orig) - float(flat[j])
    fm = float(f())
    flat[j] = orig
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise NumericalError(f"non-finite objective while perturbing {name}[{j}]", name)
    # actual steps, since orig +- eps is rounded to the slot dtype
    return (fp - fm) / (step_up + step_down), (fp - base) / step_up, (base - fm) / step_down


def finite_diff_gradcheck(f, params, eps=1e-5, max_samples=256, seed=0, kink_tol=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    See :func:`gradcheck_report` for the calling convention.
    """
    return gradcheck_report(f, params, eps, max_samples, seed, kink_tol).max_rel_error


# --------------------------------------------------------------------------
# debug dump


def dump_tensor(t: np.ndarray, path) -> None:
    """Write 4 little-endian u32 dims followed by the little-endian f32 payload."""
    t = as_tensor(t)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4I", *t.shape))
        fh.write(t.astype("<f4").tobytes())


def load_tensor_dump(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise ConfigurationError(f"{path}: too short for a tensor dump")
    dims = struct.unpack("<4I", raw[:16])
    count = int(np.prod(dims))
    if len(raw) != 16 + 4 * count:
        raise ConfigurationError(f"{path}: payload length does not match dims {dims}")
    return np.frombuffer(raw[16:], dtype="<f4").reshape(dims).astype(DTYPE)
