"""Dense NCHW tensors and the numeric kernels the network needs.

Public kernels take and return :class:`Tensor`. Each has an array-level
twin (leading underscore) operating on raw ``numpy`` arrays; the autodiff
tape and the model backends call those directly.

Parallelism: row-chunked matrix products are dispatched to a thread pool
with a *fixed* chunk size, and BLAS itself is pinned to one thread, so the
reduction order of every output element never depends on the worker count.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError, InputError, InvariantError, ShapeError

BN_EPS = 1e-5
_ROW_CHUNK = 64

_num_threads = 1
_pool: Optional[ThreadPoolExecutor] = None
_blas_pinned = False


def set_num_threads(n: int) -> None:
    """Set the number of kernel workers. Never changes numeric results."""
    global _num_threads, _pool
    if n < 1:
        raise ValueError("thread count must be >= 1")
    if _pool is not None:
        _pool.shutdown(wait=True)
        _pool = None
    _num_threads = int(n)
    if _num_threads > 1:
        _pool = ThreadPoolExecutor(max_workers=_num_threads)


def get_num_threads() -> int:
    return _num_threads


def _pin_blas():
    global _blas_pinned
    if not _blas_pinned:
        threadpool_limits(1, user_api="blas")
        _blas_pinned = True


def _map_chunks(fn, n_items: int, chunk: int = _ROW_CHUNK):
    """Run ``fn(lo, hi)`` over fixed-size chunks of ``range(n_items)``."""
    bounds = [(lo, min(lo + chunk, n_items)) for lo in range(0, n_items, chunk)]
    if _pool is None or len(bounds) == 1:
        for lo, hi in bounds:
            fn(lo, hi)
    else:
        list(_pool.map(lambda b: fn(*b), bounds))


class Tensor:
    """Immutable rank-4 NCHW array of 32- or 64-bit floats."""

    __slots__ = ("_data",)

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor must be rank 4 (n, c, h, w), got rank {arr.ndim}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all Tensor dims must be >= 1, got {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        self._data = arr

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt ``arr`` without copying; the caller must not mutate it afterwards."""
        if arr.ndim != 4 or min(arr.shape) < 1:
            raise ShapeError(f"Tensor must be rank 4 with positive dims, got {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        t._data = arr
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self._data.shape)

    shape = dims

    @property
    def dtype(self):
        return self._data.dtype

    def numpy(self) -> np.ndarray:
        return self._data

    def flat(self) -> np.ndarray:
        return self._data.reshape(-1)

    def astype(self, dtype) -> "Tensor":
        return Tensor.wrap(self._data.astype(dtype))

    def __array__(self, dtype=None, copy=None):
        return self._data if dtype is None else self._data.astype(dtype)

    def __repr__(self):
        return f"Tensor(dims={self.dims}, dtype={self.dtype})"


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: tuple = (1, 1)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        for f in ("kernel", "stride", "padding"):
            v = getattr(self, f)
            if isinstance(v, int):
                object.__setattr__(self, f, (v, v))
        if self.in_ch % self.groups or self.out_ch % self.groups:
            raise ConfigError(
                f"in_ch={self.in_ch} and out_ch={self.out_ch} must be divisible by groups={self.groups}"
            )

    @classmethod
    def same(cls, in_ch, out_ch, k=1, stride=1, groups=1, has_bias=False) -> "ConvSpec":
        """k x k conv with k//2 zero padding on each side."""
        return cls(in_ch, out_ch, (k, k), (stride, stride), (k // 2, k // 2), groups, has_bias)

    @property
    def weight_dims(self) -> tuple:
        return (self.out_ch, self.in_ch // self.groups, self.kernel[0], self.kernel[1])

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_ch == self.out_ch and self.groups > 1

    def output_hw(self, h: int, w: int) -> tuple:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1

    def param_count(self) -> int:
        n = int(np.prod(self.weight_dims))
        return n + (self.out_ch if self.has_bias else 0)


@dataclass(frozen=True)
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS

    def __post_init__(self):
        n = len(self.gamma)
        for f in ("beta", "running_mean", "running_var"):
            if len(getattr(self, f)) != n:
                raise ShapeError(f"BatchNormParams.{f} has length {len(getattr(self, f))}, expected {n}")
        if np.any(np.asarray(self.running_var) < 0):
            raise InvariantError("BatchNormParams.running_var has negative entries")
        if not self.eps >= 0:
            raise InvariantError("BatchNormParams.eps must be non-negative")

    @property
    def channels(self) -> int:
        return len(self.gamma)

    @classmethod
    def identity(cls, c: int, eps: float = BN_EPS) -> "BatchNormParams":
        return cls(np.ones(c, np.float32), np.zeros(c, np.float32),
                   np.zeros(c, np.float32), np.ones(c, np.float32), eps)


# --------------------------------------------------------------------------
# convolution


def _check_conv(x, spec: ConvSpec, w, b):
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 4, got rank {x.ndim}")
    if x.shape[1] != spec.in_ch:
        raise ShapeError(f"conv2d channel axis: input has {x.shape[1]} channels, spec expects {spec.in_ch}")
    if tuple(w.shape) != spec.weight_dims:
        axis = next(i for i, (a, e) in enumerate(zip(w.shape, spec.weight_dims)) if a != e) \
            if w.ndim == 4 else "rank"
        raise ShapeError(f"conv2d weight axis {axis}: got dims {tuple(w.shape)}, expected {spec.weight_dims}")
    if spec.has_bias != (b is not None):
        raise ShapeError(f"conv2d bias presence must match has_bias={spec.has_bias}")
    if b is not None and np.shape(b) != (spec.out_ch,):
        raise ShapeError(f"conv2d bias length {np.shape(b)}, expected ({spec.out_ch},)")
    ho, wo = spec.output_hw(x.shape[2], x.shape[3])
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d spatial axes: output would be {ho}x{wo}")


def _pad(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _im2col(xp, kh, kw, sh, sw, ho, wo):
    """(n, c, H, W) padded -> (n, c*kh*kw, ho*wo), rows ordered (c, kh, kw)."""
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    # (n, c, ho, wo, kh, kw) -> (n, c, kh, kw, ho, wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)


def _rows_matmul(wm, cols, out):
    """out[n] = wm @ cols[n], chunked over rows of ``wm``."""
    def run(lo, hi):
        for i in range(cols.shape[0]):
            np.matmul(wm[lo:hi], cols[i], out=out[i, lo:hi])
    _map_chunks(run, wm.shape[0])


def _depthwise(xp, w, sh, sw, ho, wo):
    n, c = xp.shape[:2]
    kh, kw = w.shape[2:]
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)

    def run(lo, hi):
        acc = out[:, lo:hi]
        for dy in range(kh):
            for dx in range(kw):
                tap = xp[:, lo:hi, dy : dy + (ho - 1) * sh + 1 : sh, dx : dx + (wo - 1) * sw + 1 : sw]
                acc += tap * w[lo:hi, 0, dy, dx][None, :, None, None]
    _map_chunks(run, c)
    return out


def _conv2d(x, spec: ConvSpec, w, b=None):
    _pin_blas()
    _check_conv(x, spec, w, b)
    dt = np.result_type(x.dtype, w.dtype)
    x = x.astype(dt, copy=False)
    w = w.astype(dt, copy=False)
    n, _, h, wd = x.shape
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    ho, wo = spec.output_hw(h, wd)
    xp = _pad(x, ph, pw)
    if spec.is_depthwise:
        out = _depthwise(xp, w, sh, sw, ho, wo)
    else:
        g = spec.groups
        cin_g, cout_g = spec.in_ch // g, spec.out_ch // g
        out = np.empty((n, spec.out_ch, ho * wo), dtype=dt)
        for gi in range(g):
            xg = xp[:, gi * cin_g : (gi + 1) * cin_g]
            if kh == kw == 1 and sh == sw == 1:
                cols = np.ascontiguousarray(xg).reshape(n, cin_g, ho * wo)
            else:
                cols = _im2col(xg, kh, kw, sh, sw, ho, wo)
            wm = np.ascontiguousarray(w[gi * cout_g : (gi + 1) * cout_g]).reshape(cout_g, -1)
            _rows_matmul(wm, cols, out[:, gi * cout_g : (gi + 1) * cout_g])
        out = out.reshape(n, spec.out_ch, ho, wo)
    if b is not None:
        out += np.asarray(b, dtype=dt)[None, :, None, None]
    return out


def conv2d(x: Tensor, spec: ConvSpec, weight, bias=None) -> Tensor:
    """Cross-correlation with zero padding; output (n, out_ch, ho, wo)."""
    return Tensor.wrap(_conv2d(_arr(x), spec, _arr(weight), None if bias is None else np.asarray(bias)))


def depthwise_conv2d(x: Tensor, spec: ConvSpec, weight, bias=None) -> Tensor:
    if not (spec.groups == spec.in_ch == spec.out_ch):
        raise ConfigError(
            f"depthwise_conv2d requires groups == channels, got groups={spec.groups}, "
            f"in_ch={spec.in_ch}, out_ch={spec.out_ch}"
        )
    return conv2d(x, spec, weight, bias)


def conv2d_reference(x, spec: ConvSpec, weight, bias=None) -> np.ndarray:
    """Direct-summation convolution (slow). Used as an independent test oracle."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weight, dtype=np.float64)
    n, c, h, wd = x.shape
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    ho, wo = spec.output_hw(h, wd)
    cin_g, cout_g = spec.in_ch // spec.groups, spec.out_ch // spec.groups
    out = np.zeros((n, spec.out_ch, ho, wo))
    for b_ in range(n):
        for o in range(spec.out_ch):
            g = o // cout_g
            for yo in range(ho):
                for xo in range(wo):
                    s = 0.0
                    for ci in range(cin_g):
                        for dy in range(kh):
                            for dx in range(kw):
                                yi, xi = yo * sh + dy - ph, xo * sw + dx - pw
                                if 0 <= yi < h and 0 <= xi < wd:
                                    s += x[b_, g * cin_g + ci, yi, xi] * w[o, ci, dy, dx]
                    out[b_, o, yo, xo] = s + (0.0 if bias is None else bias[o])
    return out


# --------------------------------------------------------------------------
# batch norm


def _batchnorm(x, gamma, beta, mean, var, eps=BN_EPS):
    dt = x.dtype
    scale = (np.asarray(gamma, np.float64) / np.sqrt(np.asarray(var, np.float64) + eps)).astype(dt)
    shift = (np.asarray(beta, np.float64) - np.asarray(mean, np.float64) * scale).astype(dt)
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def batchnorm(x: Tensor, bn: BatchNormParams) -> Tensor:
    """Inference-mode batch norm with frozen running statistics."""
    if _arr(x).shape[1] != bn.channels:
        raise ShapeError(f"batchnorm channel axis: input has {_arr(x).shape[1]}, params have {bn.channels}")
    return Tensor.wrap(_batchnorm(_arr(x), bn.gamma, bn.beta, bn.running_mean, bn.running_var, bn.eps))


def batchnorm_fold(spec: ConvSpec, weight, bias, bn: BatchNormParams):
    """Absorb ``bn`` into the preceding conv. Returns ``(weight', bias')``.

    The folded conv always carries a bias.
    """
    if bn.channels != spec.out_ch:
        raise ShapeError(f"batchnorm_fold: bn has {bn.channels} channels, conv has out_ch={spec.out_ch}")
    var = np.asarray(bn.running_var, np.float64)
    if np.any(var < 0):
        raise InvariantError("batchnorm_fold: negative running variance")
    w = np.asarray(_arr(weight))
    scale = np.asarray(bn.gamma, np.float64) / np.sqrt(var + bn.eps)
    b0 = np.zeros(spec.out_ch) if bias is None else np.asarray(bias, np.float64)
    w2 = (w.astype(np.float64) * scale[:, None, None, None]).astype(w.dtype)
    b2 = (np.asarray(bn.beta, np.float64) + (b0 - np.asarray(bn.running_mean, np.float64)) * scale)
    return w2, b2.astype(w.dtype)


# --------------------------------------------------------------------------
# activations


def _relu6(x):
    return np.clip(x, 0, 6)


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def relu6(x: Tensor) -> Tensor:
    return Tensor.wrap(_relu6(_arr(x)))


def sigmoid(x: Tensor) -> Tensor:
    return Tensor.wrap(_sigmoid(_arr(x)))


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis (each w-length row), max-subtracted."""
    return Tensor.wrap(_softmax(_arr(x)))


# --------------------------------------------------------------------------
# resampling


def pool_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) averaging matrix for adaptive average pooling on one axis."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m.astype(dtype)


def interp_matrix(n_in: int, n_out: int, align_corners: bool = False, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) linear interpolation matrix for one axis."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        if align_corners:
            src = 0.0 if n_out == 1 else i * (n_in - 1) / (n_out - 1)
        else:
            src = max((i + 0.5) * n_in / n_out - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m.astype(dtype)


def _separable(x, mh, mw):
    # out[n,c] = mh @ x[n,c] @ mw.T
    return np.matmul(np.matmul(mh, x), mw.T)


def _adaptive_avg_pool(x, oh, ow):
    h, w = x.shape[2:]
    if oh > h or ow > w:
        raise InputError(f"adaptive_avg_pool cannot upscale {h}x{w} to {oh}x{ow}")
    if (oh, ow) == (h, w):
        return x.copy()
    return _separable(x, pool_matrix(h, oh, x.dtype), pool_matrix(w, ow, x.dtype))


def _bilinear(x, oh, ow, align_corners=False):
    h, w = x.shape[2:]
    if (oh, ow) == (h, w):
        return x.copy()
    return _separable(x, interp_matrix(h, oh, align_corners, x.dtype),
                      interp_matrix(w, ow, align_corners, x.dtype))


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    return Tensor.wrap(_adaptive_avg_pool(_arr(x), out_h, out_w))


def bilinear_upsample(x: Tensor, out_h: int, out_w: int, align_corners: bool = False) -> Tensor:
    h, w = _arr(x).shape[2:]
    if out_h < h or out_w < w:
        raise InputError(f"bilinear_upsample cannot shrink {h}x{w} to {out_h}x{out_w}")
    return Tensor.wrap(_bilinear(_arr(x), out_h, out_w, align_corners))


# --------------------------------------------------------------------------
# structural / elementwise


def _same_dims(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: dims {a.shape} and {b.shape} differ")


def add(x: Tensor, y: Tensor) -> Tensor:
    a, b = _arr(x), _arr(y)
    _same_dims("add", a, b)
    return Tensor.wrap(a + b)


def hadamard(x: Tensor, y: Tensor) -> Tensor:
    a, b = _arr(x), _arr(y)
    _same_dims("hadamard", a, b)
    return Tensor.wrap(a * b)


def _concat(arrs):
    base = arrs[0].shape
    for a in arrs[1:]:
        if a.shape[0] != base[0] or a.shape[2:] != base[2:]:
            raise ShapeError(f"concat_channels: dims {a.shape} incompatible with {base} outside channel axis")
    return np.concatenate(arrs, axis=1)


def _split_bounds(c, sizes):
    if sum(sizes) != c or any(s < 1 for s in sizes):
        raise ShapeError(f"split_channels: sizes {list(sizes)} do not partition {c} channels")
    offs = np.cumsum([0, *sizes])
    return [(int(offs[i]), int(offs[i + 1])) for i in range(len(sizes))]


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    return Tensor.wrap(_concat([_arr(x) for x in xs]))


def split_channels(x: Tensor, sizes: Sequence[int]) -> list:
    a = _arr(x)
    return [Tensor.wrap(a[:, lo:hi].copy()) for lo, hi in _split_bounds(a.shape[1], sizes)]


def _matmul(a, b):
    if a.shape[:2] != b.shape[:2] or a.shape[3] != b.shape[2]:
        raise ShapeError(f"matmul_batched: cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a, b)


def matmul_batched(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over the leading two axes: (n,c,p,k) @ (n,c,k,q)."""
    return Tensor.wrap(_matmul(_arr(a), _arr(b)))


def reshape(x: Tensor, dims) -> Tensor:
    a = _arr(x)
    if int(np.prod(dims)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(dims)}")
    return Tensor.wrap(a.reshape(dims))


def transpose_last2(x: Tensor) -> Tensor:
    return Tensor.wrap(np.ascontiguousarray(np.swapaxes(_arr(x), 2, 3)))


def scale(x: Tensor, c: float) -> Tensor:
    a = _arr(x)
    return Tensor.wrap(a * a.dtype.type(c))


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("TOPFORMER_THREADS", "1")))
    except ValueError:
        return 1
