"""Dense rank-4 tensors with reverse-mode automatic differentiation.

Tensors are shaped (batch, height, width, channels) and immutable once
produced by an operation.  Every operation's vector-Jacobian product is
itself expressed through operations on tensors, so gradients can be
differentiated again (needed for the critic gradient penalty).

Determinism: reductions use numpy's pairwise summation, scatter adds use
``np.bincount`` (a sequential C loop), and matrix products go through BLAS
GEMM, all of which are bitwise reproducible for a fixed input on a given
machine.  No internal threading is introduced by this module.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


class GraphError(RuntimeError):
    """Raised for invalid uses of the computation graph."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_dtype(arr: np.ndarray) -> np.ndarray:
    if arr.dtype not in _FLOAT_DTYPES:
        return arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor4:
    """A rank-4 array node in the computation graph.

    ``data`` is the stored ndarray, ``grad`` is filled by :func:`backward`
    for leaves with ``requires_grad``.  Scalars are represented with shape
    (1, 1, 1, 1).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps", "_op",
                 "_graph_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        arr = _check_dtype(arr)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 requires rank-4 data, got shape {arr.shape}")
        if arr.size == 0:
            raise ShapeError(f"Tensor4 requires non-empty data, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjps = ()
        self._op = "leaf"
        self._graph_vjp = True

    # -- basic introspection -------------------------------------------------

    @property
    def dims(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.dims}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor4":
        """A leaf tensor sharing this tensor's values, cut from the graph."""
        return Tensor4(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor4(dims={self.dims}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def abs(self):
        return absolute(self)

    def sum(self):
        return reduce_sum(self)

    def mean(self):
        return reduce_mean(self)


def _coerce(value, like: Tensor4) -> Tensor4:
    if isinstance(value, Tensor4):
        return value
    if isinstance(value, (int, float)):
        return Tensor4(np.full((1, 1, 1, 1), value, dtype=like.dtype))
    raise TypeError(f"cannot combine Tensor4 with {type(value)!r}")


def constant(data, dtype=None) -> Tensor4:
    """Leaf tensor that never takes gradients."""
    return Tensor4(data, requires_grad=False, dtype=dtype)


def scalar(value: float, dtype=DEFAULT_DTYPE) -> Tensor4:
    return Tensor4(np.full((1, 1, 1, 1), value, dtype=dtype))


def zeros(dims, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor4:
    return Tensor4(np.zeros(dims, dtype=dtype), requires_grad=requires_grad)


def ones(dims, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor4:
    return Tensor4(np.ones(dims, dtype=dtype), requires_grad=requires_grad)


# -- graph construction -------------------------------------------------------


def _node(data: np.ndarray, parents, vjps, op: str, graph_vjp: bool = True) -> Tensor4:
    """Wrap op output; records the graph only when gradients are wanted."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor4(data)
    if track:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
        out._op = op
        out._graph_vjp = graph_vjp
    return out


def _same_dtype(*ts: Tensor4):
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise ShapeError(f"mixed dtypes {dt} vs {t.dtype}; cast leaves explicitly")
    return dt


def _broadcastable(a, b):
    return all(x == y or x == 1 or y == 1 for x, y in zip(a, b))


def _check_broadcast(a: Tensor4, b: Tensor4, op: str):
    if not _broadcastable(a.dims, b.dims):
        raise ShapeError(f"{op}: shapes {a.dims} and {b.dims} do not broadcast")


def _unbroadcast(g: Tensor4, dims) -> Tensor4:
    """Sum ``g`` down to ``dims`` (inverse of numpy size-1 broadcasting)."""
    out = g
    for axis in range(4):
        if dims[axis] == 1 and out.dims[axis] != 1:
            out = sum_axis(out, axis)
    return out


# -- elementwise and broadcast binary ops -------------------------------------


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    _same_dtype(a, b)
    _check_broadcast(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 (lambda g: _unbroadcast(g, a.dims),
                  lambda g: _unbroadcast(g, b.dims)), "add")


def sub(a: Tensor4, b: Tensor4) -> Tensor4:
    _same_dtype(a, b)
    _check_broadcast(a, b, "sub")
    return _node(a.data - b.data, (a, b),
                 (lambda g: _unbroadcast(g, a.dims),
                  lambda g: _unbroadcast(scale(g, -1.0), b.dims)), "sub")


def mul(a: Tensor4, b: Tensor4) -> Tensor4:
    """Hadamard product with size-1 broadcasting."""
    _same_dtype(a, b)
    _check_broadcast(a, b, "mul")
    return _node(a.data * b.data, (a, b),
                 (lambda g: _unbroadcast(mul(g, b), a.dims),
                  lambda g: _unbroadcast(mul(g, a), b.dims)), "mul")


def div(a: Tensor4, b: Tensor4) -> Tensor4:
    _same_dtype(a, b)
    _check_broadcast(a, b, "div")
    return _node(a.data / b.data, (a, b),
                 (lambda g: _unbroadcast(div(g, b), a.dims),
                  lambda g: _unbroadcast(mul(g, div(scale(a, -1.0), mul(b, b))), b.dims)),
                 "div")


def scale(a: Tensor4, s: float) -> Tensor4:
    s = float(s)
    return _node(a.data * s, (a,), (lambda g: scale(g, s),), "scale")


def add_scalar(a: Tensor4, s: float) -> Tensor4:
    return _node(a.data + float(s), (a,), (lambda g: g,), "add_scalar")


def absolute(a: Tensor4) -> Tensor4:
    # subgradient 0 at 0: sign(0) == 0
    sign = constant(np.sign(a.data))
    return _node(np.abs(a.data), (a,), (lambda g: mul(g, sign),), "abs")


def leaky_relu(a: Tensor4, negative_slope: float = 0.2) -> Tensor4:
    out = np.where(a.data > 0, a.data, a.data * a.dtype.type(negative_slope))
    slope_mask = constant(np.where(a.data > 0, a.dtype.type(1), a.dtype.type(negative_slope)))
    return _node(out, (a,), (lambda g: mul(g, slope_mask),), "leaky_relu")


def tanh(a: Tensor4) -> Tensor4:
    # the vjp references the output node so curvature survives double backward
    out = _node(np.tanh(a.data), (a,), (), "tanh")
    if out.requires_grad:
        one = scalar(1.0, a.dtype)
        out._vjps = (lambda g: mul(g, sub(one, mul(out, out))),)
    return out


def exp(a: Tensor4) -> Tensor4:
    out = _node(np.exp(a.data), (a,), (), "exp")
    if out.requires_grad:
        out._vjps = (lambda g: mul(g, out),)
    return out


def log(a: Tensor4) -> Tensor4:
    return _node(np.log(a.data), (a,), (lambda g: div(g, a),), "log")


def sqrt(a: Tensor4) -> Tensor4:
    out = _node(np.sqrt(a.data), (a,), (), "sqrt")
    if out.requires_grad:
        out._vjps = (lambda g: scale(div(g, out), 0.5),)
    return out


def square(a: Tensor4) -> Tensor4:
    return mul(a, a)


def maximum_scalar(a: Tensor4, s: float) -> Tensor4:
    """max(a, s) elementwise; the subgradient routes to ``a`` where a >= s."""
    mask = constant((a.data >= s).astype(a.dtype))
    return _node(np.maximum(a.data, a.dtype.type(s)), (a,),
                 (lambda g: mul(g, mask),), "maximum_scalar")


# -- reductions ---------------------------------------------------------------


def reduce_sum(a: Tensor4) -> Tensor4:
    total = np.sum(a.data, dtype=a.dtype).reshape(1, 1, 1, 1)
    ones_like = constant(np.ones(a.dims, dtype=a.dtype))

    def vjp(g):
        return mul(ones_like, g)

    return _node(total, (a,), (vjp,), "reduce_sum")


def reduce_mean(a: Tensor4) -> Tensor4:
    return scale(reduce_sum(a), 1.0 / a.size)


def reduce(a: Tensor4, kind: str) -> Tensor4:
    """Scalar reduction: one of sum, mean, l1_norm, l2_norm."""
    if kind == "sum":
        return reduce_sum(a)
    if kind == "mean":
        return reduce_mean(a)
    if kind == "l1_norm":
        return reduce_sum(absolute(a))
    if kind == "l2_norm":
        return sqrt(reduce_sum(square(a)))
    raise ValueError(f"unknown reduction kind {kind!r}")


def sum_axis(a: Tensor4, axis: int) -> Tensor4:
    """Sum over one axis, keeping it as size 1."""
    out = np.sum(a.data, axis=axis, keepdims=True, dtype=a.dtype)
    ones_like = constant(np.ones(a.dims, dtype=a.dtype))
    return _node(out, (a,), (lambda g: mul(g, ones_like),), "sum_axis")


def max_axis(a: Tensor4, axis: int) -> Tensor4:
    """Max over one axis (kept as size 1).

    The gradient routes to the first-occurring argmax element of each
    slice, making ties deterministic (lowest index wins).
    """
    out = np.max(a.data, axis=axis, keepdims=True)
    idx = np.argmax(a.data, axis=axis)
    onehot = np.zeros(a.dims, dtype=a.dtype)
    np.put_along_axis(onehot, np.expand_dims(idx, axis), a.dtype.type(1), axis)
    mask = constant(onehot)
    return _node(out, (a,), (lambda g: mul(g, mask),), "max_axis")


# -- structural ops -----------------------------------------------------------


def reshape4(a: Tensor4, dims) -> Tensor4:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4 or math.prod(dims) != a.size:
        raise ShapeError(f"cannot reshape {a.dims} into {dims}")
    src = a.dims
    return _node(a.data.reshape(dims), (a,), (lambda g: reshape4(g, src),), "reshape")


def transpose_hw(a: Tensor4) -> Tensor4:
    return _node(np.ascontiguousarray(a.data.transpose(0, 2, 1, 3)), (a,),
                 (lambda g: transpose_hw(g),), "transpose_hw")


def concat(tensors, axis: int) -> Tensor4:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    _same_dtype(*tensors)
    for t in tensors[1:]:
        for ax in range(4):
            if ax != axis and t.dims[ax] != tensors[0].dims[ax]:
                raise ShapeError(f"concat: shapes {tensors[0].dims} and {t.dims} "
                                 f"differ outside axis {axis}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.dims[axis] for t in tensors])

    def make_vjp(i):
        starts = [0, 0, 0, 0]
        sizes = list(tensors[i].dims)
        starts[axis] = int(offsets[i])

        def vjp(g):
            return slice4(g, starts, sizes)

        return vjp

    return _node(data, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))),
                 "concat")


def slice4(a: Tensor4, starts, sizes) -> Tensor4:
    starts = tuple(int(s) for s in starts)
    sizes = tuple(int(s) for s in sizes)
    for ax in range(4):
        if starts[ax] < 0 or sizes[ax] < 1 or starts[ax] + sizes[ax] > a.dims[ax]:
            raise ShapeError(f"slice {starts}+{sizes} out of bounds for {a.dims}")
    sl = tuple(slice(st, st + sz) for st, sz in zip(starts, sizes))
    pads = tuple((starts[ax], a.dims[ax] - starts[ax] - sizes[ax]) for ax in range(4))
    return _node(np.ascontiguousarray(a.data[sl]), (a,),
                 (lambda g: pad_zero(g, pads),), "slice4")


def pad_zero(a: Tensor4, pads) -> Tensor4:
    """Zero-pad per axis with (before, after) counts."""
    pads = tuple((int(b), int(e)) for b, e in pads)
    data = np.pad(a.data, pads)
    starts = tuple(b for b, _ in pads)
    sizes = a.dims
    return _node(data, (a,), (lambda g: slice4(g, starts, sizes),), "pad_zero")


def gather_flat(a: Tensor4, indices: np.ndarray, out_dims) -> Tensor4:
    """out.flat[i] = a.flat[indices.flat[i]]; indices define a fixed linear map."""
    out_dims = tuple(int(d) for d in out_dims)
    idx = indices.reshape(-1)
    data = a.data.reshape(-1)[idx].reshape(out_dims)
    src_dims = a.dims
    return _node(data, (a,), (lambda g: scatter_flat(g, idx, src_dims),), "gather_flat")


def scatter_flat(a: Tensor4, indices: np.ndarray, out_dims) -> Tensor4:
    """Adjoint of gather_flat: adds a.flat[i] into out.flat[indices.flat[i]]."""
    out_dims = tuple(int(d) for d in out_dims)
    idx = indices.reshape(-1)
    acc = np.bincount(idx, weights=a.data.reshape(-1), minlength=math.prod(out_dims))
    data = acc.astype(a.dtype).reshape(out_dims)
    src_dims = a.dims
    return _node(data, (a,), (lambda g: gather_flat(g, idx, src_dims),), "scatter_flat")


def matmul(a: Tensor4, b: Tensor4) -> Tensor4:
    """Batched matrix product of (n, m, k, 1) with (n, k, p, 1) -> (n, m, p, 1)."""
    _same_dtype(a, b)
    if a.dims[3] != 1 or b.dims[3] != 1 or a.dims[0] != b.dims[0] or a.dims[2] != b.dims[1]:
        raise ShapeError(f"matmul: incompatible shapes {a.dims} and {b.dims}")
    data = np.matmul(a.data[..., 0], b.data[..., 0])[..., None]
    return _node(data, (a, b),
                 (lambda g: matmul(g, transpose_hw(b)),
                  lambda g: matmul(transpose_hw(a), g)), "matmul")


# -- convolution --------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D convolution: kernel dims, stride, dilation, padding.

    ``padding`` is "same" (zero padding, output spatial dims =
    ceil(input / stride)) or "valid".  The dilated kernel covers a
    receptive field of (k - 1) * dilation + 1 per axis.
    """

    kh: int
    kw: int
    c_in: int
    c_out: int
    stride: tuple = (1, 1)
    dilation: tuple = (1, 1)
    padding: str = "same"

    def __post_init__(self):
        for name in ("kh", "kw", "c_in", "c_out"):
            if getattr(self, name) < 1:
                raise ShapeError(f"ConvSpec.{name} must be >= 1")
        if any(s < 1 for s in self.stride) or any(d < 1 for d in self.dilation):
            raise ShapeError("stride and dilation must be >= 1")
        if self.padding not in ("same", "valid"):
            raise ShapeError(f"unknown padding mode {self.padding!r}")

    def effective_kernel(self):
        return ((self.kh - 1) * self.dilation[0] + 1,
                (self.kw - 1) * self.dilation[1] + 1)

    def out_dims(self, in_h: int, in_w: int):
        ekh, ekw = self.effective_kernel()
        if self.padding == "same":
            return (-(-in_h // self.stride[0]), -(-in_w // self.stride[1]))
        out_h = (in_h - ekh) // self.stride[0] + 1
        out_w = (in_w - ekw) // self.stride[1] + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"valid conv of {self.kh}x{self.kw} (dilation {self.dilation}) "
                             f"does not fit input {in_h}x{in_w}")
        return out_h, out_w

    def pad_amounts(self, in_h: int, in_w: int):
        if self.padding == "valid":
            return (0, 0), (0, 0)
        ekh, ekw = self.effective_kernel()
        out_h, out_w = self.out_dims(in_h, in_w)
        total_h = max((out_h - 1) * self.stride[0] + ekh - in_h, 0)
        total_w = max((out_w - 1) * self.stride[1] + ekw - in_w, 0)
        return ((total_h // 2, total_h - total_h // 2),
                (total_w // 2, total_w - total_w // 2))


@lru_cache(maxsize=64)
def _conv_indices(in_h, in_w, c_in, kh, kw, sh, sw, dh, dw, ph0, ph1, pw0, pw1):
    """Flat gather indices from the padded (hp, wp, c) volume to (P, kh*kw*c)."""
    hp, wp = in_h + ph0 + ph1, in_w + pw0 + pw1
    out_h = (hp - ((kh - 1) * dh + 1)) // sh + 1
    out_w = (wp - ((kw - 1) * dw + 1)) // sw + 1
    oy = np.arange(out_h) * sh
    ox = np.arange(out_w) * sw
    ky = np.arange(kh) * dh
    kx = np.arange(kw) * dw
    rows = (oy[:, None, None, None] + ky[None, None, :, None])      # oh,1,kh,1
    cols = (ox[None, :, None, None] + kx[None, None, None, :])      # 1,ow,1,kw
    flat = (rows * wp + cols).reshape(out_h * out_w, kh * kw)       # P, kh*kw
    full = (flat[:, :, None] * c_in + np.arange(c_in)[None, None, :])
    return full.reshape(out_h * out_w, kh * kw * c_in), out_h, out_w, hp, wp


def _conv_parts(x: np.ndarray, spec: ConvSpec):
    n, h, w, c = x.shape
    (ph0, ph1), (pw0, pw1) = spec.pad_amounts(h, w)
    idx, out_h, out_w, hp, wp = _conv_indices(
        h, w, c, spec.kh, spec.kw, spec.stride[0], spec.stride[1],
        spec.dilation[0], spec.dilation[1], ph0, ph1, pw0, pw1)
    if ph0 or ph1 or pw0 or pw1:
        xp = np.pad(x, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    else:
        xp = x
    cols = xp.reshape(n, hp * wp * c)[:, idx.reshape(-1)]
    return cols.reshape(n, out_h * out_w, idx.shape[1]), idx, (out_h, out_w, hp, wp)


def _conv_forward_data(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    cols, _, (out_h, out_w, _, _) = _conv_parts(x, spec)
    wmat = w.reshape(-1, spec.c_out)
    out = np.matmul(cols, wmat)
    return out.reshape(x.shape[0], out_h, out_w, spec.c_out)


def _conv_dweight_data(x: np.ndarray, g: np.ndarray, spec: ConvSpec) -> np.ndarray:
    cols, _, _ = _conv_parts(x, spec)
    kkc = cols.shape[2]
    flat_cols = cols.reshape(-1, kkc)
    flat_g = g.reshape(-1, spec.c_out)
    return np.matmul(flat_cols.T, flat_g).reshape(spec.kh, spec.kw, spec.c_in, spec.c_out)


def _conv_dinput_data(g: np.ndarray, w: np.ndarray, spec: ConvSpec, in_hw) -> np.ndarray:
    n = g.shape[0]
    in_h, in_w = in_hw
    c = spec.c_in
    (ph0, ph1), (pw0, pw1) = spec.pad_amounts(in_h, in_w)
    idx, out_h, out_w, hp, wp = _conv_indices(
        in_h, in_w, c, spec.kh, spec.kw, spec.stride[0], spec.stride[1],
        spec.dilation[0], spec.dilation[1], ph0, ph1, pw0, pw1)
    wmat = w.reshape(-1, spec.c_out)
    cols_g = np.matmul(g.reshape(n, out_h * out_w, spec.c_out), wmat.T)
    per = hp * wp * c
    offsets = (np.arange(n) * per)[:, None]
    flat_idx = (offsets + idx.reshape(1, -1)).reshape(-1)
    acc = np.bincount(flat_idx, weights=cols_g.reshape(-1), minlength=n * per)
    xp = acc.astype(g.dtype).reshape(n, hp, wp, c)
    return np.ascontiguousarray(xp[:, ph0:ph0 + in_h, pw0:pw0 + in_w, :])


def _validate_conv(x: Tensor4, w: Tensor4, spec: ConvSpec):
    if w.dims != (spec.kh, spec.kw, spec.c_in, spec.c_out):
        raise ShapeError(f"conv weight shape {w.dims} does not match spec "
                         f"{(spec.kh, spec.kw, spec.c_in, spec.c_out)}")
    if x.dims[3] != spec.c_in:
        raise ShapeError(f"conv input shape {x.dims} has {x.dims[3]} channels, "
                         f"spec expects {spec.c_in}")
    if spec.padding == "valid":
        spec.out_dims(x.dims[1], x.dims[2])


def conv_core(x: Tensor4, w: Tensor4, spec: ConvSpec) -> Tensor4:
    """2-D convolution without bias.  The vjps instantiate the adjoint ops,
    so the whole family stays differentiable to any order."""
    _validate_conv(x, w, spec)
    _same_dtype(x, w)
    in_hw = (x.dims[1], x.dims[2])
    data = _conv_forward_data(x.data, w.data, spec)
    return _node(data, (x, w),
                 (lambda g: conv_dinput(g, w, spec, in_hw),
                  lambda g: conv_dweight(x, g, spec)), "conv")


def conv_dinput(g: Tensor4, w: Tensor4, spec: ConvSpec, in_hw) -> Tensor4:
    """Adjoint of conv_core with respect to the input (transposed conv)."""
    _same_dtype(g, w)
    data = _conv_dinput_data(g.data, w.data, spec, in_hw)
    return _node(data, (g, w),
                 (lambda h: conv_core(h, w, spec),
                  lambda h: conv_dweight(h, g, spec)), "conv_dinput")


def conv_dweight(x: Tensor4, g: Tensor4, spec: ConvSpec) -> Tensor4:
    """Adjoint of conv_core with respect to the weights."""
    _same_dtype(x, g)
    in_hw = (x.dims[1], x.dims[2])
    data = _conv_dweight_data(x.data, g.data, spec)
    return _node(data, (x, g),
                 (lambda v: conv_dinput(g, v, spec, in_hw),
                  lambda v: conv_core(x, v, spec)), "conv_dweight")


def conv2d(x: Tensor4, spec: ConvSpec, weights: Tensor4, bias: Tensor4 | None = None) -> Tensor4:
    """Convolution with optional per-output-channel bias of shape (1,1,1,c_out)."""
    out = conv_core(x, weights, spec)
    if bias is not None:
        if bias.dims != (1, 1, 1, spec.c_out):
            raise ShapeError(f"bias shape {bias.dims} does not match "
                             f"(1, 1, 1, {spec.c_out})")
        out = add(out, bias)
    return out


# -- bilinear interpolation ----------------------------------------------------


@lru_cache(maxsize=128)
def _bilinear_taps(in_h, in_w, out_h, out_w):
    """Neighbor indices and weights for align-corners-false sampling."""

    def axis_taps(n_in, n_out):
        pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        lo = np.clip(np.floor(pos), 0, n_in - 1).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = np.clip(pos - lo, 0.0, 1.0)
        return lo, hi, frac

    y0, y1, fy = axis_taps(in_h, out_h)
    x0, x1, fx = axis_taps(in_w, out_w)
    return y0, y1, fy, x0, x1, fx


def _bilinear_forward_data(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    n, h, w, c = x.shape
    y0, y1, fy, x0, x1, fx = _bilinear_taps(h, w, out_h, out_w)
    fy = fy.astype(x.dtype)[None, :, None, None]
    fx = fx.astype(x.dtype)[None, None, :, None]
    tl = x[:, y0][:, :, x0]
    tr = x[:, y0][:, :, x1]
    bl = x[:, y1][:, :, x0]
    br = x[:, y1][:, :, x1]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    return top + (bot - top) * fy


def _bilinear_adjoint_data(g: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    n, out_h, out_w, c = g.shape
    y0, y1, fy, x0, x1, fx = _bilinear_taps(in_h, in_w, out_h, out_w)
    wy0, wy1 = (1.0 - fy), fy
    wx0, wx1 = (1.0 - fx), fx
    flat = np.zeros(n * in_h * in_w * c, dtype=np.float64)
    base = (np.arange(n) * (in_h * in_w))[:, None, None]
    chan = np.arange(c)[None, None, None, :]
    for ys, wy in ((y0, wy0), (y1, wy1)):
        for xs, wx in ((x0, wx0), (x1, wx1)):
            cell = (ys[:, None] * in_w + xs[None, :])
            idx = ((base + cell[None, :, :]) * c)[..., None] + chan
            weight = (wy[:, None] * wx[None, :])[None, :, :, None]
            flat += np.bincount(idx.reshape(-1),
                                weights=(g * weight).reshape(-1).astype(np.float64),
                                minlength=flat.size)
    return flat.astype(g.dtype).reshape(n, in_h, in_w, c)


def bilinear_resize(x: Tensor4, out_h: int, out_w: int) -> Tensor4:
    """Bilinear sampling (align-corners-false) to an arbitrary target size."""
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear target dims must be >= 1")
    in_h, in_w = x.dims[1], x.dims[2]
    data = _bilinear_forward_data(x.data, out_h, out_w)
    return _node(data, (x,),
                 (lambda g: bilinear_adjoint(g, in_h, in_w),), "bilinear_resize")


def bilinear_adjoint(g: Tensor4, in_h: int, in_w: int) -> Tensor4:
    data = _bilinear_adjoint_data(g.data, in_h, in_w)
    out_h, out_w = g.dims[1], g.dims[2]
    return _node(data, (g,),
                 (lambda h: bilinear_resize(h, out_h, out_w),), "bilinear_adjoint")


def bilinear_upsample(x: Tensor4, target_h: int, target_w: int) -> Tensor4:
    """Bilinear upsampling; the target must be at least the source size."""
    if target_h < x.dims[1] or target_w < x.dims[2]:
        raise ShapeError(f"bilinear_upsample target {(target_h, target_w)} is smaller "
                         f"than source {(x.dims[1], x.dims[2])}")
    return bilinear_resize(x, target_h, target_w)


# -- reverse-mode engine -------------------------------------------------------


def _toposort(root: Tensor4):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _backprop(root: Tensor4, targets, create_graph: bool):
    if root.size != 1:
        raise GraphError(f"backward root must be a scalar, got dims {root.dims}")
    order = _toposort(root)
    want = {id(t) for t in targets} if targets is not None else None

    # nodes from which some target (or, for backward(), some leaf) is reachable
    needed = {}
    for node in order:
        if want is None:
            local = node.requires_grad and not node._parents
        else:
            local = id(node) in want
        needed[id(node)] = local or any(
            needed.get(id(p), False) for p in node._parents if p.requires_grad)

    grads: dict[int, Tensor4] = {id(root): ones((1, 1, 1, 1), dtype=root.dtype)}
    results: dict[int, Tensor4] = {}
    ctx = no_grad() if not create_graph else _nullcontext()
    with ctx:
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if want is not None and id(node) in want:
                results[id(node)] = g
            elif want is None and not node._parents:
                results[id(node)] = g
            for parent, vjp in zip(node._parents, node._vjps):
                if not parent.requires_grad or not needed.get(id(parent), False):
                    continue
                contrib = vjp(g)
                if contrib.dims != parent.dims:
                    raise GraphError(f"vjp of {node._op} produced dims {contrib.dims} "
                                     f"for parent dims {parent.dims}")
                prev = grads.get(id(parent))
                grads[id(parent)] = contrib if prev is None else add(prev, contrib)
    return results


@contextmanager
def _nullcontext():
    yield


def backward(root: Tensor4):
    """Accumulate gradients of a scalar root into every requires_grad leaf."""
    results = _backprop(root, None, create_graph=False)
    for node in _toposort(root):
        got = results.get(id(node))
        if got is None:
            continue
        node.grad = got.data if node.grad is None else node.grad + got.data


def grad(root: Tensor4, wrt, create_graph: bool = False):
    """Gradients of a scalar root with respect to the given tensors.

    With ``create_graph`` the returned tensors stay connected to the graph
    so they can be differentiated again.  Requires every vjp along the path
    to build graph nodes; ops that cannot are rejected up front.
    """
    wrt = list(wrt)
    for t in wrt:
        if not t.requires_grad:
            raise GraphError("grad target does not require gradients")
    if create_graph:
        bad = [n._op for n in _toposort(root) if not n._graph_vjp]
        if bad:
            raise GraphError(f"graph contains ops without differentiable vjps: {bad}")
    results = _backprop(root, wrt, create_graph=create_graph)
    out = []
    for t in wrt:
        g = results.get(id(t))
        if g is None:
            g = zeros(t.dims, dtype=t.dtype)
        out.append(g)
    return out
