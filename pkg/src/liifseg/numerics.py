"""Tensor engine with reverse-mode automatic differentiation.

Conventions used throughout the package:

* arrays are numpy, row-major; image batches are laid out N x C x H x W
* normalized spatial coordinates are (y, x) pairs in [-1, 1]; the center of
  cell ``i`` on an axis with ``n`` cells sits at ``-1 + (2*i + 1)/n``
* the default element type is float32; switch to float64 (``set_default_dtype``
  or the ``precision`` context manager) for finite-difference verification
* a module-level tape records every operation that touches a tensor with
  ``requires_grad``; :func:`backward` consumes the tape in reverse order and
  clears it, so each recorded graph can be differentiated exactly once

Only the shapes the segmentation model actually needs are supported; there is
no general broadcasting.
"""

import contextlib
import math
import threading

import numpy as np

from .errors import GraphError, ParameterError, ShapeError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32


def set_default_dtype(name):
    """Set the element type used by tensor factories: 'float32' or 'float64'."""
    global _default_dtype
    if name not in _DTYPES:
        raise ParameterError(f"unsupported dtype {name!r}; use 'float32' or 'float64'")
    _default_dtype = _DTYPES[name]


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(name):
    """Temporarily switch the default element type."""
    global _default_dtype
    saved = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = saved


class Tensor:
    """A numpy array plus optional gradient tracking.

    ``grad`` is populated by :func:`backward` and always matches ``shape``.
    """

    __slots__ = ("data", "requires_grad", "_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        # arrays keep their float dtype; anything else follows the default mode
        keep = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not keep:
            arr = arr.astype(_default_dtype, copy=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self):
        if self._grad is None:
            return None
        return Tensor(self._grad)

    def zero_grad(self):
        self._grad = None

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _scalar_err(self)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Convenience operators; all defer to the recorded ops below.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0)) if isinstance(other, Tensor) else shift(self, -float(other))

    def _accumulate(self, g, own=False):
        if self._grad is None:
            # Views and shared arrays must be copied; freshly allocated
            # gradients can be adopted directly.
            self._grad = g if own else np.array(g, dtype=self.data.dtype)
        else:
            self._grad += g


def _scalar_err(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape, dtype=_default_dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("name", "inputs", "out", "backward_fn")

    def __init__(self, name, inputs, out, backward_fn):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Graph:
    """Recorded operations, in the order they executed (topological order).

    One tape exists per thread, so concurrent no-grad inference on worker
    threads cannot disturb a recording in progress elsewhere.
    """

    def __init__(self):
        self.nodes = []
        self.enabled = True

    def clear(self):
        self.nodes = []


_TLS = threading.local()


def _tape():
    tape = getattr(_TLS, "tape", None)
    if tape is None:
        tape = Graph()
        _TLS.tape = tape
    return tape


def graph():
    return _tape()


def clear_graph():
    _tape().clear()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording; outputs inside the block never require grad."""
    tape = _tape()
    saved = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = saved


def is_grad_enabled():
    return _tape().enabled


def _finish(name, out_data, inputs, backward_fn):
    tape = _tape()
    rg = tape.enabled and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    )
    out = Tensor(out_data, requires_grad=rg)
    if rg:
        tape.nodes.append(_Node(name, inputs, out, backward_fn))
    return out


def backward(loss):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    The recorded graph is consumed: a second call without a fresh forward
    pass raises :class:`GraphError`.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward expects a Tensor")
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached from the recorded graph (or the graph was already consumed)")
    tape = _tape()
    if not tape.nodes:
        raise GraphError("no recorded graph; run a forward pass first")
    nodes = tape.nodes
    tape.nodes = []
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(nodes):
        go = node.out._grad
        if go is None:
            continue
        grads = node.backward_fn(go)
        for t, g in zip(node.inputs, grads):
            if g is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            own = g is not go and g.base is None and g.dtype == t.data.dtype
            t._accumulate(g, own)


# ---------------------------------------------------------------------------
# shape checks


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def _check_nchw(op, x):
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected an N x C x H x W tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    _check_same_shape("add", a, b)

    def bwd(go):
        return go, go

    return _finish("add", a.data + b.data, (a, b), bwd)


def mul(a, b):
    _check_same_shape("mul", a, b)

    def bwd(go):
        return go * b.data, go * a.data

    return _finish("mul", a.data * b.data, (a, b), bwd)


def scale(a, s):
    s = float(s)

    def bwd(go):
        return (go * s,)

    return _finish("scale", a.data * a.data.dtype.type(s), (a,), bwd)


def shift(a, c):
    c = float(c)

    def bwd(go):
        return (go,)

    return _finish("shift", a.data + a.data.dtype.type(c), (a,), bwd)


def concat(tensors, axis):
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != axis and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(
                f"concat: shape {t.shape} incompatible with {tensors[0].shape} on axis {axis}"
            )
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(go):
        return tuple(np.split(go, offsets, axis=axis))

    return _finish("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def concat_channels(a, b):
    """Concatenate two N x C x H x W tensors along the channel axis."""
    _check_nchw("concat_channels", a)
    _check_nchw("concat_channels", b)
    return concat((a, b), axis=1)


def reshape(a, shape):
    shape = tuple(shape)

    def bwd(go):
        return (go.reshape(a.shape),)

    return _finish("reshape", a.data.reshape(shape), (a,), bwd)


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(go):
        return (go.transpose(inverse),)

    return _finish("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def repeat_middle(a, m):
    """(N, D) -> (N, m, D) by repetition; gradient sums over the new axis."""
    if a.ndim != 2:
        raise ShapeError(f"repeat_middle: expected a 2-d tensor, got shape {a.shape}")
    out = np.broadcast_to(a.data[:, None, :], (a.shape[0], m, a.shape[1]))

    def bwd(go):
        return (go.sum(axis=1),)

    return _finish("repeat_middle", np.ascontiguousarray(out), (a,), bwd)


def repeat_spatial(a, h, w):
    """(N, C) -> (N, C, h, w) by repetition; gradient sums over space."""
    if a.ndim != 2:
        raise ShapeError(f"repeat_spatial: expected a 2-d tensor, got shape {a.shape}")
    out = np.broadcast_to(a.data[:, :, None, None], (a.shape[0], a.shape[1], h, w))

    def bwd(go):
        return (go.sum(axis=(2, 3)),)

    return _finish("repeat_spatial", np.ascontiguousarray(out), (a,), bwd)


def sum_all(a):
    def bwd(go):
        return (np.broadcast_to(go, a.shape),)

    return _finish("sum_all", a.data.sum(dtype=a.data.dtype), (a,), bwd)


def mean_all(a):
    n = a.size

    def bwd(go):
        return (np.broadcast_to(go / n, a.shape),)

    return _finish("mean_all", a.data.mean(dtype=a.data.dtype), (a,), bwd)


def relu(a):
    def bwd(go):
        return (go * (a.data > 0),)

    return _finish("relu", np.maximum(a.data, a.data.dtype.type(0)), (a,), bwd)


# ---------------------------------------------------------------------------
# softmax family


def softmax(a, temperature=1.0, axis=-1):
    """Temperature-scaled softmax along ``axis`` (max-subtracted for stability)."""
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    t = a.data.dtype.type(temperature)
    z = a.data / t
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(go):
        dot = (go * y).sum(axis=axis, keepdims=True)
        return (y * (go - dot) / t,)

    return _finish("softmax", y, (a,), bwd)


def log_softmax(a, temperature=1.0, axis=-1):
    if temperature <= 0:
        raise ParameterError(f"log_softmax temperature must be > 0, got {temperature}")
    t = a.data.dtype.type(temperature)
    z = a.data / t
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bwd(go):
        return ((go - sm * go.sum(axis=axis, keepdims=True)) / t,)

    return _finish("log_softmax", out, (a,), bwd)


def take_label_channel(a, labels):
    """Pick ``a[n, labels[n,h,w], h, w]`` from an N x C x H x W tensor.

    ``labels`` is a plain integer array, not differentiated.
    """
    _check_nchw("take_label_channel", a)
    labels = np.asarray(labels)
    if labels.shape != (a.shape[0],) + a.shape[2:]:
        raise ShapeError(
            f"take_label_channel: labels shape {labels.shape} does not match input {a.shape}"
        )
    idx = labels[:, None, :, :]
    out = np.take_along_axis(a.data, idx, axis=1)[:, 0]

    def bwd(go):
        gx = np.zeros_like(a.data)
        # each (n, h, w) targets exactly one channel, so assignment == scatter-add
        np.put_along_axis(gx, idx, go[:, None], axis=1)
        return (gx,)

    return _finish("take_label_channel", out, (a,), bwd)


# ---------------------------------------------------------------------------
# dense layers


def linear(a, weight, bias):
    """Affine map along the last axis: (..., Din) x (Dout, Din) -> (..., Dout)."""
    din = a.shape[-1]
    if weight.ndim != 2 or weight.shape[1] != din:
        raise ShapeError(
            f"linear: weight shape {weight.shape} incompatible with input shape {a.shape}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match weight {weight.shape}")
    lead = a.shape[:-1]
    x2 = a.data.reshape(-1, din)
    out = x2 @ weight.data.T + bias.data

    def bwd(go):
        go2 = go.reshape(-1, weight.shape[0])
        gx = (go2 @ weight.data).reshape(a.shape)
        gw = go2.T @ x2
        gb = go2.sum(axis=0)
        return gx, gw, gb

    return _finish("linear", out.reshape(lead + (weight.shape[0],)), (a, weight, bias), bwd)


# row-block size for the convolution column matrix, chosen to keep each block
# cache resident (elements, not bytes)
_CONV_BLOCK_ELEMS = 1 << 20

def _conv_row_block(w_out, cin, k):
    return max(1, _CONV_BLOCK_ELEMS // max(1, w_out * cin * k * k))


def _col_block(xp_n, k, stride, r0, r1, w_out):
    """Column matrix for output rows [r0, r1) of one padded NHWC sample.

    Rows are (i, j) output sites, columns are (ki, kj, c); with channels last
    the gather copies contiguous k*C runs.
    """
    rows = r1 - r0
    sh, sw, sc = xp_n.strides
    view = np.lib.stride_tricks.as_strided(
        xp_n[r0 * stride :],
        shape=(rows, w_out, k, k, xp_n.shape[2]),
        strides=(sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return view.reshape(rows * w_out, -1)


def conv2d(a, weight, bias, stride=1, padding=0):
    """2-d cross-correlation with bias, N x Cin x H x W in, N x Cout x H' x W' out.

    Work is tiled over output rows so the lowered column blocks stay cache
    resident on both the forward and backward passes.
    """
    _check_nchw("conv2d", a)
    if weight.ndim != 4 or weight.shape[1] != a.shape[1]:
        raise ShapeError(
            f"conv2d: weight shape {weight.shape} incompatible with input shape {a.shape}"
        )
    cout, cin, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels supported, got {weight.shape}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match weight {weight.shape}")
    k = kh
    n, _, h, w = a.shape
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"conv2d: kernel {weight.shape} with stride {stride}, padding {padding} "
            f"does not fit input {a.shape}"
        )

    if k == 1 and stride == 1 and padding == 0:
        return _conv1x1(a, weight, bias)

    def padded_nhwc():
        xt = np.ascontiguousarray(a.data.transpose(0, 2, 3, 1))
        if padding:
            return np.pad(xt, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
        return xt

    rblk = _conv_row_block(w_out, cin, k)
    # weight columns laid out (ki, kj, c) to match _col_block
    w_mat = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(cout, -1)
    xp = padded_nhwc()
    out_t = np.empty((n, h_out, w_out, cout), dtype=a.data.dtype)
    for bi in range(n):
        for r0 in range(0, h_out, rblk):
            r1 = min(r0 + rblk, h_out)
            blk = _col_block(xp[bi], k, stride, r0, r1, w_out) @ w_mat.T
            blk += bias.data
            out_t[bi, r0:r1] = blk.reshape(r1 - r0, w_out, cout)
    out = np.ascontiguousarray(out_t.transpose(0, 3, 1, 2))

    def bwd(go):
        xp_b = padded_nhwc()
        go_t = np.ascontiguousarray(go.transpose(0, 2, 3, 1))
        gb = go_t.sum(axis=(0, 1, 2))
        gw_mat = np.zeros_like(w_mat)
        gxp = np.zeros_like(xp_b)
        for bi in range(n):
            for r0 in range(0, h_out, rblk):
                r1 = min(r0 + rblk, h_out)
                rows = r1 - r0
                cols = _col_block(xp_b[bi], k, stride, r0, r1, w_out)
                go_blk = go_t[bi, r0:r1].reshape(rows * w_out, cout)
                gw_mat += go_blk.T @ cols
                g6 = (go_blk @ w_mat).reshape(rows, w_out, k, k, cin)
                base = r0 * stride
                for ki in range(k):
                    for kj in range(k):
                        gxp[
                            bi,
                            base + ki : base + ki + stride * rows : stride,
                            kj : kj + stride * w_out : stride,
                            :,
                        ] += g6[:, :, ki, kj, :]
        if padding:
            gxp = gxp[:, padding:-padding, padding:-padding, :]
        gx = np.ascontiguousarray(gxp.transpose(0, 3, 1, 2))
        gw = np.ascontiguousarray(
            gw_mat.reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        )
        return gx, gw, gb

    return _finish("conv2d", out, (a, weight, bias), bwd)


def _conv1x1(a, weight, bias):
    # pointwise conv as a batched matmul over flattened space
    n, cin, h, w = a.shape
    cout = weight.shape[0]
    w2 = weight.data.reshape(cout, cin)
    x2 = a.data.reshape(n, cin, h * w)
    out = np.matmul(w2, x2) + bias.data[None, :, None]

    def bwd(go):
        go2 = go.reshape(n, cout, h * w)
        gx = np.matmul(w2.T, go2).reshape(a.shape)
        gw = np.einsum("noh,nch->oc", go2, x2).reshape(weight.shape)
        gb = go2.sum(axis=(0, 2))
        return gx, gw, gb

    return _finish("conv2d", out.reshape(n, cout, h, w), (a, weight, bias), bwd)


def instance_norm(a, gamma, beta, eps=1e-5):
    """Per-sample, per-channel spatial standardization plus learned affine."""
    _check_nchw("instance_norm", a)
    if eps <= 0:
        raise ParameterError(f"instance_norm eps must be > 0, got {eps}")
    c = a.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"instance_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels"
        )
    mu = a.data.mean(axis=(2, 3), keepdims=True)
    var = a.data.var(axis=(2, 3), keepdims=True)
    istd = 1.0 / np.sqrt(var + a.data.dtype.type(eps))
    xhat = (a.data - mu) * istd
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(go):
        ggamma = (go * xhat).sum(axis=(0, 2, 3))
        gbeta = go.sum(axis=(0, 2, 3))
        gxhat = go * gamma.data[None, :, None, None]
        gx = istd * (
            gxhat
            - gxhat.mean(axis=(2, 3), keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=(2, 3), keepdims=True)
        )
        return gx, ggamma, gbeta

    return _finish("instance_norm", out, (a, gamma, beta), bwd)


def global_avg_pool(a):
    """Spatial mean per channel: N x C x H x W -> N x C."""
    _check_nchw("global_avg_pool", a)
    hw = a.shape[2] * a.shape[3]

    def bwd(go):
        return (np.broadcast_to(go[:, :, None, None] / hw, a.shape),)

    return _finish("global_avg_pool", a.data.mean(axis=(2, 3)), (a,), bwd)


# ---------------------------------------------------------------------------
# neighborhood / resampling ops

# row-major 3x3 neighbor offsets: k = 0 is (-1, -1), k = 4 the center, k = 8 is (+1, +1)
UNFOLD_OFFSETS = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1))


def unfold3x3(a):
    """Stack each cell's 3x3 neighborhood into channels: N x C x H x W -> N x 9C x H x W.

    Channel block k holds the neighbor at ``UNFOLD_OFFSETS[k]``; out-of-bounds
    neighbors are zero.
    """
    _check_nchw("unfold3x3", a)
    n, c, h, w = a.shape
    xp = np.pad(a.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    blocks = [
        xp[:, :, 1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w] for dy, dx in UNFOLD_OFFSETS
    ]
    out = np.concatenate(blocks, axis=1)

    def bwd(go):
        gxp = np.zeros_like(xp)
        for k, (dy, dx) in enumerate(UNFOLD_OFFSETS):
            gxp[:, :, 1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w] += go[:, k * c : (k + 1) * c]
        return (gxp[:, :, 1:-1, 1:-1],)

    return _finish("unfold3x3", out, (a,), bwd)


def _interp_weights(n_in, n_out, dtype):
    # cell-center mapping (align-corners = false), edge clamped
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0f = np.floor(src)
    frac = src - i0f
    i0 = np.clip(i0f.astype(np.int64), 0, n_in - 1)
    i1 = np.clip(i0f.astype(np.int64) + 1, 0, n_in - 1)
    mat = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), (1.0 - frac).astype(dtype))
    np.add.at(mat, (rows, i1), frac.astype(dtype))
    return mat


_INTERP_CACHE = {}


def _interp_matrix(n_in, n_out, dtype):
    key = (n_in, n_out, np.dtype(dtype).str)
    mat = _INTERP_CACHE.get(key)
    if mat is None:
        mat = _interp_weights(n_in, n_out, dtype)
        _INTERP_CACHE[key] = mat
    return mat


def resize_bilinear(a, out_h, out_w):
    """Bilinear resize of N x C x H x W maps using the cell-center convention."""
    _check_nchw("resize_bilinear", a)
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"resize_bilinear: output size {out_h}x{out_w} invalid")
    n, c, h, w = a.shape
    rmat = _interp_matrix(h, out_h, a.data.dtype)
    cmat = _interp_matrix(w, out_w, a.data.dtype)
    x2 = a.data.reshape(n * c, h, w)
    out = (rmat @ x2) @ cmat.T

    def bwd(go):
        g2 = go.reshape(n * c, out_h, out_w)
        return ((rmat.T @ g2 @ cmat).reshape(a.shape),)

    return _finish("resize_bilinear", out.reshape(n, c, out_h, out_w), (a,), bwd)


def nearest_cell_index(q, n):
    """Nearest cell index for normalized coordinates ``q`` on an n-cell axis.

    Chosen by comparing distances to the two bracketing cell centers, so ties
    at exact midpoints resolve toward the lower index; out-of-range
    coordinates clamp to the border cells.
    """
    q = np.asarray(q, dtype=np.float64)
    t = (q + 1.0) * (n / 2.0) - 0.5
    i0 = np.clip(np.floor(t).astype(np.int64), 0, n - 1)
    i1 = np.clip(i0 + 1, 0, n - 1)
    centers = -1.0 + (2.0 * np.arange(n, dtype=np.float64) + 1.0) / n
    further_low = np.abs(q - centers[i1]) < np.abs(q - centers[i0])
    return np.where(further_low, i1, i0)


def grid_sample_nearest(a, coords):
    """Sample nearest latent cells: N x C x H x W with (M, 2) coords -> N x M x C.

    ``coords`` holds normalized (y, x) pairs; the sampled cell is the one whose
    center is closest, ties toward the lower index. The backward rule
    scatter-adds into the selected cells; coordinates are not differentiated.
    """
    _check_nchw("grid_sample_nearest", a)
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"grid_sample_nearest: coords must be (M, 2), got {coords.shape}")
    if not np.isfinite(coords).all():
        raise ParameterError("grid_sample_nearest: non-finite coordinates")
    n, c, h, w = a.shape
    iy = nearest_cell_index(coords[:, 0], h)
    ix = nearest_cell_index(coords[:, 1], w)
    flat = iy * w + ix
    out = np.ascontiguousarray(a.data.reshape(n, c, h * w)[:, :, flat].transpose(0, 2, 1))

    def bwd(go):
        gx = np.zeros((n, c, h * w), dtype=a.data.dtype)
        for b in range(n):
            acc = np.zeros((h * w, c), dtype=a.data.dtype)
            np.add.at(acc, flat, go[b])
            gx[b] = acc.T
        return (gx.reshape(a.shape),)

    return _finish("grid_sample_nearest", out, (a,), bwd)


# ---------------------------------------------------------------------------
# verification


def grad_check(f, point, h=1e-5, indices=None):
    """Compare analytic gradients of ``f`` at ``point`` against central differences.

    ``f`` maps a Tensor to a scalar Tensor. Requires 64-bit data; returns the
    maximum relative error over the checked coordinates (all coordinates by
    default, or a sequence of flat ``indices``).
    """
    if point.data.dtype != np.float64:
        raise ParameterError("grad_check requires float64 tensors; use precision('float64')")
    tape = _tape()
    saved_nodes = tape.nodes
    tape.nodes = []
    try:
        point.zero_grad()
        out = f(point)
        backward(out)
        analytic = point._grad.reshape(-1).copy()
    finally:
        point.zero_grad()
        tape.nodes = saved_nodes
    flat = point.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    worst = 0.0
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(point).data)
            flat[i] = orig - h
            fm = float(f(point).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            denom = max(abs(analytic[i]), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
