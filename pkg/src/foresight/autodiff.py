"""Reverse-mode automatic differentiation on numpy arrays.

Implements exactly the operation set the height-regression networks need:
2-D convolution, max pooling, nearest-neighbor upsampling, channel
concatenation, batch normalization, dense layers, ReLU/sigmoid, global
average pooling, and elementwise arithmetic. Each operation carries a
hand-derived adjoint; `gradcheck` verifies any of them against central
finite differences.

Two working precisions are supported: float32 is the training default,
float64 ("wide") is used for gradient verification. Precision is carried
per tensor and preserved through every operation; the `precision` context
manager switches the default for newly created tensors.

Convolutions are lowered to a single matrix product per call (im2col), so
throughput follows the BLAS; the input-gradient pass is a set of k*k
strided accumulations rather than a scatter.
"""

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConfigurationError, DimensionError, UsageError

_DTYPES = {"standard": np.float32, "wide": np.float64}
_default_dtype = [np.float32]
_grad_enabled = [True]


def default_dtype():
    """Dtype given to newly created tensors when none is requested."""
    return _default_dtype[0]


@contextmanager
def precision(kind):
    """Temporarily switch the default tensor dtype.

    kind is "standard" (float32) or "wide" (float64).
    """
    if kind not in _DTYPES:
        raise UsageError(f"unknown precision {kind!r}, expected standard|wide")
    _default_dtype.insert(0, _DTYPES[kind])
    try:
        yield
    finally:
        _default_dtype.pop(0)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference, probing)."""
    _grad_enabled.insert(0, False)
    try:
        yield
    finally:
        _grad_enabled.pop(0)


class Tensor:
    """Array value participating in the differentiation graph.

    `data` is a numpy array (float32 or float64), `grad` accumulates
    gradients across `backward` calls until reset to None.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            raise UsageError("wrap raw arrays, not Tensors")
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.asarray(arr, dtype=dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = np.asarray(arr, dtype=default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        return _binary(self, other, lambda a, b: a + b,
                       lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, lambda a, b: a - b,
                       lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return _binary(self, other, lambda a, b: b - a,
                       lambda g, a, b: -g, lambda g, a, b: g)

    def __mul__(self, other):
        return _binary(self, other, lambda a, b: a * b,
                       lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def sum(self):
        """Sum of all elements, as a scalar tensor."""
        out = self.data.sum()
        if not _tracking(self):
            return Tensor(np.asarray(out))

        def vjp(g, acc):
            _accumulate(acc, self, np.broadcast_to(g, self.data.shape))

        return _node(np.asarray(out), (self,), vjp)

    def backward(self):
        backward(self)


def _tracking(*tensors):
    return _grad_enabled[0] and any(
        isinstance(t, Tensor) and t.requires_grad for t in tensors
    )


def _node(data, parents, vjp):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = True
    out.grad = None
    out._parents = tuple(p for p in parents if isinstance(p, Tensor))
    out._vjp = vjp
    return out


def _accumulate(acc, tensor, contribution):
    if not tensor.requires_grad:
        return
    held = acc.get(id(tensor))
    acc[id(tensor)] = contribution if held is None else held + contribution


def _binary(a, b, fwd, vjp_a, vjp_b):
    a_t = a if isinstance(a, Tensor) else None
    b_t = b if isinstance(b, Tensor) else None
    a_d = a.data if a_t is not None else a
    b_d = b.data if b_t is not None else b
    if a_t is not None and b_t is not None and a_d.shape != b_d.shape:
        raise DimensionError(
            f"elementwise operands must share a shape, got {a_d.shape} vs {b_d.shape}"
        )
    if b_t is None and not np.isscalar(b_d):
        b_d = np.asarray(b_d)
        if b_d.shape not in ((), a_d.shape):
            raise DimensionError("only scalars broadcast in elementwise ops")
    out = fwd(a_d, b_d)
    if not _tracking(a_t, b_t):
        return Tensor(out)

    def vjp(g, acc):
        if a_t is not None:
            _accumulate(acc, a_t, vjp_a(g, a_d, b_d))
        if b_t is not None:
            _accumulate(acc, b_t, vjp_b(g, a_d, b_d))

    return _node(out, (a_t, b_t), vjp)


def backward(loss):
    """Accumulate d(loss)/d(t) into t.grad for every reachable tensor
    with requires_grad. Repeated calls without resetting grads add up.
    """
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    if loss.data.size != 1:
        raise UsageError(f"backward expects a scalar loss, got shape {loss.shape}")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            node._vjp(g, grads)
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g


# -- layer operations ----------------------------------------------------


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Batched 2-D cross-correlation.

    x: (B, Cin, H, W); weight: (Cout, Cin, k, k); bias: (Cout,) or None.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-D, got {x.data.shape}")
    if weight.data.ndim != 4 or weight.data.shape[2] != weight.data.shape[3]:
        raise DimensionError(f"conv2d kernel must be (Cout,Cin,k,k), got {weight.data.shape}")
    batch, cin, h, w = x.data.shape
    cout, cin_k, k, _ = weight.data.shape
    if cin != cin_k:
        raise DimensionError(f"conv2d channel mismatch: input {cin}, kernel {cin_k}")
    if bias is not None and bias.data.shape != (cout,):
        raise DimensionError(f"conv2d bias must be ({cout},), got {bias.data.shape}")
    if k < 1 or stride < 1 or padding < 0:
        raise ConfigurationError("conv2d needs k >= 1, stride >= 1, padding >= 0")
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ConfigurationError(
            f"conv2d kernel {k} exceeds padded input {h}x{w} "
            f"(padding={padding})"
        )

    def im2col(arr):
        padded = np.pad(arr, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        win = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        # (B, Cin, Ho, Wo, k, k) -> (B*Ho*Wo, Cin*k*k)
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(batch * h_out * w_out, cin * k * k)

    wmat = weight.data.reshape(cout, -1)
    cols = im2col(x.data)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(
        out.reshape(batch, h_out, w_out, cout).transpose(0, 3, 1, 2)
    )
    if not _tracking(x, weight, bias):
        return Tensor(out)

    def vjp(g, acc):
        go = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        if weight.requires_grad:
            _accumulate(acc, weight, (go.T @ im2col(x.data)).reshape(weight.data.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(acc, bias, go.sum(axis=0))
        if x.requires_grad:
            dcols = (go @ wmat).reshape(batch, h_out, w_out, cin, k, k)
            dpad = np.zeros(
                (batch, cin, h + 2 * padding, w + 2 * padding), dtype=g.dtype
            )
            for ki in range(k):
                for kj in range(k):
                    dpad[:, :, ki:ki + stride * h_out:stride,
                         kj:kj + stride * w_out:stride] += \
                        dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            _accumulate(acc, x, dpad[:, :, padding:padding + h, padding:padding + w])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, vjp)


def max_pool2d(x, window=2):
    """Non-overlapping max pooling; gradient routes to the first max in
    row-major order within each window."""
    if x.data.ndim != 4:
        raise DimensionError(f"max_pool2d input must be 4-D, got {x.data.shape}")
    batch, ch, h, w = x.data.shape
    if window < 1:
        raise ConfigurationError("max_pool2d window must be >= 1")
    if h % window or w % window:
        raise ConfigurationError(
            f"max_pool2d needs extents divisible by {window}, got {h}x{w}"
        )
    ho, wo = h // window, w // window
    blocks = (
        x.data.reshape(batch, ch, ho, window, wo, window)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(batch, ch, ho, wo, window * window)
    )
    flat_idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, flat_idx[..., None], axis=-1)[..., 0]
    if not _tracking(x):
        return Tensor(out)

    def vjp(g, acc):
        sel = np.arange(window * window) == flat_idx[..., None]
        dblocks = g[..., None] * sel
        dx = (
            dblocks.reshape(batch, ch, ho, wo, window, window)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(batch, ch, h, w)
        )
        _accumulate(acc, x, dx)

    return _node(out, (x,), vjp)


def upsample2x(x):
    """Nearest-neighbor 2x upsampling; gradient sums the four replicas."""
    if x.data.ndim != 4:
        raise DimensionError(f"upsample2x input must be 4-D, got {x.data.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    if not _tracking(x):
        return Tensor(out)
    batch, ch, h, w = x.data.shape

    def vjp(g, acc):
        _accumulate(acc, x, g.reshape(batch, ch, h, 2, w, 2).sum(axis=(3, 5)))

    return _node(out, (x,), vjp)


def concat_channels(*tensors):
    """Concatenate along the channel axis; accepts zero-channel operands."""
    if not tensors:
        raise UsageError("concat_channels needs at least one tensor")
    shapes = [t.data.shape for t in tensors]
    for s in shapes:
        if len(s) != 4:
            raise DimensionError(f"concat_channels expects 4-D tensors, got {s}")
        if (s[0], s[2], s[3]) != (shapes[0][0], shapes[0][2], shapes[0][3]):
            raise DimensionError(f"concat_channels spatial/batch mismatch: {shapes}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    if not _tracking(*tensors):
        return Tensor(out)
    splits = np.cumsum([s[1] for s in shapes])[:-1]

    def vjp(g, acc):
        for t, piece in zip(tensors, np.split(g, splits, axis=1)):
            _accumulate(acc, t, piece)

    return _node(out, tensors, vjp)


def relu(x):
    out = np.maximum(x.data, 0)
    if not _tracking(x):
        return Tensor(out)

    def vjp(g, acc):
        _accumulate(acc, x, g * (x.data > 0))

    return _node(out, (x,), vjp)


def sigmoid(x):
    out = expit(x.data)
    if not _tracking(x):
        return Tensor(out)

    def vjp(g, acc):
        _accumulate(acc, x, g * out * (1.0 - out))

    return _node(out, (x,), vjp)


def activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise UsageError(f"unknown activation {kind!r}")


def global_avg_pool(x):
    """(B, C, H, W) -> (B, C) spatial mean."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool input must be 4-D, got {x.data.shape}")
    _, _, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))
    if not _tracking(x):
        return Tensor(out)

    def vjp(g, acc):
        _accumulate(acc, x, np.broadcast_to(
            g[:, :, None, None] / (h * w), x.data.shape))

    return _node(out, (x,), vjp)


def linear(x, weight, bias=None):
    """(B, F) x (G, F)^T + (G,) -> (B, G)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(
            f"linear expects 2-D input/weight, got {x.data.shape}, {weight.data.shape}"
        )
    if x.data.shape[1] != weight.data.shape[1]:
        raise DimensionError(
            f"linear feature mismatch: input {x.data.shape[1]}, weight {weight.data.shape[1]}"
        )
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.data.shape != (weight.data.shape[0],):
            raise DimensionError(
                f"linear bias must be ({weight.data.shape[0]},), got {bias.data.shape}"
            )
        out = out + bias.data
    if not _tracking(x, weight, bias):
        return Tensor(out)

    def vjp(g, acc):
        if x.requires_grad:
            _accumulate(acc, x, g @ weight.data)
        if weight.requires_grad:
            _accumulate(acc, weight, g.T @ x.data)
        if bias is not None and bias.requires_grad:
            _accumulate(acc, bias, g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, vjp)


def channel_scale(x, gate):
    """Scale (B, C, H, W) features by per-channel gates (B, C)."""
    if x.data.ndim != 4 or gate.data.ndim != 2:
        raise DimensionError("channel_scale expects (B,C,H,W) and (B,C)")
    if x.data.shape[:2] != gate.data.shape:
        raise DimensionError(
            f"channel_scale mismatch: {x.data.shape} vs gates {gate.data.shape}"
        )
    out = x.data * gate.data[:, :, None, None]
    if not _tracking(x, gate):
        return Tensor(out)

    def vjp(g, acc):
        if x.requires_grad:
            _accumulate(acc, x, g * gate.data[:, :, None, None])
        if gate.requires_grad:
            _accumulate(acc, gate, (g * x.data).sum(axis=(2, 3)))

    return _node(out, (x, gate), vjp)


class BatchNormState:
    """Running statistics owned by a batch-norm layer."""

    __slots__ = ("running_mean", "running_var")

    def __init__(self, channels, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)


def batch_norm2d(x, gamma, beta, state, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over (batch, height, width).

    Training mode normalizes by biased batch statistics and updates the
    running statistics in place; eval mode applies the stored statistics
    as a fixed affine map. Differentiable in both modes.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batch_norm2d input must be 4-D, got {x.data.shape}")
    ch = x.data.shape[1]
    if gamma.data.shape != (ch,) or beta.data.shape != (ch,):
        raise DimensionError(
            f"batch_norm2d needs per-channel gamma/beta of shape ({ch},)"
        )
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.running_mean = ((1.0 - momentum) * state.running_mean
                              + momentum * mu).astype(state.running_mean.dtype)
        state.running_var = ((1.0 - momentum) * state.running_var
                             + momentum * var).astype(state.running_var.dtype)
    else:
        mu = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)
    std = np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) / std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    if not _tracking(x, gamma, beta):
        return Tensor(out)

    def vjp(g, acc):
        if gamma.requires_grad:
            _accumulate(acc, gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accumulate(acc, beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gscaled = g * gamma.data[None, :, None, None]
            if training:
                m1 = gscaled.mean(axis=(0, 2, 3), keepdims=True)
                m2 = (gscaled * xhat).mean(axis=(0, 2, 3), keepdims=True)
                dx = (gscaled - m1 - xhat * m2) / std[None, :, None, None]
            else:
                dx = gscaled / std[None, :, None, None]
            _accumulate(acc, x, dx)

    return _node(out, (x, gamma, beta), vjp)


# -- verification --------------------------------------------------------


def gradcheck(op, inputs, step=1e-6, max_coords=None, seed=0):
    """Compare reverse-mode gradients against central finite differences.

    `op` maps the given tensors to a tensor; non-scalar outputs are
    contracted with a fixed random cotangent so a scalar loss exists.
    Inputs must be wide precision (float64); every input with
    requires_grad is probed, all coordinates by default or a seeded
    random subset of `max_coords` per input. Returns the worst relative
    error, where the error is normalized by max(1, |analytic|, |numeric|).
    """
    tensors = list(inputs)
    for t in tensors:
        if t.requires_grad and t.data.dtype != np.float64:
            raise UsageError("gradcheck requires wide-precision (float64) inputs")
        # coordinate perturbation below mutates a flat view of the data
        t.data = np.ascontiguousarray(t.data)
    rng = np.random.default_rng(seed)

    out = op(*tensors)
    cotangent = None
    if out.data.size != 1:
        cotangent = rng.standard_normal(out.data.shape)

    def loss_of(t_out):
        if cotangent is None:
            return t_out
        return (t_out * Tensor(cotangent, dtype=np.float64)).sum()

    for t in tensors:
        t.grad = None
    backward(loss_of(out))
    analytic = [
        t.grad if t.grad is not None else np.zeros_like(t.data)
        for t in tensors if t.requires_grad
    ]

    def loss_value():
        with no_grad():
            val = loss_of(op(*tensors))
        return float(val.data)

    worst = 0.0
    checked = [t for t in tensors if t.requires_grad]
    for t, a in zip(checked, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        a_flat = a.reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus = loss_value()
            flat[idx] = orig - step
            f_minus = loss_value()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            scale = max(1.0, abs(a_flat[idx]), abs(numeric))
            worst = max(worst, abs(a_flat[idx] - numeric) / scale)
    return worst
