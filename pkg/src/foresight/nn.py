"""Layer and parameter-container infrastructure on top of the autodiff core.

A Module discovers its parameters, submodules, and batch-norm running
statistics by walking its attributes, so layer classes stay declarative.
Attribute order fixes the naming and serialization order, which keeps
state dicts deterministic for a given architecture.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .errors import ConfigurationError, DataError, DimensionError


class Module:
    """Base class for anything with trainable state."""

    def __init__(self):
        self.training = True

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for name, obj in vars(self).items():
            if isinstance(obj, (Module, Tensor, BatchNormState)):
                yield name, obj
            elif isinstance(obj, (list, tuple)):
                for i, item in enumerate(obj):
                    if isinstance(item, (Module, Tensor, BatchNormState)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        out = {}
        for name, obj in self._children():
            if isinstance(obj, Tensor):
                if obj.requires_grad:
                    out[prefix + name] = obj
            elif isinstance(obj, Module):
                out.update(obj.named_parameters(prefix + name + "."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def named_norm_states(self, prefix=""):
        out = {}
        for name, obj in self._children():
            if isinstance(obj, BatchNormState):
                out[prefix + name] = obj
            elif isinstance(obj, Module):
                out.update(obj.named_norm_states(prefix + name + "."))
        return out

    def train(self):
        self.training = True
        for _, obj in self._children():
            if isinstance(obj, Module):
                obj.train()
        return self

    def eval(self):
        self.training = False
        for _, obj in self._children():
            if isinstance(obj, Module):
                obj.eval()
        return self

    def state_dict(self):
        out = {}
        for name, t in self.named_parameters().items():
            out[name] = t.data.copy()
        for name, s in self.named_norm_states().items():
            out[name + ".running_mean"] = s.running_mean.copy()
            out[name + ".running_var"] = s.running_var.copy()
        return out

    def load_state_dict(self, state):
        params = self.named_parameters()
        states = self.named_norm_states()
        expected = set(params)
        for name in states:
            expected.add(name + ".running_mean")
            expected.add(name + ".running_var")
        got = set(state)
        if got != expected:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise DataError(
                f"state dict mismatch: missing {missing[:4]}, unexpected {extra[:4]}"
            )
        for name, t in params.items():
            arr = np.asarray(state[name])
            if arr.shape != t.data.shape:
                raise DataError(
                    f"parameter {name}: shape {arr.shape} != expected {t.data.shape}"
                )
            t.data = arr.astype(t.data.dtype, copy=True)
        for name, s in states.items():
            s.running_mean = np.asarray(
                state[name + ".running_mean"], dtype=s.running_mean.dtype
            ).copy()
            s.running_var = np.asarray(
                state[name + ".running_var"], dtype=s.running_var.dtype
            ).copy()

    def count_parameters(self):
        return sum(int(t.data.size) for t in self.named_parameters().values())


def _he_init(rng, shape, fan_in):
    # drawn in float64 so a seed defines the same weights at either precision
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return w.astype(ad.default_dtype())


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, bias=True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(
            _he_init(rng, (cout, cin, kernel, kernel), cin * kernel * kernel),
            requires_grad=True,
        )
        self.bias = (
            Tensor(np.zeros(cout, dtype=ad.default_dtype()), requires_grad=True)
            if bias else None
        )

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.bias,
                         stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=ad.default_dtype()),
                            requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=ad.default_dtype()),
                           requires_grad=True)
        self.state = BatchNormState(channels, dtype=ad.default_dtype())

    def forward(self, x):
        return ad.batch_norm2d(x, self.gamma, self.beta, self.state,
                               self.training, momentum=self.momentum,
                               eps=self.eps)


class Linear(Module):
    def __init__(self, fin, fout, rng, bias=True):
        super().__init__()
        self.weight = Tensor(_he_init(rng, (fout, fin), fin), requires_grad=True)
        self.bias = (
            Tensor(np.zeros(fout, dtype=ad.default_dtype()), requires_grad=True)
            if bias else None
        )

    def forward(self, x):
        return ad.linear(x, self.weight, self.bias)


class SqueezeExcite(Module):
    """Channel gating: global pool, bottleneck MLP, sigmoid scale."""

    def __init__(self, channels, rng, reduction=8):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)

    def forward(self, x):
        gate = ad.sigmoid(self.fc2(ad.relu(self.fc1(ad.global_avg_pool(x)))))
        return ad.channel_scale(x, gate)


def masked_mse(pred, ref, mask):
    """Mean squared error over valid pixels only.

    pred is a tensor; ref and mask are arrays of the same shape. mask is
    1 where the reference counts. Invalid reference values (NaN included)
    are zeroed before entering the graph, so the gradient at masked
    pixels is exactly zero.
    """
    ref = np.asarray(ref)
    mask = np.asarray(mask)
    if ref.shape != pred.data.shape or mask.shape != pred.data.shape:
        raise DimensionError(
            f"masked_mse shapes differ: pred {pred.data.shape}, "
            f"ref {ref.shape}, mask {mask.shape}"
        )
    valid = mask > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DataError("masked_mse: mask selects no pixels")
    dtype = pred.data.dtype
    refz = np.where(valid, ref, 0.0).astype(dtype)
    mask_f = valid.astype(dtype)
    diff = (pred - Tensor(refz, dtype=dtype)) * Tensor(mask_f, dtype=dtype)
    return (diff * diff).sum() * (1.0 / n_valid)
