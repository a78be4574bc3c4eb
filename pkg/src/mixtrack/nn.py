"""Parameter containers and the layers the tracker is assembled from.

Modules hold their parameters as ``Tensor`` attributes (plus plain-ndarray
buffers) and expose them under stable hierarchical names such as
``stage2.block3.attn.wq`` for checkpointing.  Name order follows attribute
definition order, so a given configuration always enumerates identically.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    """Normal draw clipped to two standard deviations."""
    v = rng.normal(0.0, std, size=shape)
    return np.clip(v, -2.0 * std, 2.0 * std).astype(dtype)


def he_normal(rng, shape, fan_in, dtype=np.float32):
    v = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return v.astype(dtype)


class Module:
    """Base class: walks attributes to enumerate parameters and buffers."""

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{name}{i}", item

    def named_params(self, prefix=""):
        out = {}
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out[full] = value
            else:
                out.update(value.named_params(prefix=f"{full}."))
        return out

    def named_buffers(self, prefix=""):
        out = {}
        buffers = getattr(self, "_buffers", None)
        if buffers:
            for name, arr in buffers.items():
                out[f"{prefix}{name}"] = arr
        for name, value in self._children():
            if isinstance(value, Module):
                out.update(value.named_buffers(prefix=f"{prefix}{name}."))
        return out

    def register_buffer(self, name, arr):
        if not hasattr(self, "_buffers"):
            self._buffers = {}
        self._buffers[name] = arr

    def set_requires_grad(self, flag):
        for p in self.named_params().values():
            p.requires_grad = flag

    def zero_grad(self):
        for p in self.named_params().values():
            p.zero_grad()

    def param_count(self):
        return sum(p.size for p in self.named_params().values())


class Linear(Module):
    """Affine layer; weight stored as [in, out]."""

    def __init__(self, d_in, d_out, rng, dtype=np.float32, zero_init=False):
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=dtype)
        else:
            w = trunc_normal(rng, (d_in, d_out), dtype=dtype)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias, axis=-1, eps=self.eps)


class DepthwiseConv(Module):
    """Per-channel 3x3 projection, initialized near identity.

    The center tap starts at one so the projection begins as (sub)sampling and
    learns local mixing from there; there is no norm layer between this and
    the linear projection that follows it.
    """

    def __init__(self, dim, rng, kernel=3, stride=1, pad=1, dtype=np.float32):
        k = trunc_normal(rng, (dim, kernel, kernel), dtype=dtype)
        k[:, kernel // 2, kernel // 2] += 1.0
        self.kernel = Tensor(k, requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.pad = pad

    def __call__(self, x):
        return ad.depthwise_conv2d(
            x, self.kernel, self.bias, stride=self.stride, pad=self.pad
        )


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, stride, pad, rng, dtype=np.float32):
        fan_in = c_in * kernel * kernel
        self.w = Tensor(
            he_normal(rng, (c_out, c_in, kernel, kernel), fan_in, dtype=dtype),
            requires_grad=True,
        )
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.pad = pad

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class BatchNormFrozen(Module):
    """Batch norm running in inference form: statistics are fixed buffers."""

    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.register_buffer("mean", np.zeros(dim, dtype=dtype))
        self.register_buffer("var", np.ones(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x):
        return ad.batch_norm_frozen(
            x, self._buffers["mean"], self._buffers["var"],
            self.gain, self.bias, eps=self.eps,
        )


class Mlp(Module):
    """Two-layer feed-forward block with GELU, expansion ratio R."""

    def __init__(self, dim, ratio, rng, dtype=np.float32):
        self.fc1 = Linear(dim, dim * ratio, rng, dtype=dtype)
        self.fc2 = Linear(dim * ratio, dim, rng, dtype=dtype)

    def __call__(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))
