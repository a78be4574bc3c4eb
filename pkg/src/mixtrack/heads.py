"""Localization heads over the search feature map.

The corner head turns the map into two probability fields (top-left and
bottom-right) and reads each corner off with a soft argmax, so the box is a
differentiable expectation over positions.  The query head instead owns one
learnable token that rides through the final backbone stage and regresses
center form directly through a small FFN.

Coordinates are normalized to [0, 1] over the search crop; position (i, j)
of an h x w map sits at (j / (w-1), i / (h-1)).
"""

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor, as_tensor
from .errors import ConfigError, ShapeError


def _axis_coords(n, dtype):
    # single-cell maps collapse to coordinate 0
    span = max(n - 1, 1)
    return (np.arange(n, dtype=dtype) / span).astype(dtype)


def _soft_argmax_batched(maps):
    """[B, h, w] score maps -> (x [B], y [B]) expectation coordinates."""
    b, h, w = maps.shape
    p = ad.softmax(ad.reshape(maps, (b, h * w)), axis=-1)
    p = ad.reshape(p, (b, h, w))
    xs = _axis_coords(w, maps.dtype)
    ys = _axis_coords(h, maps.dtype)
    x = ad.sum_(ad.mul(p, xs.reshape(1, 1, w)), axis=(1, 2))
    y = ad.sum_(ad.mul(p, ys.reshape(1, h, 1)), axis=(1, 2))
    return x, y


def soft_argmax(score_map):
    """Expectation coordinates of a single [h, w] score map.

    Softmax over all positions, then x = sum p(i,j) * j/(w-1) and
    y = sum p(i,j) * i/(h-1).
    """
    m = as_tensor(score_map)
    if m.ndim != 2:
        raise ShapeError(f"score map must be [h, w], got {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ConfigError(f"score map has no cells: {m.shape}")
    x, y = _soft_argmax_batched(ad.reshape(m, (1,) + m.shape))
    return ad.reshape(x, ()), ad.reshape(y, ())


def _edge_pad1(x):
    """Replicate-pad a [B, C, h, w] map by one cell on every side."""
    x = ad.concat([x[:, :, :, :1], x, x[:, :, :, -1:]], axis=3)
    return ad.concat([x[:, :, :1, :], x, x[:, :, -1:, :]], axis=2)


class ConvBNRelu(nn.Module):
    # replicate padding so a featureless (constant) map stays constant and
    # scores every position equally
    def __init__(self, c_in, c_out, rng):
        self.conv = nn.Conv2d(c_in, c_out, 3, 1, 0, rng)
        self.bn = nn.BatchNormFrozen(c_out)

    def __call__(self, x):
        return ad.relu(self.bn(self.conv(_edge_pad1(x))))


def _corner_stack(dim, rng):
    chans = [dim, dim // 2, dim // 4, dim // 8, dim // 16]
    stack = [ConvBNRelu(chans[i], chans[i + 1], rng) for i in range(4)]
    stack.append(nn.Conv2d(dim // 16, 1, 1, 1, 0, rng))
    return stack


class CornerHead(nn.Module):
    """Two convolution stacks scoring top-left and bottom-right corners."""

    def __init__(self, dim, rng):
        if dim % 16 != 0 or dim < 16:
            raise ConfigError(f"corner head needs dim divisible by 16, got {dim}")
        self.dim = dim
        self.tl = _corner_stack(dim, rng)
        self.br = _corner_stack(dim, rng)

    def _score_map(self, stack, x):
        for layer in stack:
            x = layer(x)
        b, _, h, w = x.shape
        return ad.reshape(x, (b, h, w))

    def __call__(self, feat):
        """[B, dim, h, w] -> [B, 4] corner boxes in [0, 1] coordinates.

        If the two expected corners come out inverted on an axis they are
        swapped so x0 <= x1 and y0 <= y1 always hold.
        """
        if feat.ndim != 4 or feat.shape[1] != self.dim:
            raise ShapeError(
                f"expected [B, {self.dim}, h, w] features, got {feat.shape}"
            )
        ax, ay = _soft_argmax_batched(self._score_map(self.tl, feat))
        bx, by = _soft_argmax_batched(self._score_map(self.br, feat))
        x0, x1 = ad.minimum(ax, bx), ad.maximum(ax, bx)
        y0, y1 = ad.minimum(ay, by), ad.maximum(ay, by)
        cols = [ad.reshape(v, (-1, 1)) for v in (x0, y0, x1, y1)]
        return ad.concat(cols, axis=1)

    def heatmaps(self, feat):
        """Softmaxed corner probability fields, for inspection."""
        out = []
        for stack in (self.tl, self.br):
            m = self._score_map(stack, feat)
            b, h, w = m.shape
            p = ad.softmax(ad.reshape(m, (b, h * w)), axis=-1)
            out.append(ad.reshape(p, (b, h, w)).numpy())
        return tuple(out)


class QueryHead(nn.Module):
    """Learnable regression token plus a 3-layer FFN box decoder."""

    def __init__(self, dim, rng):
        self.dim = dim
        self.token = Tensor(nn.trunc_normal(rng, (dim,)), requires_grad=True)
        self.fc1 = nn.Linear(dim, dim, rng)
        self.fc2 = nn.Linear(dim, dim, rng)
        self.out = nn.Linear(dim, 4, rng)

    def __call__(self, token_out):
        """[B, dim] regression-token features -> [B, 4] corner boxes.

        The FFN emits sigmoid center form (cx, cy, w, h); with the final
        layer at zero every box is centered with half extent.
        """
        if token_out.ndim != 2 or token_out.shape[1] != self.dim:
            raise ShapeError(
                f"expected [B, {self.dim}] token features, got {token_out.shape}"
            )
        h = ad.gelu(self.fc1(token_out))
        h = ad.gelu(self.fc2(h))
        c = ad.sigmoid(self.out(h))
        cx, cy, w, hh = c[:, 0], c[:, 1], c[:, 2], c[:, 3]
        x0 = ad.sub(cx, ad.mul(w, 0.5))
        y0 = ad.sub(cy, ad.mul(hh, 0.5))
        x1 = ad.add(cx, ad.mul(w, 0.5))
        y1 = ad.add(cy, ad.mul(hh, 0.5))
        cols = [ad.reshape(v, (-1, 1)) for v in (x0, y0, x1, y1)]
        return ad.concat(cols, axis=1)
