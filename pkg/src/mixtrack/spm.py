"""Confidence estimation for a predicted box.

A learnable score token cross-attends ROI-pooled search features under the
predicted box, then the stage-3 tokens of the initial template, and a small
MLP squashes the result into (0, 1).  The module never sees online template
tokens, so updating them cannot move the score for a fixed search map.
"""

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor, as_tensor
from .errors import ConfigError, ShapeError


def _axis_weights(lo, hi, extent, grid):
    """Per-sample (index, weight) rows for one axis of the ROI grid.

    Sample points span [lo, hi] inclusive in normalized coordinates; cell
    index space runs 0..extent-1 with coordinate u mapping to u*(extent-1).
    A degenerate axis (hi <= lo) snaps every sample to the nearest cell.
    """
    span = extent - 1
    rows = np.zeros((grid, extent), dtype=np.float64)
    if hi <= lo:
        j = int(round(min(max(lo, 0.0), 1.0) * span))
        rows[:, j] = 1.0
        return rows
    for c in range(grid):
        if grid == 1:
            u = (lo + hi) / 2.0
        else:
            u = lo + (c * (hi - lo)) / (grid - 1)
        pos = u * span
        j0 = int(np.floor(pos))
        j0 = min(max(j0, 0), span)
        j1 = min(j0 + 1, span)
        frac = pos - j0
        rows[c, j0] += 1.0 - frac
        rows[c, j1] += frac
    return rows


def roi_tokens(search_feat, box, grid=4):
    """Bilinear ROI pooling of [C, h, w] features onto a grid*grid token set.

    ``box`` is plain-float corners in [0, 1] over the map (clamped here).
    Returns [grid*grid, C]; rows scan the grid in row-major order.  The box
    takes no gradient; features do.
    """
    feat = as_tensor(search_feat)
    if feat.ndim != 3:
        raise ShapeError(f"search features must be [C, h, w], got {feat.shape}")
    if grid < 1:
        raise ConfigError(f"roi grid must be >= 1, got {grid}")
    c, h, w = feat.shape
    x0, y0, x1, y1 = (min(max(float(v), 0.0), 1.0) for v in box)
    wx = _axis_weights(x0, x1, w, grid)
    wy = _axis_weights(y0, y1, h, grid)
    # [g, g, h, w] sample weights -> [g*g, h*w]
    weights = (wy[:, None, :, None] * wx[None, :, None, :]).reshape(
        grid * grid, h * w
    )
    flat = ad.reshape(ad.transpose(feat, (1, 2, 0)), (h * w, c))
    return ad.matmul(Tensor(weights.astype(feat.dtype)), flat)


class CrossAttnBlock(nn.Module):
    """Single-head cross-attention with residual and layer norm."""

    def __init__(self, dim, rng):
        self.dim = dim
        self.wq = nn.Linear(dim, dim, rng)
        self.wk = nn.Linear(dim, dim, rng)
        self.wv = nn.Linear(dim, dim, rng)
        self.wo = nn.Linear(dim, dim, rng)
        self.norm = nn.LayerNorm(dim)

    def __call__(self, queries, keys):
        """queries [Nq, dim] attend keys [Nk, dim]."""
        q = self.wq(queries)
        k = self.wk(keys)
        v = self.wv(keys)
        logits = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / float(np.sqrt(self.dim)))
        att = ad.matmul(ad.softmax(logits, axis=-1), v)
        return self.norm(ad.add(queries, self.wo(att)))


class ScorePredictor(nn.Module):
    """Score token, two cross-attention blocks, 3-layer MLP, sigmoid."""

    def __init__(self, dim, rng, grid=4):
        if grid < 1:
            raise ConfigError(f"roi grid must be >= 1, got {grid}")
        self.dim = dim
        self.grid = grid
        self.token = Tensor(nn.trunc_normal(rng, (1, dim)), requires_grad=True)
        self.block_a = CrossAttnBlock(dim, rng)
        self.block_b = CrossAttnBlock(dim, rng)
        self.fc1 = nn.Linear(dim, dim, rng)
        self.fc2 = nn.Linear(dim, dim, rng)
        self.out = nn.Linear(dim, 1, rng)

    def __call__(self, search_feat, box, template_tokens, per_template=None):
        """Scalar confidence for ``box`` over [C, h, w] search features.

        ``template_tokens`` holds final-stage template tokens [L, dim]; with
        ``per_template`` set, only the first that many rows (the initial
        template) are read, so later online-template rows cannot influence
        the result.
        """
        tokens = as_tensor(template_tokens)
        if tokens.ndim != 2 or tokens.shape[1] != self.dim:
            raise ShapeError(
                f"template tokens must be [L, {self.dim}], got {tokens.shape}"
            )
        if per_template is not None:
            tokens = tokens[:per_template]
        roi = roi_tokens(search_feat, box, self.grid)
        q = self.block_a(self.token, roi)
        q = self.block_b(q, tokens)
        hidden = ad.gelu(self.fc1(q))
        hidden = ad.gelu(self.fc2(hidden))
        return ad.reshape(ad.sigmoid(self.out(hidden)), ())


def predict_score(spm, search_feat, pred_box, initial_template_tokens):
    """Confidence of pred_box given search features and the initial
    template's final-stage tokens."""
    return spm(search_feat, pred_box, initial_template_tokens)
