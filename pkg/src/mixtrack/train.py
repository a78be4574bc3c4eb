"""Two-stage training loop on synthetic sequences.

Stage 1 fits the backbone and the localization head with the weighted
l1 + giou objective.  Stage 2 freezes those and fits the score head on
balanced positive and negative candidate boxes.  Every random draw is
keyed on (seed, stage, iteration), never on wall clock or worker id, so
identical configs produce identical parameters bit for bit.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .boxes import iou
from .errors import ConfigError, UsageError
from .losses import loc_loss, score_loss
from .tracker import CropParams, crop_search, crop_template

_BRIGHTNESS = 0.25
_STAGE1 = 1
_STAGE2 = 2
_TAG = 0x74726169


@dataclass(frozen=True)
class TrainConfig:
    """Shared settings for both stages.

    The learning rate starts at ``lr`` and is cut to a tenth at
    ``decay_fraction`` of the stage-1 iterations; stage 2 runs at the
    base rate throughout.
    """

    stage1_iters: int = 2000
    stage2_iters: int = 500
    batch_size: int = 4
    lr: float = 1e-4
    decay_fraction: float = 0.8
    weight_decay: float = 1e-4
    clip_norm: float = 0.1
    flip: bool = True
    brightness: bool = True
    max_gap: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("stage1_iters", "stage2_iters", "batch_size", "max_gap"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lr", "weight_decay", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0.0 < self.decay_fraction < 1.0:
            raise ConfigError(
                f"decay_fraction must lie in (0, 1), got {self.decay_fraction}"
            )

    def lr_at(self, iteration):
        """Stage-1 learning rate at a 0-based iteration index."""
        if iteration >= int(self.decay_fraction * self.stage1_iters):
            return self.lr * 0.1
        return self.lr


class AdamW:
    """Adam with decoupled weight decay and a global gradient-norm clip.

    Parameters are stepped in their dictionary order, which is fixed by
    module construction, so updates are deterministic.
    """

    def __init__(self, params, lr=1e-4, weight_decay=1e-4, clip_norm=0.1,
                 betas=(0.9, 0.999), eps=1e-8):
        self.items = list(params.items())
        self.lr = lr
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.items}
        self.v = {name: np.zeros_like(p.data) for name, p in self.items}

    def zero_grad(self):
        for _, p in self.items:
            p.grad = None

    def clip_grads(self):
        """Scale every gradient so the global norm is at most clip_norm.

        Returns the post-clip global norm; missing gradients count as zero.
        """
        total = 0.0
        for _, p in self.items:
            if p.grad is not None:
                total += float(np.sum(np.asarray(p.grad, dtype=np.float64) ** 2))
        norm = float(np.sqrt(total))
        if norm > self.clip_norm:
            scale = self.clip_norm / norm
            for _, p in self.items:
                if p.grad is not None:
                    p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
            return self.clip_norm
        return norm

    def step(self, lr=None):
        """Clip, then apply one update; returns the post-clip grad norm."""
        gnorm = self.clip_grads()
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.items:
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            v *= b2
            if g is not None:
                m += (1.0 - b1) * g
                v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)
        return gnorm


# ----------------------------------------------------------------- sampling

def _iteration_rng(seed, stage, iteration):
    """Generator keyed on (seed, stage, iteration)."""
    seq = np.random.SeedSequence([_TAG, int(seed), int(stage), int(iteration)])
    return np.random.default_rng(seq)


def _usable(box):
    return box[2] - box[0] > 0 and box[3] - box[1] > 0


def _sample_indices(sequence, rng, templates, max_gap):
    n = len(sequence.frames)
    t0 = int(rng.integers(0, n - 1))
    gap = int(rng.integers(1, max_gap + 1))
    search = min(n - 1, t0 + gap)
    extra = [int(rng.integers(0, n)) for _ in range(templates - 1)]
    return [t0] + extra, search


def _jitter_box(box, rng, translation, scale):
    """Shift and rescale a pixel box; the draws happen even at amount 0."""
    x0, y0, x1, y1 = box
    w, h = x1 - x0, y1 - y0
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    cx += rng.uniform(-1.0, 1.0) * translation * w
    cy += rng.uniform(-1.0, 1.0) * translation * h
    nw = w * float(np.exp(rng.uniform(-1.0, 1.0) * scale))
    nh = h * float(np.exp(rng.uniform(-1.0, 1.0) * scale))
    return (cx - nw / 2.0, cy - nh / 2.0, cx + nw / 2.0, cy + nh / 2.0)


def _flip_box(box):
    """Mirror a normalized box around the vertical midline."""
    x0, y0, x1, y1 = box
    return np.array([1.0 - x1, y0, 1.0 - x0, y1], dtype=np.float64)


def _build_pair(sequence, rng, template_size, search_size, templates=2,
                crop_params=CropParams(), flip=True, brightness=True,
                jitter_translation=0.3, jitter_scale=0.2, max_gap=8,
                max_tries=64):
    """make_training_pair plus the search-crop affine.

    The affine describes the patch before any flip, so callers that need
    exact geometry should pass flip=False.  Augmentation coins are drawn
    whether or not the corresponding toggle is on; disabling one never
    shifts the rest of the random stream.
    """
    for _ in range(max_tries):
        t_idx, si = _sample_indices(sequence, rng, templates, max_gap)
        if all(_usable(sequence.gt_corners(i)) for i in t_idx + [si]):
            break
    else:
        raise UsageError(
            f"no usable ground truth after {max_tries} draws in "
            f"{sequence.name!r}"
        )
    tmpl = np.stack([
        crop_template(sequence.frames[i], sequence.gt_corners(i),
                      crop_params.template_factor, template_size)
        for i in t_idx
    ])
    gt = sequence.gt_corners(si)
    ref = _jitter_box(gt, rng, jitter_translation, jitter_scale)
    patch, affine = crop_search(sequence.frames[si], ref, crop_params,
                                search_size)
    box = np.asarray(affine.box_to_patch(gt), dtype=np.float64)
    box /= float(search_size)

    do_flip = rng.random() < 0.5
    gain = 1.0 + rng.uniform(-1.0, 1.0) * _BRIGHTNESS
    if flip and do_flip:
        tmpl = np.ascontiguousarray(tmpl[..., ::-1])
        patch = np.ascontiguousarray(patch[..., ::-1])
        box = _flip_box(box)
    if brightness:
        tmpl = np.clip(tmpl * gain, 0.0, 1.0).astype(np.float32)
        patch = np.clip(patch * gain, 0.0, 1.0).astype(np.float32)
    return tmpl, patch, box, affine


def make_training_pair(sequence, rng, template_size, search_size, templates=2,
                       crop_params=CropParams(), flip=True, brightness=True,
                       jitter_translation=0.3, jitter_scale=0.2, max_gap=8):
    """Sample one training example from a sequence.

    Returns (templates [T, 3, ts, ts], search [3, ss, ss], box [4]); the
    box is the search-frame ground truth in normalized patch coordinates.
    Template crops are taken at their frames' ground truth, the search
    crop around a jittered copy of its ground truth so the target is not
    always centered.  Frames whose ground truth is degenerate are
    redrawn.
    """
    tmpl, patch, box, _ = _build_pair(
        sequence, rng, template_size, search_size, templates=templates,
        crop_params=crop_params, flip=flip, brightness=brightness,
        jitter_translation=jitter_translation, jitter_scale=jitter_scale,
        max_gap=max_gap,
    )
    return tmpl, patch, box


def _negative_box(box, rng, iou_max=0.3, tries=64):
    """A similar-size box overlapping the given one by less than iou_max."""
    w = min(float(box[2] - box[0]), 0.9)
    h = min(float(box[3] - box[1]), 0.9)
    for _ in range(tries):
        s = float(np.exp(rng.uniform(-0.3, 0.3)))
        nw, nh = min(w * s, 0.95), min(h * s, 0.95)
        cx = rng.uniform(nw / 2.0, 1.0 - nw / 2.0)
        cy = rng.uniform(nh / 2.0, 1.0 - nh / 2.0)
        cand = (cx - nw / 2.0, cy - nh / 2.0, cx + nw / 2.0, cy + nh / 2.0)
        if iou(cand, tuple(box)) < iou_max:
            return np.asarray(cand, dtype=np.float64)
    raise UsageError("could not place a negative box")


# ------------------------------------------------------------------ stages

def _pick(data, rng):
    return data[int(rng.integers(0, len(data)))]


def _stage1_batch(model, data, rng, cfg, crop_params):
    mc = model.config
    ts, ss = mc.template_size[0], mc.search_size[0]
    tmpl, search, gt = [], [], []
    for _ in range(cfg.batch_size):
        t, s, b = make_training_pair(
            _pick(data, rng), rng, ts, ss, templates=mc.templates,
            crop_params=crop_params, flip=cfg.flip,
            brightness=cfg.brightness, max_gap=cfg.max_gap,
        )
        tmpl.append(t)
        search.append(s)
        gt.append(b)
    return np.stack(tmpl), np.stack(search), np.stack(gt).astype(np.float32)


def train_stage1(model, data, cfg, crop_params=CropParams(), on_iteration=None):
    """Fit backbone and localization head in place; returns the loss curve.

    The curve holds one (iteration, loss, grad_norm) row per iteration,
    grad_norm being the post-clip global norm.  A non-finite loss aborts
    before the parameters are touched.
    """
    if not data:
        raise ConfigError("stage 1 needs at least one training sequence")
    params = {
        k: v for k, v in model.named_params().items()
        if not k.startswith("score.")
    }
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                clip_norm=cfg.clip_norm)
    curve = []
    for it in range(cfg.stage1_iters):
        rng = _iteration_rng(cfg.seed, _STAGE1, it)
        tmpl, search, gt = _stage1_batch(model, data, rng, cfg, crop_params)
        opt.zero_grad()
        with Tape() as tape:
            box, _, _ = model.forward_box(tmpl, search)
            loss = loc_loss(box, gt)
            value = loss.item()
            if not np.isfinite(value):
                raise UsageError(f"non-finite loss at iteration {it}")
            tape.backward(loss)
        gnorm = opt.step(lr=cfg.lr_at(it))
        curve.append((it, value, gnorm))
        if on_iteration is not None:
            on_iteration(it, value, gnorm)
    return curve


def _stage2_batch(model, data, rng, cfg, crop_params):
    """Backbone features plus one positive and one negative box each.

    The backbone runs without a tape and its outputs are detached, so
    stage-2 backprop can only ever reach the score head.
    """
    mc = model.config
    ts, ss = mc.template_size[0], mc.search_size[0]
    out = []
    for _ in range(cfg.batch_size):
        tmpl, patch, gt = make_training_pair(
            _pick(data, rng), rng, ts, ss, templates=mc.templates,
            crop_params=crop_params, flip=cfg.flip,
            brightness=cfg.brightness, max_gap=cfg.max_gap,
        )
        _, feat, tokens = model.forward_box(tmpl[None], patch[None])
        neg = _negative_box(gt, rng)
        out.append((Tensor(feat.data[0]), Tensor(tokens.data[0]), gt, neg))
    return out


def train_stage2_spm(model, data, cfg, crop_params=CropParams(),
                     flip_labels=False, on_iteration=None):
    """Fit the score head on frozen features; returns the loss curve.

    Only score-head parameters are stepped.  flip_labels inverts the
    supervision and exists for the sanity control that training on wrong
    labels drives accuracy below chance.
    """
    if not data:
        raise ConfigError("stage 2 needs at least one training sequence")
    params = {
        k: v for k, v in model.named_params().items()
        if k.startswith("score.")
    }
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                clip_norm=cfg.clip_norm)
    curve = []
    for it in range(cfg.stage2_iters):
        rng = _iteration_rng(cfg.seed, _STAGE2, it)
        batch = _stage2_batch(model, data, rng, cfg, crop_params)
        labels = []
        opt.zero_grad()
        with Tape() as tape:
            scores = []
            for feat, tokens, pos, neg in batch:
                scores.append(model.predict_score(feat, tuple(pos), tokens))
                scores.append(model.predict_score(feat, tuple(neg), tokens))
                labels += [1.0, 0.0]
            stacked = ad.concat([ad.reshape(s, (1,)) for s in scores], axis=0)
            y = np.asarray(labels, dtype=np.float32)
            if flip_labels:
                y = 1.0 - y
            loss = score_loss(stacked, y)
            value = loss.item()
            if not np.isfinite(value):
                raise UsageError(f"non-finite loss at iteration {it}")
            tape.backward(loss)
        gnorm = opt.step()
        curve.append((it, value, gnorm))
        if on_iteration is not None:
            on_iteration(it, value, gnorm)
    return curve


def spm_accuracy(model, data, cfg, samples=100, seed=None,
                 crop_params=CropParams()):
    """Balanced accuracy of the score head at threshold 0.5.

    Draws one positive and one negative candidate per sample from fresh
    crops, so pass held-out sequences for an honest number.
    """
    seed = cfg.seed if seed is None else seed
    correct = 0
    for i in range(samples):
        rng = _iteration_rng(seed, 3, i)
        mc = model.config
        tmpl, patch, gt = make_training_pair(
            _pick(data, rng), rng, mc.template_size[0], mc.search_size[0],
            templates=mc.templates, crop_params=crop_params,
            flip=False, brightness=False, max_gap=cfg.max_gap,
        )
        _, feat, tokens = model.forward_box(tmpl[None], patch[None])
        neg = _negative_box(gt, rng)
        feat0, tok0 = Tensor(feat.data[0]), Tensor(tokens.data[0])
        pos_score = model.predict_score(feat0, tuple(gt), tok0).item()
        neg_score = model.predict_score(feat0, tuple(neg), tok0).item()
        correct += int(pos_score >= 0.5) + int(neg_score < 0.5)
    return correct / (2.0 * samples)


def default_training_data(seed, sequences=8, frames=40):
    """A deterministic spread of synthetic sequences for the two stages.

    Motion, clutter and jitter vary across the set so the model sees both
    easy and busy scenes.
    """
    from .data import SyntheticConfig, generate_synthetic

    data = []
    for i in range(sequences):
        cfg = SyntheticConfig(
            frames=frames,
            translation=2.0 + (i % 4),
            distractors=i % 3,
            scale_jitter=0.02 * (i % 2),
        )
        data.append(generate_synthetic(cfg, seed=1000 * seed + i))
    return data


# ------------------------------------------------------------------- curves

def smoothed_endpoints(curve, window=101):
    """Mean loss over the first and last window rows: (head, tail)."""
    if not curve:
        raise UsageError("empty loss curve")
    losses = [row[1] for row in curve]
    w = min(window, len(losses))
    return float(np.mean(losses[:w])), float(np.mean(losses[-w:]))


def write_loss_curve(path, curve):
    """Write iter,loss,grad_norm CSV rows atomically."""
    lines = ["iter,loss,grad_norm"]
    for it, loss, gnorm in curve:
        lines.append(f"{it},{loss:.8g},{gnorm:.8g}")
    blob = "\n".join(lines) + "\n"
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(blob)
    os.replace(tmp, path)
