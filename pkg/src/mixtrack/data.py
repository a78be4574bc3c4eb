"""Sequences for desk-scale training and evaluation.

Synthetic sequences render a checkerboard-textured rectangle wandering over
a noisy background with uniform-color distractor rectangles; ground truth is
exact by construction because the label is the rasterized draw rectangle.
On-disk sequences follow the common directory convention: zero-padded
numbered frames plus a ``groundtruth.txt`` of one ``x,y,w,h`` line per frame
(pixels, top-left origin).  Images are 8-bit RGB PPM so no codec is needed.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import boxes
from .errors import ConfigError, ParseError, ShapeError


@dataclass
class Sequence:
    """Ordered frames with per-frame ground-truth boxes (x, y, w, h)."""

    frames: list
    gt: list
    name: str = "seq"

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ConfigError(
                f"sequence needs at least 2 frames, got {len(self.frames)}"
            )
        if len(self.gt) not in (1, len(self.frames)):
            raise ConfigError(
                f"ground-truth count {len(self.gt)} matches neither frame "
                f"count {len(self.frames)} nor the single-line test form"
            )
        shape = self.frames[0].shape
        for i, f in enumerate(self.frames):
            if f.shape != shape or f.ndim != 3 or f.shape[2] != 3:
                raise ShapeError(f"frame {i} has shape {f.shape}, expected {shape}")

    @property
    def size(self):
        """(height, width) of the frames."""
        return self.frames[0].shape[:2]

    def gt_corners(self, i):
        return boxes.to_corners(self.gt[i])


@dataclass(frozen=True)
class SyntheticConfig:
    frame_size: tuple = (96, 128)
    object_size: tuple = (24, 24)
    frames: int = 40
    translation: float = 4.0
    scale_jitter: float = 0.0
    brightness: float = 0.0
    noise: float = 0.02
    distractors: int = 2

    def __post_init__(self):
        fh, fw = self.frame_size
        oh, ow = self.object_size
        if self.frames < 2:
            raise ConfigError(f"need at least 2 frames, got {self.frames}")
        if oh < 4 or ow < 4:
            raise ConfigError(f"object {oh}x{ow} too small to texture")
        if oh > fh or ow > fw:
            raise ConfigError(
                f"object {oh}x{ow} does not fit in frame {fh}x{fw}"
            )
        for name in ("translation", "scale_jitter", "brightness", "noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.distractors < 0:
            raise ConfigError("distractor count must be >= 0")


def _checkerboard(h, w, cell, c0, c1):
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    mask = ((ii // cell + jj // cell) % 2).astype(bool)
    out = np.empty((h, w, 3), dtype=np.float64)
    out[~mask] = c0
    out[mask] = c1
    return out


def _draw_rect(img, x0, y0, w, h, patch):
    fh, fw = img.shape[:2]
    x1, y1 = x0 + w, y0 + h
    sx0, sy0 = max(0, -x0), max(0, -y0)
    dx0, dy0 = max(0, x0), max(0, y0)
    dx1, dy1 = min(fw, x1), min(fh, y1)
    if dx1 <= dx0 or dy1 <= dy0:
        return
    img[dy0:dy1, dx0:dx1] = patch[sy0 : sy0 + (dy1 - dy0), sx0 : sx0 + (dx1 - dx0)]


def generate_synthetic(cfg, seed):
    """Render a deterministic sequence for the given seed.

    The target is drawn after every distractor, so its label pixels are never
    overwritten.  At least half the target area stays inside the frame.
    """
    rng = np.random.default_rng(np.random.SeedSequence([0x5EC, int(seed)]))
    fh, fw = cfg.frame_size
    base_h, base_w = float(cfg.object_size[0]), float(cfg.object_size[1])
    target_colors = rng.uniform(0.0, 1.0, (2, 3))
    # spread the two texture colors so the pattern stays visible
    target_colors[1] = 1.0 - target_colors[0]
    gradient = np.linspace(0.3, 0.5, fw)[None, :, None]
    distractor_colors = rng.uniform(0.2, 0.8, (cfg.distractors, 3))
    distractor_sizes = rng.integers(8, max(9, min(fh, fw) // 3), (cfg.distractors, 2))
    cx, cy = fw / 2.0, fh / 2.0
    oh, ow = base_h, base_w
    frames, gt = [], []
    for _ in range(cfg.frames):
        img = np.broadcast_to(gradient, (fh, fw, 3)).copy()
        if cfg.noise > 0:
            img += rng.normal(0.0, cfg.noise, (fh, fw, 3))
        for d in range(cfg.distractors):
            dh, dw = int(distractor_sizes[d, 0]), int(distractor_sizes[d, 1])
            dx = int(rng.integers(0, max(1, fw - dw)))
            dy = int(rng.integers(0, max(1, fh - dh)))
            _draw_rect(img, dx, dy, dw, dh, np.full((dh, dw, 3), distractor_colors[d]))
        if cfg.scale_jitter > 0:
            f = 1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter)
            oh = float(np.clip(oh * f, 8.0, fh))
            ow = float(np.clip(ow * f, 8.0, fw))
        if cfg.translation > 0:
            cx += rng.uniform(-cfg.translation, cfg.translation)
            cy += rng.uniform(-cfg.translation, cfg.translation)
        # keep at least three quarters of each axis visible
        cx = float(np.clip(cx, ow * 0.25, fw - ow * 0.25))
        cy = float(np.clip(cy, oh * 0.25, fh - oh * 0.25))
        ix0, iy0 = int(round(cx - ow / 2.0)), int(round(cy - oh / 2.0))
        iw, ih = max(4, int(round(ow))), max(4, int(round(oh)))
        patch = _checkerboard(ih, iw, 4, target_colors[0], target_colors[1])
        _draw_rect(img, ix0, iy0, iw, ih, patch)
        if cfg.brightness > 0:
            img *= 1.0 + rng.uniform(-cfg.brightness, cfg.brightness)
        frames.append((np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8))
        gt.append((float(ix0), float(iy0), float(iw), float(ih)))
    return Sequence(frames, gt, name=f"synthetic-{seed}")


# ---------------------------------------------------------------------------
# PPM image IO


def write_ppm(path, img):
    """Write [H, W, 3] uint8 as binary P6."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ShapeError(f"need [H, W, 3] uint8, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ParseError(f"{path}: not a binary PPM file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise ParseError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise ParseError(f"{path}: only maxval 255 supported, got {maxval}")
    need = w * h * 3
    raw = data[pos : pos + need]
    if len(raw) != need:
        raise ParseError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# sequence directories


def save_sequence(directory, seq):
    """Write frames as 8-digit numbered PPMs plus groundtruth.txt."""
    os.makedirs(directory, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        write_ppm(os.path.join(directory, f"{i + 1:08d}.ppm"), frame)
    with open(os.path.join(directory, "groundtruth.txt"), "w") as fh:
        for x, y, w, h in seq.gt:
            fh.write(f"{x},{y},{w},{h}\n")


def load_sequence(directory, name=None):
    """Read a sequence directory written by save_sequence (or compatible)."""
    gt_path = os.path.join(directory, "groundtruth.txt")
    if not os.path.exists(gt_path):
        raise ParseError(f"{directory}: no groundtruth.txt")
    gt = []
    with open(gt_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ParseError(
                    f"{gt_path}: expected x,y,w,h", line=lineno
                )
            try:
                gt.append(tuple(float(p) for p in parts))
            except ValueError:
                raise ParseError(
                    f"{gt_path}: non-numeric field in {line!r}", line=lineno
                ) from None
    if not gt:
        raise ParseError(f"{gt_path}: empty ground truth")
    names = sorted(
        f for f in os.listdir(directory) if f.endswith(".ppm")
    )
    if not names:
        raise ParseError(f"{directory}: no .ppm frames")
    width = len(os.path.splitext(names[0])[0])
    frames = []
    count = max(len(names), len(gt) if len(gt) > 1 else len(names))
    for i in range(1, count + 1):
        path = os.path.join(directory, f"{i:0{width}d}.ppm")
        if not os.path.exists(path):
            raise ParseError(f"{directory}: missing frame {i}")
        frames.append(read_ppm(path))
    if len(gt) not in (1, len(frames)):
        raise ParseError(
            f"{directory}: {len(gt)} ground-truth lines for {len(frames)} frames"
        )
    return Sequence(frames, gt, name=name or os.path.basename(os.path.normpath(directory)))


# ---------------------------------------------------------------------------
# metrics


def _check_lengths(pred, gt):
    if len(pred) != len(gt):
        raise ShapeError(
            f"prediction count {len(pred)} != ground-truth count {len(gt)}"
        )
    if not pred:
        raise ShapeError("empty box lists")


def success_auc(pred_boxes, gt_boxes):
    """Mean over IoU thresholds {0, 0.01, ..., 1.0} of the fraction of
    frames whose IoU strictly exceeds the threshold.  Boxes are corner form."""
    _check_lengths(pred_boxes, gt_boxes)
    ious = np.array(
        [boxes.iou(p, g) for p, g in zip(pred_boxes, gt_boxes)]
    )
    thresholds = np.arange(101) / 100.0
    return float((ious[None, :] > thresholds[:, None]).mean())


def precision(pred_boxes, gt_boxes, threshold_px=20.0):
    """Fraction of frames whose center distance is within the threshold."""
    _check_lengths(pred_boxes, gt_boxes)
    d = [boxes.center_distance(p, g) for p, g in zip(pred_boxes, gt_boxes)]
    return float(np.mean([dist <= threshold_px for dist in d]))
