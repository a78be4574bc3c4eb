"""Command-line entry points.

Five subcommands: train, track, eval, inspect and cost.  Every output
file is written atomically (temp file, then rename), so an interrupted
run never leaves a half-written artifact behind.
"""

import argparse
import os
import sys

import numpy as np

from . import backbone as bb
from .attention import attention_weights_dump
from .boxes import to_corners, to_xywh
from .checkpoint import (
    atomic_write,
    load_checkpoint,
    load_state,
    save_checkpoint,
    state_dict,
)
from .config import (
    RunConfig,
    format_run_config,
    load_run_config,
    parse_run_config,
)
from .data import load_sequence, precision, success_auc
from .errors import ConfigError, ParseError, ShapeError, UsageError
from .tracker import Tracker, crop_search, crop_template
from .train import (
    default_training_data,
    train_stage1,
    train_stage2_spm,
    write_loss_curve,
)

_ERRORS = (ConfigError, ParseError, ShapeError, UsageError, OSError)


def _curve_path(out, stage):
    base, _ = os.path.splitext(out)
    return f"{base}.stage{stage}.csv"


def cmd_train(args):
    cfg = load_run_config(args.config)
    tcfg = cfg.to_train_config()
    data = default_training_data(cfg.seed)
    model = cfg.build_model()
    crop = cfg.crop_params()
    print(f"stage 1: {tcfg.stage1_iters} iterations")
    curve1 = train_stage1(model, data, tcfg, crop_params=crop)
    print(f"  loss {curve1[0][1]:.4f} -> {curve1[-1][1]:.4f}")
    print(f"stage 2: {tcfg.stage2_iters} iterations")
    curve2 = train_stage2_spm(model, data, tcfg, crop_params=crop)
    print(f"  loss {curve2[0][1]:.4f} -> {curve2[-1][1]:.4f}")
    write_loss_curve(_curve_path(args.out, 1), curve1)
    write_loss_curve(_curve_path(args.out, 2), curve2)
    save_checkpoint(args.out, state_dict(model),
                    config_text=format_run_config(cfg))
    print(f"wrote {args.out}")
    return 0


def _load_model(checkpoint_path, config_path=None):
    arrays, text = load_checkpoint(checkpoint_path)
    if config_path is not None:
        cfg = load_run_config(config_path)
    elif text is not None:
        cfg = parse_run_config(text)
    else:
        cfg = RunConfig()
    model = cfg.build_model()
    load_state(model, arrays)
    return model, cfg


def cmd_track(args):
    model, cfg = _load_model(args.checkpoint, args.config)
    seq = load_sequence(args.sequence)
    tracker = Tracker(
        model,
        params=cfg.crop_params(),
        update_interval=cfg.update_interval,
        score_threshold=cfg.score_threshold,
        use_template_cache=args.cache,
    )
    boxes, scores = tracker.track(seq)
    lines = []
    for i, (box, score) in enumerate(zip(boxes, scores), start=1):
        x, y, w, h = to_xywh(box)
        lines.append(f"{i},{x:.6f},{y:.6f},{w:.6f},{h:.6f},{score:.6f}")
    atomic_write(args.out, "\n".join(lines) + "\n")
    print(f"tracked {len(boxes)} frames of {seq.name} -> {args.out}")
    return 0


def _read_box_lines(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise ParseError(
                    f"expected frame,x,y,w,h,score, got {line!r}", line=lineno
                )
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ParseError(
                    f"non-numeric field in {line!r}", line=lineno
                ) from None
    return rows


def cmd_eval(args):
    seq = load_sequence(args.sequence)
    rows = _read_box_lines(args.boxes)
    if len(rows) != len(seq.frames):
        raise ParseError(
            f"{args.boxes} has {len(rows)} rows for {len(seq.frames)} frames"
        )
    pred = [to_corners(r[1:5]) for r in rows]
    gt = [seq.gt_corners(i) for i in range(len(seq.frames))]
    auc = success_auc(pred, gt)
    prec = precision(pred, gt)
    atomic_write(
        args.out,
        f"sequence,auc,precision\n{seq.name},{auc:.6f},{prec:.6f}\n",
    )
    print(f"{seq.name}: auc {auc:.4f}, precision {prec:.4f} -> {args.out}")
    return 0


def cmd_inspect(args):
    model, cfg = _load_model(args.checkpoint, args.config)
    seq = load_sequence(args.sequence)
    n = len(seq.frames)
    if not 1 <= args.frame <= n:
        raise UsageError(f"frame must lie in [1, {n}], got {args.frame}")
    idx = args.frame - 1
    prev = max(idx - 1, 0)
    mc = model.config
    crop = cfg.crop_params()
    first = crop_template(seq.frames[0], seq.gt_corners(0),
                          crop.template_factor, mc.template_size[0])
    online = crop_template(seq.frames[prev], seq.gt_corners(prev),
                           crop.template_factor, mc.template_size[0])
    tmpl = np.stack([first] + [online] * (mc.templates - 1))
    patch, _ = crop_search(seq.frames[idx], seq.gt_corners(prev), crop,
                           mc.search_size[0])
    tokens, layout = model.backbone.final_block_tokens(tmpl[None], patch[None])
    maps = attention_weights_dump(model.backbone.stage3.block[-1], tokens,
                                  layout)
    os.makedirs(args.out, exist_ok=True)
    for name, arr in maps.items():
        lines = [",".join(f"{v:.8g}" for v in row) for row in arr]
        atomic_write(os.path.join(args.out, f"{name}.csv"),
                     "\n".join(lines) + "\n")
        print(f"wrote {name}.csv  [{arr.shape[0]} x {arr.shape[1]}]")
    return 0


def cmd_cost(args):
    if args.config is not None:
        cfg = load_run_config(args.config)
        bcfg = cfg.backbone_config()
        label = cfg.preset
    else:
        bcfg = bb.preset(args.preset, templates=args.templates,
                         mode=args.attention)
        label = args.preset
    rep = bb.count_params_flops(bcfg)
    print(f"preset {label}  attention {bcfg.mode}  templates {bcfg.templates}")
    print(f"{'stage':<8}{'params':>14}{'flops':>18}")
    for row in rep["stages"]:
        print(f"{row['name']:<8}{row['params']:>14,}{row['flops']:>18,}")
    print(f"{'total':<8}{rep['params']:>14,}{rep['flops']:>18,}")
    print(f"total {rep['params'] / 1e6:.2f} M params, "
          f"{rep['flops'] / 1e9:.2f} G flops per forward")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="mixtrack",
        description="train, run and inspect the tracker",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run both training stages")
    p.add_argument("--config", required=True, help="run config file")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="track one sequence directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", required=True, help="frame directory")
    p.add_argument("--out", required=True, help="boxes csv to write")
    p.add_argument("--config", default=None,
                   help="override the checkpoint's embedded config")
    p.add_argument("--cache", action="store_true",
                   help="reuse template features between frames")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score a boxes csv against ground truth")
    p.add_argument("--boxes", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", required=True, help="metrics csv to write")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="dump final-block attention maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--frame", type=int, required=True,
                   help="1-based frame number")
    p.add_argument("--out", required=True, help="directory for the csv maps")
    p.add_argument("--config", default=None,
                   help="override the checkpoint's embedded config")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("cost", help="print the parameter and flop table")
    p.add_argument("--config", default=None)
    p.add_argument("--preset", default="mixformer")
    p.add_argument("--templates", type=int, default=2)
    p.add_argument("--attention", default="asymmetric",
                   choices=("full", "asymmetric"))
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
