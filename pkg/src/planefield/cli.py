"""Command-line entry point: ``planefield synth | train | render | eval``.

Failures print one JSON line ``{"error": ..., "message": ...}`` on stderr and
exit with status 1; argument errors print usage and exit with status 2.
"""

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from ._validation import ContractViolation
from .data import SynthSpec, jittered_blobs, load_dataset, save_dataset, synth_scene
from .estimator import PlaneFieldEstimator
from .metrics import evaluate
from .trainer import (TrainConfig, Trainer, load_checkpoint, read_config_file,
                      write_config_file)

logger = logging.getLogger("planefield")

RESOLVED_CONFIG = "config.resolved.txt"


def _resolution(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return w, h


def build_parser():
    p = argparse.ArgumentParser(prog="planefield", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth", help="write a synthetic moving-blob capture")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--res", type=_resolution, default=(32, 32), metavar="WxH")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-tool", action="store_true", help="omit the occluding tool bar")

    t = sub.add_parser("train", help="fit a scene model to a capture")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--config", type=Path, help="key = value file; see config.resolved.txt")
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--preset", choices=("9k", "32k"))

    r = sub.add_parser("render", help="render one frame from a checkpoint")
    r.add_argument("--ckpt", required=True, type=Path)
    r.add_argument("--frame", type=int, default=0)
    r.add_argument("--out", required=True, type=Path)
    r.add_argument("--time", type=float, help="render at this time in [-1, 1] instead")

    e = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint against a capture")
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--out", required=True, type=Path)
    e.add_argument("--full", action="store_true", help="score every pixel, not only tissue")
    return p


def resolve_config(config_file=None, preset=None, iters=None, seed=None):
    """Built-in defaults < config file < flags."""
    values = read_config_file(config_file) if config_file is not None else {}
    if preset is not None:
        values["iters"] = TrainConfig.preset(preset).iters
    if iters is not None:
        values["iters"] = iters
    if seed is not None:
        values["seed"] = seed
    if "lr_warmup_iters" not in values:
        values["lr_warmup_iters"] = 512 if "iters" not in values else None
    return TrainConfig.from_dict(values)


def cmd_synth(args):
    if args.frames < 1:
        raise ContractViolation("--frames must be at least 1")
    w, h = args.res
    spec = SynthSpec(width=w, height=h, frames=args.frames, focal=float(w),
                     blobs=jittered_blobs(np.random.default_rng(args.seed)), tool=not args.no_tool)
    dataset, _ = synth_scene(spec)
    save_dataset(dataset, args.out)
    return {"frames": dataset.n_frames, "out": str(args.out)}


def cmd_train(args):
    config = resolve_config(args.config, args.preset, args.iters, args.seed)
    dataset = load_dataset(args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    write_config_file(config, args.out / RESOLVED_CONFIG)
    trainer = Trainer(config, dataset, cache_dir=args.out / "cache")

    def progress(m):
        if m["iter"] % 100 == 0:
            logger.info("iter %d total %.6f color %.6f lr %.5f", m["iter"], m["total"],
                        m["color"], m["lr"])

    trainer.fit(log_path=args.out / "train_log.csv", checkpoint_dir=args.out / "checkpoints",
                callback=progress)
    final = args.out / "checkpoints" / f"ckpt_{config.iters:06d}.plnf"
    shutil.copyfile(final, args.out / "model.plnf")
    return {"iters": config.iters, "checkpoint": str(args.out / "model.plnf")}


def _write_depth_png(depth, path):
    peak = float(depth.max())
    scaled = depth / peak if peak > 0 else np.zeros_like(depth)
    Image.fromarray(np.round(scaled * 65535).astype(np.uint16)).save(path)


def cmd_render(args):
    est = PlaneFieldEstimator.from_checkpoint(args.ckpt)
    times = est.state_.times
    if args.time is not None:
        if not -1.0 <= args.time <= 1.0:
            raise ContractViolation("--time must lie in [-1, 1]")
        tau = args.time
    else:
        if not 0 <= args.frame < len(times):
            raise ContractViolation(f"--frame must be in [0, {len(times) - 1}]")
        tau = float(times[args.frame])
    rgb, depth = est.predict([tau], return_depth=True)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    img = np.clip(np.round(rgb[0] * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, "RGB").save(args.out)
    depth_path = args.out.with_name(args.out.stem + "_depth.png")
    _write_depth_png(depth[0], depth_path)
    return {"time": tau, "color": str(args.out), "depth": str(depth_path)}


def cmd_eval(args):
    state = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    if dataset.shape != (state.camera.height, state.camera.width):
        raise ContractViolation(f"capture is {dataset.shape}, checkpoint renders "
                                f"{(state.camera.height, state.camera.width)}")
    est = PlaneFieldEstimator(config=state.config)
    est.state_ = state
    preds = est.predict(dataset)
    report = evaluate(preds, dataset.images(), dataset.masks(), use_mask=not args.full)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(args.out)
    report.to_csv(args.out.with_suffix(".csv"))
    return report.summary()


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "eval": cmd_eval}


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except (ValueError, OSError, ArithmeticError) as exc:
        msg = " ".join(str(exc).split())
        print(json.dumps({"error": type(exc).__name__, "message": msg}), file=sys.stderr)
        return 1
    print(json.dumps(dict(result, command=args.command, status="ok")))
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
