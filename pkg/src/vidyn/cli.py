"""Command-line surface.

Exit codes: 0 success, 1 usage error (bad flags/arguments), 2 runtime error
(bad files, unsupported variants, failed checks).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import ImageDraw

from .autodiff import grad_check, run_verification
from .data import build_episode_dataset, read_dataset, write_dataset
from .errors import VidynError
from .evaluate import evaluate_multistep, extrapolate, infer_val_range
from .losses import loss_grad_check_cases
from .synthetic import ArmConfig
from .training import (
    TrainingConfig,
    config_from_ini,
    load_checkpoint,
    restore_model,
    train,
)
from .variants import VARIANTS
from .visualize import export_attention, frame_to_pil, render_overlay


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="vidyn", description="Latent dynamics of a simulated soft arm from video.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate a synthetic arm episode")
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chunks", type=int, default=10, help="number of 10 s input chunks")
    p.add_argument("--full", action="store_true", help="use the full 75-chunk protocol")
    p.add_argument("--segments", type=int, default=2, choices=(1, 2))
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--coupling", type=float, default=0.0, help="inter-segment curvature spring")
    p.add_argument("--png-dir", default=None, help="optionally export the first frames as PNGs")
    p.add_argument("--png-count", type=int, default=16)

    p = sub.add_parser("train", help="train a model variant")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory for checkpoints and log")
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--variant", default=None, choices=VARIANTS)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("eval-multistep", help="multi-step prediction error on validation data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory for the CSV report")
    p.add_argument("--horizon", type=int, default=30)
    p.add_argument("--trajectories", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("extrapolate", help="decode latent extrapolations between two frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--index", type=int, default=None, help="start frame (default: first validation frame)")
    p.add_argument("--gap", type=int, default=10)
    p.add_argument("--alphas", default="1.2,1.5,2,3", help="comma-separated extrapolation factors")

    p = sub.add_parser("export-attention", help="write one PNG per attention map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("render-overlay", help="draw the oscillator network on current and future frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--frame", type=int, default=None, help="frame index (default: first validation frame)")
    p.add_argument("--future-steps", type=int, default=20)
    p.add_argument("--out", required=True, help="output PNG path")

    p = sub.add_parser("grad-check", help="verify gradients of primitive ops and loss terms")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _load_model(checkpoint_path):
    payload = load_checkpoint(checkpoint_path)
    model, config = restore_model(payload)
    model.eval()
    return model, config


def cmd_gen_data(args) -> int:
    config = ArmConfig(n_segments=args.segments, coupling=args.coupling)
    n_chunks = 75 if args.full else args.chunks
    dataset = build_episode_dataset(args.seed, n_chunks=n_chunks, config=config, size=args.size)
    write_dataset(dataset, args.out)
    print(
        f"wrote {dataset.n_frames} frames "
        f"({dataset.n_frames * dataset.dt:.0f} s at {1.0 / dataset.dt:.0f} fps) to {args.out}"
    )
    if args.png_dir:
        out = Path(args.png_dir)
        out.mkdir(parents=True, exist_ok=True)
        step = max(1, dataset.n_frames // max(1, args.png_count))
        for j, i in enumerate(range(0, dataset.n_frames, step)[: args.png_count]):
            frame_to_pil(dataset.frames_float(i), scale=8).save(out / f"frame_{i:06d}.png")
        print(f"exported preview frames to {out}")
    return 0


def cmd_train(args) -> int:
    dataset = read_dataset(args.dataset)
    config = config_from_ini(args.config) if args.config else TrainingConfig()
    overrides = {}
    if args.variant is not None:
        overrides["variant"] = args.variant
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if overrides:
        from dataclasses import replace

        config = replace(config, **overrides)
    result = train(config, dataset, args.out, resume=args.resume)
    if result.aborted:
        print("training aborted on non-finite loss; last checkpoint kept", file=sys.stderr)
        return 2
    last = result.history[-1] if result.history else {}
    print(
        f"trained {result.epochs_run} epochs; "
        f"final static_recon={last.get('static_recon', float('nan')):.4g} "
        f"val={last.get('val_loss', float('nan')):.4g}"
    )
    print(f"checkpoints: {result.checkpoint} (last), {result.best_checkpoint} (best)")
    return 0


def cmd_eval_multistep(args) -> int:
    model, _ = _load_model(args.checkpoint)
    dataset = read_dataset(args.dataset)
    report = evaluate_multistep(
        model, dataset, horizon=args.horizon, n_traj=args.trajectories, seed=args.seed
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "multistep.csv")
    print(
        f"single-step MSE {report.single_step:.4g}, "
        f"multi-step mean {report.multi_step_mean:.4g} "
        f"(stderr {report.stderr:.2g}, {report.n_trajectories} trajectories, "
        f"{report.n_diverged} diverged)"
    )
    return 0


def cmd_extrapolate(args) -> int:
    model, _ = _load_model(args.checkpoint)
    dataset = read_dataset(args.dataset)
    index = args.index
    if index is None:
        index = infer_val_range(dataset)[0] + 1
    alphas = tuple(float(a) for a in args.alphas.split(","))
    result = extrapolate(model, dataset, index, gap=args.gap, alphas=alphas)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scale = 8
    for alpha, image in zip(result.alphas, result.images):
        img = frame_to_pil(image, scale=scale)
        if result.com is not None:
            draw = ImageDraw.Draw(img)
            idx = list(result.alphas).index(alpha)
            for x, y in result.com[idx].numpy():
                cx = (x + 1.0) / 2.0 * (img.width - 1)
                cy = (y + 1.0) / 2.0 * (img.height - 1)
                r = scale * 0.6
                draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=(60, 90, 230))
        img.save(out / f"extrapolation_alpha{alpha:g}.png")
    print(f"wrote {len(result.alphas)} extrapolation frames to {out}")
    return 0


def cmd_export_attention(args) -> int:
    model, _ = _load_model(args.checkpoint)
    dataset = read_dataset(args.dataset)
    frame = torch.from_numpy(dataset.frames_float(args.frame))
    paths = export_attention(model, frame, args.out)
    print(f"wrote {len(paths)} attention maps to {args.out}")
    return 0


def cmd_render_overlay(args) -> int:
    model, _ = _load_model(args.checkpoint)
    dataset = read_dataset(args.dataset)
    index = args.frame
    if index is None:
        index = infer_val_range(dataset)[0] + 1
    steps = max(1, args.future_steps)
    if index < 1 or index + 1 >= dataset.n_frames or index + steps > dataset.n_frames:
        raise VidynError(f"frame {index} leaves no room for the window and {steps} inputs")
    window = torch.from_numpy(dataset.frames_float(np.array([index - 1, index, index + 1])))
    u_seq = torch.from_numpy(dataset.inputs[index:index + steps])
    path = render_overlay(
        model, window, u_seq, args.out, future_steps=args.future_steps
    )
    print(f"wrote overlay to {path}")
    return 0


def cmd_grad_check(args) -> int:
    failures = 0
    for name, report in run_verification(tol=args.tol, n_instances=args.instances, seed=args.seed):
        print(f"op {name}: {report}")
        failures += 0 if report.passed else 1
    for idx, (name, f, shape) in enumerate(loss_grad_check_cases()):
        worst = None
        for k in range(args.instances):
            g = torch.Generator().manual_seed(args.seed * 100_000 + 50_000 + idx * 100 + k)
            x = torch.randn(shape, generator=g, dtype=torch.float64)
            report = grad_check(f, x, tol=args.tol)
            if worst is None or report.max_rel_error > worst.max_rel_error:
                worst = report
        print(f"loss {name}: {worst}")
        failures += 0 if worst.passed else 1
    print("all gradient checks passed" if failures == 0 else f"{failures} checks FAILED")
    return 0 if failures == 0 else 2


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-multistep": cmd_eval_multistep,
    "extrapolate": cmd_extrapolate,
    "export-attention": cmd_export_attention,
    "render-overlay": cmd_render_overlay,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (VidynError, OSError) as exc:
        print(f"vidyn: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
