"""Command-line entry points: synth, train, infer, eval, selftest."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import pngio
from .config import ConfigError, load_config
from .grids import GridError, ImageGrid
from .metrics import MetricReport, score_pair
from .physics import SynthParams, smooth_color_field, synth_pair
from .training import (
    CheckpointError,
    TrainConfig,
    enhance_image,
    fit,
    load_checkpoint,
)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class CliError(RuntimeError):
    pass


def _list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise CliError(f"not a directory: {directory}")
    paths = sorted(
        p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not paths:
        raise CliError(f"no images found in {directory}")
    return paths


def _load_pairs(data_dir: Path) -> list[tuple[ImageGrid, ImageGrid]]:
    degraded_dir = data_dir / "degraded"
    clean_dir = data_dir / "clean"
    if not degraded_dir.is_dir() or not clean_dir.is_dir():
        raise CliError(
            f"{data_dir} must contain degraded/ and clean/ subdirectories"
        )
    pairs = []
    for deg_path in _list_images(degraded_dir):
        clean_path = clean_dir / deg_path.name
        if not clean_path.exists():
            raise CliError(f"missing clean counterpart for {deg_path}")
        pairs.append((pngio.load_image(deg_path), pngio.load_image(clean_path)))
    return pairs


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.input_dir:
        cleans = [
            (p.stem, pngio.load_image(p)) for p in _list_images(Path(args.input_dir))
        ]
    else:
        cleans = [
            (f"{i:04d}", smooth_color_field(args.resolution, args.resolution,
                                            args.seed * 1000 + i))
            for i in range(args.count)
        ]
    attenuation = tuple(float(v) for v in args.attenuation.split(","))
    if len(attenuation) != 3:
        raise CliError("attenuation must be three comma-separated values")
    for i, (name, clean) in enumerate(cleans):
        params = SynthParams(
            depth_scale=args.depth_scale,
            attenuation=attenuation,  # type: ignore[arg-type]
            seed=args.seed + i,
        )
        degraded, prior = synth_pair(clean, params)
        pngio.save_image(clean, out / "clean" / f"{name}.png")
        pngio.save_image(degraded, out / "degraded" / f"{name}.png")
        if args.dump_priors:
            pngio.save_image(prior.transmission, out / "priors" / f"{name}_t.png")
            pngio.save_image(prior.background, out / "priors" / f"{name}_b.png")
    print(f"wrote {len(cleans)} pairs to {out}")
    return 0


def _config_from_args(args) -> TrainConfig:
    config = load_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.resolution is not None:
        overrides["crop"] = args.resolution
    if args.steps is not None:
        overrides["sample_steps"] = args.steps
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if overrides:
        import dataclasses

        config = dataclasses.replace(config, **overrides)
    return config


def cmd_train(args) -> int:
    config = _config_from_args(args)
    pairs = _load_pairs(Path(args.data))
    holdout = max(1, len(pairs) // 10) if len(pairs) > 1 else 0
    train_pairs = pairs[: len(pairs) - holdout] if holdout else pairs
    val_pairs = pairs[len(pairs) - holdout :] if holdout else None
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = None
    ckpt = out_dir / "checkpoint.pkl"
    if args.resume:
        state = load_checkpoint(ckpt)
    state, log = fit(
        train_pairs,
        config,
        val_dataset=val_pairs,
        checkpoint_path=ckpt,
        log_path=out_dir / "log.csv",
        state=state,
    )
    last = log[-1] if log else {}
    print(
        f"trained to iteration {state.iteration}; "
        f"last losses {last.get('loss_dm', float('nan')):.4f} / "
        f"{last.get('loss_prior', float('nan')):.4f} / "
        f"{last.get('loss_inr', float('nan')):.4f}"
    )
    return 0


def cmd_infer(args) -> int:
    state = load_checkpoint(Path(args.checkpoint))
    if args.steps is not None:
        from .diffusion import make_skip_plan

        state.plan = make_skip_plan(
            state.schedule, args.steps, state.config.skip_spacing
        )
    out_dir = Path(args.out_dir)
    for path in _list_images(Path(args.input_dir)):
        image = pngio.load_image(path)
        enhanced = enhance_image(state, image, seed=args.seed or 0)
        pngio.save_image(enhanced, out_dir / path.name)
        if args.dump_priors:
            from .implicit import inr_render
            from .priors import estimate_priors

            prior = estimate_priors(image, state.model.priors)
            stem = path.stem
            pngio.save_image(
                prior.transmission, out_dir / "priors" / f"{stem}_t.png"
            )
            pngio.save_image(
                prior.background, out_dir / "priors" / f"{stem}_b.png"
            )
            rendered = inr_render(image, state.model.implicit)
            pngio.save_image(rendered, out_dir / "priors" / f"{stem}_inr.png")
    print(f"enhanced images written to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    dir_a, dir_b = Path(args.results), Path(args.references)
    paths_a = _list_images(dir_a)
    rows = []
    for path in paths_a:
        ref_path = dir_b / path.name
        if not ref_path.exists():
            raise CliError(f"missing reference for {path.name} in {dir_b}")
        rows.append(
            score_pair(path.name, pngio.load_image(path), pngio.load_image(ref_path))
        )
    report = MetricReport(rows=rows)
    if args.out:
        report.write_csv(args.out)
    means = report.means()
    print(
        f"mean psnr={means.psnr:.3f} ssim={means.ssim:.4f} "
        f"uciqe={means.uciqe:.4f} uiqm={means.uiqm:.4f} over {len(rows)} images"
    )
    return 0


def cmd_selftest(args) -> int:
    from .selfcheck import run_selftest

    results = run_selftest(full=args.full)
    failures = [r for r in results if not r.passed]
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uwdiff",
        description="Physics-guided diffusion underwater image enhancement",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="build a paired dataset")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--input-dir", help="clean images; procedural if omitted")
    p_synth.add_argument("--count", type=int, default=8)
    p_synth.add_argument("--resolution", type=int, default=64)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--depth-scale", type=float, default=2.0)
    p_synth.add_argument("--attenuation", default="0.9,0.5,0.3")
    p_synth.add_argument("--dump-priors", action="store_true")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train on a paired dataset")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out-dir", required=True)
    p_train.add_argument("--config")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--resolution", type=int)
    p_train.add_argument("--steps", type=int)
    p_train.add_argument("--iterations", type=int)
    p_train.add_argument("--resume", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_infer = sub.add_parser("infer", help="enhance a directory of images")
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--input-dir", required=True)
    p_infer.add_argument("--out-dir", required=True)
    p_infer.add_argument("--steps", type=int)
    p_infer.add_argument("--seed", type=int)
    p_infer.add_argument("--dump-priors", action="store_true")
    p_infer.set_defaults(func=cmd_infer)

    p_eval = sub.add_parser("eval", help="score results against references")
    p_eval.add_argument("results")
    p_eval.add_argument("references")
    p_eval.add_argument("--out", help="CSV report path")
    p_eval.set_defaults(func=cmd_eval)

    p_self = sub.add_parser("selftest", help="run the acceptance checks")
    p_self.add_argument(
        "--full", action="store_true",
        help="include the slow training-based checks",
    )
    p_self.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, CheckpointError, GridError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
