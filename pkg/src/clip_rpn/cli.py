"""Command-line entry points.

Subcommands: train, eval, derain, analyze-prompts, viz-masks, synth-data,
loss-profile. Exit codes: 0 success, 1 usage error, 2 runtime error. Output
paths are never overwritten without --force.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data, imaging, losses, training, vlm
from .backbone import BackboneConfig
from .perception import route

DATA_ROOT_ENV_VAR = "CLIP_RPN_DATA_ROOT"


class UsageError(Exception):
    """Bad invocation or bad input files; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the contract here reserves 2 for
    # runtime failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(parser: argparse.ArgumentParser, *names: str) -> None:
    if "data-root" in names:
        parser.add_argument(
            "--data-root",
            nargs="+",
            default=None,
            help=f"dataset root(s) with rain/ and norain/ (default: ${DATA_ROOT_ENV_VAR})",
        )
    if "prompts" in names:
        parser.add_argument("--prompts", default=None, help="prompt set JSON file or p1/p2/p3")
    if "backend" in names:
        parser.add_argument("--backend", choices=("real", "stub"), default="stub")
    if "config" in names:
        parser.add_argument("--config", default=None, help="TOML or JSON training config")
    if "checkpoint" in names:
        parser.add_argument("--checkpoint", default=None, help="checkpoint directory")
    if "out" in names:
        parser.add_argument("--out", required=True, help="output directory or file")
    if "seed" in names:
        parser.add_argument("--seed", type=int, default=0)
    if "force" in names:
        parser.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clip-rpn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[], help="train a model")
    _add_common(p, "data-root", "prompts", "backend", "config", "out", "seed", "force")
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_common(p, "data-root", "prompts", "checkpoint", "out", "force")
    p.add_argument("--allow-prompt-mismatch", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("derain", help="restore a single image")
    p.add_argument("image", help="input image path")
    _add_common(p, "checkpoint", "out", "force")
    p.set_defaults(func=cmd_derain)

    p = sub.add_parser("analyze-prompts", help="per-dataset prompt routing distribution")
    _add_common(p, "data-root", "prompts", "backend", "out", "seed", "force")
    p.set_defaults(func=cmd_analyze_prompts)

    p = sub.add_parser("viz-masks", help="predicted rain-mask heatmaps for one image")
    p.add_argument("image", help="input image path")
    _add_common(p, "checkpoint", "out", "force")
    p.set_defaults(func=cmd_viz_masks)

    p = sub.add_parser("synth-data", help="generate a paired synthetic rain dataset")
    _add_common(p, "out", "seed", "force")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--streaks", type=int, default=40)
    p.add_argument("--angle", type=float, default=0.0)
    p.add_argument("--length", type=float, default=12.0)
    p.add_argument("--intensity", type=float, default=0.35)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("loss-profile", help="emit gradient-vs-error CSV grids")
    _add_common(p, "out", "force")
    p.add_argument("--beta", type=float, default=0.8)
    p.add_argument("--eta", type=float, default=2.3)
    p.add_argument("--total-steps", type=int, default=1000)
    p.add_argument("--taus", default=None, help="comma-separated step values (default 0,T/2,T)")
    p.add_argument("--points", type=int, default=100)
    p.set_defaults(func=cmd_loss_profile)

    return parser


def _data_roots(args) -> list[Path]:
    roots = args.data_root or (
        [os.environ[DATA_ROOT_ENV_VAR]] if os.environ.get(DATA_ROOT_ENV_VAR) else None
    )
    if not roots:
        raise UsageError(f"no --data-root given and ${DATA_ROOT_ENV_VAR} is not set")
    paths = [Path(r) for r in roots]
    for path in paths:
        if not path.is_dir():
            raise UsageError(f"data root {path} is not a directory")
    return paths


def _load_prompts(selector: str | None) -> vlm.PromptSet:
    try:
        if selector is None:
            return vlm.builtin_prompt_set()
        if selector in vlm.BUILTIN_PROMPT_SETS:
            return vlm.builtin_prompt_set(selector)
        return vlm.load_prompt_set(selector)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"bad prompt set {selector!r}: {exc}") from exc


def _guard_outputs(paths: list[Path], force: bool) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not force:
        raise UsageError(f"refusing to overwrite {', '.join(existing)} (pass --force)")


def _require_checkpoint(args) -> Path:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    path = Path(args.checkpoint)
    if not (path / training.HEADER_FILE).is_file():
        raise UsageError(f"{path} does not look like a checkpoint directory")
    return path


def _mask_heatmap(values: np.ndarray) -> np.ndarray:
    """Monochrome confidence rendered as black-to-red."""
    heat = np.zeros(values.shape + (3,), dtype=np.float64)
    heat[:, :, 0] = np.clip(values, 0.0, 1.0)
    return heat


def cmd_train(args) -> int:
    cfg = training.TrainConfig.from_file(args.config) if args.config else training.TrainConfig()
    overrides = {"backend": args.backend, "seed": args.seed}
    if args.prompts:
        overrides["prompt_set"] = args.prompts
    cfg = replace(cfg, **overrides)
    prompts = _load_prompts(cfg.prompt_set)
    if cfg.model.n_subnets != len(prompts):
        cfg = replace(cfg, model=BackboneConfig.from_dict(
            {**cfg.model.to_dict(), "n_subnets": len(prompts)}
        ))
    roots = _data_roots(args)
    manifests = [data.scan_root(root) for root in roots]
    manifest = manifests[0] if len(manifests) == 1 else data.build_mixed(manifests)
    out_dir = Path(args.out)
    if not args.resume:
        _guard_outputs(
            [out_dir / name for name in ("checkpoint", "steps.jsonl", "metrics.csv")],
            args.force,
        )
    result = training.train(
        cfg, manifest, out_dir, resume_from=args.resume, prompt_set=prompts
    )
    report = result.final_metrics
    print(
        f"trained {cfg.epochs} epochs on {len(manifest)} pairs: "
        f"PSNR {report.psnr_mean:.2f} dB, SSIM {report.ssim_mean:.4f}"
    )
    print(f"checkpoint: {result.checkpoint_dir}")
    return 0


def cmd_eval(args) -> int:
    ckpt_dir = _require_checkpoint(args)
    roots = _data_roots(args)
    manifests = [data.scan_root(root) for root in roots]
    manifest = manifests[0] if len(manifests) == 1 else data.build_mixed(manifests)
    out_dir = Path(args.out)
    csv_path, json_path = out_dir / "metrics.csv", out_dir / "metrics.json"
    _guard_outputs([csv_path, json_path], args.force)
    prompt_override = _load_prompts(args.prompts) if args.prompts else None
    report = training.evaluate_checkpoint(
        ckpt_dir,
        manifest,
        prompt_set=prompt_override,
        allow_prompt_mismatch=args.allow_prompt_mismatch or bool(args.prompts),
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_csv(csv_path)
    report.write_json(json_path)
    print(f"{len(manifest)} images: PSNR {report.psnr_mean:.2f} dB, SSIM {report.ssim_mean:.4f}")
    return 0


def _restore_for_inference(ckpt_dir: Path):
    ckpt = training.load_checkpoint(ckpt_dir)
    cfg = ckpt.config
    model = training.restore_model(ckpt)
    prompts = training.resolve_prompt_set(cfg)
    encoder = vlm.create_encoder(cfg.backend, seed=cfg.seed)
    return model, cfg, prompts, encoder


def cmd_derain(args) -> int:
    ckpt_dir = _require_checkpoint(args)
    image_path = Path(args.image)
    if not image_path.is_file():
        raise UsageError(f"input image {image_path} not found")
    out_dir = Path(args.out)
    stem = image_path.stem
    out_paths = [out_dir / f"{stem}_derained.png"] + [
        out_dir / f"{stem}_mask_l{i}.png" for i in (1, 2, 3)
    ]
    _guard_outputs(out_paths, args.force)
    model, cfg, prompts, encoder = _restore_for_inference(ckpt_dir)
    img = imaging.load_image(image_path)
    restored, masks, selected = training.derain_image(
        model, img, prompts, encoder, rpn_on=cfg.rpn_on, mgca_on=cfg.mgca_on
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    imaging.save_image(out_paths[0], restored)
    for path, mask in zip(out_paths[1:], masks):
        imaging.save_image(path, _mask_heatmap(mask))
    print(f"routed to sub-network {selected}; wrote {len(out_paths)} files to {out_dir}")
    return 0


def cmd_viz_masks(args) -> int:
    ckpt_dir = _require_checkpoint(args)
    image_path = Path(args.image)
    if not image_path.is_file():
        raise UsageError(f"input image {image_path} not found")
    out_dir = Path(args.out)
    stem = image_path.stem
    out_paths = [out_dir / f"{stem}_mask_l{i}.png" for i in (1, 2, 3)]
    _guard_outputs(out_paths, args.force)
    model, cfg, prompts, encoder = _restore_for_inference(ckpt_dir)
    img = imaging.load_image(image_path)
    _, masks, _ = training.derain_image(
        model, img, prompts, encoder, rpn_on=cfg.rpn_on, mgca_on=cfg.mgca_on
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    for path, mask in zip(out_paths, masks):
        imaging.save_image(path, _mask_heatmap(mask))
    print(f"wrote {len(out_paths)} mask heatmaps to {out_dir}")
    return 0


def cmd_analyze_prompts(args) -> int:
    prompts = _load_prompts(args.prompts)
    roots = _data_roots(args)
    out_path = Path(args.out)
    _guard_outputs([out_path], args.force)
    encoder = vlm.create_encoder(args.backend, seed=args.seed)
    rows = []
    for root in roots:
        manifest = data.scan_root(root)
        if len(manifest) == 0:
            raise UsageError(f"dataset {root} contains no image pairs")
        counts = [0] * len(prompts)
        for entry in manifest.entries:
            img = imaging.load_image(entry.rainy)
            counts[route(img, prompts, encoder).selected] += 1
        for index, count in enumerate(counts):
            rows.append((manifest.name, index, 100.0 * count / len(manifest)))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["dataset", "prompt_index", "percent"])
        for dataset, index, percent in rows:
            writer.writerow([dataset, index, f"{percent:.4f}"])
    for dataset, index, percent in rows:
        print(f"{dataset}: prompt {index} wins {percent:.2f}%")
    return 0


def cmd_synth_data(args) -> int:
    out_dir = Path(args.out)
    _guard_outputs([out_dir / "rain", out_dir / "norain", out_dir / "manifest.jsonl"], args.force)
    if args.count < 1:
        raise UsageError("--count must be positive")
    manifest = data.make_synthetic_dataset(
        out_dir,
        count=args.count,
        size=args.size,
        seed=args.seed,
        streak_count=args.streaks,
        angle=args.angle,
        length=args.length,
        intensity=args.intensity,
    )
    print(f"wrote {len(manifest)} pairs under {out_dir}")
    return 0


def cmd_loss_profile(args) -> int:
    out_path = Path(args.out)
    _guard_outputs([out_path], args.force)
    try:
        schedule = losses.LossSchedule(
            beta=args.beta, eta=args.eta, total_steps=args.total_steps
        )
        taus = (
            [float(t) for t in args.taus.split(",")]
            if args.taus
            else [0.0, args.total_steps / 2, float(args.total_steps)]
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    grid = np.linspace(0.01, 1.0, args.points)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["tau", "epsilon", "grad"])
        for tau in taus:
            grads = losses.dls_gradient_profile(schedule, tau, grid)
            for eps, grad in zip(grid, grads):
                writer.writerow([tau, f"{eps:.6f}", f"{grad:.10g}"])
    print(f"wrote {len(taus) * args.points} rows to {out_path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
