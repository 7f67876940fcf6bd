"""Command-line entry point: ``crnerf <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import linalg
from .checks import run_grad_checks
from .render import (
    Model,
    evaluate_dataset,
    interpolate_appearance,
    render_multi_appearance,
    render_novel_view,
)
from .synthscene import Dataset, default_scene, generate_dataset, read_png, write_png
from .trainer import VARIANTS, TrainConfig, read_log, run_training


def _csv_list(text: str, cast=str) -> list:
    return [cast(t) for t in text.split(",") if t.strip()]


def _echo_config(out_dir: Path, command: str, args: argparse.Namespace) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    (out_dir / "run_config.json").write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True))


def _load_image(spec: str, ds: Dataset | None) -> np.ndarray:
    """A PNG path, or an image id from the dataset."""
    path = Path(spec)
    if path.suffix.lower() == ".png" or path.exists():
        if not path.exists():
            raise FileNotFoundError(f"reference image {path} not found")
        img = read_png(path)
        return img[..., :3] if img.ndim == 3 else np.repeat(img[..., None], 3, axis=2)
    if ds is None:
        raise ValueError(f"{spec!r} is not a file and no --dataset was given")
    return ds.image(spec)


def cmd_generate_data(args) -> int:
    out = generate_dataset(default_scene(), args.n_train, args.n_test, args.variants, args.occluder_rate, args.seed, args.out, args.size)
    _echo_config(Path(out), "generate-data", args)
    print(f"wrote dataset to {out}")
    return 0


def _train_config(args, variant: str, rays: int) -> TrainConfig:
    return TrainConfig(
        variant=variant, steps=args.steps, seed=args.seed, rays=rays, lr=args.lr, lam=args.lam,
        beta=args.beta, samples=args.samples, mask_reg=args.mask_reg, precision=args.precision,
        checkpoint_every=args.checkpoint_every, width=args.width, depth=args.depth, record_time=args.record_time,
    )


def cmd_train(args) -> int:
    cfg = _train_config(args, args.variant, args.rays)
    every = max(1, args.log_every)

    def progress(rec):
        if rec.step % every == 0:
            print(f"step {rec.step:6d}  loss {rec.loss_total:.6g}  ({rec.seconds:.2f}s)", flush=True)

    final = run_training(args.dataset, cfg, args.out, resume=args.resume, progress=progress)
    print(f"final checkpoint: {final}")
    return 0


def cmd_render(args) -> int:
    ds = Dataset.load(args.dataset)
    ref = _load_image(args.reference, ds) if args.reference else None
    img = render_novel_view(args.ckpt, ds.camera(args.camera_id), ref, args.tile_rows)
    write_png(args.out, img)
    print(f"wrote {args.out}")
    return 0


def cmd_render_multi(args) -> int:
    ds = Dataset.load(args.dataset)
    refs = [_load_image(r, ds) for r in _csv_list(args.references)]
    images, timing = render_multi_appearance(args.ckpt, ds.camera(args.camera_id), refs, args.tile_rows)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(images):
        write_png(out / f"appearance_{k:02d}.png", img)
    if args.timing_csv:
        timing.write_csv(args.timing_csv)
    print(f"wrote {len(images)} images to {out}; total {timing.total_seconds:.3f}s (cross-ray features {timing.cross_seconds:.3f}s)")
    return 0


def cmd_interpolate(args) -> int:
    ds = Dataset.load(args.dataset)
    alphas = _csv_list(args.alphas, float)
    frames = interpolate_appearance(args.ckpt, ds.camera(args.camera_id), _load_image(args.ref_a, ds), _load_image(args.ref_b, ds), alphas, args.tile_rows)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(frames):
        write_png(out / f"frame_{k:03d}.png", img)
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def cmd_evaluate(args) -> int:
    report = evaluate_dataset(args.ckpt, args.dataset, args.masks_out, args.tile_rows)
    if args.report_csv:
        report.write_csv(args.report_csv)
    line = f"mean PSNR {report.mean_psnr:.3f} dB  mean SSIM {report.mean_ssim:.4f}"
    if report.mean_iou is not None:
        line += f"  mean IoU {report.mean_iou:.4f}"
    print(line)
    return 0


def cmd_check_grad(args) -> int:
    ok = True
    for name, rep in run_grad_checks(args.tolerance, args.pipeline_coords, args.seed):
        ok &= rep.passed
        print(f"{'PASS' if rep.passed else 'FAIL'}  {name:24s} max rel error {rep.max_error:.3e}", flush=True)
    return 0 if ok else 1


def cmd_verify_transform(args) -> int:
    rows = list(linalg.verify_transform(args.dim, args.trials, args.samples, args.seed))
    fields = ["trial", "dim", "beta", "objective_closed_form", "min_objective_random", "constraint_residual"]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    finally:
        if args.out:
            out.close()
    bad = [r for r in rows if r["constraint_residual"] > 1e-8 or r["objective_closed_form"] > r["min_objective_random"] + 1e-9]
    print(f"{len(rows) - len(bad)}/{len(rows)} instances optimal and feasible", file=sys.stderr)
    return 0 if not bad else 1


ABLATION_FIELDS = ["variant", "rays", "steps", "mean_psnr", "mean_ssim", "mean_iou", "final_loss", "train_seconds"]


def cmd_ablate(args) -> int:
    variants = _csv_list(args.variants)
    ray_counts = _csv_list(args.rays, int)
    out = Path(args.out)
    _echo_config(out, "ablate", args)
    runs = [(v, args.main_rays) for v in variants]
    runs += [("full", m) for m in ray_counts if ("full", m) not in runs]
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=ABLATION_FIELDS)
        w.writeheader()
        for variant, m in runs:
            run_dir = out / f"{variant}_m{m}"
            cfg = _train_config(args, variant, m)
            print(f"training {variant} with {m} rays per patch for {cfg.steps} steps", flush=True)
            t0 = time.perf_counter()
            final = run_training(args.dataset, cfg, run_dir)
            seconds = time.perf_counter() - t0
            report = evaluate_dataset(Model.load(final), args.dataset, run_dir / "masks-out", args.tile_rows)
            report.write_csv(run_dir / "report.csv")
            log = read_log(run_dir / "train_log.csv")
            w.writerow({
                "variant": variant, "rays": m, "steps": cfg.steps,
                "mean_psnr": f"{report.mean_psnr:.4f}", "mean_ssim": f"{report.mean_ssim:.6f}",
                "mean_iou": "" if report.mean_iou is None else f"{report.mean_iou:.6f}",
                "final_loss": log[-1]["loss_total"] if log else "", "train_seconds": f"{seconds:.1f}",
            })
            f.flush()
            print(f"  PSNR {report.mean_psnr:.3f} dB", flush=True)
    return 0


def _add_train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", required=True)
    p.add_argument("--steps", type=int, default=30000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--lambda", dest="lam", type=float, default=1e-3)
    p.add_argument("--beta", type=float, default=1e-5)
    p.add_argument("--mask-reg", type=float, default=0.05)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    p.add_argument("--checkpoint-every", type=int, default=1000)
    p.add_argument("--width", type=int, default=256, help="hidden width of the field MLP")
    p.add_argument("--depth", type=int, default=8, help="hidden layers of the field MLP")
    p.add_argument("--record-time", action="store_true", help="write wall times into train_log.csv")


def _add_render_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--camera-id", required=True)
    p.add_argument("--tile-rows", type=int, default=8)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crnerf", description="Cross-ray radiance fields for photo collections with varying appearance")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic multi-view dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=30)
    p.add_argument("--n-test", type=int, default=8)
    p.add_argument("--variants", type=int, default=5, help="number of appearance variants")
    p.add_argument("--occluder-rate", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train one variant")
    _add_train_options(p)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--rays", type=int, default=1024)
    p.add_argument("--resume")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one view in the appearance of a reference image")
    _add_render_options(p)
    p.add_argument("--reference", help="PNG path or dataset image id")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("render-multi", help="render one view under several appearances")
    _add_render_options(p)
    p.add_argument("--references", required=True, help="comma-separated PNG paths or image ids")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--timing-csv")
    p.set_defaults(func=cmd_render_multi)

    p = sub.add_parser("interpolate", help="blend the appearance of two references")
    _add_render_options(p)
    p.add_argument("--ref-a", required=True)
    p.add_argument("--ref-b", required=True)
    p.add_argument("--alphas", default="0,0.25,0.5,0.75,1")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("evaluate", help="PSNR/SSIM on the test split, IoU of predicted transient maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--report-csv")
    p.add_argument("--masks-out")
    p.add_argument("--tile-rows", type=int, default=8)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("check-grad", help="finite-difference check of every op and of the training loss")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--pipeline-coords", type=int, default=8, help="coordinates probed per parameter of the toy pipeline")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check_grad)

    p = sub.add_parser("verify-transform", help="closed-form transform vs random feasible transforms")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--feasible-samples", "--samples", dest="samples", type=int, default=200)
    p.add_argument("--dim", type=int, help="fixed dimension (default: cycle 2..8)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_verify_transform)

    p = sub.add_parser("ablate", help="train and evaluate several variants and patch sizes")
    _add_train_options(p)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--rays", default="400,576,784,1024", help="patch sizes for the full-variant sweep")
    p.add_argument("--main-rays", type=int, default=1024, help="patch size for the variant comparison")
    p.add_argument("--tile-rows", type=int, default=8)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
