"""Command-line entry point.

Subcommands: ``gen`` (dataset generation), ``sample`` (patch layout dump),
``train``, ``eval``, ``infer``, ``params`` and ``gradcheck``.  Every run
is deterministic given (--config, --seed) and prints the effective seed.
Exit codes: 0 success, 1 usage error, 2 runtime error / failed check.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, describe_keys


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="fovseg",
                     description="Foveated promptable object segmentation.",
                     epilog="Config keys (for --config files and --set):\n"
                            + describe_keys(),
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", type=Path, default=None,
                       help="flat section.key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, default=0, help="RNG seed (u64)")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel workers where supported")
        p.add_argument("--out", type=Path, required=out_required,
                       default=None, help="output directory")

    p = sub.add_parser("gen", help="generate a synthetic dataset + manifest")
    common(p, out_required=True)

    p = sub.add_parser("sample", help="dump a patch layout overlay and records")
    common(p, out_required=True)
    p.add_argument("--image", type=Path, required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--mask", type=Path,
                       help="mask PNG; the prompt is derived from its moments")
    group.add_argument("--prompt", type=str,
                       help="mu_x,mu_y,cov_xx,cov_xy,cov_yy")

    p = sub.add_parser("train", help="train a model on a generated dataset")
    common(p, out_required=True)
    p.add_argument("--data", type=Path, required=True, help="training manifest")
    p.add_argument("--val", type=Path, default=None, help="validation manifest")

    p = sub.add_parser("eval", help="evaluate a checkpoint over a manifest")
    common(p, out_required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--hierarchical", action="store_true",
                   help="hierarchical refinement instead of dense prediction")

    p = sub.add_parser("infer", help="segment one image with one prompt")
    common(p, out_required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--mask", type=Path,
                       help="mask PNG; the prompt is derived from its moments")
    group.add_argument("--prompt", type=str,
                       help="mu_x,mu_y,cov_xx,cov_xy,cov_yy")
    p.add_argument("--hierarchical", action="store_true")

    p = sub.add_parser("params", help="print the exact parameter count")
    common(p)

    p = sub.add_parser("gradcheck",
                       help="finite-difference gradient check (nonzero exit on failure)")
    common(p)
    p.add_argument("--tolerance", type=float, default=1e-4)

    return parser


def _parse_prompt_arg(text: str):
    from .geometry import GaussianPrompt

    vals = [float(v) for v in text.split(",")]
    if len(vals) != 5:
        raise UsageError("--prompt needs mu_x,mu_y,cov_xx,cov_xy,cov_yy")
    return GaussianPrompt.from_moments(
        vals[0], vals[1], np.array([[vals[2], vals[3]], [vals[3], vals[4]]]))


def _prompt_from_args(args):
    from .datagen import load_mask_png
    from .geometry import mask_moments

    if args.mask is not None:
        return mask_moments(load_mask_png(args.mask))
    return _parse_prompt_arg(args.prompt)


def cmd_gen(args, cfg: RunConfig) -> int:
    from .datagen import generate_dataset

    manifest = generate_dataset(cfg.scene_config(), cfg["datagen.count"],
                                args.out, seed=args.seed, workers=args.workers)
    print(f"wrote {cfg['datagen.count']} scenes, manifest: {manifest}")
    return 0


def cmd_sample(args, cfg: RunConfig) -> int:
    from .datagen import load_image_png
    from .sampler import allocate_budget, sample_patch_specs
    from .viz import save_patch_overlay, write_patch_records

    image = load_image_png(args.image)
    prompt = _prompt_from_args(args)
    rng = np.random.default_rng(args.seed)
    sampler_cfg = cfg.sampler_config()
    budget = allocate_budget(prompt, sampler_cfg, cfg["sampler.sizes"])
    specs = sample_patch_specs(image.shape[:2], prompt, budget, sampler_cfg, rng)
    args.out.mkdir(parents=True, exist_ok=True)
    overlay = args.out / "overlay.png"
    records = args.out / "patches.txt"
    save_patch_overlay(image, specs, overlay)
    write_patch_records(specs, records)
    sizes = ", ".join(f"{p}px x{c}" for p, c in zip(budget.sizes, budget.counts) if c)
    print(f"budget: {sizes}")
    print(f"wrote {overlay} and {records}")
    return 0


def _load_compact_scenes(manifest: Path):
    from .datagen import read_manifest
    from .pipeline import CompactScene, load_scene_arrays

    records = read_manifest(manifest)
    base = manifest.parent
    return [CompactScene(*load_scene_arrays(base, rec)) for rec in records]


def cmd_train(args, cfg: RunConfig) -> int:
    from .checkpoint import save_checkpoint
    from .evaluation import EvalConfig, evaluate_dataset, model_predictor
    from .datagen import read_manifest
    from .model import build_model
    from .training import train_model
    from .viz import save_loss_curve

    scenes = _load_compact_scenes(args.data)
    if not scenes:
        raise ValueError("training manifest is empty")
    model = build_model(cfg.model_config(), seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "run.cfg").write_text(cfg.to_text())
    log_csv = args.out / "train_log.csv"

    eval_fn = None
    eval_interval = cfg["train.eval_interval"]
    if args.val is not None and eval_interval > 0:
        val_records = read_manifest(args.val)

        def eval_fn(m, step):
            predictor = model_predictor(m, cfg.sampler_config(),
                                        cfg.infer_config(), hierarchical=False)
            report = evaluate_dataset(predictor, val_records, args.val.parent,
                                      EvalConfig(seed=args.seed))
            print(f"step {step}: val IoU {report.mean_iou:.4f} "
                  f"+- {report.std_iou:.4f} over {report.total}", flush=True)

    train_model(model, scenes, cfg.train_config(), cfg.sampler_config(),
                seed=args.seed, out_dir=args.out, log_file=log_csv,
                eval_fn=eval_fn, eval_interval=eval_interval, progress=True)
    save_loss_curve(log_csv, args.out / "loss_curve.png")
    print(f"final checkpoint: {args.out / 'final.ckpt'}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    from .datagen import read_manifest
    from .evaluation import EvalConfig, evaluate_checkpoint, \
        write_heatmap_csv, write_metrics_csv
    from .viz import save_heatmap_png

    records = read_manifest(args.data)
    report = evaluate_checkpoint(args.ckpt, records, args.data.parent,
                                 EvalConfig(hierarchical=args.hierarchical,
                                            seed=args.seed),
                                 cfg.sampler_config(), cfg.infer_config(),
                                 workers=args.workers)
    args.out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(report, args.out / "metrics.csv")
    write_heatmap_csv(report, args.out / "heatmap_iou.csv", values="iou")
    write_heatmap_csv(report, args.out / "heatmap_count.csv", values="count")
    save_heatmap_png(report, args.out / "heatmap.png")
    mode = "hierarchical" if args.hierarchical else "dense"
    print(f"{mode} IoU {report.mean_iou:.4f} +- {report.std_iou:.4f} "
          f"over {report.total} scenes ({report.errors} errors)")
    print(f"small objects (<1% area): {report.small_mean:.4f} "
          f"+- {report.small_std:.4f} over {report.small_count}")
    print(f"outputs in {args.out}")
    return 0


def cmd_infer(args, cfg: RunConfig) -> int:
    from .checkpoint import load_checkpoint
    from .datagen import load_image_png, save_mask_png
    from .inference import five_sigma_box, segment

    model = load_checkpoint(args.ckpt)
    image = load_image_png(args.image)
    prompt = _prompt_from_args(args)
    rng = np.random.default_rng(args.seed)
    t0 = time.perf_counter()
    result = segment(model, image, prompt, cfg.infer_config(),
                     cfg.sampler_config(), rng, hierarchical=args.hierarchical)
    elapsed = time.perf_counter() - t0
    args.out.mkdir(parents=True, exist_ok=True)
    save_mask_png(args.out / "mask.png", result.binary)
    box = result.box
    summary = "\n".join([
        f"box: x [{box.x0}, {box.x1}) y [{box.y0}, {box.y1}) "
        f"({box.width}x{box.height})",
        f"rounds: {result.rounds}",
        f"queries per round: {result.round_queries}",
        f"total queries: {result.query_count}",
        f"wall time: {elapsed:.4f} s",
    ])
    (args.out / "summary.txt").write_text(summary + "\n")
    print(summary)
    print(f"wrote {args.out / 'mask.png'}")
    return 0


def cmd_params(args, cfg: RunConfig) -> int:
    from .model import param_count

    print(param_count(cfg.model_config()))
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradcheck import finite_difference_report, make_check_problem

    model, batch, query, targets = make_check_problem(seed=args.seed)
    worst, per_param = finite_difference_report(model, batch, query, targets)
    n_scalars = sum(p.numel() for p in model.parameters())
    print(f"checked {len(per_param)} parameter tensors "
          f"({n_scalars} scalars), max rel err {worst:.3e}")
    if worst > args.tolerance:
        offenders = sorted(per_param.items(), key=lambda kv: -kv[1])[:5]
        for name, err in offenders:
            print(f"  {name}: {err:.3e}")
        print(f"FAIL (tolerance {args.tolerance:g})")
        return 2
    print(f"PASS (tolerance {args.tolerance:g})")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "sample": cmd_sample,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "params": cmd_params,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = RunConfig.load(args.config, overrides=args.set)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    print(f"effective seed: {args.seed}")
    try:
        return COMMANDS[args.command](args, cfg)
    except Exception as exc:  # noqa: BLE001 - uniform runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
