"""Dataset-level IoU evaluation and heatmap aggregation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import SceneRecord, load_image_png, load_mask_png
from .geometry import AugmentationSpec, GaussianPrompt, mask_moments, perturb_prompt
from .inference import InferenceConfig, encode_image, five_sigma_box, \
    hierarchical_refine, iou, predict_dense
from .sampler import SamplerConfig

DEFAULT_AREA_EDGES = tuple(np.geomspace(1e-5, 0.25, 8))
DEFAULT_FOOTPRINT_EDGES = tuple(np.geomspace(4.0, 256.0, 7))
SMALL_OBJECT_AREA = 0.01


@dataclass(frozen=True)
class EvalConfig:
    hierarchical: bool = False
    seed: int = 0
    prompt_jitter: AugmentationSpec | None = None
    area_edges: tuple[float, ...] = DEFAULT_AREA_EDGES
    footprint_edges: tuple[float, ...] = DEFAULT_FOOTPRINT_EDGES


@dataclass
class EvalReport:
    total: int
    errors: int
    mean_iou: float
    std_iou: float
    small_count: int
    small_mean: float
    small_std: float
    area_edges: tuple[float, ...]
    footprint_edges: tuple[float, ...]
    heat_iou: np.ndarray    # (n_fp_bins, n_area_bins) mean IoU, NaN when empty
    heat_count: np.ndarray  # (n_fp_bins, n_area_bins) record counts
    per_record: list[tuple[SceneRecord, float]] = field(default_factory=list)
    mean_queries: float = 0.0


def record_rng(seed: int, record: SceneRecord) -> np.random.Generator:
    """Deterministic per-record stream, independent of manifest order."""
    digest = hashlib.sha256(record.image.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def record_prompt(record: SceneRecord, mask: np.ndarray) -> GaussianPrompt:
    if record.prompt is not None:
        mu_x, mu_y, cxx, cxy, cyy = record.prompt
        return GaussianPrompt.from_moments(mu_x, mu_y,
                                           np.array([[cxx, cxy], [cxy, cyy]]))
    return mask_moments(mask)


def model_predictor(model, sampler_cfg: SamplerConfig,
                    infer_cfg: InferenceConfig, hierarchical: bool):
    """Standard predictor closure for :func:`evaluate_dataset`."""

    def predict(image, prompt, rng, record):
        enc = encode_image(model, image, prompt, sampler_cfg, rng)
        box = five_sigma_box(prompt, image.shape[:2], infer_cfg)
        if hierarchical:
            result = hierarchical_refine(model, enc, box, infer_cfg)
        else:
            result = predict_dense(model, enc, box)
        return result.binary, result.query_count

    return predict


def _bin_index(value, edges) -> int:
    """Bin index with out-of-range values clamped into the end bins."""
    idx = int(np.searchsorted(edges, value, side="right")) - 1
    return min(max(idx, 0), len(edges) - 2)


def _evaluate_one(predict, base_dir, record: SceneRecord, config: EvalConfig):
    """(IoU, query count) for one record; raises on unreadable inputs."""
    image = load_image_png(base_dir / record.image)
    mask = load_mask_png(base_dir / record.mask)
    prompt = record_prompt(record, mask)
    rng = record_rng(config.seed, record)
    if config.prompt_jitter is not None:
        prompt = perturb_prompt(prompt, config.prompt_jitter, rng)
    out = predict(image, prompt, rng, record)
    predicted, n_queries = out if isinstance(out, tuple) else (out, 0)
    return iou(predicted, mask), n_queries


def evaluate_dataset(predict, records: list[SceneRecord], base_dir,
                     config: EvalConfig) -> EvalReport:
    """Run a predictor over a manifest and aggregate IoU statistics.

    ``predict(image, prompt, rng, record)`` returns a binary (H, W) mask,
    optionally with a query count.  Unreadable records are counted as
    errors, not fatal.  Aggregation is an ordered reduction over the
    manifest, with per-record randomness derived from record content, so
    shuffled manifests agree up to float summation order.
    """
    base_dir = Path(base_dir)
    results = []
    for record in records:
        try:
            results.append(_evaluate_one(predict, base_dir, record, config))
        except Exception:
            results.append(None)
    return _aggregate(records, results, config)


_WORKER = {}


def _parallel_init(ckpt_path, sampler_cfg, infer_cfg, hierarchical):
    import torch

    from .checkpoint import load_checkpoint

    torch.set_num_threads(1)
    model = load_checkpoint(ckpt_path)
    model.eval()
    _WORKER["predict"] = model_predictor(model, sampler_cfg, infer_cfg,
                                         hierarchical)


def _parallel_one(args):
    base_dir, record, config = args
    try:
        return _evaluate_one(_WORKER["predict"], base_dir, record, config)
    except Exception:
        return None


def evaluate_checkpoint(ckpt_path, records: list[SceneRecord], base_dir,
                        config: EvalConfig, sampler_cfg: SamplerConfig,
                        infer_cfg: InferenceConfig, workers: int = 1) -> EvalReport:
    """Evaluate a stored checkpoint, optionally across worker processes.

    Per-record work is independent (content-derived rng, one sampler per
    worker) and results reduce in manifest order, so any worker count
    produces the same report.
    """
    if workers <= 1:
        from .checkpoint import load_checkpoint

        model = load_checkpoint(ckpt_path)
        model.eval()
        predict = model_predictor(model, sampler_cfg, infer_cfg,
                                  config.hierarchical)
        return evaluate_dataset(predict, records, base_dir, config)
    import multiprocessing

    jobs = [(Path(base_dir), rec, config) for rec in records]
    with multiprocessing.Pool(
            workers, initializer=_parallel_init,
            initargs=(ckpt_path, sampler_cfg, infer_cfg, config.hierarchical)
    ) as pool:
        results = pool.map(_parallel_one, jobs)
    return _aggregate(records, results, config)


def _aggregate(records, results, config: EvalConfig) -> EvalReport:
    n_fp = len(config.footprint_edges) - 1
    n_area = len(config.area_edges) - 1
    sums = np.zeros((n_fp, n_area))
    counts = np.zeros((n_fp, n_area), dtype=np.int64)
    per_record = []
    errors = 0
    queries = []
    for record, result in zip(records, results):
        if result is None:
            errors += 1
            continue
        score, n_queries = result
        per_record.append((record, score))
        queries.append(n_queries)
        fi = _bin_index(record.footprint, config.footprint_edges)
        ai = _bin_index(record.rel_area, config.area_edges)
        sums[fi, ai] += score
        counts[fi, ai] += 1

    scores = np.array([s for _, s in per_record])
    small = np.array([s for r, s in per_record if r.rel_area < SMALL_OBJECT_AREA])
    with np.errstate(invalid="ignore"):
        heat = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return EvalReport(
        total=len(per_record), errors=errors,
        mean_iou=float(scores.mean()) if scores.size else float("nan"),
        std_iou=float(scores.std()) if scores.size else float("nan"),
        small_count=int(small.size),
        small_mean=float(small.mean()) if small.size else float("nan"),
        small_std=float(small.std()) if small.size else float("nan"),
        area_edges=config.area_edges,
        footprint_edges=config.footprint_edges,
        heat_iou=heat, heat_count=counts, per_record=per_record,
        mean_queries=float(np.mean(queries)) if queries else 0.0)


def _fmt(x) -> str:
    return f"{x:.12g}"


def write_heatmap_csv(report: EvalReport, path, values="iou"):
    """Comma-separated heatmap grid preceded by two bin-edge header rows.

    Row 1: relative-area bin edges (columns); row 2: absolute-footprint
    bin edges (rows); then one grid row per footprint bin.
    """
    grid = report.heat_iou if values == "iou" else report.heat_count
    lines = [
        "area_edges," + ",".join(_fmt(e) for e in report.area_edges),
        "footprint_edges," + ",".join(_fmt(e) for e in report.footprint_edges),
    ]
    for row in grid:
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_metrics_csv(report: EvalReport, path):
    lines = [
        "metric,value",
        f"records,{report.total}",
        f"errors,{report.errors}",
        f"mean_iou,{_fmt(report.mean_iou)}",
        f"std_iou,{_fmt(report.std_iou)}",
        f"small_object_records,{report.small_count}",
        f"small_object_mean_iou,{_fmt(report.small_mean)}",
        f"small_object_std_iou,{_fmt(report.small_std)}",
        f"mean_queries,{_fmt(report.mean_queries)}",
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
