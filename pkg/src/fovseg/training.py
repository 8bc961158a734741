"""Sparse boundary-weighted training.

Supervision touches only k pixels per sample: pixels are bucketed into
seven groups by city-block distance to the mask boundary, split evenly
between inside and outside, and drawn per group according to adaptive
proportions that shift toward groups the model currently predicts worst.
The loss is plain mean BCE over the sampled logits.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import _kernels
from .geometry import AugmentationSpec, GaussianPrompt, mask_moments, perturb_prompt, to_relative
from .model import Segmenter, TokenBatch
from .sampler import SamplerConfig, allocate_budget, extract_pixels_grouped, sample_patch_specs
from .checkpoint import save_checkpoint

N_GROUPS = 7
GROUP_BOUNDS = (2, 4, 8, 16, 32, 64)  # [0,2) [2,4) [4,8) [8,16) [16,32) [32,64) [64,inf)


class OneSidedMaskError(ValueError):
    """Mask has zero inside or zero outside pixels."""


@dataclass
class DistanceGroupMap:
    """Per-pixel distance to the mask boundary and its group index."""

    mask: np.ndarray      # (H, W) bool
    distance: np.ndarray  # (H, W) int32, INF where the mask has no boundary
    group: np.ndarray     # (H, W) uint8 in 0..6


@dataclass
class SparsePixelBatch:
    xs: np.ndarray       # (k,) int32 pixel column
    ys: np.ndarray       # (k,) int32 pixel row
    targets: np.ndarray  # (k,) float32, 1 inside / 0 outside
    groups: np.ndarray   # (k,) uint8
    inside: np.ndarray   # (k,) bool


@dataclass(frozen=True)
class GroupStats:
    """Running per-group IoU estimates and the sampling proportions.

    Proportions stay floored at ``p_min`` and sum to 1; they grow with
    (1 - iou + eps), so badly predicted groups receive more pixels.
    """

    iou: np.ndarray
    proportions: np.ndarray
    momentum: float = 0.9
    p_min: float = 0.02
    eps: float = 0.05

    @classmethod
    def uniform(cls, momentum=0.9, p_min=0.02, eps=0.05) -> "GroupStats":
        return cls(iou=np.full(N_GROUPS, 0.5),
                   proportions=np.full(N_GROUPS, 1.0 / N_GROUPS),
                   momentum=momentum, p_min=p_min, eps=eps)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-4
    steps: int = 1000
    tokens: int = 512
    pixels_per_sample: int = 2048
    dynamic_sampling: bool = True
    augment: AugmentationSpec = field(default_factory=AugmentationSpec)
    checkpoint_interval: int = 500
    log_interval: int = 1

    def __post_init__(self):
        if min(self.batch_size, self.steps, self.tokens,
               self.pixels_per_sample) < 1 or self.learning_rate < 0:
            raise ValueError("training config values must be positive")


def distance_group_map(mask: np.ndarray) -> DistanceGroupMap:
    """Exact L1 distance to the boundary, plus the seven-group bucketing.

    A pixel is on the boundary when a 4-neighbor has the opposite value;
    boundary pixels have distance 0.  Equivalently the distance is
    (city-block distance to the nearest opposite-valued pixel) - 1.  For
    masks with no boundary every pixel lands in the outermost group.
    """
    mask = np.ascontiguousarray(np.asarray(mask, dtype=bool))
    dist = _kernels.l1_distance_to_boundary(mask)
    group = np.full(mask.shape, N_GROUPS - 1, dtype=np.uint8)
    for g in range(N_GROUPS - 2, -1, -1):
        group[dist < GROUP_BOUNDS[g]] = g
    return DistanceGroupMap(mask=mask, distance=dist, group=group)


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer quotas summing exactly to ``total``, ties to lower index."""
    raw = proportions * total
    quotas = np.floor(raw).astype(np.int64)
    short = total - int(quotas.sum())
    if short > 0:
        order = np.lexsort((np.arange(len(raw)), -(raw - quotas)))
        quotas[order[:short]] += 1
    return quotas


def _donate_empty(quotas: np.ndarray, available: np.ndarray) -> np.ndarray:
    """Move quotas of empty groups to the nearest non-empty group."""
    quotas = quotas.copy()
    nonempty = np.nonzero(available > 0)[0]
    for g in range(len(quotas)):
        if available[g] == 0 and quotas[g] > 0:
            nearest = nonempty[np.argmin(np.abs(nonempty - g))]
            quotas[nearest] += quotas[g]
            quotas[g] = 0
    return quotas


def select_sparse_pixels(dist_map: DistanceGroupMap, stats: GroupStats,
                         k: int, rng: np.random.Generator) -> SparsePixelBatch:
    """Draw k supervision pixels, balanced inside/outside.

    Each side gets k//2 pixels split across groups by the stats
    proportions (largest-remainder rounding).  Quotas of groups that do
    not exist on a side move to the nearest non-empty group.  Groups
    smaller than their quota are sampled with replacement, otherwise
    without.
    """
    if k < 2 * N_GROUPS:
        raise ValueError(f"k must be >= {2 * N_GROUPS}")
    mask = dist_map.mask
    flat_group = dist_map.group.reshape(-1)
    flat_inside = mask.reshape(-1)
    h, w = mask.shape

    chosen = []
    for inside, side_k in ((True, k // 2), (False, k - k // 2)):
        side_sel = flat_inside if inside else ~flat_inside
        group_pixels = [np.nonzero(side_sel & (flat_group == g))[0]
                        for g in range(N_GROUPS)]
        available = np.array([len(p) for p in group_pixels])
        if available.sum() == 0:
            raise OneSidedMaskError(
                "one-sided-mask: mask needs both inside and outside pixels")
        quotas = _donate_empty(_largest_remainder(stats.proportions, side_k),
                               available)
        for g in range(N_GROUPS):
            if quotas[g] == 0:
                continue
            pool = group_pixels[g]
            take = rng.choice(pool, size=quotas[g],
                              replace=len(pool) < quotas[g], shuffle=False)
            chosen.append((take, g, inside))

    xs, ys, targets, groups, inside_flags = [], [], [], [], []
    for take, g, inside in chosen:
        ys.append(take // w)
        xs.append(take % w)
        targets.append(np.full(take.size, 1.0 if inside else 0.0, dtype=np.float32))
        groups.append(np.full(take.size, g, dtype=np.uint8))
        inside_flags.append(np.full(take.size, inside, dtype=bool))
    return SparsePixelBatch(
        xs=np.concatenate(xs).astype(np.int32),
        ys=np.concatenate(ys).astype(np.int32),
        targets=np.concatenate(targets),
        groups=np.concatenate(groups),
        inside=np.concatenate(inside_flags))


def update_group_stats(stats: GroupStats, per_group_iou: np.ndarray) -> GroupStats:
    """EMA the per-group IoUs and recompute sampling proportions.

    NaN entries leave that group's running IoU untouched.  Proportions go
    as (1 - iou + eps), floored at p_min and renormalized so they still
    sum to one.
    """
    obs = np.asarray(per_group_iou, dtype=np.float64)
    seen = ~np.isnan(obs)
    if np.any((obs[seen] < 0) | (obs[seen] > 1)):
        raise ValueError("per-group IoU values must lie in [0, 1]")
    iou = stats.iou.copy()
    iou[seen] = stats.momentum * iou[seen] + (1.0 - stats.momentum) * obs[seen]
    weights = 1.0 - iou + stats.eps
    props = weights / weights.sum()
    # Waterfill the floor: groups below p_min are pinned there while the
    # rest renormalize into the leftover mass.
    for _ in range(N_GROUPS):
        low = props < stats.p_min
        if not low.any():
            break
        free = 1.0 - stats.p_min * low.sum()
        scaled = weights * ~low
        props = np.where(low, stats.p_min, scaled / scaled.sum() * free)
    return replace(stats, iou=iou, proportions=props)


def sparse_bce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over sampled pixels, stable in logit space."""
    if logits.shape != targets.shape:
        raise ValueError("logits and targets must have equal shape")
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))


def per_group_iou(logits: np.ndarray, targets: np.ndarray,
                  groups: np.ndarray) -> np.ndarray:
    """IoU of thresholded predictions (logit > 0) per distance group.

    Groups whose union is empty across the batch come back NaN.
    """
    preds = logits > 0
    pos = targets > 0.5
    out = np.full(N_GROUPS, np.nan)
    for g in range(N_GROUPS):
        sel = groups == g
        union = np.sum(sel & (preds | pos))
        if union > 0:
            out[g] = np.sum(sel & preds & pos) / union
    return out


@dataclass
class Scene:
    """One training example: image, mask and lazily derived products."""

    image: np.ndarray  # (H, W, 3) float32
    mask: np.ndarray   # (H, W) bool
    _prompt: GaussianPrompt | None = None
    _dist_map: DistanceGroupMap | None = None

    @property
    def prompt(self) -> GaussianPrompt:
        if self._prompt is None:
            self._prompt = mask_moments(self.mask)
        return self._prompt

    @property
    def dist_map(self) -> DistanceGroupMap:
        if self._dist_map is None:
            self._dist_map = distance_group_map(self.mask)
        return self._dist_map


@dataclass
class StepResult:
    loss: float
    stats: GroupStats
    group_iou: np.ndarray
    skipped: int


def jitter_tokens(n_tokens: int, jitter: float, rng: np.random.Generator) -> int:
    """Uniform integer in [(1-jitter) N, (1+jitter) N]."""
    lo = max(1, int(round(n_tokens * (1.0 - jitter))))
    hi = int(round(n_tokens * (1.0 + jitter)))
    return int(rng.integers(lo, hi + 1))


def prepare_sample(scene: Scene, stats: GroupStats, sampler_cfg: SamplerConfig,
                   sizes, k: int, augment: AugmentationSpec,
                   rng: np.random.Generator):
    """Prompt, patches and supervision pixels for one scene.

    Returns (patches, prompt, pixel_batch, query_coords) where the query
    coordinates are already prompt-relative; raises OneSidedMaskError for
    degenerate masks.
    """
    pix = select_sparse_pixels(scene.dist_map, stats, k, rng)
    prompt = perturb_prompt(scene.prompt, augment, rng)
    budget = allocate_budget(prompt, sampler_cfg, sizes)
    specs = sample_patch_specs(scene.mask.shape, prompt, budget, sampler_cfg, rng)
    grouped = extract_pixels_grouped(scene.image, specs)
    rx, ry = to_relative(prompt, pix.xs + 0.5, pix.ys + 0.5)
    query = np.stack([rx, ry], axis=-1)
    return specs, grouped, prompt, pix, query


def train_step(model: Segmenter, optimizer, scenes: list[Scene],
               stats: GroupStats, cfg: TrainConfig,
               sampler_cfg: SamplerConfig, rng: np.random.Generator) -> StepResult:
    """One optimizer update over a batch of scenes.

    Per scene: perturb the prompt, sample a jittered token budget, select
    k supervision pixels, then a shared forward/backward and an
    adaptive-moment update.  Scenes with one-sided masks are skipped.
    When dynamic sampling is on, the batch's per-group IoU feeds the
    group stats.
    """
    sizes = model.config.patch_sizes
    n_tokens = jitter_tokens(cfg.tokens, cfg.augment.token_count_jitter, rng)
    step_sampler = replace(sampler_cfg, tokens=n_tokens)
    patch_lists, prompts, pixel_batches, queries = [], [], [], []
    skipped = 0
    for scene in scenes:
        try:
            specs, grouped, prompt, pix, query = prepare_sample(
                scene, stats, step_sampler, sizes, cfg.pixels_per_sample,
                cfg.augment, rng)
        except OneSidedMaskError:
            skipped += 1
            continue
        patch_lists.append((specs, grouped))
        prompts.append(prompt)
        pixel_batches.append(pix)
        queries.append(query)
    if not patch_lists:
        raise OneSidedMaskError("one-sided-mask: every scene in the batch was skipped")

    batch = _token_batch_from_grouped(patch_lists, prompts, n_tokens)
    query_coords = torch.as_tensor(np.stack(queries), dtype=torch.float32)
    targets = torch.as_tensor(np.stack([p.targets for p in pixel_batches]))
    logits = model(batch, query_coords)
    loss = sparse_bce(logits, targets)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()

    flat_logits = logits.detach().numpy().reshape(-1)
    flat_targets = np.concatenate([p.targets for p in pixel_batches])
    flat_groups = np.concatenate([p.groups for p in pixel_batches])
    iou = per_group_iou(flat_logits, flat_targets, flat_groups)
    if cfg.dynamic_sampling:
        stats = update_group_stats(stats, iou)
    return StepResult(loss=float(loss.detach()), stats=stats,
                      group_iou=iou, skipped=skipped)


def _token_batch_from_grouped(patch_lists, prompts, n_tokens) -> TokenBatch:
    """Batched TokenBatch straight from grouped extraction output."""
    batch = len(patch_lists)
    coords = np.empty((batch, n_tokens, 2), dtype=np.float64)
    merged: dict[int, tuple[list, list]] = {}
    for b, ((specs, grouped), prompt) in enumerate(zip(patch_lists, prompts)):
        cx = np.fromiter((s.center_x for s in specs), np.float64, len(specs))
        cy = np.fromiter((s.center_y for s in specs), np.float64, len(specs))
        rx, ry = to_relative(prompt, cx, cy)
        coords[b, :, 0] = rx
        coords[b, :, 1] = ry
        for size, (idx, pixels) in grouped.items():
            dest, rows = merged.setdefault(size, ([], []))
            dest.append(idx + b * n_tokens)
            rows.append(pixels.reshape(pixels.shape[0], -1))
    groups = {
        size: (torch.as_tensor(np.concatenate(dest)),
               torch.as_tensor(np.concatenate(rows)))
        for size, (dest, rows) in merged.items()
    }
    return TokenBatch(groups=groups,
                      coords=torch.as_tensor(coords, dtype=torch.float32),
                      batch=batch, n_tokens=n_tokens)


def make_optimizer(model: Segmenter, cfg: TrainConfig):
    """Adaptive-moment optimizer: betas (0.9, 0.999), no weight decay."""
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                            betas=(0.9, 0.999))


def train_model(model: Segmenter, scenes: list[Scene], cfg: TrainConfig,
                sampler_cfg: SamplerConfig, seed: int,
                out_dir=None, log_file=None, eval_fn=None,
                eval_interval=0, progress=False):
    """Full training loop with CSV logging and periodic checkpoints.

    The log holds one line per step: step, loss, mean per-group IoU and
    the seven sampling proportions.  ``eval_fn(model, step)`` runs every
    ``eval_interval`` steps when provided.  Returns the final GroupStats.
    """
    rng = np.random.default_rng(seed)
    optimizer = make_optimizer(model, cfg)
    stats = GroupStats.uniform()
    out_dir = Path(out_dir) if out_dir is not None else None
    writer = None
    fh = None
    if log_file is not None:
        fh = open(log_file, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "mean_group_iou"]
                        + [f"p{g}" for g in range(N_GROUPS)])
    t_start = time.time()
    try:
        for step in range(1, cfg.steps + 1):
            idx = rng.integers(0, len(scenes), size=cfg.batch_size)
            batch_scenes = [scenes[i] for i in idx]
            result = train_step(model, optimizer, batch_scenes, stats, cfg,
                                sampler_cfg, rng)
            stats = result.stats
            if writer is not None and step % cfg.log_interval == 0:
                mean_iou = float(np.nanmean(result.group_iou))
                writer.writerow([step, f"{result.loss:.6f}", f"{mean_iou:.6f}"]
                                + [f"{p:.6f}" for p in stats.proportions])
            if progress and step % 50 == 0:
                mean_iou = float(np.nanmean(result.group_iou))
                print(f"step {step}/{cfg.steps} loss {result.loss:.4f} "
                      f"group-iou {mean_iou:.3f} "
                      f"({(time.time() - t_start) / step:.2f}s/step)", flush=True)
            if out_dir is not None and cfg.checkpoint_interval > 0 \
                    and step % cfg.checkpoint_interval == 0:
                save_checkpoint(out_dir / f"step{step:07d}.ckpt", model)
            if eval_fn is not None and eval_interval > 0 and step % eval_interval == 0:
                eval_fn(model, step)
        if out_dir is not None:
            save_checkpoint(out_dir / "final.ckpt", model)
    finally:
        if fh is not None:
            fh.close()
    return stats
