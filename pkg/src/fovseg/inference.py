"""Mask generation from a trained model.

Queries are restricted to a bounding box of +-sigma_multiplier times the
largest prompt sigma around the center.  Inside the box the mask is
predicted either densely (one query per pixel) or hierarchically: a
coarse lattice of pixels is evaluated first, the probability field is
bilinearly upsampled, and only pixels whose interpolated probability is
still uncertain get fresh model queries.  Evaluated pixels are never
re-queried, so the hierarchical query count can never exceed the dense
one, and every evaluated pixel equals the dense prediction bit for bit
(query batches are padded to a fixed chunk size to keep the arithmetic
independent of how many pixels a round asks for).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import GaussianPrompt, to_relative
from .model import Segmenter, TokenSequence, make_token_batch
from .sampler import SamplerConfig, allocate_budget, extract_patches, sample_patch_specs

# Fixed query batch size: keeps per-query results independent of the
# number of queries issued together (BLAS kernels are not subset-stable).
QUERY_CHUNK = 4096


@dataclass(frozen=True)
class InferenceConfig:
    tau_uncertain: float = 0.01
    alpha_upsample: int = 4
    k_init: int = 16
    sigma_multiplier: float = 5.0

    def __post_init__(self):
        if not (0.0 < self.tau_uncertain < 0.5):
            raise ValueError("tau_uncertain must lie in (0, 0.5)")
        if self.alpha_upsample < 2:
            raise ValueError("alpha_upsample must be >= 2")
        if self.k_init < 4:
            raise ValueError("k_init must be >= 4")
        if self.sigma_multiplier <= 0:
            raise ValueError("sigma_multiplier must be positive")


@dataclass(frozen=True)
class Box:
    """Integer pixel rectangle, half-open: x in [x0, x1), y in [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height


@dataclass
class MaskResult:
    box: Box
    probabilities: np.ndarray  # (box.height, box.width) float32
    binary: np.ndarray         # (H, W) bool, zero outside the box
    query_count: int
    rounds: int = 0
    round_queries: list[int] = field(default_factory=list)
    # Which box pixels hold an exact model output (vs interpolated values).
    evaluated: np.ndarray | None = None


@dataclass
class Encoding:
    """One foveal encoding of (image, prompt), reusable across queries."""

    prompt: GaussianPrompt
    tokens: TokenSequence
    k_enh: torch.Tensor
    v_enh: torch.Tensor
    image_shape: tuple[int, int]


def five_sigma_box(prompt: GaussianPrompt, image_dims,
                   config: InferenceConfig) -> Box:
    """Axis-aligned query box [mu +- m * sigma_iso], clipped to the image.

    sigma_iso is the largest prompt sigma, so the box is square before
    clipping.  A pixel is included when its center falls inside the
    interval.  The result is never empty.
    """
    img_h, img_w = int(image_dims[0]), int(image_dims[1])
    sigma_iso = max(prompt.sigma_a, prompt.sigma_b)
    reach = config.sigma_multiplier * sigma_iso

    def axis(mu, limit):
        lo = int(math.ceil(mu - reach - 0.5))
        hi = int(math.floor(mu + reach - 0.5)) + 1
        lo, hi = max(0, lo), min(limit, hi)
        if hi <= lo:
            pixel = min(max(int(math.floor(mu)), 0), limit - 1)
            lo, hi = pixel, pixel + 1
        return lo, hi

    x0, x1 = axis(prompt.mu_x, img_w)
    y0, y1 = axis(prompt.mu_y, img_h)
    return Box(x0=x0, y0=y0, x1=x1, y1=y1)


def encode_image(model: Segmenter, image: np.ndarray, prompt: GaussianPrompt,
                 sampler_cfg: SamplerConfig, rng: np.random.Generator) -> Encoding:
    """Foveal sampling + encoder pass + decoder key/value preparation."""
    budget = allocate_budget(prompt, sampler_cfg, model.config.patch_sizes)
    specs = sample_patch_specs(image.shape[:2], prompt, budget, sampler_cfg, rng)
    patches = extract_patches(image, specs)
    dtype = next(model.parameters()).dtype
    batch = make_token_batch([patches], [prompt], dtype=dtype)
    with torch.no_grad():
        seq = model.encode(batch)
        k_enh, v_enh = model.decoder.prepare(seq.embeddings, seq.coords)
    return Encoding(prompt=prompt, tokens=seq, k_enh=k_enh, v_enh=v_enh,
                    image_shape=(image.shape[0], image.shape[1]))


def query_probabilities(model: Segmenter, enc: Encoding,
                        px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Mask probabilities at continuous pixel coordinates.

    Queries run in fixed-size padded chunks so a coordinate's result does
    not depend on its batch companions.
    """
    rx, ry = to_relative(enc.prompt, px, py)
    coords = np.stack([rx, ry], axis=-1).reshape(-1, 2)
    n = coords.shape[0]
    dtype = enc.k_enh.dtype
    out = np.empty(n, dtype=np.float32)
    with torch.no_grad():
        for start in range(0, n, QUERY_CHUNK):
            chunk = coords[start:start + QUERY_CHUNK]
            padded = np.zeros((QUERY_CHUNK, 2), dtype=np.float64)
            padded[:chunk.shape[0]] = chunk
            q = torch.as_tensor(padded, dtype=dtype).unsqueeze(0)
            logits = model.decoder.query(enc.k_enh, enc.v_enh, q)
            probs = torch.sigmoid(logits)[0, :chunk.shape[0]]
            out[start:start + chunk.shape[0]] = probs.to(torch.float32).numpy()
    return out


def _binary_from_box(probs: np.ndarray, box: Box, image_shape) -> np.ndarray:
    binary = np.zeros(image_shape, dtype=bool)
    binary[box.y0:box.y1, box.x0:box.x1] = probs >= 0.5
    return binary


def predict_dense(model: Segmenter, enc: Encoding, box: Box) -> MaskResult:
    """One query per pixel center inside the box."""
    ys = np.arange(box.y0, box.y1) + 0.5
    xs = np.arange(box.x0, box.x1) + 0.5
    px, py = np.meshgrid(xs, ys)
    probs = query_probabilities(model, enc, px.ravel(), py.ravel())
    probs = probs.reshape(box.height, box.width)
    return MaskResult(box=box, probabilities=probs,
                      binary=_binary_from_box(probs, box, enc.image_shape),
                      query_count=box.area, rounds=0,
                      round_queries=[box.area],
                      evaluated=np.ones((box.height, box.width), dtype=bool))


def _lattice(n_samples: int, extent: int, origin: int) -> np.ndarray:
    """Evenly spaced pixel indices covering [origin, origin + extent)."""
    pos = (np.arange(n_samples) + 0.5) * extent / n_samples - 0.5
    return np.unique(np.clip(np.round(pos).astype(int), 0, extent - 1)) + origin


def _interp_axis(values, src_pos, dst_pos, axis):
    """Linear interpolation along one axis of a 2D grid."""
    values = np.moveaxis(values, axis, 0)
    if len(src_pos) == 1:
        out = np.repeat(values, len(dst_pos), axis=0)
        return np.moveaxis(out, 0, axis)
    idx = np.searchsorted(src_pos, dst_pos, side="right") - 1
    idx = np.clip(idx, 0, len(src_pos) - 2)
    x0 = src_pos[idx]
    x1 = src_pos[idx + 1]
    w = np.clip((dst_pos - x0) / np.maximum(x1 - x0, 1e-12), 0.0, 1.0)
    out = values[idx] * (1.0 - w)[:, None] + values[idx + 1] * w[:, None]
    return np.moveaxis(out, 0, axis)


def hierarchical_refine(model: Segmenter, enc: Encoding, box: Box,
                        config: InferenceConfig) -> MaskResult:
    """Coarse-to-fine prediction re-querying only uncertain pixels.

    Round 0 evaluates a k_init-per-side lattice of box pixels.  Each
    later round upsamples the probability lattice by alpha (bilinear),
    re-queries lattice pixels whose interpolated probability falls inside
    [tau, 1-tau] and keeps interpolated values elsewhere.  The round
    count is floor(log_alpha(max(h, w) / k_init)); a final partial round
    brings the lattice to exact box resolution.  Pixels already holding
    an exact model value are never queried twice.
    """
    h, w = box.height, box.width
    probs = np.zeros((h, w), dtype=np.float32)
    evaluated = np.zeros((h, w), dtype=bool)
    tau = config.tau_uncertain
    alpha = config.alpha_upsample

    k_target = max(h, w)
    n_rounds = 0
    if k_target > config.k_init:
        n_rounds = int(math.floor(math.log(k_target / config.k_init, alpha)))

    def level_sizes(r):
        scale = config.k_init * alpha ** r
        return min(scale, h), min(scale, w)

    round_queries: list[int] = []

    def evaluate(ys_px, xs_px):
        """Query the model at a lattice product and store exact values."""
        py, px = np.meshgrid(ys_px + 0.5, xs_px + 0.5, indexing="ij")
        vals = query_probabilities(model, enc, px.ravel(), py.ravel())
        probs[np.ix_(ys_px - box.y0, xs_px - box.x0)] = vals.reshape(
            len(ys_px), len(xs_px))
        evaluated[np.ix_(ys_px - box.y0, xs_px - box.x0)] = True
        round_queries.append(len(ys_px) * len(xs_px))

    sy, sx = level_sizes(0)
    ys = _lattice(sy, h, box.y0)
    xs = _lattice(sx, w, box.x0)
    evaluate(ys, xs)
    grid = probs[np.ix_(ys - box.y0, xs - box.x0)].copy()
    if len(ys) == h and len(xs) == w:
        return MaskResult(box=box, probabilities=grid,
                          binary=_binary_from_box(grid, box, enc.image_shape),
                          query_count=int(evaluated.sum()), rounds=0,
                          round_queries=round_queries, evaluated=evaluated)

    sizes = [level_sizes(r) for r in range(1, n_rounds + 1)]
    if not sizes or sizes[-1] != (h, w):
        sizes.append((h, w))
    for sy, sx in sizes:
        new_ys = _lattice(sy, h, box.y0)
        new_xs = _lattice(sx, w, box.x0)
        interp = _interp_axis(grid, ys.astype(float), new_ys.astype(float), axis=0)
        interp = _interp_axis(interp, xs.astype(float), new_xs.astype(float), axis=1)
        interp = interp.astype(np.float32)
        iy = new_ys - box.y0
        ix = new_xs - box.x0
        known = evaluated[np.ix_(iy, ix)]
        uncertain = (interp >= tau) & (interp <= 1.0 - tau) & ~known
        if uncertain.any():
            uy, ux = np.nonzero(uncertain)
            py = new_ys[uy] + 0.5
            px = new_xs[ux] + 0.5
            vals = query_probabilities(model, enc, px.astype(float), py.astype(float))
            probs[iy[uy], ix[ux]] = vals
            evaluated[iy[uy], ix[ux]] = True
            round_queries.append(len(vals))
        else:
            round_queries.append(0)
        grid = np.where(evaluated[np.ix_(iy, ix)],
                        probs[np.ix_(iy, ix)], interp)
        ys, xs = new_ys, new_xs

    final = grid  # the last lattice spans every box pixel
    probs_out = final.astype(np.float32)
    return MaskResult(box=box, probabilities=probs_out,
                      binary=_binary_from_box(probs_out, box, enc.image_shape),
                      query_count=int(evaluated.sum()),
                      rounds=len(round_queries) - 1,
                      round_queries=round_queries, evaluated=evaluated)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; both empty gives 1."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def segment(model: Segmenter, image: np.ndarray, prompt: GaussianPrompt,
            infer_cfg: InferenceConfig, sampler_cfg: SamplerConfig,
            rng: np.random.Generator, hierarchical: bool = False) -> MaskResult:
    """End-to-end mask prediction for one image and prompt."""
    enc = encode_image(model, image, prompt, sampler_cfg, rng)
    box = five_sigma_box(prompt, image.shape[:2], infer_cfg)
    if hierarchical:
        return hierarchical_refine(model, enc, box, infer_cfg)
    return predict_dense(model, enc, box)
