"""Foveated multi-resolution patch sampling.

Given a Gaussian prompt, a fixed token budget N is split across patch
sizes, densest at the finest resolutions near the object center, then
patch centers are rejection-sampled from the prompt Gaussian against a
spatial hash grid that limits overlap.  Patch pixels are extracted with
sub-pixel bilinear interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geometry import GaussianPrompt


@dataclass(frozen=True)
class SamplerConfig:
    """Knobs for budget allocation and overlap-limited sampling.

    ``coverage`` scales how densely patches tile the Gaussian's inner
    area; ``tau_overlap`` is the maximum tolerated mean pre-existing
    coverage (in layers, 0..4) over a candidate footprint; ``grid_cell``
    of 0 means "use the finest patch size".
    """

    coverage: float = 1.0
    tau_overlap: float = 1.0
    tokens: int = 512
    max_attempts_per_patch: int = 64
    grid_cell: float = 0.0

    def __post_init__(self):
        if not (0.1 < self.coverage < 2.0):
            raise ValueError("coverage must lie in (0.1, 2)")
        if not (0.0 <= self.tau_overlap <= 4.0):
            raise ValueError("tau_overlap must lie in [0, 4]")
        if self.tokens < 1:
            raise ValueError("tokens must be positive")
        if self.max_attempts_per_patch < 1:
            raise ValueError("max_attempts_per_patch must be positive")
        if self.grid_cell < 0:
            raise ValueError("grid_cell must be >= 0")

    def cell_size(self, sizes) -> float:
        return self.grid_cell if self.grid_cell > 0 else float(sizes[0])


@dataclass(frozen=True)
class PatchBudget:
    sizes: tuple[int, ...]
    counts: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.counts)


@dataclass(frozen=True)
class PatchSpec:
    center_x: float
    center_y: float
    size: int
    resolution_index: int


@dataclass
class Patch:
    spec: PatchSpec
    pixels: np.ndarray  # (size, size, 3) float32 in [0, 1]


@dataclass
class SampleTrace:
    """Per-acceptance probe score and threshold in force, for replay."""

    scores: np.ndarray
    thresholds: np.ndarray


def allocate_budget(prompt: GaussianPrompt, config: SamplerConfig,
                    sizes) -> PatchBudget:
    """Split the token budget N across patch sizes, coarse to fine.

    The per-size default count is round(c * A / p_i^2) where A is the
    2-sigma ellipse area pi * (2 sigma_a) * (2 sigma_b).  Starting at the
    coarsest size, each count is capped by the remaining budget; whatever
    is left after the finest size is added to it, so the counts always sum
    to N exactly.
    """
    sizes = tuple(int(p) for p in sizes)
    if len(sizes) == 0 or any(p < 1 for p in sizes):
        raise ValueError("sizes must be positive integers")
    if list(sizes) != sorted(set(sizes)):
        raise ValueError("sizes must be strictly ascending")
    n_total = config.tokens
    if n_total < len(sizes):
        raise ValueError("token budget must be >= number of patch sizes")
    area = math.pi * (2.0 * prompt.sigma_a) * (2.0 * prompt.sigma_b)
    defaults = [int(round(config.coverage * area / (p * p))) for p in sizes]
    counts = [0] * len(sizes)
    remaining = n_total
    for i in range(len(sizes) - 1, -1, -1):
        counts[i] = min(defaults[i], remaining)
        remaining -= counts[i]
    counts[0] += remaining
    return PatchBudget(sizes=sizes, counts=tuple(counts))


def _footprint_cells(spec: PatchSpec, cell: float):
    half = 0.5 * spec.size
    x0, x1 = _kernels.cell_range(spec.center_x - half, spec.center_x + half, cell)
    y0, y1 = _kernels.cell_range(spec.center_y - half, spec.center_y + half, cell)
    return x0, x1, y0, y1


class SpatialHashGrid:
    """Sparse map from grid cell to the number of patches covering it."""

    def __init__(self, cell: float):
        if cell <= 0:
            raise ValueError("cell size must be positive")
        self.cell = float(cell)
        self.counts: dict[tuple[int, int], int] = {}

    def probe(self, spec: PatchSpec) -> float:
        """Mean existing coverage count over the cells under the footprint."""
        x0, x1, y0, y1 = _footprint_cells(spec, self.cell)
        total = 0
        n = 0
        for iy in range(y0, y1):
            for ix in range(x0, x1):
                total += self.counts.get((ix, iy), 0)
                n += 1
        return total / n

    def insert(self, spec: PatchSpec):
        x0, x1, y0, y1 = _footprint_cells(spec, self.cell)
        for iy in range(y0, y1):
            for ix in range(x0, x1):
                key = (ix, iy)
                self.counts[key] = self.counts.get(key, 0) + 1


def grid_probe(grid: SpatialHashGrid, spec: PatchSpec) -> float:
    return grid.probe(spec)


def sample_patch_specs(image_dims, prompt: GaussianPrompt, budget: PatchBudget,
                       config: SamplerConfig, rng: np.random.Generator,
                       return_trace: bool = False):
    """Sample exactly ``budget.total`` patch specs, coarse to fine.

    ``image_dims`` is (height, width) like an array shape.  Candidates are
    drawn from the prompt Gaussian, clamped so footprints stay inside the
    image, and rejected while their mean pre-existing coverage exceeds the
    effective threshold (which relaxes by doubling after
    ``max_attempts_per_patch`` consecutive failures, and stays relaxed).
    """
    img_h, img_w = int(image_dims[0]), int(image_dims[1])
    if img_h < 1 or img_w < 1:
        raise ValueError("image dims must be >= 1")
    cell = config.cell_size(budget.sizes)
    n = budget.total
    gw = max(1, int(math.ceil(img_w / cell)))
    gh = max(1, int(math.ceil(img_h / cell)))
    counts = np.zeros((gh, gw), dtype=np.int32)
    out_cx = np.empty(n, dtype=np.float64)
    out_cy = np.empty(n, dtype=np.float64)
    out_res = np.empty(n, dtype=np.int64)
    out_score = np.empty(n, dtype=np.float64)
    out_thresh = np.empty(n, dtype=np.float64)
    seed = int(rng.integers(0, 2**32))
    filled = _kernels.sample_specs(
        seed, prompt.mu_x, prompt.mu_y, prompt.sigma_a, prompt.sigma_b,
        prompt.theta_a, prompt.theta_b,
        np.asarray(budget.sizes, dtype=np.int64),
        np.asarray(budget.counts, dtype=np.int64),
        float(config.tau_overlap), int(config.max_attempts_per_patch),
        float(cell), float(img_w), float(img_h), counts,
        out_cx, out_cy, out_res, out_score, out_thresh)
    assert filled == n
    specs = [PatchSpec(float(out_cx[i]), float(out_cy[i]),
                       budget.sizes[out_res[i]], int(out_res[i]))
             for i in range(n)]
    if return_trace:
        return specs, SampleTrace(scores=out_score, thresholds=out_thresh)
    return specs


def _as_image(image) -> np.ndarray:
    image = np.ascontiguousarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ValueError("image must be (H, W, C)")
    return image


def extract_patch(image, spec: PatchSpec) -> Patch:
    """Bilinearly extract one patch (edge-clamped sub-pixel reads)."""
    image = _as_image(image)
    out = np.empty((1, spec.size, spec.size, image.shape[2]), dtype=np.float32)
    _kernels.extract_bilinear(image, np.array([spec.center_x]),
                              np.array([spec.center_y]), spec.size, out)
    return Patch(spec=spec, pixels=out[0])


def extract_pixels_grouped(image, specs) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Extract all patches, one batched kernel call per distinct size.

    Returns a dict mapping size -> (indices into ``specs``, pixel block of
    shape (m, size, size, C)).
    """
    image = _as_image(image)
    sizes = np.array([s.size for s in specs], dtype=np.int64)
    cx = np.array([s.center_x for s in specs], dtype=np.float64)
    cy = np.array([s.center_y for s in specs], dtype=np.float64)
    grouped = {}
    for size in np.unique(sizes):
        idx = np.nonzero(sizes == size)[0]
        out = np.empty((idx.size, size, size, image.shape[2]), dtype=np.float32)
        _kernels.extract_bilinear(image, cx[idx], cy[idx], int(size), out)
        grouped[int(size)] = (idx, out)
    return grouped


def extract_patches(image, specs) -> list[Patch]:
    """Extract patches for every spec, preserving spec order."""
    grouped = extract_pixels_grouped(image, specs)
    out: list[Patch | None] = [None] * len(specs)
    for _, (idx, pixels) in grouped.items():
        for j, i in enumerate(idx):
            out[i] = Patch(spec=specs[i], pixels=pixels[j])
    return out


def replay_acceptances(image_dims, specs, trace: SampleTrace,
                       config: SamplerConfig, sizes) -> bool:
    """Re-run the acceptance sequence through the reference hash grid.

    Verifies that, replayed in order, every accepted spec's probe score
    matches the recorded score exactly and respects the threshold in force
    at that step, and that the threshold sequence only ever ratchets up
    from ``tau_overlap`` by doublings.
    """
    grid = SpatialHashGrid(config.cell_size(sizes))
    allowed = config.tau_overlap
    for i, spec in enumerate(specs):
        score = grid.probe(spec)
        if score != trace.scores[i]:
            return False
        thresh = trace.thresholds[i]
        while thresh > allowed:
            allowed = allowed * 2.0 if allowed > 0.0 else 0.25
        if thresh != allowed or score > thresh:
            return False
        grid.insert(spec)
    return True
