import math

import numpy as np
import pytest

from fovseg.geometry import GaussianPrompt
from fovseg.sampler import (
    PatchBudget,
    PatchSpec,
    SamplerConfig,
    SpatialHashGrid,
    allocate_budget,
    extract_patch,
    extract_patches,
    grid_probe,
    replay_acceptances,
    sample_patch_specs,
)

SIZES = (1, 2, 4, 8, 16)


def isotropic_prompt(sigma, mu=(0.0, 0.0)):
    return GaussianPrompt.from_moments(mu[0], mu[1],
                                       np.diag([sigma ** 2, sigma ** 2]))


def bilinear_oracle(image, cx, cy, size):
    """Per-pixel bilinear extraction in float64 with edge clamping."""
    h, w, nc = image.shape
    out = np.empty((size, size, nc))
    for v in range(size):
        for u in range(size):
            x = cx + (u - (size - 1) / 2)
            y = cy + (v - (size - 1) / 2)
            tx, ty = x - 0.5, y - 0.5
            x0, y0 = math.floor(tx), math.floor(ty)
            wx, wy = tx - x0, ty - y0
            x0c, x1c = np.clip([x0, x0 + 1], 0, w - 1)
            y0c, y1c = np.clip([y0, y0 + 1], 0, h - 1)
            for c in range(nc):
                top = image[y0c, x0c, c] * (1 - wx) + image[y0c, x1c, c] * wx
                bot = image[y1c, x0c, c] * (1 - wx) + image[y1c, x1c, c] * wx
                out[v, u, c] = top * (1 - wy) + bot * wy
    return out


class TestAllocateBudget:
    def test_reference_allocation(self):
        # sigma 32 isotropic: area = pi * 64 * 64 = 12868, so the default
        # counts round to 50 / 201 / 804 / 3217 / 12868 from coarse to
        # fine and the min-then-remainder rule yields these counts.
        cfg = SamplerConfig(coverage=1.0, tokens=512)
        budget = allocate_budget(isotropic_prompt(32.0), cfg, SIZES)
        assert budget.sizes == SIZES
        assert budget.counts == (0, 0, 261, 201, 50)
        assert budget.total == 512

    def test_budget_always_sums_to_n(self, rng):
        for _ in range(1000):
            sigma_a = rng.uniform(0.5, 200.0)
            sigma_b = rng.uniform(0.5, sigma_a)
            prompt = GaussianPrompt.from_moments(
                0, 0, np.diag([sigma_a ** 2, sigma_b ** 2]))
            cfg = SamplerConfig(coverage=rng.uniform(0.11, 1.99),
                                tokens=int(rng.integers(5, 2000)))
            assert allocate_budget(prompt, cfg, SIZES).total == cfg.tokens

    def test_degenerate_prompt_all_finest(self):
        cfg = SamplerConfig(coverage=0.11, tokens=512)
        budget = allocate_budget(isotropic_prompt(0.25), cfg, SIZES)
        assert budget.counts == (512, 0, 0, 0, 0)

    def test_monotone_in_coverage(self):
        # With an effectively unlimited budget the non-finest counts equal
        # the per-size defaults, so they must not shrink as c grows.
        prompt = isotropic_prompt(17.0)
        prev = None
        for c in np.linspace(0.15, 1.95, 20):
            cfg = SamplerConfig(coverage=float(c), tokens=10**6)
            counts = allocate_budget(prompt, cfg, SIZES).counts
            if prev is not None:
                assert all(a >= b for a, b in zip(counts[1:], prev[1:]))
            prev = counts

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(coverage=0.05)
        with pytest.raises(ValueError):
            SamplerConfig(tau_overlap=5.0)


class TestSpatialHashGrid:
    def test_empty_probe_is_zero(self):
        grid = SpatialHashGrid(1.0)
        assert grid_probe(grid, PatchSpec(50.0, 50.0, 16, 4)) == 0.0

    def test_identical_candidate_scores_one(self):
        grid = SpatialHashGrid(1.0)
        spec = PatchSpec(50.0, 50.0, 16, 4)
        grid.insert(spec)
        assert grid_probe(grid, spec) == 1.0

    def test_half_overlap_scores_half(self):
        grid = SpatialHashGrid(1.0)
        grid.insert(PatchSpec(50.0, 50.0, 16, 4))
        assert grid_probe(grid, PatchSpec(58.0, 50.0, 16, 4)) == 0.5

    def test_only_touched_cells_stored(self):
        grid = SpatialHashGrid(1.0)
        grid.insert(PatchSpec(10.0, 10.0, 4, 2))
        assert len(grid.counts) == 16


class TestSamplePatchSpecs:
    def test_deterministic_given_seed(self):
        prompt = isotropic_prompt(20.0, mu=(64.0, 64.0))
        cfg = SamplerConfig(tokens=256)
        budget = allocate_budget(prompt, cfg, SIZES)
        a = sample_patch_specs((128, 128), prompt, budget, cfg,
                               np.random.default_rng(5))
        b = sample_patch_specs((128, 128), prompt, budget, cfg,
                               np.random.default_rng(5))
        assert a == b

    def test_completes_under_tight_overlap(self):
        # Tiny sigma forces heavy rejection; the ratchet still returns N.
        prompt = isotropic_prompt(0.5, mu=(32.0, 32.0))
        cfg = SamplerConfig(tokens=512, tau_overlap=4.0)
        budget = allocate_budget(prompt, cfg, SIZES)
        specs = sample_patch_specs((64, 64), prompt, budget, cfg,
                                   np.random.default_rng(0))
        assert len(specs) == 512

    def test_footprints_inside_image(self, rng):
        prompt = isotropic_prompt(60.0, mu=(10.0, 120.0))
        cfg = SamplerConfig(tokens=256, tau_overlap=4.0)
        budget = allocate_budget(prompt, cfg, SIZES)
        specs = sample_patch_specs((128, 256), prompt, budget, cfg, rng)
        for s in specs:
            half = s.size / 2
            assert s.center_x - half >= 0 and s.center_x + half <= 256
            assert s.center_y - half >= 0 and s.center_y + half <= 128

    def test_replay_confirms_thresholds(self, rng):
        for _ in range(50):
            sigma = rng.uniform(1.0, 50.0)
            prompt = isotropic_prompt(sigma, mu=(128.0, 128.0))
            cfg = SamplerConfig(tokens=128, tau_overlap=float(rng.uniform(0, 4)))
            budget = allocate_budget(prompt, cfg, SIZES)
            specs, trace = sample_patch_specs((256, 256), prompt, budget, cfg,
                                              rng, return_trace=True)
            assert replay_acceptances((256, 256), specs, trace, cfg, SIZES)

    def test_sample_mean_matches_gaussian(self):
        # 10k accepted 1x1 centers: the empirical mean must sit within 3
        # standard errors of mu.
        n = 10_000
        sigma = 32.0
        prompt = isotropic_prompt(sigma, mu=(2048.0, 2048.0))
        budget = PatchBudget(sizes=(1,), counts=(n,))
        cfg = SamplerConfig(tokens=n, tau_overlap=4.0)
        specs = sample_patch_specs((4096, 4096), prompt, budget, cfg,
                                   np.random.default_rng(11))
        cx = np.array([s.center_x for s in specs])
        cy = np.array([s.center_y for s in specs])
        se = sigma / math.sqrt(n)
        assert abs(cx.mean() - 2048.0) < 3 * se
        assert abs(cy.mean() - 2048.0) < 3 * se


class TestExtractPatch:
    def test_aligned_even_patch_copies_pixels(self, rng):
        image = rng.random((32, 32, 3)).astype(np.float32)
        # Size 16 at an integer center: samples land exactly on pixel
        # centers, so the patch equals the covered block.
        spec = PatchSpec(16.0, 16.0, 16, 4)
        patch = extract_patch(image, spec)
        assert np.array_equal(patch.pixels, image[8:24, 8:24])

    def test_aligned_single_pixel(self, rng):
        image = rng.random((8, 8, 3)).astype(np.float32)
        patch = extract_patch(image, PatchSpec(3.5, 5.5, 1, 0))
        assert np.array_equal(patch.pixels[0, 0], image[5, 3])

    def test_constant_image(self):
        image = np.full((20, 20, 3), 0.3, dtype=np.float32)
        patch = extract_patch(image, PatchSpec(9.37, 11.81, 8, 3))
        assert np.allclose(patch.pixels, 0.3, atol=1e-7)

    def test_matches_bilinear_oracle(self, rng):
        image = rng.random((64, 64, 3)).astype(np.float32)
        for _ in range(100):
            size = int(rng.choice(SIZES))
            half = size / 2
            cx = rng.uniform(half, 64 - half)
            cy = rng.uniform(half, 64 - half)
            patch = extract_patch(image, PatchSpec(cx, cy, size, 0))
            oracle = bilinear_oracle(image.astype(np.float64), cx, cy, size)
            assert np.abs(patch.pixels - oracle).max() <= 1e-6

    def test_edge_clamped_reads(self):
        image = np.arange(12, dtype=np.float32).reshape(2, 2, 3) / 12
        patch = extract_patch(image, PatchSpec(1.0, 1.0, 4, 2))
        oracle = bilinear_oracle(image.astype(np.float64), 1.0, 1.0, 4)
        assert np.abs(patch.pixels - oracle).max() <= 1e-6

    def test_extract_patches_preserves_order(self, rng):
        image = rng.random((64, 64, 3)).astype(np.float32)
        specs = [PatchSpec(float(rng.uniform(8, 56)), float(rng.uniform(8, 56)),
                           int(rng.choice(SIZES)), 0) for _ in range(40)]
        patches = extract_patches(image, specs)
        for spec, patch in zip(specs, patches):
            assert patch.spec == spec
            single = extract_patch(image, spec)
            assert np.array_equal(patch.pixels, single.pixels)
