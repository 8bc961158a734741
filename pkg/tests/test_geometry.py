import math

import numpy as np
import pytest

from fovseg.geometry import (
    SIGMA_FLOOR,
    AugmentationSpec,
    EmptyMaskError,
    GaussianPrompt,
    NotPSDError,
    decompose_covariance,
    from_relative,
    mask_moments,
    perturb_prompt,
    rebuild_covariance,
    to_relative,
)

from conftest import random_blob_mask


def moments_oracle(mask):
    """Brute-force first/second moments over every set pixel."""
    n = 0
    sx = sy = 0.0
    pts = []
    for y in range(mask.shape[0]):
        for x in range(mask.shape[1]):
            if mask[y, x]:
                pts.append((x + 0.5, y + 0.5))
                sx += x + 0.5
                sy += y + 0.5
                n += 1
    mx, my = sx / n, sy / n
    cxx = cxy = cyy = 0.0
    for px, py in pts:
        cxx += (px - mx) ** 2
        cxy += (px - mx) * (py - my)
        cyy += (py - my) ** 2
    return mx, my, cxx / n, cxy / n, cyy / n


class TestMaskMoments:
    def test_single_pixel_floors_to_half_pixel_sigma(self):
        mask = np.zeros((10, 12), dtype=bool)
        mask[3, 7] = True
        p = mask_moments(mask)
        assert (p.mu_x, p.mu_y) == (7.5, 3.5)
        assert p.cov_xx == p.cov_yy == SIGMA_FLOOR ** 2
        assert p.cov_xy == 0.0
        assert p.sigma_a == p.sigma_b == SIGMA_FLOOR

    def test_solid_square(self):
        # 3x3 block centered on pixel (5, 5): per-axis variance of the
        # offsets {-1, 0, 1} is 2/3.
        mask = np.zeros((12, 12), dtype=bool)
        mask[4:7, 4:7] = True
        p = mask_moments(mask)
        assert (p.mu_x, p.mu_y) == (5.5, 5.5)
        assert p.cov_xx == pytest.approx(2.0 / 3.0, rel=1e-12)
        assert p.cov_yy == pytest.approx(2.0 / 3.0, rel=1e-12)
        assert p.cov_xy == pytest.approx(0.0, abs=1e-12)

    def test_matches_bruteforce_oracle(self, rng):
        for _ in range(30):
            mask = random_blob_mask(rng, 40, 40)
            p = mask_moments(mask)
            mx, my, cxx, cxy, cyy = moments_oracle(mask)
            assert p.mu_x == pytest.approx(mx, rel=1e-9)
            assert p.mu_y == pytest.approx(my, rel=1e-9)
            assert p.cov_xx == pytest.approx(cxx, rel=1e-9)
            assert p.cov_xy == pytest.approx(cxy, rel=1e-9, abs=1e-9)
            assert p.cov_yy == pytest.approx(cyy, rel=1e-9)

    def test_empty_mask_raises(self):
        with pytest.raises(EmptyMaskError):
            mask_moments(np.zeros((5, 5), dtype=bool))


class TestDecomposeCovariance:
    def test_axis_aligned_major_x(self):
        assert decompose_covariance(np.diag([9.0, 4.0])) == (3.0, 2.0, 1.0, 0.0)

    def test_axis_aligned_major_y(self):
        assert decompose_covariance(np.diag([4.0, 9.0])) == (3.0, 2.0, 0.0, 1.0)

    def test_diagonal_cross_terms(self):
        # [[5,3],[3,5]]: eigenvalues 8 and 2, major axis along (1,1).
        sa, sb, ta, tb = decompose_covariance(np.array([[5.0, 3.0], [3.0, 5.0]]))
        assert sa == pytest.approx(math.sqrt(8.0), rel=1e-12)
        assert sb == pytest.approx(math.sqrt(2.0), rel=1e-12)
        assert ta == pytest.approx(math.sqrt(0.5), rel=1e-12)
        assert tb == pytest.approx(math.sqrt(0.5), rel=1e-12)

    def test_not_psd_raises(self):
        with pytest.raises(NotPSDError):
            decompose_covariance(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_tiny_negative_clamped(self):
        sa, sb, ta, tb = decompose_covariance(np.array([[1.0, 0.0], [0.0, -1e-8]]))
        assert sb == SIGMA_FLOOR

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            decompose_covariance(np.array([[1.0, 0.5], [0.2, 1.0]]))

    def test_rebuild_roundtrip(self, rng):
        for _ in range(200):
            sa = rng.uniform(1.0, 50.0)
            sb = rng.uniform(0.6, sa * 0.95)
            theta = rng.uniform(-math.pi / 2, math.pi / 2)
            ta, tb = math.cos(theta), math.sin(theta)
            if ta < 0 or (ta == 0 and tb < 0):
                ta, tb = -ta, -tb
            cov = rebuild_covariance(sa, sb, ta, tb)
            mat = np.array([[cov[0], cov[1]], [cov[1], cov[2]]])
            ra, rb, rta, rtb = decompose_covariance(mat)
            assert ra == pytest.approx(sa, rel=1e-7)
            assert rb == pytest.approx(sb, rel=1e-7)
            # Sign convention: eigenvector may come back flipped.
            dot = abs(rta * ta + rtb * tb)
            assert dot == pytest.approx(1.0, abs=1e-7)

    def test_unit_eigenvector(self, rng):
        for _ in range(100):
            a = rng.uniform(0.5, 10, size=(2, 2))
            cov = a @ a.T
            _, _, ta, tb = decompose_covariance(cov)
            assert ta * ta + tb * tb == pytest.approx(1.0, abs=1e-9)
            assert ta >= 0


class TestRelativeFrame:
    def test_axis_aligned_example(self):
        p = GaussianPrompt.from_moments(10.0, 20.0, np.diag([9.0, 4.0]))
        assert to_relative(p, 16.0, 24.0) == (2.0, 2.0)

    def test_center_maps_to_origin(self, rng):
        for _ in range(20):
            cov = _random_cov(rng)
            p = GaussianPrompt.from_moments(rng.uniform(-50, 50),
                                            rng.uniform(-50, 50), cov)
            rx, ry = to_relative(p, p.mu_x, p.mu_y)
            assert rx == 0.0 and ry == 0.0

    def test_roundtrip(self, rng):
        for _ in range(1000):
            p = GaussianPrompt.from_moments(rng.uniform(-100, 100),
                                            rng.uniform(-100, 100),
                                            _random_cov(rng))
            x, y = rng.uniform(-200, 200, size=2)
            rx, ry = to_relative(p, x, y)
            bx, by = from_relative(p, rx, ry)
            assert abs(bx - x) < 1e-9 and abs(by - y) < 1e-9

    def test_one_sigma_ellipse_maps_to_unit_circle(self, rng):
        p = GaussianPrompt.from_moments(12.0, -7.0, _random_cov(rng))
        phis = np.linspace(0, 2 * math.pi, 360, endpoint=False)
        # Boundary of the 1-sigma ellipse, built in the eigen frame.
        ex = p.sigma_a * np.cos(phis)
        ey = p.sigma_b * np.sin(phis)
        bx = p.mu_x + p.theta_a * ex - p.theta_b * ey
        by = p.mu_y + p.theta_b * ex + p.theta_a * ey
        rx, ry = to_relative(p, bx, by)
        assert np.abs(rx ** 2 + ry ** 2 - 1.0).max() < 1e-6


def _random_cov(rng):
    a = rng.uniform(-5, 5, size=(2, 2)) + np.diag([6.0, 6.0])
    return a @ a.T


class TestPerturbPrompt:
    def test_zero_magnitudes_identity_bitwise(self, rng):
        p = GaussianPrompt.from_moments(5.0, 6.0, np.diag([4.0, 2.0]))
        spec = AugmentationSpec(max_center_shift=0.0, sigma_scale_range=(1.0, 1.0),
                                max_rotation=0.0, token_count_jitter=0.0)
        assert perturb_prompt(p, spec, rng) == p

    def test_deterministic_given_seed(self):
        p = GaussianPrompt.from_moments(5.0, 6.0, np.diag([16.0, 4.0]))
        spec = AugmentationSpec()
        a = perturb_prompt(p, spec, np.random.default_rng(7))
        b = perturb_prompt(p, spec, np.random.default_rng(7))
        assert a == b

    def test_invariants_hold(self, rng):
        spec = AugmentationSpec()
        for _ in range(200):
            p = GaussianPrompt.from_moments(0.0, 0.0, _random_cov(rng))
            q = perturb_prompt(p, spec, rng)
            assert q.sigma_a >= q.sigma_b >= SIGMA_FLOOR
            assert q.theta_a ** 2 + q.theta_b ** 2 == pytest.approx(1.0, abs=1e-9)
            assert q.cov_xy ** 2 <= q.cov_xx * q.cov_yy + 1e-9

    def test_shift_distribution_centered(self):
        # Mean center shift over many draws stays within 3 standard errors
        # of zero (uniform on +-0.1 sigma_a per axis).
        p = GaussianPrompt.from_moments(0.0, 0.0, np.diag([100.0, 100.0]))
        spec = AugmentationSpec()
        rng = np.random.default_rng(42)
        n = 10_000
        shifts = np.array([(q.mu_x, q.mu_y)
                           for q in (perturb_prompt(p, spec, rng)
                                     for _ in range(n))])
        half_width = spec.max_center_shift * p.sigma_a
        se = (2 * half_width / math.sqrt(12)) / math.sqrt(n)
        assert np.all(np.abs(shifts.mean(axis=0)) < 3 * se)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            AugmentationSpec(max_center_shift=-0.1)
        with pytest.raises(ValueError):
            AugmentationSpec(sigma_scale_range=(1.1, 1.5))
