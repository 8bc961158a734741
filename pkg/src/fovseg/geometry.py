"""Gaussian prompt geometry.

A segmentation target is summarized by a 2D Gaussian N(mu, Sigma): center,
extent and orientation of the object in image pixel coordinates.  The
continuous image frame puts pixel (ix, iy) at center (ix + 0.5, iy + 0.5),
with x running along columns and y along rows.

Everything downstream (patch sampling, positional embeddings, query
coordinates) works in the prompt-relative frame produced by
:func:`to_relative`: translate to the Gaussian center, rotate into the
eigen-frame of the covariance and divide by the per-axis sigmas, so the
1-sigma ellipse maps onto the unit circle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Smallest representable extent: half a pixel.  Keeps degenerate prompts
# (single-pixel masks, collinear masks) usable without division blow-ups.
SIGMA_FLOOR = 0.5


class EmptyMaskError(ValueError):
    """Raised when a prompt is requested for a mask with no set pixels."""


class NotPSDError(ValueError):
    """Raised when a covariance matrix has a clearly negative eigenvalue."""


@dataclass(frozen=True)
class GaussianPrompt:
    """2D Gaussian object prompt with its precomputed eigen-frame.

    ``sigma_a >= sigma_b >= SIGMA_FLOOR`` are the square roots of the
    covariance eigenvalues; ``(theta_a, theta_b)`` is the unit eigenvector
    of the major axis, i.e. (cos, sin) of the major-axis angle, with the
    sign convention ``theta_a >= 0`` (and ``theta_b >= 0`` if
    ``theta_a == 0``).
    """

    mu_x: float
    mu_y: float
    cov_xx: float
    cov_xy: float
    cov_yy: float
    sigma_a: float
    sigma_b: float
    theta_a: float
    theta_b: float

    @classmethod
    def from_moments(cls, mu_x, mu_y, cov) -> "GaussianPrompt":
        """Build a prompt from a center and a symmetric 2x2 covariance.

        Sigmas are floored at ``SIGMA_FLOOR`` and the stored covariance is
        rebuilt from the floored frame, so all invariants hold even for
        degenerate inputs.
        """
        sigma_a, sigma_b, theta_a, theta_b = decompose_covariance(cov)
        cov_xx, cov_xy, cov_yy = rebuild_covariance(sigma_a, sigma_b, theta_a, theta_b)
        return cls(float(mu_x), float(mu_y), cov_xx, cov_xy, cov_yy,
                   sigma_a, sigma_b, theta_a, theta_b)

    @property
    def covariance(self) -> np.ndarray:
        return np.array([[self.cov_xx, self.cov_xy],
                         [self.cov_xy, self.cov_yy]], dtype=np.float64)


@dataclass(frozen=True)
class AugmentationSpec:
    """Magnitudes for random prompt perturbation.

    ``max_center_shift`` is a fraction of ``sigma_a``; ``sigma_scale_range``
    is a multiplicative interval containing 1; ``max_rotation`` is in
    radians; ``token_count_jitter`` is a fraction of the token budget N
    (consumed by the training loop, not by :func:`perturb_prompt`).
    """

    max_center_shift: float = 0.1
    sigma_scale_range: tuple[float, float] = (0.8, 1.25)
    max_rotation: float = 0.1
    token_count_jitter: float = 0.25

    def __post_init__(self):
        lo, hi = self.sigma_scale_range
        if self.max_center_shift < 0 or self.max_rotation < 0 or self.token_count_jitter < 0:
            raise ValueError("augmentation magnitudes must be >= 0")
        if not (lo <= 1.0 <= hi):
            raise ValueError("sigma_scale_range must contain 1")

    @property
    def is_identity(self) -> bool:
        lo, hi = self.sigma_scale_range
        return (self.max_center_shift == 0 and self.max_rotation == 0
                and lo == 1.0 and hi == 1.0)


def decompose_covariance(cov) -> tuple[float, float, float, float]:
    """Eigen-decompose a symmetric 2x2 covariance.

    Returns ``(sigma_a, sigma_b, theta_a, theta_b)`` where the sigmas are
    the floored square roots of the eigenvalues (major first) and
    ``(theta_a, theta_b)`` is the sign-normalized major-axis eigenvector.

    Raises ``NotPSDError`` for eigenvalues below -1e-6; tiny negatives from
    floating-point noise are clamped to zero.
    """
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (2, 2):
        raise ValueError(f"expected a 2x2 matrix, got shape {cov.shape}")
    if abs(cov[0, 1] - cov[1, 0]) > 1e-9:
        raise ValueError("covariance must be symmetric within 1e-9")
    cxx, cyy = cov[0, 0], cov[1, 1]
    cxy = 0.5 * (cov[0, 1] + cov[1, 0])

    # Closed-form 2x2 eigensolve.
    half_trace = 0.5 * (cxx + cyy)
    half_gap = math.hypot(0.5 * (cxx - cyy), cxy)
    lam_max = half_trace + half_gap
    lam_min = half_trace - half_gap
    for lam in (lam_max, lam_min):
        if lam < -1e-6:
            raise NotPSDError(f"negative eigenvalue {lam}")
    lam_max = max(lam_max, 0.0)
    lam_min = max(lam_min, 0.0)

    # Major-axis eigenvector: (cxy, lam - cxx) and (lam - cyy, cxy) are both
    # valid; pick the better-conditioned one.
    v1 = (cxy, lam_max - cxx)
    v2 = (lam_max - cyy, cxy)
    n1 = math.hypot(*v1)
    n2 = math.hypot(*v2)
    if max(n1, n2) < 1e-12 * max(1.0, abs(lam_max)):
        theta_a, theta_b = 1.0, 0.0  # isotropic: any axis works
    else:
        vx, vy = v1 if n1 >= n2 else v2
        norm = math.hypot(vx, vy)
        theta_a, theta_b = vx / norm, vy / norm
    if theta_a < 0 or (theta_a == 0 and theta_b < 0):
        theta_a, theta_b = -theta_a, -theta_b

    sigma_a = max(math.sqrt(lam_max), SIGMA_FLOOR)
    sigma_b = max(math.sqrt(lam_min), SIGMA_FLOOR)
    return sigma_a, sigma_b, theta_a, theta_b


def rebuild_covariance(sigma_a, sigma_b, theta_a, theta_b) -> tuple[float, float, float]:
    """Covariance entries (cov_xx, cov_xy, cov_yy) of a given eigen-frame."""
    la, lb = sigma_a * sigma_a, sigma_b * sigma_b
    cov_xx = la * theta_a * theta_a + lb * theta_b * theta_b
    cov_yy = la * theta_b * theta_b + lb * theta_a * theta_a
    cov_xy = (la - lb) * theta_a * theta_b
    return cov_xx, cov_xy, cov_yy


def mask_moments(mask: np.ndarray) -> GaussianPrompt:
    """Derive a prompt from a binary mask via its pixel moments.

    ``mask`` is an (H, W) boolean array.  The mean is the first moment of
    the set-pixel centers; the covariance is the population second central
    moment.  Raises ``EmptyMaskError`` if no pixel is set.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("mask must be 2D")
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise EmptyMaskError("empty-mask: prompt derivation requires >= 1 set pixel")
    cx = xs.astype(np.float64) + 0.5
    cy = ys.astype(np.float64) + 0.5
    mu_x = float(cx.mean())
    mu_y = float(cy.mean())
    dx = cx - mu_x
    dy = cy - mu_y
    cov = np.array([[np.mean(dx * dx), np.mean(dx * dy)],
                    [np.mean(dx * dy), np.mean(dy * dy)]])
    return GaussianPrompt.from_moments(mu_x, mu_y, cov)


def to_relative(prompt: GaussianPrompt, x, y):
    """Map image coordinates into the prompt-relative frame.

    Translate by -mu, rotate by the inverse major-axis rotation, then scale
    each axis by 1/sigma.  Accepts scalars or arrays (broadcast together).
    """
    vx = np.asarray(x, dtype=np.float64) - prompt.mu_x
    vy = np.asarray(y, dtype=np.float64) - prompt.mu_y
    rx = prompt.theta_a * vx + prompt.theta_b * vy
    ry = -prompt.theta_b * vx + prompt.theta_a * vy
    return rx / prompt.sigma_a, ry / prompt.sigma_b


def from_relative(prompt: GaussianPrompt, rx, ry):
    """Inverse of :func:`to_relative`."""
    sx = np.asarray(rx, dtype=np.float64) * prompt.sigma_a
    sy = np.asarray(ry, dtype=np.float64) * prompt.sigma_b
    vx = prompt.theta_a * sx - prompt.theta_b * sy
    vy = prompt.theta_b * sx + prompt.theta_a * sy
    return vx + prompt.mu_x, vy + prompt.mu_y


def perturb_prompt(prompt: GaussianPrompt, spec: AugmentationSpec,
                   rng: np.random.Generator) -> GaussianPrompt:
    """Randomly shift, rescale and rotate a prompt.

    The center moves by a uniform offset within +-max_center_shift*sigma_a
    per axis, the sigmas are scaled by independent uniform draws from
    sigma_scale_range, and the frame rotates by a uniform angle within
    +-max_rotation.  The covariance is rebuilt from the perturbed frame and
    re-canonicalized, so the result satisfies every prompt invariant.
    """
    if spec.is_identity:
        return prompt
    shift = spec.max_center_shift * prompt.sigma_a
    dx = rng.uniform(-shift, shift)
    dy = rng.uniform(-shift, shift)
    lo, hi = spec.sigma_scale_range
    sa = prompt.sigma_a * rng.uniform(lo, hi)
    sb = prompt.sigma_b * rng.uniform(lo, hi)
    rot = rng.uniform(-spec.max_rotation, spec.max_rotation)
    cr, sr = math.cos(rot), math.sin(rot)
    ta = prompt.theta_a * cr - prompt.theta_b * sr
    tb = prompt.theta_b * cr + prompt.theta_a * sr
    cov = rebuild_covariance(sa, sb, ta, tb)
    cov_mat = np.array([[cov[0], cov[1]], [cov[1], cov[2]]])
    return GaussianPrompt.from_moments(prompt.mu_x + dx, prompt.mu_y + dy, cov_mat)
