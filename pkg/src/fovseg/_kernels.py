"""Compiled inner loops for patch sampling, extraction and distance maps.

These are single-threaded scalar kernels; the pure-Python equivalents live
in the test suite as independent oracles.
"""

import math

import numpy as np
from numba import njit

INF_DISTANCE = 1 << 30


@njit(cache=True)
def cell_range(lo, hi, cell):
    """Half-open cell index range [i0, i1) covered by interval [lo, hi)."""
    i0 = int(math.floor(lo / cell))
    i1 = int(math.ceil(hi / cell))
    if i1 <= i0:
        i1 = i0 + 1
    return i0, i1


@njit(cache=True)
def probe_cells(counts, x0, x1, y0, y1):
    """Mean coverage count over a cell rectangle (indices clamped)."""
    gh, gw = counts.shape
    total = 0
    n = 0
    for iy in range(max(y0, 0), min(y1, gh)):
        for ix in range(max(x0, 0), min(x1, gw)):
            total += counts[iy, ix]
            n += 1
    if n == 0:
        return 0.0
    return total / n


@njit(cache=True)
def sample_specs(seed, mu_x, mu_y, sigma_a, sigma_b, theta_a, theta_b,
                 sizes, per_size, tau, max_attempts, cell,
                 img_w, img_h, counts,
                 out_cx, out_cy, out_res, out_score, out_thresh):
    """Rejection-sample patch centers against a coverage grid.

    Draws candidate centers from the prompt Gaussian (Box-Muller uniforms
    through the eigen-frame), clamps footprints into image bounds, and
    accepts a candidate when its mean pre-existing coverage is at most the
    effective threshold.  After ``max_attempts`` consecutive rejections the
    effective threshold doubles (a ratchet kept for the rest of the run),
    so exactly sum(per_size) specs always come back.

    Sizes are visited coarse to fine.  Per accepted spec the probe score
    and the threshold in force are recorded for replay verification.
    """
    np.random.seed(seed)
    eff = tau
    n_out = 0
    for si in range(len(sizes) - 1, -1, -1):
        size = sizes[si]
        half = 0.5 * size
        for _ in range(per_size[si]):
            attempts = 0
            while True:
                u1 = 1.0 - np.random.random()
                u2 = np.random.random()
                r = math.sqrt(-2.0 * math.log(u1))
                z1 = r * math.cos(2.0 * math.pi * u2)
                z2 = r * math.sin(2.0 * math.pi * u2)
                ex = sigma_a * z1
                ey = sigma_b * z2
                cx = mu_x + theta_a * ex - theta_b * ey
                cy = mu_y + theta_b * ex + theta_a * ey
                if img_w >= size:
                    cx = min(max(cx, half), img_w - half)
                else:
                    cx = 0.5 * img_w
                if img_h >= size:
                    cy = min(max(cy, half), img_h - half)
                else:
                    cy = 0.5 * img_h
                x0, x1 = cell_range(cx - half, cx + half, cell)
                y0, y1 = cell_range(cy - half, cy + half, cell)
                score = probe_cells(counts, x0, x1, y0, y1)
                if score <= eff:
                    gh, gw = counts.shape
                    for iy in range(max(y0, 0), min(y1, gh)):
                        for ix in range(max(x0, 0), min(x1, gw)):
                            counts[iy, ix] += 1
                    out_cx[n_out] = cx
                    out_cy[n_out] = cy
                    out_res[n_out] = si
                    out_score[n_out] = score
                    out_thresh[n_out] = eff
                    n_out += 1
                    break
                attempts += 1
                if attempts >= max_attempts:
                    eff = eff * 2.0 if eff > 0.0 else 0.25
                    attempts = 0
    return n_out


@njit(cache=True)
def extract_bilinear(image, cx, cy, size, out):
    """Bilinear patch extraction for a batch of same-size patches.

    Patch pixel (u, v) samples the image at continuous coordinates
    (cx + u - (size-1)/2, cy + v - (size-1)/2), where image pixel (ix, iy)
    is centered at (ix + 0.5, iy + 0.5).  Reads are edge-clamped.
    ``out`` has shape (n, size, size, channels).
    """
    h, w, nc = image.shape
    for n in range(cx.size):
        ox = cx[n] - (size - 1) * 0.5
        oy = cy[n] - (size - 1) * 0.5
        for v in range(size):
            ty = oy + v - 0.5
            y0 = int(math.floor(ty))
            wy = ty - y0
            y0c = min(max(y0, 0), h - 1)
            y1c = min(max(y0 + 1, 0), h - 1)
            for u in range(size):
                tx = ox + u - 0.5
                x0 = int(math.floor(tx))
                wx = tx - x0
                x0c = min(max(x0, 0), w - 1)
                x1c = min(max(x0 + 1, 0), w - 1)
                for c in range(nc):
                    top = image[y0c, x0c, c] * (1.0 - wx) + image[y0c, x1c, c] * wx
                    bot = image[y1c, x0c, c] * (1.0 - wx) + image[y1c, x1c, c] * wx
                    out[n, v, u, c] = top * (1.0 - wy) + bot * wy


@njit(cache=True)
def l1_distance_to_boundary(mask):
    """Exact city-block distance to the nearest boundary pixel.

    A pixel is boundary when any 4-neighbor has the opposite mask value;
    boundary pixels get distance 0.  Masks with no boundary (all inside or
    all outside) get INF_DISTANCE everywhere.  Two-pass chamfer scan.
    """
    h, w = mask.shape
    dist = np.full((h, w), INF_DISTANCE, dtype=np.int32)
    for y in range(h):
        for x in range(w):
            m = mask[y, x]
            if ((x > 0 and mask[y, x - 1] != m)
                    or (x + 1 < w and mask[y, x + 1] != m)
                    or (y > 0 and mask[y - 1, x] != m)
                    or (y + 1 < h and mask[y + 1, x] != m)):
                dist[y, x] = 0
    for y in range(h):
        for x in range(w):
            d = dist[y, x]
            if y > 0 and dist[y - 1, x] + 1 < d:
                d = dist[y - 1, x] + 1
            if x > 0 and dist[y, x - 1] + 1 < d:
                d = dist[y, x - 1] + 1
            dist[y, x] = d
    for y in range(h - 1, -1, -1):
        for x in range(w - 1, -1, -1):
            d = dist[y, x]
            if y + 1 < h and dist[y + 1, x] + 1 < d:
                d = dist[y + 1, x] + 1
            if x + 1 < w and dist[y, x + 1] + 1 < d:
                d = dist[y, x + 1] + 1
            dist[y, x] = d
    return dist
