"""Procedural scale-stress scene generator.

Each scene is one anti-aliased shape (ellipse, rectangle, convex polygon
or star polygon) composited onto a gradient-plus-low-frequency-noise
background.  Image resolution and object footprint are drawn
log-uniformly, so object-to-image area ratios span several orders of
magnitude, capped at 25% of the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

SHAPE_FAMILIES = ("ellipse", "rectangle", "polygon", "star")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    resolution_range: tuple[int, int] = (512, 2048)
    footprint_range: tuple[int, int] = (4, 256)
    shapes: tuple[str, ...] = SHAPE_FAMILIES
    supersample: int = 4
    noise_amplitude: float = 0.08
    min_contrast: float = 0.35

    def __post_init__(self):
        if self.resolution_range[0] > self.resolution_range[1]:
            raise ValueError("resolution range min > max")
        if self.footprint_range[0] > self.footprint_range[1]:
            raise ValueError("footprint range min > max")
        if self.footprint_range[1] > self.resolution_range[0]:
            raise ValueError("footprint max must be <= resolution min")
        if any(s not in SHAPE_FAMILIES for s in self.shapes):
            raise ValueError(f"shapes must be among {SHAPE_FAMILIES}")
        if self.supersample < 1:
            raise ValueError("supersample must be >= 1")


@dataclass
class SceneRecord:
    image: str
    mask: str
    shape: str
    footprint: float
    rel_area: float
    prompt: tuple[float, float, float, float, float] | None = None


@dataclass
class ShapeSpec:
    """A shape in a normalized frame: unit max bounding-box side."""

    family: str
    vertices: np.ndarray | None  # (m, 2) closed polygon, or None for ellipse
    ellipse: tuple[float, float, float] | None  # (semi_x, semi_y, angle)
    color: np.ndarray  # (3,) float in [0, 1]


def _log_uniform(rng, lo, hi):
    if lo >= hi:
        return float(lo)
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def _normalize_vertices(verts):
    span = verts.max(axis=0) - verts.min(axis=0)
    center = 0.5 * (verts.max(axis=0) + verts.min(axis=0))
    return (verts - center) / max(span[0], span[1])


def _convex_hull(points):
    """Andrew's monotone chain; returns hull vertices CCW."""
    pts = sorted(map(tuple, points))

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and (
                    (out[-1][0] - out[-2][0]) * (p[1] - out[-2][1])
                    - (out[-1][1] - out[-2][1]) * (p[0] - out[-2][0])) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(reversed(pts))
    return np.array(lower[:-1] + upper[:-1])


def make_shape(config: SceneConfig, rng: np.random.Generator) -> ShapeSpec:
    family = str(rng.choice(config.shapes))
    angle = rng.uniform(0, math.pi)
    aspect = rng.uniform(0.35, 1.0)
    if family == "ellipse":
        shape = ShapeSpec(family, None, (0.5, 0.5 * aspect, angle), _pick_color(rng))
        return _normalize_ellipse(shape)
    if family == "rectangle":
        base = np.array([[-0.5, -0.5 * aspect], [0.5, -0.5 * aspect],
                         [0.5, 0.5 * aspect], [-0.5, 0.5 * aspect]])
        verts = _rotate(base, angle)
    elif family == "polygon":
        n = int(rng.integers(5, 9))
        pts = rng.uniform(-0.5, 0.5, size=(n + 4, 2))
        verts = _convex_hull(pts)
    else:  # star
        spikes = int(rng.integers(5, 9))
        inner = rng.uniform(0.35, 0.6)
        angles = angle + np.arange(2 * spikes) * math.pi / spikes
        radii = np.where(np.arange(2 * spikes) % 2 == 0, 0.5, 0.5 * inner)
        verts = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=-1)
    return ShapeSpec(family, _normalize_vertices(verts), None, _pick_color(rng))


def _rotate(verts, angle):
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return verts @ rot.T


def _normalize_ellipse(shape: ShapeSpec) -> ShapeSpec:
    a, b, angle = shape.ellipse
    c, s = math.cos(angle), math.sin(angle)
    half_w = math.hypot(a * c, b * s)
    half_h = math.hypot(a * s, b * c)
    scale = 0.5 / max(half_w, half_h)
    return ShapeSpec(shape.family, None, (a * scale, b * scale, angle), shape.color)


def _pick_color(rng) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=3)


def _points_inside(shape: ShapeSpec, px, py):
    """Vectorized point-in-shape test in the normalized frame."""
    if shape.family == "ellipse":
        a, b, angle = shape.ellipse
        c, s = math.cos(angle), math.sin(angle)
        u = c * px + s * py
        v = -s * px + c * py
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    # Even-odd crossing test against each polygon edge.
    verts = shape.vertices
    inside = np.zeros(px.shape, dtype=bool)
    x1, y1 = verts[-1]
    for x2, y2 in verts:
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        inside ^= crosses & (px < x_at)
        x1, y1 = x2, y2
    return inside


def _coverage(shape: ShapeSpec, cx, cy, footprint, x0, y0, w, h, ss):
    """Supersampled coverage of the shape over a pixel window."""
    step = 1.0 / ss
    xs = x0 + (np.arange(w * ss) + 0.5) * step
    ys = y0 + (np.arange(h * ss) + 0.5) * step
    px = (xs[None, :] - cx) / footprint
    py = (ys[:, None] - cy) / footprint
    px, py = np.broadcast_arrays(px, py)
    hit = _points_inside(shape, px, py)
    return hit.reshape(h, ss, w, ss).mean(axis=(1, 3))


def _background(resolution, config, rng):
    c0 = rng.uniform(0.05, 0.95, size=3)
    c1 = rng.uniform(0.05, 0.95, size=3)
    theta = rng.uniform(0, 2 * math.pi)
    coords = (np.arange(resolution) + 0.5) / resolution
    t = (math.cos(theta) * coords[None, :]
         + math.sin(theta) * coords[:, None])
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    img = c0[None, None, :] + t[:, :, None] * (c1 - c0)[None, None, :]
    # Band-limited noise: low-resolution uniform noise upsampled bilinearly.
    low = max(2, resolution // 32)
    noise = rng.uniform(-1.0, 1.0, size=(low, low, 3))
    pos = np.linspace(0, low - 1, resolution)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, low - 1)
    frac = pos - i0
    rows = (noise[i0] * (1 - frac)[:, None, None]
            + noise[i1] * frac[:, None, None])
    up = (rows[:, i0] * (1 - frac)[None, :, None]
          + rows[:, i1] * frac[None, :, None])
    img = img + config.noise_amplitude * up
    return np.clip(img, 0.0, 1.0), (c0, c1)


def gen_scene(config: SceneConfig, rng: np.random.Generator,
              resolution=None, footprint=None, shape=None):
    """Generate one scene; returns (image f32, mask bool, SceneRecord).

    Resolution and footprint are log-uniform draws; the footprint is
    additionally capped at half the resolution so the mask can never
    exceed 25% of the image area.  The record's paths are left empty for
    the caller to fill after writing the files.  ``resolution``,
    ``footprint`` and ``shape`` override the random draws, e.g. to embed
    the same object at different scales.
    """
    res = (int(resolution) if resolution is not None
           else int(round(_log_uniform(rng, *config.resolution_range))))
    if footprint is None:
        fp_max = min(config.footprint_range[1], res / 2)
        footprint = _log_uniform(rng, config.footprint_range[0], fp_max)
    image, bg_colors = _background(res, config, rng)

    fixed_shape = shape is not None
    margin = footprint / 2 + 2
    for attempt in range(16):
        if not fixed_shape and (shape is None or attempt > 0):
            shape = make_shape(config, rng)
        if min(np.linalg.norm(shape.color - c) for c in bg_colors) < config.min_contrast:
            # A fixed shape keeps its color; redraw the background instead.
            if fixed_shape:
                image, bg_colors = _background(res, config, rng)
            continue
        if res > 2 * margin:
            cx = rng.uniform(margin, res - margin)
            cy = rng.uniform(margin, res - margin)
        else:
            cx = cy = res / 2
        x0 = max(0, int(math.floor(cx - margin)))
        y0 = max(0, int(math.floor(cy - margin)))
        x1 = min(res, int(math.ceil(cx + margin)))
        y1 = min(res, int(math.ceil(cy + margin)))
        cov = _coverage(shape, cx, cy, footprint, x0, y0,
                        x1 - x0, y1 - y0, config.supersample)
        box_mask = cov >= 0.5
        if box_mask.any():
            break
    else:
        raise RuntimeError("failed to generate a non-empty mask")

    mask = np.zeros((res, res), dtype=bool)
    mask[y0:y1, x0:x1] = box_mask
    image[y0:y1, x0:x1] = (image[y0:y1, x0:x1] * (1.0 - cov[:, :, None])
                           + shape.color[None, None, :] * cov[:, :, None])
    ys, xs = np.nonzero(mask)
    actual_fp = float(max(xs.max() - xs.min() + 1, ys.max() - ys.min() + 1))
    record = SceneRecord(image="", mask="", shape=shape.family,
                         footprint=actual_fp,
                         rel_area=float(mask.sum() / (res * res)))
    return image.astype(np.float32), mask, record


def save_image_png(path, image):
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def save_mask_png(path, mask):
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_image_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def load_mask_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return arr >= 128


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def write_manifest(records: list[SceneRecord], path):
    """Tab-separated UTF-8 manifest, one record per line."""
    lines = []
    for rec in records:
        prompt = ("" if rec.prompt is None
                  else ",".join(_fmt(v) for v in rec.prompt))
        lines.append("\t".join([rec.image, rec.mask, rec.shape,
                                _fmt(rec.footprint), _fmt(rec.rel_area), prompt]))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""),
                          encoding="utf-8")


def read_manifest(path) -> list[SceneRecord]:
    records = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise ManifestError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        image, mask, shape, footprint, rel_area, prompt_s = parts
        try:
            prompt = None
            if prompt_s:
                vals = tuple(float(v) for v in prompt_s.split(","))
                if len(vals) != 5:
                    raise ValueError("prompt override needs 5 values")
                prompt = vals
            records.append(SceneRecord(image=image, mask=mask, shape=shape,
                                       footprint=float(footprint),
                                       rel_area=float(rel_area), prompt=prompt))
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    return records


def _gen_one(args):
    config, seed, index = args
    rng = np.random.default_rng(seed)
    image, mask, record = gen_scene(config, rng)
    return index, image, mask, record


def generate_dataset(config: SceneConfig, count: int, out_dir, seed: int,
                     workers: int = 1) -> Path:
    """Write ``count`` scenes plus a manifest under ``out_dir``.

    Scene i is a pure function of (config, seed, i), so results are
    identical for any worker count.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(count)
    jobs = [(config, seeds[i], i) for i in range(count)]
    if workers > 1:
        import multiprocessing

        with multiprocessing.Pool(workers) as pool:
            results = pool.map(_gen_one, jobs)
    else:
        results = [_gen_one(job) for job in jobs]
    results.sort(key=lambda r: r[0])
    records = []
    for index, image, mask, record in results:
        img_rel = f"images/{index:06d}.png"
        mask_rel = f"masks/{index:06d}.png"
        save_image_png(out_dir / img_rel, image)
        save_mask_png(out_dir / mask_rel, mask)
        record.image = img_rel
        record.mask = mask_rel
        records.append(record)
    manifest = out_dir / "manifest.tsv"
    write_manifest(records, manifest)
    return manifest
