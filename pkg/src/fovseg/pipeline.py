"""Dataset-to-training glue: compact scene storage and loaders."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .datagen import SceneRecord, load_image_png, load_mask_png
from .geometry import GaussianPrompt, mask_moments
from .training import DistanceGroupMap, Scene, distance_group_map


class CompactScene:
    """Scene kept as uint8 to bound memory; products derived on demand.

    The prompt is cached (tiny); the float image and the distance-group
    map are recomputed per access, which is cheap next to a forward pass.
    """

    def __init__(self, image_u8: np.ndarray, mask: np.ndarray):
        self._image_u8 = image_u8
        self.mask = np.asarray(mask, dtype=bool)
        self._prompt: GaussianPrompt | None = None

    @property
    def image(self) -> np.ndarray:
        return self._image_u8.astype(np.float32) / 255.0

    @property
    def prompt(self) -> GaussianPrompt:
        if self._prompt is None:
            self._prompt = mask_moments(self.mask)
        return self._prompt

    @property
    def dist_map(self) -> DistanceGroupMap:
        return distance_group_map(self.mask)


def load_scene_arrays(base_dir, record: SceneRecord):
    """(uint8 image, bool mask) for a manifest record."""
    base_dir = Path(base_dir)
    image = load_image_png(base_dir / record.image)
    mask = load_mask_png(base_dir / record.mask)
    return (image * 255.0 + 0.5).astype(np.uint8), mask


def scene_from_arrays(image: np.ndarray, mask: np.ndarray) -> Scene:
    """In-memory float Scene (test and small-run convenience)."""
    return Scene(image=np.asarray(image, dtype=np.float32),
                 mask=np.asarray(mask, dtype=bool))
