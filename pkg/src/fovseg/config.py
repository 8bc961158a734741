"""Flat key-value run configuration.

A config file holds ``section.key = value`` lines (``#`` comments and
blank lines allowed).  Every key has a documented default; unknown keys
are rejected; module-level invariants are re-validated on load by
constructing the per-module config objects.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .datagen import SceneConfig
from .geometry import AugmentationSpec
from .inference import InferenceConfig
from .model import ModelConfig
from .sampler import SamplerConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes", "on"):
        return True
    if s.lower() in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_int_list(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(","))


def _parse_str_list(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(","))


# key -> (default, parser, help)
SCHEMA: dict[str, tuple[str, object, str]] = {
    "sampler.sizes": ("1,2,4,8,16", _parse_int_list, "ascending patch sizes in pixels"),
    "sampler.coverage": ("1.0", float, "patch density over the prompt area, in (0.1, 2)"),
    "sampler.tau_overlap": ("1.0", float, "max mean pre-existing coverage per candidate, in [0, 4]"),
    "sampler.tokens": ("512", int, "total patch budget N"),
    "sampler.max_attempts": ("64", int, "rejections per patch before the threshold relaxes"),
    "sampler.grid_cell": ("0", float, "hash grid cell in pixels; 0 = finest patch size"),
    "model.d_model": ("64", int, "token embedding width"),
    "model.n_heads": ("4", int, "encoder attention heads"),
    "model.n_blocks": ("3", int, "encoder depth"),
    "model.mlp_expansion": ("4", int, "hidden width multiplier of the block MLPs"),
    "model.pe_hidden": ("64", int, "hidden width of the coordinate embedding MLPs"),
    "model.per_layer_pe": ("true", _parse_bool, "inject coordinate embeddings into every block"),
    "model.shared_pe_norm": ("false", _parse_bool, "one shared layer norm for Q/K/V instead of three"),
    "train.batch_size": ("16", int, "scenes per optimizer step"),
    "train.learning_rate": ("1e-4", float, "Adam learning rate"),
    "train.steps": ("1000", int, "total optimizer steps"),
    "train.pixels_per_sample": ("2048", int, "supervision pixels k per scene"),
    "train.dynamic_sampling": ("true", _parse_bool, "adapt per-group pixel quotas to per-group IoU"),
    "train.checkpoint_interval": ("500", int, "steps between checkpoints (0 = final only)"),
    "train.log_interval": ("1", int, "steps between training log lines"),
    "train.eval_interval": ("0", int, "steps between validation passes (0 = off)"),
    "train.token_jitter": ("0.25", float, "token budget jitter as a fraction of N"),
    "train.aug_center_shift": ("0.1", float, "prompt center shift, fraction of sigma_a"),
    "train.aug_scale_min": ("0.8", float, "lower sigma scale factor"),
    "train.aug_scale_max": ("1.25", float, "upper sigma scale factor"),
    "train.aug_rotation": ("0.1", float, "max prompt rotation in radians"),
    "infer.tau_uncertain": ("0.01", float, "probabilities inside [tau, 1-tau] get re-queried"),
    "infer.upsample_factor": ("4", int, "lattice upsampling factor per refinement round"),
    "infer.k_init": ("16", int, "coarse lattice side length"),
    "infer.sigma_multiplier": ("5.0", float, "query box half-size in units of sigma_iso"),
    "datagen.count": ("256", int, "scenes to generate"),
    "datagen.resolution_min": ("512", int, "min image side in pixels"),
    "datagen.resolution_max": ("2048", int, "max image side in pixels"),
    "datagen.footprint_min": ("4", int, "min object footprint in pixels"),
    "datagen.footprint_max": ("256", int, "max object footprint in pixels"),
    "datagen.shapes": ("ellipse,rectangle,polygon,star", _parse_str_list, "shape families"),
    "datagen.supersample": ("4", int, "anti-aliasing supersample factor"),
}


@dataclass
class RunConfig:
    values: dict[str, object]

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        raw = {key: default for key, (default, _, _) in SCHEMA.items()}
        if path is not None:
            for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                if "=" not in stripped:
                    raise ConfigError(f"{path}:{lineno}: expected 'section.key = value'")
                key, _, value = stripped.partition("=")
                key = key.strip()
                if key not in SCHEMA:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                raw[key] = value.strip()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r}: expected section.key=value")
            key, _, value = item.partition("=")
            key = key.strip()
            if key not in SCHEMA:
                raise ConfigError(f"override: unknown key {key!r}")
            raw[key] = value.strip()
        values = {}
        for key, text in raw.items():
            _, parser, _ = SCHEMA[key]
            try:
                values[key] = parser(text)
            except ValueError as exc:
                raise ConfigError(f"key {key}: {exc}") from exc
        cfg = cls(values=values)
        cfg.validate()
        return cfg

    def validate(self):
        """Construct every module config so their invariants all run."""
        self.sampler_config()
        self.model_config()
        self.train_config()
        self.infer_config()
        self.scene_config()

    def __getitem__(self, key):
        return self.values[key]

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            coverage=self["sampler.coverage"],
            tau_overlap=self["sampler.tau_overlap"],
            tokens=self["sampler.tokens"],
            max_attempts_per_patch=self["sampler.max_attempts"],
            grid_cell=self["sampler.grid_cell"])

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self["model.d_model"],
            n_heads=self["model.n_heads"],
            n_blocks=self["model.n_blocks"],
            mlp_expansion=self["model.mlp_expansion"],
            pe_hidden=self["model.pe_hidden"],
            patch_sizes=self["sampler.sizes"],
            per_layer_pe=self["model.per_layer_pe"],
            shared_pe_norm=self["model.shared_pe_norm"])

    def augmentation_spec(self) -> AugmentationSpec:
        return AugmentationSpec(
            max_center_shift=self["train.aug_center_shift"],
            sigma_scale_range=(self["train.aug_scale_min"],
                               self["train.aug_scale_max"]),
            max_rotation=self["train.aug_rotation"],
            token_count_jitter=self["train.token_jitter"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self["train.batch_size"],
            learning_rate=self["train.learning_rate"],
            steps=self["train.steps"],
            tokens=self["sampler.tokens"],
            pixels_per_sample=self["train.pixels_per_sample"],
            dynamic_sampling=self["train.dynamic_sampling"],
            augment=self.augmentation_spec(),
            checkpoint_interval=self["train.checkpoint_interval"],
            log_interval=self["train.log_interval"])

    def infer_config(self) -> InferenceConfig:
        return InferenceConfig(
            tau_uncertain=self["infer.tau_uncertain"],
            alpha_upsample=self["infer.upsample_factor"],
            k_init=self["infer.k_init"],
            sigma_multiplier=self["infer.sigma_multiplier"])

    def scene_config(self) -> SceneConfig:
        return SceneConfig(
            resolution_range=(self["datagen.resolution_min"],
                              self["datagen.resolution_max"]),
            footprint_range=(self["datagen.footprint_min"],
                             self["datagen.footprint_max"]),
            shapes=self["datagen.shapes"],
            supersample=self["datagen.supersample"])

    def to_text(self) -> str:
        lines = []
        for key in SCHEMA:
            value = self.values[key]
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def describe_keys() -> str:
    """Human-readable table of every key, default and meaning."""
    lines = []
    for key, (default, _, help_text) in SCHEMA.items():
        lines.append(f"{key:28s} default={default:24s} {help_text}")
    return "\n".join(lines)
