"""Model, training and scoring hyperparameters."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


def _ranges(value) -> tuple[tuple[int, int], ...]:
    return tuple((int(a), int(b)) for a, b in value)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    channels: int = 1
    embed_dim: int = 64
    heads: int = 4
    encoder_depth: int = 8
    decoder_depth: int = 4
    extractor_depth: int = 1
    num_inps: int = 6
    gamma: float = 3.0
    lam: float = 0.2
    lr: float = 1e-3
    weight_decay: float = 1e-4
    clip_threshold: float = 1.0
    epochs: int = 60
    batch_size: int = 8
    seed: int = 0
    # 0-indexed, inclusive layer ranges summed into feature groups
    encoder_group_ranges: tuple = ((2, 4), (5, 7))
    decoder_group_ranges: tuple = ((0, 1), (2, 3))
    top_fraction: float = 0.01
    smoothing_sigma: float = 2.0
    attention_scale: bool = True
    supervision: str = "group"
    use_inp: bool = True
    bottleneck_skip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encoder_group_ranges", _ranges(self.encoder_group_ranges))
        object.__setattr__(self, "decoder_group_ranges", _ranges(self.decoder_group_ranges))
        self.validate()

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def validate(self) -> None:
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim <= 0 or self.heads <= 0 or self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.channels < 1 or self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ConfigError("channels and depths must be >= 1")
        if self.extractor_depth != 1:
            raise ConfigError("extractor_depth must be 1")
        if self.num_inps < 1:
            raise ConfigError("num_inps must be >= 1")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if not 0 < self.top_fraction <= 1:
            raise ConfigError("top_fraction must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.smoothing_sigma < 0 or self.clip_threshold <= 0:
            raise ConfigError("smoothing_sigma must be >= 0 and clip_threshold > 0")
        if self.supervision not in ("group", "layer"):
            raise ConfigError(f"supervision must be 'group' or 'layer', got {self.supervision!r}")
        _check_ranges(self.encoder_group_ranges, self.encoder_depth, "encoder")
        _check_ranges(self.decoder_group_ranges, self.decoder_depth, "decoder")
        if len(self.encoder_group_ranges) != len(self.decoder_group_ranges):
            raise ConfigError(
                f"{len(self.encoder_group_ranges)} encoder groups vs {len(self.decoder_group_ranges)} decoder groups"
            )
        if self.supervision == "layer" and len(self.encoder_layers()) < self.decoder_depth:
            raise ConfigError("per-layer supervision needs at least decoder_depth grouped encoder layers")

    def encoder_layers(self) -> list[int]:
        return [i for a, b in self.encoder_group_ranges for i in range(a, b + 1)]

    def layer_pairs(self) -> list[tuple[int, int]]:
        """(encoder layer, decoder layer) pairs used by per-layer supervision.

        The deepest ``decoder_depth`` grouped encoder layers are matched to the
        decoder layers in order.
        """
        enc = self.encoder_layers()[-self.decoder_depth :]
        return list(zip(enc, range(self.decoder_depth)))

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_group_ranges"] = [list(r) for r in self.encoder_group_ranges]
        d["decoder_group_ranges"] = [list(r) for r in self.decoder_group_ranges]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _check_ranges(ranges, depth: int, side: str) -> None:
    if not ranges:
        raise ConfigError(f"{side}: at least one group range required")
    used: set[int] = set()
    for a, b in ranges:
        if not 0 <= a <= b < depth:
            raise ConfigError(f"{side} group range [{a}..{b}] outside depth {depth}")
        span = set(range(a, b + 1))
        if used & span:
            raise ConfigError(f"{side} group ranges overlap at {sorted(used & span)}")
        used |= span


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 4
    train_per_class: int = 64
    test_normal_per_class: int = 16
    test_anomalous_per_class: int = 16
    few_shot: int | None = None
    augment_factor: int = 8
    classes: tuple = field(default=())
    image_size: int = 64
    channels: int = 1
    master_seed: int = 0

    def __post_init__(self):
        if not self.classes:
            object.__setattr__(self, "classes", tuple(range(self.num_classes)))
        else:
            object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))
        for c in self.classes:
            if not 0 <= c < self.num_classes:
                raise ConfigError(f"unknown class {c}; {self.num_classes} classes available")
        if self.few_shot is not None and not 1 <= self.few_shot <= self.train_per_class:
            raise ConfigError(f"few_shot K={self.few_shot} exceeds {self.train_per_class} available normals")
        if self.augment_factor < 1:
            raise ConfigError("augment_factor must be >= 1")
