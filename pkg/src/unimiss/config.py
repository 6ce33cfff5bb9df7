"""Dataclass configs and the flat ``dotted.key = value`` config format."""
from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending dotted path."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class StageConfig:
    embed_dim: int
    num_heads: int
    sra_reduction_2d: int
    sra_reduction_3d: int
    ffn_expansion: int
    depth: int

    def reduction(self, dim_tag) -> int:
        return self.sra_reduction_2d if str(dim_tag) == "2d" else self.sra_reduction_3d


@dataclass
class MiTConfig:
    embed_dims: tuple[int, ...] = (32, 64, 128, 256)
    num_heads: tuple[int, ...] = (1, 2, 4, 8)
    sra_reduction_2d: tuple[int, ...] = (8, 4, 2, 1)
    sra_reduction_3d: tuple[int, ...] = (4, 4, 2, 1)
    ffn_expansion: tuple[int, ...] = (4, 4, 4, 4)
    encoder_depths: tuple[int, ...] = (1, 1, 1, 1)
    decoder_depths: tuple[int, ...] = (1, 1, 1)
    in_chans: int = 1
    # reference grids the positional embeddings are sized for
    pos_grid_2d: tuple[int, ...] = (224, 224)
    pos_grid_3d: tuple[int, ...] = (16, 96, 96)

    @property
    def stages_encoder(self) -> list[StageConfig]:
        return [
            StageConfig(self.embed_dims[i], self.num_heads[i], self.sra_reduction_2d[i],
                        self.sra_reduction_3d[i], self.ffn_expansion[i], self.encoder_depths[i])
            for i in range(4)
        ]

    @property
    def stages_decoder(self) -> list[StageConfig]:
        # decoder stage j works at the resolution of encoder stage 2 - j
        out = []
        for j in range(3):
            i = 2 - j
            out.append(StageConfig(self.embed_dims[i], self.num_heads[i], self.sra_reduction_2d[i],
                                   self.sra_reduction_3d[i], self.ffn_expansion[i],
                                   self.decoder_depths[j]))
        return out

    @property
    def projector_input_dim(self) -> int:
        return self.embed_dims[-1]

    @property
    def num_layers(self) -> int:
        return sum(self.encoder_depths) + sum(self.decoder_depths)

    def validate(self, prefix: str = "mit") -> None:
        for name in ("embed_dims", "num_heads", "sra_reduction_2d", "sra_reduction_3d",
                     "ffn_expansion", "encoder_depths"):
            if len(getattr(self, name)) != 4:
                raise ConfigError(f"{prefix}.{name}", "needs exactly 4 entries (one per encoder stage)")
        if len(self.decoder_depths) != 3:
            raise ConfigError(f"{prefix}.decoder_depths", "needs exactly 3 entries")
        for i, (d, h) in enumerate(zip(self.embed_dims, self.num_heads)):
            if d <= 0 or h <= 0:
                raise ConfigError(f"{prefix}.embed_dims", f"stage {i}: dims and heads must be positive")
            if d % h:
                raise ConfigError(f"{prefix}.num_heads", f"stage {i}: embed dim {d} not divisible by {h} heads")
        for name in ("sra_reduction_2d", "sra_reduction_3d", "ffn_expansion"):
            if any(v < 1 for v in getattr(self, name)):
                raise ConfigError(f"{prefix}.{name}", "entries must be >= 1")
        if any(v < 0 for v in self.encoder_depths + self.decoder_depths):
            raise ConfigError(f"{prefix}.encoder_depths", "depths must be >= 0")
        if len(self.pos_grid_2d) != 2 or len(self.pos_grid_3d) != 3:
            raise ConfigError(f"{prefix}.pos_grid_2d", "2D grid needs 2 extents, 3D grid 3")
        for name, grid in (("pos_grid_2d", self.pos_grid_2d), ("pos_grid_3d", self.pos_grid_3d)):
            if any(g % 16 for g in grid):
                raise ConfigError(f"{prefix}.{name}", "extents must be divisible by 16")


MIT_PRESETS: dict[str, MiTConfig] = {
    "mit-7-tiny": MiTConfig(),
    "mit-7": MiTConfig(
        embed_dims=(64, 128, 320, 512), num_heads=(1, 2, 5, 8),
        encoder_depths=(1, 1, 1, 1), decoder_depths=(1, 1, 1),
    ),
    "mit-22": MiTConfig(
        embed_dims=(64, 128, 320, 512), num_heads=(1, 2, 5, 8),
        encoder_depths=(2, 2, 6, 2), decoder_depths=(6, 2, 2),
    ),
}


def mit_preset(name: str) -> MiTConfig:
    try:
        return dataclasses.replace(MIT_PRESETS[name])
    except KeyError:
        raise ConfigError("mit.preset", f"unknown preset {name!r}; choose from {sorted(MIT_PRESETS)}") from None


@dataclass
class ProjectorConfig:
    n_layers: int = 3
    hidden_dim: int = 256
    output_dim: int = 256
    # l2-normalize the features entering the weight-normalized last layer
    l2_norm: bool = True
    norm_last_layer: bool = True

    def validate(self, prefix: str = "projector") -> None:
        if self.n_layers < 1:
            raise ConfigError(f"{prefix}.n_layers", "must be >= 1")
        if self.output_dim < 2:
            raise ConfigError(f"{prefix}.output_dim", "must be >= 2")
        if self.hidden_dim < 1:
            raise ConfigError(f"{prefix}.hidden_dim", "must be >= 1")


@dataclass
class DistillConfig:
    tau_s: float = 0.1
    tau_t: float = 0.04
    omega: float = 0.9
    lambda_base: float = 0.996
    lambda_final: float = 1.0
    # False drops the slice terms of the 3D objective (volume-volume only)
    volume_slice: bool = True

    def validate(self, prefix: str = "distill") -> None:
        if not (self.tau_s > 0 and self.tau_t > 0):
            raise ConfigError(f"{prefix}.tau_t", "temperatures must be positive")
        if not self.tau_t < self.tau_s:
            raise ConfigError(f"{prefix}.tau_t",
                              f"temperature ordering violated: need tau_t < tau_s, got {self.tau_t} >= {self.tau_s}")
        if not 0.0 <= self.omega < 1.0:
            raise ConfigError(f"{prefix}.omega", "center rate must lie in [0, 1)")
        if not 0.996 <= self.lambda_base <= self.lambda_final <= 1.0:
            raise ConfigError(f"{prefix}.lambda_base", "momentum schedule must satisfy 0.996 <= base <= final <= 1")


@dataclass
class TrainSchedule:
    interval: int = 2
    total_steps: int = 2000
    warmup_steps: int = 100
    base_lr: float = 0.0008
    weight_decay: float = 0.04
    clip_grad: float = 3.0
    batch_size_2d: int = 8
    batch_size_3d: int = 2

    def validate(self, prefix: str = "schedule") -> None:
        if self.interval < 1:
            raise ConfigError(f"{prefix}.interval", "must be >= 1")
        if self.total_steps < 1:
            raise ConfigError(f"{prefix}.total_steps", "must be >= 1")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(f"{prefix}.warmup_steps", "need 0 <= warmup_steps < total_steps")
        if not self.base_lr > 0:
            raise ConfigError(f"{prefix}.base_lr", "must be > 0")
        if self.batch_size_2d < 1 or self.batch_size_3d < 1:
            raise ConfigError(f"{prefix}.batch_size_2d", "batch sizes must be >= 1")


@dataclass
class PhantomConfig:
    shape: tuple[int, ...] = (32, 64, 64)
    min_organs: int = 3
    max_organs: int = 8
    noise: float = 0.02
    lesion_prob: float = 0.5

    def validate(self, prefix: str = "data.phantom") -> None:
        if len(self.shape) != 3 or min(self.shape) < 16:
            raise ConfigError(f"{prefix}.shape", "needs three extents, each >= 16")
        if not 3 <= self.min_organs <= self.max_organs <= 8:
            raise ConfigError(f"{prefix}.min_organs", "organ count range must lie within [3, 8]")
        if self.noise < 0 or not 0 <= self.lesion_prob <= 1:
            raise ConfigError(f"{prefix}.noise", "noise must be >= 0 and lesion_prob in [0, 1]")


@dataclass
class AugmentConfig:
    patch_2d: tuple[int, ...] = (32, 32)
    patch_3d: tuple[int, ...] = (16, 32, 32)
    crop_scale: tuple[float, ...] = (0.6, 1.0)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.2
    contrast: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, ...] = (0.1, 1.0)
    noise_prob: float = 0.5
    noise_std: float = 0.03

    def validate(self, prefix: str = "augment") -> None:
        if len(self.patch_2d) != 2 or len(self.patch_3d) != 3:
            raise ConfigError(f"{prefix}.patch_2d", "2D patch needs 2 extents, 3D patch 3")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"{prefix}.crop_scale", "need 0 < lo <= hi <= 1")
        for name in ("flip_prob", "jitter_prob", "blur_prob", "noise_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{prefix}.{name}", "probabilities must lie in [0, 1]")


@dataclass
class DataConfig:
    n_2d: int = 512
    n_3d: int = 64
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    def validate(self, prefix: str = "data") -> None:
        if self.n_2d < 1 or self.n_3d < 1:
            raise ConfigError(f"{prefix}.n_2d", "pool sizes must be >= 1")
        self.phantom.validate(f"{prefix}.phantom")


LABEL_FRACTIONS = (0.2, 0.4, 1.0)
TASK_KINDS = ("seg3d", "cls3d", "seg2d", "cls2d")


@dataclass
class FinetuneConfig:
    task: str = "seg3d"
    label_fraction: float = 0.2
    init: str = "random"
    lr: float = 0.0005
    weight_decay: float = 0.01
    steps: int = 300
    batch_size_2d: int = 8
    batch_size_3d: int = 2
    n_train: int = 40
    n_test: int = 20
    seed: int = 0

    def validate(self, prefix: str = "finetune") -> None:
        if self.task not in TASK_KINDS:
            raise ConfigError(f"{prefix}.task", f"must be one of {TASK_KINDS}")
        if not any(math.isclose(self.label_fraction, f) for f in LABEL_FRACTIONS):
            raise ConfigError(f"{prefix}.label_fraction", f"must be one of {LABEL_FRACTIONS}")
        if self.steps < 0 or self.lr < 0:
            raise ConfigError(f"{prefix}.steps", "steps and lr must be non-negative")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError(f"{prefix}.n_train", "task sizes must be >= 1")


@dataclass
class RunOptions:
    seed: int = 0
    checkpoint_every: int = 500
    out_dir: str = "runs/pretrain"


@dataclass
class FullConfig:
    mit: MiTConfig = field(default_factory=MiTConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    run: RunOptions = field(default_factory=RunOptions)

    def validate(self) -> "FullConfig":
        self.mit.validate()
        self.projector.validate()
        self.distill.validate()
        self.schedule.validate()
        self.data.validate()
        self.augment.validate()
        self.finetune.validate()
        if self.run.checkpoint_every < 1:
            raise ConfigError("run.checkpoint_every", "must be >= 1")
        return self


# ---------------------------------------------------------------------------
# flat dotted-key text format


def _field_types(cls) -> dict[str, typing.Any]:
    return typing.get_type_hints(cls)


def schema(cls=FullConfig, prefix: str = "") -> dict[str, tuple[typing.Any, typing.Any]]:
    """Map every dotted leaf key to ``(type, default)``."""
    out = {}
    hints = _field_types(cls)
    default_obj = cls()
    for f in dataclasses.fields(cls):
        key = f"{prefix}{f.name}"
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            out.update(schema(tp, key + "."))
        else:
            out[key] = (tp, getattr(default_obj, f.name))
    return out


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key: str, tp, text: str):
    text = text.strip()
    origin = typing.get_origin(tp)
    try:
        if origin is tuple:
            (elem, _) = typing.get_args(tp)
            if not text:
                return ()
            return tuple(_parse_value(key, elem, part) for part in text.split(","))
        if tp is bool:
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            value = float(text)
            if not math.isfinite(value):
                raise ValueError(text)
            return value
        return text
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {getattr(tp, '__name__', tp)}") from None


def _set_path(cfg: FullConfig, key: str, value) -> None:
    *parents, leaf = key.split(".")
    obj = cfg
    for p in parents:
        obj = getattr(obj, p)
    setattr(obj, leaf, value)


def parse_lines(lines) -> list[tuple[str, str]]:
    pairs = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def parse_config(path: str | Path | None = None, overrides: typing.Sequence[str] = ()) -> FullConfig:
    """Build a validated config from an optional file plus ``key=value`` overrides.

    ``mit.preset`` (file or override) swaps in a named architecture before the
    remaining ``mit.*`` keys are applied.
    """
    pairs: list[tuple[str, str]] = []
    if path is not None:
        pairs += parse_lines(Path(path).read_text().splitlines())
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, value = item.split("=", 1)
        pairs.append((key.strip(), value.strip()))

    cfg = FullConfig()
    known = schema()
    for key, value in pairs:
        if key == "mit.preset":
            cfg.mit = mit_preset(value)
    for key, value in pairs:
        if key == "mit.preset":
            continue
        if key not in known:
            raise ConfigError(key, "unknown config key")
        tp, _ = known[key]
        _set_path(cfg, key, _parse_value(key, tp, value))
    return cfg.validate()


def serialize_config(cfg: FullConfig) -> str:
    lines = []
    for key in schema():
        obj = cfg
        for part in key.split("."):
            obj = getattr(obj, part)
        lines.append(f"{key} = {_format_value(obj)}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> FullConfig:
    cfg = FullConfig()
    known = schema()
    for key, value in parse_lines(text.splitlines()):
        if key not in known:
            raise ConfigError(key, "unknown config key")
        _set_path(cfg, key, _parse_value(key, known[key][0], value))
    return cfg.validate()


def describe_keys() -> str:
    """One line per config key with its default, generated from the schema."""
    rows = [f"  {key} = {_format_value(default)}" for key, (_, default) in schema().items()]
    rows.append("  mit.preset = (none)   one of: " + ", ".join(sorted(MIT_PRESETS)))
    return "\n".join(rows)
