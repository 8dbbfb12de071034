"""Configuration dataclasses and strict TOML loading.

Every run is driven by a single TOML file with one table per stage. Unknown
keys are rejected so a typo never silently falls back to a default, and all
seeds are explicit.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    """Malformed, inconsistent, or unknown configuration value."""


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class SynthesisConfig:
    """Shape of the dual-branch generator.

    `channel_schedule` maps every resolution from 4 up to `output_resolution`
    to a trunk channel count. The default is the desk-scale setup; see
    `full_scale()` for the configuration mirroring 256x256 training.
    """

    latent_dim: int = 64
    base_resolution: int = 4
    output_resolution: int = 32
    channel_schedule: dict[int, int] = field(
        default_factory=lambda: {4: 128, 8: 128, 16: 64, 32: 64}
    )
    noise_mode: str = "random"
    mapping_layers: int = 8

    def __post_init__(self) -> None:
        if self.base_resolution != 4:
            raise ConfigError("base_resolution is fixed at 4")
        if not _is_power_of_two(self.output_resolution) or self.output_resolution < 8:
            raise ConfigError(
                f"output_resolution must be a power of two >= 8, got {self.output_resolution}"
            )
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive")
        if self.noise_mode not in ("random", "fixed", "zero"):
            raise ConfigError(f"unknown noise_mode {self.noise_mode!r}")
        self.channel_schedule = {int(k): int(v) for k, v in self.channel_schedule.items()}
        for res in self.resolutions:
            if res not in self.channel_schedule:
                raise ConfigError(f"channel_schedule missing resolution {res}")

    @classmethod
    def full_scale(cls) -> "SynthesisConfig":
        return cls(
            latent_dim=512,
            output_resolution=256,
            channel_schedule={4: 512, 8: 512, 16: 512, 32: 512, 64: 256, 128: 128, 256: 64},
        )

    @property
    def resolutions(self) -> list[int]:
        res, out = [], self.output_resolution
        r = self.base_resolution
        while r <= out:
            res.append(r)
            r *= 2
        return res

    @property
    def num_style_inputs(self) -> int:
        # one style per trunk convolution: one at 4x4, two per upsampling block
        return 1 + 2 * (len(self.resolutions) - 1)


@dataclass
class TrainConfig:
    learning_rate: float = 0.0025
    batch_size: int = 16
    beta1: float = 0.0
    beta2: float = 0.99
    eps_opt: float = 1e-8
    total_kimgs: float = 2500.0
    r1_interval: int = 16
    pl_interval: int = 8
    flip_prob: float = 0.5
    pl_decay: float = 0.99
    ema_halflife_kimg: float = 10.0
    gamma1: float | None = None  # None -> closed form from resolution / batch size
    gamma2: float | None = None
    checkpoint_every_kimg: float = 50.0
    log_every_steps: int = 50
    divergence_logit: float = 50.0
    divergence_window: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.r1_interval < 1 or self.pl_interval < 1:
            raise ConfigError("regularization intervals must be >= 1")
        if not (0.0 <= self.flip_prob <= 1.0):
            raise ConfigError("flip_prob must lie in [0, 1]")


@dataclass
class SMGConfig:
    members: int = 10
    hidden1: int = 128
    hidden2: int = 32
    batch_size: int = 64
    learning_rate: float = 1e-3
    min_epochs: int = 3
    max_epochs: int = 50
    patience_batches: int = 50
    improve_tol: float = 1e-4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.members < 1:
            raise ConfigError("ensemble needs at least one member")


@dataclass
class SegTrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    lr_decay_factor: float = 10.0
    patience_decay: int = 5
    patience_stop: int = 10
    max_epochs: int = 200
    base_channels: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.patience_stop < self.patience_decay:
            raise ConfigError("patience_stop must be >= patience_decay")


@dataclass
class DataConfig:
    source: str = "procedural"
    root: str = ""
    n_train: int = 2000
    resolution: int = 32
    num_classes: int = 4
    smooth: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.source not in ("procedural", "folder"):
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.source == "folder" and not self.root:
            raise ConfigError("data source 'folder' requires a root path")


@dataclass
class RunConfig:
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    smg: SMGConfig = field(default_factory=SMGConfig)
    segmenter: SegTrainConfig = field(default_factory=SegTrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs/default"
    seed: int = 0

    def to_snapshot(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_SECTIONS = {
    "synthesis": SynthesisConfig,
    "train": TrainConfig,
    "smg": SMGConfig,
    "segmenter": SegTrainConfig,
    "data": DataConfig,
}
_TOP_LEVEL_SCALARS = {"out_dir", "seed"}


def _build_section(cls: type, raw: dict[str, Any], where: str) -> Any:
    allowed = {f.name for f in fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**raw)
    except TypeError as e:
        raise ConfigError(f"bad [{where}] section: {e}") from e


def load_run_config(path: str | Path) -> RunConfig:
    """Parse a TOML run configuration, rejecting unknown keys at every level."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as f:
        try:
            raw = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"invalid TOML in {path}: {e}") from e

    unknown = set(raw) - set(_SECTIONS) - _TOP_LEVEL_SCALARS
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")

    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
        kwargs[name] = _build_section(cls, section, name)
    for key in _TOP_LEVEL_SCALARS:
        if key in raw:
            kwargs[key] = raw[key]
    return RunConfig(**kwargs)
