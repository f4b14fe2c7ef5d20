"""Sectioned run configuration: INI file, ``section.key=value`` overrides.

Every key has a default.  Unknown sections or keys are rejected, and
the fully resolved configuration is written next to every output as
``config.ini`` so a run can be repeated from its own echo.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

from .edm import Preconditioner, SigmaDistribution, TrainConfig
from .samplers import NoiseSchedule, karras_schedule
from .unet import UNetConfig, desk_config, paper_config

OUTPUT_ROOT_ENV = "EDMSR_OUTPUT_ROOT"
ARCHS = ("3d", "2.5d")


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    output_root: str = "."


@dataclass
class DataSection:
    n_subjects: int = 8
    dims: tuple[int, ...] = (16, 32, 32)
    scale: int = 2
    n_blobs: int = 24


@dataclass
class ModelSection:
    # "desk" or "full"; the preset fixes dims, channels and embedding sizes
    preset: str = "desk"
    fourier_scale: float = 1.0
    input_skip: bool = True
    attention: bool = True
    res_blocks: int = 2


@dataclass
class EdmSection:
    sigma_data: float = 0.5
    p_mean: float = -1.2
    p_std: float = 1.2


@dataclass
class TrainSection:
    lr: float = 1e-2
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # 2.5D batches count slices; 3D batches count volumes, each giving
    # patches_per_volume patches
    batch_size: int = 16
    batch_size_3d: int = 2
    grad_accum_steps: int = 1
    updates_per_epoch: int = 300
    epochs: int = 1
    patches_per_volume: int = 8


@dataclass
class SamplerSection:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    steps_3d: int = 20
    steps_25d: int = 1


@dataclass
class PipelineSection:
    arch: str = "3d"
    patch_dims: tuple[int, ...] = (8, 16, 16)
    overlap: float = 0.5
    window_floor: float = 0.05
    batch: int = 8


@dataclass
class EvalSection:
    out_dir: str = "eval"
    formats: tuple[str, ...] = ("csv", "json")
    heatmap_slice: int = -1
    pooled: bool = False


SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "model": ModelSection,
    "edm": EdmSection,
    "train": TrainSection,
    "sampler": SamplerSection,
    "pipeline": PipelineSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    edm: EdmSection = field(default_factory=EdmSection)
    train: TrainSection = field(default_factory=TrainSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    def validate(self) -> None:
        if self.pipeline.arch not in ARCHS:
            raise ConfigError(f"pipeline.arch must be one of {ARCHS}, got {self.pipeline.arch!r}")
        if self.model.preset not in ("desk", "full"):
            raise ConfigError(f"model.preset must be 'desk' or 'full', got {self.model.preset!r}")
        if len(self.data.dims) != 3 or len(self.pipeline.patch_dims) != 3:
            raise ConfigError("data.dims and pipeline.patch_dims need three entries")
        if self.data.scale < 1:
            raise ConfigError("data.scale must be a positive integer")
        if not 0.0 <= self.pipeline.overlap < 1.0:
            raise ConfigError("pipeline.overlap must lie in [0, 1)")
        for fmt in self.eval.formats:
            if fmt not in ("csv", "json"):
                raise ConfigError(f"unknown report format {fmt!r}")
        try:
            self.unet(self.pipeline.arch)
            self.preconditioner()
            self.sigma_distribution()
            self.train_config(self.pipeline.arch)
            self.schedule(self.pipeline.arch)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- typed views ---------------------------------------------------------

    def unet(self, arch: str) -> UNetConfig:
        base = desk_config(arch) if self.model.preset == "desk" else paper_config(arch)
        m = self.model
        return dataclasses.replace(base, fourier_scale=m.fourier_scale, input_skip=m.input_skip,
                                   attention=m.attention, res_blocks=m.res_blocks)

    def preconditioner(self) -> Preconditioner:
        return Preconditioner(self.edm.sigma_data)

    def sigma_distribution(self) -> SigmaDistribution:
        return SigmaDistribution(self.edm.p_mean, self.edm.p_std)

    def train_config(self, arch: str) -> TrainConfig:
        fields = dataclasses.asdict(self.train)
        per_3d = fields.pop("batch_size_3d")
        if arch == "3d":
            fields["batch_size"] = per_3d
        return TrainConfig(seed=self.run.seed, **fields)

    def schedule(self, arch: str) -> NoiseSchedule:
        s = self.sampler
        n = s.steps_3d if arch == "3d" else s.steps_25d
        return karras_schedule(s.sigma_max, s.sigma_min, s.rho, n)

    def output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV) or self.run.output_root)

    # -- serialization -------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _format(getattr(sec, f.name)) for f in dataclasses.fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, directory) -> Path:
        """Write the resolved config as ``config.ini`` inside ``directory``."""
        path = Path(directory) / "config.ini"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())
        return path


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(x) for x in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _assign(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    sec = getattr(cfg, section)
    names = {f.name for f in dataclasses.fields(sec)}
    if key not in names:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    setattr(sec, key, _parse(raw, getattr(sec, key), f"{section}.{key}"))


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the INI file at ``path``, then ``section.key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if cp.defaults():
            raise ConfigError("keys outside a section are not allowed")
        for section in cp.sections():
            for key, raw in cp.items(section):
                _assign(cfg, section, key, raw)
    for item in overrides:
        lhs, sep, raw = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        _assign(cfg, section, key.strip(), raw)
    cfg.validate()
    return cfg
