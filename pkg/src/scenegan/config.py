"""Experiment configuration: dataclasses <-> sectioned key = value text files."""
from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field

from .discriminator import DiscriminatorConfig
from .generator import GeneratorConfig

ABLATIONS = ("none", "no-layout-cond", "no-layout-loss", "triplane", "floorplan")


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 16
    total_images: int = 64000
    lr_g: float = 0.0025
    lr_d: float = 0.002
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-8
    r1_gamma: float = 1.0
    r1_interval: int = 16
    w_adv: float = 1.0
    w_r1: float = 1.0
    w_layout: float = 1.0
    layout_conditioning: bool = True
    render_resolution: int = 32
    n_coarse: int = 12
    n_fine: int = 12
    summary_k: int = 8
    summary_jitter: float = -1.0  # negative -> half a voxel, 1/N
    checkpoint_every: int = 16000  # images
    ablation: str = "none"

    def __post_init__(self):
        if self.lr_g < 0 or self.lr_d < 0:
            raise ValueError("learning rates must be non-negative")
        if self.batch_size < 1 or self.r1_interval < 1:
            raise ValueError("batch_size and r1_interval must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")


def paper_train_config(**overrides) -> TrainConfig:
    """Full-scale schedule: 3M images at batch 32, 64² renders with 48+48 samples."""
    kw = dict(batch_size=32, total_images=3_000_000, render_resolution=64, n_coarse=48, n_fine=48,
              checkpoint_every=200_000)
    return TrainConfig(**{**kw, **overrides})


@dataclass
class CameraConfig:
    tau: float = 4.0  # cells of clearance at the layout resolution
    height: float = 0.35
    fov_deg: float = 60.0
    dominant_class: int = 1


@dataclass
class DatasetConfig:
    seed: int = 0
    n_scenes: int = 256
    poses_per_scene: int = 40
    pose_quota: int = 40
    image_size: int = 64
    room_half_min: float = 0.75
    room_half_max: float = 1.0
    min_boxes: int = 2
    max_boxes: int = 4


@dataclass
class EvalConfig:
    n_samples: int = 2048
    embedder: str = "randconv-v1"
    probe_seed: int = 0
    probe_steps: int = 400
    split: float = 0.85


@dataclass
class DiscConfig:
    base_channels: int = 16
    max_channels: int = 64


@dataclass
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscConfig = field(default_factory=DiscConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def summary_jitter(self) -> float:
        j = self.train.summary_jitter
        return 1.0 / self.generator.resolution if j < 0 else j

    def disc_config(self) -> DiscriminatorConfig:
        g, t = self.generator, self.train
        return DiscriminatorConfig(
            img_resolution=t.render_resolution * g.upsample_factor,
            base_channels=self.discriminator.base_channels,
            max_channels=self.discriminator.max_channels,
            summary_resolution=g.resolution,
            summary_channels=t.summary_k * g.field_channels,
            num_classes=g.class_count + 1,
        )

    def with_ablation(self, ablation: str) -> "ExperimentConfig":
        """A copy configured as one of the ablation arms."""
        if ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {ablation!r}")
        cfg = from_dict(to_dict(self))
        cfg.train.ablation = ablation
        if ablation == "no-layout-loss":
            cfg.train.w_layout = 0.0
        elif ablation == "no-layout-cond":
            cfg.train.layout_conditioning = False
            cfg.train.w_layout = 0.0
        elif ablation in ("triplane", "floorplan"):
            cfg.generator = dataclasses.replace(cfg.generator, representation=ablation)
        return cfg


def _parse(text: str, tp):
    origin = typing.get_origin(tp)
    if tp is bool:
        return text.strip().lower() in ("1", "true", "yes", "on")
    if origin is tuple:
        inner = typing.get_args(tp)[0]
        return tuple(_parse(t, inner) for t in text.replace(",", " ").split())
    return tp(text.strip())


def _format(value) -> str:
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def to_dict(cfg: ExperimentConfig) -> dict:
    return {f.name: dataclasses.asdict(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}


def from_dict(data: dict) -> ExperimentConfig:
    parts = {}
    for f in dataclasses.fields(ExperimentConfig):
        cls = f.default_factory
        values = dict(data.get(f.name, {}))
        for k, v in values.items():
            if isinstance(v, list):
                values[k] = tuple(v)
        parts[f.name] = cls(**values)
    return ExperimentConfig(**parts)


def loads_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    data = {}
    for f in dataclasses.fields(ExperimentConfig):
        if not cp.has_section(f.name):
            continue
        cls = f.default_factory
        hints = typing.get_type_hints(cls)
        known = {x.name for x in dataclasses.fields(cls)}
        sec = {}
        for key, raw in cp[f.name].items():
            if key not in known:
                raise ValueError(f"unknown key {key!r} in section [{f.name}]")
            sec[key] = _parse(raw, hints[key])
        data[f.name] = sec
    unknown = set(cp.sections()) - {f.name for f in dataclasses.fields(ExperimentConfig)}
    if unknown:
        raise ValueError(f"unknown sections {sorted(unknown)}")
    return from_dict(data)


def dumps_config(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser()
    for name, sec in to_dict(cfg).items():
        cp[name] = {k: _format(tuple(v) if isinstance(v, list) else v) for k, v in sec.items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return loads_config(fh.read())
