"""Experiment configuration: a validated YAML tree with a stable content hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    n_primitives: int = 7
    extent_m: float = 8.0
    points_per_m2: float = 600.0
    n_keyframes: int = 81
    keyframe_dt_us: int = 200_000


@dataclass(frozen=True)
class EventConfig:
    window_us: int = 100_000
    substeps: int = 12
    stc_window_us: int = 10_000
    trail_window_us: int = 10_000
    noise_rate: float = 0.0


@dataclass(frozen=True)
class DataConfig:
    width: int = 128
    height: int = 96
    n_train: int = 64
    n_test: int = 16
    split: str = "interleave"  # or "tail"
    trans_range_cm: float = 50.0
    rot_range_deg: float = 5.0
    edge_dilation: int = 3
    edge_dilation_iters: int = 1
    scene: SceneConfig = field(default_factory=SceneConfig)
    events: EventConfig = field(default_factory=EventConfig)


@dataclass(frozen=True)
class ModelSection:
    flow_widths: tuple = (32, 32, 48, 64, 64)
    edge_widths: tuple = (16, 32, 64, 96, 128)
    hidden: int = 64
    motion: int = 32
    corr_levels: int = 4
    corr_radius: int = 4
    feature_norm: bool = True


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 100.0
    gamma: float = 0.8


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    epochs: int = 0  # > 0 overrides steps with epochs * ceil(n_train / batch_size)
    batch_size: int = 2
    lr: float = 4e-5
    weight_decay: float = 1e-4
    pct_start: float = 0.3
    div_factor: float = 25.0
    iters: int = 12
    grad_clip: float = 1.0
    edge_threshold: float = 0.5  # direct_mask binarization
    augment: bool = False  # random horizontal/vertical flips of each training pair
    detach_flow: bool = False  # no gradient through the flow carried between refinement iterations
    checkpoint_every: int = 0


@dataclass(frozen=True)
class EvalConfig:
    iters: int = 24
    reproj_threshold: float = 12.0
    confidence: float = 0.99
    max_iters: int = 10000


@dataclass(frozen=True)
class AblationConfig:
    oracle_mask: bool = False
    direct_mask: bool = False
    cff: bool = True
    ifr: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        validate(self)

    # -- (de)serialization --------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        return _build(cls, d or {}, "")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({str(exc).splitlines()[0]})") from exc
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_yaml())

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def replace(self, **sections) -> "ExperimentConfig":
        """Override nested values: ``cfg.replace(train={"steps": 10}, seed=3)``."""
        d = self.to_dict()
        for key, val in sections.items():
            if isinstance(val, dict) and isinstance(d.get(key), dict):
                _merge(d[key], val)
            else:
                d[key] = val
        return ExperimentConfig.from_dict(d)

    # -- derived --------------------------------------------------------------

    @property
    def edge_branch(self) -> bool:
        return self.ablation.cff or self.ablation.ifr

    def model_config(self):
        from .fusion import ModelConfig
        m = self.model
        return ModelConfig(flow_widths=tuple(m.flow_widths), edge_widths=tuple(m.edge_widths), hidden=m.hidden,
                           motion=m.motion, corr_levels=m.corr_levels, corr_radius=m.corr_radius,
                           feature_norm=m.feature_norm,
                           edge_branch=self.edge_branch, cff=self.ablation.cff, ifr=self.ablation.ifr)

    def total_steps(self) -> int:
        t = self.train
        if t.epochs > 0:
            return t.epochs * -(-self.data.n_train // t.batch_size)
        return t.steps


def _merge(dst: dict, src: dict):
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _merge(dst[k], v)
        else:
            dst[k] = v


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, d, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - fields)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join((path + '.' if path else '') + k for k in unknown)}")
    kwargs = {}
    for name, val in d.items():
        kwargs[name] = _coerce(hints[name], val, f"{path}.{name}" if path else name)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _coerce(tp, val, path):
    if dataclasses.is_dataclass(tp):
        return _build(tp, val, path)
    if tp is bool:
        if not isinstance(val, bool):
            raise ConfigError(f"{path}: expected true/false, got {val!r}")
        return val
    if tp is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{path}: expected an integer, got {val!r}")
        return val
    if tp is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {val!r}")
        return float(val)
    if tp is str:
        if not isinstance(val, str):
            raise ConfigError(f"{path}: expected a string, got {val!r}")
        return val
    if tp is tuple:
        if not isinstance(val, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool) for v in val):
            raise ConfigError(f"{path}: expected a list of integers, got {val!r}")
        return tuple(val)
    return val


def _check(cond, msg):
    if not cond:
        raise ConfigError(msg)


def validate(cfg: ExperimentConfig) -> None:
    d, m, t, e, lo = cfg.data, cfg.model, cfg.train, cfg.eval, cfg.loss
    _check(d.width > 0 and d.height > 0, "data: raster extent must be positive")
    _check(d.width % 16 == 0 and d.height % 16 == 0, "data: width and height must be multiples of 16")
    _check(d.n_train >= 0 and d.n_test >= 0 and d.n_train + d.n_test > 0, "data: need at least one sample")
    _check(d.split in ("interleave", "tail"), "data.split: must be 'interleave' or 'tail'")
    _check(d.trans_range_cm >= 0 and d.rot_range_deg >= 0, "data: perturbation ranges must be >= 0")
    _check(d.edge_dilation >= 1 and d.edge_dilation % 2 == 1, "data.edge_dilation: must be an odd size >= 1")
    _check(d.scene.n_keyframes >= 2, "data.scene.n_keyframes: must be >= 2")
    _check(d.events.window_us > 0 and d.events.window_us <= d.scene.keyframe_dt_us,
           "data.events.window_us: must be in (0, keyframe_dt_us]")
    _check(len(m.flow_widths) == 5 and len(m.edge_widths) == 5, "model: expected five encoder widths per branch")
    _check(all(w > 0 for w in m.flow_widths + m.edge_widths), "model: widths must be positive")
    _check(m.edge_widths[3] % 2 == 0, "model.edge_widths: fourth width must be even")
    _check(m.flow_widths[3] == m.flow_widths[4], "model.flow_widths: last two widths must match")
    _check(m.corr_levels >= 1 and m.corr_radius >= 0, "model: bad correlation settings")
    _check(lo.alpha >= 0 and lo.beta >= 0 and 0 < lo.gamma <= 1, "loss: need alpha, beta >= 0 and 0 < gamma <= 1")
    _check(t.batch_size >= 1 and t.iters >= 1 and t.lr > 0 and t.weight_decay >= 0, "train: bad optimizer settings")
    _check(t.steps >= 0 and t.epochs >= 0, "train: steps/epochs must be >= 0")
    _check(0 < t.pct_start < 1 and t.div_factor > 0, "train: bad schedule settings")
    _check(e.iters >= 1 and e.reproj_threshold > 0 and 0 < e.confidence < 1 and e.max_iters >= 1, "eval: bad settings")
    _check(not (cfg.ablation.oracle_mask and cfg.ablation.direct_mask),
           "ablation: oracle_mask and direct_mask are mutually exclusive")
