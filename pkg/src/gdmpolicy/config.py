"""Configuration dataclasses for every pipeline stage.

All configs round-trip through plain dicts so an experiment is a single JSON
document. Two presets ship with the package: ``desk.json`` (CPU-sized) and
``paper.json`` (the full-scale hyperparameters).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Any


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


@dataclass(frozen=True)
class NetworkConfig:
    n_pairs: int = 16
    density: float = 12.0  # pairs per km^2
    p_max: float = 0.01  # W
    bandwidth_w: float = 20e6  # Hz
    noise_psd_n0: float = dbm_to_watts(-174.0)  # W/Hz
    shadowing_sigma_db: float = 7.0
    breakpoint_m: float = 100.0
    pathloss_exp_near: float = 2.0
    pathloss_exp_far: float = 4.0
    pathloss_ref_db: float = -36.6  # gain at 1 m
    rx_dist_min_m: float = 10.0
    rx_dist_max_m: float = 100.0
    f_min: float = 0.6  # bps/Hz

    def __post_init__(self):
        _require(self.n_pairs >= 2, "n_pairs must be >= 2")
        _require(self.density > 0, "density must be positive")
        _require(self.p_max > 0, "p_max must be positive")
        _require(self.bandwidth_w > 0, "bandwidth_w must be positive")
        _require(self.noise_psd_n0 > 0, "noise_psd_n0 must be positive (linear W/Hz)")
        _require(self.shadowing_sigma_db >= 0, "shadowing_sigma_db must be >= 0")
        _require(
            0 < self.rx_dist_min_m < self.rx_dist_max_m <= self.breakpoint_m,
            "need 0 < rx_dist_min_m < rx_dist_max_m <= breakpoint_m",
        )
        _require(self.f_min >= 0, "f_min must be >= 0")

    @property
    def area_side(self) -> float:
        """Side of the square deployment area in meters."""
        return math.sqrt(self.n_pairs / self.density) * 1000.0

    @property
    def noise_power(self) -> float:
        return self.bandwidth_w * self.noise_psd_n0

    @property
    def pathloss_ref(self) -> float:
        return db_to_linear(self.pathloss_ref_db)


@dataclass(frozen=True)
class ExpertConfig:
    t_total: int = 1000
    t_burn: int | None = None  # defaults to t_total // 5
    eta_dual: float = 0.2
    eta_primal: float = 0.05  # in units of p_max
    primal_steps: int = 50
    n_restarts: int = 4
    buffer_capacity: int = 500

    def __post_init__(self):
        if self.t_burn is None:
            object.__setattr__(self, "t_burn", self.t_total // 5)
        _require(self.t_total > self.t_burn >= 0, "need t_total > t_burn >= 0")
        _require(
            1 <= self.buffer_capacity <= self.t_total - self.t_burn,
            "buffer_capacity must be in [1, t_total - t_burn]",
        )
        _require(self.eta_dual > 0 and self.eta_primal > 0, "step sizes must be positive")
        _require(self.primal_steps >= 1, "primal_steps must be >= 1")
        _require(1 <= self.n_restarts <= 4, "n_restarts must be in [1, 4]")


@dataclass(frozen=True)
class GnnConfig:
    n_layers: int = 4
    features: int | tuple[int, ...] = 64
    filter_hops: int | tuple[int, ...] = 2
    embed_dim: int = 64
    nonlinearity: str = "relu"

    def __post_init__(self):
        _require(self.n_layers >= 1, "n_layers must be >= 1")
        for name in ("features", "filter_hops"):
            v = getattr(self, name)
            if isinstance(v, list):
                object.__setattr__(self, name, tuple(v))
        _require(self.embed_dim >= 1, "embed_dim must be >= 1")
        _require(all(f >= 1 for f in self.layer_features), "features must be >= 1")
        _require(all(m >= 0 for m in self.layer_hops), "filter_hops must be >= 0")
        _require(len(self.layer_features) == self.n_layers, "features length != n_layers")
        _require(len(self.layer_hops) == self.n_layers, "filter_hops length != n_layers")
        _require(self.nonlinearity in ("relu", "silu"), "nonlinearity must be relu or silu")

    @property
    def layer_features(self) -> tuple[int, ...]:
        f = self.features
        return tuple(f) if isinstance(f, tuple) else (f,) * self.n_layers

    @property
    def layer_hops(self) -> tuple[int, ...]:
        m = self.filter_hops
        return tuple(m) if isinstance(m, tuple) else (m,) * self.n_layers


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "cosine"
    n_steps: int = 500
    snr: str = "marginal"  # "marginal": abar/(1-abar); "alpha_ratio": alpha^2/sigma^2
    omega_min: float = 0.01
    omega_max: float = 5.0
    # reverse steps form the posterior mean from a clean estimate clipped to the data support
    clip_x0: bool = True

    def __post_init__(self):
        _require(self.kind in ("linear", "cosine"), "schedule kind must be linear or cosine")
        _require(self.n_steps >= 1, "n_steps must be >= 1")
        _require(self.snr in ("marginal", "alpha_ratio"), "snr must be marginal or alpha_ratio")
        _require(0 < self.omega_min <= self.omega_max, "need 0 < omega_min <= omega_max")


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 2000
    batch_graphs: int = 8
    signals_per_graph: int = 64
    lr_init: float = 1e-2
    lr_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    t_0: int = 250
    t_mult: int = 2
    grad_clip: float = 1.0
    validate_every: int = 100
    val_horizon: int = 200

    def __post_init__(self):
        for name in ("max_epochs", "batch_graphs", "signals_per_graph", "t_0", "t_mult",
                     "validate_every", "val_horizon"):
            _require(getattr(self, name) >= 1, f"{name} must be >= 1")
        _require(self.lr_init > 0, "lr_init must be positive")
        _require(0 <= self.lr_min <= self.lr_init, "need 0 <= lr_min <= lr_init")


@dataclass(frozen=True)
class EvalConfig:
    horizon: int = 200
    checkpoints: tuple[int, ...] = (20, 200)
    gdm_mode: str = "fresh"  # "fresh" | "cache_permute"
    replay_mode: str = "ordered"  # "ordered" | "uniform"

    def __post_init__(self):
        if isinstance(self.checkpoints, list):
            object.__setattr__(self, "checkpoints", tuple(self.checkpoints))
        _require(self.horizon >= 1, "horizon must be >= 1")
        _require(all(1 <= h <= self.horizon for h in self.checkpoints), "checkpoints must lie in [1, horizon]")
        _require(self.gdm_mode in ("fresh", "cache_permute"), "bad gdm_mode")
        _require(self.replay_mode in ("ordered", "uniform"), "bad replay_mode")


@dataclass(frozen=True)
class Splits:
    train: int = 10
    val: int = 2
    test: int = 4

    def __post_init__(self):
        _require(min(self.train, self.val, self.test) >= 1, "split counts must be >= 1")

    @classmethod
    def from_ratio(cls, total: int, ratio=(5, 1, 2)) -> "Splits":
        s = sum(ratio)
        train = total * ratio[0] // s
        val = total * ratio[1] // s
        return cls(train=train, val=val, test=total - train - val)

    @property
    def total(self) -> int:
        return self.train + self.val + self.test


@dataclass(frozen=True)
class ExperimentConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    gnn: GnnConfig = field(default_factory=GnnConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    splits: Splits = field(default_factory=Splits)
    # "fixed" uses network.f_min; "fp_percentile" sets it from full-power rates on training networks
    f_min_mode: str = "fixed"
    f_min_percentile: float = 10.0
    seed: int = 0

    def __post_init__(self):
        _require(self.f_min_mode in ("fixed", "fp_percentile"), "bad f_min_mode")
        _require(0 < self.f_min_percentile < 100, "f_min_percentile must be in (0, 100)")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        sections = {
            "network": NetworkConfig, "expert": ExpertConfig, "gnn": GnnConfig,
            "schedule": ScheduleConfig, "train": TrainConfig, "eval": EvalConfig,
            "splits": Splits,
        }
        kwargs: dict[str, Any] = {}
        for key, value in d.items():
            if key in sections:
                kwargs[key] = section_from_dict(sections[key], value)
            elif key in ("f_min_mode", "f_min_percentile", "seed"):
                kwargs[key] = value
            elif not key.startswith("_"):
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**kwargs)

    def digest(self) -> str:
        return config_digest(self.to_dict())


def section_from_dict(cls, d: dict[str, Any]):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_digest(d: dict[str, Any]) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def load_preset(name: str) -> ExperimentConfig:
    """Load a shipped preset by name (``"desk"`` or ``"paper"``)."""
    text = resources.files("gdmpolicy.presets").joinpath(f"{name}.json").read_text()
    return ExperimentConfig.from_dict(json.loads(text))
