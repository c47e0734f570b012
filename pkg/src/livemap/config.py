"""Scenario configuration: dataclasses, YAML loading/validation and seed splitting.

Config files are YAML mappings. Top-level ``schema_version`` is required and
must equal :data:`SCHEMA_VERSION`; every other section is optional and
overrides the defaults below field by field. Unknown keys are rejected with
the offending path, e.g. ``radio.snr_ref_db``.
"""
import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

SCHEMA_VERSION = 1

# fixed spawn index per subsystem: changing one subsystem's seed leaves the others alone
SUBSYSTEMS = ("world", "radio", "measurement", "sensing", "policy", "exploration", "rm")


class ConfigError(ValueError):
    pass


@dataclass
class RadioConfig:
    """Log-distance stand-in for the street-canyon channel."""
    bandwidth_hz: float = 0.1e6
    pathloss_exponent: float = 3.0
    snr_ref_db: float = 80.0
    shadowing_db: float = 4.0
    coherence_s: float = 0.1
    base_station: Optional[list] = None  # defaults to the map centre


@dataclass
class MeasurementModel:
    """Synthetic per-partition stage budgets (not measured values).

    Index ``y`` of each list is partition ``y``; onboard/edge times are in
    seconds at speed multiplier 1, sizes in bits. Draws are lognormal with the
    listed means and log-space spread ``sigma``; zero means draw exactly zero.
    """
    onboard_s: list = field(default_factory=lambda: [0.0, 0.05, 0.10, 0.16, 0.26])
    uplink_bits: list = field(default_factory=lambda: [30e3, 8e3, 4e3, 1.5e3, 0.0])
    edge_s: list = field(default_factory=lambda: [0.03, 0.02, 0.015, 0.01, 0.0])
    downlink_bits: float = 500.0
    sigma: float = 0.25
    gpu_share: float = 0.7
    cpu_speed_range: list = field(default_factory=lambda: [0.6, 1.6])
    gpu_speed_range: list = field(default_factory=lambda: [0.6, 1.6])

    @property
    def n_partitions(self):
        return len(self.onboard_s)


@dataclass
class NoiseConfig:
    sigma_pos: float = 0.3
    sigma_feat: float = 0.2
    confidence_range: list = field(default_factory=lambda: [0.5, 1.0])


@dataclass
class MapConfig:
    ttl: float = 3.0
    gate: float = 100.0
    threshold: float = 25.0
    weight: float = 0.1
    latent_dim: int = 32


@dataclass
class ControlConfig:
    beta: float = 0.8
    period_s: float = 1.0
    schedule_cell: float = 2.0
    metric_cell: float = 5.0
    metric_interval_s: float = 0.1
    sync_period_s: float = 0.0
    rm_warmup_tasks: int = 5000
    track_window_s: float = 0.1
    own_pose: bool = True
    l_cap: float = 2.0
    max_vehicles: int = 100


@dataclass
class TrainConfig:
    steps: int = 10_000
    hidden: list = field(default_factory=lambda: [256, 256])
    batch_size: int = 512
    lr: float = 0.5e-3
    gamma: float = 0.9
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay: float = 0.999
    target_period: int = 500
    replay_capacity: int = 50_000
    checkpoint_every: int = 1000
    log_every: int = 100


@dataclass
class ScenarioConfig:
    vehicles: int = 50
    servers: int = 5
    server_speed: float = 1.0
    radius: float = 50.0
    radius_range: Optional[list] = None
    pedestrians: int = 100
    extent: list = field(default_factory=lambda: [400.0, 400.0])
    road_spacing: float = 100.0
    vehicle_speed: list = field(default_factory=lambda: [5.0, 15.0])
    pedestrian_speed: list = field(default_factory=lambda: [0.5, 1.5])
    duration: float = 60.0
    dt: float = 0.001
    seed: int = 0
    radio: RadioConfig = field(default_factory=RadioConfig)
    measurement: MeasurementModel = field(default_factory=MeasurementModel)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    map: MapConfig = field(default_factory=MapConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    training: TrainConfig = field(default_factory=TrainConfig)

    @property
    def partitions(self):
        return list(range(self.measurement.n_partitions))

    @property
    def bandwidth(self):
        return self.radio.bandwidth_hz

    def validate(self):
        def need(cond, path, msg):
            if not cond:
                raise ConfigError(f"{path}: {msg}")
        need(self.vehicles > 0, "vehicles", "must be positive")
        need(self.servers > 0, "servers", "must be positive")
        need(self.pedestrians >= 0, "pedestrians", "must be non-negative")
        need(self.duration > 0, "duration", "must be positive")
        need(self.dt > 0, "dt", "must be positive")
        need(self.radius > 0, "radius", "must be positive")
        need(0.0 <= self.control.beta <= 1.0, "control.beta", "must lie in [0, 1]")
        need(self.radio.bandwidth_hz > 0, "radio.bandwidth_hz", "must be positive")
        need(self.server_speed > 0, "server_speed", "must be positive")
        need(len(self.extent) == 2 and min(self.extent) > 0, "extent", "needs two positive sizes")
        if self.radius_range is not None:
            need(len(self.radius_range) == 2 and 0 < self.radius_range[0] <= self.radius_range[1],
                 "radius_range", "needs 0 < low <= high")
        m = self.measurement
        n = m.n_partitions
        need(n >= 2, "measurement.onboard_s", "needs at least two partitions")
        for name in ("uplink_bits", "edge_s"):
            need(len(getattr(m, name)) == n, f"measurement.{name}", f"needs {n} entries")
        need(all(np.diff(m.onboard_s) > 0), "measurement.onboard_s", "must increase with the partition")
        need(all(np.diff(m.uplink_bits) < 0), "measurement.uplink_bits", "must decrease with the partition")
        need(all(np.diff(m.edge_s) <= 0), "measurement.edge_s", "must not increase with the partition")
        need(self.control.metric_interval_s > 0, "control.metric_interval_s", "must be positive")
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _merge(obj, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"{where}: unknown field")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _merge(current, value, where)
            continue
        if isinstance(current, bool) != isinstance(value, bool) or (
                current is not None and not isinstance(value, type(current))
                and not (isinstance(current, float) and isinstance(value, int))):
            if not (current is None or isinstance(current, list) and isinstance(value, list)):
                raise ConfigError(f"{where}: expected {type(current).__name__}, got {type(value).__name__}")
        setattr(obj, key, float(value) if isinstance(current, float) else value)


def config_from_dict(data) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>: expected a mapping")
    data = dict(data)
    version = data.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    cfg = ScenarioConfig()
    scenario = data.pop("scenario", {})
    _merge(cfg, scenario, "scenario")
    _merge(cfg, data, "")
    return cfg.validate()


def load_config(path) -> ScenarioConfig:
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"<root>: not valid YAML ({exc})") from exc
    return config_from_dict(data if data is not None else {})


def config_to_dict(cfg: ScenarioConfig):
    out = {"schema_version": SCHEMA_VERSION}
    out.update(dataclasses.asdict(cfg))
    return out


def subsystem_rng(master_seed: int, name: str) -> np.random.Generator:
    """Generator for one subsystem: ``SeedSequence(master_seed, spawn_key=(index,))``."""
    key = SUBSYSTEMS.index(name)
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(key,)))


def subsystem_seed(master_seed: int, name: str) -> int:
    return int(subsystem_rng(master_seed, name).integers(2 ** 63))
