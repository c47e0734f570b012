"""Synthetic world: road-grid vehicle routes, wandering pedestrians, latents, sensing and stage budgets."""
from dataclasses import dataclass

import numpy as np

from .config import ConfigError, MeasurementModel, NoiseConfig, ScenarioConfig, subsystem_rng
from .map_core import Detection

TRAJ_DT = 0.1
VEHICLE_CLASS = 1
PEDESTRIAN_CLASS = 0
MIN_GAP = 5.0


@dataclass
class World:
    """Ground truth sampled every ``TRAJ_DT`` seconds.

    Object ids: vehicles are ``0..V-1``, pedestrians ``V..V+P-1``.
    """
    times: np.ndarray
    vehicle_xy: np.ndarray      # (T, V, 2)
    pedestrian_xy: np.ndarray   # (T, P, 2)
    vehicle_latent: np.ndarray
    pedestrian_latent: np.ndarray
    radii: np.ndarray
    cpu_speed: np.ndarray
    gpu_speed: np.ndarray
    extent: tuple

    @property
    def n_vehicles(self):
        return self.vehicle_xy.shape[1]

    @property
    def n_pedestrians(self):
        return self.pedestrian_xy.shape[1]

    def _interp(self, arr, t):
        f = min(max(t / TRAJ_DT, 0.0), len(self.times) - 1.0)
        i = min(int(f), len(self.times) - 2)
        w = f - i
        return (1.0 - w) * arr[i] + w * arr[i + 1]

    def vehicle_positions(self, t):
        return self._interp(self.vehicle_xy, t)

    def pedestrian_positions(self, t):
        return self._interp(self.pedestrian_xy, t)

    def hardware_speed(self, gpu_share):
        """Effective onboard speed multiplier per vehicle (work split between GPU and CPU)."""
        return 1.0 / (gpu_share / self.gpu_speed + (1.0 - gpu_share) / self.cpu_speed)


def _road_lines(extent, spacing):
    xs = np.arange(0.0, extent[0] + 1e-9, spacing)
    ys = np.arange(0.0, extent[1] + 1e-9, spacing)
    return xs, ys


def _vehicle_routes(cfg: ScenarioConfig, n_steps, rng):
    xs, ys = _road_lines(cfg.extent, cfg.road_spacing)
    if len(xs) < 2 or len(ys) < 2:
        raise ConfigError("extent: too small for a road grid at the configured road_spacing")
    road_length = len(ys) * cfg.extent[0] + len(xs) * cfg.extent[1]
    if cfg.vehicles * MIN_GAP > road_length:
        raise ConfigError(f"vehicles: cannot place {cfg.vehicles} vehicles on {road_length:.0f} m of road")
    V = cfg.vehicles
    out = np.zeros((n_steps, V, 2))
    moves = np.array([[1, 0], [-1, 0], [0, 1], [0, -1]])
    for v in range(V):
        # start on a random intersection-aligned segment heading toward the next intersection
        horizontal = rng.random() < 0.5
        if horizontal:
            pos = np.array([rng.uniform(0, cfg.extent[0]), ys[rng.integers(len(ys))]])
            d = moves[rng.integers(2)]
        else:
            pos = np.array([xs[rng.integers(len(xs))], rng.uniform(0, cfg.extent[1])])
            d = moves[2 + rng.integers(2)]
        speed = rng.uniform(*cfg.vehicle_speed)
        for k in range(n_steps):
            out[k, v] = pos
            travel = speed * TRAJ_DT
            while travel > 1e-12:
                target = _next_intersection(pos, d, xs, ys)
                gap = np.abs(target - pos).sum()
                if gap > travel:
                    pos = pos + d * travel
                    break
                pos = target.astype(np.float64)
                travel -= gap
                d = _turn(pos, d, cfg.extent, moves, rng)
    return out


def _next_intersection(pos, d, xs, ys):
    if d[0] != 0:
        grid = xs if d[0] > 0 else xs[::-1]
        ahead = [x for x in grid if (x - pos[0]) * d[0] > 1e-9]
        return np.array([ahead[0], pos[1]])
    grid = ys if d[1] > 0 else ys[::-1]
    ahead = [y for y in grid if (y - pos[1]) * d[1] > 1e-9]
    return np.array([pos[0], ahead[0]])


def _turn(pos, d, extent, moves, rng):
    options = []
    for m in moves:
        if np.array_equal(m, -d):
            continue
        nxt = pos + m * 1e-6
        if -1e-9 <= nxt[0] <= extent[0] + 1e-9 and -1e-9 <= nxt[1] <= extent[1] + 1e-9:
            options.append(m)
    if not options:
        return -d
    return options[rng.integers(len(options))]


def _pedestrian_walks(cfg: ScenarioConfig, n_steps, rng):
    P = cfg.pedestrians
    out = np.zeros((n_steps, P, 2))
    size = np.asarray(cfg.extent, dtype=np.float64)
    pos = rng.uniform(0, 1, size=(P, 2)) * size
    goal = rng.uniform(0, 1, size=(P, 2)) * size
    speed = rng.uniform(*cfg.pedestrian_speed, size=P)
    for k in range(n_steps):
        out[k] = pos
        step = goal - pos
        dist = np.linalg.norm(step, axis=1)
        reach = dist <= speed * TRAJ_DT
        move = np.where(reach[:, None], step, step / np.maximum(dist, 1e-12)[:, None] * (speed * TRAJ_DT)[:, None])
        pos = pos + move
        n_new = int(reach.sum())
        if n_new:
            goal[reach] = rng.uniform(0, 1, size=(n_new, 2)) * size
    return out


def generate(cfg: ScenarioConfig, seed=None) -> World:
    """Build trajectories, latents and vehicle hardware from the ``world`` seed stream."""
    cfg.validate()
    rng = subsystem_rng(cfg.seed if seed is None else seed, "world")
    n_steps = int(np.ceil(cfg.duration / TRAJ_DT)) + 2
    vehicle_xy = _vehicle_routes(cfg, n_steps, rng)
    pedestrian_xy = _pedestrian_walks(cfg, n_steps, rng)
    dim = cfg.map.latent_dim
    vehicle_latent = rng.normal(size=(cfg.vehicles, dim))
    pedestrian_latent = rng.normal(size=(cfg.pedestrians, dim))
    if cfg.radius_range is not None:
        radii = rng.uniform(*cfg.radius_range, size=cfg.vehicles)
    else:
        radii = np.full(cfg.vehicles, float(cfg.radius))
    m = cfg.measurement
    cpu = rng.uniform(*m.cpu_speed_range, size=cfg.vehicles)
    gpu = rng.uniform(*m.gpu_speed_range, size=cfg.vehicles)
    return World(np.arange(n_steps) * TRAJ_DT, vehicle_xy, pedestrian_xy, vehicle_latent,
                 pedestrian_latent, radii, cpu, gpu, tuple(cfg.extent))


def export_world(world: World, path):
    np.savez_compressed(path, times=world.times, vehicle_xy=world.vehicle_xy,
                        pedestrian_xy=world.pedestrian_xy, vehicle_latent=world.vehicle_latent,
                        pedestrian_latent=world.pedestrian_latent, radii=world.radii,
                        cpu_speed=world.cpu_speed, gpu_speed=world.gpu_speed,
                        extent=np.asarray(world.extent))


def load_world(path) -> World:
    with np.load(path) as z:
        return World(z["times"], z["vehicle_xy"], z["pedestrian_xy"], z["vehicle_latent"],
                     z["pedestrian_latent"], z["radii"], z["cpu_speed"], z["gpu_speed"],
                     tuple(z["extent"]))


def sense(world: World, vehicle: int, t: float, noise: NoiseConfig, rng) -> list:
    """Noisy detections of every ground-truth object inside the vehicle's coverage disk."""
    vxy = world.vehicle_positions(t)
    pxy = world.pedestrian_positions(t)
    me = vxy[vehicle]
    r2 = world.radii[vehicle] ** 2
    V = world.n_vehicles
    xy = np.concatenate([vxy, pxy])
    latent = np.concatenate([world.vehicle_latent, world.pedestrian_latent])
    seen = np.flatnonzero(((xy - me) ** 2).sum(axis=1) <= r2)
    seen = seen[seen != vehicle]
    n = len(seen)
    pos = xy[seen] + rng.normal(0.0, noise.sigma_pos, size=(n, 2)) if noise.sigma_pos > 0 else xy[seen]
    feat = latent[seen] + rng.normal(0.0, noise.sigma_feat, size=(n, latent.shape[1])) \
        if noise.sigma_feat > 0 else latent[seen].copy()
    conf = rng.uniform(*noise.confidence_range, size=n)
    out = []
    for k, obj in enumerate(seen):
        cls = VEHICLE_CLASS if obj < V else PEDESTRIAN_CLASS
        out.append(Detection(feat[k], np.array([pos[k, 0], pos[k, 1], 0.0]), float(conf[k]), cls,
                             vehicle, t, truth_id=int(obj)))
    return out


def self_report(world: World, vehicle: int, t: float, noise: NoiseConfig, rng) -> Detection:
    """The reporting vehicle's own pose and appearance, attached to every upload."""
    xy = world.vehicle_positions(t)[vehicle]
    feat = world.vehicle_latent[vehicle]
    if noise.sigma_feat > 0:
        feat = feat + rng.normal(0.0, noise.sigma_feat, size=feat.shape)
    return Detection(np.array(feat), np.array([xy[0], xy[1], 0.0]), 1.0, VEHICLE_CLASS, vehicle, t,
                     truth_id=vehicle)


@dataclass
class StageBudgets:
    onboard_s: float
    uplink_bits: float
    edge_s: float
    downlink_bits: float


def _lognormal(rng, mean, sigma):
    if mean <= 0:
        return 0.0
    return float(rng.lognormal(np.log(mean) - 0.5 * sigma * sigma, sigma))


def draw_budgets(model: MeasurementModel, y: int, hw_speed: float, rng) -> StageBudgets:
    """One seeded draw of stage budgets for partition ``y``; onboard time is divided by ``hw_speed``.

    Draw order is fixed (onboard, uplink, edge, downlink) so replays are exact.
    """
    if not 0 <= y < model.n_partitions:
        raise ValueError(f"partition {y} outside [0, {model.n_partitions - 1}]")
    onboard = _lognormal(rng, model.onboard_s[y], model.sigma) / hw_speed
    uplink = _lognormal(rng, model.uplink_bits[y], model.sigma)
    edge = _lognormal(rng, model.edge_s[y], model.sigma)
    downlink = _lognormal(rng, model.downlink_bits, model.sigma)
    return StageBudgets(onboard, uplink, edge, downlink)
