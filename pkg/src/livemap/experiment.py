"""Experiment harness: ties world, simulator, controllers and maps into one seeded run."""
import csv
import dataclasses
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import control, coverage
from .config import ScenarioConfig, subsystem_rng
from .map_core import GlobalMap
from .mapflow import DeltaEvent, IdentityTracker, LocalMap, MatchParams, apply_delta, ingest_completion
from .rl import (PrioritizedReplay, QPolicy, StateNorm, SystemStatus, Transition, VehicleAgent, VehicleStatus,
                 act, dist_fields, encode_state_central, encode_state_dist, sync_shared_policy, train_step,
                 CENTRAL_FIELDS)
from .scenario import generate, self_report, sense
from .simnet import DOWNLINK, UPLINK, EdgeSim, RadioModel

log = logging.getLogger(__name__)

ALGORITHMS = ("livemap", "livemap-dist", "livemap-lite", "eo", "lp", "ro", "rm")
POLICY_MODE = {"livemap": "central", "livemap-lite": "central", "livemap-dist": "distributed"}

TASK_FIELDS = ("task_id", "vehicle_id", "partition", "submit_s", "onboard_s", "uplink_s", "queue_s",
               "edge_s", "downlink_s", "latency_s")
COVERAGE_FIELDS = ("time_s", "instant_fraction", "scheduled_count")
SUMMARY_FIELDS = ("algorithm", "mean_latency_s", "p50", "p95", "coverage_mean", "fulfillment_rate")
DELTA_FIELDS = ("task_id", "vehicle_id", "time_s", "seq", "n_created", "n_updated", "n_removed")


class UsageError(ValueError):
    pass


def state_dim(mode, n_partitions):
    return len(CENTRAL_FIELDS) if mode == "central" else len(dist_fields(n_partitions))


def make_policy(cfg: ScenarioConfig, mode, seed):
    t = cfg.training
    pseed = int(subsystem_rng(seed, "policy").integers(2 ** 31))
    return QPolicy(state_dim(mode, cfg.measurement.n_partitions), cfg.measurement.n_partitions,
                   hidden=tuple(t.hidden), gamma=t.gamma, batch_size=t.batch_size, lr=t.lr,
                   eps_start=t.eps_start, eps_end=t.eps_end, eps_decay=t.eps_decay,
                   target_period=t.target_period, seed=pseed)


def _fmt(x):
    return f"{x:.6f}"


@dataclass
class RunMetrics:
    algorithm: str
    beta: float
    tasks: list = field(default_factory=list)          # scheduled offloads
    local_tasks: list = field(default_factory=list)    # unscheduled, fully local
    coverage: list = field(default_factory=list)       # (time_s, fraction, scheduled_count)
    deltas: list = field(default_factory=list)
    identity_rate: float = 1.0
    losses: list = field(default_factory=list)

    def latencies(self):
        return np.array([r.latency_s for r in self.tasks])

    @property
    def mean_latency(self):
        lat = self.latencies()
        return float(lat.mean()) if lat.size else float("nan")

    def percentile(self, q):
        lat = self.latencies()
        return float(np.percentile(lat, q)) if lat.size else float("nan")

    def cdf(self):
        lat = np.sort(self.latencies())
        return lat, np.arange(1, lat.size + 1) / max(lat.size, 1)

    def fractions(self):
        return np.array([c[1] for c in self.coverage])

    @property
    def coverage_mean(self):
        f = self.fractions()
        return float(f.mean()) if f.size else float("nan")

    @property
    def fulfillment_rate(self):
        f = self.fractions()
        return float(np.mean(f >= self.beta)) if f.size else float("nan")

    def summary_row(self):
        return (self.algorithm, self.mean_latency, self.percentile(50), self.percentile(95),
                self.coverage_mean, self.fulfillment_rate)

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)

        def dump(name, header, rows):
            with open(os.path.join(out_dir, name), "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                for row in rows:
                    w.writerow([_fmt(x) if isinstance(x, float) else x for x in row])

        def task_rows(records):
            return [(r.task_id, r.vehicle_id, r.partition, r.submit_s, r.onboard_s, r.uplink_s, r.queue_s,
                     r.edge_s, r.downlink_s, r.latency_s) for r in records]

        # fractions are rounded once here so the summary reproduces from the CSV exactly
        self.coverage = [(t, round(f, 6), n) for t, f, n in self.coverage]
        dump("tasks.csv", TASK_FIELDS, task_rows(self.tasks))
        dump("local_tasks.csv", TASK_FIELDS, task_rows(self.local_tasks))
        dump("coverage.csv", COVERAGE_FIELDS, self.coverage)
        dump("deltas.csv", DELTA_FIELDS, [(d.task_id, d.vehicle_id, d.time_s, d.seq, d.n_created, d.n_updated,
                                           d.n_removed) for d in self.deltas])
        dump("summary.csv", SUMMARY_FIELDS, [self.summary_row()])


class Experiment:
    """One seeded run of a controller over the simulated world.

    With ``train=True`` the shared policy is updated online (epsilon-greedy,
    one update per completed offload once the replay holds a batch) until
    ``policy.steps`` reaches ``train_steps``.
    """

    def __init__(self, cfg: ScenarioConfig, algorithm, seed=None, policy=None, rm_model=None,
                 train=False, train_steps=None, replay=None, world=None, duration=None):
        if algorithm not in ALGORITHMS:
            raise UsageError(f"unknown algorithm {algorithm!r}; choose from {', '.join(ALGORITHMS)}")
        self.cfg = cfg
        self.algo = algorithm
        self.seed = cfg.seed if seed is None else seed
        self.duration = cfg.duration if duration is None else duration
        self.world = world if world is not None else generate(cfg, self.seed)
        V = cfg.vehicles
        self.V = V
        self.N = cfg.measurement.n_partitions
        self.mode = POLICY_MODE.get(algorithm)
        if self.mode is not None and policy is None:
            policy = make_policy(cfg, self.mode, self.seed)
        self.policy = policy
        if algorithm == "rm" and rm_model is None:
            raise UsageError("algorithm rm needs a fitted regression model")
        self.rm_model = rm_model
        self.train = train
        self.train_steps = train_steps if train_steps is not None else cfg.training.steps
        if train and self.mode is None:
            raise UsageError(f"algorithm {algorithm!r} has no trainable policy")
        self.replay = replay
        if train and replay is None:
            self.replay = PrioritizedReplay(cfg.training.replay_capacity)

        bs = cfg.radio.base_station or [cfg.extent[0] / 2, cfg.extent[1] / 2]
        self.radio = RadioModel(cfg.radio, V, bs, subsystem_rng(self.seed, "radio"))
        self.hw = self.world.hardware_speed(cfg.measurement.gpu_share)
        self.sim = EdgeSim(V, cfg.servers, cfg.bandwidth, cfg.dt, cfg.measurement,
                           subsystem_rng(self.seed, "measurement"), self.hw, cfg.server_speed)
        self.sense_rng = subsystem_rng(self.seed, "sensing")
        self.explore_rng = subsystem_rng(self.seed, "exploration")
        self.ro_rng = subsystem_rng(self.seed, "rm")
        self.norm = StateNorm(max_vehicles=cfg.control.max_vehicles)
        self.gmap = GlobalMap(cfg.map.ttl, cfg.map.latent_dim)
        self.match = MatchParams(cfg.map.weight, cfg.map.gate, cfg.map.threshold)
        self.identity = IdentityTracker()
        self.local_maps = [LocalMap() for _ in range(V)] if algorithm == "livemap-dist" else None
        # vehicles act on periodically synced snapshots; 0 means they always see the live policy
        self.agents = None
        self.next_sync = 0.0
        if algorithm == "livemap-dist" and cfg.control.sync_period_s > 0:
            self.agents = [VehicleAgent(v, self.policy.online) for v in range(V)]
        self.head = control.CentralHead(V, cfg.control.beta, cfg.control.period_s, cfg.control.schedule_cell) \
            if algorithm == "livemap" else None
        self.x = np.ones(V, dtype=bool)
        self.y_prev = np.full(V, -1, dtype=np.int64)
        self.l_prev = np.zeros(V)
        self.pending = [None] * V
        self.self_ids = np.full(V, -1, dtype=np.int64)
        self.detections = {}
        self.rm_samples = []
        self.positions = self.world.vehicle_positions(0.0)
        self.metrics = RunMetrics(algorithm, cfg.control.beta)

    # ----------------------------------------------------------------- state

    def _vehicle_status(self, v):
        return VehicleStatus(float(self.sim.se[v]), float(self.world.cpu_speed[v]), float(self.world.gpu_speed[v]))

    def _offloading_count(self):
        # vehicles currently holding a share of the radio channel
        st = self.sim.stage
        return int(np.count_nonzero((st == UPLINK) | (st == DOWNLINK)))

    def state(self, v):
        if self.mode == "distributed":
            return encode_state_dist(self._vehicle_status(v), int(self.y_prev[v]), float(self.l_prev[v]),
                                     self.N, self.norm, self.cfg.control.l_cap)
        system = SystemStatus(self.cfg.server_speed, self._offloading_count(), self.sim.queued_count(),
                              self.cfg.bandwidth)
        return encode_state_central(self._vehicle_status(v), system, self.norm)

    # ----------------------------------------------------------------- periodic work

    def _on_grid(self):
        now = self.sim.now
        self.positions = self.world.vehicle_positions(now)
        self.radio.refresh(now)
        self.sim.se[:] = self.radio.spectral_efficiency(self.positions)
        if self.agents is not None and now + 1e-9 >= self.next_sync:
            sync_shared_policy(self.policy, self.agents)
            self.next_sync = now + self.cfg.control.sync_period_s
        if self.head is not None:
            if self.head.maybe_plan(now, self.positions, self.world.radii):
                self.x[:] = self.head.scheduled
        cx, cy = self.positions[:, 0], self.positions[:, 1]
        # a vehicle contributes while the task it is running was scheduled
        active = ~self.sim.local
        frac = coverage.coverage_fraction(cx, cy, self.world.radii, active, self.cfg.control.metric_cell)
        self.metrics.coverage.append((now, float(frac), int(active.sum())))

    # ----------------------------------------------------------------- decisions

    def decide(self, v):
        """Returns ``(scheduled, partition, state or None)`` for vehicle ``v``'s next frame."""
        algo = self.algo
        if algo in ("eo", "lp", "ro", "rm", "livemap-lite"):
            scheduled = True
        elif algo == "livemap":
            scheduled = bool(self.head.scheduled[v])
        else:
            tracks = self.local_maps[v].vehicle_tracks(self.sim.now, self.cfg.control.track_window_s)
            me = int(self.self_ids[v]) if self.self_ids[v] >= 0 else None
            scheduled = control.d_head_schedule(v, self.positions[v], self.world.radii[v], tracks,
                                                self.cfg.control.beta, self.cfg.control.schedule_cell, me,
                                                self.cfg.control.own_pose)
        self.x[v] = scheduled
        s = self.state(v) if self.mode is not None else None
        if not scheduled:
            return False, -1, s
        if algo == "eo":
            y = control.eo()
        elif algo == "lp":
            y = control.lp(self.N)
        elif algo == "ro":
            y = control.ro(self.ro_rng, self.N)
        elif algo == "rm":
            y = control.rm_decide(self.rm_model, self._offloading_count(), float(self.sim.se[v]))
        elif self.agents is not None:
            if self.train and self.explore_rng.random() < self.policy.epsilon:
                y = int(self.explore_rng.integers(self.N))
            else:
                y = self.agents[v].act(s)
        else:
            y = act(self.policy, s, self.train, self.explore_rng)
        return True, y, s

    def launch(self, v):
        scheduled, y, s = self.decide(v)
        if self.train and self.pending[v] is not None:
            ps, pa, pr = self.pending[v]
            self.replay.store(Transition(ps, pa, pr, s, False))
            self.pending[v] = None
        now = self.sim.now
        if scheduled:
            dets = sense(self.world, v, now, self.cfg.noise, self.sense_rng)
            dets.append(self_report(self.world, v, now, self.cfg.noise, self.sense_rng))
        count = self._offloading_count()
        tid = self.sim.submit(v, y)
        if scheduled:
            self.detections[tid] = (dets, s, y, count, float(self.sim.se[v]))

    # ----------------------------------------------------------------- completions

    def _complete(self, rec):
        v = rec.vehicle_id
        self.y_prev[v] = rec.partition
        self.l_prev[v] = rec.latency_s
        if rec.local:
            self.metrics.local_tasks.append(rec)
            return
        self.metrics.tasks.append(rec)
        dets, s, y, count, se = self.detections.pop(rec.task_id)
        self.rm_samples.append((count, se, y, rec.latency_s))
        now = self.sim.now
        delta, assigned, created = ingest_completion(self.gmap, dets, now, self.match)
        self.identity.record(self.gmap, dets, assigned, created)
        # the self-report goes last; the edge tells the vehicle which object it became
        self.self_ids[v] = assigned[-1]
        n_created = len(delta.created)
        self.metrics.deltas.append(DeltaEvent(rec.task_id, v, rec.complete_tick, delta.seq, n_created,
                                              len(delta.changed) - n_created, len(delta.removed), now))
        if self.local_maps is not None:
            for local in self.local_maps:
                apply_delta(local, delta, self.gmap)
        if self.train:
            self.pending[v] = (s, y, -rec.latency_s)
            if len(self.replay) >= self.policy.batch_size and self.policy.steps < self.train_steps:
                loss = train_step(self.policy, self.replay)
                self.metrics.losses.append(loss)
                every = self.cfg.training.log_every
                if every and self.policy.steps % every == 0:
                    recent = self.metrics.latencies()[-every:]
                    log.info("step %d loss %.6f mean latency %.6f eps %.3f", self.policy.steps, loss,
                             float(np.mean(recent)), self.policy.epsilon)
                if self.on_step is not None:
                    self.on_step(self.policy)

    on_step = None

    # ----------------------------------------------------------------- main loop

    def done_training(self):
        return self.train and self.policy.steps >= self.train_steps

    def run(self, until_trained=False, max_duration=None):
        """Simulate ``duration`` seconds (or, with ``until_trained``, until training finishes)."""
        sim = self.sim
        interval = max(1, int(round(self.cfg.control.metric_interval_s / sim.dt)))
        limit = self.duration if not until_trained else (max_duration or float("inf"))
        end = int(round(limit / sim.dt)) if np.isfinite(limit) else np.iinfo(np.int64).max
        next_grid = sim.tick
        self._on_grid()
        next_grid += interval
        for v in range(self.V):
            self.launch(v)
        while sim.tick < end:
            if until_trained and self.done_training():
                break
            done = sim.advance(min(next_grid, end))
            for rec in done:
                self._complete(rec)
            for rec in done:
                if not sim.busy(rec.vehicle_id):
                    self.launch(rec.vehicle_id)
            if sim.tick >= next_grid and sim.tick < end:
                self._on_grid()
                next_grid += interval
        self.metrics.identity_rate = self.identity.rate
        return self.metrics


def rm_warmup(cfg: ScenarioConfig, seed, n_tasks=None):
    """Harvest (count, channel, partition, latency) samples from a random-offloading run and fit RM."""
    n_tasks = cfg.control.rm_warmup_tasks if n_tasks is None else n_tasks
    exp = Experiment(cfg, "ro", seed + 1, duration=float("inf"))
    sim = exp.sim
    exp._on_grid()
    for v in range(exp.V):
        exp.launch(v)
    interval = max(1, int(round(cfg.control.metric_interval_s / sim.dt)))
    next_grid = interval
    while len(exp.rm_samples) < n_tasks:
        done = sim.advance(next_grid)
        for rec in done:
            exp._complete(rec)
        for rec in done:
            exp.launch(rec.vehicle_id)
        if sim.tick >= next_grid:
            exp._on_grid()
            next_grid += interval
    return control.rm_fit(np.array(exp.rm_samples[:n_tasks]), cfg.measurement.n_partitions)


def run(cfg: ScenarioConfig, algorithm, seed=None, out_dir=None, policy=None, rm_model=None, duration=None):
    seed = cfg.seed if seed is None else seed
    if algorithm == "rm" and rm_model is None:
        rm_model = rm_warmup(cfg, seed)
    metrics = Experiment(cfg, algorithm, seed, policy=policy, rm_model=rm_model, duration=duration).run()
    if out_dir is not None:
        metrics.write(out_dir)
    return metrics


def train(cfg: ScenarioConfig, mode, steps, seed=None, checkpoint=None, policy=None, max_duration=None):
    """Online training of the shared policy; checkpoints every ``checkpoint_every`` steps."""
    seed = cfg.seed if seed is None else seed
    algo = "livemap" if mode == "central" else "livemap-dist"
    if mode not in ("central", "distributed"):
        raise UsageError(f"unknown training mode {mode!r}")
    if policy is None:
        policy = make_policy(cfg, mode, seed)
        if checkpoint is not None and os.path.exists(checkpoint):
            policy.load(checkpoint)
    target = policy.steps + steps
    if checkpoint is not None:
        policy.save(checkpoint)
    replay = PrioritizedReplay(cfg.training.replay_capacity)
    episode = 0
    history = []
    while policy.steps < target:
        exp = Experiment(cfg, algo, seed + 1000 + episode, policy=policy, train=True, train_steps=target,
                         replay=replay, duration=cfg.duration)
        every = cfg.training.checkpoint_every
        if checkpoint is not None and every:
            exp.on_step = lambda p: p.save(checkpoint) if p.steps % every == 0 else None
        m = exp.run()
        history.append(m)
        episode += 1
    if checkpoint is not None:
        policy.save(checkpoint)
    return policy, history


SWEEP_PARAMS = ("vehicles", "bandwidth", "servers")
SWEEP_FIELDS = ("parameter", "value", "algorithm", "mean_latency_s", "p95_latency_s", "fulfillment_rate")


def with_param(cfg: ScenarioConfig, parameter, value):
    if parameter == "vehicles":
        return cfg.replace(vehicles=int(value))
    if parameter == "servers":
        return cfg.replace(servers=int(value))
    if parameter == "bandwidth":
        return cfg.replace(radio=dataclasses.replace(cfg.radio, bandwidth_hz=float(value)))
    raise UsageError(f"unknown sweep parameter {parameter!r}; choose from {', '.join(SWEEP_PARAMS)}")


def sweep(cfg: ScenarioConfig, parameter, values, algorithms, seed=None, out_path=None, policies=None,
          train_steps=None):
    """Every (value, algorithm) cell on the same seed.

    Learned algorithms take their policy from ``policies`` (keyed by mode) or
    are trained per cell for ``train_steps`` (default ``cfg.training.steps``).
    """
    if not len(values):
        raise UsageError("sweep needs at least one value")
    for a in algorithms:
        if a not in ALGORITHMS:
            raise UsageError(f"unknown algorithm {a!r}")
    seed = cfg.seed if seed is None else seed
    policies = policies or {}
    rows = []
    for value in values:
        cell = with_param(cfg, parameter, value).validate()
        trained = {}
        for a in algorithms:
            policy = None
            mode = POLICY_MODE.get(a)
            if mode is not None:
                policy = policies.get(mode) or trained.get(mode)
                if policy is None:
                    steps = cell.training.steps if train_steps is None else train_steps
                    policy, _ = train(cell, mode, steps, seed)
                    trained[mode] = policy
            m = run(cell, a, seed, policy=policy)
            rows.append((parameter, value, a, m.mean_latency, m.percentile(95), m.fulfillment_rate))
    if out_path is not None:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SWEEP_FIELDS)
            for p, v, a, mean, p95, ful in rows:
                w.writerow([p, f"{float(v):g}", a, _fmt(mean), _fmt(p95), _fmt(ful)])
    return rows
