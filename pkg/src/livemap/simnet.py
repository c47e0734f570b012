"""Tick-driven simulator of onboard compute, shared radio and min-load edge queues.

Each vehicle holds at most one task. During tick ``k`` (time ``k*dt`` to
``(k+1)*dt``) every task makes progress in the stage it occupied at the start
of the tick; stage changes are stamped ``k+1``. Stages with a zero budget are
passed through at the same stamp, so per-stage durations always sum to the
latency exactly.
"""
from dataclasses import dataclass

import numpy as np

from ._accel import dispatch, njit
from .config import MeasurementModel, RadioConfig
from .scenario import draw_budgets

IDLE, ONBOARD, UPLINK, EDGE, DOWNLINK = 0, 1, 2, 3, 4
_EPS_S = 1e-12
_EPS_BITS = 1e-6

# timestamp columns
T_SUBMIT, T_ONBOARD, T_UPLINK, T_EDGE_START, T_EDGE, T_DONE = range(6)


class Busy(RuntimeError):
    pass


@dataclass
class TaskRecord:
    task_id: int
    vehicle_id: int
    partition: int
    submit_s: float
    onboard_s: float
    uplink_s: float
    queue_s: float
    edge_s: float
    downlink_s: float
    latency_s: float
    complete_tick: int
    local: bool = False
    kind: str = "task"


# --------------------------------------------------------------------------- radio


class RadioModel:
    """Log-distance path loss with per-vehicle log-normal shadowing held for ``coherence_s``."""

    def __init__(self, cfg: RadioConfig, n_vehicles: int, base_station, rng):
        self.cfg = cfg
        self.bs = np.asarray(base_station, dtype=np.float64)
        self.rng = rng
        self.shadow = np.zeros(n_vehicles)
        self.next_draw = 0.0

    def refresh(self, t):
        if t + 1e-12 >= self.next_draw:
            if self.cfg.shadowing_db > 0:
                self.shadow = self.rng.normal(0.0, self.cfg.shadowing_db, size=self.shadow.shape)
            self.next_draw = t + self.cfg.coherence_s

    def snr_db(self, positions):
        d = np.maximum(np.linalg.norm(np.atleast_2d(positions) - self.bs, axis=1), 1.0)
        return self.cfg.snr_ref_db - 10.0 * self.cfg.pathloss_exponent * np.log10(d) + self.shadow[:len(d)]

    def spectral_efficiency(self, positions):
        return np.log2(1.0 + 10.0 ** (self.snr_db(positions) / 10.0))


def snr(radio: RadioConfig, distance, shadowing_db=0.0):
    """Linear SNR at ``distance`` metres."""
    d = np.asarray(distance, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("distance must be positive")
    db = radio.snr_ref_db - 10.0 * radio.pathloss_exponent * np.log10(d) + shadowing_db
    return 10.0 ** (db / 10.0)


# --------------------------------------------------------------------------- kernels
#
# Shared layout: stage[V] int64, rem[V, 4] float (onboard s, uplink bits, edge s,
# downlink bits), stamps[V, 6] int64, speed[V], se[V], server[V], seq[V],
# task_id[V], server_speed[S]. ``counter[0]`` is the next edge arrival number.


@njit
def _enter_nb(v, stage_from, stage, rem, stamps, server, seq, task_id, server_speed, counter, tick):
    # move vehicle v past ``stage_from``, skipping zero-budget stages
    s = stage_from
    while True:
        s += 1
        if s == UPLINK:
            stamps[v, T_ONBOARD] = tick
            if rem[v, 1] > _EPS_BITS:
                stage[v] = UPLINK
                return
        elif s == EDGE:
            stamps[v, T_UPLINK] = tick
            if rem[v, 2] > _EPS_S:
                nsrv = server_speed.shape[0]
                best = 0
                best_load = np.inf
                for srv in range(nsrv):
                    load = 0.0
                    for u in range(stage.shape[0]):
                        if stage[u] == EDGE and server[u] == srv:
                            load += rem[u, 2]
                    if load < best_load:
                        best_load = load
                        best = srv
                server[v] = best
                seq[v] = counter[0]
                counter[0] += 1
                stamps[v, T_EDGE_START] = -1
                stage[v] = EDGE
                return
            stamps[v, T_EDGE_START] = tick
        elif s == DOWNLINK:
            stamps[v, T_EDGE] = tick
            if rem[v, 3] > _EPS_BITS:
                stage[v] = DOWNLINK
                return
        else:
            stamps[v, T_DONE] = tick
            stage[v] = IDLE
            return


@njit
def _advance_nb(stage, rem, stamps, speed, se, server, seq, task_id, server_speed, counter,
                bandwidth, dt, tick, stop):
    V = stage.shape[0]
    nsrv = server_speed.shape[0]
    order = np.argsort(task_id)
    head = np.empty(nsrv, dtype=np.int64)
    finished = np.zeros(V, dtype=np.int64)
    while tick < stop:
        n_up = 0
        n_down = 0
        for v in range(V):
            if stage[v] == UPLINK:
                n_up += 1
            elif stage[v] == DOWNLINK:
                n_down += 1
        for srv in range(nsrv):
            head[srv] = -1
        for v in range(V):
            if stage[v] == EDGE:
                h = head[server[v]]
                if h < 0 or seq[v] < seq[h]:
                    head[server[v]] = v
        nfin = 0
        for v in range(V):
            st = stage[v]
            done = False
            if st == ONBOARD:
                rem[v, 0] -= dt * speed[v]
                done = rem[v, 0] <= _EPS_S
            elif st == UPLINK:
                rem[v, 1] -= (bandwidth / n_up) * se[v] * dt
                done = rem[v, 1] <= _EPS_BITS
            elif st == EDGE:
                if head[server[v]] == v:
                    if stamps[v, T_EDGE_START] < 0:
                        stamps[v, T_EDGE_START] = tick
                    rem[v, 2] -= dt * server_speed[server[v]]
                    done = rem[v, 2] <= _EPS_S
            elif st == DOWNLINK:
                rem[v, 3] -= (bandwidth / n_down) * se[v] * dt
                done = rem[v, 3] <= _EPS_BITS
            if done:
                finished[nfin] = v
                nfin += 1
        tick += 1
        completed = False
        # stage changes are applied in task-id order so edge arrivals are deterministic
        for k in range(V):
            v = order[k]
            hit = False
            for f in range(nfin):
                if finished[f] == v:
                    hit = True
            if not hit:
                continue
            _enter_nb(v, stage[v], stage, rem, stamps, server, seq, task_id, server_speed, counter, tick)
            if stage[v] == IDLE:
                completed = True
        if completed:
            break
    return tick


def _enter_np(v, stage_from, stage, rem, stamps, server, seq, task_id, server_speed, counter, tick):
    s = stage_from
    while True:
        s += 1
        if s == UPLINK:
            stamps[v, T_ONBOARD] = tick
            if rem[v, 1] > _EPS_BITS:
                stage[v] = UPLINK
                return
        elif s == EDGE:
            stamps[v, T_UPLINK] = tick
            if rem[v, 2] > _EPS_S:
                on_edge = stage == EDGE
                loads = np.bincount(server[on_edge], weights=rem[on_edge, 2], minlength=len(server_speed))
                server[v] = int(np.argmin(loads))
                seq[v] = counter[0]
                counter[0] += 1
                stamps[v, T_EDGE_START] = -1
                stage[v] = EDGE
                return
            stamps[v, T_EDGE_START] = tick
        elif s == DOWNLINK:
            stamps[v, T_EDGE] = tick
            if rem[v, 3] > _EPS_BITS:
                stage[v] = DOWNLINK
                return
        else:
            stamps[v, T_DONE] = tick
            stage[v] = IDLE
            return


def _advance_np(stage, rem, stamps, speed, se, server, seq, task_id, server_speed, counter,
                bandwidth, dt, tick, stop):
    while tick < stop:
        on = stage == ONBOARD
        up = stage == UPLINK
        edge = np.flatnonzero(stage == EDGE)
        down = stage == DOWNLINK
        n_up = int(up.sum())
        n_down = int(down.sum())
        fin = np.zeros(len(stage), dtype=bool)
        rem[on, 0] -= dt * speed[on]
        fin |= on & (rem[:, 0] <= _EPS_S)
        if n_up:
            rem[up, 1] -= (bandwidth / n_up) * se[up] * dt
            fin |= up & (rem[:, 1] <= _EPS_BITS)
        if edge.size:
            heads = []
            for srv in np.unique(server[edge]):
                members = edge[server[edge] == srv]
                heads.append(members[np.argmin(seq[members])])
            heads = np.array(heads, dtype=np.int64)
            fresh = heads[stamps[heads, T_EDGE_START] < 0]
            stamps[fresh, T_EDGE_START] = tick
            rem[heads, 2] -= dt * server_speed[server[heads]]
            fin[heads] |= rem[heads, 2] <= _EPS_S
        if n_down:
            rem[down, 3] -= (bandwidth / n_down) * se[down] * dt
            fin |= down & (rem[:, 3] <= _EPS_BITS)
        tick += 1
        if not fin.any():
            continue
        movers = np.flatnonzero(fin)
        movers = movers[np.argsort(task_id[movers])]
        completed = False
        for v in movers:
            _enter_np(v, stage[v], stage, rem, stamps, server, seq, task_id, server_speed, counter, tick)
            completed |= stage[v] == IDLE
        if completed:
            break
    return tick


_advance = dispatch(_advance_nb, _advance_np)
_enter = dispatch(_enter_nb, _enter_np)


# --------------------------------------------------------------------------- simulator


class EdgeSim:
    """Vehicles, shared radio and an edge cluster advancing in fixed ticks."""

    def __init__(self, n_vehicles, n_servers=5, bandwidth=0.1e6, dt=0.001, measurement=None,
                 rng=None, vehicle_speed=None, server_speed=1.0):
        if bandwidth <= 0 or dt <= 0:
            raise ValueError("bandwidth and dt must be positive")
        self.dt = dt
        self.bandwidth = float(bandwidth)
        self.model = measurement if measurement is not None else MeasurementModel()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        V = n_vehicles
        self.stage = np.zeros(V, dtype=np.int64)
        self.rem = np.zeros((V, 4))
        self.stamps = np.zeros((V, 6), dtype=np.int64)
        self.speed = np.ones(V) if vehicle_speed is None else np.asarray(vehicle_speed, dtype=np.float64).copy()
        self.se = np.ones(V)
        self.server = np.zeros(V, dtype=np.int64)
        self.seq = np.zeros(V, dtype=np.int64)
        self.task_id = np.full(V, np.iinfo(np.int64).max, dtype=np.int64)
        self.partition = np.full(V, -1, dtype=np.int64)
        self.local = np.zeros(V, dtype=bool)
        speeds = np.broadcast_to(np.asarray(server_speed, dtype=np.float64), (n_servers,))
        self.server_speed = np.array(speeds)
        self.counter = np.zeros(1, dtype=np.int64)
        self.tick = 0
        self.next_task = 0
        self.budgets = {}
        self._events = []
        self._published = []

    @property
    def now(self):
        return self.tick * self.dt

    @property
    def n_vehicles(self):
        return len(self.stage)

    def busy(self, v):
        return self.stage[v] != IDLE

    def queued_count(self):
        return int(np.count_nonzero(self.stage == EDGE))

    def uplink_count(self):
        return int(np.count_nonzero(self.stage == UPLINK))

    def submit(self, vehicle_id, y, budgets=None):
        """Start a task for ``vehicle_id`` with partition ``y`` (``-1``: unscheduled, fully local)."""
        v = vehicle_id
        if self.stage[v] != IDLE:
            raise Busy(f"vehicle {v} already has a task in flight")
        n = self.model.n_partitions
        if not -1 <= y < n:
            raise ValueError(f"partition {y} outside [-1, {n - 1}]")
        if budgets is None:
            budgets = draw_budgets(self.model, n - 1 if y < 0 else y, 1.0, self.rng)
        tid = self.next_task
        self.next_task += 1
        self.budgets[tid] = budgets
        self.rem[v] = (budgets.onboard_s, budgets.uplink_bits, budgets.edge_s, budgets.downlink_bits)
        if y < 0:
            self.rem[v, 1:] = 0.0
        elif y == n - 1:
            self.rem[v, 1:3] = 0.0
        self.stamps[v] = self.tick
        self.task_id[v] = tid
        self.partition[v] = y
        self.local[v] = y < 0
        if self.rem[v, 0] > _EPS_S:
            self.stage[v] = ONBOARD
        else:
            self.stage[v] = ONBOARD
            _enter(v, ONBOARD, self.stage, self.rem, self.stamps, self.server, self.seq, self.task_id,
                   self.server_speed, self.counter, self.tick)
            if self.stage[v] == IDLE:
                self._collect([v])
        return tid

    def step(self, dt=None):
        """Advance exactly one tick."""
        if dt is not None and abs(dt - self.dt) > 1e-15:
            raise ValueError("step size is fixed at construction")
        self.advance(self.tick + 1)

    def advance(self, stop_tick):
        """Run ticks until ``stop_tick`` or until at least one task completes; returns completions."""
        before = self.stage != IDLE
        self.tick = int(_advance(self.stage, self.rem, self.stamps, self.speed, self.se, self.server,
                                 self.seq, self.task_id, self.server_speed, self.counter,
                                 self.bandwidth, self.dt, self.tick, int(stop_tick)))
        done = np.flatnonzero(before & (self.stage == IDLE))
        return self._collect(done)

    def _collect(self, vehicles):
        out = []
        for v in vehicles:
            st = self.stamps[v]
            dt = self.dt
            rec = TaskRecord(int(self.task_id[v]), int(v), int(self.partition[v]), st[T_SUBMIT] * dt,
                             (st[T_ONBOARD] - st[T_SUBMIT]) * dt, (st[T_UPLINK] - st[T_ONBOARD]) * dt,
                             (st[T_EDGE_START] - st[T_UPLINK]) * dt, (st[T_EDGE] - st[T_EDGE_START]) * dt,
                             (st[T_DONE] - st[T_EDGE]) * dt, (st[T_DONE] - st[T_SUBMIT]) * dt,
                             int(st[T_DONE]), bool(self.local[v]))
            rec.stage_ticks = tuple(int(x) for x in np.diff(st[[T_SUBMIT, T_ONBOARD, T_UPLINK, T_EDGE_START,
                                                                  T_EDGE, T_DONE]]))
            rec.latency_ticks = int(st[T_DONE] - st[T_SUBMIT])
            self.budgets.pop(rec.task_id, None)
            out.append(rec)
        out.sort(key=lambda r: (r.complete_tick, r.task_id))
        self._events.extend(out)
        return out

    def publish(self, event):
        self._published.append(event)

    def drain_events(self):
        """Completions and published map events since the last call, ordered by tick then id."""
        events = self._events + self._published
        self._events, self._published = [], []
        events.sort(key=lambda e: (e.complete_tick, 0 if e.kind == "task" else 1, e.task_id))
        return events

    def uplink_rates(self):
        up = self.stage == UPLINK
        n = up.sum()
        return np.where(up, self.bandwidth / max(n, 1) * self.se, 0.0)
