"""Offloading controllers: central HEAD, distributed D-HEAD and the comparison baselines."""
from dataclasses import dataclass, field

import numpy as np

from . import coverage
from .map_core import predict_location
from .rl import greedy

SELF_TOLERANCE = 5.0


@dataclass(frozen=True)
class ControlDecision:
    vehicle_id: int
    scheduled: bool
    partition: int

    def __post_init__(self):
        if self.scheduled and self.partition < 0:
            raise ValueError("a scheduled vehicle needs a partition >= 0")
        if not self.scheduled and self.partition != -1:
            raise ValueError("an unscheduled vehicle must use partition -1")


# --------------------------------------------------------------------------- HEAD


class CentralHead:
    """Central scheduler: re-plans the scheduled set every ``period`` seconds.

    ``scheduled`` is the cached plan used between re-plans.
    """

    def __init__(self, n_vehicles, beta=0.8, period=1.0, cell=coverage.SCHEDULE_CELL):
        self.beta = beta
        self.period = period
        self.cell = cell
        self.scheduled = np.ones(n_vehicles, dtype=bool)
        self.next_plan = 0.0
        self.last_result = None

    def maybe_plan(self, now, centers, radii):
        if now + 1e-9 < self.next_plan:
            return False
        n = len(radii)
        self.last_result = coverage.schedule_arrays(np.arange(n), centers[:, 0], centers[:, 1], radii,
                                                    self.beta, self.cell)
        self.scheduled = self.last_result.scheduled.copy()
        self.next_plan = now + self.period
        return True

    def decide(self, vehicle_id, net, state):
        if not self.scheduled[vehicle_id]:
            return ControlDecision(vehicle_id, False, -1)
        return ControlDecision(vehicle_id, True, greedy(net.forward(state)))


def head_central(requesting, centers, radii, beta, net, states, now=0.0, period=1.0, head=None):
    """One HEAD round: plan if due, then decide for every requesting vehicle.

    ``states`` maps vehicle id to its central state vector.
    """
    if head is None:
        head = CentralHead(len(radii), beta, period)
    head.maybe_plan(now, np.asarray(centers, dtype=np.float64), np.asarray(radii, dtype=np.float64))
    return [head.decide(v, net, states[v]) for v in requesting], head


# --------------------------------------------------------------------------- D-HEAD


def estimate_disks(vehicle_id, own_xy, own_radius, tracks, self_obj=None, self_tol=SELF_TOLERANCE,
                   own_pose=False):
    """Coverage disks for the local scheduling graph and this vehicle's vertex in it.

    Every tracked vehicle gets this vehicle's own radius, centred at its
    linearly predicted position. Tracks within ``self_tol`` of an older track
    are duplicates of one vehicle and are dropped. This vehicle is the
    surviving track that holds ``self_obj`` (the map id the edge assigned to
    its last self-report), else the track nearest its true pose within
    ``self_tol``, else a new vertex at its true pose. Since local maps agree,
    vehicles placing themselves through their tracks all build the same graph.
    With ``own_pose`` the vehicle instead drops every track of itself and
    always stands at its true pose, under ``self_obj`` when known.

    Returns ``(ids, centers, radii, me)`` with ``me`` the row of this vehicle.
    """
    own_xy = np.asarray(own_xy, dtype=np.float64)[:2]
    tracks = sorted(tracks, key=lambda o: o.id)
    ids = np.array([o.id for o in tracks], dtype=np.int64)
    centers = np.array([predict_location(o.history)[:2] for o in tracks]).reshape(-1, 2)
    owner = np.arange(len(ids))
    if len(ids) > 1:
        close = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=2) <= self_tol
        for i in range(len(ids)):
            if owner[i] == i:
                later = np.flatnonzero(close[i, i + 1:]) + i + 1
                later = later[owner[later] == later]
                owner[later] = i
    kept = np.flatnonzero(owner == np.arange(len(ids)))
    row = {int(k): n for n, k in enumerate(kept)}
    ids, centers_k = ids[kept], centers[kept]
    me = None
    if own_pose:
        # drop this vehicle's tracks and stand at the true pose instead
        mine = np.linalg.norm(centers_k - own_xy, axis=1) <= self_tol
        if self_obj is not None:
            hit = np.flatnonzero(np.array([o.id for o in tracks]) == self_obj)
            if hit.size:
                mine[row[int(owner[hit[0]])]] = True
        ids, centers_k = ids[~mine], centers_k[~mine]
    elif self_obj is not None:
        hit = np.flatnonzero(np.array([o.id for o in tracks]) == self_obj)
        if hit.size:
            me = row[int(owner[hit[0]])]
    if me is None and len(ids):
        gap = np.linalg.norm(centers_k - own_xy, axis=1)
        if gap.min() <= self_tol:
            me = int(np.argmin(gap))
    if me is None:
        # the map id breaks AoR ties the same way the edge would
        own_id = self_obj if own_pose and self_obj is not None else -1 - vehicle_id
        ids = np.concatenate([ids, [own_id]]).astype(np.int64)
        centers_k = np.vstack([centers_k, own_xy[None, :]])
        me = len(ids) - 1
    return ids, centers_k, np.full(len(ids), float(own_radius)), me


def d_head(vehicle_id, own_xy, own_radius, tracks, beta, net, state, cell=coverage.SCHEDULE_CELL,
           self_obj=None, own_pose=False):
    """Distributed scheduling + offloading decision for one vehicle.

    With no other vehicle known, the vehicle schedules itself.
    """
    scheduled = d_head_schedule(vehicle_id, own_xy, own_radius, tracks, beta, cell, self_obj, own_pose)
    if not scheduled:
        return ControlDecision(vehicle_id, False, -1)
    return ControlDecision(vehicle_id, True, greedy(net.forward(state)))


def d_head_schedule(vehicle_id, own_xy, own_radius, tracks, beta, cell=coverage.SCHEDULE_CELL, self_obj=None,
                    own_pose=False):
    ids, centers, radii, me = estimate_disks(vehicle_id, own_xy, own_radius, tracks, self_obj, own_pose=own_pose)
    if len(ids) == 1:
        return True
    res = coverage.schedule_arrays(ids, centers[:, 0], centers[:, 1], radii, beta, cell)
    return bool(res.scheduled[me])


# --------------------------------------------------------------------------- baselines


def eo():
    return 0


def lp(n_partitions=5):
    return n_partitions - 1


def ro(rng, n_partitions=5):
    return int(rng.integers(n_partitions))


class FitError(ValueError):
    pass


@dataclass
class RegressionModel:
    """Degree-2 polynomial latency model over (CAV count, channel quality, partition).

    The partition enters as dummy indicators (partition 0 is the reference);
    squares of indicators and products between indicators are omitted since
    they duplicate or vanish.
    """
    n_partitions: int
    coef: np.ndarray = None
    intercept: float = 0.0
    mean: np.ndarray = None
    scale: np.ndarray = None
    ridge: float = 1e-6
    degree: int = 2
    names: list = field(default_factory=list)


def poly_features(count, channel, partition, n_partitions):
    count = np.asarray(count, dtype=np.float64).reshape(-1)
    channel = np.asarray(channel, dtype=np.float64).reshape(-1)
    partition = np.asarray(partition).reshape(-1)
    cols = [count, channel, count ** 2, count * channel, channel ** 2]
    names = ["n", "c", "n^2", "n*c", "c^2"]
    for y in range(1, n_partitions):
        d = (partition == y).astype(np.float64)
        cols += [d, count * d, channel * d]
        names += [f"y{y}", f"n*y{y}", f"c*y{y}"]
    return np.column_stack(cols), names


def rm_fit(samples, n_partitions=5, ridge=1e-6) -> RegressionModel:
    """Ridge least squares on standardised polynomial features.

    The penalty ``ridge * beta' G beta`` uses the feature Gram matrix ``G``,
    so a well-posed fit is ordinary least squares shrunk by ``1 / (1 + ridge)``.
    A singular ``G`` falls back to the isotropic penalty.

    ``samples`` rows are ``(count, channel, partition, latency)``. The penalty
    is on the mean-normalised normal equations, so duplicating the data leaves
    the model unchanged.
    """
    data = np.asarray(samples, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != 4 or not np.all(np.isfinite(data)):
        raise FitError("samples must be finite rows of (count, channel, partition, latency)")
    X, names = poly_features(data[:, 0], data[:, 1], data[:, 2].astype(np.int64), n_partitions)
    n, p = X.shape
    if n < 10 * (p + 1):
        raise FitError(f"need at least {10 * (p + 1)} samples for {p + 1} coefficients, got {n}")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Z = (X - mean) / scale
    y = data[:, 3]
    ybar = y.mean()
    G = Z.T @ Z / n
    b = Z.T @ (y - ybar) / n
    try:
        # penalty in the Gram metric shrinks every coefficient by the same factor
        L = np.linalg.cholesky(G)
        if np.linalg.cond(L) > 1e6:
            raise np.linalg.LinAlgError("ill-conditioned")
        beta = np.linalg.solve(L.T, np.linalg.solve(L, b)) / (1.0 + ridge)
    except np.linalg.LinAlgError:
        # rank deficient, e.g. a partition never observed: plain ridge picks the minimum-norm fit
        try:
            beta = np.linalg.solve(G + ridge * np.eye(p), b)
        except np.linalg.LinAlgError as exc:
            raise FitError("normal equations are singular") from exc
    if not np.all(np.isfinite(beta)):
        raise FitError("fit produced non-finite coefficients")
    return RegressionModel(n_partitions, beta, ybar, mean, scale, ridge, 2, names)


def raw_coefficients(model: RegressionModel):
    """Coefficients on the unscaled features, with the intercept first."""
    coef = model.coef / model.scale
    return np.concatenate([[model.intercept - coef @ model.mean], coef])


def rm_predict(model: RegressionModel, count, channel, partition):
    X, _ = poly_features(count, channel, partition, model.n_partitions)
    return model.intercept + ((X - model.mean) / model.scale) @ model.coef


def rm_decide(model: RegressionModel, count, channel):
    ys = np.arange(model.n_partitions)
    pred = rm_predict(model, np.full(len(ys), count), np.full(len(ys), channel), ys)
    return int(np.argmin(pred))
