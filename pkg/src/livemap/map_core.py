"""Data-plane math: projection, robust depth, matching, fusion, prediction and map upkeep."""
import copy
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

DEFAULT_GATE = 100.0
DEFAULT_THRESHOLD = 25.0
DEFAULT_WEIGHT = 0.1
DEFAULT_TTL = 3.0
FEATURE_CAP = 8
HISTORY_CAP = 32


class InvalidInput(ValueError):
    pass


class NoDepth(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    R_W: int
    R_H: int

    def __post_init__(self):
        if not (self.f > 0 and self.R_W > 0 and self.R_H > 0):
            raise InvalidInput(f"bad intrinsics {self}")


@dataclass(frozen=True)
class PixelBox:
    u0: float
    v0: float
    width: float
    height: float
    confidence: float = 1.0
    class_id: int = 0

    def check(self, intr: CameraIntrinsics):
        if not (0 <= self.u0 < intr.R_W and 0 <= self.v0 < intr.R_H):
            raise InvalidInput(f"box centre ({self.u0}, {self.v0}) outside image")
        if not (self.width > 0 and self.height > 0):
            raise InvalidInput("box must have positive size")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidInput(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class Detection:
    """One vehicle's view of one object, already placed in world coordinates."""
    feature: np.ndarray
    location: np.ndarray
    confidence: float
    class_id: int
    source: int
    timestamp: float
    box: Optional[PixelBox] = None
    depth: Optional[float] = None
    truth_id: int = -1


@dataclass
class MapObject:
    id: int
    class_id: int
    location: np.ndarray
    features: deque
    confidence: float
    history: list
    last_update: float
    round_time: float = -np.inf
    round_obs: list = field(default_factory=list)


@dataclass
class MapDelta:
    seq: int
    time: float
    changed: dict = field(default_factory=dict)
    created: list = field(default_factory=list)
    removed: list = field(default_factory=list)

    def merge(self, other: "MapDelta"):
        self.changed.update(other.changed)
        self.created.extend(i for i in other.created if i not in self.created)
        for i in other.removed:
            self.changed.pop(i, None)
            if i not in self.removed:
                self.removed.append(i)

    def __len__(self):
        return len(self.changed) + len(self.removed)


# --------------------------------------------------------------------------- projection


def pixel_to_camera(box: PixelBox, depth: float, intr: CameraIntrinsics) -> np.ndarray:
    if not depth > 0:
        raise InvalidInput(f"depth must be positive, got {depth}")
    box.check(intr)
    x = -(depth * (box.v0 - 0.5 * intr.R_H)) / intr.f
    y = (depth * (box.u0 - 0.5 * intr.R_W)) / intr.f
    return np.array([x, y, depth])


def camera_to_pixel(p, intr: CameraIntrinsics):
    """Inverse of :func:`pixel_to_camera`: returns ``(u0, v0, depth)``."""
    x, y, d = p
    return y * intr.f / d + 0.5 * intr.R_W, -x * intr.f / d + 0.5 * intr.R_H, d


def check_pose(pose) -> np.ndarray:
    m = np.asarray(pose, dtype=np.float64)
    if m.shape != (4, 4) or not np.all(np.isfinite(m)):
        raise InvalidInput("pose must be a finite 4x4 matrix")
    if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
        raise InvalidInput("pose bottom row must be (0, 0, 0, 1)")
    rot = m[:3, :3]
    if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-6:
        raise InvalidInput("pose rotation block is not orthonormal")
    return m


def camera_to_world(p, pose) -> np.ndarray:
    m = check_pose(pose)
    return (m @ np.append(np.asarray(p, dtype=np.float64), 1.0))[:3]


def yaw_pose(yaw: float, translation=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Right-handed z-up pose: rotation by ``yaw`` about +z, then translation."""
    c, s = np.cos(yaw), np.sin(yaw)
    m = np.eye(4)
    m[:2, :2] = [[c, -s], [s, c]]
    m[:3, 3] = translation
    return m


def invert_pose(pose) -> np.ndarray:
    m = check_pose(pose)
    inv = np.eye(4)
    inv[:3, :3] = m[:3, :3].T
    inv[:3, 3] = -m[:3, :3].T @ m[:3, 3]
    return inv


# --------------------------------------------------------------------------- depth


def trimmed_patch_mean(patch_means) -> float:
    """Drop one maximum and one minimum patch mean, average the rest."""
    means = np.sort(np.asarray(patch_means, dtype=np.float64))
    if means.size < 3:
        raise NoDepth(f"need at least 3 valid patches, got {means.size}")
    return float(means[1:-1].mean())


def estimate_depth(depth_image, box: PixelBox, rng_seed=None, k: int = 8, patch: int = 4) -> float:
    """Robust object depth from ``k`` random square patches near the box centre.

    Patch centres are uniform over the middle half of the box; zero pixels are
    treated as missing. Patches without any valid pixel are discarded.
    """
    img = np.asarray(depth_image, dtype=np.float64)
    h, w = img.shape
    rng = np.random.default_rng(rng_seed)
    us = rng.uniform(box.u0 - box.width / 4, box.u0 + box.width / 4, size=k)
    vs = rng.uniform(box.v0 - box.height / 4, box.v0 + box.height / 4, size=k)
    half = patch // 2
    means = []
    for u, v in zip(us, vs):
        c0 = min(max(int(u) - half, 0), max(w - patch, 0))
        r0 = min(max(int(v) - half, 0), max(h - patch, 0))
        block = img[r0:r0 + patch, c0:c0 + patch]
        valid = block[block > 0]
        if valid.size:
            means.append(valid.mean())
    return trimmed_patch_mean(means)


# --------------------------------------------------------------------------- fusion / prediction


def combine_location(observations) -> np.ndarray:
    """Confidence-weighted mean of ``(confidence, location)`` pairs."""
    if len(observations) == 0:
        raise InvalidInput("no observations to combine")
    conf = np.array([c for c, _ in observations], dtype=np.float64)
    locs = np.array([np.asarray(g, dtype=np.float64) for _, g in observations])
    total = conf.sum()
    if not total > 0 or np.any(conf < 0):
        raise InvalidInput("confidences must be non-negative with a positive total")
    return (conf[:, None] * locs).sum(axis=0) / total


def predict_location(history) -> np.ndarray:
    """Linear extrapolation ``2 g(t) - g(t-1)`` from the two newest history entries."""
    if len(history) == 0:
        raise InvalidInput("empty history")
    last = np.asarray(history[-1][1], dtype=np.float64)
    if len(history) == 1:
        return last.copy()
    return 2.0 * last - np.asarray(history[-2][1], dtype=np.float64)


# --------------------------------------------------------------------------- global map


class GlobalMap:
    """Edge-resident object registry.

    Besides the ``objects`` dict, it keeps row-aligned arrays of predicted
    ground-plane positions and padded feature sets so that matching is a
    vectorised scan.
    """

    def __init__(self, ttl: float = DEFAULT_TTL, feature_dim: int = 32):
        self.objects: dict = {}
        self.ttl = ttl
        self.next_id = 0
        self.seq = 0
        self.dim = feature_dim
        self._rows: dict = {}
        self._ids = np.zeros(64, dtype=np.int64)
        self._alive = np.zeros(64, dtype=bool)
        self._pred = np.zeros((64, 2))
        self._feat = np.zeros((64, FEATURE_CAP, feature_dim))
        self._nfeat = np.zeros(64, dtype=np.int64)
        self._used = 0

    def __len__(self):
        return len(self.objects)

    def _grow(self):
        cap = 2 * len(self._ids)
        for name in ("_ids", "_alive", "_pred", "_feat", "_nfeat"):
            old = getattr(self, name)
            new = np.zeros((cap,) + old.shape[1:], dtype=old.dtype)
            new[:len(old)] = old
            setattr(self, name, new)

    def _index(self, obj: MapObject):
        row = self._rows.get(obj.id)
        if row is None:
            if self._used == len(self._ids):
                self._compact()
                if self._used == len(self._ids):
                    self._grow()
            row = self._used
            self._used += 1
            self._rows[obj.id] = row
            self._ids[row] = obj.id
            self._alive[row] = True
        self._pred[row] = predict_location(obj.history)[:2]
        n = len(obj.features)
        self._feat[row, :n] = np.asarray(obj.features)
        self._nfeat[row] = n

    def _compact(self):
        keep = np.flatnonzero(self._alive[:self._used])
        for name in ("_ids", "_pred", "_feat", "_nfeat"):
            arr = getattr(self, name)
            arr[:len(keep)] = arr[keep]
        self._alive[:] = False
        self._alive[:len(keep)] = True
        self._used = len(keep)
        self._rows = {int(i): r for r, i in enumerate(self._ids[:self._used])}

    def _drop(self, obj_id):
        row = self._rows.pop(obj_id)
        self._alive[row] = False

    def candidate_distances(self, feature, location, w, gate):
        """Object ids inside the gate and their matching distances."""
        z = np.asarray(feature, dtype=np.float64)
        if z.ndim != 1 or z.size == 0 or z.size != self.dim:
            raise InvalidInput(f"feature must be a length-{self.dim} vector")
        g = np.asarray(location, dtype=np.float64)[:2]
        used = self._used
        geo2 = ((self._pred[:used] - g) ** 2).sum(axis=1)
        rows = np.flatnonzero(self._alive[:used] & (geo2 < gate * gate))
        if rows.size == 0:
            return rows, np.zeros(0)
        fd = ((self._feat[rows] - z) ** 2).sum(axis=2)
        fd[np.arange(FEATURE_CAP)[None, :] >= self._nfeat[rows][:, None]] = np.inf
        return self._ids[rows], fd.min(axis=1) + w * geo2[rows]

    def snapshot(self, obj_id) -> MapObject:
        obj = self.objects[obj_id]
        snap = copy.copy(obj)
        snap.location = obj.location.copy()
        snap.features = deque(obj.features, maxlen=FEATURE_CAP)
        snap.history = list(obj.history)
        snap.round_obs = list(obj.round_obs)
        return snap


def matching_distance(feature, location, obj: MapObject, w: float) -> float:
    """Min squared feature distance over the object's views plus ``w`` times squared geo-distance."""
    z = np.asarray(feature, dtype=np.float64)
    feats = np.asarray(obj.features, dtype=np.float64)
    if z.size == 0 or feats.shape[1] != z.size:
        raise InvalidInput("feature dimension mismatch")
    pred = predict_location(obj.history)[:2]
    geo2 = float(((pred - np.asarray(location, dtype=np.float64)[:2]) ** 2).sum())
    return float(((feats - z) ** 2).sum(axis=1).min()) + w * geo2


def match_object(feature, location, gmap: GlobalMap, w: float = DEFAULT_WEIGHT,
                 gate: float = DEFAULT_GATE, threshold: float = DEFAULT_THRESHOLD) -> Optional[int]:
    """Best gated candidate id, or ``None`` when no candidate is within ``threshold``."""
    ids, dist = gmap.candidate_distances(feature, location, w, gate)
    if ids.size == 0:
        return None
    # argmin returns the first minimum; rows are in insertion order, so ties go to the older object
    best = int(np.argmin(dist))
    return int(ids[best]) if dist[best] <= threshold else None


def upsert_observation(gmap: GlobalMap, obj_id: Optional[int], det: Detection, now: float,
                       round_time: Optional[float] = None) -> MapDelta:
    """Fold a matched (or new, ``obj_id=None``) detection into the map.

    ``round_time`` keys the fusion window (defaults to ``now``): observations
    of one object in the same round are fused, a later round starts a new
    history entry, and an observation from an older round only adds its view.
    """
    loc = np.asarray(det.location, dtype=np.float64)
    rt = now if round_time is None else round_time
    created = obj_id is None
    if created:
        obj_id = gmap.next_id
        gmap.next_id += 1
        obj = MapObject(obj_id, det.class_id, loc.copy(), deque(maxlen=FEATURE_CAP),
                        det.confidence, [], now)
        gmap.objects[obj_id] = obj
    else:
        obj = gmap.objects[obj_id]
    obj.features.append(np.asarray(det.feature, dtype=np.float64))
    if rt >= obj.round_time:
        if rt > obj.round_time:
            obj.round_time = rt
            obj.round_obs = []
        obj.round_obs.append((det.confidence, loc))
        obj.location = combine_location(obj.round_obs)
        obj.confidence = float(np.mean([c for c, _ in obj.round_obs]))
        if obj.history and obj.history[-1][0] == rt:
            obj.history[-1] = (rt, obj.location.copy())
        else:
            obj.history.append((rt, obj.location.copy()))
            if len(obj.history) > HISTORY_CAP:
                del obj.history[0]
    obj.last_update = now
    gmap._index(obj)
    delta = MapDelta(gmap.seq, now, {obj_id: gmap.snapshot(obj_id)})
    if created:
        delta.created.append(obj_id)
    return delta


def expire_objects(gmap: GlobalMap, now: float) -> list:
    """Remove objects not refreshed within ``ttl``; an age of exactly ``ttl`` survives."""
    stale = [i for i, o in gmap.objects.items() if now - o.last_update > gmap.ttl]
    for i in stale:
        del gmap.objects[i]
        gmap._drop(i)
    return stale
