"""Routes completed uploads through match -> upsert -> expire and mirrors deltas into local maps."""
import logging
from dataclasses import dataclass

import numpy as np

from .map_core import (DEFAULT_GATE, DEFAULT_THRESHOLD, DEFAULT_WEIGHT, GlobalMap, MapDelta,
                       expire_objects, match_object, upsert_observation)
from .scenario import VEHICLE_CLASS

log = logging.getLogger(__name__)


@dataclass
class MatchParams:
    weight: float = DEFAULT_WEIGHT
    gate: float = DEFAULT_GATE
    threshold: float = DEFAULT_THRESHOLD
    round_s: float = 0.1


@dataclass
class DeltaEvent:
    """Run-trace record for one broadcast delta."""
    task_id: int
    vehicle_id: int
    complete_tick: int
    seq: int
    n_created: int
    n_updated: int
    n_removed: int
    time_s: float = 0.0
    kind: str = "delta"


def ingest_completion(gmap: GlobalMap, detections, now: float, params: MatchParams = MatchParams()):
    """Fold one upload's detections into ``gmap``.

    Map-update rounds are ``params.round_s`` slots of capture time, so views
    of one object captured in the same slot are fused. Returns ``(delta,
    assigned, created)`` where ``assigned[k]`` is the map id detection ``k``
    ended up in and ``created[k]`` whether that object is new. The delta gets
    the next sequence number even when empty.
    """
    gmap.seq += 1
    delta = MapDelta(gmap.seq, now)
    assigned = []
    created = []
    for det in detections:
        obj_id = match_object(det.feature, det.location, gmap, params.weight, params.gate, params.threshold)
        rt = None
        if params.round_s:
            rt = np.floor(det.timestamp / params.round_s + 1e-9) * params.round_s
        d = upsert_observation(gmap, obj_id, det, now, rt)
        delta.merge(d)
        assigned.append(next(iter(d.changed)))
        created.append(obj_id is None)
    removed = expire_objects(gmap, now)
    delta.merge(MapDelta(gmap.seq, now, removed=removed))
    delta.seq = gmap.seq
    return delta, assigned, created


class LocalMap:
    """A vehicle's delta-synchronised mirror of the global map."""

    def __init__(self):
        self.objects = {}
        self.seq = 0
        self.resyncs = 0

    def snapshot_from(self, gmap: GlobalMap):
        self.objects = {i: gmap.snapshot(i) for i in gmap.objects}
        self.seq = gmap.seq
        self.resyncs += 1

    def vehicle_tracks(self, now, ttl):
        """Histories of live vehicle-class objects."""
        return [o for o in self.objects.values() if o.class_id == VEHICLE_CLASS and now - o.last_update <= ttl]


def apply_delta(local: LocalMap, delta: MapDelta, gmap: GlobalMap = None) -> bool:
    """Apply ``delta`` if it is the next in sequence; on a gap, resync from ``gmap``.

    Returns ``True`` when the delta was applied in order.
    """
    if delta.seq != local.seq + 1:
        log.warning("local map at seq %d got delta %d; resyncing", local.seq, delta.seq)
        if gmap is not None:
            local.snapshot_from(gmap)
        return False
    # snapshots inside a delta are never mutated afterwards, so they can be shared
    local.objects.update(delta.changed)
    for i in delta.removed:
        local.objects.pop(i, None)
    local.seq = delta.seq
    return True


def maps_equal(local: LocalMap, gmap: GlobalMap) -> bool:
    if set(local.objects) != set(gmap.objects):
        return False
    for i, obj in gmap.objects.items():
        mine = local.objects[i]
        if mine.last_update != obj.last_update or not np.array_equal(mine.location, obj.location):
            return False
        if len(mine.history) != len(obj.history):
            return False
    return True


class IdentityTracker:
    """Scores detections against ground truth.

    A map object belongs to the ground-truth id of the detection that created
    it. A detection is consistent when it lands in an object owned by its own
    ground-truth id, or creates a new object while no live object owns that id.
    """

    def __init__(self, keep_log=False):
        self.owner = {}
        self.total = 0
        self.consistent = 0
        # optional (truth_id, capture time, consistent) per scored detection
        self.log = [] if keep_log else None

    def record(self, gmap: GlobalMap, detections, assigned, created):
        live_owned = {}
        for obj_id, truth in self.owner.items():
            if obj_id in gmap.objects:
                live_owned.setdefault(truth, set()).add(obj_id)
        for det, obj_id, new in zip(detections, assigned, created):
            self.total += 1
            if new:
                ok = det.truth_id not in live_owned
                self.owner[obj_id] = det.truth_id
                live_owned.setdefault(det.truth_id, set()).add(obj_id)
            else:
                ok = self.owner.get(obj_id) == det.truth_id
            self.consistent += ok
            if self.log is not None:
                self.log.append((det.truth_id, det.timestamp, bool(ok)))
        self.owner = {i: t for i, t in self.owner.items() if i in gmap.objects}

    @property
    def rate(self):
        return self.consistent / self.total if self.total else 1.0
