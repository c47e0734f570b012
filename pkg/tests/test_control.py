from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from livemap import control
from livemap.control import (CentralHead, ControlDecision, FitError, d_head, d_head_schedule, estimate_disks,
                             head_central, poly_features, raw_coefficients, rm_decide, rm_fit, rm_predict)
from livemap.coverage import schedule_arrays
from livemap.map_core import MapObject
from livemap.rl import QPolicy, greedy
from livemap.scenario import VEHICLE_CLASS


def track(obj_id, prev, last, t=1.0):
    return MapObject(obj_id, VEHICLE_CLASS, np.array([*last, 0.0]), deque([np.zeros(2)]), 1.0,
                     [(t - 0.1, np.array([*prev, 0.0])), (t, np.array([*last, 0.0]))], t)


def spread_points(rng, n, extent=300.0, gap=8.0):
    pts = []
    while len(pts) < n:
        p = rng.uniform(0, extent, 2)
        if all(np.linalg.norm(p - q) > gap for q in pts):
            pts.append(p)
    return np.array(pts)


# ---------------------------------------------------------------- decisions

def test_decision_invariants():
    ControlDecision(0, True, 3)
    ControlDecision(0, False, -1)
    with pytest.raises(ValueError):
        ControlDecision(0, True, -1)
    with pytest.raises(ValueError):
        ControlDecision(0, False, 2)


def test_head_disjoint_beta_one_schedules_everyone():
    pol = QPolicy(3, 5, hidden=(8,), seed=0)
    centers = np.array([[0, 0], [300, 0], [0, 300]], dtype=float)
    states = {v: np.array([0.1 * v, 0.5, 0.2]) for v in range(3)}
    decisions, head = head_central([0, 1, 2], centers, np.full(3, 50.0), 1.0, pol.online, states)
    assert all(d.scheduled for d in decisions)
    assert [d.partition for d in decisions] == [greedy(pol.online.forward(states[v])) for v in range(3)]
    again, _ = head_central([0, 1, 2], centers, np.full(3, 50.0), 1.0, pol.online, states)
    assert again == decisions


def test_head_unscheduled_gets_minus_one():
    pol = QPolicy(3, 5, hidden=(8,), seed=0)
    centers = np.zeros((3, 2))
    states = {v: np.zeros(3) for v in range(3)}
    decisions, _ = head_central([0, 1, 2], centers, np.full(3, 50.0), 0.8, pol.online, states)
    off = [d for d in decisions if not d.scheduled]
    assert len(off) == 2 and all(d.partition == -1 for d in off)


def test_head_replans_on_period():
    head = CentralHead(2, beta=0.8, period=1.0)
    same = np.zeros((2, 2))
    assert head.maybe_plan(0.0, same, np.full(2, 50.0))
    assert head.scheduled.sum() == 1
    apart = np.array([[0.0, 0.0], [500.0, 0.0]])
    assert not head.maybe_plan(0.5, apart, np.full(2, 50.0))
    assert head.scheduled.sum() == 1
    assert head.maybe_plan(1.0, apart, np.full(2, 50.0))
    assert head.scheduled.all()


def test_unscheduled_vehicle_sends_no_uplink_bits():
    from livemap.simnet import EdgeSim, UPLINK
    from livemap.scenario import StageBudgets
    sim = EdgeSim(1, 1, 0.1e6)
    sim.submit(0, -1, StageBudgets(0.05, 1e5, 0.1, 1e3))
    seen_uplink = False
    while sim.busy(0):
        seen_uplink |= sim.stage[0] == UPLINK
        sim.step()
    assert not seen_uplink


# ---------------------------------------------------------------- D-HEAD

def test_d_head_sole_vehicle():
    pol = QPolicy(3, 5, hidden=(8,), seed=0)
    s = np.array([0.3, 0.5, 0.5])
    d = d_head(0, (10.0, 10.0), 50.0, [], 0.8, pol.online, s)
    assert d == ControlDecision(0, True, greedy(pol.online.forward(s)))


@pytest.mark.parametrize("own_pose", [False, True])
def test_d_head_crowded_vehicle_unschedules(own_pose):
    # four neighbours ring this vehicle, so its disk overlaps the most
    ring = [(0.0, 6.0), (0.0, -6.0), (6.0, 0.0), (-6.0, 0.0)]
    others = [track(k, xy, xy) for k, xy in enumerate(ring, start=1)]
    mine = track(0, (0.0, 0.0), (0.0, 0.0))
    tracks = others + ([] if own_pose else [mine])
    assert not d_head_schedule(0, (0.0, 0.0), 50.0, tracks, 0.8, self_obj=0, own_pose=own_pose)
    pol = QPolicy(3, 5, hidden=(8,), seed=0)
    assert d_head(0, (0.0, 0.0), 50.0, tracks, 0.8, pol.online, np.zeros(3), self_obj=0,
                  own_pose=own_pose) == ControlDecision(0, False, -1)


def test_d_head_uses_linear_prediction():
    t = track(7, (10.0, 0.0), (20.0, 5.0))
    ids, centers, radii, me = estimate_disks(0, (200.0, 200.0), 40.0, [t])
    row = list(ids).index(7)
    assert np.allclose(centers[row], [30.0, 10.0])
    assert np.all(radii == 40.0)
    assert ids[me] == -1


def test_estimate_disks_dedupes_close_tracks():
    a = track(3, (0.0, 0.0), (0.0, 0.0))
    b = track(9, (2.0, 0.0), (2.0, 0.0))
    ids, _, _, _ = estimate_disks(0, (300.0, 300.0), 50.0, [b, a])
    assert 3 in ids and 9 not in ids


@pytest.mark.parametrize("own_pose", [False, True])
@pytest.mark.parametrize("seed", range(8))
def test_d_head_matches_head_with_perfect_maps(seed, own_pose):
    rng = np.random.default_rng(seed)
    n = 15
    pos = spread_points(rng, n, 250.0)
    central = schedule_arrays(np.arange(n), pos[:, 0], pos[:, 1], np.full(n, 50.0), 0.8).scheduled
    tracks = [track(v, pos[v], pos[v]) for v in range(n)]
    for v in range(n):
        mine = d_head_schedule(v, pos[v], 50.0, tracks, 0.8, self_obj=v, own_pose=own_pose)
        assert mine == central[v]


# ---------------------------------------------------------------- baselines

def test_fixed_baselines():
    assert control.eo() == 0
    assert control.lp() == 4


def test_ro_uniform():
    rng = np.random.default_rng(0)
    counts = np.bincount([control.ro(rng) for _ in range(100_000)], minlength=5)
    sd = np.sqrt(1e5 * 0.2 * 0.8)
    assert np.all(np.abs(counts - 20_000) <= 3 * sd)


# ---------------------------------------------------------------- regression model

def synthetic_samples(rng, n, fn):
    count = rng.integers(0, 50, n).astype(float)
    chan = rng.uniform(0, 12, n)
    y = rng.integers(0, 5, n)
    return np.c_[count, chan, y, fn(count, chan, y)]


@pytest.mark.parametrize("seed", range(5))
def test_rm_recovers_polynomial(seed):
    rng = np.random.default_rng(seed)
    data = synthetic_samples(rng, 2000, lambda c, ch, y: np.zeros(len(c)))
    F, _ = poly_features(data[:, 0], data[:, 1], data[:, 2].astype(int), 5)
    # every term contributes at most ~0.1 s, like real stage latencies
    truth = np.r_[0.7, rng.normal(scale=0.1, size=F.shape[1]) / np.abs(F).max(axis=0)]
    data[:, 3] = truth[0] + F @ truth[1:]
    model = rm_fit(data)
    assert np.abs(raw_coefficients(model) - truth).max() < 1e-6
    assert np.abs(rm_predict(model, data[:, 0], data[:, 1], data[:, 2].astype(int)) - data[:, 3]).max() < 1e-6


def test_rm_unseen_partition_rescued():
    rng = np.random.default_rng(5)
    data = synthetic_samples(rng, 1000, lambda c, ch, y: 0.01 * c + 0.1 * y)
    data = data[data[:, 2] != 3]
    model = rm_fit(data)
    assert np.all(np.isfinite(model.coef))
    seen = data[:, 2].astype(int)
    assert np.abs(rm_predict(model, data[:, 0], data[:, 1], seen) - data[:, 3]).max() < 1e-4


def test_rm_constant_is_intercept_only():
    data = synthetic_samples(np.random.default_rng(1), 500, lambda c, ch, y: np.full(len(c), 0.42))
    coef = raw_coefficients(rm_fit(data))
    assert coef[0] == pytest.approx(0.42, abs=1e-6)
    assert np.abs(coef[1:]).max() < 1e-6


def test_rm_duplicate_invariant():
    rng = np.random.default_rng(2)
    data = synthetic_samples(rng, 400, lambda c, ch, y: 0.1 * c + np.sin(ch) + 0.05 * y)
    a, b = rm_fit(data), rm_fit(np.vstack([data, data]))
    assert np.allclose(raw_coefficients(a), raw_coefficients(b), rtol=1e-9, atol=1e-12)


def test_rm_rejects_small_or_bad_data():
    rng = np.random.default_rng(3)
    with pytest.raises(FitError):
        rm_fit(synthetic_samples(rng, 50, lambda c, ch, y: c))
    data = synthetic_samples(rng, 500, lambda c, ch, y: c)
    data[0, 3] = np.nan
    with pytest.raises(FitError):
        rm_fit(data)


@pytest.mark.parametrize("fn,expected", [
    (lambda c, ch, y: y.astype(float), 0),
    (lambda c, ch, y: (y - 3.0) ** 2, 3),
    (lambda c, ch, y: np.ones(len(c)), 0),
])
def test_rm_decide_examples(fn, expected):
    model = rm_fit(synthetic_samples(np.random.default_rng(4), 1000, fn))
    assert rm_decide(model, 20, 5.0) == expected


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_rm_deterministic(seed):
    data = synthetic_samples(np.random.default_rng(seed), 300, lambda c, ch, y: c * ch / 100 + y)
    assert np.array_equal(raw_coefficients(rm_fit(data)), raw_coefficients(rm_fit(data.copy())))
