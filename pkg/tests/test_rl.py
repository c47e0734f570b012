import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from livemap.neural import DenseNet
from livemap.rl import (CENTRAL_FIELDS, PrioritizedReplay, QPolicy, ReplayNotReady, SumTree, SystemStatus,
                        Transition, VehicleAgent, VehicleStatus, act, dist_fields, encode_state_central,
                        encode_state_dist, greedy, sample, store, sync_shared_policy, train_step,
                        write_state_schema)


def tr(i, a=0, r=0.0, done=False, dim=2):
    return Transition(np.full(dim, float(i)), a, r, np.zeros(dim), done)


def chi2_uniform_ok(counts):
    n = counts.sum()
    p = 1.0 / len(counts)
    sd = np.sqrt(n * p * (1 - p))
    return np.all(np.abs(counts - n * p) <= 3 * sd)


# ---------------------------------------------------------------- encodings

def test_central_reference_vector():
    s = encode_state_central(VehicleStatus(10.0, 1.0, 1.0), SystemStatus(1.0, 100, 100, 0.1e6))
    assert np.allclose(s, [0.5, 0.5, 0.5, 0.5, 1.0, 1.0, 0.5])
    assert len(s) == len(CENTRAL_FIELDS)


def test_central_locality_of_queued():
    v = VehicleStatus(3.0, 0.8, 1.2)
    a = encode_state_central(v, SystemStatus(1.0, 10, 5, 0.1e6))
    b = encode_state_central(v, SystemStatus(1.0, 10, 10, 0.1e6))
    diff = np.flatnonzero(a != b)
    assert list(diff) == [CENTRAL_FIELDS.index("queued_frac")]
    assert np.array_equal(a, encode_state_central(v, SystemStatus(1.0, 10, 5, 0.1e6)))


def test_dist_first_offload():
    s = encode_state_dist(VehicleStatus(5.0), -1, 0.0)
    names = dist_fields(5)
    assert s[names.index("y_prev_unscheduled")] == 1.0
    assert s[names.index("latency_prev")] == 0.0


def test_dist_latency_saturates():
    assert encode_state_dist(VehicleStatus(5.0), 0, 4.0)[-1] == 1.0


def test_dist_onehot():
    s = encode_state_dist(VehicleStatus(5.0), 2, 0.3)
    names = dist_fields(5)
    slots = [names.index(f"y_prev_{y}") for y in range(5)]
    assert s[slots].sum() == 1.0 and s[names.index("y_prev_2")] == 1.0
    assert s[names.index("y_prev_unscheduled")] == 0.0


@pytest.mark.parametrize("y", [-2, 5])
def test_dist_rejects_out_of_range(y):
    with pytest.raises(ValueError):
        encode_state_dist(VehicleStatus(5.0), y, 0.0)


def test_state_schema_file(tmp_path):
    path = tmp_path / "schema.json"
    write_state_schema(path)
    schema = json.loads(path.read_text())
    assert schema["central"] == list(CENTRAL_FIELDS)
    assert schema["distributed"] == list(dist_fields(5))


# ---------------------------------------------------------------- acting

def test_greedy_examples():
    assert greedy(np.array([1, 5, 2, 0, 3])) == 1
    assert greedy(np.zeros(5)) == 0


def test_explore_uniform():
    pol = QPolicy(3, 5, hidden=(4,), seed=0)
    assert pol.epsilon == 1.0
    rng = np.random.default_rng(0)
    counts = np.bincount([act(pol, np.zeros(3), True, rng) for _ in range(100_000)], minlength=5)
    assert chi2_uniform_ok(counts)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=5, max_size=5), st.floats(0.01, 100), st.floats(-100, 100))
def test_greedy_affine_invariant(q, a, b):
    q = np.array(q)
    if np.sort(q)[-1] - np.sort(q)[-2] < 1e-6:
        return
    assert greedy(a * q + b) == greedy(q)


def test_epsilon_schedule_monotone():
    pol = QPolicy(2, 2, hidden=(2,))
    eps = []
    for k in range(0, 20_000, 500):
        pol.steps = k
        eps.append(pol.epsilon)
    assert all(b <= a for a, b in zip(eps, eps[1:]))
    assert min(eps) == pytest.approx(0.05) and max(eps) == 1.0


# ---------------------------------------------------------------- replay

def test_store_priorities():
    rb = PrioritizedReplay(8)
    i = store(rb, tr(0))
    assert rb.priority(i) == 1.0
    rb.update([i], [8.0])
    j = store(rb, tr(1))
    assert rb.priority(j) == 8.0


def test_fifo_eviction():
    rb = PrioritizedReplay(2)
    for k in range(3):
        store(rb, tr(k))
    assert len(rb) == 2
    assert sorted(rb._s[:, 0]) == [1.0, 2.0]


def test_sample_not_ready():
    rb = PrioritizedReplay(8)
    store(rb, tr(0))
    with pytest.raises(ReplayNotReady):
        sample(rb, 4, np.random.default_rng(0))


def test_sample_uniform_when_equal():
    rb = PrioritizedReplay(8)
    for k in range(8):
        store(rb, tr(k))
    rng = np.random.default_rng(0)
    idx = np.concatenate([sample(rb, 8, rng)[2] for _ in range(12_500)])
    assert chi2_uniform_ok(np.bincount(idx, minlength=8))


def test_sample_proportional_alpha_one():
    rb = PrioritizedReplay(2, alpha=1.0)
    store(rb, tr(0))
    store(rb, tr(1))
    rb.update([0, 1], [3.0, 1.0])
    rng = np.random.default_rng(1)
    idx = np.concatenate([sample(rb, 1, rng)[2] for _ in range(100_000)])
    n0 = np.sum(idx == 0)
    sd = np.sqrt(1e5 * 0.75 * 0.25)
    assert abs(n0 - 75_000) <= 3 * sd


def test_beta_zero_weights_one():
    rb = PrioritizedReplay(4)
    for k in range(4):
        store(rb, tr(k))
    rb.update([0, 1, 2, 3], [1.0, 2.0, 5.0, 0.1])
    _, w, _ = sample(rb, 4, np.random.default_rng(0), beta=0.0)
    assert np.all(w == 1.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 15), st.floats(0.0, 50.0)), max_size=200))
def test_sumtree_total_exact(ops):
    rb = PrioritizedReplay(16)
    for is_store, i, p in ops:
        if is_store or len(rb) == 0:
            store(rb, tr(i))
        else:
            rb.update([i % len(rb)], [p])
    leaves = rb.tree.leaves()
    assert rb.tree.total == pytest.approx(leaves.sum(), rel=1e-12, abs=1e-12)
    assert np.all(rb.raw[:len(rb)] > 0)
    if len(rb):
        assert rb.probabilities().sum() == pytest.approx(1.0)


def test_sumtree_find_brute_force():
    t = SumTree(8)
    vals = np.array([0.5, 2.0, 0.0, 1.5, 3.0, 0.25, 0.0, 1.0])
    t.set(np.arange(8), vals)
    cum = np.cumsum(vals)
    targets = np.linspace(0.01, cum[-1] - 0.01, 200)
    expected = np.searchsorted(cum, targets, side="right")
    assert np.array_equal(t.find(targets, 8), expected)


# ---------------------------------------------------------------- training

def test_done_targets_equal_rewards():
    pol = QPolicy(2, 2, hidden=(4,), batch_size=4, seed=0)
    rb = PrioritizedReplay(4)
    for k in range(4):
        store(rb, Transition(np.array([k, 1.0]), k % 2, float(k), np.ones(2) * 100, True))
    captured = {}
    orig = pol.online.backward

    def spy(x, target, action, weight):
        captured["target"] = np.array(target)
        captured["x"] = np.array(x)
        return orig(x, target, action, weight)

    pol.online.backward = spy
    train_step(pol, rb)
    assert np.array_equal(captured["target"], captured["x"][:, 0])


def test_gamma_zero_is_regression():
    pol = QPolicy(1, 1, hidden=(8,), batch_size=8, gamma=0.0, seed=0, lr=1e-2)
    rb = PrioritizedReplay(8)
    xs = np.linspace(-1, 1, 8)
    for x in xs:
        store(rb, Transition(np.array([x]), 0, 2 * x, np.array([50.0]), False))
    for _ in range(1500):
        train_step(pol, rb)
    assert np.allclose(pol.online.forward(xs[:, None])[:, 0], 2 * xs, atol=0.05)


def test_chain_bellman_fixed_point():
    from livemap.sanity import chain_oracle, train_chain
    _, q = train_chain(steps=5000, seed=0, hidden=(32, 32), lr=2e-3)
    assert np.abs(q - chain_oracle()).max() < 1e-2


def test_target_sync_period():
    pol = QPolicy(2, 2, hidden=(4,), batch_size=2, target_period=3, seed=0)
    rb = PrioritizedReplay(4)
    for k in range(4):
        store(rb, tr(k, a=k % 2, r=1.0))
    for k in range(1, 7):
        train_step(pol, rb)
        same = all(np.array_equal(a[0], b[0]) for a, b in zip(pol.online.params, pol.target.params))
        assert same == (k % 3 == 0)


def test_policy_checkpoint_resume(tmp_path):
    pol = QPolicy(3, 2, hidden=(4,), batch_size=2, seed=1)
    rb = PrioritizedReplay(4)
    for k in range(4):
        store(rb, tr(k, a=k % 2, r=-1.0, dim=3))
    for _ in range(5):
        train_step(pol, rb)
    pol.save(tmp_path / "p.bin")
    back = QPolicy(3, 2, hidden=(4,), seed=99).load(tmp_path / "p.bin")
    assert back.steps == 5 and back.to_bytes() == pol.to_bytes()


# ---------------------------------------------------------------- sharing

def test_sync_shared_policy():
    pol = QPolicy(3, 4, hidden=(8,), seed=0)
    agents = [VehicleAgent(v, DenseNet([3, 8, 4], rng=100 + v)) for v in range(3)]
    probe = np.array([0.2, -0.4, 0.9])
    sync_shared_policy(pol, agents)
    assert all(a.act(probe) == greedy(pol.online.forward(probe)) for a in agents)


def test_sync_disabled_keeps_stale_snapshot():
    pol = QPolicy(3, 4, hidden=(8,), seed=0)
    agents = [VehicleAgent(0, pol.online)]
    sync_shared_policy(pol, agents)
    for W, b in pol.online.params:
        W += 1.0
    sync_shared_policy(pol, agents, enabled=False)
    assert not np.array_equal(agents[0].net.params[0][0], pol.online.params[0][0])


def test_transitions_from_two_vehicles_share_replay():
    from livemap.config import ScenarioConfig, TrainConfig
    from livemap.experiment import Experiment
    cfg = ScenarioConfig(vehicles=4, pedestrians=4, duration=2.0,
                         training=TrainConfig(hidden=[8], batch_size=10_000))
    exp = Experiment(cfg, "livemap-dist", 0, train=True, train_steps=1)
    exp.run()
    assert len(exp.replay) > 0
    sources = set()
    for i in range(len(exp.replay)):
        # the distributed state does not name the vehicle; rewards are negative latencies
        assert exp.replay._r[i] < 0
        sources.add(tuple(exp.replay._s[i][:3]))
    assert len(sources) >= 2
