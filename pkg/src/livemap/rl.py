"""DQN with prioritized replay, and the offloading state encodings."""
import json
import struct
from dataclasses import dataclass

import numpy as np

from ._accel import dispatch, njit
from .neural import DenseNet, OptimizerState, dump_params, parse_params, step

L_CAP = 2.0


class ReplayNotReady(RuntimeError):
    pass


# --------------------------------------------------------------------------- state encodings


@dataclass(frozen=True)
class StateNorm:
    """Normalisers chosen so that reference inputs encode to 0.5 (speeds, channel) or 1.0 (counts)."""
    se_ref: float = 10.0
    speed_ref: float = 1.0
    max_vehicles: int = 100
    bandwidth_ref: float = 0.1e6


@dataclass
class VehicleStatus:
    spectral_efficiency: float
    cpu_speed: float = 1.0
    gpu_speed: float = 1.0


@dataclass
class SystemStatus:
    server_speed: float = 1.0
    connected: int = 0
    queued: int = 0
    bandwidth: float = 0.1e6


CENTRAL_FIELDS = ("channel_quality", "cpu_speed", "gpu_speed", "server_speed",
                  "connected_frac", "queued_frac", "bandwidth_ratio")


def dist_fields(n_partitions):
    return (("channel_quality", "cpu_speed", "gpu_speed", "y_prev_unscheduled")
            + tuple(f"y_prev_{y}" for y in range(n_partitions)) + ("latency_prev",))


def _vehicle_coords(v: VehicleStatus, norm: StateNorm):
    return [min(max(v.spectral_efficiency / (2 * norm.se_ref), 0.0), 1.0),
            min(v.cpu_speed / (2 * norm.speed_ref), 1.0),
            min(v.gpu_speed / (2 * norm.speed_ref), 1.0)]


def encode_state_central(vehicle: VehicleStatus, system: SystemStatus, norm: StateNorm = StateNorm()):
    coords = _vehicle_coords(vehicle, norm) + [
        min(system.server_speed / (2 * norm.speed_ref), 1.0),
        min(system.connected / norm.max_vehicles, 1.0),
        min(system.queued / norm.max_vehicles, 1.0),
        min(system.bandwidth / (2 * norm.bandwidth_ref), 1.0),
    ]
    return np.array(coords)


def encode_state_dist(vehicle: VehicleStatus, y_prev: int, latency_prev: float, n_partitions: int = 5,
                      norm: StateNorm = StateNorm(), l_cap: float = L_CAP):
    if not -1 <= y_prev < n_partitions:
        raise ValueError(f"previous partition {y_prev} outside [-1, {n_partitions - 1}]")
    onehot = np.zeros(n_partitions + 1)
    onehot[y_prev + 1] = 1.0
    lat = min(max(latency_prev, 0.0), l_cap) / l_cap
    return np.concatenate([_vehicle_coords(vehicle, norm), onehot, [lat]])


def write_state_schema(path, n_partitions=5):
    schema = {"schema_version": 1,
              "central": list(CENTRAL_FIELDS),
              "distributed": list(dist_fields(n_partitions))}
    with open(path, "w") as fh:
        json.dump(schema, fh, indent=2)
        fh.write("\n")


# --------------------------------------------------------------------------- sum tree


@njit
def _tree_set_nb(tree, leaves, values):
    size = tree.shape[0] // 2
    for k in range(leaves.shape[0]):
        i = leaves[k] + size
        tree[i] = values[k]
        i //= 2
        while i >= 1:
            tree[i] = tree[2 * i] + tree[2 * i + 1]
            i //= 2


@njit
def _tree_find_nb(tree, targets, n_valid):
    size = tree.shape[0] // 2
    out = np.empty(targets.shape[0], dtype=np.int64)
    for k in range(targets.shape[0]):
        v = targets[k]
        i = 1
        while i < size:
            left = tree[2 * i]
            if v <= left:
                i = 2 * i
            else:
                v -= left
                i = 2 * i + 1
        leaf = i - size
        if leaf >= n_valid:
            leaf = n_valid - 1
        out[k] = leaf
    return out


def _tree_set_np(tree, leaves, values):
    size = tree.shape[0] // 2
    # sequential leaf writes keep last-writer-wins semantics for repeated leaves
    for leaf, val in zip(leaves, values):
        tree[leaf + size] = val
    nodes = np.unique((np.asarray(leaves) + size) // 2)
    while nodes.size and nodes[0] >= 1:
        tree[nodes] = tree[2 * nodes] + tree[2 * nodes + 1]
        if nodes[0] == 1:
            break
        nodes = np.unique(nodes // 2)


def _tree_find_np(tree, targets, n_valid):
    size = tree.shape[0] // 2
    v = np.array(targets, dtype=np.float64)
    i = np.ones(v.shape[0], dtype=np.int64)
    while i[0] < size:
        left = tree[2 * i]
        right = v > left
        v = np.where(right, v - left, v)
        i = 2 * i + right
    return np.minimum(i - size, n_valid - 1)


_tree_set = dispatch(_tree_set_nb, _tree_set_np)
_tree_find = dispatch(_tree_find_nb, _tree_find_np)


class SumTree:
    """Binary sum tree over a power-of-two leaf array; parents are recomputed, never patched."""

    def __init__(self, capacity):
        size = 1
        while size < capacity:
            size *= 2
        self.size = size
        self.tree = np.zeros(2 * size)

    @property
    def total(self):
        return self.tree[1]

    def set(self, leaves, values):
        _tree_set(self.tree, np.atleast_1d(np.asarray(leaves, dtype=np.int64)),
                  np.atleast_1d(np.asarray(values, dtype=np.float64)))

    def leaves(self):
        return self.tree[self.size:]

    def find(self, targets, n_valid):
        return _tree_find(self.tree, np.asarray(targets, dtype=np.float64), n_valid)


# --------------------------------------------------------------------------- replay


@dataclass
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    done: bool = False


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray


class PrioritizedReplay:
    def __init__(self, capacity=50_000, state_dim=None, alpha=0.6, floor=1e-3):
        self.capacity = int(capacity)
        self.alpha = alpha
        self.floor = floor
        self.tree = SumTree(self.capacity)
        self.raw = np.zeros(self.capacity)
        self.size = 0
        self.cursor = 0
        self.state_dim = state_dim
        self._s = self._s2 = None
        self._a = np.zeros(self.capacity, dtype=np.int64)
        self._r = np.zeros(self.capacity)
        self._d = np.zeros(self.capacity, dtype=bool)

    def __len__(self):
        return self.size

    def _alloc(self, dim):
        self.state_dim = dim
        self._s = np.zeros((self.capacity, dim))
        self._s2 = np.zeros((self.capacity, dim))

    def priority(self, i):
        return self.raw[i]

    def store(self, tr: Transition):
        s = np.asarray(tr.s, dtype=np.float64)
        if self._s is None:
            self._alloc(s.size)
        p = self.raw[:self.size].max() if self.size else 1.0
        i = self.cursor
        self._s[i] = s
        self._s2[i] = tr.s_next
        self._a[i] = tr.a
        self._r[i] = tr.r
        self._d[i] = tr.done
        self.raw[i] = p
        self.tree.set([i], [p ** self.alpha])
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return i

    def update(self, indices, priorities):
        pr = np.maximum(np.asarray(priorities, dtype=np.float64), self.floor)
        self.raw[indices] = pr
        self.tree.set(indices, pr ** self.alpha)

    def probabilities(self):
        leaves = self.tree.leaves()[:self.size]
        return leaves / leaves.sum()

    def sample(self, batch_size, rng, beta=0.4):
        """Stratified proportional draw; returns ``(batch, weights, indices)``."""
        if self.size < batch_size or batch_size < 1:
            raise ReplayNotReady(f"{self.size} transitions stored, {batch_size} requested")
        total = self.tree.total
        seg = total / batch_size
        targets = (np.arange(batch_size) + rng.random(batch_size)) * seg
        idx = self.tree.find(targets, self.size)
        p = self.tree.leaves()[idx] / total
        w = (self.size * p) ** (-beta)
        w /= w.max()
        batch = Batch(self._s[idx], self._a[idx], self._r[idx], self._s2[idx], self._d[idx])
        return batch, w, idx


def store(replay: PrioritizedReplay, transition: Transition):
    return replay.store(transition)


def sample(replay: PrioritizedReplay, batch_size, rng, beta=0.4):
    return replay.sample(batch_size, rng, beta)


# --------------------------------------------------------------------------- policy


class QPolicy:
    def __init__(self, state_dim, n_actions, hidden=(256, 256), gamma=0.9, batch_size=512,
                 lr=0.5e-3, eps_start=1.0, eps_end=0.05, eps_decay=0.999, target_period=500,
                 beta_start=0.4, beta_steps=20_000, alpha=0.01, seed=0):
        self.state_dim = state_dim
        self.n_actions = n_actions
        self.gamma = gamma
        self.batch_size = batch_size
        self.eps_start, self.eps_end, self.eps_decay = eps_start, eps_end, eps_decay
        self.target_period = target_period
        self.beta_start, self.beta_steps = beta_start, beta_steps
        self.online = DenseNet([state_dim, *hidden, n_actions], alpha=alpha, rng=seed)
        self.target = self.online.copy()
        self.opt = OptimizerState.for_net(self.online, lr=lr)
        self.steps = 0
        self.rng = np.random.default_rng(seed)

    @property
    def epsilon(self):
        return max(self.eps_end, self.eps_start * self.eps_decay ** self.steps)

    @property
    def beta_is(self):
        return min(1.0, self.beta_start + (1.0 - self.beta_start) * self.steps / max(self.beta_steps, 1))

    def q_values(self, s):
        return self.online.forward(s)

    # checkpoints: online net blob, then b"QPOL", u64 steps, u64 optimizer steps, target net blob
    def to_bytes(self):
        tail = b"QPOL" + struct.pack("<QQ", self.steps, self.opt.t) + dump_params(self.target)
        return dump_params(self.online, tail)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def load_bytes(self, blob):
        online, tail = parse_params(blob)
        if online.sizes != self.online.sizes:
            raise ValueError(f"checkpoint sizes {online.sizes} do not match {self.online.sizes}")
        self.online.load_from(online)
        if tail[:4] == b"QPOL":
            self.steps, self.opt.t = struct.unpack_from("<QQ", tail, 4)
            target, _ = parse_params(tail[20:])
            self.target.load_from(target)
        else:
            self.target.load_from(online)
        return self

    def load(self, path):
        with open(path, "rb") as fh:
            return self.load_bytes(fh.read())


def greedy(q):
    # np.argmax already returns the lowest index among ties
    return int(np.argmax(q))


def act(policy, s, explore, rng):
    """Epsilon-greedy action; ``policy`` may be a QPolicy or a bare DenseNet snapshot."""
    net = policy.online if isinstance(policy, QPolicy) else getattr(policy, "net", policy)
    if explore and isinstance(policy, QPolicy) and rng.random() < policy.epsilon:
        return int(rng.integers(net.sizes[-1]))
    return greedy(net.forward(np.asarray(s, dtype=np.float64)))


def train_step(policy: QPolicy, replay: PrioritizedReplay, optimizer: OptimizerState = None):
    """One prioritized DQN update on the online net; returns the weighted batch loss."""
    opt = optimizer if optimizer is not None else policy.opt
    batch, w, idx = replay.sample(policy.batch_size, policy.rng, policy.beta_is)
    q_next = policy.target.forward(batch.s_next).max(axis=1)
    targets = batch.r + policy.gamma * np.where(batch.done, 0.0, q_next)
    grads, td = policy.online.backward(batch.s, targets, batch.a, w)
    loss = float(np.mean(w * td ** 2))
    step(policy.online, grads, opt)
    replay.update(idx, np.abs(td) + replay.floor)
    policy.steps += 1
    if policy.target_period and policy.steps % policy.target_period == 0:
        policy.target.load_from(policy.online)
    return loss


class VehicleAgent:
    """A vehicle-side executor holding a read-only snapshot of the shared policy."""

    def __init__(self, vehicle_id, net: DenseNet):
        self.vehicle_id = vehicle_id
        self.net = net.copy()
        self.n_actions = net.sizes[-1]
        self.synced_at = -1

    def act(self, s):
        return greedy(self.net.forward(np.asarray(s, dtype=np.float64)))


def sync_shared_policy(central: QPolicy, agents, enabled=True):
    """Copy the central online net into every agent's snapshot."""
    if not enabled:
        return
    for agent in agents:
        agent.net.load_from(central.online)
        agent.synced_at = central.steps
