"""Small learning problems with known answers, used to sanity-check the DQN stack."""
import numpy as np

from .rl import PrioritizedReplay, QPolicy, Transition, train_step

LEVELS = np.linspace(0.0, 1.0, 5)
N_ACTIONS = 5


def bandit_optimal(s):
    """Best partition: offload more on a good channel, keep work local on strong hardware."""
    s = np.atleast_2d(s)
    return np.clip(np.rint(2.0 * (s[:, 1] - s[:, 0]) + 2.0), 0, N_ACTIONS - 1).astype(np.int64)


def bandit_latency(s):
    """Latency of every partition for state(s) ``s`` (column 0 channel, 1 compute, rest distractors)."""
    s = np.atleast_2d(s)
    best = bandit_optimal(s)
    gap = np.abs(np.arange(N_ACTIONS)[None, :] - best[:, None])
    return 0.1 + 0.2 * gap + 0.2 * (1.0 - s[:, 0:1])


def bandit_states(rng, n, state_dim=4):
    s = rng.random((n, state_dim))
    s[:, :2] = LEVELS[rng.integers(len(LEVELS), size=(n, 2))]
    return s


def train_bandit(steps=20_000, seed=0, state_dim=4, **policy_kw):
    """Train on one-step offloading decisions; returns the policy."""
    rng = np.random.default_rng(seed)
    policy = QPolicy(state_dim, N_ACTIONS, seed=seed, **policy_kw)
    replay = PrioritizedReplay(50_000)
    zero = np.zeros(state_dim)
    while policy.steps < steps:
        s = bandit_states(rng, 1, state_dim)[0]
        if rng.random() < policy.epsilon:
            a = int(rng.integers(N_ACTIONS))
        else:
            a = int(np.argmax(policy.online.forward(s)))
        r = -float(bandit_latency(s)[0, a])
        replay.store(Transition(s, a, r, zero, True))
        if len(replay) >= policy.batch_size:
            train_step(policy, replay)
    return policy


def bandit_accuracy(policy, n=10_000, seed=123):
    rng = np.random.default_rng(seed)
    s = bandit_states(rng, n, policy.state_dim)
    chosen = np.argmax(policy.online.forward(s), axis=1)
    return float(np.mean(chosen == bandit_optimal(s)))


def chain_oracle(gamma=0.9, iters=2000):
    """Value iteration on the 2-state chain: action ``a`` moves to state ``a``, reward ``a``."""
    q = np.zeros((2, 2))
    for _ in range(iters):
        v = q.max(axis=1)
        q = np.array([[0.0 + gamma * v[0], 1.0 + gamma * v[1]]] * 2)
    return q


def train_chain(steps=5000, seed=0, target_period=50, **policy_kw):
    policy = QPolicy(2, 2, seed=seed, batch_size=4, target_period=target_period, **policy_kw)
    replay = PrioritizedReplay(16)
    eye = np.eye(2)
    for s in range(2):
        for a in range(2):
            replay.store(Transition(eye[s], a, float(a), eye[a], False))
    for _ in range(steps):
        train_step(policy, replay)
    return policy, policy.online.forward(eye)
