"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_numba.py [--repeat 5]

Each workload runs once to warm the JIT, then ``--repeat`` times per path;
the best wall time is reported.
"""
import argparse
import time

import numpy as np

from livemap import coverage, rl, simnet
from livemap.config import ScenarioConfig
from livemap.experiment import run

KERNELS = {
    coverage: ("_raster_counts", "_pair_cells", "_exclusive_cells", "_remove_disk"),
    rl: ("_tree_set", "_tree_find"),
    simnet: ("_advance", "_enter"),
}


def select(suffix):
    for mod, names in KERNELS.items():
        for name in names:
            setattr(mod, name, getattr(mod, name + suffix))


def schedule_50():
    rng = np.random.default_rng(0)
    for _ in range(20):
        cx, cy = rng.uniform(0, 300, 50), rng.uniform(0, 300, 50)
        coverage.schedule_arrays(np.arange(50), cx, cy, np.full(50, 50.0), 0.8)


def replay_sampling():
    rng = np.random.default_rng(0)
    rb = rl.PrioritizedReplay(50_000)
    for k in range(5_000):
        rl.store(rb, rl.Transition(np.zeros(7), k % 5, -0.1, np.zeros(7), False))
    for _ in range(200):
        _, _, idx = rl.sample(rb, 512, rng)
        rb.update(idx, rng.uniform(0, 1, idx.size))


def simulator_100():
    rng = np.random.default_rng(0)
    sim = simnet.EdgeSim(100, 5, 0.1e6, rng=np.random.default_rng(0))
    sim.se[:] = rng.uniform(1, 8, 100)
    for v in range(100):
        sim.submit(v, int(rng.integers(0, 5)))
    while sim.tick < 20_000:
        for r in sim.advance(sim.tick + 100):
            sim.submit(r.vehicle_id, int(rng.integers(0, 5)))


def full_run():
    run(ScenarioConfig(vehicles=50, pedestrians=100, duration=10.0), "livemap", 0)


WORKLOADS = {"schedule x20 (50 disks)": schedule_50, "PER sample+update x200": replay_sampling,
             "simulator 20 s, 100 vehicles": simulator_100, "livemap run 10 s, 50 vehicles": full_run}


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    print(f"{'workload':32s} {'numba s':>9s} {'numpy s':>9s} {'speedup':>8s}")
    for name, fn in WORKLOADS.items():
        select("_nb")
        fn()
        fast = best_of(fn, args.repeat)
        select("_np")
        slow = best_of(fn, args.repeat)
        print(f"{name:32s} {fast:9.3f} {slow:9.3f} {slow / fast:7.1f}x")


if __name__ == "__main__":
    main()
