"""Time the propagation kernel and a full critic pass on both backends.

    python3 benchmarks/bench_kernels.py [--repeat 50]

Shapes mirror a training update: 4 heads x batch 256 stacked on the batch
axis, N agents, M = N hyperedges.
"""
import argparse
import time

import numpy as np

from hgac import kernels
from hgac.agents import AgentLayout, CriticConfig, CriticInput, HypergraphCritic


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times) * 1e3


def bench_kernel(n, repeat, rng):
    H = rng.uniform(size=(1024, n, n))
    w = rng.uniform(0.5, 2.0, size=(1024, n))
    G, dv, de = kernels.propagation_forward(H, w, 1e-8)
    gG = rng.normal(size=G.shape)
    fwd = best_of(lambda: kernels.propagation_forward(H, w, 1e-8), repeat)
    bwd = best_of(lambda: kernels.propagation_backward(H, w, dv, de, gG, 1e-8), repeat)
    return fwd, bwd


def bench_critic(n, mode, repeat, rng):
    layout = AgentLayout(("a",) * n, (10,) * n, (5,) * n)
    critic = HypergraphCritic(layout, CriticConfig(mode=mode))
    params = critic.init_params(rng)
    B = 256
    inp = CriticInput.from_indices([rng.normal(size=(B, 10)) for _ in range(n)],
                                   rng.integers(0, 5, size=(B, n)), layout)

    def step():
        out, cache = critic.forward(params, inp, record=True)
        critic.backward(params, cache, np.ones_like(out.q))

    return best_of(step, repeat)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    names = sorted(kernels.BACKENDS)
    print(f"backends: {', '.join(names)}  (best of {args.repeat}, ms)")
    print(f"{'case':<28}" + "".join(f"{b:>12}" for b in names))
    rows = {}
    for n in (4, 8):
        for b in names:
            kernels.use_backend(b)
            f, g = bench_kernel(n, args.repeat, rng)
            rows.setdefault(f"kernel fwd N={n}", []).append(f)
            rows.setdefault(f"kernel bwd N={n}", []).append(g)
            for mode in ("mlp", "attention"):
                rows.setdefault(f"critic fwd+bwd {mode} N={n}", []).append(bench_critic(n, mode, args.repeat // 5 or 1, rng))
    for case, vals in rows.items():
        print(f"{case:<28}" + "".join(f"{v:>12.3f}" for v in vals))


if __name__ == "__main__":
    main()
