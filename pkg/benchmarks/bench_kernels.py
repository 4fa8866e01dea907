"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py            # kernels + end-to-end
    python benchmarks/bench_kernels.py --quick    # kernels only, fewer reps

Kernel timings call both implementations directly on identical inputs
and also report their largest disagreement. The end-to-end section runs
reward training and a distillation run in a subprocess per backend,
selected through PREFDISTILL_BACKEND.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from prefdistill import _kernels as K

E2E_SNIPPET = """
import time
import numpy as np
from prefdistill.numcore import make_rng
from prefdistill.world import WorldSpec, ItemSpec, build_world
from prefdistill.pipeline import AnnotationSpec, RewardSpec, generate_dataset, build_and_train_reward
from prefdistill.reward import RewardTrainConfig, pair_arrays
from prefdistill.diffusion import make_schedule
from prefdistill.distill import DistillConfig, optimize
from prefdistill.scene import Asset
from prefdistill import _kernels
world = build_world(WorldSpec(), make_rng(0, "world"))
ds = generate_dataset(world, ItemSpec(sets_per_prompt=6), AnnotationSpec(), make_rng(0, "data"))
data = pair_arrays(ds.pairs, ds.images)
spec = RewardSpec(RewardTrainConfig(lr=1e-3, epochs=1))
build_and_train_reward(world, data.take(np.arange(16)), spec, 0)  # compile
t0 = time.perf_counter()
res = build_and_train_reward(world, data, RewardSpec(RewardTrainConfig(lr=1e-3, epochs=3)), 0)
t1 = time.perf_counter()
optimize(Asset(world.modes[0][0] * 0), world.rig, world.priors[0], make_schedule(),
         DistillConfig(steps=1000, finetune_steps=100), "dreamfl", net=res.net)
t2 = time.perf_counter()
print(_kernels.BACKEND, len(ds.pairs), t1 - t0, t2 - t1)
"""


def best_of(fn, reps, number):
    return min(timeit.repeat(fn, repeat=reps, number=number)) / number


def kernel_cases(rng):
    for n, k, m in [(4, 16, 128), (64, 16, 128), (512, 128, 32)]:
        x = rng.standard_normal((n, k))
        w = rng.standard_normal((m, k))
        b = rng.standard_normal(m)
        up = rng.standard_normal((n, m))
        yield (f"dense_forward  n={n:<4d} {k}->{m}",
               lambda f, x=x, w=w, b=b: f(x, w, b, K.ACT_RELU),
               K.dense_forward_np, getattr(K, "dense_forward_nb", None))
        out = K.dense_forward_np(x, w, b, K.ACT_TANH)
        yield (f"dense_backward n={n:<4d} {k}->{m}",
               lambda f, x=x, w=w, out=out, up=up: f(x, w, out, K.ACT_TANH, up),
               K.dense_backward_np, getattr(K, "dense_backward_nb", None))
    for n, mcomp, d in [(1, 2, 32), (64, 2, 32), (256, 8, 32)]:
        x = rng.standard_normal((n, d))
        mu = rng.standard_normal((mcomp, d))
        var = rng.uniform(0.05, 1.0, (mcomp, d))
        lw = np.log(np.full(mcomp, 1.0 / mcomp))
        yield (f"mixture_eps    n={n:<4d} m={mcomp} d={d}",
               lambda f, x=x, mu=mu, var=var, lw=lw: f(x, mu, var, lw, 0.7, 0.71),
               K.mixture_eps_np, getattr(K, "mixture_eps_nb", None))


def max_gap(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.max(np.abs(p - q))) for p, q in zip(a, b))


def run_kernels(reps, number):
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, call, f_np, f_nb in kernel_cases(rng):
        t_np = best_of(lambda: call(f_np), reps, number) * 1e6
        if f_nb is None:
            print(f"{name:34s} {t_np:10.1f} {'n/a':>10s}")
            continue
        call(f_nb)  # compile outside the timer
        t_nb = best_of(lambda: call(f_nb), reps, number) * 1e6
        gap = max_gap(call(f_np), call(f_nb))
        print(f"{name:34s} {t_np:10.1f} {t_nb:10.1f} {t_np / t_nb:8.2f} {gap:11.2e}")


def run_end_to_end():
    print("\nend to end (3 reward epochs, 1100 dreamfl steps)")
    print(f"{'backend':8s} {'pairs':>6s} {'train s':>8s} {'distill s':>10s}")
    for backend in ("numpy", "numba"):
        env = dict(os.environ, PREFDISTILL_BACKEND=backend)
        res = subprocess.run([sys.executable, "-c", E2E_SNIPPET], env=env, check=True,
                             capture_output=True, text=True)
        name, pairs, t_train, t_dist = res.stdout.split()
        print(f"{name:8s} {pairs:>6s} {float(t_train):8.2f} {float(t_dist):10.2f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    run_kernels(reps=3 if args.quick else 5, number=20 if args.quick else 200)
    if not args.quick:
        run_end_to_end()


if __name__ == "__main__":
    main()
