"""Compare the compiled kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--size N] [--repeat R]

Times the vectorised prox and one evaluation of the eta map F for each
loss family, under both backends, and checks that they agree.
"""
import argparse
import time

import numpy as np

from subevo import DataModel, LossModel, NoiseLaw, RegimeParams, kernels
from subevo.state_evolution import eval_F, solve_eta, solve_system


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases():
    robust = DataModel.robust(NoiseLaw(2.0, 3.0))
    yield "huber", RegimeParams(5.0, 0.6, robust, LossModel.huber())
    yield "pseudo_huber", RegimeParams(5.0, 0.6, robust, LossModel.pseudo_huber())
    yield "logistic", RegimeParams(10.0, 0.6, DataModel.logistic(1.0), LossModel.logistic())


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=200_000, help="points for the prox benchmark")
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    if not kernels.compiled_available():
        print("compiled kernels are not built; only the numpy backend can be timed")
    backends = ["python"] + (["cython"] if kernels.compiled_available() else [])
    rng = np.random.default_rng(0)
    x = 5.0 * rng.standard_normal(args.size)
    print(f"{'case':<28}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}{'max diff':>12}")
    for name, params in cases():
        loss = params.loss
        y = rng.integers(0, 2, args.size).astype(float) if not loss.is_robust \
            else 3.0 * rng.standard_t(2.0, args.size)
        state = solve_system(params)
        eta = solve_eta(params, state).eta
        rows = {"prox": {}, "F(eta)": {}, "solve_eta": {}}
        for b in backends:
            old = kernels.use_backend(b)
            try:
                rows["prox"][b] = best_of(lambda: loss.prox(y, state.gamma, x), args.repeat)
                rows["F(eta)"][b] = best_of(lambda: eval_F(eta, params, state), args.repeat)
                rows["solve_eta"][b] = best_of(lambda: solve_eta(params, state).eta, 1)
            finally:
                kernels.use_backend(old)
        for what, res in rows.items():
            line = f"{name + ' ' + what:<28}" + "".join(f"{res[b][0] * 1e3:>10.1f}ms" for b in backends)
            if len(backends) == 2:
                diff = float(np.max(np.abs(np.asarray(res['python'][1]) - np.asarray(res['cython'][1]))))
                line += f"{res['python'][0] / res['cython'][0]:>9.1f}x{diff:>12.2e}"
            print(line)


if __name__ == "__main__":
    main()
