"""Throughput comparison of the compiled and pure-numpy training loops.

Trains the same synthetic stream once per backend and reports questions
per second.  The numba backend is warmed up on a short stream first so
JIT compilation is not billed to the measured run.

    python3 benchmarks/bench_backends.py --n 5000 --d 4
    FORECAST_RL_NO_NUMBA=1 python3 benchmarks/bench_backends.py
"""

import argparse
import time

from forecast_rl import kernels
from forecast_rl.algorithms import HyperParams
from forecast_rl.data import SyntheticConfig, generate_synthetic_stream
from forecast_rl.reward import PenaltyConfig
from forecast_rl.trainer import TrainConfig, train


def time_backend(stream, cfg, backend: str) -> tuple[float, object]:
    t0 = time.perf_counter()
    result = train(stream, cfg, HyperParams(), PenaltyConfig(), backend=backend)
    return time.perf_counter() - t0, result


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=5000, help="stream length")
    parser.add_argument("--d", type=int, default=4, help="feature dimension")
    parser.add_argument("--algorithm", default="remax",
                        choices=["grpo", "modified_grpo", "remax"])
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    stream, _ = generate_synthetic_stream(
        SyntheticConfig(args.n, args.d, market_noise=0.5, seed=args.seed)
    )
    warmup, _ = generate_synthetic_stream(
        SyntheticConfig(64, args.d, market_noise=0.5, seed=args.seed + 1)
    )
    cfg = TrainConfig(algorithm=args.algorithm, seed=args.seed)

    backends = ["numpy"]
    if kernels.NUMBA_AVAILABLE:
        backends.insert(0, "numba")
    else:
        print("numba backend unavailable (package missing or FORECAST_RL_NO_NUMBA=1)")

    timings = {}
    results = {}
    for backend in backends:
        time_backend(warmup, cfg, backend)  # JIT / cache warmup
        elapsed, result = time_backend(stream, cfg, backend)
        timings[backend] = elapsed
        results[backend] = result
        print(f"{backend:>6}: {elapsed:8.3f} s  {args.n / elapsed:10.0f} questions/s  "
              f"mean reward {result.run_log.summary()['mean_reward']:+.4f}")

    if len(backends) == 2:
        import numpy as np

        speedup = timings["numpy"] / timings["numba"]
        drift = max(
            float(np.max(np.abs(results["numba"].params.content_weights
                                - results["numpy"].params.content_weights))),
            float(np.max(np.abs(results["numba"].params.answer_weights
                                - results["numpy"].params.answer_weights))),
        )
        print(f"speedup: {speedup:.1f}x  (max param diff {drift:.2e})")


if __name__ == "__main__":
    main()
