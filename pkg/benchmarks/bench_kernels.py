"""Compare the numba kernels with the pure-numpy fallback.

Each backend runs in its own interpreter because the choice is fixed at import
time by ``RENV_NO_NUMBA``. Compilation happens in a warm-up call and is
reported separately from the timed repetitions.

    python3 benchmarks/bench_kernels.py [--replicas N] [--repeat K]
"""

import argparse
import json
import os
import subprocess
import sys

WORKLOAD = r"""
import json, sys, time
import numpy as np
from renv import _accel
from renv.env import affine_approx, sample_path
from renv.integrate import propagate, propagate_direct
from renv.transform import PotentialSpec

replicas, repeat = int(sys.argv[1]), int(sys.argv[2])
path = sample_path(3)
spec = PotentialSpec(1.0, 0.5, path)
approx = affine_approx(path, 0.4, 0.2, n_max=63)
ids = np.arange(replicas)
cases = {
    "equivalent route": lambda: propagate(spec, 0.0, 0.0, 1.0, 0.01, 1, ids),
    "direct route": lambda: propagate_direct(spec, 0.0, 0.0, 1.0, 0.01, 1, ids, approx=approx),
}
timings = {}
for name, call in cases.items():
    started = time.perf_counter()
    call()
    warm = time.perf_counter() - started
    runs = []
    for _ in range(repeat):
        started = time.perf_counter()
        call()
        runs.append(time.perf_counter() - started)
    timings[name] = {"first_call": warm, "best": min(runs)}
print(json.dumps({"numba": _accel.USE_NUMBA, "timings": timings}))
"""


def run(flag, replicas, repeat):
    env = dict(os.environ, RENV_NO_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", WORKLOAD, str(replicas), str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--replicas", type=int, default=20_000)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    compiled = run("0", args.replicas, args.repeat)
    fallback = run("1", args.replicas, args.repeat)
    if not compiled["numba"]:
        print("numba is unavailable; both runs used the numpy fallback")
    print(f"{args.replicas} replicas, 100 steps, best of {args.repeat}")
    print(f"{'case':<18}{'numba s':>10}{'numpy s':>10}{'speedup':>9}{'jit warm-up s':>15}")
    for name, fast in compiled["timings"].items():
        slow = fallback["timings"][name]
        print(f"{name:<18}{fast['best']:>10.3f}{slow['best']:>10.3f}{slow['best'] / fast['best']:>9.1f}"
              f"{fast['first_call'] - fast['best']:>15.2f}")


if __name__ == "__main__":
    main()
