"""Compare the compiled dense-layer kernels with the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeats N] [--json out.json]

Times forward and backward at the layer shapes the denoiser uses (batch 16,
hidden 128) and a few others, then times one easytune and one full-backprop
update end to end under each backend (each in a subprocess, since the
backend is chosen at import).
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from steptune import kernels

SHAPES = [(16, 64, 128), (16, 128, 128), (16, 128, 32), (64, 128, 128), (256, 256, 256)]

UPDATE_SNIPPET = """
import json, time
import numpy as np
from steptune import finetune as ft, kernels
from steptune.diffusion import make_schedule
from steptune.models import Denoiser, RewardModel
den = Denoiser(32, 8, seed=0)
rew = RewardModel(32, 8, seed=1)
out = {"backend": kernels.BACKEND}
for kind in ("easytune", "full_backprop"):
    tuner = ft.FineTuner(den.clone(), rew.clone(), make_schedule(), ft.StrategyConfig(kind),
                         lr=1e-4, batch=16)
    c = np.arange(16) % 8
    tuner.update(c, 0)
    t0 = time.perf_counter()
    for i in range(REPEATS):
        tuner.update(c, i + 1)
    out[kind] = (time.perf_counter() - t0) * 1000.0 / REPEATS
print(json.dumps(out))
"""


def time_kernel(mod, n, fin, fout, repeats):
    r = np.random.default_rng(0)
    x, W, b = r.standard_normal((n, fin)), r.standard_normal((fout, fin)), r.standard_normal(fout)
    gy = r.standard_normal((n, fout))
    y = mod.dense_forward(x, W, b, kernels.TANH)
    fwd = min(timeit.repeat(lambda: mod.dense_forward(x, W, b, kernels.TANH), number=200,
                            repeat=repeats)) / 200
    bwd = min(timeit.repeat(lambda: mod.dense_backward(gy, x, W, y, kernels.TANH, True),
                            number=200, repeat=repeats)) / 200
    return fwd * 1e6, bwd * 1e6


def time_updates(pure, repeats):
    env = dict(os.environ)
    if pure:
        env["STEPTUNE_PURE_PYTHON"] = "1"
    else:
        env.pop("STEPTUNE_PURE_PYTHON", None)
    code = UPDATE_SNIPPET.replace("REPEATS", str(repeats))
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    return json.loads(out.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--json", default=None)
    args = ap.parse_args(argv)

    try:
        compiled = kernels.get_backend("compiled")
    except ImportError:
        sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    python = kernels.get_backend("python")

    results = {"kernels": [], "updates": {}}
    print(f"{'shape (n,in,out)':>18} {'fwd py':>9} {'fwd c':>9} {'bwd py':>9} {'bwd c':>9}  (us)")
    for shape in SHAPES:
        fp, bp = time_kernel(python, *shape, args.repeats)
        fc, bc = time_kernel(compiled, *shape, args.repeats)
        results["kernels"].append(dict(shape=shape, fwd_python=fp, fwd_compiled=fc,
                                       bwd_python=bp, bwd_compiled=bc))
        print(f"{str(shape):>18} {fp:9.1f} {fc:9.1f} {bp:9.1f} {bc:9.1f}")

    print("\nper-update wall time (ms), T=50, batch 16, hidden 128")
    for label, pure in (("python", True), ("compiled", False)):
        res = time_updates(pure, args.repeats)
        results["updates"][label] = res
        print(f"  {label:>8} ({res['backend']}): easytune {res['easytune']:.1f}  "
              f"full_backprop {res['full_backprop']:.1f}")

    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
