"""QAT with selective KURE against QAT alone.

Both arms start from the same weights, see the same batches and quantize
the same way; the only difference is the lambda * sum (K - 1.8)^2 term.
We watch the mean distance of the included tensors' kurtosis from 1.8 and
the final INT8 accuracy.

Default: 2000 steps, one seed (under a minute). Use --seeds 5 for the
full comparison.
"""
import argparse

import numpy as np

from kurtq import model as M
from kurtq import pipeline as P

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=2000)
ap.add_argument("--seeds", type=int, default=1)
args = ap.parse_args()

gaps = []
for seed in range(args.seeds):
    res = P.ab_experiment(P.TrainConfig(steps=args.steps, seed=seed), M.ModelConfig())
    print(f"seed {seed}: excluded {res['excluded']}")
    for arm in res["arms"]:
        traj = [round(float(np.mean([abs(snap["kurtosis"][n] - 1.8) for n in res["included"]])), 2)
                for snap in arm["kurtosis_trajectory"][::5]]
        print(f"  {arm['arm']:9s} mean|K-1.8| every 500 steps: {traj}  "
              f"fp32 {arm['fp32_accuracy']:.3f} int8 {arm['int8_accuracy']:.3f}")
    gaps.append(res["int8_gap"])
print(f"mean INT8 gain of KURE over QAT alone: {np.mean(gaps):+.4f}")
