"""Octree extraction against an analytic sphere: how many queries does it save?

    python demos/extraction_counts.py
"""

import numpy as np

from ossnet.extract import dense_extract, mise_extract, sphere_oracle
from ossnet.metrics import disagreement

TARGET = 64
centre = np.full(3, (TARGET - 1) / 2)
dense_evals = TARGET ** 3

print(f"{'radius':>6} {'init':>5} {'evals':>7} {'fraction':>9} {'disagree':>9}  stages")
for radius in (4, 8, 12, 20):
    oracle = sphere_oracle(centre, radius)
    reference = dense_extract(oracle, TARGET)
    for init in (8, 16, 32):
        mask, rep = mise_extract(oracle, init, TARGET)
        print(f"{radius:6d} {init:5d} {rep.eval_count:7d} {rep.eval_count / dense_evals:9.4f} "
              f"{disagreement(mask, reference):9.2e}  {rep.stage_counts}")
