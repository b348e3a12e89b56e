"""Train a small model on phantoms, then segment a held-out volume three ways.

Runs in a couple of minutes on one core:

    python demos/quickstart.py
"""

import time

from ossnet.extract import ModelOracle, dense_extract, mise_extract, seeded_extract
from ossnet.metrics import compare, disagreement
from ossnet.model import OssNetConfig
from ossnet.train import TrainConfig, train, validate
from ossnet.volume import phantom_dataset

RES = 32

data = phantom_dataset(8, RES, seed=0, blob_radius_range=(3.0, 7.0))
held_out = phantom_dataset(2, RES, seed=1, blob_radius_range=(3.0, 7.0))

model_cfg = OssNetConfig.preset("C")
train_cfg = TrainConfig(epochs=25, n_locations=2 ** 11, n_val=2 ** 12, decay_epochs=(18, 22))

start = time.perf_counter()
result = train(train_cfg, model_cfg, data, held_out[:1])
print(f"trained {train_cfg.epochs} epochs in {time.perf_counter() - start:.1f}s, "
      f"best epoch {result.best_epoch} (val Dice {result.best_dice:.3f})")
iou_, dice_ = validate(result.params, held_out, 2 ** 14, seed=7)
print(f"held-out sampled-point IoU {iou_:.3f}  Dice {dice_:.3f}")

volume, label = held_out[1]
oracle = ModelOracle(result.params, volume)
dense = dense_extract(oracle, RES)
print(f"dense   evals {RES ** 3:6d}  Dice vs label {compare(dense, label).dice:.3f}")
for name, (mask, rep) in (("mise", mise_extract(oracle, RES // 4, RES)),
                          ("seeded", seeded_extract(result.params, volume, RES // 4, RES,
                                                    oracle=oracle))):
    print(f"{name:7s} evals {rep.eval_count:6d}  Dice vs label {compare(mask, label).dice:.3f}  "
          f"disagreement vs dense {disagreement(mask, dense):.2e}")
