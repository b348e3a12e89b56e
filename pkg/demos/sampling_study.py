"""Uniform versus border-band location sampling at a few budgets, best of two seeds.

Takes a few minutes on one core:

    python demos/sampling_study.py
"""

from ossnet.bench import compare_sampling
from ossnet.model import OssNetConfig
from ossnet.train import TrainConfig
from ossnet.volume import phantom_dataset

RES = 32
kw = dict(blob_radius_range=(3.0, 7.0))
data = phantom_dataset(6, RES, seed=0, **kw)
validation = phantom_dataset(2, RES, seed=1, **kw)
test = phantom_dataset(3, RES, seed=2, **kw)

model_cfg = OssNetConfig.preset("C")
train_cfg = TrainConfig(epochs=10, n_val=2 ** 12, decay_epochs=(7, 9))

configs = [(strategy, n) for n in (2 ** 8, 2 ** 10) for strategy in ("uniform", "border")]
result = compare_sampling(configs, data, validation, seeds=[0, 1], train_config=train_cfg,
                          oss_config=model_cfg, test_set=test, n_test=2 ** 14)
print(result.summary["table"])
