"""Measurement harnesses: batch-size sweeps, inference comparison, sampling and memory sweeps.

All asserted quantities are oracle-evaluation counts, which are
deterministic; wall-clock fields are informational.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensornet as tn
from .errors import ContractError
from .extract import ModelOracle, mise_extract, resample_nearest, seeded_extract
from .metrics import compare, disagreement
from .model import ModelParams, OssNetConfig, forward, init_params
from .sampling import draw_batch
from .train import TrainConfig, train, validate
from .volume import Mask, Volume


@dataclass
class BenchRecord:
    value: object
    method: str
    seed: int | None = None
    volume: int | None = None
    eval_count: int | None = None
    wall_ms: float | None = None
    peak_batch: int | None = None
    disagreement: float | None = None
    iou: float | None = None
    dice: float | None = None
    extra: dict = field(default_factory=dict)


@dataclass
class BenchResult:
    name: str
    sweep_variable: str
    values: list
    records: list[BenchRecord] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    best_of: int | None = None
    summary: dict = field(default_factory=dict)

    def select(self, **match) -> list[BenchRecord]:
        return [r for r in self.records if all(getattr(r, k) == v for k, v in match.items())]

    def to_dict(self) -> dict:
        return {"name": self.name, "sweep_variable": self.sweep_variable, "values": self.values,
                "seeds": self.seeds, "best_of": self.best_of, "summary": self.summary,
                "records": [asdict(r) for r in self.records]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, default=str)

    def table(self) -> str:
        """Plain-text table of the deterministic fields plus wall time."""
        cols = ["value", "method", "seed", "volume", "eval_count", "peak_batch", "disagreement",
                "iou", "dice", "wall_ms"]
        used = [c for c in cols if any(getattr(r, c) is not None for r in self.records)] or cols
        rows = [[_fmt(getattr(r, c)) for c in used] for r in self.records]
        widths = [max(len(c), *(len(row[i]) for row in rows)) if rows else len(c)
                  for i, c in enumerate(used)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(used, widths))]
        lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in rows]
        return "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}" if abs(v) >= 1e-3 or v == 0 else f"{v:.3e}"
    return str(v)


def _default_res(volume: Volume, init_res, target_res):
    target = target_res or volume.shape[0]
    return init_res or max(1, target // 4), target


def sweep_max_batch(params: ModelParams, volumes: Sequence[Volume], batch_values: Sequence[int],
                    init_res: int | None = None, target_res: int | None = None) -> BenchResult:
    """Run original and seeded extraction at every max-batch value.

    Raises :class:`ContractError` if any output mask changes with the batch size.
    """
    result = BenchResult("max_batch_sweep", "max_batch", list(batch_values))
    methods = ["mise"] + (["seeded"] if params.config.use_aux_head else [])
    for vi, volume in enumerate(volumes):
        ires, tres = _default_res(volume, init_res, target_res)
        oracle = ModelOracle(params, volume)
        reference = {}
        for b in batch_values:
            for method in methods:
                if method == "mise":
                    mask, rep = mise_extract(oracle, ires, tres, max_batch=b)
                else:
                    mask, rep = seeded_extract(params, volume, ires, tres, max_batch=b, oracle=oracle)
                ref = reference.setdefault(method, mask)
                if not ref == mask:
                    raise ContractError(f"{method} output changed at max_batch={b} on volume {vi}")
                result.records.append(BenchRecord(b, method, volume=vi, eval_count=rep.eval_count,
                                                  wall_ms=rep.wall_ms, peak_batch=rep.peak_batch))
    result.summary["invariant"] = True
    return result


def compare_inference(params: ModelParams, volumes: Sequence[Volume],
                      labels: Sequence[Mask] | None = None, init_res: int | None = None,
                      target_res: int | None = None, max_batch: int = 2 ** 14) -> BenchResult:
    """Seeded versus original extraction: eval counts, speed and disagreement per volume."""
    result = BenchResult("inference", "volume", list(range(len(volumes))))
    speed, evals, disagree, seed_iou = [], [], [], []
    for vi, volume in enumerate(volumes):
        ires, tres = _default_res(volume, init_res, target_res)
        oracle = ModelOracle(params, volume)
        m_orig, r_orig = mise_extract(oracle, ires, tres, max_batch=max_batch)
        m_seed, r_seed = seeded_extract(params, volume, ires, tres, max_batch=max_batch,
                                        oracle=oracle)
        d = disagreement(m_orig, m_seed)
        extra = {}
        if labels is not None:
            seed = resample_nearest(oracle.aux >= 0.5, tres)
            extra["seed_iou"] = compare(seed, labels[vi]).iou
            seed_iou.append(extra["seed_iou"])
        for method, mask, rep in (("mise", m_orig, r_orig), ("seeded", m_seed, r_seed)):
            metrics = compare(mask, labels[vi]) if labels is not None else None
            result.records.append(BenchRecord(
                vi, method, volume=vi, eval_count=rep.eval_count, wall_ms=rep.wall_ms,
                peak_batch=rep.peak_batch, disagreement=d,
                iou=metrics.iou if metrics else None, dice=metrics.dice if metrics else None,
                extra=dict(extra, stage_counts=rep.stage_counts)))
        speed.append(r_orig.wall_ms / max(r_seed.wall_ms, 1e-9))
        evals.append(r_seed.eval_count / r_orig.eval_count)
        disagree.append(d)
    result.summary = {
        "speed_ratio": float(np.mean(speed)), "eval_ratio": float(np.mean(evals)),
        "max_disagreement": float(np.max(disagree)), "mean_disagreement": float(np.mean(disagree)),
    }
    if seed_iou:
        result.summary["seed_iou"] = float(np.mean(seed_iou))
        # A wall-clock claim is only meaningful when the seed is good.
        result.summary["speed_gate"] = bool(np.mean(seed_iou) > 0.7)
    return result


def compare_sampling(configs: Sequence[tuple[str, int]], dataset, validation, seeds: Sequence[int],
                     train_config: TrainConfig, oss_config: OssNetConfig,
                     test_set=None, n_test: int = 2 ** 15) -> BenchResult:
    """Train every (strategy, n_locations) pair per seed; keep the best run per pair."""
    result = BenchResult("sampling", "config", [f"{s} {n}" for s, n in configs],
                         seeds=list(seeds), best_of=len(seeds))
    test_set = test_set or validation
    rows = []
    for strategy, n in configs:
        label = f"{strategy} {n}"
        runs = []
        for seed in seeds:
            cfg = replace(train_config, sampling=strategy, n_locations=n, seed=seed)
            trained = train(cfg, oss_config, dataset, validation)
            iou_, dice_ = validate(trained.params, test_set, n_test, seed=seed + 1000)
            runs.append((iou_, dice_))
            result.records.append(BenchRecord(label, strategy, seed=seed, iou=iou_, dice=dice_,
                                              wall_ms=trained.wall_s * 1e3))
        best = max(runs, key=lambda r: r[1])
        result.records.append(BenchRecord(label, f"{strategy}/best", iou=best[0], dice=best[1]))
        rows.append((label, best))
    result.summary["table"] = sampling_table(rows)
    return result


def sampling_table(rows) -> str:
    lines = [f"{'sampling':<18}{'IoU':>8}{'Dice':>8}"]
    lines += [f"{label:<18}{iou_:>8.4f}{dice_:>8.4f}" for label, (iou_, dice_) in rows]
    return "\n".join(lines)


def activation_bytes(config: OssNetConfig, n_locations: int, volume_shape=(64, 64, 64),
                     train_mode: bool = True, seed: int = 0) -> int:
    """Bytes held by recorded activations for one forward pass over ``n_locations``.

    In training mode this is the tape's stored outputs; in eval mode it is the
    sum of the intermediate arrays produced, a proxy for peak working memory.
    """
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    volume = Volume(rng.normal(size=(config.in_channels, *volume_shape)).astype(np.float32))
    mask = Mask(rng.integers(0, 2, size=volume_shape))
    batch = draw_batch(volume, mask, n_locations, "uniform", rng, config.patch_source_size)
    if not train_mode:
        for t in params.tensors.values():
            t.requires_grad = True
    with tn.Tape() as tape:
        forward(volume, batch, params, "train" if train_mode else "eval", update_stats=False)
    return int(np.sum([node.out.data.nbytes for node in tape.nodes]))


def memory_sweep(config: OssNetConfig, n_values: Sequence[int], volume_shape=(64, 64, 64),
                 train_mode: bool = True) -> BenchResult:
    """Activation-memory proxy versus the number of sampled locations."""
    result = BenchResult("memory", "n_locations", list(n_values))
    for n in n_values:
        start = time.perf_counter()
        nbytes = activation_bytes(config, n, volume_shape, train_mode)
        result.records.append(BenchRecord(n, "train" if train_mode else "eval",
                                          wall_ms=(time.perf_counter() - start) * 1e3,
                                          extra={"bytes": nbytes, "mib": nbytes / 2 ** 20}))
    return result
