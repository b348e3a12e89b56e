"""Losses, the RAdam + Lookahead optimizer stack, validation and the training loop."""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensornet as tn
from .errors import NumericError, ShapeError
from .metrics import MetricReport
from .model import (ModelParams, OssNetConfig, forward, init_params, is_pau, predict,
                    save_checkpoint)
from .sampling import (PatchSampler, compute_border_band, default_band_width, lookup_labels,
                       make_batch, sample_band_voxels, sample_uniform)
from .volume import Mask, Volume, downscale_max

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_volumes: int = 2
    n_locations: int = 2 ** 14
    sampling: str = "uniform"
    alpha: float = 0.1
    base_lr: float = 3e-4
    pau_lr: float = 1e-2
    decay_epochs: tuple[int, ...] = (20, 30)
    lookahead_k: int = 5
    lookahead_alpha: float = 0.8
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    n_val: int = 2 ** 17
    band_width: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.base_lr <= 0 or self.pau_lr <= 0:
            raise ValueError("learning rates must be positive")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError("decay epochs must be strictly increasing")
        if self.sampling not in ("uniform", "border"):
            raise ValueError(f"unknown sampling strategy {self.sampling!r}")
        if min(self.epochs, self.batch_volumes, self.n_locations, self.lookahead_k, self.n_val) < 1:
            raise ValueError("epochs, batch sizes, lookahead_k and n_val must be positive")
        if not 0 <= self.lookahead_alpha <= 1:
            raise ValueError("lookahead_alpha must lie in [0, 1]")


# -------------------------------------------------------------------- losses


def bce(probabilities, labels, eps: float = BCE_EPS):
    """Mean binary cross-entropy; differentiable when given a Tensor."""
    if isinstance(probabilities, tn.Tensor):
        return tn.binary_cross_entropy(probabilities, labels, eps)
    p = np.clip(np.asarray(probabilities, dtype=np.float64).ravel(), eps, 1.0 - eps)
    o = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != o.shape:
        raise ShapeError(f"{p.size} probabilities but {o.size} labels")
    return float(-np.mean(o * np.log(p) + (1.0 - o) * np.log1p(-p)))


def total_loss(probs, labels, aux_probs, aux_labels, alpha: float = 0.1):
    """Main loss plus ``alpha`` times the auxiliary-grid loss (skipped without aux)."""
    main = bce(probs, labels)
    if aux_probs is None or alpha == 0:
        return main
    aux = bce(aux_probs, aux_labels)
    if isinstance(main, tn.Tensor) or isinstance(aux, tn.Tensor):
        return tn.add(main, tn.mul(aux, alpha))
    return main + alpha * aux


# ----------------------------------------------------------------- optimizer


@dataclass
class RAdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> RAdamState:
        return cls(np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64))


def radam_step(param, grad, state: RAdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One rectified-Adam update; returns ``(new_param, new_state)``.

    While the variance estimate is untrustworthy (rho_t <= 4) the step is
    plain bias-corrected momentum; afterwards the adaptive step is scaled by
    the rectification factor r_t.
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(grad).all():
        raise NumericError("non-finite gradient passed to radam_step")
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** t)
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    rho_t = rho_inf - 2.0 * t * b2 ** t / (1.0 - b2 ** t)
    if rho_t > 4.0:
        v_hat = np.sqrt(v / (1.0 - b2 ** t))
        r_t = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
        new = param - lr * r_t * m_hat / (v_hat + eps)
    else:
        new = param - lr * m_hat
    return new, RAdamState(m, v, t)


@dataclass
class LookaheadState:
    slow: dict[str, np.ndarray]
    counter: int = 0

    @classmethod
    def from_params(cls, fast: dict[str, np.ndarray]) -> LookaheadState:
        return cls({k: np.array(v, dtype=np.float64) for k, v in fast.items()})


def lookahead_step(fast: dict[str, np.ndarray], state: LookaheadState, k: int = 5,
                   alpha_la: float = 0.8):
    """Count one inner step; on every ``k``-th, pull slow towards fast and reset fast."""
    counter = state.counter + 1
    if counter % k:
        return fast, LookaheadState(state.slow, counter)
    slow = {n: state.slow[n] + alpha_la * (np.asarray(fast[n]) - state.slow[n]) for n in fast}
    return {n: s.copy() for n, s in slow.items()}, LookaheadState(slow, counter)


def lr_schedule(epoch: int, base_lr: float, decay_epochs: Sequence[int] = (20, 30),
                factor: float = 0.1) -> float:
    """Step decay: multiply by ``factor`` at each epoch in ``decay_epochs``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    drops = int(np.sum([epoch >= e for e in decay_epochs]))
    return base_lr * factor ** drops


@dataclass
class OptimizerState:
    radam: dict[str, RAdamState]
    lookahead: LookaheadState

    @classmethod
    def create(cls, params: ModelParams) -> OptimizerState:
        fast = {k: t.data for k, t in params.tensors.items()}
        return cls({k: RAdamState.zeros_like(v) for k, v in fast.items()},
                   LookaheadState.from_params(fast))

    def flatten(self) -> dict[str, np.ndarray]:
        out = {"lookahead/counter": np.array(float(self.lookahead.counter))}
        for name, st in self.radam.items():
            out[f"radam/m/{name}"] = st.m
            out[f"radam/v/{name}"] = st.v
            out[f"radam/t/{name}"] = np.array(float(st.t))
        for name, slow in self.lookahead.slow.items():
            out[f"lookahead/slow/{name}"] = slow
        return out


def optimizer_update(params: ModelParams, grads: dict[str, np.ndarray], opt: OptimizerState,
                     lr: float, pau_lr: float, cfg: TrainConfig) -> None:
    """Apply RAdam to every tensor, then the joint Lookahead step, in place."""
    for name, t in params.tensors.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(t.data)
        t.data, opt.radam[name] = radam_step(t.data, g, opt.radam[name],
                                             pau_lr if is_pau(name) else lr, cfg.betas, cfg.eps)
    fast = {k: t.data for k, t in params.tensors.items()}
    fast, opt.lookahead = lookahead_step(fast, opt.lookahead, cfg.lookahead_k, cfg.lookahead_alpha)
    for name, t in params.tensors.items():
        t.data = fast[name]


# --------------------------------------------------------------- validation


def validate(params: ModelParams, dataset: Sequence[tuple[Volume, Mask]], n_val: int = 2 ** 17,
             seed: int = 0, max_batch: int = 8192) -> tuple[float, float]:
    """Mean IoU and Dice over ``n_val`` uniformly sampled points per volume."""
    if not dataset:
        raise ValueError("validation needs at least one volume")
    seeds = np.random.SeedSequence(seed).spawn(len(dataset))
    ious, dices = [], []
    for (volume, mask), ss in zip(dataset, seeds):
        locations = sample_uniform(mask.shape, n_val, np.random.default_rng(ss))
        pred = predict(params, volume, locations, max_batch) >= 0.5
        labels = lookup_labels(mask, locations).astype(bool)
        report = MetricReport.from_counts(int(labels.sum()), int(pred.sum()),
                                          int((labels & pred).sum()), n_val)
        ious.append(report.iou)
        dices.append(report.dice)
    return float(np.mean(ious)), float(np.mean(dices))


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_dice: float = -1.0
    checkpoint: Path | None = None
    wall_s: float = 0.0


class _VolumeCache:
    """Per-volume patch sampler, border band and auxiliary labels, built on demand."""

    def __init__(self, volume, mask, source_size, band_width, with_patches):
        self.volume, self.mask = volume, mask
        self.sampler = PatchSampler(volume, source_size) if with_patches else None
        self.band_width = band_width or default_band_width(max(mask.shape))
        self._band = None
        self._aux = {}

    def band_voxels(self):
        if self._band is None:
            self._band = np.argwhere(compute_border_band(self.mask, self.band_width))
        return self._band

    def aux_labels(self, shape):
        if shape not in self._aux:
            self._aux[shape] = downscale_max(self.mask, shape).data.astype(np.float64)
        return self._aux[shape]


def _draw_locations(cache: _VolumeCache, n: int, strategy: str, rng):
    if strategy == "uniform":
        return sample_uniform(cache.mask.shape, n, rng), False
    return sample_band_voxels(cache.band_voxels(), cache.mask.shape, n, rng)


def train(train_config: TrainConfig, oss_config: OssNetConfig,
          dataset: Sequence[tuple[Volume, Mask]],
          validation: Sequence[tuple[Volume, Mask]] | None = None,
          out_dir: str | os.PathLike | None = None) -> TrainResult:
    """Train from scratch; deterministic given the two configs and the data.

    Validation runs after every epoch on ``validation`` (the training set
    when omitted).  With ``out_dir`` the best-validation checkpoint goes to
    ``best.ossckpt``, the final state to ``last.ossckpt`` and one line per
    epoch to ``metrics.log``.
    """
    cfg = train_config
    if not dataset:
        raise ValueError("training needs at least one volume")
    validation = dataset if validation is None else validation
    rng = np.random.default_rng(cfg.seed)
    params = init_params(oss_config, cfg.seed)
    opt = OptimizerState.create(params)
    caches = [_VolumeCache(v, m, oss_config.patch_source_size, cfg.band_width,
                           oss_config.use_patches) for v, m in dataset]

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "metrics.log", "w")
    result = TrainResult(params=params)
    best_state = None
    step = 0
    start = time.perf_counter()
    try:
        for epoch in range(cfg.epochs):
            lr = lr_schedule(epoch, cfg.base_lr, cfg.decay_epochs)
            pau_lr = lr_schedule(epoch, cfg.pau_lr, cfg.decay_epochs)
            order = rng.permutation(len(dataset))
            losses = []
            for lo in range(0, len(order), cfg.batch_volumes):
                picked = [caches[i] for i in order[lo:lo + cfg.batch_volumes]]
                batches = []
                for c in picked:
                    locs, fallback = _draw_locations(c, cfg.n_locations, cfg.sampling, rng)
                    batches.append(make_batch(c.volume, c.mask, locs, oss_config.patch_source_size,
                                              sampler=c.sampler, fallback=fallback,
                                              with_patches=oss_config.use_patches))
                with tn.Tape() as tape:
                    probs, aux = forward([c.volume for c in picked], batches, params, "train")
                    labels = np.concatenate([b.labels for b in batches])
                    aux_labels = None
                    if aux is not None:
                        aux_labels = np.stack([c.aux_labels(aux.shape[1:]) for c in picked])
                    loss = total_loss(probs, labels, aux, aux_labels, cfg.alpha)
                try:
                    grads = tn.backprop(tape, loss)
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch} step {step}: {exc}") from exc
                optimizer_update(params, grads, opt, lr, pau_lr, cfg)
                losses.append(float(loss.data))
                step += 1
            iou_, dice_ = validate(params, validation, cfg.n_val, seed=cfg.seed + 1)
            record = {"epoch": epoch, "step": step, "loss": float(np.mean(losses)),
                      "iou": iou_, "dice": dice_, "lr": lr}
            result.history.append(record)
            line = "{epoch} {step} {loss:.10g} {iou:.10g} {dice:.10g} {lr:.10g}".format(**record)
            log.info(line)
            if log_fh is not None:
                log_fh.write(line + "\n")
                log_fh.flush()
            if dice_ > result.best_dice:
                result.best_dice, result.best_epoch = dice_, epoch
                best_state = params.copy()
                best_state.optimizer_state = opt.flatten()
                if out is not None:
                    result.checkpoint = out / "best.ossckpt"
                    save_checkpoint(best_state, result.checkpoint,
                                    extra={"epoch": epoch, "dice": dice_, "iou": iou_})
    finally:
        if log_fh is not None:
            log_fh.close()
    params.optimizer_state = opt.flatten()
    if out is not None:
        save_checkpoint(params, out / "last.ossckpt", extra={"epoch": cfg.epochs - 1})
    result.params = best_state if best_state is not None else params
    result.wall_s = time.perf_counter() - start
    return result


def config_dict(cfg: TrainConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}
