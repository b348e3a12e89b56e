"""Dense and octree-refined extraction of segmentation masks from occupancy oracles.

An oracle is any callable mapping an (N, 3) array of continuous locations
to N probabilities.  Locations are in the index space of the oracle's
``domain`` shape (see :mod:`ossnet.volume`); an oracle without a ``domain``
attribute is taken to live on the output grid itself.

Output voxel ``j`` of a ``target``-resolution grid is the point
``-0.5 + (j + 0.5) * domain / target``.  Refinement works on the
``(target + 1)^3`` lattice of such points: lattice points with indices that
are multiples of ``2^(L - l)`` form level ``l``, the corners of the
level-``l`` cells.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, ContractError, ShapeError
from .metrics import disagreement
from .model import ModelParams, Predictor
from .volume import Mask, Volume

THRESHOLD = 0.5
DEFAULT_MAX_BATCH = 2 ** 14
CORNERS = np.array(list(np.ndindex(2, 2, 2)), dtype=np.int64)


# ------------------------------------------------------------------- oracles


class SphereOracle:
    """``sigmoid(sharpness * (radius - |x - center|))``; infinite sharpness is a hard ball."""

    def __init__(self, center, radius: float, sharpness: float = np.inf, domain=None):
        if radius <= 0:
            raise ValueError("radius must be positive")
        if sharpness <= 0:
            raise ValueError("sharpness must be positive")
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.radius = float(radius)
        self.sharpness = float(sharpness)
        if domain is not None:
            self.domain = tuple(int(s) for s in domain)

    def __call__(self, locations: np.ndarray) -> np.ndarray:
        d = np.linalg.norm(np.asarray(locations, dtype=np.float64).reshape(-1, 3) - self.center,
                           axis=1)
        margin = self.radius - d
        if np.isinf(self.sharpness):
            return np.where(margin > 0, 1.0, np.where(margin < 0, 0.0, 0.5))
        from scipy.special import expit

        return expit(self.sharpness * margin)


def sphere_oracle(center, radius: float, sharpness: float = np.inf, domain=None) -> SphereOracle:
    return SphereOracle(center, radius, sharpness, domain)


class ModelOracle:
    """Eval-mode decoder of a trained model on one volume.

    Patches for off-grid locations come from trilinear interpolation of the
    volume, so any output resolution can be queried.
    """

    def __init__(self, params: ModelParams, volume: Volume):
        self._predict = Predictor(params, volume)
        self.domain = volume.shape
        self.aux = self._predict.aux

    def __call__(self, locations: np.ndarray) -> np.ndarray:
        return self._predict(locations)


class _Counter:
    """Splits queries into calls of at most ``max_batch`` and checks the oracle contract."""

    def __init__(self, oracle, max_batch: int):
        if max_batch < 1:
            raise ValueError("max_batch must be at least 1")
        self.oracle = oracle
        self.max_batch = int(max_batch)
        self.evals = 0
        self.peak = 0
        self.calls = 0

    def __call__(self, points: np.ndarray) -> np.ndarray:
        out = np.empty(len(points))
        for lo in range(0, len(points), self.max_batch):
            chunk = points[lo:lo + self.max_batch]
            values = np.asarray(self.oracle(chunk), dtype=np.float64).reshape(-1)
            if values.shape != (len(chunk),):
                raise ContractError(f"oracle returned {values.size} values for {len(chunk)} locations")
            if not (np.isfinite(values).all() and (values >= 0).all() and (values <= 1).all()):
                raise ContractError("oracle returned values outside [0, 1]")
            out[lo:lo + len(chunk)] = values
            self.calls += 1
            self.peak = max(self.peak, len(chunk))
        self.evals += len(points)
        return out


# -------------------------------------------------------------------- report


@dataclass
class ExtractionReport:
    method: str
    mask: Mask
    eval_count: int
    stage_counts: list[int]
    wall_ms: float
    peak_batch: int
    max_batch: int
    init_res: int | None = None
    target_res: int = 0
    seeded_points: int = 0
    disagreement_vs_dense: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method, "eval_count": self.eval_count,
            "stage_counts": list(self.stage_counts), "wall_ms": self.wall_ms,
            "peak_batch": self.peak_batch, "max_batch": self.max_batch,
            "init_res": self.init_res, "target_res": self.target_res,
            "seeded_points": self.seeded_points, "occupied": self.mask.count(),
            "disagreement_vs_dense": self.disagreement_vs_dense, **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_text(self) -> str:
        return "\n".join(f"{k}: {v}" for k, v in self.to_dict().items())

    def compare_dense(self, dense: Mask) -> float:
        self.disagreement_vs_dense = disagreement(self.mask, dense)
        return self.disagreement_vs_dense


# -------------------------------------------------------------------- helpers


def _domain(oracle, resolution: int) -> np.ndarray:
    dom = getattr(oracle, "domain", None)
    return np.asarray(dom if dom is not None else (resolution,) * 3, dtype=np.float64)


def lattice_coordinates(indices: np.ndarray, target_res: int, domain) -> np.ndarray:
    """Continuous locations of fine lattice indices (N, 3)."""
    scale = np.asarray(domain, dtype=np.float64) / target_res
    return -0.5 + (np.asarray(indices, dtype=np.float64) + 0.5) * scale


def upsample_nearest(mask: Mask | np.ndarray, factor: int) -> Mask:
    """Replicate every voxel into a ``factor``^3 block."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    data = mask.data if isinstance(mask, Mask) else np.asarray(mask)
    factor = int(factor)
    for axis in range(3):
        data = np.repeat(data, factor, axis=axis)
    return Mask(data)


def _check_levels(init_res: int, target_res: int) -> int:
    if init_res < 1 or target_res < 1:
        raise ValueError("resolutions must be positive")
    if init_res > target_res:
        raise ValueError(f"init_res {init_res} exceeds target_res {target_res}")
    ratio = target_res // init_res
    if ratio * init_res != target_res or ratio & (ratio - 1):
        raise ValueError(f"target_res {target_res} is not init_res {init_res} times a power of two")
    return ratio.bit_length() - 1


# ---------------------------------------------------------------------- dense


def dense_extract(oracle, resolution: int, threshold: float = THRESHOLD,
                  max_batch: int = DEFAULT_MAX_BATCH, return_report: bool = False):
    """Threshold the oracle at every voxel centre of a ``resolution``^3 grid."""
    start = time.perf_counter()
    count = _Counter(oracle, max_batch)
    idx = np.indices((resolution,) * 3).reshape(3, -1).T
    probs = count(lattice_coordinates(idx, resolution, _domain(oracle, resolution)))
    mask = Mask((probs >= threshold).reshape((resolution,) * 3))
    if not return_report:
        return mask
    return mask, ExtractionReport("dense", mask, count.evals, [count.evals],
                                  (time.perf_counter() - start) * 1e3, count.peak, max_batch,
                                  None, resolution)


# ----------------------------------------------------------------------- MISE


class _Octree:
    """Lattice values and refinement state shared by both MISE variants."""

    def __init__(self, counter: _Counter, init_res: int, target_res: int, domain, threshold):
        self.count = counter
        self.levels = _check_levels(init_res, target_res)
        self.init_res = init_res
        self.target = target_res
        self.domain = domain
        self.threshold = threshold
        size = target_res + 1
        self.values = np.full((size, size, size), np.nan)
        self.fill = np.full((target_res,) * 3, -1, dtype=np.int8)
        self.stage_counts: list[int] = []

    def step(self, level: int) -> int:
        return 2 ** (self.levels - level)

    def evaluate(self, points: np.ndarray) -> int:
        """Query the oracle at fine lattice points (M, 3) whose value is unknown."""
        if len(points) == 0:
            return 0
        points = np.unique(points, axis=0)
        known = ~np.isnan(self.values[points[:, 0], points[:, 1], points[:, 2]])
        points = points[~known]
        if len(points):
            probs = self.count(lattice_coordinates(points, self.target, self.domain))
            self.values[points[:, 0], points[:, 1], points[:, 2]] = probs
        return len(points)

    def corner_labels(self, cells: np.ndarray, level: int) -> np.ndarray:
        """(M, 8) thresholded corner values of level-``level`` cells given by lower corners."""
        s = self.step(level)
        pts = (cells[:, None, :] + CORNERS[None]) * s
        vals = self.values[pts[..., 0], pts[..., 1], pts[..., 2]]
        if np.isnan(vals).any():
            raise RuntimeError("cell corner queried before evaluation")
        return vals >= self.threshold

    def active(self, cells: np.ndarray, level: int) -> np.ndarray:
        labels = self.corner_labels(cells, level)
        return labels.any(axis=1) & ~labels.all(axis=1)

    def fill_inactive(self, cells: np.ndarray, level: int) -> None:
        """Record the uniform label of inactive cells for the fine voxels they own."""
        if len(cells) == 0:
            return
        s = self.step(level)
        res = self.init_res * 2 ** level
        grid = np.full((res,) * 3, -1, dtype=np.int8)
        grid[cells[:, 0], cells[:, 1], cells[:, 2]] = self.corner_labels(cells, level)[:, 0]
        for axis in range(3):
            grid = np.repeat(grid, s, axis=axis)
        free = self.fill < 0
        self.fill[free] = grid[free]

    def refine(self, active_cells: np.ndarray, level: int) -> None:
        """Subdivide active cells of ``level - 1`` down to the target lattice."""
        for lvl in range(level, self.levels + 1):
            children = (2 * active_cells[:, None, :] + CORNERS[None]).reshape(-1, 3)
            s = self.step(lvl)
            pts = ((children[:, None, :] + CORNERS[None]) * s).reshape(-1, 3)
            self.stage_counts.append(self.evaluate(pts))
            if len(children) == 0:
                active_cells = children
                continue
            flags = self.active(children, lvl)
            self.fill_inactive(children[~flags], lvl)
            active_cells = children[flags]

    def output(self) -> Mask:
        t = self.target
        vals = self.values[:t, :t, :t]
        known = ~np.isnan(vals)
        labels = np.where(known, vals >= self.threshold, self.fill == 1)
        if (~known & (self.fill < 0)).any():
            raise RuntimeError("extraction left voxels without a value")
        return Mask(labels)


def _level0_cells(res: int) -> np.ndarray:
    return np.indices((res,) * 3).reshape(3, -1).T


def mise_extract(oracle, init_res: int, target_res: int, threshold: float = THRESHOLD,
                 max_batch: int = DEFAULT_MAX_BATCH):
    """Octree extraction: evaluate the coarse lattice, then refine only boundary cells.

    A cell is active when its thresholded corners disagree.  Active cells are
    split into eight children whose new corners are evaluated; inactive cells
    pass their uniform label down to every fine voxel they contain.
    """
    start = time.perf_counter()
    count = _Counter(oracle, max_batch)
    tree = _Octree(count, init_res, target_res, _domain(oracle, target_res), threshold)
    s0 = tree.step(0)
    lattice = np.indices((init_res + 1,) * 3).reshape(3, -1).T * s0
    tree.stage_counts.append(tree.evaluate(lattice))
    cells = _level0_cells(init_res)
    flags = tree.active(cells, 0)
    tree.fill_inactive(cells[~flags], 0)
    tree.refine(cells[flags], 1)
    mask = tree.output()
    return mask, ExtractionReport("mise", mask, count.evals, tree.stage_counts,
                                  (time.perf_counter() - start) * 1e3, count.peak, max_batch,
                                  init_res, target_res)


def seed_lattice(seed: np.ndarray) -> np.ndarray:
    """Lattice points (res+1)^3 whose every incident seed cell is occupied."""
    seed = np.asarray(seed, dtype=bool)
    padded = np.pad(seed, 1, constant_values=True)
    out = np.ones(tuple(s + 1 for s in seed.shape), dtype=bool)
    for dz, dy, dx in CORNERS:
        out &= padded[dz:dz + out.shape[0], dy:dy + out.shape[1], dx:dx + out.shape[2]]
    # True padding lets points on the outer faces consult only existing cells.
    return out


def resample_nearest(grid: np.ndarray, res: int) -> np.ndarray:
    """Nearest-neighbour resampling of a cubic grid onto ``res``^3 cells."""
    grid = np.asarray(grid)
    src = grid.shape[0]
    if res % src == 0:
        return upsample_nearest(grid.astype(np.uint8), res // src).data.astype(bool)
    idx = np.minimum(((np.arange(res) + 0.5) * src / res).astype(np.int64), src - 1)
    return grid[np.ix_(idx, idx, idx)].astype(bool)


def seeded_mise(oracle, seed: np.ndarray, init_res: int, target_res: int,
                threshold: float = THRESHOLD, max_batch: int = DEFAULT_MAX_BATCH):
    """MISE whose coarse lattice is pre-filled from a binary seed grid.

    ``seed`` is any cubic boolean grid; it is resampled (nearest) to
    ``init_res``^3 cells.  Lattice points inside the seeded region receive a
    sentinel probability of 1.0 without an oracle call.  Sentinels that end up
    as corners of active cells are replaced by real evaluations, repeatedly,
    before normal refinement starts.
    """
    start = time.perf_counter()
    count = _Counter(oracle, max_batch)
    tree = _Octree(count, init_res, target_res, _domain(oracle, target_res), threshold)
    s0 = tree.step(0)
    seed = np.asarray(seed, dtype=bool)
    if seed.ndim != 3 or len(set(seed.shape)) != 1:
        raise ShapeError(f"seed must be a cubic grid, got {seed.shape}")
    seeded = seed_lattice(resample_nearest(seed, init_res))
    sentinel = np.zeros_like(tree.values, dtype=bool)
    sentinel[::s0, ::s0, ::s0] = seeded
    tree.values[sentinel] = 1.0

    lattice = np.indices((init_res + 1,) * 3).reshape(3, -1).T
    fresh = lattice[~seeded[lattice[:, 0], lattice[:, 1], lattice[:, 2]]] * s0
    first = tree.evaluate(fresh)
    cells = _level0_cells(init_res)
    erosion = 0
    while True:
        flags = tree.active(cells, 0)
        pts = ((cells[flags][:, None, :] + CORNERS[None]) * s0).reshape(-1, 3)
        pts = np.unique(pts, axis=0)
        stale = pts[sentinel[pts[:, 0], pts[:, 1], pts[:, 2]]]
        if len(stale) == 0:
            break
        sentinel[stale[:, 0], stale[:, 1], stale[:, 2]] = False
        tree.values[stale[:, 0], stale[:, 1], stale[:, 2]] = np.nan
        erosion += tree.evaluate(stale)
    tree.stage_counts.append(first + erosion)
    tree.fill_inactive(cells[~flags], 0)
    tree.refine(cells[flags], 1)
    mask = tree.output()
    report = ExtractionReport("seeded", mask, count.evals, tree.stage_counts,
                              (time.perf_counter() - start) * 1e3, count.peak, max_batch,
                              init_res, target_res, seeded_points=int(sentinel.sum()),
                              extra={"stage0_fresh": first, "stage0_reevaluated": erosion})
    return mask, report


def seeded_extract(model_params: ModelParams, volume: Volume, init_res: int, target_res: int,
                   threshold: float = THRESHOLD, max_batch: int = DEFAULT_MAX_BATCH,
                   oracle: ModelOracle | None = None):
    """Seeded MISE using the model's auxiliary low-resolution segmentation."""
    if not model_params.config.use_aux_head:
        raise CapabilityError("this model has no auxiliary head; use mise_extract instead")
    oracle = oracle or ModelOracle(model_params, volume)
    return seeded_mise(oracle, oracle.aux >= threshold, init_res, target_res, threshold, max_batch)
