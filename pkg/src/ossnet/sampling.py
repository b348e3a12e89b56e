"""Training and validation batches: query locations, labels and local patches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeError
from .volume import Mask, Volume, block_reduce

PATCH_SIZE = 7


@dataclass
class SampleBatch:
    """Locations, patches and labels drawn from one volume.

    ``patches`` has shape (n, 7, 7, 7, C) in channels-last order and is always
    the post-pooling 7^3 lattice, whatever ``source_size`` was.  It is None
    for batches built for models that ignore local patches.
    """

    locations: np.ndarray
    patches: np.ndarray
    labels: np.ndarray
    source_size: int = PATCH_SIZE
    volume_ref: str = ""
    fallback_uniform: bool = False

    def __post_init__(self):
        n = len(self.locations)
        n_patches = n if self.patches is None else len(self.patches)
        if n_patches != n or len(self.labels) != n:
            raise ShapeError(
                f"batch parts disagree: {n} locations, {n_patches} patches, "
                f"{len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.locations)

    def subset(self, index) -> SampleBatch:
        patches = None if self.patches is None else self.patches[index]
        return SampleBatch(
            self.locations[index], patches, self.labels[index],
            self.source_size, self.volume_ref, self.fallback_uniform,
        )


def default_band_width(resolution: int) -> int:
    """Border width scaled from 25 voxels at 256^3 down to desk resolutions."""
    return max(2, round(25 * resolution / 256))


def sample_uniform(shape, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. locations uniform over the continuous extent of ``shape``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    hi = np.asarray(shape, dtype=np.float64)
    return rng.uniform(-0.5, hi - 0.5, size=(n, 3))


def compute_border_band(mask: Mask, width: int) -> np.ndarray:
    """Boolean band of voxels within Chebyshev distance ``width`` of an opposite label.

    Both sides of the interface are included.  A mask without any interface
    (empty or completely full) yields an empty band.
    """
    if width < 1:
        raise ValueError("band width must be at least 1")
    occ = mask.data.astype(bool)
    # A cubic dilation is a separable running maximum.
    size = 2 * width + 1
    near_fg = ndimage.maximum_filter(occ.view(np.uint8), size, mode="constant", cval=0) > 0
    near_bg = ndimage.maximum_filter((~occ).view(np.uint8), size, mode="constant", cval=0) > 0
    return (near_fg & ~occ) | (near_bg & occ)


def _uniform_in_voxels(voxels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return voxels + rng.uniform(-0.5, 0.5, size=voxels.shape)


def sample_border(mask: Mask, width: int, n: int, rng: np.random.Generator):
    """Half of ``n`` uniform over the volume, half uniform inside the border band.

    The first ``ceil(n/2)`` rows are the whole-volume half and the remaining
    ``floor(n/2)`` rows come from the band.  Returns ``(locations, fallback)``
    where ``fallback`` is True when the band was empty and every location was
    drawn uniformly instead.
    """
    return sample_band_voxels(np.argwhere(compute_border_band(mask, width)), mask.shape, n, rng)


def sample_band_voxels(voxels: np.ndarray, shape, n: int, rng: np.random.Generator):
    """:func:`sample_border` for a precomputed (m, 3) array of band voxel indices."""
    if len(voxels) == 0:
        return sample_uniform(shape, n, rng), True
    n_band = n // 2
    uniform = sample_uniform(shape, n - n_band, rng)
    picks = voxels[rng.integers(0, len(voxels), size=n_band)].astype(np.float64)
    return np.concatenate([uniform, _uniform_in_voxels(picks, rng)]), False


def nearest_voxel(locations: np.ndarray, shape) -> np.ndarray:
    idx = np.floor(np.asarray(locations, dtype=np.float64) + 0.5).astype(np.int64)
    return np.clip(idx, 0, np.asarray(shape) - 1)


def lookup_labels(mask: Mask, locations) -> np.ndarray:
    """Mask value at the voxel centre nearest to each location."""
    idx = nearest_voxel(np.asarray(locations).reshape(-1, 3), mask.shape)
    return mask.data[idx[:, 0], idx[:, 1], idx[:, 2]].astype(np.float64)


# ------------------------------------------------------------------- patches


def _lattice_blocks(padded: np.ndarray, margin: int, corner: np.ndarray, size: int):
    """Gather ``size``^3 integer-lattice blocks whose low corner is ``corner``."""
    dims = np.array(padded.shape[:3])
    low = np.clip(corner + margin, 0, dims - size)
    ar = np.arange(size)
    offs = (ar[:, None, None] * dims[1] + ar[None, :, None]) * dims[2] + ar[None, None, :]
    lin = (low[:, 0] * dims[1] + low[:, 1]) * dims[2] + low[:, 2]
    flat = padded.reshape(-1, padded.shape[3])
    return flat[lin[:, None, None, None] + offs]


def _blend(blocks: np.ndarray, frac: np.ndarray) -> np.ndarray:
    """Separable trilinear blend of (n, s+1, s+1, s+1, C) blocks to (n, s, s, s, C)."""
    fz, fy, fx = (frac[:, i].reshape(-1, 1, 1, 1, 1) for i in range(3))
    out = blocks[:, :-1] * (1 - fz) + blocks[:, 1:] * fz
    out = out[:, :, :-1] * (1 - fy) + out[:, :, 1:] * fy
    return out[:, :, :, :-1] * (1 - fx) + out[:, :, :, 1:] * fx


class PatchSampler:
    """Extracts trilinear patches from one volume, reusing its padded copy.

    All lattice points of one patch share the same fractional offset, so each
    patch is an integer-lattice block blended with a single set of weights.
    """

    def __init__(self, volume: Volume | np.ndarray, source_size: int = PATCH_SIZE,
                 chunk: int = 2048):
        if source_size not in (7, 14):
            raise ValueError(f"patch source size must be 7 or 14, got {source_size}")
        data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
        self.source_size = source_size
        self.chunk = chunk
        self.margin = source_size + 2
        self.padded = np.pad(
            np.moveaxis(data.astype(np.float64), 0, -1),
            [(self.margin, self.margin)] * 3 + [(0, 0)],
        )

    def __call__(self, locations: np.ndarray) -> np.ndarray:
        locations = np.asarray(locations, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(locations).all():
            raise ValueError("patch locations must be finite")
        parts = [self._extract(locations[i:i + self.chunk])
                 for i in range(0, len(locations), self.chunk)]
        if not parts:
            return np.zeros((0, PATCH_SIZE, PATCH_SIZE, PATCH_SIZE, self.padded.shape[3]))
        return np.concatenate(parts)

    def _extract(self, loc: np.ndarray) -> np.ndarray:
        s = self.source_size
        start = loc - (s - 1) / 2.0
        corner = np.floor(start).astype(np.int64)
        blocks = _lattice_blocks(self.padded, self.margin, corner, s + 1)
        patch = _blend(blocks, start - corner)
        if s == 14:
            patch = block_reduce(np.moveaxis(patch, -1, 1), 2)
            patch = np.moveaxis(patch, 1, -1)
        return patch


def extract_patch(volume: Volume, location, source_size: int = PATCH_SIZE) -> np.ndarray:
    """Local 7^3 patch around ``location`` as a (7, 7, 7, C) array.

    ``source_size`` 7 samples a unit-spaced 7^3 lattice centred on the
    location; 14 samples a 14^3 lattice and average-pools it 2x2x2.
    """
    loc = np.asarray(location, dtype=np.float64)
    patches = PatchSampler(volume, source_size)(loc.reshape(-1, 3))
    return patches[0] if loc.ndim == 1 else patches


def make_batch(volume: Volume, mask: Mask, locations: np.ndarray, source_size: int = PATCH_SIZE,
               sampler: PatchSampler | None = None, volume_ref: str = "",
               fallback: bool = False, with_patches: bool = True) -> SampleBatch:
    patches = None
    if with_patches:
        patches = (sampler or PatchSampler(volume, source_size))(locations)
    return SampleBatch(
        locations=locations,
        patches=patches,
        labels=lookup_labels(mask, locations),
        source_size=source_size,
        volume_ref=volume_ref,
        fallback_uniform=fallback,
    )


def draw_batch(volume: Volume, mask: Mask, n: int, strategy: str, rng: np.random.Generator,
               source_size: int = PATCH_SIZE, band_width: int | None = None,
               volume_ref: str = "") -> SampleBatch:
    """Sample ``n`` locations by ``strategy`` ("uniform" or "border") and build the batch."""
    if strategy == "uniform":
        locations, fallback = sample_uniform(mask.shape, n, rng), False
    elif strategy == "border":
        width = band_width or default_band_width(max(mask.shape))
        locations, fallback = sample_border(mask, width, n, rng)
    else:
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    return make_batch(volume, mask, locations, source_size, volume_ref=volume_ref,
                      fallback=fallback)
