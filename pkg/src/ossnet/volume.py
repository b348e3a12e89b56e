"""Volumes, masks, the OSV container, trilinear sampling and synthetic phantoms.

Coordinates are continuous and expressed in voxel index units in array axis
order ``(z, y, x)``: the centre of voxel ``(i, j, k)`` sits at exactly
``(i, j, k)``, so a volume of shape ``(D, H, W)`` covers the box
``[-0.5, D - 0.5] x [-0.5, H - 0.5] x [-0.5, W - 0.5]``.  Reads outside the
stored voxels see zeros.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import FormatError, ShapeError, SizeError

MAGIC = b"OSV1"


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense multi-channel scalar field stored channel-major as float32."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ShapeError(f"volume data must be (C, D, H, W), got {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("volume contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary occupancy grid of shape ``(D, H, W)``."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim == 4 and raw.shape[0] == 1:
            raw = raw[0]
        if raw.ndim != 3:
            raise ShapeError(f"mask data must be (D, H, W), got {raw.shape}")
        if raw.dtype != bool and not np.isin(raw, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        data = raw.astype(np.uint8)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def count(self) -> int:
        return int(self.data.sum())

    def as_volume(self) -> Volume:
        return Volume(self.data.astype(np.float32), self.spacing)

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.data.shape == other.data.shape and bool((self.data == other.data).all())


# --------------------------------------------------------------------------- I/O


def save_volume(volume: Volume | Mask, path) -> None:
    """Write ``volume`` as an OSV file (masks are stored as 0.0/1.0 floats)."""
    if isinstance(volume, Mask):
        volume = volume.as_volume()
    c, d, h, w = volume.data.shape
    sx, sy, sz = volume.spacing
    header = f"{c} {d} {h} {w} {sx!r} {sy!r} {sz!r}\n".encode("utf-8")
    payload = volume.data.astype("<f4", copy=False).tobytes(order="C")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write OSV file {os.fspath(path)!r}: {exc}") from exc


def load_volume(path) -> Volume:
    """Read an OSV file written by :func:`save_volume`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise FormatError(f"{os.fspath(path)!r}: missing OSV1 magic")
    end = blob.find(b"\n", len(MAGIC))
    if end < 0:
        raise FormatError(f"{os.fspath(path)!r}: unterminated header")
    try:
        fields = blob[len(MAGIC):end].decode("utf-8").split()
        if len(fields) != 7:
            raise ValueError(f"expected 7 header fields, got {len(fields)}")
        c, d, h, w = (int(v) for v in fields[:4])
        spacing = tuple(float(v) for v in fields[4:])
    except ValueError as exc:
        raise FormatError(f"{os.fspath(path)!r}: malformed header: {exc}") from exc
    if min(c, d, h, w) < 1:
        raise FormatError(f"{os.fspath(path)!r}: non-positive dimension in header")
    payload = blob[end + 1:]
    expected = 4 * c * d * h * w
    if len(payload) != expected:
        raise SizeError(
            f"{os.fspath(path)!r}: payload has {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(c, d, h, w)
    try:
        return Volume(data.astype(np.float32), spacing)
    except ValueError as exc:
        raise FormatError(f"{os.fspath(path)!r}: {exc}") from exc


def load_mask(path) -> Mask:
    vol = load_volume(path)
    if vol.channels != 1:
        raise FormatError(f"{os.fspath(path)!r}: mask files must have one channel")
    return Mask(vol.data[0], vol.spacing)


# --------------------------------------------------------------------- sampling


def trilinear(data: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Zero-padded trilinear interpolation of ``data`` (C, D, H, W) at ``points`` (N, 3).

    Returns an (N, C) array.
    """
    data = np.asarray(data, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(points).all():
        raise ValueError("sample locations must be finite")
    c = data.shape[0]
    dims = np.array(data.shape[1:])
    flat = np.ascontiguousarray(np.moveaxis(data, 0, -1)).reshape(-1, c)
    base = np.floor(points).astype(np.int64)
    frac = points - base
    out = np.zeros((len(points), c))
    for corner in np.ndindex(2, 2, 2):
        idx = base + corner
        valid = ((idx >= 0) & (idx < dims)).all(axis=1)
        idx = np.clip(idx, 0, dims - 1)
        lin = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
        weight = np.prod(np.where(corner, frac, 1.0 - frac), axis=1) * valid
        out += weight[:, None] * flat[lin]
    return out


def sample_trilinear(volume: Volume, location) -> np.ndarray:
    """Per-channel trilinear value of ``volume`` at one or many locations."""
    loc = np.asarray(location, dtype=np.float64)
    values = trilinear(volume.data, loc)
    return values[0] if loc.ndim == 1 else values


# ----------------------------------------------------------------- resampling


def _pad_to_multiple(arr: np.ndarray, factor: int) -> np.ndarray:
    pad = [(0, 0)] * (arr.ndim - 3) + [(0, (-s) % factor) for s in arr.shape[-3:]]
    return np.pad(arr, pad) if any(p for _, p in pad) else arr


def block_reduce(arr: np.ndarray, factor: int, reducer=np.mean) -> np.ndarray:
    """Reduce non-overlapping ``factor``^3 blocks over the last three axes."""
    arr = _pad_to_multiple(arr, factor)
    lead = arr.shape[:-3]
    d, h, w = (s // factor for s in arr.shape[-3:])
    blocks = arr.reshape(*lead, d, factor, h, factor, w, factor)
    n = len(lead)
    return reducer(blocks, axis=(n + 1, n + 3, n + 5))


def downscale_avg(volume: Volume, factor: int = 2) -> Volume:
    """Average-pool each ``factor``^3 block (zero-padding ragged edges)."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"downscale factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return volume
    pooled = block_reduce(volume.data.astype(np.float64), factor).astype(np.float32)
    return Volume(pooled, tuple(s * factor for s in volume.spacing))


def downscale_max(mask: Mask, shape) -> Mask:
    """Max-pool ``mask`` onto a coarser grid of the given shape."""
    shape = tuple(int(s) for s in shape)
    factors = {math.ceil(m / s) for m, s in zip(mask.shape, shape)}
    if len(factors) != 1:
        raise ShapeError(f"cannot pool {mask.shape} to {shape} with one cubic factor")
    pooled = block_reduce(mask.data, factors.pop(), np.max)
    if pooled.shape != shape:
        raise ShapeError(f"cannot pool {mask.shape} to {shape}")
    return Mask(pooled)


# ------------------------------------------------------------------- phantoms


@dataclass(frozen=True)
class PhantomConfig:
    resolution: int = 64
    num_blobs: tuple[int, int] = (1, 4)
    blob_radius_range: tuple[float, float] = (5.0, 12.0)
    noise_sigma: float = 0.2
    seed: int = 0
    channels: int = 2
    blur_sigma: float = 0.6

    def __post_init__(self):
        if self.resolution < 16:
            raise ValueError("phantom resolution must be at least 16")
        lo, hi = self.num_blobs
        if not 0 <= lo <= hi:
            raise ValueError(f"invalid blob count range {self.num_blobs}")
        rlo, rhi = self.blob_radius_range
        if not 0 < rlo <= rhi or 2 * rhi + 2 > self.resolution:
            raise ValueError(f"blob radius range {self.blob_radius_range} does not fit the volume")
        if not 1 <= self.channels <= 4:
            raise ValueError("phantoms carry 1 to 4 channels")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


def metaball_mask(shape, centers, radii) -> np.ndarray:
    """Occupancy of the metaball field ``sum r^2 / |x - c|^2 >= 1``.

    A single ball reduces to the solid sphere ``|x - c| <= r``.
    """
    grid = np.indices(shape, dtype=np.float64)
    field_ = np.zeros(shape)
    for c, r in zip(centers, radii):
        d2 = sum((g - ci) ** 2 for g, ci in zip(grid, c))
        field_ += r * r / np.maximum(d2, 1e-12)
    return field_ >= 1.0


def generate_phantom(config: PhantomConfig) -> tuple[Volume, Mask]:
    """Draw one synthetic volume/mask pair; fully determined by ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    res = config.resolution
    shape = (res, res, res)
    lo, hi = config.num_blobs
    count = int(rng.integers(lo, hi + 1))
    radii = rng.uniform(*config.blob_radius_range, size=count)
    centers = [rng.uniform(r + 0.5, res - 1.5 - r, size=3) for r in radii]
    occupied = metaball_mask(shape, centers, radii)

    soft = ndimage.gaussian_filter(occupied.astype(np.float64), config.blur_sigma) \
        if config.blur_sigma > 0 else occupied.astype(np.float64)
    contrast = rng.uniform(0.7, 1.3, size=config.channels)
    noise = rng.normal(0.0, config.noise_sigma, size=(config.channels, *shape))
    data = contrast[:, None, None, None] * soft[None] + noise
    return Volume(data.astype(np.float32)), Mask(occupied)


def phantom_dataset(count: int, resolution: int = 64, seed: int = 0, **overrides):
    """``count`` independent phantoms with per-item seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint64)
    return [
        generate_phantom(PhantomConfig(resolution=resolution, seed=int(s), **overrides))
        for s in seeds
    ]
