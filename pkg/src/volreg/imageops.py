"""Volumetric filtering and pyramid primitives."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .volume import (BinaryMask, DisplacementField, GridInfo, ScalarVolume,
                     SoftMask, VolumeError)
from .warp import identity_coords, sample_trilinear


def thread_count() -> int:
    """Worker cap from ``VOLREG_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("VOLREG_THREADS", "1")))
    except ValueError:
        return 1


def bilateral_filter(img: ScalarVolume, sigma_space: float = 2.0, sigma_range: float = 0.1,
                     threads: int | None = None) -> ScalarVolume:
    """Brute-force 3D bilateral filter.

    Parameters
    ----------
    img : ScalarVolume
    sigma_space : float
        Spatial Gaussian width in voxels.  The window is the cube of radius
        ``ceil(2 * sigma_space)``; neighbours outside the grid are skipped.
    sigma_range : float
        Range Gaussian width as a fraction of ``max - min`` intensity.  A
        constant image has zero range; the range is then taken as 1.0, which
        reduces the filter to a normalised Gaussian, so the image is returned
        unchanged.
    threads : int, optional
        Number of z-slab workers; defaults to ``VOLREG_THREADS``.  Every output
        voxel accumulates its window in the same order, so the result does not
        depend on this value.
    """
    if not (sigma_space > 0 and sigma_range > 0):
        raise VolumeError("bilateral sigmas must be > 0")
    data = img.data
    lo, hi = float(data.min()), float(data.max())
    if hi == lo:
        # every normalised average of a constant is that constant
        return ScalarVolume(img.grid, data)
    span = hi - lo
    sr = sigma_range * span
    r = int(math.ceil(2.0 * sigma_space))
    nz, ny, nx = data.shape
    pad = np.pad(data, r, mode="edge")
    valid = np.pad(np.ones(data.shape), r, mode="constant")
    offsets = [(dz, dy, dx) for dz in range(-r, r + 1) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    inv_s = 1.0 / (2.0 * sigma_space ** 2)
    inv_r = 1.0 / (2.0 * sr ** 2)

    def run(z0, z1):
        centre = data[z0:z1]
        num = np.zeros_like(centre)
        den = np.zeros_like(centre)
        for dz, dy, dx in offsets:
            sl = (slice(z0 + r + dz, z1 + r + dz), slice(r + dy, r + dy + ny), slice(r + dx, r + dx + nx))
            nb = pad[sl]
            w = valid[sl] * math.exp(-(dz * dz + dy * dy + dx * dx) * inv_s) * np.exp(-((nb - centre) ** 2) * inv_r)
            num += w * nb
            den += w
        return num / den

    threads = thread_count() if threads is None else max(1, threads)
    bounds = np.linspace(0, nz, min(threads, nz) + 1).astype(int)
    chunks = list(zip(bounds[:-1], bounds[1:]))
    if len(chunks) == 1:
        out = run(0, nz)
    else:
        with ThreadPoolExecutor(len(chunks)) as ex:
            out = np.concatenate(list(ex.map(lambda c: run(*c), chunks)))
    return ScalarVolume(img.grid, out)


def coarser_grid(grid: GridInfo) -> GridInfo:
    dims = tuple((n + 1) // 2 for n in grid.dims)
    if min(dims) < 2:
        raise VolumeError(f"cannot downsample grid {grid.dims} further")
    return GridInfo(dims, tuple(2.0 * s for s in grid.spacing_mm))


def block_average(arr: np.ndarray) -> np.ndarray:
    """2x2x2 block means; a trailing odd slice averages the voxels it has."""
    pads = [(0, n % 2) for n in arr.shape]
    a = np.pad(arr, pads, mode="edge") if any(p[1] for p in pads) else arr
    nz, ny, nx = a.shape
    return a.reshape(nz // 2, 2, ny // 2, 2, nx // 2, 2).mean(axis=(1, 3, 5))


def downsample(obj):
    """Halve resolution by block averaging; binary masks re-threshold at 0.5."""
    grid = coarser_grid(obj.grid)
    if isinstance(obj, BinaryMask):
        return BinaryMask(grid, block_average(obj.data.astype(np.float64)) >= 0.5)
    if isinstance(obj, SoftMask):
        return SoftMask(grid, np.clip(block_average(obj.data), 0.0, 1.0))
    if isinstance(obj, ScalarVolume):
        return ScalarVolume(grid, block_average(obj.data))
    if isinstance(obj, DisplacementField):
        return downsample_field(obj)
    raise TypeError(f"cannot downsample {type(obj).__name__}")


def downsample_field(f: DisplacementField) -> DisplacementField:
    """Block-average each component and rescale to coarse voxel units."""
    grid = coarser_grid(f.grid)
    comps = np.stack([block_average(f.components[i]) * (grid.dims[i] / f.grid.dims[i]) for i in range(3)])
    return DisplacementField(grid, comps)


def resample_array(arr: np.ndarray, target_shape) -> np.ndarray:
    """Cell-centred trilinear resampling of ``arr`` onto ``target_shape``."""
    src = arr.shape
    coords = identity_coords(GridInfo(tuple(reversed(target_shape))))
    for axis in range(3):  # coords are (x, y, z); array axes are (z, y, x)
        n_src, n_dst = src[2 - axis], target_shape[2 - axis]
        coords[axis] = (coords[axis] + 0.5) * (n_src / n_dst) - 0.5
    return sample_trilinear(arr, coords)


def upsample_field(f: DisplacementField, target: GridInfo) -> DisplacementField:
    """Interpolate ``f`` onto ``target`` and rescale to the new voxel units."""
    comps = np.stack([
        resample_array(f.components[i], target.shape) * (target.dims[i] / f.grid.dims[i])
        for i in range(3)
    ])
    return DisplacementField(target, comps)
