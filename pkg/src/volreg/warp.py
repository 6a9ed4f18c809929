"""Backward warping of volumes, masks and points through a displacement field."""

from __future__ import annotations

import numpy as np

from .volume import (BinaryMask, DisplacementField, GridInfo, ScalarVolume,
                     SoftMask, VolumeError, check_same_grid)


def identity_coords(grid: GridInfo) -> np.ndarray:
    """Voxel coordinates ``(3, nz, ny, nx)`` ordered ``(x, y, z)``."""
    z, y, x = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in grid.shape), indexing="ij")
    return np.stack([x, y, z])


def sample_trilinear(arr: np.ndarray, coords: np.ndarray, with_grad: bool = False):
    """Trilinearly sample ``arr[z, y, x]`` at ``coords`` (``(3, ...)``, x first).

    Coordinates are clamped to ``[0, n-1]`` per axis.  With ``with_grad`` the
    partial derivatives of the sampled value with respect to each coordinate
    are returned too; they are zero along an axis where the clamp is active.
    """
    nz, ny, nx = arr.shape
    flat = arr.ravel()
    limits = (nx - 1, ny - 1, nz - 1)
    base, frac, active = [], [], []
    for c, hi in zip(coords, limits):
        p = np.clip(c, 0.0, hi)
        i0 = np.minimum(np.floor(p), hi - 1).astype(np.int64)
        base.append(i0)
        frac.append(p - i0)
        if with_grad:
            active.append((c >= 0.0) & (c <= hi))
    (x0, y0, z0), (fx, fy, fz) = base, frac
    sx, sy, sz = 1, nx, nx * ny
    i000 = z0 * sz + y0 * sy + x0
    c000 = flat[i000]
    c100 = flat[i000 + sx]
    c010 = flat[i000 + sy]
    c110 = flat[i000 + sx + sy]
    c001 = flat[i000 + sz]
    c101 = flat[i000 + sx + sz]
    c011 = flat[i000 + sy + sz]
    c111 = flat[i000 + sx + sy + sz]

    # interpolate along x, then y, then z
    c00 = c000 + fx * (c100 - c000)
    c10 = c010 + fx * (c110 - c010)
    c01 = c001 + fx * (c101 - c001)
    c11 = c011 + fx * (c111 - c011)
    c0 = c00 + fy * (c10 - c00)
    c1 = c01 + fy * (c11 - c01)
    val = c0 + fz * (c1 - c0)
    if not with_grad:
        return val

    gz = c1 - c0
    gy = (1 - fz) * (c10 - c00) + fz * (c11 - c01)
    dx00 = c100 - c000
    dx10 = c110 - c010
    dx01 = c101 - c001
    dx11 = c111 - c011
    gx = (1 - fz) * ((1 - fy) * dx00 + fy * dx10) + fz * ((1 - fy) * dx01 + fy * dx11)
    grad = np.stack([gx * active[0], gy * active[1], gz * active[2]])
    return val, grad


def sampling_coords(field: DisplacementField) -> np.ndarray:
    return identity_coords(field.grid) + field.components


def warp_array(arr: np.ndarray, field: DisplacementField, with_grad: bool = False):
    return sample_trilinear(arr, sampling_coords(field), with_grad=with_grad)


def warp_scalar(moving: ScalarVolume, field: DisplacementField) -> ScalarVolume:
    """``I_w(x) = I_m(x + u(x))`` with trilinear sampling and boundary clamp."""
    check_same_grid(moving, field)
    if not np.any(field.components):
        return ScalarVolume(moving.grid, moving.data)
    return ScalarVolume(moving.grid, warp_array(moving.data, field))


def warp_soft(mask: SoftMask | BinaryMask, field: DisplacementField) -> np.ndarray:
    """Real-valued transport of a mask (no thresholding)."""
    check_same_grid(mask, field)
    return warp_array(mask.data.astype(np.float64), field)


def warp_mask(mask: BinaryMask, field: DisplacementField, threshold: float = 0.5) -> BinaryMask:
    """Interpolate the mask as reals, then keep voxels ``>= threshold``."""
    return BinaryMask(mask.grid, warp_soft(mask, field) >= threshold)


def map_point(field: DisplacementField, p) -> np.ndarray:
    """Map a fixed-space point to moving space: ``p + u(p)``."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,) or not field.grid.contains(p):
        raise VolumeError(f"point {tuple(p)} outside grid {field.grid.dims}")
    coords = p.reshape(3, 1)
    u = np.array([sample_trilinear(field.components[i], coords)[0] for i in range(3)])
    return p + u


def map_points(field: DisplacementField, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return np.array([map_point(field, p) for p in pts])
