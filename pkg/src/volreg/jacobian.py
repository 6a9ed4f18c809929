"""Jacobian determinants, the volume-change distance field and folding statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import (BinaryMask, DisplacementField, GridInfo, ScalarVolume,
                     VolumeError, check_same_grid)
from .warp import warp_soft

DET_MIN = 1e-6
DET_MAX = 1e6


def diff(a: np.ndarray, j: int) -> np.ndarray:
    """Derivative of ``a[z, y, x]`` along spatial axis ``j`` (0 = x).

    Central differences inside, one-sided differences on the two faces.
    """
    return np.gradient(a, axis=2 - j, edge_order=1)


def diff_adjoint(g: np.ndarray, j: int) -> np.ndarray:
    """Transpose of :func:`diff` applied to ``g``."""
    ax = 2 - j
    g = np.moveaxis(g, ax, 0)
    out = np.zeros_like(g)
    half = 0.5 * g[1:-1]
    out[2:] += half
    out[:-2] -= half
    out[1] += g[0]
    out[0] -= g[0]
    out[-1] += g[-1]
    out[-2] -= g[-1]
    return np.moveaxis(out, 0, ax)


def jacobian_matrix(components: np.ndarray) -> np.ndarray:
    """``J[i, j] = delta_ij + d u_i / d x_j``, shape ``(3, 3, nz, ny, nx)``."""
    J = np.empty((3, 3) + components.shape[1:])
    for i in range(3):
        for j in range(3):
            J[i, j] = diff(components[i], j)
        J[i, i] += 1.0
    return J


def det3(J: np.ndarray) -> np.ndarray:
    return (J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
            - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
            + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0]))


def cofactor3(J: np.ndarray) -> np.ndarray:
    """Cofactor matrix, i.e. ``d det(J) / d J``."""
    C = np.empty_like(J)
    for i in range(3):
        i1, i2 = (i + 1) % 3, (i + 2) % 3
        for j in range(3):
            j1, j2 = (j + 1) % 3, (j + 2) % 3
            C[i, j] = J[i1, j1] * J[i2, j2] - J[i1, j2] * J[i2, j1]
    return C


@dataclass(frozen=True, eq=False)
class JacobianField:
    grid: GridInfo
    det: np.ndarray

    def __post_init__(self):
        a = np.array(self.det, dtype=np.float64).reshape(self.grid.shape)
        if not np.all(np.isfinite(a)):
            raise VolumeError("non-finite Jacobian determinant")
        a.setflags(write=False)
        object.__setattr__(self, "det", a)


def jacobian_det(field: DisplacementField) -> JacobianField:
    if min(field.grid.dims) < 3:
        raise VolumeError("jacobian_det needs at least 3 voxels per axis")
    return JacobianField(field.grid, det3(jacobian_matrix(field.components)))


def organ_ratio(field: DisplacementField, organ_moving: BinaryMask) -> float:
    """``|O_w| / |O_m|`` using the soft (unthresholded) warped organ."""
    check_same_grid(field, organ_moving)
    n = organ_moving.count
    if n == 0:
        raise VolumeError("empty organ mask")
    return float(warp_soft(organ_moving, field).sum()) / n


def distance_from_det(det: np.ndarray, ratio: float) -> np.ndarray:
    """Symmetric distance between local content change ``1/det`` and ``ratio``."""
    c = 1.0 / np.clip(det, DET_MIN, DET_MAX)
    d = c / ratio
    return np.maximum(d, 1.0 / d)


def distance_field(field: DisplacementField, organ_moving: BinaryMask) -> tuple[ScalarVolume, float]:
    """Volume-change distance ``D`` and the organ ratio ``R``.

    The local content change of the backward map is ``c = 1/det``, so a
    region that shrinks in the warped image has ``c < 1``.  ``D`` compares it
    with the whole-organ change ``R`` in both directions and is ``>= 1``.
    """
    ratio = organ_ratio(field, organ_moving)
    det = jacobian_det(field).det
    return ScalarVolume(field.grid, distance_from_det(det, ratio)), ratio


def folding_stats(jf: JacobianField) -> tuple[float, float]:
    """Percentage of voxels with ``det <= 0`` and the (population) std of det."""
    det = jf.det
    return 100.0 * float(np.count_nonzero(det <= 0)) / det.size, float(np.std(det))
