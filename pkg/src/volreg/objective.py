"""
Registration objective and its analytic gradient.

The minimised loss is::

    total = sim_weight * (1 - similarity) + alpha_vp * vp + alpha_reg * smoothness

``similarity`` is a correlation coefficient whose numerator is weighted by
``1 - STM`` while the denominator uses plain variances; ``vp`` is the mean of
``D * STM``; ``smoothness`` is the mean squared forward-difference gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .jacobian import (DET_MAX, DET_MIN, cofactor3, det3, diff_adjoint,
                       jacobian_matrix)
from .volume import (BinaryMask, DisplacementField, RegistrationConfig,
                     ScalarVolume, SoftMask, VolumeError, check_same_grid)
from .warp import identity_coords, sampling_coords, sample_trilinear


@dataclass(frozen=True)
class LossBreakdown:
    similarity: float
    vp: float
    smoothness: float
    total: float

    def to_dict(self) -> dict:
        return {"similarity": self.similarity, "vp": self.vp,
                "smoothness": self.smoothness, "total": self.total}


def combine(similarity: float, vp: float, smooth: float, config: RegistrationConfig) -> float:
    return config.sim_weight * (1.0 - similarity) + config.alpha_vp * vp + config.alpha_reg * smooth


# ---------------------------------------------------------------------------
# similarity

def _weights(stm, shape):
    if stm is None:
        return np.ones(shape)
    return 1.0 - stm.data


def _similarity_parts(iw: np.ndarray, if_: np.ndarray, w: np.ndarray, with_grad: bool):
    wsum = w.sum()
    if not wsum > 0:
        raise VolumeError("similarity weights are all zero (STM == 1 everywhere)")
    cw = iw - (w * iw).sum() / wsum
    cf = if_ - (w * if_).sum() / wsum
    cov_w = (w * cw * cf).sum() / wsum
    dw = iw - iw.mean()
    df = if_ - if_.mean()
    var_w = (dw * dw).mean()
    var_f = (df * df).mean()
    denom = np.sqrt(var_w * var_f)
    if not denom > 0:
        raise VolumeError("similarity undefined: an image is constant")
    s = cov_w / denom
    if not with_grad:
        return float(s), None
    ds = w * cf / (wsum * denom) - s * dw / (iw.size * var_w)
    return float(s), ds


def similarity(warped: ScalarVolume, fixed: ScalarVolume, stm: SoftMask | None = None) -> float:
    """Correlation of ``warped`` and ``fixed`` with ``1 - stm`` numerator weights."""
    check_same_grid(warped, fixed, stm)
    return _similarity_parts(warped.data, fixed.data, _weights(stm, fixed.data.shape), False)[0]


# ---------------------------------------------------------------------------
# volume preservation

def _vp_parts(comps, stm_data, organ: BinaryMask, coords, with_grad):
    n_organ = organ.count
    if n_organ == 0:
        raise VolumeError("empty organ mask")
    n = stm_data.size
    if with_grad:
        ow, ograd = sample_trilinear(organ.data.astype(np.float64), coords, with_grad=True)
    else:
        ow = sample_trilinear(organ.data.astype(np.float64), coords)
    ratio = ow.sum() / n_organ
    J = jacobian_matrix(comps)
    det = det3(J)
    det_c = np.clip(det, DET_MIN, DET_MAX)
    d = 1.0 / (det_c * ratio)
    D = np.maximum(d, 1.0 / d)
    value = float((D * stm_data).sum() / n)
    if not with_grad:
        return value, None
    dD = np.where(d >= 1.0, 1.0, -1.0 / (d * d)) * stm_data / n
    unclamped = (det >= DET_MIN) & (det <= DET_MAX)
    g_det = dD * (-d / det_c) * unclamped
    g_ratio = float((dD * (-d / ratio)).sum())
    C = cofactor3(J)
    grad = np.zeros_like(comps)
    for i in range(3):
        for j in range(3):
            grad[i] += diff_adjoint(g_det * C[i, j], j)
    grad += (g_ratio / n_organ) * ograd
    return value, grad


def vp_loss(field: DisplacementField, stm: SoftMask, organ_moving: BinaryMask) -> float:
    """Mean over all voxels of ``D * STM``."""
    check_same_grid(field, stm, organ_moving)
    return _vp_parts(field.components, stm.data, organ_moving, sampling_coords(field), False)[0]


def vp_gradient(field: DisplacementField, stm: SoftMask, organ_moving: BinaryMask) -> DisplacementField:
    check_same_grid(field, stm, organ_moving)
    return DisplacementField(field.grid, _vp_parts(field.components, stm.data, organ_moving,
                                                   sampling_coords(field), True)[1])


# ---------------------------------------------------------------------------
# smoothness

def _fwd(a, ax):
    out = np.zeros_like(a)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    dst[ax] = slice(0, -1)
    src[ax] = slice(1, None)
    out[tuple(dst)] = a[tuple(src)] - a[tuple(dst)]
    return out


def _fwd_adjoint(h, ax):
    # h vanishes on the last slice by construction
    out = -h.copy()
    dst = [slice(None)] * 3
    src = [slice(None)] * 3
    dst[ax] = slice(1, None)
    src[ax] = slice(0, -1)
    out[tuple(dst)] += h[tuple(src)]
    return out


def _smooth_parts(comps, with_grad):
    n = comps[0].size
    total = 0.0
    grad = np.zeros_like(comps) if with_grad else None
    for i in range(3):
        for ax in range(3):
            h = _fwd(comps[i], ax)
            total += float((h * h).sum())
            if with_grad:
                grad[i] += (2.0 / n) * _fwd_adjoint(h, ax)
    return total / n, grad


def smoothness(field: DisplacementField) -> float:
    """Mean over voxels of the squared forward-difference gradient norm."""
    return _smooth_parts(field.components, False)[0]


def smoothness_gradient(field: DisplacementField) -> DisplacementField:
    return DisplacementField(field.grid, _smooth_parts(field.components, True)[1])


# ---------------------------------------------------------------------------
# combined objective

def evaluate(comps: np.ndarray, moving: ScalarVolume, fixed: ScalarVolume, stm: SoftMask | None,
             organ_moving: BinaryMask | None, config: RegistrationConfig, with_grad: bool = True):
    """Loss breakdown and (optionally) the gradient array for raw components.

    This is the optimiser's hot path; it shares the warp between terms.
    """
    grid = fixed.grid
    coords = _coords(grid, comps)
    if with_grad:
        iw, igrad = sample_trilinear(moving.data, coords, with_grad=True)
    else:
        iw = sample_trilinear(moving.data, coords)
    w = _weights(stm, fixed.data.shape)
    sim, ds = _similarity_parts(iw, fixed.data, w, with_grad)
    smooth, sgrad = _smooth_parts(comps, with_grad)
    if stm is not None:
        if organ_moving is None:
            raise VolumeError("volume-preserving term needs the moving organ mask")
        vp, vgrad = _vp_parts(comps, stm.data, organ_moving, coords, with_grad and config.alpha_vp != 0)
    else:
        vp, vgrad = 0.0, None
    loss = LossBreakdown(sim, vp, smooth, combine(sim, vp, smooth, config))
    if not with_grad:
        return loss, None
    grad = (-config.sim_weight) * ds * igrad
    if config.alpha_reg != 0:
        grad += config.alpha_reg * sgrad
    if vgrad is not None:
        grad += config.alpha_vp * vgrad
    return loss, grad


_ID_CACHE: dict = {}


def _coords(grid, comps):
    base = _ID_CACHE.get(grid.dims)
    if base is None:
        base = identity_coords(grid)
        base.setflags(write=False)
        if len(_ID_CACHE) > 16:
            _ID_CACHE.clear()
        _ID_CACHE[grid.dims] = base
    return base + comps


def similarity_gradient(field: DisplacementField, moving: ScalarVolume, fixed: ScalarVolume,
                        stm: SoftMask | None = None) -> DisplacementField:
    """Gradient of ``similarity(warp(moving, field), fixed, stm)`` (not of the loss)."""
    check_same_grid(field, moving, fixed, stm)
    iw, igrad = sample_trilinear(moving.data, sampling_coords(field), with_grad=True)
    _, ds = _similarity_parts(iw, fixed.data, _weights(stm, fixed.data.shape), True)
    return DisplacementField(field.grid, ds * igrad)


def total_loss(field: DisplacementField, moving: ScalarVolume, fixed: ScalarVolume,
               stm: SoftMask | None, organ_moving: BinaryMask | None,
               config: RegistrationConfig) -> LossBreakdown:
    check_same_grid(field, moving, fixed, stm, organ_moving)
    return evaluate(field.components, moving, fixed, stm, organ_moving, config, with_grad=False)[0]


def total_gradient(field: DisplacementField, moving: ScalarVolume, fixed: ScalarVolume,
                   stm: SoftMask | None, organ_moving: BinaryMask | None,
                   config: RegistrationConfig) -> DisplacementField:
    check_same_grid(field, moving, fixed, stm, organ_moving)
    return DisplacementField(field.grid,
                             evaluate(field.components, moving, fixed, stm, organ_moving, config)[1])
