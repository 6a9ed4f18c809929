"""Coarse-to-fine variational registration with adaptive-moment descent."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import gaussian_filter

from .imageops import downsample, upsample_field
from .jacobian import DET_MIN, jacobian_det
from .objective import LossBreakdown, evaluate
from .volume import (BinaryMask, DisplacementField, RegistrationConfig,
                     ScalarVolume, SoftMask, VolumeError, check_same_grid)

log = logging.getLogger(__name__)

CONVERGENCE_WINDOW = 10
CONVERGENCE_TOL = 1e-5
RATE_GROWTH = 1.1
# smoothing widths tried when an upsampled field folds on the tumour mask
REPAIR_SIGMAS = (0.5, 1.0, 1.5, 2.0, 3.0, 4.0)


class NumericalError(RuntimeError):
    """The objective became non-finite during optimisation."""

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


@dataclass
class LevelSummary:
    dims: tuple[int, int, int]
    iterations: int
    step_size: float
    initial_total: float
    final_total: float


@dataclass
class RegistrationResult:
    field: DisplacementField
    loss_trace: list[LossBreakdown]
    converged: bool
    levels: list[LevelSummary] = dc_field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.levels[-1].final_total if self.levels else self.loss_trace[-1].total


def _pyramid(obj, levels):
    out = [obj]
    for _ in range(levels - 1):
        out.append(None if out[-1] is None else downsample(out[-1]))
    return out[::-1]


def _folds_on(comps, grid, weights) -> bool:
    det = jacobian_det(DisplacementField(grid, comps)).det
    return bool(np.any((det <= DET_MIN) & (weights > 0)))


def _repair_folds(comps, grid, stm, config):
    """Smooth an upsampled field until no tumour-mask voxel sits on the det clamp.

    Trilinear upsampling can spread a fold next to the tumour onto voxels
    the coarser mask did not cover.  There the clamped determinant has no
    gradient and the volume term can only be lowered by inflating the organ,
    so the fine level would never recover.
    """
    if stm is None or config.alpha_vp == 0 or not _folds_on(comps, grid, stm.data):
        return comps
    for sigma in REPAIR_SIGMAS:
        smoothed = np.stack([gaussian_filter(c, sigma, mode="nearest") for c in comps])
        if not _folds_on(smoothed, grid, stm.data):
            log.debug("repaired upsampled fold with sigma %.1f", sigma)
            return smoothed
    return smoothed


def _has_converged(totals) -> bool:
    if len(totals) <= CONVERGENCE_WINDOW:
        return False
    a, b = totals[-1 - CONVERGENCE_WINDOW], totals[-1]
    return abs(b - a) <= CONVERGENCE_TOL * max(abs(a), 1e-12)


def register(moving: ScalarVolume, fixed: ScalarVolume, organ_moving: BinaryMask | None = None,
             stm: SoftMask | None = None, config: RegistrationConfig | None = None,
             init: DisplacementField | None = None) -> RegistrationResult:
    """Find a displacement field aligning ``moving`` to ``fixed``.

    Without ``stm`` the objective is similarity plus smoothness; with it the
    weighted similarity and the volume-preserving term are active.  Each
    pyramid level runs a fixed number of Adam steps, starting from the
    upsampled result of the previous level, and keeps its lowest-loss
    iterate.  An upsampled field that folds on the tumour mask is smoothed
    first.

    Parameters
    ----------
    moving, fixed : ScalarVolume
    organ_moving : BinaryMask, optional
        Required when ``stm`` is given.
    stm : SoftMask, optional
        Soft tumour mask on the fixed grid.
    config : RegistrationConfig, optional
    init : DisplacementField, optional
        Starting field on the coarsest level (zero by default).

    Returns
    -------
    RegistrationResult
    """
    config = config or RegistrationConfig()
    check_same_grid(moving, fixed, organ_moving, stm)
    if stm is not None and organ_moving is None:
        raise VolumeError("stm given without organ mask")
    levels = config.pyramid_levels
    try:
        movings = _pyramid(moving, levels)
        fixeds = _pyramid(fixed, levels)
        organs = _pyramid(organ_moving, levels)
        stms = _pyramid(stm, levels)
    except VolumeError as exc:
        raise VolumeError(f"pyramid_levels={levels} too deep for grid {fixed.grid.dims}: {exc}") from None

    trace: list[LossBreakdown] = []
    summaries: list[LevelSummary] = []
    comps = None
    converged = False
    for k in range(levels):
        grid = fixeds[k].grid
        if comps is None:
            if init is not None:
                check_same_grid(init, fixeds[k])
                comps = np.array(init.components)
            else:
                comps = np.zeros((3,) + grid.shape)
        else:
            comps = np.array(upsample_field(DisplacementField(prev_grid, comps), grid).components)
            comps = _repair_folds(comps, grid, stms[k], config)
        lr = config.step_size / (2.0 ** k)
        args = (movings[k], fixeds[k], stms[k], organs[k], config)
        comps, level_trace = _adam(comps, args, config, config.iterations_per_level[k], lr, trace)
        summaries.append(LevelSummary(grid.dims, config.iterations_per_level[k], lr,
                                      level_trace[0], level_trace[-1]))
        log.debug("level %d %s: total %.6g -> %.6g", k, grid.dims, level_trace[0], level_trace[-1])
        prev_grid = grid
        if k == levels - 1:
            converged = _has_converged(level_trace[:-1])
    return RegistrationResult(DisplacementField(fixed.grid, comps), trace, converged, summaries)


def _adam(comps, args, config, iterations, lr, trace):
    """Run ``iterations`` Adam steps; returns the best iterate and level totals.

    Gradients are Gaussian-smoothed (``config.gradient_sigma`` voxels)
    before the moment update.  A step that raises the total loss is undone
    and retried along the same direction with half the step size; accepted
    steps let the step size grow back towards ``lr``.  The returned totals
    are the evaluated losses (starting point first) followed by the best
    one.
    """
    b1, b2, eps = config.moment_beta1, config.moment_beta2, config.moment_eps
    m = np.zeros_like(comps)
    v = np.zeros_like(comps)
    totals = []
    cur, cur_total = comps, None
    rate = lr
    t = 0
    step = None
    for it in range(iterations + 1):
        loss, grad = evaluate(comps, *args, with_grad=it < iterations)
        if not np.isfinite(loss.total) or (grad is not None and not np.all(np.isfinite(grad))):
            raise NumericalError(f"non-finite loss at iteration {it}: {loss}", trace + [loss])
        trace.append(loss)
        totals.append(loss.total)
        if it == iterations:
            if cur_total is None or loss.total <= cur_total:
                cur, cur_total = comps, loss.total
            break
        if cur_total is None or loss.total <= cur_total:
            if cur_total is not None:
                m, v = pending
                rate = min(lr, rate * RATE_GROWTH)
            cur, cur_total = comps, loss.total
            g = grad
            if config.gradient_sigma > 0:
                g = np.stack([gaussian_filter(c, config.gradient_sigma, mode="nearest") for c in g])
            t += 1
            mt = b1 * m + (1 - b1) * g
            vt = b2 * v + (1 - b2) * g * g
            pending = (mt, vt)
            step = (mt / (1 - b1 ** t)) / (np.sqrt(vt / (1 - b2 ** t)) + eps)
        else:
            rate *= 0.5
        comps = cur - rate * step
    return cur, totals + [cur_total]


def register_stage2(moving: ScalarVolume, fixed: ScalarVolume, organ_moving: BinaryMask,
                    stm: SoftMask, config: RegistrationConfig | None = None) -> RegistrationResult:
    """Volume-preserving registration guided by a soft tumour mask."""
    if stm is None:
        raise VolumeError("stage-2 registration needs a soft tumour mask")
    if organ_moving.count == 0:
        raise VolumeError("empty organ mask")
    return register(moving, fixed, organ_moving, stm, config)
