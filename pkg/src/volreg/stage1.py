"""Unsupervised soft tumour-mask estimation from volume-change analysis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .imageops import bilateral_filter
from .jacobian import distance_field
from .registration import register
from .volume import (BinaryMask, DisplacementField, RegistrationConfig,
                     ScalarVolume, SoftMask, VolumeError, parse_transform)
from .warp import warp_mask, warp_scalar

SIGMOID_PIVOT = 1.5
SIGMOID_GAIN = 5.0
# the edge-alignment pass is stiffer than the main one so that it matches
# organ boundaries without also absorbing small interior structures
PREREG_REG_FACTOR = 3.0


def transform_sigmoid(D: ScalarVolume) -> SoftMask:
    """``1 / (1 + exp(-5 (D - 1.5)))``."""
    return SoftMask(D.grid, expit(SIGMOID_GAIN * (D.data - SIGMOID_PIVOT)))


def transform_sin(D: ScalarVolume) -> SoftMask:
    """``0.5 sin(pi (D - 1.5)) + 0.5`` with ``D`` clamped to ``[1, 2]``."""
    d = np.clip(D.data, 1.0, 2.0)
    return SoftMask(D.grid, np.clip(0.5 * np.sin(np.pi * (d - 1.5)) + 0.5, 0.0, 1.0))


def transform_hard(D: ScalarVolume, t: float) -> SoftMask:
    """Binary-valued mask, 1 where ``D >= t``."""
    if not t > 0:
        raise VolumeError("hard threshold must be > 0")
    return SoftMask(D.grid, (D.data >= t).astype(np.float64))


def apply_transform(D: ScalarVolume, spec: str = "sigmoid") -> SoftMask:
    name, t = parse_transform(spec)
    if name == "sigmoid":
        return transform_sigmoid(D)
    if name == "sin":
        return transform_sin(D)
    return transform_hard(D, t)


@dataclass
class MaskEstimate:
    """Outputs of the estimation pipeline.

    Unpacks as ``stm, prereg_field = estimate_soft_mask(...)``.
    """

    stm: SoftMask
    prereg_field: DisplacementField
    field: DisplacementField
    distance: ScalarVolume
    organ_ratio: float
    organ_prereg: BinaryMask

    def __iter__(self):
        yield self.stm
        yield self.prereg_field


def estimate_soft_mask(moving: ScalarVolume, fixed: ScalarVolume, organ_moving: BinaryMask,
                       config: RegistrationConfig | None = None, skip_prereg: bool = False,
                       prereg_config: RegistrationConfig | None = None) -> MaskEstimate:
    """Estimate a soft tumour mask on the fixed grid.

    The moving image is first bilateral-filtered and registered to the fixed
    image so that organ edges line up; the unfiltered moving image and its
    organ mask are carried through that field.  A second similarity-only
    registration then measures the remaining, interior volume change, which
    is turned into ``D`` and mapped to ``[0, 1]`` by the configured
    transform.  Voxels outside the (pre-registered) organ are set to 0.

    ``skip_prereg`` omits the edge-alignment pass.  ``prereg_config``
    overrides the configuration of that pass, which by default is
    ``config`` with ``alpha_reg`` scaled by ``PREREG_REG_FACTOR``.
    """
    config = config or RegistrationConfig()
    if organ_moving.count == 0:
        raise VolumeError("empty organ mask")
    if skip_prereg:
        prereg = DisplacementField.zeros(fixed.grid)
        moving1, organ1 = moving, organ_moving
    else:
        filtered = bilateral_filter(moving, config.bilateral_sigma_space, config.bilateral_sigma_range)
        if prereg_config is None:
            prereg_config = config.replace(alpha_reg=PREREG_REG_FACTOR * config.alpha_reg)
        prereg = register(filtered, fixed, config=prereg_config).field
        moving1 = warp_scalar(moving, prereg)
        organ1 = warp_mask(organ_moving, prereg)
        if organ1.count == 0:
            raise VolumeError("pre-registration emptied the organ mask")
    field = register(moving1, fixed, config=config).field
    D, ratio = distance_field(field, organ1)
    stm = apply_transform(D, config.transform)
    stm = SoftMask(stm.grid, stm.data * organ1.data)
    return MaskEstimate(stm, prereg, field, D, ratio, organ1)


def propagate_organ_mask(reference: ScalarVolume, reference_organ: BinaryMask, moving: ScalarVolume,
                         config: RegistrationConfig | None = None) -> BinaryMask:
    """Transfer an atlas organ segmentation onto ``moving`` by registration."""
    if reference_organ.count == 0:
        raise VolumeError("empty reference organ mask")
    field = register(reference, moving, config=config or RegistrationConfig()).field
    return warp_mask(reference_organ, field)
