"""Evaluation metrics and the JSON metrics report."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from . import __version__
from .jacobian import folding_stats, jacobian_det
from .volume import (BinaryMask, DisplacementField, LandmarkSet, VolumeError,
                     check_same_grid)
from .warp import map_point, warp_mask

REPORT_KEYS = ("dice_organ", "landmark_distance_mm", "folding_pct", "jacobian_std",
               "tsr_moving", "tsr_warped", "stsr")


def dice(a: BinaryMask, b: BinaryMask) -> float:
    check_same_grid(a, b)
    sa, sb = a.count, b.count
    if sa + sb == 0:
        raise VolumeError("dice undefined for two empty masks")
    inter = int(np.count_nonzero(a.as_bool() & b.as_bool()))
    return 2.0 * inter / (sa + sb)


def tsr(tumor: BinaryMask, organ: BinaryMask) -> float:
    """Tumour size ratio ``|T| / |O|`` from voxel counts."""
    check_same_grid(tumor, organ)
    if organ.count == 0:
        raise VolumeError("undefined TSR: empty organ")
    if tumor.count == 0:
        raise VolumeError("undefined TSR: empty tumor")
    if np.any(tumor.as_bool() & ~organ.as_bool()):
        warnings.warn("tumor mask extends outside organ mask", stacklevel=2)
    return tumor.count / organ.count


def stsr_from_ratios(tsr_m: float, tsr_w: float) -> float:
    return max(tsr_m / tsr_w, tsr_w / tsr_m) ** 2


def stsr(tumor_m: BinaryMask, organ_m: BinaryMask, tumor_w: BinaryMask, organ_w: BinaryMask) -> float:
    """Squared worst-direction change of the tumour size ratio (``>= 1``)."""
    return stsr_from_ratios(tsr(tumor_m, organ_m), tsr(tumor_w, organ_w))


def landmark_distance(lms: LandmarkSet, field: DisplacementField, spacing_mm=None) -> float:
    """Mean mm distance between mapped fixed landmarks and their moving counterparts."""
    pairs = lms.pairs()
    if not pairs:
        raise VolumeError("empty landmark set")
    spacing = np.asarray(spacing_mm if spacing_mm is not None else field.grid.spacing_mm, dtype=np.float64)
    dists = [np.linalg.norm((map_point(field, pf) - pm) * spacing) for _, pf, pm in pairs]
    return float(np.mean(dists))


@dataclass
class MetricsReport:
    dice_organ: float
    landmark_distance_mm: float | None
    folding_pct: float
    jacobian_std: float
    tsr_moving: float
    tsr_warped: float
    stsr: float
    config: dict = dc_field(default_factory=dict)
    version: str = __version__

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))


def full_report(field: DisplacementField, organ_moving: BinaryMask, organ_fixed: BinaryMask,
                tumor_moving: BinaryMask, landmarks: LandmarkSet | None = None,
                config: dict | None = None) -> MetricsReport:
    """All evaluation metrics for one registration result.

    Warped masks are transported through ``field`` with the
    interpolate-then-threshold rule.  ``landmark_distance_mm`` is ``None``
    when no landmarks are given.
    """
    check_same_grid(field, organ_moving, organ_fixed, tumor_moving)
    organ_w = warp_mask(organ_moving, field)
    tumor_w = warp_mask(tumor_moving, field)
    t_m = tsr(tumor_moving, organ_moving)
    t_w = tsr(tumor_w, organ_w)
    fold, std = folding_stats(jacobian_det(field))
    lm = landmark_distance(landmarks, field) if landmarks is not None and len(landmarks) else None
    return MetricsReport(
        dice_organ=dice(organ_w, organ_fixed),
        landmark_distance_mm=lm,
        folding_pct=fold,
        jacobian_std=std,
        tsr_moving=t_m,
        tsr_warped=t_w,
        stsr=stsr_from_ratios(t_m, t_w),
        config=dict(config or {}),
    )
