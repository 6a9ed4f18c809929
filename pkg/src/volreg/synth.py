"""
Synthetic organ/tumour phantoms with analytic ground truth.

All randomness comes from a SplitMix64 counter generator so that a seed
produces the same case on every platform and numpy version::

    z = seed + (i + 1) * 0x9E3779B97F4A7C15          (mod 2**64)
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out_i = z ^ (z >> 31)

Uniform floats take the top 53 bits: ``(out >> 11) * 2**-53``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import (BinaryMask, DisplacementField, GridInfo, LandmarkSet,
                     ScalarVolume, VolumeError, ensure_dir, read_landmarks,
                     read_volume, write_landmarks, write_volume)
from .warp import identity_coords

GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
MASK64 = (1 << 64) - 1

SCENARIOS = ("vanishing_tumor", "shrinking_tumor", "matched_tumor")

BACKGROUND = 0.1
ORGAN = 0.6
TUMOR = 0.9
TEXTURE_AMPLITUDE = 0.04
GLOBAL_SCALE = 1.1
PERTURBATION = 1.7  # per component; vector norm stays below 3 voxels
EDGE_WIDTH = 0.75


def splitmix64(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """``n`` consecutive SplitMix64 outputs (uint64) starting at counter ``offset``."""
    with np.errstate(over="ignore"):
        i = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
        z = np.uint64(seed & MASK64) + i * np.uint64(GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
        return z ^ (z >> np.uint64(31))


def uniform(seed: int, n: int, offset: int = 0) -> np.ndarray:
    return (splitmix64(seed, n, offset) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


class _Stream:
    """Sequential draws from one seed."""

    def __init__(self, seed: int):
        self.seed = seed
        self.pos = 0

    def uniform(self, n=None, lo=0.0, hi=1.0):
        k = 1 if n is None else n
        u = uniform(self.seed, k, self.pos)
        self.pos += k
        u = lo + (hi - lo) * u
        return float(u[0]) if n is None else u

    def permutation(self, n: int) -> np.ndarray:
        keys = splitmix64(self.seed, n, self.pos)
        self.pos += n
        return np.argsort(keys, kind="stable")


# ---------------------------------------------------------------------------
# analytic model

@dataclass(frozen=True)
class PhantomModel:
    """Continuous description of a phantom; all lengths in voxels."""

    n: tuple[int, int, int]
    organ_center: np.ndarray
    organ_axes: np.ndarray
    tumor_center: np.ndarray
    tumor_radius: float
    texture_phase: np.ndarray
    warp_phase: np.ndarray
    warp_freq: np.ndarray
    scale: float = GLOBAL_SCALE
    perturbation: float = PERTURBATION
    rim_amplitude: float = 0.0
    rim_phase: float = 0.0

    def organ_level(self, p):
        """``< 1`` inside the organ ellipsoid (``p`` in moving space)."""
        shape = (3,) + (1,) * (p.ndim - 1)
        q = (p - self.organ_center.reshape(shape)) / self.organ_axes.reshape(shape)
        return np.sqrt((q * q).sum(axis=0))

    def organ_sd(self, p):
        """Approximate signed distance (voxels) to the organ surface."""
        return (self.organ_level(p) - 1.0) * float(np.min(self.organ_axes))

    def tumor_sd(self, p, radius=None):
        r = self.tumor_radius if radius is None else radius
        d = p - self.tumor_center.reshape((3,) + (1,) * (p.ndim - 1))
        return np.sqrt((d * d).sum(axis=0)) - r

    def texture(self, p):
        n = np.asarray(self.n, dtype=np.float64).reshape((3,) + (1,) * (p.ndim - 1))
        q = 2.0 * np.pi * p / n
        ph = self.texture_phase
        return TEXTURE_AMPLITUDE * (np.sin(2 * q[0] + ph[0]) * np.cos(q[1] + ph[1])
                                    + np.sin(2 * q[1] + ph[2]) * np.cos(q[2] + ph[3])
                                    + np.sin(2 * q[2] + ph[4]) * np.cos(q[0] + ph[5])) / 3.0

    def intensity(self, p, tumor_radius=None):
        """Image value at moving-space points ``p`` (``(3, ...)``)."""
        e_o = 0.5 * (1.0 - np.tanh(self.organ_sd(p) / EDGE_WIDTH))
        tissue = ORGAN + self.texture(p)
        if tumor_radius is None or tumor_radius > 0:
            e_t = 0.5 * (1.0 - np.tanh(self.tumor_sd(p, tumor_radius) / EDGE_WIDTH))
            tissue = tissue * (1.0 - e_t) + TUMOR * e_t
        return BACKGROUND * (1.0 - e_o) + tissue * e_o

    def psi(self, x):
        """Backward map fixed -> moving at fixed-space points ``x``."""
        shape = (3,) + (1,) * (x.ndim - 1)
        c = self.organ_center.reshape(shape)
        n = np.asarray(self.n, dtype=np.float64).reshape(shape)
        q = 2.0 * np.pi * x / n
        out = c + (x - c) / self.scale
        f, ph = self.warp_freq, self.warp_phase
        pert = np.stack([
            np.sin(f[0] * q[1] + ph[0]) * np.cos(f[1] * q[2] + ph[1]),
            np.sin(f[2] * q[2] + ph[2]) * np.cos(f[3] * q[0] + ph[3]),
            np.sin(f[4] * q[0] + ph[4]) * np.cos(f[5] * q[1] + ph[5]),
        ])
        out = out + self.perturbation * pert
        if self.rim_amplitude:
            out = out + self._rim(x)
        return out

    def _rim(self, x):
        # radial push localised on the organ surface, varying with angle
        shape = (3,) + (1,) * (x.ndim - 1)
        c = self.organ_center.reshape(shape)
        d = (x - c) / self.organ_axes.reshape(shape)
        r = np.sqrt((d * d).sum(axis=0)) + 1e-12
        sd = (r * self.scale - 1.0) * float(np.min(self.organ_axes))
        theta = np.arctan2(d[1], d[0])
        phi = np.arccos(np.clip(d[2] / r, -1, 1))
        bump = self.rim_amplitude * np.exp(-(sd / 2.5) ** 2) * np.cos(3 * theta + self.rim_phase) * np.sin(phi) ** 2
        return bump * d / r


@dataclass
class PhantomCase:
    moving: ScalarVolume
    fixed: ScalarVolume
    organ_moving: BinaryMask
    organ_fixed: BinaryMask
    tumor_moving: BinaryMask
    tumor_fixed: BinaryMask
    landmarks: LandmarkSet
    gt_field: DisplacementField | None
    scenario: str
    seed: int = 0

    @property
    def grid(self) -> GridInfo:
        return self.fixed.grid

    def save(self, directory) -> Path:
        """Write every volume, the landmark CSV and ``case.json``."""
        d = ensure_dir(directory)
        files = {}
        for name in ("moving", "fixed", "organ_moving", "organ_fixed", "tumor_moving", "tumor_fixed", "gt_field"):
            obj = getattr(self, name)
            if obj is not None:
                write_volume(obj, d / f"{name}.vpv.json")
                files[name] = f"{name}.vpv.json"
        write_landmarks(self.landmarks, d / "landmarks.csv")
        files["landmarks"] = "landmarks.csv"
        manifest = {"scenario": self.scenario, "seed": self.seed, "dims": list(self.grid.dims),
                    "spacing_mm": list(self.grid.spacing_mm), "files": files}
        (d / "case.json").write_text(json.dumps(manifest, indent=2) + "\n")
        return d

    @classmethod
    def load(cls, directory) -> "PhantomCase":
        d = Path(directory)
        manifest_path = d / "case.json"
        if not manifest_path.exists():
            raise VolumeError(f"missing file: {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        files = manifest["files"]
        vols = {k: read_volume(d / v) for k, v in files.items() if k != "landmarks"}
        return cls(
            moving=vols["moving"], fixed=vols["fixed"],
            organ_moving=vols["organ_moving"], organ_fixed=vols["organ_fixed"],
            tumor_moving=vols["tumor_moving"], tumor_fixed=vols["tumor_fixed"],
            landmarks=read_landmarks(d / files["landmarks"]),
            gt_field=vols.get("gt_field"), scenario=manifest["scenario"], seed=manifest.get("seed", 0),
        )


def _fibonacci_directions(k: int, rng: _Stream) -> np.ndarray:
    golden = math.pi * (3.0 - math.sqrt(5.0))
    rot = rng.uniform(lo=0.0, hi=2 * math.pi)
    dirs = []
    for i in range(k):
        z = 1.0 - 2.0 * (i + 0.5) / k
        r = math.sqrt(1.0 - z * z)
        a = golden * i + rot
        dirs.append((r * math.cos(a), r * math.sin(a), z))
    return np.array(dirs)


def build_model(grid: GridInfo, seed: int, rim_amplitude: float = 0.0) -> PhantomModel:
    if min(grid.dims) < 32:
        raise VolumeError("phantoms need a grid of at least 32 voxels per axis")
    rng = _Stream(seed)
    n = np.asarray(grid.dims, dtype=np.float64)
    s = n / 64.0
    centre = (n - 1) / 2.0 + rng.uniform(3, -1.0, 1.0) * s
    axes = np.array([20.0, 16.0, 14.0]) * s * (1.0 + 0.05 * rng.uniform(3, -1.0, 1.0))
    radius = 5.0 * float(np.min(s)) * (1.0 + 0.1 * rng.uniform(lo=-1.0, hi=1.0))
    margin = 3.0 * float(np.min(s))
    model_args = dict(n=tuple(grid.dims), organ_center=centre, organ_axes=axes,
                      texture_phase=rng.uniform(6, 0.0, 2 * math.pi),
                      warp_phase=rng.uniform(6, 0.0, 2 * math.pi),
                      warp_freq=np.ones(6), rim_amplitude=rim_amplitude,
                      rim_phase=rng.uniform(lo=0.0, hi=2 * math.pi))

    probe = _fibonacci_directions(64, _Stream(seed ^ 0x5A5A))
    tumor_centre = None
    for _ in range(100):
        direction = rng.uniform(3, -1.0, 1.0)
        direction /= np.linalg.norm(direction) + 1e-12
        frac = rng.uniform(lo=0.2, hi=0.55)
        cand = centre + frac * axes * direction
        pts = cand[:, None] + (radius + margin) * probe.T
        model = PhantomModel(tumor_center=cand, tumor_radius=radius, **model_args)
        if np.all(model.organ_level(pts) < 1.0):
            tumor_centre = cand
            break
    if tumor_centre is None:
        raise VolumeError("tumor does not fit inside organ")
    return PhantomModel(tumor_center=tumor_centre, tumor_radius=radius, **model_args)


def _landmarks(model: PhantomModel, grid: GridInfo, rng: _Stream) -> LandmarkSet:
    fixed_pts = []
    centre = model.organ_center
    hi = np.asarray(grid.dims, dtype=np.float64) - 1.0
    for d in _fibonacci_directions(10, rng):
        # bisect along the ray for the fixed-space surface level(psi(x)) == 1
        lo_t, hi_t = 0.0, float(np.max(model.organ_axes)) * 1.6
        for _ in range(60):
            mid = 0.5 * (lo_t + hi_t)
            p = (centre + mid * d).reshape(3, 1)
            if model.organ_level(model.psi(p))[0] < 1.0:
                lo_t = mid
            else:
                hi_t = mid
        fixed_pts.append(np.clip(centre + lo_t * d, 0.0, hi))
    step = 0.35 * model.organ_axes
    for sx in (-1, 1):
        for sy in (-1, 1):
            for sz in (-1, 1):
                fixed_pts.append(centre + step * np.array([sx, sy, sz]) * model.scale)
    fixed_pts.append(centre.copy())
    fixed_pts.append(centre + np.array([0.0, 0.0, 0.6 * model.organ_axes[2]]) * model.scale)
    fixed_pts = np.array(fixed_pts)
    moving_pts = model.psi(fixed_pts.T).T
    moving_pts = np.clip(moving_pts, 0.0, hi)
    return LandmarkSet.from_pairs(fixed_pts, moving_pts)


def generate_phantom(scenario: str, grid: GridInfo | None = None, seed: int = 0,
                     rim_amplitude: float = 0.0) -> PhantomCase:
    """Build a pre-aligned moving/fixed pair with masks, landmarks and true field.

    Parameters
    ----------
    scenario : {"vanishing_tumor", "shrinking_tumor", "matched_tumor"}
        What happens to the tumour in the fixed image: removed (its site is
        filled with organ texture), half radius, or unchanged.
    grid : GridInfo, optional
        Defaults to 64^3 at 1 mm.
    seed : int
    rim_amplitude : float
        Extra radial displacement (voxels) concentrated on the organ
        surface; gives the "boundary-mismatch" variant.

    Notes
    -----
    ``tumor_fixed`` is the tumour footprint on the fixed grid.  In the
    vanishing scenario the fixed image has no tumour, so it marks the site
    the moving tumour corresponds to under the true field.
    """
    if scenario not in SCENARIOS:
        raise VolumeError(f"unknown scenario {scenario!r}")
    grid = grid or GridInfo.cube(64)
    model = build_model(grid, seed, rim_amplitude)
    x = identity_coords(grid)
    psi = model.psi(x)

    fixed_radius = {"vanishing_tumor": 0.0, "shrinking_tumor": 0.5 * model.tumor_radius,
                    "matched_tumor": model.tumor_radius}[scenario]
    moving = ScalarVolume(grid, model.intensity(x))
    fixed = ScalarVolume(grid, model.intensity(psi, tumor_radius=fixed_radius))
    organ_m = model.organ_sd(x) <= 0
    organ_f = model.organ_sd(psi) <= 0
    tumor_m = model.tumor_sd(x) <= 0
    site_radius = fixed_radius if fixed_radius > 0 else model.tumor_radius
    tumor_f = (model.tumor_sd(psi, site_radius) <= 0) & organ_f
    gt = DisplacementField(grid, psi - x)
    lms = _landmarks(model, grid, _Stream(seed ^ 0xC0FFEE))
    lms.check_bounds(grid)
    return PhantomCase(moving, fixed, BinaryMask(grid, organ_m), BinaryMask(grid, organ_f),
                       BinaryMask(grid, tumor_m & organ_m), BinaryMask(grid, tumor_f),
                       lms, gt, scenario, seed)


def noisy_mask(gt_tumor: BinaryMask, organ: BinaryMask, target_dice: float, seed: int = 0) -> BinaryMask:
    """Random corruption of a tumour mask with a prescribed Dice to the original.

    Keeps ``round(target * |T|)`` randomly chosen tumour voxels and adds as
    many random organ voxels from outside the tumour as were dropped, so the
    result has ``|T|`` voxels and ``Dice = kept / |T|``.  Feasible when the
    organ has at least ``(1 - target) * |T|`` non-tumour voxels.
    """
    if not 0.0 < target_dice <= 1.0:
        raise VolumeError("target dice must lie in (0, 1]")
    t = gt_tumor.as_bool()
    o = organ.as_bool()
    n_t = int(t.sum())
    pool = t & o
    if n_t == 0:
        raise VolumeError("empty tumor mask")
    if target_dice == 1.0:
        return BinaryMask(gt_tumor.grid, gt_tumor.data)
    keep = int(round(target_dice * n_t))
    add = n_t - keep
    t_idx = np.flatnonzero(pool.ravel())
    if len(t_idx) < keep:
        raise VolumeError(f"infeasible target dice {target_dice}: tumor lies outside organ")
    o_idx = np.flatnonzero((o & ~t).ravel())
    if len(o_idx) < add:
        raise VolumeError(f"infeasible target dice {target_dice}: organ too small")
    rng = _Stream(seed)
    chosen = np.concatenate([t_idx[rng.permutation(len(t_idx))[:keep]], o_idx[rng.permutation(len(o_idx))[:add]]])
    flat = np.zeros(t.size, dtype=np.uint8)
    flat[chosen] = 1
    return BinaryMask(gt_tumor.grid, flat.reshape(t.shape))
