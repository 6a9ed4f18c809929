"""
Grid-based data types and file IO.

Arrays are held as numpy arrays indexed ``[z, y, x]`` so that C-order
flattening gives the x-fastest layout used on disk
(``index = z*nx*ny + y*nx + x``).  Points and displacement components are
always ordered ``(x, y, z)``; component 0 of a displacement field is
``u_x`` and acts along the last array axis.

Files are a JSON header (``<name>.vpv.json``) next to a little-endian raw
payload.  Volumes and fields are stored as float32, masks as uint8.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Sequence

import numpy as np


class VolumeError(ValueError):
    """Raised for invalid grid objects or malformed files."""


@dataclass(frozen=True)
class GridInfo:
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(dims) != 3 or len(spacing) != 3:
            raise VolumeError("grid needs 3 dims and 3 spacings")
        if any(d < 2 for d in dims):
            raise VolumeError(f"all dims must be >= 2, got {dims}")
        if any(not math.isfinite(s) or s <= 0 for s in spacing):
            raise VolumeError(f"spacing must be positive and finite, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing_mm", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        """numpy array shape ``(nz, ny, nx)``."""
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @classmethod
    def cube(cls, n: int, spacing: float = 1.0) -> "GridInfo":
        return cls((n, n, n), (spacing, spacing, spacing))

    def contains(self, p) -> bool:
        return all(0.0 <= float(c) <= n - 1 for c, n in zip(p, self.dims))


def _frozen(arr, shape, dtype=np.float64):
    a = np.array(arr, dtype=dtype, copy=True)
    if a.size != int(np.prod(shape)):
        raise VolumeError(f"payload size mismatch: {a.size} values for shape {shape}")
    a = a.reshape(shape)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    grid: GridInfo
    data: np.ndarray

    def __post_init__(self):
        a = _frozen(self.data, self.grid.shape)
        if not np.all(np.isfinite(a)):
            raise VolumeError("volume contains non-finite values")
        object.__setattr__(self, "data", a)

    def __getitem__(self, xyz):
        x, y, z = xyz
        return self.data[z, y, x]

    def with_data(self, data) -> "ScalarVolume":
        return ScalarVolume(self.grid, data)


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel displacement ``u`` in voxel units; the sampling map is ``x + u(x)``.

    ``components`` has shape ``(3, nz, ny, nx)`` holding ``u_x, u_y, u_z``.
    """

    grid: GridInfo
    components: np.ndarray

    def __post_init__(self):
        a = _frozen(self.components, (3,) + self.grid.shape)
        if not np.all(np.isfinite(a)):
            raise VolumeError("displacement field contains non-finite values")
        object.__setattr__(self, "components", a)

    @classmethod
    def zeros(cls, grid: GridInfo) -> "DisplacementField":
        return cls(grid, np.zeros((3,) + grid.shape))

    @classmethod
    def constant(cls, grid: GridInfo, u) -> "DisplacementField":
        comps = np.empty((3,) + grid.shape)
        for i in range(3):
            comps[i] = u[i]
        return cls(grid, comps)

    def __getitem__(self, xyz):
        x, y, z = xyz
        return self.components[:, z, y, x]


@dataclass(frozen=True, eq=False)
class BinaryMask:
    grid: GridInfo
    data: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.dtype == bool:
            raw = raw.astype(np.uint8)
        if not np.all((raw == 0) | (raw == 1)):
            raise VolumeError("binary mask has non-binary values")
        object.__setattr__(self, "data", _frozen(raw, self.grid.shape, np.uint8))

    @property
    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))

    def as_bool(self) -> np.ndarray:
        return self.data.astype(bool)


@dataclass(frozen=True, eq=False)
class SoftMask:
    grid: GridInfo
    data: np.ndarray

    def __post_init__(self):
        a = _frozen(self.data, self.grid.shape)
        if not np.all(np.isfinite(a)) or a.min() < 0.0 or a.max() > 1.0:
            raise VolumeError("soft mask values must lie in [0, 1]")
        object.__setattr__(self, "data", a)

    @classmethod
    def zeros(cls, grid: GridInfo) -> "SoftMask":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_binary(cls, mask: BinaryMask) -> "SoftMask":
        return cls(mask.grid, mask.data.astype(np.float64))


def check_same_grid(*objs) -> GridInfo:
    grid = objs[0].grid
    for o in objs[1:]:
        if o is not None and o.grid.dims != grid.dims:
            raise VolumeError(f"grid mismatch: {grid.dims} vs {o.grid.dims}")
    return grid


# ---------------------------------------------------------------------------
# landmarks

@dataclass(frozen=True)
class Landmark:
    id: str
    space: str
    position: tuple[float, float, float]


@dataclass(frozen=True)
class LandmarkSet:
    entries: tuple[Landmark, ...] = dc_field(default_factory=tuple)

    def __post_init__(self):
        entries = tuple(self.entries)
        seen = {"fixed": set(), "moving": set()}
        for e in entries:
            if e.space not in seen:
                raise VolumeError(f"landmark {e.id}: unknown space {e.space!r}")
            if e.id in seen[e.space]:
                raise VolumeError(f"duplicate id {e.id!r} in {e.space} space")
            seen[e.space].add(e.id)
        unpaired = seen["fixed"] ^ seen["moving"]
        if unpaired:
            raise VolumeError(f"unpaired landmark(s): {sorted(unpaired)}")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_pairs(cls, fixed_points, moving_points, ids=None) -> "LandmarkSet":
        if ids is None:
            ids = [f"L{i + 1}" for i in range(len(fixed_points))]
        entries = []
        for i, pf, pm in zip(ids, fixed_points, moving_points):
            entries.append(Landmark(i, "fixed", tuple(float(c) for c in pf)))
            entries.append(Landmark(i, "moving", tuple(float(c) for c in pm)))
        return cls(tuple(entries))

    def pairs(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """``(id, fixed_position, moving_position)`` sorted by id."""
        fixed = {e.id: e.position for e in self.entries if e.space == "fixed"}
        moving = {e.id: e.position for e in self.entries if e.space == "moving"}
        return [(i, np.array(fixed[i]), np.array(moving[i])) for i in sorted(fixed)]

    def __len__(self):
        return len(self.entries) // 2

    def check_bounds(self, grid: GridInfo):
        for e in self.entries:
            if not grid.contains(e.position):
                raise VolumeError(f"landmark {e.id} ({e.space}) outside grid: {e.position}")


def read_landmarks(path, grid: GridInfo | None = None) -> LandmarkSet:
    """Read a ``id,space,x,y,z`` CSV; coordinates are voxel positions."""
    path = Path(path)
    if not path.exists():
        raise VolumeError(f"missing file: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["id", "space", "x", "y", "z"]:
            raise VolumeError("landmark CSV header must be id,space,x,y,z")
        entries = []
        for row in reader:
            pos = tuple(float(row[k]) for k in ("x", "y", "z"))
            entries.append(Landmark(row["id"].strip(), row["space"].strip(), pos))
    lms = LandmarkSet(tuple(entries))
    if grid is not None:
        lms.check_bounds(grid)
    return lms


def write_landmarks(lms: LandmarkSet, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "space", "x", "y", "z"])
        for e in lms.entries:
            w.writerow([e.id, e.space] + [repr(float(c)) for c in e.position])


# ---------------------------------------------------------------------------
# volume files

_KINDS = {
    ScalarVolume: ("scalar", "f32", 1),
    SoftMask: ("soft_mask", "f32", 1),
    BinaryMask: ("binary_mask", "u8", 1),
    DisplacementField: ("field", "f32", 3),
}
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _header_path(path) -> Path:
    path = Path(path)
    if path.name.endswith(".vpv.json"):
        return path
    return path.with_name(path.name + ".vpv.json")


def write_volume(obj, path) -> Path:
    """Write ``obj`` as ``<name>.vpv.json`` plus ``<name>.raw``.

    Returns the header path.  Output bytes depend only on ``obj``.
    """
    try:
        kind, dtype, channels = _KINDS[type(obj)]
    except KeyError:
        raise TypeError(f"cannot write {type(obj).__name__}") from None
    hpath = _header_path(path)
    stem = hpath.name[: -len(".vpv.json")]
    raw_name = stem + ".raw"
    payload = obj.components if channels == 3 else obj.data
    raw = np.ascontiguousarray(payload, dtype=_DTYPES[dtype]).tobytes()
    header = {
        "dims": list(obj.grid.dims),
        "spacing_mm": list(obj.grid.spacing_mm),
        "dtype": dtype,
        "channels": channels,
        "layout": "planar",
        "order": "x-fastest",
        "endian": "little",
        "data": raw_name,
        "kind": kind,
    }
    try:
        hpath.parent.mkdir(parents=True, exist_ok=True)
        (hpath.parent / raw_name).write_bytes(raw)
        hpath.write_text(json.dumps(header, indent=2) + "\n")
    except OSError as exc:
        raise VolumeError(f"unwritable path {hpath}: {exc}") from exc
    return hpath


def read_volume(path, kind: str | None = None):
    """Read a volume file back into its typed object.

    ``kind`` overrides the header's ``kind`` entry; without either, u8 files
    load as :class:`BinaryMask`, 3-channel files as
    :class:`DisplacementField` and everything else as :class:`ScalarVolume`.
    """
    hpath = _header_path(path)
    if not hpath.exists():
        raise VolumeError(f"missing file: {hpath}")
    header = json.loads(hpath.read_text())
    try:
        grid = GridInfo(tuple(header["dims"]), tuple(header.get("spacing_mm", (1, 1, 1))))
        dtype = header["dtype"]
        channels = int(header.get("channels", 1))
        raw_path = hpath.parent / header["data"]
    except KeyError as exc:
        raise VolumeError(f"header missing key {exc}") from None
    if dtype not in _DTYPES:
        raise VolumeError(f"unsupported dtype {dtype!r}")
    if header.get("endian", "little") != "little" or header.get("order", "x-fastest") != "x-fastest":
        raise VolumeError("only little-endian x-fastest payloads are supported")
    if not raw_path.exists():
        raise VolumeError(f"missing file: {raw_path}")
    raw = raw_path.read_bytes()
    expected = channels * grid.size * _DTYPES[dtype].itemsize
    if len(raw) != expected:
        raise VolumeError(f"payload size mismatch: {len(raw)} bytes, expected {expected}")
    values = np.frombuffer(raw, dtype=_DTYPES[dtype])
    if dtype == "f32" and not np.all(np.isfinite(values)):
        raise VolumeError("NaN or infinite value in payload")

    kind = kind or header.get("kind")
    if kind is None:
        kind = "binary_mask" if dtype == "u8" else ("field" if channels == 3 else "scalar")
    if kind == "field":
        if channels != 3:
            raise VolumeError("displacement field needs 3 channels")
        return DisplacementField(grid, values.astype(np.float64).reshape((3,) + grid.shape))
    if channels != 1:
        raise VolumeError(f"{kind} needs 1 channel")
    if kind == "binary_mask":
        return BinaryMask(grid, values.reshape(grid.shape))
    if kind == "soft_mask":
        return SoftMask(grid, values.astype(np.float64))
    if kind == "scalar":
        return ScalarVolume(grid, values.astype(np.float64))
    raise VolumeError(f"unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class RegistrationConfig:
    """Tunables for registration and mask estimation.

    Loss weights default to similarity 1, volume-preserving 0.1 and
    smoothness 0.1.  ``iterations_per_level`` runs coarsest level first.
    ``transform`` is ``"sigmoid"``, ``"sin"`` or ``"hard:<t>"``.
    ``gradient_sigma`` (voxels) smooths each gradient before the moment
    update; 0 disables it.
    """

    alpha_vp: float = 0.1
    alpha_reg: float = 0.1
    sim_weight: float = 1.0
    pyramid_levels: int = 3
    iterations_per_level: tuple[int, ...] = (200, 150, 100)
    step_size: float = 0.5
    moment_beta1: float = 0.9
    moment_beta2: float = 0.999
    moment_eps: float = 1e-8
    gradient_sigma: float = 1.0
    transform: str = "sigmoid"
    bilateral_sigma_space: float = 2.0
    bilateral_sigma_range: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "iterations_per_level", tuple(int(i) for i in self.iterations_per_level))
        if self.alpha_vp < 0 or self.alpha_reg < 0:
            raise VolumeError("loss weights must be >= 0")
        if self.sim_weight <= 0 or self.step_size <= 0:
            raise VolumeError("sim_weight and step_size must be > 0")
        if self.pyramid_levels < 1:
            raise VolumeError("pyramid_levels must be >= 1")
        if len(self.iterations_per_level) != self.pyramid_levels:
            raise VolumeError("iterations_per_level length must equal pyramid_levels")
        if any(i < 0 for i in self.iterations_per_level):
            raise VolumeError("iteration counts must be non-negative")
        if not (0 <= self.moment_beta1 < 1 and 0 <= self.moment_beta2 < 1):
            raise VolumeError("moment betas must lie in [0, 1)")
        if self.gradient_sigma < 0:
            raise VolumeError("gradient_sigma must be >= 0")
        if self.bilateral_sigma_space <= 0 or self.bilateral_sigma_range <= 0:
            raise VolumeError("bilateral sigmas must be > 0")
        parse_transform(self.transform)

    def replace(self, **changes) -> "RegistrationConfig":
        d = self.to_dict()
        d.update(changes)
        return RegistrationConfig(**d)

    def to_dict(self) -> dict:
        return {
            "alpha_vp": self.alpha_vp,
            "alpha_reg": self.alpha_reg,
            "sim_weight": self.sim_weight,
            "pyramid_levels": self.pyramid_levels,
            "iterations_per_level": list(self.iterations_per_level),
            "step_size": self.step_size,
            "moment_beta1": self.moment_beta1,
            "moment_beta2": self.moment_beta2,
            "moment_eps": self.moment_eps,
            "gradient_sigma": self.gradient_sigma,
            "transform": self.transform,
            "bilateral_sigma_space": self.bilateral_sigma_space,
            "bilateral_sigma_range": self.bilateral_sigma_range,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise VolumeError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def parse_transform(spec: str) -> tuple[str, float | None]:
    """``"sigmoid"`` -> ``("sigmoid", None)``, ``"hard:1.5"`` -> ``("hard", 1.5)``."""
    if spec in ("sigmoid", "sin"):
        return spec, None
    if spec.startswith("hard:"):
        try:
            t = float(spec[5:])
        except ValueError:
            raise VolumeError(f"bad hard threshold in {spec!r}") from None
        if not t > 0:
            raise VolumeError("hard threshold must be > 0")
        return "hard", t
    raise VolumeError(f"unknown transform {spec!r}")


def positions_to_index(grid: GridInfo, points: Sequence) -> np.ndarray:
    """Linear x-fastest indices for integer voxel points ``(x, y, z)``."""
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 3)
    nx, ny, _ = grid.dims
    return pts[:, 2] * nx * ny + pts[:, 1] * nx + pts[:, 0]


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
