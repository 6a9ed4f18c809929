"""Finite-difference gradient checking shared by the unit and acceptance suites.

The objective is piecewise smooth: trilinear sampling has kinks where a
sample coordinate crosses a grid node (or the clamp bound), ``D`` has a kink
where ``D'`` crosses 1, and the determinant is clamped.  A central
difference straddling one of those is not a derivative, so such components
are detected and skipped; callers check that only a small fraction is.
"""

import numpy as np

from volreg import BinaryMask, DisplacementField, GridInfo, ScalarVolume, SoftMask
from volreg.jacobian import DET_MAX, DET_MIN, jacobian_det, organ_ratio
from volreg.warp import sampling_coords

STEP = 1e-3
RTOL = 1e-3
ATOL = 1e-6


def _smooth(rng, shape, modes=3):
    nz, ny, nx = shape
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    out = np.zeros(shape)
    for _ in range(modes):
        k = rng.uniform(0.3, 1.2, size=3)
        out += rng.uniform(0.5, 1.0) * np.sin(k[0] * x + k[1] * y + k[2] * z + rng.uniform(0, 2 * np.pi))
    return out


def random_problem(rng, n=8, fold=False):
    """Random images, organ blob, STM and smooth field on an ``n``^3 grid."""
    g = GridInfo.cube(n)
    moving = ScalarVolume(g, _smooth(rng, g.shape) + 0.05 * rng.normal(size=g.shape))
    fixed = ScalarVolume(g, _smooth(rng, g.shape))
    z, y, x = np.meshgrid(*(np.arange(n),) * 3, indexing="ij")
    c = rng.uniform(n / 2 - 1, n / 2 + 1, size=3)
    r = rng.uniform(2.2, 3.2)
    organ = BinaryMask(g, ((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2) <= r * r)
    stm = SoftMask(g, rng.uniform(size=g.shape) * organ.data)
    amp = 1.6 if fold else 0.5
    comps = np.stack([_smooth(rng, g.shape, modes=2) for _ in range(3)]) * amp
    return DisplacementField(g, comps), moving, fixed, organ, stm


def _vp_state(comps, grid, organ):
    f = DisplacementField(grid, comps)
    det = jacobian_det(f).det
    R = organ_ratio(f, organ)
    dc = np.clip(det, DET_MIN, DET_MAX)
    d = 1.0 / (dc * R)
    return np.sign(d - 1.0), (det < DET_MIN) | (det > DET_MAX)


def straddles_kink(field, index, h, organ=None, stm=None):
    """True if the +-h perturbation of ``field.components[index]`` crosses a kink."""
    i, z, y, x = index
    grid = field.grid
    c = sampling_coords(field)[i, z, y, x]
    if abs(c - np.round(c)) <= 2 * h:
        return True
    if organ is None or stm is None:
        return False
    states = []
    for s in (-h, 0.0, h):
        comps = np.array(field.components)
        comps[index] += s
        states.append(_vp_state(comps, grid, organ))
    active = stm.data > 0
    for sign, clamp in states[1:]:
        if np.any((sign != states[0][0]) & active) or np.any((clamp != states[0][1]) & active):
            return True
    return False


def central_difference(fn, field, index, h=STEP):
    plus = np.array(field.components)
    minus = np.array(field.components)
    plus[index] += h
    minus[index] -= h
    return (fn(DisplacementField(field.grid, plus)) - fn(DisplacementField(field.grid, minus))) / (2 * h)


def check_components(fn, grad, field, indices, organ=None, stm=None, h=STEP):
    """Compare ``grad`` against central differences of ``fn``.

    Returns ``(n_checked, n_skipped, failures)`` where failures lists
    ``(index, analytic, numeric)``.
    """
    checked = skipped = 0
    failures = []
    for index in indices:
        if straddles_kink(field, index, h, organ, stm):
            skipped += 1
            continue
        fd = central_difference(fn, field, index, h)
        an = grad[index]
        checked += 1
        if not (abs(an - fd) <= ATOL or abs(an - fd) <= RTOL * abs(fd)):
            failures.append((index, float(an), float(fd)))
    return checked, skipped, failures


def sample_indices(rng, shape, k):
    return [tuple(int(rng.integers(0, n)) for n in (3,) + tuple(shape)) for _ in range(k)]
