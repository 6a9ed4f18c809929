"""
Registering a synthetic phantom
===============================

A phantom pair is an organ-like blob, deformed by a known smooth field, with
a bright spherical tumour that is missing from the fixed image.  Plain
similarity registration lines the organs up well, but it also squeezes the
tumour away, because nothing in its loss cares about tumour volume.
"""

import sys

import numpy as np

from volreg import GridInfo, dice, full_report, generate_phantom, register, warp_mask

n = int(sys.argv[1]) if len(sys.argv) > 1 else 32

###############################################################################
# Build the pair.  ``gt_field`` is the true backward field (fixed -> moving),
# so it can be scored exactly like a registration result.

case = generate_phantom("vanishing_tumor", GridInfo.cube(n), seed=0)
print("grid", case.grid.dims)
print("organ dice before registration: %.3f" % dice(case.organ_moving, case.organ_fixed))
print("true field, organ dice: %.3f" % dice(warp_mask(case.organ_moving, case.gt_field), case.organ_fixed))

###############################################################################
# Regular mode: similarity plus smoothness over a three-level pyramid.

result = register(case.moving, case.fixed)
for level in result.levels:
    print("level %-14s loss %.4f -> %.4f" % (level.dims, level.initial_total, level.final_total))

###############################################################################
# The organ now matches, and the tumour footprint tells the other half of
# the story.

warped_tumor = warp_mask(case.tumor_moving, result.field)
print("organ dice after: %.3f" % dice(warp_mask(case.organ_moving, result.field), case.organ_fixed))
print("tumour voxels: %d in moving, %d after warping" % (case.tumor_moving.count, warped_tumor.count))

if warped_tumor.count:
    report = full_report(result.field, case.organ_moving, case.organ_fixed, case.tumor_moving, case.landmarks)
    print(report.to_json())

###############################################################################
# The displacement is in voxels; its size is comparable to the true field.

mag = np.linalg.norm(result.field.components, axis=0)
print("mean |u| %.2f voxels (true field %.2f)" % (mag.mean(), np.linalg.norm(case.gt_field.components, axis=0).mean()))
