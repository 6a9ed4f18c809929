"""
Volume-preserving registration with different masks
===================================================

The second stage reuses the soft mask in two places: it removes the masked
voxels from the similarity numerator, and it penalises volume change there
relative to the organ.  This script runs that stage with the estimated mask,
the true tumour site, a corrupted copy of it and the whole organ, and
compares tumour size ratios.
"""

import sys

from volreg import (GridInfo, SoftMask, dice, estimate_soft_mask, generate_phantom, noisy_mask, register,
                    register_stage2, stsr, warp_mask)

n = int(sys.argv[1]) if len(sys.argv) > 1 else 32
case = generate_phantom("vanishing_tumor", GridInfo.cube(n), seed=2)


def score(field):
    tw = warp_mask(case.tumor_moving, field)
    ow = warp_mask(case.organ_moving, field)
    s = stsr(case.tumor_moving, case.organ_moving, tw, ow) if tw.count else float("inf")
    return s, dice(ow, case.organ_fixed), tw.count


###############################################################################
# Candidate masks, all on the fixed grid.

masks = {
    "estimated": estimate_soft_mask(case.moving, case.fixed, case.organ_moving).stm,
    "true site": SoftMask.from_binary(case.tumor_fixed),
    "noisy 0.4": SoftMask.from_binary(noisy_mask(case.tumor_fixed, case.organ_fixed, 0.4, seed=3)),
    "whole organ": SoftMask.from_binary(case.organ_fixed),
}

###############################################################################
# Regular mode first, for reference.  STSR is 1 when the tumour keeps its
# share of the organ and ``inf`` when it disappears altogether.

rows = [("regular",) + score(register(case.moving, case.fixed).field)]
for name, stm in masks.items():
    rows.append((name,) + score(register_stage2(case.moving, case.fixed, case.organ_moving, stm).field))

print("%-12s %10s %8s %8s" % ("mask", "stsr", "dice", "tumour"))
for name, s, d, count in rows:
    print("%-12s %10.4g %8.3f %8d" % (name, s, d, count))
print("moving tumour: %d voxels" % case.tumor_moving.count)
