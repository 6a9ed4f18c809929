"""
Estimating a soft tumour mask from volume change
================================================

Where a registration field shrinks or grows tissue much more than the organ
as a whole, something other than anatomy changed.  The estimate compares
each voxel's volume change with the organ's and turns the mismatch into a
weight in ``[0, 1]``.  An edge-aligning pass on a bilateral-filtered image
runs first, so that organ-boundary mismatch is not mistaken for a tumour.
"""

import sys

import numpy as np
from scipy.ndimage import binary_erosion

from volreg import BinaryMask, GridInfo, dice, estimate_soft_mask, generate_phantom

n = int(sys.argv[1]) if len(sys.argv) > 1 else 32

###############################################################################
# A phantom with an extra displacement on the organ rim makes the boundary
# effect visible.

case = generate_phantom("vanishing_tumor", GridInfo.cube(n), seed=1, rim_amplitude=2.0)
est = estimate_soft_mask(case.moving, case.fixed, case.organ_moving)
stm = est.stm.data

print("organ volume ratio R = %.3f" % est.organ_ratio)
print("D range %.2f .. %.2f" % (est.distance.data.min(), est.distance.data.max()))

###############################################################################
# The mask should be high on the (true) tumour site and low elsewhere.

site = case.tumor_fixed.as_bool()
rest = case.organ_fixed.as_bool() & ~site
print("mean STM on tumour site %.3f, on the rest of the organ %.3f" % (stm[site].mean(), stm[rest].mean()))
hard = BinaryMask(case.grid, (stm >= 0.5).astype(np.uint8))
print("thresholded mask vs tumour: dice %.3f" % (dice(hard, case.tumor_fixed) if hard.count else 0.0))

###############################################################################
# Without the edge pass the organ rim lights up.


def rind(mask, organ):
    o = organ.as_bool()
    return mask.data[o & ~binary_erosion(o, iterations=2)].mean()


raw = estimate_soft_mask(case.moving, case.fixed, case.organ_moving, skip_prereg=True)
print("mean STM on the 2-voxel rind: %.3f with pre-registration, %.3f without"
      % (rind(est.stm, est.organ_prereg), rind(raw.stm, raw.organ_prereg)))
