"""Tumour volume-preserving deformable registration of 3D volumes."""

__version__ = "0.1.0"

from .volume import (BinaryMask, DisplacementField, GridInfo, Landmark,  # noqa: E402
                     LandmarkSet, RegistrationConfig, ScalarVolume, SoftMask,
                     VolumeError, read_landmarks, read_volume, write_landmarks,
                     write_volume)
from .imageops import bilateral_filter, downsample, upsample_field  # noqa: E402
from .warp import map_point, warp_mask, warp_scalar  # noqa: E402
from .jacobian import (JacobianField, distance_field, folding_stats,  # noqa: E402
                       jacobian_det)
from .objective import (LossBreakdown, similarity, smoothness,  # noqa: E402
                        total_gradient, total_loss, vp_loss)
from .registration import (NumericalError, RegistrationResult,  # noqa: E402
                           register, register_stage2)
from .stage1 import (estimate_soft_mask, propagate_organ_mask,  # noqa: E402
                     transform_hard, transform_sigmoid, transform_sin)
from .metrics import (MetricsReport, dice, full_report,  # noqa: E402
                      landmark_distance, stsr, tsr)
from .synth import PhantomCase, generate_phantom, noisy_mask  # noqa: E402
