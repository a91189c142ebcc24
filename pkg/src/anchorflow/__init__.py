"""anchorflow: dense backward motion flows from sparse deformable anchors.

Motion anchors (corresponding point pairs with local affines) compose a
dense backward warping flow through softmax mask blending; a latent root
anchor and optional hierarchical intermediate anchors regularize the
anchors through affine structure priors; all parameters fit by
adaptive-moment gradient descent against a multi-scale pixel reconstruction
loss, benchmarked on synthetic articulated scenes with exact ground truth.
"""

from .errors import (AnchorFlowError, DimensionMismatch, EmptyForeground,
                     InvalidConfig, MaskNotNormalized, MissingRoot,
                     MotionOutOfFrame, NonFiniteLoss, SingularTransform,
                     TooManyLevels)
from .flow import (AnchorSet, FlowField, LatentAnchor, MaskStack,
                   anchor_flow_at, blend_flows, identity_flow,
                   rasterize_anchor_flows, softargmax_masks)
from .geometry import (Affine2, GridSpec, Point2, apply_affine, invert_affine,
                       norm_to_pixel, normalized_grid, pixel_to_norm)
from .losses import (LossReport, LossWeights, TransformRanges,
                     equivariance_loss, reconstruction_loss,
                     sample_equivariance_transform, total_loss)
from .metrics import (EvalReport, SceneEval, aggregate_report, akd_metric,
                      akd_px, epe_metric, format_table, l1_metric,
                      predict_joints)
from .fit import (FitConfig, FitState, fit_pair, gradient_check, initialize,
                  model_flow, model_masks)
from .structure import (AttentionWeights, attention_from_logits, dam_loss,
                        hdam_loss, intermediate_prior_flow, root_prior_flow,
                        root_prior_at_intermediate)
from .synth import (GroundTruth, SceneSpec, benchmark_suite, render_scene,
                    scene_interior_mask)
from .warp import (ImageGrid, bilinear_sample, downsample_pyramid,
                   sample_vectors, warp_image)

__version__ = "0.1.0"
