"""Dense depth estimation from multi-view images by optimizing a sparse point
set whose splatted, diffused depth map minimizes an RGB reprojection loss.

The pipeline: points are splatted differentiably into dense label and weight
images (`diffsplat.splat`), diffused into a depth map by a screened-Poisson
solve (`diffsplat.diffusion`), scored against the other views
(`diffsplat.loss`), and refined by alternating Adam on point depths,
positions, log-weights, and the smoothness field (`diffsplat.optim`).
`diffsplat.cli` exposes the pipeline as a command-line tool.
"""

from .diffusion import (
    AdjointGradients, DiffusionSystem, SingularSystemError, SmoothnessField,
    SolveError, assemble, solve, solve_adjoint,
)
from .loss import (
    FeatureTransform, LossBreakdown, LossConfig, LossError, WarpResult,
    metrics, occlusion_mask, reprojection_error, scale_fit, smoothness_term,
    ssim_term, supervised_loss, total_loss, warp,
)
from .optim import (
    NumericError, ParamState, PipelineConfig, Schedule, adam_step,
    augment_points, forward, forward_backward, init_state, run,
)
from .scene_io import (
    CameraMode, CameraModel, MultiViewSet, Point, PointSet, SceneIOError, View,
    load_multiview, load_points, read_pfm, write_depth, write_metrics, write_pfm,
)
from .splat import (
    PointGradients, SplatConfig, SplatError, SplatImages, alpha, calibrate_rho,
    label_single, render, render_adjoint, transmittance_point, weight_single,
)

__version__ = "0.1.0"
