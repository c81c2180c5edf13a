"""Differentiable voxel rendering and self-supervised viewpoint estimation."""

from .errors import VoxelViewError
from .estimator import (
    HypothesisSet,
    OptimizerConfig,
    TrainConfig,
    TrainedEstimator,
    cycle_loss,
    estimate_by_optimization,
    predict,
    select_best_head,
    train_multihead,
)
from .evalkit import (
    AlignmentTransform,
    MetricsReport,
    compute_metrics,
    constant_predictor,
    linear_align,
    procrustes_align,
    scatter_data,
)
from .geometry import (
    euler_to_vector,
    geodesic_error,
    normalize,
    vector_to_euler,
    vector_to_rotation,
    view_rotation,
    viewpoint_error,
)
from .renderer import CameraModel, RenderedImage, render, render_loss, render_loss_grad, render_view
from .volume import VoxelVolume, make_test_object, read_volume, shape_prior, write_volume

__version__ = "0.1.0"
