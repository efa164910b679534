"""cuboidfit: abstract 3D point clouds into compact sets of oriented cuboids.

Cuboid parameters and a soft point-to-cuboid segmentation are optimized
jointly per shape by gradient descent on a reconstruction + compactness +
existence objective; evaluation covers Chamfer distance, normal consistency,
label-transfer mIOU, and structural clustering.
"""

from .assignment import coverage, existence_targets, hard_labels, softmax_columns
from .errors import (
    CuboidFitError,
    DataError,
    InvalidConfigError,
    InvalidInputError,
    NumericalError,
)
from .evaluation import (
    MetricsReport,
    active_cuboid_stats,
    eval_chamfer,
    miou,
    normal_consistency,
    structural_clusters,
    transfer_labels,
)
from .geometry import (
    Cuboid,
    Face,
    PointCloud,
    cuboid_faces,
    cuboid_mesh,
    estimate_normals,
    min_distance_point_to_cuboid,
    point_to_cuboid_distance,
    quat_to_rotmat,
    sample_cuboid_surface,
)
from .io import (
    ResultDocument,
    export_obj,
    load_pointcloud,
    load_result,
    result_document,
    save_result,
    synth_shape,
)
from .losses import (
    LossBreakdown,
    chamfer_distance,
    compactness_loss,
    existence_loss,
    reconstruction_loss,
    total_loss,
)
from .optimizer import (
    AbstractionResult,
    FitConfig,
    FitState,
    adam_step,
    compute_gradients,
    fit,
    init_fit,
)

__version__ = "0.1.0"
