"""Interactive 3D nodule segmentation: automatic two-block network plus point-guided correction."""

from .field import FieldParams, PointPair, WeightMap, attraction_map, point_field, unit_gradient
from .loss import LossConfig, LossValue, attraction_loss, combined_loss, iou_loss
from .metrics import (
    AnnotationSet,
    EvalRecord,
    asd,
    corrected_best_iou,
    equivalent_radius,
    interobserver_iou,
    iou,
    mean_iou_vs_annotators,
    surface_voxels,
)
from .interact import InteractionSource, simulate_endpoints, validate_user_points
from .net import WNet, WNetConfig, grad_check, load_checkpoint, parameter_count, save_checkpoint
from .volgrid import (
    BinaryMask,
    ScalarVolume,
    SoftMask,
    VolumeGeometry,
    extract_cube,
    hu_window,
    load_volume,
    resample_iso,
    resample_mask,
    save_volume,
    threshold,
)

__version__ = "0.1.0"
