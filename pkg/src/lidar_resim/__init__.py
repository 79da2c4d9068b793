"""Physically-based LiDAR re-simulation over composable signed-distance
fields: analytic ground-truth scanning, trainable voxel fields, active-sensor
volume rendering, dynamic-scene composition and editing, a surfel baseline,
and evaluation metrics."""

from .geometry import (Aabb, Obb, Pose, PoseTrack, Ray, estimate_box_transform,
                       interpolate_track, obb_from_corners, ray_obb_intersect,
                       slerp_pose, transform_ray)
from .fields import (AnalyticField, AxisBox, GridField, Plane, Sphere, Union,
                     analytic_heads, head_forward, numerical_gradient,
                     sh_encode, trilinear)
from .rendering import (RayRenderResult, SampleSet, SamplingConfig,
                        alpha_from_sdf, hierarchical_sample, render_ray,
                        sample_pdf, segment_power_closed_form,
                        weights_from_alphas)
from .scan import Scan, SensorConfig, beam_grid
from .oracle import (MovingObject, ScriptedScene, drop_model, exact_ray_cast,
                     generate_dataset, intensity_model)
from .scenegraph import (ComposeConfig, ComposedMeasurement, DynamicAsset,
                         SceneGraph, compose_ray, fields_hit, insert_asset,
                         remove_asset, resimulate_scan, set_trajectory,
                         unisim_compose_ray)
from .optimize import (LossWeights, RayBatch, TrainConfig, TrainingDiverged,
                       build_dynamic_batch, build_static_batch, lovasz_hinge,
                       train_field)
from .baseline import (SurfelCloud, SurfelConfig, SurfelModel, build_surfels,
                       estimate_normals, ray_surfel_cast, reconstruct_surfels,
                       voxel_downsample)
from .metrics import RangeMetrics, chamfer, compute_metrics, drop_iou, ecdf, \
    medae_dyn, range_errors

__version__ = "0.1.0"
