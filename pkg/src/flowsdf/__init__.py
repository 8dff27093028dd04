"""Flow-regularized implicit shape codes: SDF decoder, Gaussianization flow and Gauss-Newton shape fitting."""

from .corpus import CorpusManifest, FamilyConfig, ProceduralShape, make_shape, oracle_sdf, sample_surface_points
from .decoder import DecoderWeights, SDFDecoder, decoder_forward, decoder_jacobian, train_decoder
from .flow import FlowWeights, GaussianizationFlow, flow_forward, flow_inverse, flow_jacobian, flow_logdet, train_flow
from .geometry import SimilarityPose
from .mesh import TriangleMesh, marching_cubes, sample_mesh_surface
from .metrics import OrientedBox3, chamfer_bidirectional, chamfer_unidirectional, fit_oriented_box, iou3d
from .observation_model import RayBundle, build_rays, depth_loss, mask_loss, surface_loss
from .observations import NoiseConfig, ObservationBundle, make_observation_bundle
from .optimizer import ObjectiveConfig, OptimizationState, ShapeOptimizer, decode_shape, optimize_first_order, optimize_gn
from .render import CameraModel, look_at, orbit_cameras, render_view

__version__ = "0.1.0"

__all__ = [
    "CorpusManifest",
    "FamilyConfig",
    "ProceduralShape",
    "make_shape",
    "oracle_sdf",
    "sample_surface_points",
    "DecoderWeights",
    "SDFDecoder",
    "decoder_forward",
    "decoder_jacobian",
    "train_decoder",
    "FlowWeights",
    "GaussianizationFlow",
    "flow_forward",
    "flow_inverse",
    "flow_jacobian",
    "flow_logdet",
    "train_flow",
    "SimilarityPose",
    "TriangleMesh",
    "marching_cubes",
    "sample_mesh_surface",
    "OrientedBox3",
    "chamfer_bidirectional",
    "chamfer_unidirectional",
    "fit_oriented_box",
    "iou3d",
    "RayBundle",
    "build_rays",
    "depth_loss",
    "mask_loss",
    "surface_loss",
    "NoiseConfig",
    "ObservationBundle",
    "make_observation_bundle",
    "ObjectiveConfig",
    "OptimizationState",
    "ShapeOptimizer",
    "decode_shape",
    "optimize_first_order",
    "optimize_gn",
    "CameraModel",
    "look_at",
    "orbit_cameras",
    "render_view",
]
