"""Parametric head-and-neck model: anatomical cervical skinning, personalized
expression/pose blendshapes, and UV-space larynx motion."""

__version__ = "0.1.0"

from .blendshapes import (
    BlendshapeSet,
    MappingNetwork,
    expression_offset,
    personalize_expressions,
    pose_offset,
    synthesize_shape,
    train_mapping_network,
)
from .larynx import LarynxBasis, LarynxParams, fit_larynx_basis, larynx_offset, swallow_curve
from .learning import (
    DynamicConfig,
    FitConfig,
    LossWeights,
    SequenceClip,
    StaticConfig,
    TemporalConfig,
    fit_to_target,
    learn_dynamic,
    learn_static,
    objective_gradient_check,
    reconstruction_energy,
    temporal_energy,
)
from .mesh import Mesh, graph_laplacian, laplacian_energy, load_obj, save_obj
from .model import (
    AppearanceSpace,
    FullParams,
    HeadNeckModel,
    appearance,
    forward,
    load_model,
    rest_template,
    save_model,
)
from .pca import PcaSpace, fit_pca, project, reconstruct
from .skeleton import (
    JointRegressor,
    RotationLimits,
    Skeleton,
    adjacent_similarity_energy,
    align_vertebra_template,
    collision_energy,
    fit_joint_regressor,
    forward_kinematics,
    linear_blend_skin,
    regress_joints,
    rotation_limit_energy,
)
from .synthesis import (
    LarynxPredictor,
    OrientationPoseNet,
    RigTarget,
    orientation_to_pose,
    predict_larynx_sequence,
    retarget_pose,
    track_larynx,
)
from .uvmap import DisplacementMap, gather_from_uv, scatter_to_uv

__all__ = [name for name in dir() if not name.startswith("_")]
