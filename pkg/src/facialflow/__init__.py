"""Facial-flow toolkit: 3D morphable-model fitting, flow rasterization,
modulation kernels, losses and image metrics."""

from .errors import (
    FacialFlowError, FormatError, InvalidParameterError, OptimizationError, RangeError,
    ShapeError,
)
from .morphable_model import (
    LandmarkSet, ModelParams, MorphableBasis, landmarks_2d, load_basis, load_params,
    project, reconstruct, rotation_matrix, save_basis, save_params, synthetic_basis,
)
from .fitting import FitConfig, FitReport, fit
from .flow import (
    FacialFlow, FlowSequence, flow_sequence, interpolate_params, perturb_params,
    rasterize_flow, substitute_params,
)
from .metrics import MetricsReport, image_metrics, prmse

__version__ = "0.1.0"
