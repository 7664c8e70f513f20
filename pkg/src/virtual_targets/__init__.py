"""Predict maneuvering targets with a conditional normalizing flow and reduce the
sampled futures to a few deterministic virtual-target trajectories."""

from .cluster import ClusterConfig, VirtualTargetSet, flatten, kmeans, unflatten_and_renormalize
from .core import (
    NormalizationParams,
    Pose,
    Trajectory,
    TrajectoryDataset,
    fit_normalization,
    heading_from_velocity,
    rotation_matrix,
    transform_sample,
)
from .errors import (
    ConfigurationError,
    ContractViolation,
    DataError,
    SimulationError,
    TrainingError,
    VirtualTargetError,
)
from .flow import CnfModel, SplineConfig, SplineParams, spline_forward, spline_inverse
from .predict import GridSpec, PdfGrid, PredictionRequest, SampleTensor, TargetState, draw_samples, evaluate_pdf_grid, remove_outliers
from .sim import BallisticConfig, SimpleTargetConfig, simulate_ballistic, simulate_deterministic_modes, simulate_simple
from .train import TrainConfig, TrainReport, build_training_points, train

__version__ = "0.1.0"
