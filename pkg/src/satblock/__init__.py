"""RPC bias block adjustment coupled with geometrically constrained least-squares matching."""

from .block_adjust import AdjustConfig, GaugeConfig, run_bias_adjustment
from .errors import SatblockError
from .geo_rpc import BiasCorrection, Camera, GroundPoint, ImagePoint, RpcModel, backward_project, forward_project
from .kernels import BACKEND
from .lsm_refine import LsmConfig, WeightConfig, compute_weights, refine_track, refine_track_classic
from .pipeline import PipelineConfig, RunReport, SceneData, compare_modes, run
from .synth import SceneSpec, render_scene, truth_error
from .tracks import Observation, Track

__version__ = "0.1.0"

__all__ = [
    "AdjustConfig",
    "BACKEND",
    "BiasCorrection",
    "Camera",
    "GaugeConfig",
    "GroundPoint",
    "ImagePoint",
    "LsmConfig",
    "Observation",
    "PipelineConfig",
    "RpcModel",
    "RunReport",
    "SatblockError",
    "SceneData",
    "SceneSpec",
    "Track",
    "WeightConfig",
    "backward_project",
    "compare_modes",
    "compute_weights",
    "forward_project",
    "refine_track",
    "refine_track_classic",
    "render_scene",
    "run",
    "run_bias_adjustment",
    "truth_error",
]
