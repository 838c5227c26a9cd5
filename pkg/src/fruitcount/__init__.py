"""Monocular fruit counting: track segmented fruit through a video, then
use camera poses to localize each fruit in 3D and drop double counts,
back-row fruit and non-fruit blobs."""

from .assign import solve_assignment
from .config import PipelineConfig, load_pipeline_config, load_scene_config
from .core import CameraPose, CountReport, FruitFlag, Fruit3D, FruitTrack, Intrinsics, Region
from .evaluate import evaluate
from .pipeline import MemorySource, PipelineError, run_pipeline
from .simulate import SceneConfig, generate

__version__ = "0.1.0"

__all__ = [
    "CameraPose",
    "CountReport",
    "Fruit3D",
    "FruitFlag",
    "FruitTrack",
    "Intrinsics",
    "MemorySource",
    "PipelineConfig",
    "PipelineError",
    "Region",
    "SceneConfig",
    "evaluate",
    "generate",
    "load_pipeline_config",
    "load_scene_config",
    "run_pipeline",
    "solve_assignment",
]
