# Heightfusion_lib/__init__.py

"""
Heightfusion Library
"""

__version__ = "1.0.0"

# Make key classes and functions available at the package level
from .errors import HeightfusionError, ConfigError
from .tensor_core import Tensor, backward, gradient_check
from .raster_io import RasterTile, read_tiff, write_tiff, normalize, default_spec
from .model_zoo import FusionVariant, ArchScale, build_model, forward, late_fuse
from .metrics import evaluate_heights, ap50, combined_score, EvalReport
from .synth_data import SceneSpec, generate_dataset, load_dataset
from .config import TrainConfig, resolve_config
from .training import train, predict, save_checkpoint, load_checkpoint
from .experiments import run_variant_sweep
