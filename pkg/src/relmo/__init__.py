"""Multi-person 3D motion prediction with intra- and inter-person relation modelling.

Pure numpy: a small tape-based autodiff core, a synthetic scene generator and
``.mmp`` dataset format, PCC analysis, the relation model, AdamW training and
the VIM / MPJPE metrics.
"""

from .data import Scene, SyntheticConfig, generate_scenes, generate_synthetic, load_dataset, save_dataset
from .metrics import mpjpe, vim_at
from .model import ModelConfig, forward, init_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, evaluate, train

__all__ = [
    "Scene",
    "SyntheticConfig",
    "generate_scenes",
    "generate_synthetic",
    "load_dataset",
    "save_dataset",
    "mpjpe",
    "vim_at",
    "ModelConfig",
    "forward",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "TrainConfig",
    "evaluate",
    "train",
]
__version__ = "0.1.0"
