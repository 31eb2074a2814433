"""dirforge: unsupervised two-stage deformable registration for
longitudinal cone-beam CT volumes, desk-scale and fully self-contained.
"""

__version__ = "0.1.0"

from .losses import LossWeights
from .pipeline import RegistrationResult, TrainConfig, register, train_global, train_local
from .transform import DVF, PatchGrid, build_patch_grid, compose, fuse_patches, upsample_dvf, warp
from .volume import LandmarkSet, Mask, Volume, load_volume, save_volume, threshold_mask

__all__ = [
    "__version__",
    "DVF", "LandmarkSet", "LossWeights", "Mask", "PatchGrid",
    "RegistrationResult", "TrainConfig", "Volume",
    "build_patch_grid", "compose", "fuse_patches", "load_volume",
    "register", "save_volume", "threshold_mask", "train_global",
    "train_local", "upsample_dvf", "warp",
]
