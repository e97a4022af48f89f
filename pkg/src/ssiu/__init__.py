"""Structural-similarity-inspired unfolding (SSIU) for lightweight super-resolution."""

from .blocks import ESAM, MSGM, ESAMConfig, MoEFS, MoEFSConfig, MSGMConfig, SSReM
from .config import RunConfig, SSIUConfig, TrainConfig
from .model import SSIU, build_model, count_parameters, estimate_flops, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
