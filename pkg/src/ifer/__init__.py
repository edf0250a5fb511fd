"""Toy-scale facial inversion (window-attention encoder + frozen style generator) and expression recognition."""
from .alignment import alignment_loss
from .checkpoint import Checkpoint, CheckpointError
from .config import RunConfig, load_config
from .critic import SiameseCritic, critic_loss, encoder_adv_loss, momentum_update
from .encoder import ASITEncoder, EncoderConfig
from .fer import FERHead, IFERModel, fer_loss
from .synthesis import GeneratorConfig, LatentCodes, ToyGenerator, modulated_conv, style_mix

__version__ = "0.1.0"

__all__ = [
    "ASITEncoder", "Checkpoint", "CheckpointError", "EncoderConfig", "FERHead", "GeneratorConfig",
    "IFERModel", "LatentCodes", "RunConfig", "SiameseCritic", "ToyGenerator", "alignment_loss",
    "critic_loss", "encoder_adv_loss", "fer_loss", "load_config", "modulated_conv", "momentum_update",
    "style_mix",
]
