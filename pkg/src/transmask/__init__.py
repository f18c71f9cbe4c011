"""TransMask: time-domain speech separation with strided-attention / recurrent dual-path layers."""
from .audio import AudioBuffer, read_wav, repeat, write_wav
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .objective import si_snr, upit_loss
from .separator import ModelConfig, count_parameters, forward, init_params, separate
from .tensor import Tensor, backward, no_grad, precision

__all__ = [
    "AudioBuffer", "Checkpoint", "ModelConfig", "Tensor", "backward", "count_parameters", "forward",
    "init_params", "load_checkpoint", "no_grad", "precision", "read_wav", "repeat", "save_checkpoint",
    "separate", "si_snr", "upit_loss", "write_wav",
]

__version__ = "0.1.0"
