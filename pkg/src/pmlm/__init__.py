"""Position-masked language model pretraining, desk scale, fully deterministic."""

from .autograd import DropoutMode, Parameter, Tensor
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config, parse_run_config
from .finetune import FinetuneConfig, run_finetune
from .masking import MaskingConfig, Vocab, assemble_batch, build_vocab
from .model import ModelConfig, init_weights, pretrain_forward
from .training import Mode, TrainConfig, run_pretraining

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "DropoutMode",
    "FinetuneConfig",
    "MaskingConfig",
    "Mode",
    "ModelConfig",
    "Parameter",
    "RunConfig",
    "Tensor",
    "TrainConfig",
    "Vocab",
    "assemble_batch",
    "build_vocab",
    "init_weights",
    "load_checkpoint",
    "load_run_config",
    "parse_run_config",
    "pretrain_forward",
    "run_finetune",
    "run_pretraining",
    "save_checkpoint",
    "__version__",
]
