"""Adapter-based fine-tuning of a desk-scale audio spectrogram Transformer."""

from .adapters import Adapter, PromptBank, adapter_forward, init_adapter, prompt_inject, prompt_strip
from .autodiff import Tape, Tensor, backward
from .data import SyntheticTaskSpec, generate_dataset, load_tensors, save_tensors, split
from .errors import AATError, ConfigurationError, ContractError, DimensionError, FormatError
from .peft import ParamReport, PeftStrategy, apply_freeze, count_params, trainable_mask
from .training import TrainHistory, train
from .transformer import PRESETS, AudioTransformer, ModelConfig, build_model, model_forward

__version__ = "0.1.0"
