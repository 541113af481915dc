"""Underwater-acoustic target recognition with a sparse mixture-of-experts head.

The pipeline: WAV decoding -> time-frequency features (STFT, mel, Bark,
constant-Q) -> residual convolutional backbone with attention pooling ->
top-1 expert routing with a load-balancing regularizer. The differentiable
core is a small reverse-mode tape over numpy arrays with an optional
compiled kernel backend.
"""

from ._kernels import BACKEND as KERNEL_BACKEND
from .audio import AudioClip, load_audio, probe_wav, write_wav_pcm16
from .backbone import Backbone
from .config import RunConfig, load_config
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    FeatureStore,
    Manifest,
    SegmentIndex,
    SyntheticSpec,
    build_split,
    builtin_split_table,
    carve_validation,
    generate_synthetic,
    load_manifest,
    load_split_table,
    make_batches,
    segment_clip,
)
from .errors import CmoeError, ConfigError, NumericError
from .features import EffectiveBand, Spectrogram, extract
from .gradcheck import gradcheck
from .moe import CmoeHead, CmoeModel
from .optim import AdamW, cosine_lr
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "AudioClip",
    "Backbone",
    "CmoeError",
    "CmoeHead",
    "CmoeModel",
    "ConfigError",
    "EffectiveBand",
    "FeatureStore",
    "KERNEL_BACKEND",
    "Manifest",
    "NumericError",
    "RunConfig",
    "SegmentIndex",
    "Spectrogram",
    "SyntheticSpec",
    "Tensor",
    "TrainConfig",
    "build_split",
    "builtin_split_table",
    "carve_validation",
    "cosine_lr",
    "evaluate",
    "extract",
    "generate_synthetic",
    "gradcheck",
    "load_audio",
    "load_checkpoint",
    "load_config",
    "load_manifest",
    "load_split_table",
    "make_batches",
    "no_grad",
    "probe_wav",
    "save_checkpoint",
    "segment_clip",
    "train",
    "write_wav_pcm16",
]
