"""Target speaker extraction conditioned on lip and co-speech gesture cues."""

from ._validation import SAMPLE_RATE, VIDEO_FPS, InvalidInputError
from .audio import CodecConfig, decode_speech, encode_speech
from .datasim import MissingPolicy, MixtureSample, SimConfig, build_corpus
from .estimator import SpeakerExtractor
from .evaluation import evaluate, si_snri
from .losses import LossConfig, info_nce, si_snr, si_snr_loss, total_loss
from .model import VARIANTS, ModelConfig, SeLG, VariantSpec, desk_config, extract, load_checkpoint, save_checkpoint
from .separator import CuePresence, SeparatorConfig
from .training import TrainConfig, finetune_infonce, train
from .visual import LipSequence, PoseSequence

__version__ = "0.1.0"

__all__ = [
    "SAMPLE_RATE",
    "VIDEO_FPS",
    "InvalidInputError",
    "CodecConfig",
    "encode_speech",
    "decode_speech",
    "SimConfig",
    "MissingPolicy",
    "MixtureSample",
    "build_corpus",
    "SpeakerExtractor",
    "evaluate",
    "si_snri",
    "LossConfig",
    "si_snr",
    "si_snr_loss",
    "info_nce",
    "total_loss",
    "VARIANTS",
    "VariantSpec",
    "ModelConfig",
    "SeLG",
    "desk_config",
    "extract",
    "save_checkpoint",
    "load_checkpoint",
    "CuePresence",
    "SeparatorConfig",
    "TrainConfig",
    "train",
    "finetune_infonce",
    "LipSequence",
    "PoseSequence",
]
