"""The full extraction network, variant presets, and checkpoint I/O."""

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
from torch import nn

from ._validation import InvalidInputError, check_cue_duration, check_waveform
from .audio import CodecConfig, SpeechDecoder, SpeechEncoder
from .separator import AttentionMaskEstimator, ConcatMaskEstimator, SeparatorConfig
from .visual import (
    GestureEncoder,
    GestureEncoderConfig,
    LipEncoder,
    LipEncoderConfig,
    LipSequence,
    PoseSequence,
    upsample_to_rate,
)

__all__ = [
    "VariantSpec",
    "VARIANTS",
    "ModelConfig",
    "SeLG",
    "ModelOutput",
    "extract",
    "save_checkpoint",
    "load_checkpoint",
    "desk_config",
]

CUE_SETS = {"lip": ("lip",), "gesture": ("gesture",), "both": ("lip", "gesture")}
FUSIONS = ("concatenation", "attention")


@dataclass(frozen=True)
class VariantSpec:
    """Which cues a system uses, how it fuses them, and whether InfoNCE is on."""

    cues: str = "both"
    fusion: str = "attention"
    use_infonce: bool = False

    def __post_init__(self):
        if self.cues not in CUE_SETS:
            raise InvalidInputError(f"cues must be one of {sorted(CUE_SETS)}, got {self.cues!r}")
        if self.fusion not in FUSIONS:
            raise InvalidInputError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.use_infonce and self.cues == "lip":
            raise InvalidInputError("InfoNCE alignment needs the gesture cue")

    @property
    def cue_names(self):
        return CUE_SETS[self.cues]

    @property
    def multi_cue(self):
        return len(self.cue_names) > 1


# Table-1 analogues (2-speaker rows)
VARIANTS = {
    "usev": VariantSpec("lip", "concatenation"),
    "seg": VariantSpec("gesture", "concatenation"),
    "seg_infonce": VariantSpec("gesture", "concatenation", use_infonce=True),
    "selg_concat": VariantSpec("both", "concatenation"),
    "selg_attention": VariantSpec("both", "attention"),
    "selg": VariantSpec("both", "attention", use_infonce=True),
}


@dataclass(frozen=True)
class ModelConfig:
    variant: VariantSpec = field(default_factory=VariantSpec)
    codec: CodecConfig = field(default_factory=CodecConfig)
    gesture: GestureEncoderConfig = field(default_factory=GestureEncoderConfig)
    lip: LipEncoderConfig = field(default_factory=LipEncoderConfig)
    separator: SeparatorConfig = field(default_factory=SeparatorConfig)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(
            variant=VariantSpec(**d["variant"]),
            codec=CodecConfig(**d["codec"]),
            gesture=GestureEncoderConfig(**d["gesture"]),
            lip=LipEncoderConfig(**d["lip"]),
            separator=SeparatorConfig(**d["separator"]),
        )

    def with_variant(self, variant):
        return replace(self, variant=variant)

    def architecture(self):
        """Everything except the loss flag: two configs with equal architecture share weights."""
        d = self.to_dict()
        d["variant"].pop("use_infonce")
        return d


def desk_config(variant="selg", **separator_overrides):
    """Small CPU-trainable configuration (N=64, L=40, R=2, dp_hidden=64, lite lip encoder)."""
    if isinstance(variant, str):
        variant = VARIANTS[variant]
    sep = dict(dp_hidden=64, repeats=2)
    sep.update(separator_overrides)
    return ModelConfig(
        variant=variant,
        codec=CodecConfig(n_filters=64, kernel_size=40),
        lip=LipEncoderConfig(),
        separator=SeparatorConfig(**sep),
    )


class ModelOutput(NamedTuple):
    estimate: torch.Tensor
    mask: torch.Tensor
    lip_emb: Optional[torch.Tensor]
    gesture_emb: Optional[torch.Tensor]


class SeLG(nn.Module):
    """Speech encoder, cue encoders, mask estimator and decoder wired per `config.variant`."""

    def __init__(self, config=ModelConfig()):
        super().__init__()
        self.config = config
        cues = config.variant.cue_names
        self.encoder = SpeechEncoder(config.codec)
        self.decoder = SpeechDecoder(config.codec)
        self.lip_encoder = LipEncoder(config.lip) if "lip" in cues else None
        self.gesture_encoder = GestureEncoder(config.gesture) if "gesture" in cues else None
        estimator = AttentionMaskEstimator if config.variant.fusion == "attention" else ConcatMaskEstimator
        self.separator = estimator(
            config.codec.n_filters, cues, config.separator,
            lip_dim=config.lip.out_dim, gesture_dim=config.gesture.out_dim,
        )

    @property
    def cue_names(self):
        return self.config.variant.cue_names

    def forward(self, mixture, lips=None, poses=None, has_lip=None, has_gesture=None, mask_override=None):
        """Batched forward pass.

        mixture: ``[B, samples]``; lips: ``[B, F, H, W]``; poses: ``[B, F, 10, 3]``.
        A cue passed as ``None`` is absent for the whole batch.  `has_lip` /
        `has_gesture` are optional ``[B]`` 0/1 tensors marking per-sample
        absence; absent samples get an all-zero branch.
        """
        n_samples = mixture.shape[-1]
        mix_emb = self.encoder(mixture)
        n_t = mix_emb.shape[1]
        lip_emb = self.lip_encoder(lips) if self.lip_encoder is not None and lips is not None else None
        gesture_emb = (
            self.gesture_encoder(poses) if self.gesture_encoder is not None and poses is not None else None
        )
        cues = {
            "lip": None if lip_emb is None else upsample_to_rate(lip_emb, n_t),
            "gesture": None if gesture_emb is None else upsample_to_rate(gesture_emb, n_t),
        }
        present = {"lip": has_lip, "gesture": has_gesture}
        if all(cues[name] is None for name in self.cue_names):
            # the model's only cue(s) are missing: run with a zeroed branch
            name = self.cue_names[0]
            dim = self.config.lip.out_dim if name == "lip" else self.config.gesture.out_dim
            cues[name] = mix_emb.new_zeros(mix_emb.shape[0], n_t, dim)
            present[name] = mix_emb.new_zeros(mix_emb.shape[0])
        if mask_override is not None:
            mask = mask_override.expand_as(mix_emb)
        else:
            mask = self.separator(mix_emb, cues, present)
        estimate = self.decoder(mix_emb * mask, n_samples)
        return ModelOutput(estimate, mask, lip_emb, gesture_emb)


def _batch(x, dtype):
    return torch.as_tensor(np.asarray(x), dtype=dtype).unsqueeze(0)


@torch.no_grad()
def extract(model, mixture, lip=None, gesture=None, mask_override=None):
    """Extract the target speaker from one mono mixture.

    `lip` is a :class:`LipSequence` or ``None``; `gesture` a
    :class:`PoseSequence` or ``None``.  Cues the model does not use are
    ignored.  Returns a float array with the mixture's length.
    """
    mixture = check_waveform(mixture, min_len=model.config.codec.kernel_size, name="mixture")
    if lip is None and gesture is None:
        raise InvalidInputError("extract needs at least one visual cue")
    n = mixture.shape[-1]
    if lip is not None:
        if not isinstance(lip, LipSequence):
            lip = LipSequence(lip)
        check_cue_duration(len(lip), n, "lip sequence")
    if gesture is not None:
        if not isinstance(gesture, PoseSequence):
            gesture = PoseSequence(gesture)
        check_cue_duration(len(gesture), n, "pose sequence")
    dtype = model.encoder.conv.weight.dtype
    was_training = model.training
    model.eval()
    try:
        out = model(
            _batch(mixture, dtype),
            lips=_batch(lip.frames, dtype) if lip is not None and "lip" in model.cue_names else None,
            poses=_batch(gesture.frames, dtype) if gesture is not None and "gesture" in model.cue_names else None,
            mask_override=mask_override,
        )
    finally:
        model.train(was_training)
    return out.estimate[0].cpu().numpy()


# --------------------------------------------------------------------------
# checkpoints: magic, u64 header length, JSON header, raw little-endian f32

CKPT_MAGIC = b"SELGCKPT"


def save_checkpoint(path, model, meta=None):
    tensors = []
    blobs = []
    offset = 0
    for name, t in model.state_dict().items():
        data = t.detach().cpu().numpy().astype("<f4").tobytes()
        tensors.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({
        "format": 1,
        "config": model.config.to_dict(),
        "tensors": tensors,
        "meta": meta or {},
    }).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def read_checkpoint(path):
    """Return ``(config, state_dict, meta)`` from a checkpoint file."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise InvalidInputError(f"{path}: not a checkpoint (magic {raw[:8]!r})")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    base = 16 + n
    state = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        arr = np.frombuffer(raw[start:start + entry["nbytes"]], dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    return ModelConfig.from_dict(header["config"]), state, header.get("meta", {})


def load_checkpoint(path, expected=None):
    """Build a model from a checkpoint.

    If `expected` (a :class:`ModelConfig`) is given, its architecture must
    match the stored one; the loss flag may differ.
    """
    config, state, meta = read_checkpoint(path)
    if expected is not None:
        if expected.architecture() != config.architecture():
            raise InvalidInputError(f"{path}: checkpoint architecture does not match the requested config")
        config = expected
    model = SeLG(config)
    model.load_state_dict(state)
    return model, meta
