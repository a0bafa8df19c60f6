"""Visual cue containers, encoders and file formats.

Pose streams are ``[F, 10, 3]`` spine-centred joint coordinates; lip
streams are ``[F, H, W]`` grayscale crops in [0, 1].  Both run at 15 FPS.
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ._validation import VIDEO_FPS, InvalidInputError, check_finite, check_probability

__all__ = [
    "JOINT_NAMES",
    "PoseSequence",
    "LipSequence",
    "GestureEncoderConfig",
    "LipEncoderConfig",
    "GestureEncoder",
    "LipEncoder",
    "normalize_pose",
    "upsample_to_rate",
    "upsample_index",
    "encode_gesture",
    "encode_lip",
    "read_pose",
    "write_pose",
    "read_lip",
    "write_lip",
]

JOINT_NAMES = (
    "head", "neck", "nose", "spine",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
)
SPINE = JOINT_NAMES.index("spine")
L_SHOULDER = JOINT_NAMES.index("l_shoulder")
R_SHOULDER = JOINT_NAMES.index("r_shoulder")

LIP_MAGIC = b"SELGLIP1"


@dataclass
class PoseSequence:
    frames: np.ndarray
    fps: int = VIDEO_FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3 or self.frames.shape[1:] != (len(JOINT_NAMES), 3):
            raise InvalidInputError(f"pose frames must be [F, 10, 3], got {self.frames.shape}")
        if self.fps != VIDEO_FPS:
            raise InvalidInputError(f"pose fps must be {VIDEO_FPS}, got {self.fps}")
        check_finite(self.frames, "pose frames")

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class LipSequence:
    frames: np.ndarray
    fps: int = VIDEO_FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3:
            raise InvalidInputError(f"lip frames must be [F, H, W], got {self.frames.shape}")
        if self.fps != VIDEO_FPS:
            raise InvalidInputError(f"lip fps must be {VIDEO_FPS}, got {self.fps}")
        check_finite(self.frames, "lip frames")
        if self.frames.size and (self.frames.min() < 0.0 or self.frames.max() > 1.0):
            raise InvalidInputError("lip intensities must lie in [0, 1]")

    def __len__(self):
        return self.frames.shape[0]


# --------------------------------------------------------------------------
# gesture branch


@dataclass(frozen=True)
class GestureEncoderConfig:
    layers: int = 5
    hidden: int = 32
    dropout: float = 0.3

    def __post_init__(self):
        check_probability(self.dropout, "gesture dropout")

    @property
    def out_dim(self):
        return 2 * self.hidden


def normalize_pose(poses, eps=1e-6):
    """Re-centre on the spine joint and divide by the mean shoulder distance.

    Works on ``[..., F, 10, 3]`` tensors; the scale is computed per sequence.
    """
    poses = poses - poses[..., SPINE:SPINE + 1, :]
    shoulder = (poses[..., L_SHOULDER, :] - poses[..., R_SHOULDER, :]).norm(dim=-1)
    scale = shoulder.mean(dim=-1, keepdim=True).clamp_min(eps)
    return poses / scale[..., None, None]


class GestureEncoder(nn.Module):
    """Multi-layer BLSTM over flattened normalized poses; full output sequence."""

    def __init__(self, config=GestureEncoderConfig()):
        super().__init__()
        self.config = config
        self.blstm = nn.LSTM(
            input_size=len(JOINT_NAMES) * 3,
            hidden_size=config.hidden,
            num_layers=config.layers,
            dropout=config.dropout if config.layers > 1 else 0.0,
            bidirectional=True,
            batch_first=True,
        )

    @property
    def out_dim(self):
        return self.config.out_dim

    def forward(self, poses):
        # poses: [B, F, 10, 3] -> [B, F, 2 * hidden]
        x = normalize_pose(poses).flatten(-2)
        out, _ = self.blstm(x)
        return out


# --------------------------------------------------------------------------
# lip branch


@dataclass(frozen=True)
class LipEncoderConfig:
    """``"lite"`` is the desk-scale stack; ``"resnet18"`` mirrors the full topology."""

    variant: str = "lite"
    front_channels: int = 16
    temporal_kernel: int = 5
    out_dim: int = 64

    def __post_init__(self):
        if self.variant not in ("lite", "resnet18"):
            raise InvalidInputError(f"unknown lip encoder variant {self.variant!r}")

    @classmethod
    def faithful(cls):
        return cls(variant="resnet18", front_channels=64, out_dim=512)

    @property
    def temporal_blocks(self):
        return 2 if self.variant == "lite" else 5


class _BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.norm1 = nn.GroupNorm(1, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.norm2 = nn.GroupNorm(1, c_out)
        self.skip = None
        if stride != 1 or c_in != c_out:
            self.skip = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.GroupNorm(1, c_out))

    def forward(self, x):
        y = torch.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return torch.relu(y + (x if self.skip is None else self.skip(x)))


class _TemporalBlock(nn.Module):
    """Depthwise-separable 1-D conv block with a residual connection."""

    def __init__(self, dim, kernel=3):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim),
            nn.PReLU(),
            nn.GroupNorm(1, dim),
            nn.Conv1d(dim, dim, 1),
        )

    def forward(self, x):
        return x + self.net(x)


class LipEncoder(nn.Module):
    """3-D conv front end, per-frame residual CNN, stacked temporal conv blocks."""

    def __init__(self, config=LipEncoderConfig()):
        super().__init__()
        self.config = config
        c = config.front_channels
        k = config.temporal_kernel
        self.front = nn.Sequential(
            nn.Conv3d(1, c, (k, 5, 5), stride=(1, 2, 2), padding=(k // 2, 2, 2), bias=False),
            nn.GroupNorm(1, c),
            nn.ReLU(),
        )
        if config.variant == "lite":
            widths = [(c, c, 1), (c, 2 * c, 2), (2 * c, 2 * c, 1), (2 * c, 2 * c, 2)]
        else:
            widths = []
            c_in = c
            for stage, c_out in enumerate((64, 128, 256, 512)):
                stride = 1 if stage == 0 else 2
                widths += [(c_in, c_out, stride), (c_out, c_out, 1)]
                c_in = c_out
        self.trunk = nn.Sequential(*[_BasicBlock(i, o, s) for i, o, s in widths])
        self.project = nn.Conv1d(widths[-1][1], config.out_dim, 1)
        self.temporal = nn.Sequential(*[_TemporalBlock(config.out_dim) for _ in range(config.temporal_blocks)])

    @property
    def out_dim(self):
        return self.config.out_dim

    def forward(self, lips):
        # lips: [B, F, H, W] -> [B, F, D]
        b, f = lips.shape[:2]
        x = self.front(lips.unsqueeze(1))  # [B, C, F, H', W']
        x = x.transpose(1, 2).flatten(0, 1)  # [B*F, C, H', W']
        x = self.trunk(x).mean(dim=(-2, -1)).view(b, f, -1)
        x = self.project(x.transpose(1, 2))
        return self.temporal(x).transpose(1, 2)


def _as_batch(frames, dtype):
    return torch.as_tensor(np.asarray(frames), dtype=dtype).unsqueeze(0)


def encode_gesture(poses, encoder):
    """Encode one :class:`PoseSequence` to a ``[F, 2 * hidden]`` array."""
    if len(poses) < 1:
        raise InvalidInputError("pose sequence is empty")
    dtype = next(encoder.parameters()).dtype
    return encoder(_as_batch(poses.frames, dtype))[0]


def encode_lip(lips, encoder):
    if len(lips) < 1:
        raise InvalidInputError("lip sequence is empty")
    dtype = next(encoder.parameters()).dtype
    return encoder(_as_batch(lips.frames, dtype))[0]


# --------------------------------------------------------------------------
# rate alignment


def upsample_index(n_source, n_target):
    """Nearest-neighbour source index for each target frame: ``floor(t * F / T)``."""
    if n_source < 1:
        raise InvalidInputError("cannot upsample an empty sequence")
    if n_target < n_source:
        raise InvalidInputError(f"target length {n_target} is shorter than source length {n_source}")
    return torch.arange(n_target) * n_source // n_target


def upsample_to_rate(emb, n_target):
    """Repeat frames of ``[..., F, D]`` to ``[..., n_target, D]``."""
    idx = upsample_index(emb.shape[-2], n_target).to(emb.device)
    return emb.index_select(-2, idx)


# --------------------------------------------------------------------------
# file formats


def write_pose(path, poses):
    doc = {"fps": poses.fps, "joint_names": list(JOINT_NAMES), "data": poses.frames.tolist()}
    Path(path).write_text(json.dumps(doc))


def read_pose(path):
    doc = json.loads(Path(path).read_text())
    if list(doc.get("joint_names", [])) != list(JOINT_NAMES):
        raise InvalidInputError(f"{path}: unexpected joint names {doc.get('joint_names')}")
    return PoseSequence(np.asarray(doc["data"], dtype=np.float32), fps=doc["fps"])


def write_lip(path, lips):
    """Raw little-endian float32 tensor behind an 8-byte magic, plus a JSON sidecar."""
    path = Path(path)
    f, h, w = lips.frames.shape
    with open(path, "wb") as fh:
        fh.write(LIP_MAGIC)
        fh.write(lips.frames.astype("<f4").tobytes())
    sidecar = {"F": f, "H": h, "W": w, "fps": lips.fps}
    path.with_name(path.name + ".json").write_text(json.dumps(sidecar))


def read_lip(path):
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    raw = path.read_bytes()
    if raw[:8] != LIP_MAGIC:
        raise InvalidInputError(f"{path}: bad magic {raw[:8]!r}")
    shape = (meta["F"], meta["H"], meta["W"])
    expected = struct.calcsize("<f") * int(np.prod(shape))
    if len(raw) - 8 != expected:
        raise InvalidInputError(f"{path}: payload is {len(raw) - 8} bytes, sidecar implies {expected}")
    frames = np.frombuffer(raw, dtype="<f4", offset=8).reshape(shape)
    return LipSequence(frames.astype(np.float32), fps=meta["fps"])
