"""Learnable time-domain speech encoder/decoder and WAV I/O.

The encoder maps a waveform to a nonnegative frame sequence of shape
``[T, N]`` with ``T = (len - L) // (L // 2) + 1``.  The decoder applies a
bias-free linear map back to ``L`` samples per frame and overlap-adds the
frames with hop ``L // 2``.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
from scipy.io import wavfile
from torch import nn

from ._validation import SAMPLE_RATE, InvalidInputError, check_finite

__all__ = [
    "CodecConfig",
    "SpeechEncoder",
    "SpeechDecoder",
    "encode_speech",
    "decode_speech",
    "n_frames",
    "overlap_add",
    "read_wav",
    "write_wav",
]


@dataclass(frozen=True)
class CodecConfig:
    n_filters: int = 256
    kernel_size: int = 40
    encoder_bias: bool = False

    def __post_init__(self):
        if self.kernel_size < 2 or self.kernel_size % 2:
            raise InvalidInputError(f"kernel_size must be even and >= 2, got {self.kernel_size}")
        if self.n_filters < 1:
            raise InvalidInputError(f"n_filters must be >= 1, got {self.n_filters}")

    @property
    def stride(self):
        return self.kernel_size // 2


def n_frames(n_samples, kernel_size, stride=None):
    """Frame count of a valid (unpadded) sliding window."""
    stride = kernel_size // 2 if stride is None else stride
    if n_samples < kernel_size:
        raise InvalidInputError(f"signal of {n_samples} samples is shorter than kernel {kernel_size}")
    return (n_samples - kernel_size) // stride + 1


@lru_cache(maxsize=64)
def _ola_index(n_frames_, frame_len, stride):
    # idx[j, i] points into the flattened frames (with a trailing zero slot)
    # at the j-th contributor of output sample i, in increasing frame order.
    out_len = (n_frames_ - 1) * stride + frame_len
    i = np.arange(out_len)
    first = np.maximum(0, -((frame_len - 1 - i) // stride))
    depth = -(-frame_len // stride)
    zero_slot = n_frames_ * frame_len
    idx = np.full((depth, out_len), zero_slot, dtype=np.int64)
    for j in range(depth):
        t = first + j
        offset = i - t * stride
        valid = (t < n_frames_) & (offset >= 0) & (offset < frame_len)
        idx[j, valid] = t[valid] * frame_len + offset[valid]
    return torch.from_numpy(idx)


def overlap_add(frames, stride):
    """Overlap-add ``[..., T, L]`` frames with hop `stride` into ``[..., (T-1)*stride + L]``.

    Contributions to each output sample are summed in increasing frame
    order, so the result is bit-identical to a plain double loop.
    """
    if stride <= 0:
        raise InvalidInputError(f"stride must be positive, got {stride}")
    frames = torch.as_tensor(frames)
    n_t, frame_len = frames.shape[-2:]
    if stride > frame_len:
        raise InvalidInputError(f"stride {stride} exceeds frame length {frame_len}")
    idx = _ola_index(n_t, frame_len, stride)
    lead = frames.shape[:-2]
    flat = frames.reshape(*lead, n_t * frame_len)
    flat = torch.cat([flat, flat.new_zeros(*lead, 1)], dim=-1)
    out = None
    for row in idx:
        term = flat[..., row]
        out = term if out is None else out + term
    return out


class SpeechEncoder(nn.Module):
    """1-D convolution (kernel L, hop L/2) followed by ReLU."""

    def __init__(self, config=CodecConfig()):
        super().__init__()
        self.config = config
        self.conv = nn.Conv1d(
            1, config.n_filters, config.kernel_size,
            stride=config.stride, bias=config.encoder_bias,
        )

    def forward(self, wave, relu=True):
        # wave: [B, samples] -> [B, T, N]
        if wave.shape[-1] < self.config.kernel_size:
            raise InvalidInputError(
                f"waveform of {wave.shape[-1]} samples is shorter than kernel {self.config.kernel_size}"
            )
        out = self.conv(wave.unsqueeze(1)).transpose(1, 2)
        return torch.relu(out) if relu else out


class SpeechDecoder(nn.Module):
    """Bias-free linear map to L samples per frame, then overlap-add."""

    def __init__(self, config=CodecConfig()):
        super().__init__()
        self.config = config
        self.linear = nn.Linear(config.n_filters, config.kernel_size, bias=False)

    def forward(self, frames, target_len):
        # frames: [B, T, N] -> [B, target_len]
        n_t = frames.shape[-2]
        natural = (n_t - 1) * self.config.stride + self.config.kernel_size
        if abs(target_len - natural) > self.config.kernel_size:
            raise InvalidInputError(
                f"target length {target_len} is inconsistent with {n_t} frames ({natural} samples)"
            )
        wave = overlap_add(self.linear(frames), self.config.stride)
        if target_len <= natural:
            return wave[..., :target_len]
        return nn.functional.pad(wave, (0, target_len - natural))


def encode_speech(wave, encoder):
    """Encode one mono waveform to its ``[T, N]`` frame sequence."""
    wave = torch.as_tensor(wave, dtype=encoder.conv.weight.dtype)
    if wave.ndim != 1:
        raise InvalidInputError(f"expected a mono waveform, got shape {tuple(wave.shape)}")
    check_finite(wave, "waveform")
    return encoder(wave.unsqueeze(0))[0]


def decode_speech(frames, target_len, decoder):
    frames = torch.as_tensor(frames, dtype=decoder.linear.weight.dtype)
    check_finite(frames, "masked embedding")
    return decoder(frames.unsqueeze(0), target_len)[0]


def read_wav(path):
    """Read a mono 16 kHz WAV file as float32 samples in [-1, 1]."""
    rate, data = wavfile.read(path)
    if rate != SAMPLE_RATE:
        raise InvalidInputError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE}")
    if data.ndim != 1:
        raise InvalidInputError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        return data.astype(np.float32) / 32768.0
    if data.dtype == np.float32:
        return data
    raise InvalidInputError(f"{path}: unsupported sample type {data.dtype}")


def write_wav(path, samples, pcm16=False):
    samples = np.asarray(samples)
    if pcm16:
        data = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = samples.astype("<f4")
    wavfile.write(path, SAMPLE_RATE, data)
