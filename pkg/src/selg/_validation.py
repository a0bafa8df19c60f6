"""Input validation helpers shared by the public entry points."""

import numpy as np
import torch

SAMPLE_RATE = 16000
VIDEO_FPS = 15


class InvalidInputError(ValueError):
    """Raised when an input violates a documented precondition."""


def check_finite(x, name="input"):
    if isinstance(x, torch.Tensor):
        ok = bool(torch.isfinite(x).all())
    else:
        ok = bool(np.all(np.isfinite(x)))
    if not ok:
        raise InvalidInputError(f"{name} contains non-finite values")
    return x


def check_waveform(wave, min_len=1, name="waveform"):
    """Return `wave` as a 1-D float array after checking shape and values."""
    arr = wave if isinstance(wave, torch.Tensor) else np.asarray(wave)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be 1-D (mono), got shape {tuple(arr.shape)}")
    if arr.shape[0] < min_len:
        raise InvalidInputError(
            f"{name} has {arr.shape[0]} samples, need at least {min_len}"
        )
    check_finite(arr, name)
    return arr


def check_same_length(*arrays, names=None):
    lengths = [a.shape[-1] for a in arrays]
    if len(set(lengths)) != 1:
        label = ", ".join(names) if names else "inputs"
        raise InvalidInputError(f"length mismatch between {label}: {lengths}")


def check_probability(p, name):
    if not 0.0 <= p < 1.0:
        raise InvalidInputError(f"{name} must lie in [0, 1), got {p}")
    return p


def expected_video_frames(n_samples):
    """Number of whole 15 FPS frames covered by `n_samples` audio samples."""
    return (n_samples * VIDEO_FPS) // SAMPLE_RATE


def check_cue_duration(n_frames, n_samples, name="cue"):
    """Cue streams must cover the audio duration within one video frame."""
    covered = n_samples * VIDEO_FPS / SAMPLE_RATE
    if abs(n_frames - covered) > 1.0:
        raise InvalidInputError(
            f"{name} has {n_frames} frames but the audio spans {covered:.2f} frames"
        )
