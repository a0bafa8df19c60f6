"""SI-SNR, gesture-to-lip InfoNCE, and the combined training objective."""

from dataclasses import dataclass

import torch

from ._validation import InvalidInputError

__all__ = ["LossConfig", "si_snr", "si_snr_loss", "info_nce", "total_loss"]


@dataclass(frozen=True)
class LossConfig:
    kappa: float = 0.07
    eps: float = 1e-8
    infonce_weight: float = 1.0

    def __post_init__(self):
        if self.kappa <= 0 or self.eps <= 0:
            raise InvalidInputError("kappa and eps must be positive")


def si_snr(s, s_hat, eps=1e-8):
    """Scale-invariant SNR in dB of `s_hat` against reference `s` (last axis is time).

    ``alpha = <s_hat, s> / |s|^2``; returns
    ``20 log10(|alpha s| / |s_hat - alpha s|)`` with `eps` added to the
    squared reference norm, the residual norm and the log argument.
    """
    s = torch.as_tensor(s)
    s_hat = torch.as_tensor(s_hat, dtype=s.dtype)
    if s.shape != s_hat.shape:
        raise InvalidInputError(f"length mismatch: reference {tuple(s.shape)} vs estimate {tuple(s_hat.shape)}")
    energy = s.pow(2).sum(-1, keepdim=True)
    if bool((energy == 0).any()):
        raise InvalidInputError("reference signal is identically zero")
    alpha = (s_hat * s).sum(-1, keepdim=True) / (energy + eps)
    target = alpha * s
    ratio = target.norm(dim=-1) / ((s_hat - target).norm(dim=-1) + eps)
    return 20.0 * torch.log10(ratio + eps)


def si_snr_loss(s, s_hat, eps=1e-8):
    """Negative SI-SNR, mean-reduced over any leading batch axes."""
    return -si_snr(s, s_hat, eps).mean()


def info_nce(lip_emb, gesture_emb, kappa=0.07):
    """Gesture-to-lip InfoNCE over the frames of one utterance (natural log, summed over frames).

    Row ``i`` classifies lip frame ``i`` among all lip frames of the same
    utterance using dot-product similarity with gesture frame ``i``.  The lip
    embedding is detached, so gradients reach only the gesture side.
    Accepts ``[T, D]`` or batched ``[B, T, D]`` inputs (returns ``[B]``).
    """
    if lip_emb.shape != gesture_emb.shape:
        raise InvalidInputError(
            f"shape mismatch: lip {tuple(lip_emb.shape)} vs gesture {tuple(gesture_emb.shape)}"
        )
    if lip_emb.shape[-2] == 0:
        raise InvalidInputError("InfoNCE needs at least one frame")
    logits = gesture_emb @ lip_emb.detach().transpose(-1, -2) / kappa
    logits = logits - logits.max(dim=-1, keepdim=True).values.detach()
    log_norm = logits.exp().sum(dim=-1).log()
    positive = logits.diagonal(dim1=-2, dim2=-1)
    return (log_norm - positive).sum(-1)


def total_loss(s, s_hat, lip_emb=None, gesture_emb=None, config=LossConfig(), use_infonce=False, pair_mask=None):
    """Mean over the batch of ``-SI-SNR + weight * InfoNCE``.

    `pair_mask` is an optional ``[B]`` 0/1 tensor; samples missing either
    cue contribute no InfoNCE term.
    """
    loss = -si_snr(s, s_hat, config.eps)
    if use_infonce:
        nce = info_nce(lip_emb, gesture_emb, config.kappa)
        if pair_mask is not None:
            nce = torch.where(pair_mask.bool(), nce, torch.zeros_like(nce))
        loss = loss + config.infonce_weight * nce
    return loss.mean()
