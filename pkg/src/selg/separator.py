"""Cue-conditioned mask estimation.

Two mask estimators share the dual-path BLSTM backbone:

* :class:`AttentionMaskEstimator` lets each visual cue query the mixture
  stream through a transformer cross-attention layer, adds the attended
  branches to the mixture stream and runs a dual-path block; the stack is
  repeated ``R`` times.
* :class:`ConcatMaskEstimator` is the baseline that concatenates the
  upsampled cues with the mixture stream before the dual-path stack.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ._validation import InvalidInputError, check_probability
from .audio import overlap_add

__all__ = [
    "SeparatorConfig",
    "CuePresence",
    "CrossAttention",
    "DualPathBlock",
    "AttentionMaskEstimator",
    "ConcatMaskEstimator",
    "chunk_count",
    "segment",
    "merge_chunks",
    "fuse",
]


@dataclass(frozen=True)
class SeparatorConfig:
    embed_dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    attn_dropout: float = 0.3
    dp_hidden: int = 128
    chunk: int = 100
    repeats: int = 4

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise InvalidInputError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.chunk < 1 or self.repeats < 1:
            raise InvalidInputError("chunk and repeats must be >= 1")
        check_probability(self.attn_dropout, "attention dropout")

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    @property
    def hop(self):
        return max(self.chunk // 2, 1)


@dataclass(frozen=True)
class CuePresence:
    has_lip: bool = True
    has_gesture: bool = True

    def __post_init__(self):
        if not (self.has_lip or self.has_gesture):
            raise InvalidInputError("at least one visual cue must be present")


def fuse(att_lip, att_gesture, presence=None):
    """Element-wise sum of the present attended branches.

    `att_lip` / `att_gesture` may be ``None`` for an absent cue.  In batched
    use they may instead be multiplied by a per-sample presence mask before
    calling; an absent branch then contributes exact zeros.
    """
    if presence is not None:
        att_lip = att_lip if presence.has_lip else None
        att_gesture = att_gesture if presence.has_gesture else None
    if att_lip is None and att_gesture is None:
        raise InvalidInputError("fuse needs at least one present branch")
    if att_lip is None:
        return att_gesture
    if att_gesture is None:
        return att_lip
    if att_lip.shape != att_gesture.shape:
        raise InvalidInputError(f"branch shapes differ: {tuple(att_lip.shape)} vs {tuple(att_gesture.shape)}")
    return att_lip + att_gesture


class CrossAttention(nn.Module):
    """Post-norm transformer cross-attention layer (query from the cue, keys/values from the mixture)."""

    def __init__(self, config=SeparatorConfig()):
        super().__init__()
        d = config.embed_dim
        self.heads = config.heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, config.ffn_dim),
            nn.ReLU(),
            nn.Dropout(config.attn_dropout),
            nn.Linear(config.ffn_dim, d),
        )
        self.drop = nn.Dropout(config.attn_dropout)

    def _split(self, x):
        b, t, d = x.shape
        return x.view(b, t, self.heads, d // self.heads).transpose(1, 2)

    def attend(self, query, memory, need_weights=False):
        """Multi-head attention only; returns ``(out, weights or None)``."""
        q, k, v = self._split(self.q_proj(query)), self._split(self.k_proj(memory)), self._split(self.v_proj(memory))
        # dropout is applied to the attention output, not the T x T weights
        if need_weights:
            scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
            weights = scores.softmax(dim=-1)
            out = weights @ v
        else:
            weights = None
            out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).flatten(2)
        return self.out_proj(out), weights

    def forward(self, query, memory, need_weights=False):
        # query (cue): [B, T, D]; memory (mixture): [B, T, D]
        if query.shape[:-1] != memory.shape[:-1]:
            raise InvalidInputError(
                f"cue and mixture streams differ in length: {tuple(query.shape)} vs {tuple(memory.shape)}"
            )
        att, weights = self.attend(query, memory, need_weights)
        x = self.norm1(query + self.drop(att))
        x = self.norm2(x + self.drop(self.ffn(x)))
        return (x, weights) if need_weights else x


# --------------------------------------------------------------------------
# dual-path processing


def chunk_count(n_frames, chunk, hop):
    """Chunks needed to cover `n_frames` with 50%-overlap windows (tail zero-padded)."""
    return -(-max(n_frames - chunk, 0) // hop) + 1


def segment(x, chunk, hop):
    """``[B, T, D]`` -> ``[B, S, chunk, D]``, zero-padding the tail."""
    n_t = x.shape[1]
    s = chunk_count(n_t, chunk, hop)
    pad = (s - 1) * hop + chunk - n_t
    x = F.pad(x, (0, 0, 0, pad))
    return x.unfold(1, chunk, hop).transpose(-1, -2)


def merge_chunks(chunks, hop, n_frames):
    """Overlap-add ``[B, S, chunk, D]`` back to ``[B, n_frames, D]``."""
    out = overlap_add(chunks.permute(0, 3, 1, 2), hop)
    return out.transpose(1, 2)[:, :n_frames]


class _PathRNN(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.rnn = nn.LSTM(dim, hidden, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * hidden, dim)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        y, _ = self.rnn(x)
        return x + self.norm(self.proj(y))


class DualPathBlock(nn.Module):
    """Intra-chunk then inter-chunk BLSTM with projection, layer norm and residual."""

    def __init__(self, config=SeparatorConfig()):
        super().__init__()
        self.chunk = config.chunk
        self.hop = config.hop
        self.intra = _PathRNN(config.embed_dim, config.dp_hidden)
        self.inter = _PathRNN(config.embed_dim, config.dp_hidden)

    def forward(self, x):
        # x: [B, T, D]
        b, n_t, d = x.shape
        chunks = segment(x, self.chunk, self.hop)
        s, k = chunks.shape[1:3]
        y = self.intra(chunks.reshape(b * s, k, d)).view(b, s, k, d)
        y = y.transpose(1, 2).reshape(b * k, s, d)
        y = self.inter(y).view(b, k, s, d).transpose(1, 2)
        return merge_chunks(y, self.hop, n_t)


# --------------------------------------------------------------------------
# mask estimators


def _masked(x, present):
    if present is None:
        return x
    return x * present.to(x.dtype)[:, None, None]


class AttentionMaskEstimator(nn.Module):
    """R blocks of {cross-attention per cue, additive fusion, dual-path}, then a ReLU mask head."""

    def __init__(self, n_filters, cues, config=SeparatorConfig(), lip_dim=64, gesture_dim=64):
        super().__init__()
        self.cues = tuple(cues)
        d = config.embed_dim
        self.bottleneck = nn.Linear(n_filters, d)
        self.cue_proj = nn.ModuleDict()
        self.attn = nn.ModuleDict()
        dims = {"lip": lip_dim, "gesture": gesture_dim}
        for cue in self.cues:
            self.cue_proj[cue] = nn.Linear(dims[cue], d)
            self.attn[cue] = nn.ModuleList([CrossAttention(config) for _ in range(config.repeats)])
        self.blocks = nn.ModuleList([DualPathBlock(config) for _ in range(config.repeats)])
        self.mask_head = nn.Linear(d, n_filters)

    def forward(self, mix_emb, cues, present=None):
        """`cues` maps cue name -> upsampled ``[B, T, D_cue]`` or ``None`` (absent for the whole batch).

        `present` optionally maps cue name -> ``[B]`` 0/1 tensor; absent
        samples get an all-zero attended branch.
        """
        present = present or {}
        queries = {
            name: self.cue_proj[name](cues[name])
            for name in self.cues if cues.get(name) is not None
        }
        if not queries:
            raise InvalidInputError("no visual cue available for mask estimation")
        stream = self.bottleneck(mix_emb)
        for i, block in enumerate(self.blocks):
            branches = {
                name: _masked(self.attn[name][i](q, stream), present.get(name))
                for name, q in queries.items()
            }
            # the mixture stream skips past attention so frame t keeps its own content
            stream = block(stream + fuse(branches.get("lip"), branches.get("gesture")))
        return torch.relu(self.mask_head(stream))


class ConcatMaskEstimator(nn.Module):
    """Baseline: concatenate bottlenecked mixture and upsampled cues, project, dual-path stack."""

    def __init__(self, n_filters, cues, config=SeparatorConfig(), lip_dim=64, gesture_dim=64):
        super().__init__()
        self.cues = tuple(cues)
        d = config.embed_dim
        self.dims = {"lip": lip_dim, "gesture": gesture_dim}
        self.bottleneck = nn.Linear(n_filters, d)
        self.fuse_proj = nn.Linear(d + sum(self.dims[c] for c in self.cues), d)
        self.blocks = nn.ModuleList([DualPathBlock(config) for _ in range(config.repeats)])
        self.mask_head = nn.Linear(d, n_filters)

    def forward(self, mix_emb, cues, present=None):
        present = present or {}
        stream = self.bottleneck(mix_emb)
        parts = [stream]
        for name in self.cues:
            cue = cues.get(name)
            if cue is None:
                cue = stream.new_zeros(*stream.shape[:-1], self.dims[name])
            parts.append(_masked(cue, present.get(name)))
        stream = self.fuse_proj(torch.cat(parts, dim=-1))
        for block in self.blocks:
            stream = block(stream)
        return torch.relu(self.mask_head(stream))
