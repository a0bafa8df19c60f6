"""Training loop, learning-rate schedule and InfoNCE fine-tuning."""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import torch

from ._validation import SAMPLE_RATE, InvalidInputError
from .datasim import GRID_FRAMES, GRID_SAMPLES, load_sample, read_manifest
from .losses import LossConfig, info_nce, si_snr
from .model import SeLG, load_checkpoint, read_checkpoint, save_checkpoint

__all__ = [
    "TrainConfig",
    "Batch",
    "collate",
    "ManifestDataset",
    "LRSchedule",
    "lr_schedule",
    "Trainer",
    "TrainResult",
    "TrainingDiverged",
    "train",
    "finetune_infonce",
]

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    warmup_steps: int = 15000
    plateau_patience: int = 6
    early_stop: int = 10
    effective_batch: int = 64
    batch_size: int = 4
    max_clip_seconds: float = 10.0
    crop_seconds: Optional[float] = None
    val_clip_seconds: Optional[float] = None
    weight_decay: float = 1e-2
    grad_clip: Optional[float] = 5.0
    max_epochs: int = 200
    max_steps: Optional[int] = None
    val_every: int = 1
    seed: int = 0
    deterministic: bool = True
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.warmup_steps < 0:
            raise InvalidInputError("warmup_steps must be >= 0")
        if self.plateau_patience >= self.early_stop:
            raise InvalidInputError("plateau_patience must be smaller than early_stop")
        if self.effective_batch % self.batch_size:
            raise InvalidInputError(
                f"effective batch {self.effective_batch} is not a multiple of batch size {self.batch_size}"
            )

    @property
    def accumulation(self):
        return self.effective_batch // self.batch_size

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossConfig(**d["loss"])
        return cls(**d)


# --------------------------------------------------------------------------
# data


class ManifestDataset:
    """Lazily loads samples of one split from a manifest."""

    def __init__(self, manifest, split, root=None):
        manifest = Path(manifest)
        self.root = Path(root) if root is not None else manifest.parent
        self.rows = read_manifest(manifest, split)

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, i):
        return load_sample(self.rows[i], self.root)


@dataclass
class Batch:
    ids: List[str]
    mixture: torch.Tensor
    target: torch.Tensor
    lips: torch.Tensor
    poses: torch.Tensor
    has_lip: torch.Tensor
    has_gesture: torch.Tensor


def collate(samples, max_samples=None, rng=None, lip_size=None):
    """Stack samples, cropping all to a common length on the 3-frame/3200-sample grid.

    With `rng`, each sample's crop offset is random (grid-aligned); otherwise
    the crop starts at 0.  Missing cues are filled with zeros and flagged.
    """
    n = min(len(s.target) for s in samples)
    n = (n // GRID_SAMPLES) * GRID_SAMPLES or n
    if max_samples is not None:
        n = min(n, max(GRID_SAMPLES, (max_samples // GRID_SAMPLES) * GRID_SAMPLES))
    n_video = n * 15 // SAMPLE_RATE
    if lip_size is None:
        lip_size = next((s.lip.frames.shape[1:] for s in samples if s.lip is not None), (24, 24))
    mix, tgt, lips, poses = [], [], [], []
    for s in samples:
        slots = (len(s.target) - n) // GRID_SAMPLES
        k = int(rng.integers(0, slots + 1)) if rng is not None and slots > 0 else 0
        a, v = k * GRID_SAMPLES, k * GRID_FRAMES
        mix.append(np.asarray(s.mixture[a:a + n], dtype=np.float32))
        tgt.append(np.asarray(s.target[a:a + n], dtype=np.float32))
        lips.append(s.lip.frames[v:v + n_video] if s.lip is not None else np.zeros((n_video, *lip_size), np.float32))
        poses.append(s.gesture.frames[v:v + n_video] if s.gesture is not None else np.zeros((n_video, 10, 3), np.float32))
    return Batch(
        ids=[s.id for s in samples],
        mixture=torch.from_numpy(np.stack(mix)),
        target=torch.from_numpy(np.stack(tgt)),
        lips=torch.from_numpy(np.stack([_pad_frames(x, n_video) for x in lips])),
        poses=torch.from_numpy(np.stack([_pad_frames(x, n_video) for x in poses])),
        has_lip=torch.tensor([s.lip is not None for s in samples], dtype=torch.float32),
        has_gesture=torch.tensor([s.gesture is not None for s in samples], dtype=torch.float32),
    )


def _pad_frames(x, n):
    if len(x) >= n:
        return x[:n]
    return np.concatenate([x, np.repeat(x[-1:], n - len(x), axis=0)])


# --------------------------------------------------------------------------
# schedule


class LRSchedule:
    """Linear warm-up (attention models only) then halving on validation plateaus."""

    def __init__(self, base_lr, warmup_steps=0, patience=6):
        self.base_lr = base_lr
        self.warmup_steps = warmup_steps
        self.patience = patience
        self.scale = 1.0
        self.best = math.inf
        self.bad_epochs = 0
        self.halvings = 0

    def lr(self, step):
        """Learning rate for optimizer step `step` (1-based)."""
        ramp = min(1.0, step / self.warmup_steps) if self.warmup_steps > 0 else 1.0
        return self.base_lr * ramp * self.scale

    def epoch_end(self, val_loss):
        """Record a validation loss; returns True if it is a new best."""
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.scale *= 0.5
            self.halvings += 1
            self.bad_epochs = 0
        return False


def lr_schedule(step, epoch_metrics, cfg, warmup=True):
    """Learning rate at optimizer step `step` given the validation losses of finished epochs."""
    sched = LRSchedule(cfg.lr, cfg.warmup_steps if warmup else 0, cfg.plateau_patience)
    for v in epoch_metrics:
        sched.epoch_end(v)
    return sched.lr(step)


# --------------------------------------------------------------------------
# trainer


@dataclass
class TrainResult:
    model: SeLG
    history: list
    best_val: float
    best_path: Optional[Path] = None
    steps: int = 0
    stopped: str = ""


def _seed_everything(seed, deterministic):
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


class Trainer:
    """Gradient-accumulating trainer with BVL-driven LR halving and early stopping.

    `teacher` supplies frozen lip embeddings for InfoNCE when the model has
    no lip encoder of its own (gesture-only systems).
    """

    def __init__(self, model, cfg=TrainConfig(), teacher=None, out_dir=None, callbacks=()):
        self.model = model
        self.cfg = cfg
        self.variant = model.config.variant
        self.teacher = teacher
        if self.variant.use_infonce and model.lip_encoder is None and teacher is None:
            raise InvalidInputError("gesture-only InfoNCE training needs a lip-only teacher model")
        if self.variant.use_infonce:
            lip_dim = (teacher or model).config.lip.out_dim
            if lip_dim != model.config.gesture.out_dim:
                raise InvalidInputError(
                    f"InfoNCE needs equal embedding widths: lip {lip_dim} vs gesture {model.config.gesture.out_dim}"
                )
        if teacher is not None:
            teacher.eval()
            for p in teacher.parameters():
                p.requires_grad_(False)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.callbacks: List[Callable] = list(callbacks)
        warmup = cfg.warmup_steps if self.variant.fusion == "attention" else 0
        self.schedule = LRSchedule(cfg.lr, warmup, cfg.plateau_patience)
        self.optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.step = 0
        self.history = []

    # -- losses -----------------------------------------------------------

    def _forward(self, batch):
        m = self.model
        return m(
            batch.mixture,
            lips=batch.lips if m.lip_encoder is not None else None,
            poses=batch.poses if m.gesture_encoder is not None else None,
            has_lip=batch.has_lip,
            has_gesture=batch.has_gesture,
        )

    def sample_losses(self, batch, out=None):
        """Per-sample training objective ``[B]`` (SI-SNR loss plus masked InfoNCE if enabled)."""
        out = self._forward(batch) if out is None else out
        loss = -si_snr(batch.target, out.estimate, self.cfg.loss.eps)
        if self.variant.use_infonce:
            if self.model.lip_encoder is not None:
                lip_emb = out.lip_emb
            else:
                with torch.no_grad():
                    lip_emb = self.teacher.lip_encoder(batch.lips)
            nce = info_nce(lip_emb, out.gesture_emb, self.cfg.loss.kappa)
            paired = (batch.has_lip * batch.has_gesture).bool()
            nce = torch.where(paired, nce, torch.zeros_like(nce))
            loss = loss + self.cfg.loss.infonce_weight * nce
        return loss

    @torch.no_grad()
    def validate(self, data):
        """Mean SI-SNR loss over `data` (InfoNCE excluded so BVL is comparable across stages)."""
        if len(data) == 0:
            return math.nan
        self.model.eval()
        total, count = 0.0, 0
        max_len = int((self.cfg.val_clip_seconds or self.cfg.max_clip_seconds) * SAMPLE_RATE)
        try:
            for i in range(len(data)):
                batch = collate([data[i]], max_samples=max_len)
                out = self._forward(batch)
                total += float(-si_snr(batch.target.double(), out.estimate.double(), self.cfg.loss.eps).sum())
                count += 1
        finally:
            self.model.train()
        return total / count

    # -- loop -------------------------------------------------------------

    def _micro_batches(self, data, rng):
        order = rng.permutation(len(data))
        bs = self.cfg.batch_size
        for start in range(0, len(order), bs):
            yield [data[int(i)] for i in order[start:start + bs]]

    def _optimizer_step(self, count):
        for p in self.model.parameters():
            if p.grad is not None:
                p.grad.div_(count)
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.step += 1
        lr = self.schedule.lr(self.step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)

    def run_epoch(self, data, rng):
        """One pass over `data`; returns the mean training objective."""
        self.model.train()
        crop = self.cfg.crop_seconds or self.cfg.max_clip_seconds
        max_len = int(crop * SAMPLE_RATE)
        pending, seen, total = 0, 0, 0.0
        accum_target = self.cfg.effective_batch
        self.optimizer.zero_grad(set_to_none=True)
        for group in self._micro_batches(data, rng):
            batch = collate(group, max_samples=max_len, rng=rng)
            losses = self.sample_losses(batch)
            if not bool(torch.isfinite(losses).all()):
                raise TrainingDiverged(f"non-finite loss at step {self.step + 1}, samples {batch.ids}")
            losses.sum().backward()
            pending += len(group)
            seen += len(group)
            total += float(losses.detach().sum())
            if pending >= accum_target:
                self._optimizer_step(pending)
                pending = 0
                if self.cfg.max_steps is not None and self.step >= self.cfg.max_steps:
                    break
        if pending:
            self._optimizer_step(pending)
        return total / max(seen, 1)

    def fit(self, train_data, val_data=None):
        cfg = self.cfg
        _seed_everything(cfg.seed, cfg.deterministic)
        rng = np.random.default_rng(cfg.seed)
        val_data = train_data if val_data is None else val_data
        best_val, best_epoch, stopped = math.inf, 0, "max_epochs"
        best_state = None
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.time()
            train_loss = self.run_epoch(train_data, rng)
            row = {"epoch": epoch, "step": self.step, "lr": self.schedule.lr(max(self.step, 1)),
                   "train_loss": train_loss, "val_loss": None, "bvl": None}
            if epoch % cfg.val_every == 0 or self._out_of_steps():
                val_loss = self.validate(val_data)
                improved = self.schedule.epoch_end(val_loss)
                if improved:
                    best_val, best_epoch = val_loss, epoch
                    best_state = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
                    if self.out_dir is not None:
                        save_checkpoint(self.out_dir / "best.ckpt", self.model, {"epoch": epoch, "val_loss": val_loss})
                row.update(val_loss=val_loss, bvl=best_val)
            row["seconds"] = round(time.time() - t0, 3)
            self.history.append(row)
            self._log(row)
            if any(cb(self, row) for cb in self.callbacks):
                stopped = "callback"
                break
            if row["val_loss"] is not None and epoch - best_epoch >= cfg.early_stop:
                stopped = "early_stop"
                break
            if self._out_of_steps():
                stopped = "max_steps"
                break
        if best_state is not None:
            self.model.load_state_dict(best_state)
        return TrainResult(
            model=self.model,
            history=self.history,
            best_val=best_val,
            best_path=(self.out_dir / "best.ckpt") if self.out_dir is not None and best_state is not None else None,
            steps=self.step,
            stopped=stopped,
        )

    def _out_of_steps(self):
        return self.cfg.max_steps is not None and self.step >= self.cfg.max_steps

    def _log(self, row):
        log.info("epoch %(epoch)d step %(step)d lr %(lr).2e train %(train_loss).3f val %(val_loss)s", row)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            with open(self.out_dir / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps({k: row[k] for k in ("epoch", "step", "lr", "train_loss", "val_loss", "bvl")}) + "\n")


def train(model_config, train_data, val_data=None, cfg=TrainConfig(), out_dir=None, init=None,
          teacher=None, callbacks=()):
    """Train a model for `model_config` and return a :class:`TrainResult`.

    `init` optionally names a checkpoint whose weights initialize the model;
    its architecture must match `model_config`.
    """
    torch.manual_seed(cfg.seed)
    if init is not None:
        model, _ = load_checkpoint(init, expected=model_config)
    else:
        model = SeLG(model_config)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        if log_path.exists():
            log_path.unlink()
    trainer = Trainer(model, cfg, teacher=teacher, out_dir=out_dir, callbacks=callbacks)
    return trainer.fit(train_data, val_data)


def finetune_infonce(base_checkpoint, train_data, val_data=None, cfg=TrainConfig(), out_dir=None,
                     teacher=None, callbacks=()):
    """Resume from an SI-SNR-only checkpoint with the InfoNCE term switched on.

    The optimizer and schedule restart from their initial state.
    """
    base_config, _, _ = read_checkpoint(base_checkpoint)
    if base_config.variant.use_infonce:
        raise InvalidInputError(f"{base_checkpoint}: base checkpoint was already trained with InfoNCE")
    if base_config.variant.cues == "lip":
        raise InvalidInputError(f"{base_checkpoint}: lip-only systems have no gesture branch to align")
    target = base_config.with_variant(replace(base_config.variant, use_infonce=True))
    return train(target, train_data, val_data, cfg, out_dir=out_dir, init=base_checkpoint,
                 teacher=teacher, callbacks=callbacks)
