"""scikit-learn style front end: ``SpeakerExtractor().fit(samples).predict(samples)``."""

from pathlib import Path

import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import InvalidInputError
from .audio import CodecConfig
from .datasim import MixtureSample
from .evaluation import evaluate
from .losses import LossConfig
from .model import VARIANTS, ModelConfig, SeLG, VariantSpec, extract, load_checkpoint, save_checkpoint
from .separator import SeparatorConfig
from .training import TrainConfig, Trainer
from .visual import GestureEncoderConfig, LipEncoderConfig

__all__ = ["SpeakerExtractor", "check_samples"]


def check_samples(X, name="X"):
    """Validate a sequence of :class:`MixtureSample` (anything with ``len`` and indexing)."""
    if not hasattr(X, "__len__") or not hasattr(X, "__getitem__"):
        raise InvalidInputError(f"{name} must be an indexable sequence of MixtureSample")
    if len(X) == 0:
        raise InvalidInputError(f"{name} is empty")
    first = X[0]
    if not isinstance(first, MixtureSample):
        raise InvalidInputError(f"{name} must contain MixtureSample objects, got {type(first).__name__}")
    return X


class SpeakerExtractor(BaseEstimator):
    """Visually-conditioned target speaker extractor.

    Parameters mirror the model and training configuration; ``variant``
    selects the cue set, fusion and loss (see :data:`selg.model.VARIANTS`).
    A gesture-only InfoNCE variant needs ``teacher``, a fitted lip-only
    extractor (or checkpoint path) whose lip encoder provides the targets.
    ``init_checkpoint`` warm-starts from saved weights (InfoNCE fine-tuning).

    Attributes
    ----------
    model_ : SeLG
    history_ : list of per-epoch log rows
    n_steps_ : optimizer steps taken by :meth:`fit`
    """

    def __init__(
        self,
        variant="selg",
        n_filters=256,
        kernel_size=40,
        embed_dim=64,
        heads=4,
        ffn_dim=256,
        attn_dropout=0.3,
        dp_hidden=128,
        chunk=100,
        repeats=4,
        gesture_layers=5,
        gesture_hidden=32,
        gesture_dropout=0.3,
        lip_encoder="lite",
        lr=5e-4,
        warmup_steps=15000,
        effective_batch=64,
        batch_size=4,
        max_epochs=200,
        max_steps=None,
        crop_seconds=None,
        kappa=0.07,
        infonce_weight=1.0,
        seed=0,
        teacher=None,
        init_checkpoint=None,
    ):
        self.variant = variant
        self.n_filters = n_filters
        self.kernel_size = kernel_size
        self.embed_dim = embed_dim
        self.heads = heads
        self.ffn_dim = ffn_dim
        self.attn_dropout = attn_dropout
        self.dp_hidden = dp_hidden
        self.chunk = chunk
        self.repeats = repeats
        self.gesture_layers = gesture_layers
        self.gesture_hidden = gesture_hidden
        self.gesture_dropout = gesture_dropout
        self.lip_encoder = lip_encoder
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.effective_batch = effective_batch
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.max_steps = max_steps
        self.crop_seconds = crop_seconds
        self.kappa = kappa
        self.infonce_weight = infonce_weight
        self.seed = seed
        self.teacher = teacher
        self.init_checkpoint = init_checkpoint

    def _variant_spec(self):
        if isinstance(self.variant, VariantSpec):
            return self.variant
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        return VARIANTS[self.variant]

    def model_config(self):
        lip = LipEncoderConfig() if self.lip_encoder == "lite" else LipEncoderConfig.faithful()
        return ModelConfig(
            variant=self._variant_spec(),
            codec=CodecConfig(n_filters=self.n_filters, kernel_size=self.kernel_size),
            gesture=GestureEncoderConfig(self.gesture_layers, self.gesture_hidden, self.gesture_dropout),
            lip=lip,
            separator=SeparatorConfig(
                embed_dim=self.embed_dim, heads=self.heads, ffn_dim=self.ffn_dim,
                attn_dropout=self.attn_dropout, dp_hidden=self.dp_hidden,
                chunk=self.chunk, repeats=self.repeats,
            ),
        )

    def train_config(self):
        return TrainConfig(
            lr=self.lr,
            warmup_steps=self.warmup_steps,
            effective_batch=self.effective_batch,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            max_steps=self.max_steps,
            crop_seconds=self.crop_seconds,
            seed=self.seed,
            loss=LossConfig(kappa=self.kappa, infonce_weight=self.infonce_weight),
        )

    def _teacher_model(self):
        if self.teacher is None:
            return None
        if isinstance(self.teacher, SpeakerExtractor):
            check_is_fitted(self.teacher, "model_")
            return self.teacher.model_
        if isinstance(self.teacher, SeLG):
            return self.teacher
        model, _ = load_checkpoint(self.teacher)
        return model

    def fit(self, X, y=None, X_val=None):
        """Train on the samples in `X`; `X_val` drives LR halving and early stopping (defaults to `X`)."""
        X = check_samples(X)
        if X_val is not None:
            check_samples(X_val, "X_val")
        config = self.model_config()
        torch.manual_seed(self.seed)
        if self.init_checkpoint is not None:
            model, _ = load_checkpoint(self.init_checkpoint, expected=config)
        else:
            model = SeLG(config)
        trainer = Trainer(model, self.train_config(), teacher=self._teacher_model())
        result = trainer.fit(X, X_val)
        self.model_ = result.model
        self.history_ = result.history
        self.n_steps_ = result.steps
        self.best_val_loss_ = result.best_val
        return self

    def predict(self, X):
        """Return the extracted target waveform for every sample."""
        check_is_fitted(self, "model_")
        X = check_samples(X)
        return [extract(self.model_, s.mixture, lip=s.lip, gesture=s.gesture) for s in X]

    def transform(self, X):
        return self.predict(X)

    def evaluate(self, X):
        check_is_fitted(self, "model_")
        return evaluate(self.model_, check_samples(X))

    def score(self, X, y=None):
        """Mean SI-SNRi (dB) over `X`."""
        return self.evaluate(X).full

    def save(self, path):
        check_is_fitted(self, "model_")
        return save_checkpoint(Path(path), self.model_, {"params": _jsonable(self.get_params())})

    @classmethod
    def from_checkpoint(cls, path):
        model, _ = load_checkpoint(path)
        c = model.config
        est = cls(
            variant=c.variant, n_filters=c.codec.n_filters, kernel_size=c.codec.kernel_size,
            embed_dim=c.separator.embed_dim, heads=c.separator.heads, ffn_dim=c.separator.ffn_dim,
            attn_dropout=c.separator.attn_dropout, dp_hidden=c.separator.dp_hidden,
            chunk=c.separator.chunk, repeats=c.separator.repeats,
            gesture_layers=c.gesture.layers, gesture_hidden=c.gesture.hidden,
            gesture_dropout=c.gesture.dropout,
            lip_encoder=c.lip.variant if c.lip.variant == "lite" else "faithful",
        )
        est.model_ = model
        est.history_ = []
        est.n_steps_ = 0
        return est


def _jsonable(params):
    out = {}
    for k, v in params.items():
        if isinstance(v, (str, int, float, bool)) or v is None:
            out[k] = v
        elif isinstance(v, VariantSpec):
            out[k] = {"cues": v.cues, "fusion": v.fusion, "use_infonce": v.use_infonce}
        else:
            out[k] = str(v)
    return out
