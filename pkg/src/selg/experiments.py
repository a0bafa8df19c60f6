"""Desk-scale experiments: the overfit sanity run and the six-system trend study.

Trend-study results are cached under ``$SELG_CACHE`` (default
``~/.cache/selg``), keyed by a hash of the study configuration and the
package source, so re-running the acceptance suite does not retrain.
"""

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datasim import SimConfig, build_corpus, simulate_sample, speaker_pools
from .evaluation import evaluate, report_from_json, write_report
from .losses import LossConfig, si_snr
from .model import VARIANTS, desk_config, load_checkpoint, save_checkpoint
from .training import ManifestDataset, TrainConfig, finetune_infonce, train

__all__ = [
    "cache_root",
    "source_hash",
    "OverfitResult",
    "overfit_experiment",
    "TrendConfig",
    "trend_study",
    "trend_checks",
    "SYSTEMS",
]

log = logging.getLogger(__name__)

# Table-1 row number -> variant preset
SYSTEMS = {1: "usev", 2: "seg", 3: "seg_infonce", 4: "selg_concat", 5: "selg_attention", 6: "selg"}


def cache_root():
    return Path(os.environ.get("SELG_CACHE", Path.home() / ".cache" / "selg"))


def source_hash():
    """Digest of the package modules that influence experiment results."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        if path.name in ("cli.py", "estimator.py"):
            continue
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# overfit sanity


@dataclass
class OverfitResult:
    si_snri: float
    steps: int
    losses: list
    seconds: float
    passed: bool


def overfit_experiment(variant="selg_attention", n_samples=8, seconds=1.0, max_steps=2000, target_db=10.0,
                       lr=1e-3, check_every=25, seed=0):
    """Train a desk model on `n_samples` mixtures until their mean SI-SNRi exceeds `target_db`.

    Every optimizer step sees all samples (effective batch = `n_samples`).
    Returns the per-step training losses, which are bit-reproducible in
    deterministic mode.
    """
    sim = SimConfig(counts={"train": n_samples, "val": 0, "test": 0}, duration=(seconds, seconds), seed=seed)
    pools = speaker_pools(sim)
    samples = [simulate_sample(sim, "train", i, pools["train"]) for i in range(n_samples)]
    mix_db = float(np.mean([
        float(si_snr(torch.as_tensor(s.target, dtype=torch.float64), torch.as_tensor(s.mixture, dtype=torch.float64)))
        for s in samples
    ]))
    cfg = TrainConfig(
        lr=lr, warmup_steps=0, effective_batch=n_samples, batch_size=n_samples,
        max_epochs=max_steps, max_steps=max_steps, val_every=check_every,
        plateau_patience=10**6, early_stop=10**6 + 1, seed=seed, deterministic=True,
    )
    losses = []
    state = {"si_snri": -np.inf}

    def monitor(trainer, row):
        losses.append(row["train_loss"])
        if row["val_loss"] is None:
            return False
        # validation runs in eval mode on the same samples: SI-SNRi = SI-SNR(est) - SI-SNR(mix)
        state["si_snri"] = -row["val_loss"] - mix_db
        return state["si_snri"] > target_db

    torch.manual_seed(seed)
    t0 = time.time()
    result = train(desk_config(variant), samples, samples, cfg, callbacks=[monitor])
    final = float(evaluate(result.model, samples).full)
    return OverfitResult(si_snri=final, steps=result.steps, losses=losses,
                         seconds=time.time() - t0, passed=final > target_db)


# --------------------------------------------------------------------------
# trend study


@dataclass(frozen=True)
class TrendConfig:
    """Equal-budget desk study: every system gets ``base_epochs + extra_epochs``.

    SI-SNR-only systems train from scratch for the whole budget; InfoNCE
    systems fine-tune the matching base checkpoint (taken at ``base_epochs``)
    for ``extra_epochs``.
    """

    sim: dict = field(default_factory=lambda: SimConfig().to_dict())
    base_epochs: int = 6
    extra_epochs: int = 2
    lr: float = 1e-3
    warmup_steps: int = 500
    effective_batch: int = 8
    batch_size: int = 8
    crop_seconds: float = 1.0
    val_clip_seconds: float = 2.0
    seed: int = 0

    def train_config(self, epochs):
        return TrainConfig(
            lr=self.lr, warmup_steps=self.warmup_steps, effective_batch=self.effective_batch,
            batch_size=self.batch_size, crop_seconds=self.crop_seconds, val_clip_seconds=self.val_clip_seconds,
            max_epochs=epochs, seed=self.seed, loss=LossConfig(),
        )

    def key(self):
        blob = json.dumps(asdict(self), sort_keys=True) + source_hash()
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _corpus(cfg, root):
    sim = SimConfig.from_dict(cfg.sim)
    corpus_key = hashlib.sha256((json.dumps(sim.to_dict(), sort_keys=True) + source_hash()).encode()).hexdigest()[:12]
    corpus = root / f"corpus-{corpus_key}"
    if not (corpus / "manifest.jsonl").exists():
        log.info("building corpus in %s", corpus)
        build_corpus(sim, corpus)
    manifest = corpus / "manifest.jsonl"
    return (ManifestDataset(manifest, "train"), ManifestDataset(manifest, "val"), ManifestDataset(manifest, "test"))


def trend_study(cfg=TrendConfig(), root=None, progress=None):
    """Train and evaluate the six systems; returns ``{system number: report}``.

    Reuses a cached result when the configuration and source are unchanged.
    """
    root = Path(root) if root is not None else cache_root()
    run_dir = root / f"trend-{cfg.key()}"
    summary_path = run_dir / "summary.json"
    if summary_path.exists():
        data = json.loads(summary_path.read_text())
        return {int(k): report_from_json(v) for k, v in data["reports"].items()}, data["meta"]

    say = progress or log.info
    train_data, val_data, test_data = _corpus(cfg, root)
    t0 = time.time()
    ckpt = {}

    for name in ("usev", "seg", "selg_concat", "selg_attention"):
        out = run_dir / name
        if (out / "final.ckpt").exists():
            ckpt[name] = out / "final.ckpt"
            continue
        say(f"training {name}: {cfg.base_epochs} + {cfg.extra_epochs} epochs")
        base = train(desk_config(name), train_data, val_data, cfg.train_config(cfg.base_epochs), out_dir=out / "base")
        save_checkpoint(out / "base" / "selected.ckpt", base.model)
        # continue SI-SNR-only training from the same point the fine-tunes start from
        cont = train(desk_config(name), train_data, val_data, cfg.train_config(cfg.extra_epochs),
                     out_dir=out / "extra", init=out / "base" / "selected.ckpt")
        save_checkpoint(out / "final.ckpt", cont.model)
        ckpt[name] = out / "final.ckpt"

    teacher, _ = load_checkpoint(ckpt["usev"])
    for name, base_name in (("seg_infonce", "seg"), ("selg", "selg_attention")):
        out = run_dir / name
        if (out / "final.ckpt").exists():
            ckpt[name] = out / "final.ckpt"
            continue
        say(f"fine-tuning {name} from {base_name}")
        res = finetune_infonce(run_dir / base_name / "base" / "selected.ckpt", train_data, val_data,
                               cfg.train_config(cfg.extra_epochs), out_dir=out,
                               teacher=teacher if name == "seg_infonce" else None)
        save_checkpoint(out / "final.ckpt", res.model)
        ckpt[name] = out / "final.ckpt"

    reports = {}
    for number, name in SYSTEMS.items():
        say(f"evaluating Sys {number} ({name})")
        model, _ = load_checkpoint(ckpt[name])
        rep = evaluate(model, test_data, VARIANTS[name], variant_name=name)
        write_report(rep, run_dir / name / "eval")
        reports[number] = rep
    meta = {"seconds": round(time.time() - t0, 1), "config": asdict(cfg), "source": source_hash()}
    summary_path.write_text(json.dumps(
        {"reports": {k: v.to_json() for k, v in reports.items()}, "meta": meta}, indent=2))
    return reports, meta


def trend_checks(reports):
    """The four Table-1 orderings as ``{label: (value, threshold, passed)}``."""
    r = reports
    checks = {}
    margin_a = min(r[4].full - r[1].full, r[4].full - r[2].full)
    checks["(a) Sys4 - max(Sys1, Sys2) full"] = (margin_a, 1.0, margin_a >= 1.0)
    margin_b = r[5].full - r[4].full
    checks["(b) Sys5 - Sys4 full"] = (margin_b, 0.0, margin_b >= 0.0)
    margin_c = r[3].full - r[2].full
    checks["(c) Sys3 - Sys2 full"] = (margin_c, 0.3, margin_c >= 0.3)
    gap = min(r[1].wo_missing - r[1].w_missing, r[2].wo_missing - r[2].w_missing)
    checks["(d) unimodal w/o - w/ missing gap"] = (gap, 5.0, gap >= 5.0)
    return checks
