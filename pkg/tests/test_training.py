import json

import numpy as np
import pytest
import torch

from selg._validation import InvalidInputError
from selg.audio import CodecConfig
from selg.datasim import SimConfig, build_corpus, simulate_sample, speaker_pools
from selg.model import VARIANTS, ModelConfig, SeLG, save_checkpoint
from selg.separator import SeparatorConfig
from selg.training import (
    LRSchedule,
    ManifestDataset,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    collate,
    finetune_infonce,
    lr_schedule,
    train,
)
from selg.visual import GestureEncoderConfig


def tiny_config(variant="selg_concat", dropout=0.0):
    return ModelConfig(
        variant=VARIANTS[variant],
        codec=CodecConfig(n_filters=16, kernel_size=40),
        gesture=GestureEncoderConfig(layers=1, hidden=32, dropout=dropout),
        separator=SeparatorConfig(embed_dim=16, heads=2, ffn_dim=32, attn_dropout=dropout,
                                  dp_hidden=8, chunk=20, repeats=1),
    )


@pytest.fixture(scope="module")
def samples():
    cfg = SimConfig(counts={"train": 8, "val": 4, "test": 0}, duration=(0.4, 0.4), seed=1)
    pools = speaker_pools(cfg)
    return (
        [simulate_sample(cfg, "train", i, pools["train"]) for i in range(8)],
        [simulate_sample(cfg, "val", i, pools["val"]) for i in range(4)],
    )


def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert lr_schedule(7500, [], cfg) == pytest.approx(2.5e-4)
    assert lr_schedule(15000, [], cfg) == pytest.approx(5e-4)
    assert lr_schedule(1, [], cfg, warmup=False) == pytest.approx(5e-4)
    assert lr_schedule(20000, [1.0] + [2.0] * 5, cfg) == pytest.approx(5e-4)
    assert lr_schedule(20000, [1.0] + [2.0] * 6, cfg) == pytest.approx(2.5e-4)
    assert lr_schedule(20000, [1.0] + [2.0] * 12, cfg) == pytest.approx(1.25e-4)


def test_lr_schedule_improvement_resets_patience():
    sched = LRSchedule(1.0, 0, patience=6)
    for v in [5, 6, 6, 6, 6, 6, 4, 6, 6, 6, 6, 6]:
        sched.epoch_end(v)
    assert sched.halvings == 0 and sched.lr(1) == 1.0


def test_warmup_only_for_attention(samples):
    attn = Trainer(SeLG(tiny_config("selg_attention")))
    concat = Trainer(SeLG(tiny_config("selg_concat")))
    assert attn.schedule.lr(7500) == pytest.approx(2.5e-4)
    assert concat.schedule.lr(1) == pytest.approx(5e-4)


def test_train_config_validation():
    assert TrainConfig().accumulation == 16
    with pytest.raises(InvalidInputError):
        TrainConfig(effective_batch=10, batch_size=4)
    with pytest.raises(InvalidInputError):
        TrainConfig(plateau_patience=10, early_stop=10)
    with pytest.raises(InvalidInputError):
        TrainConfig(warmup_steps=-1)
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()


def test_collate_crops_on_grid(samples):
    train_s, _ = samples
    batch = collate(train_s[:3], max_samples=3200)
    assert batch.mixture.shape == (3, 3200)
    assert batch.lips.shape[:2] == (3, 3) and batch.poses.shape == (3, 3, 10, 3)
    for i, s in enumerate(train_s[:3]):
        assert bool(batch.has_lip[i]) == (s.lip is not None)
        if s.lip is None:
            assert torch.count_nonzero(batch.lips[i]) == 0


def _params(model):
    return torch.cat([p.detach().flatten() for p in model.parameters()])


def test_gradient_accumulation_matches_full_batch(samples):
    train_s, _ = samples
    results = []
    for bs in (2, 8):
        torch.manual_seed(0)
        model = SeLG(tiny_config())
        cfg = TrainConfig(lr=1e-3, effective_batch=8, batch_size=bs, max_epochs=1, val_every=100, grad_clip=None)
        trainer = Trainer(model, cfg)
        trainer.run_epoch(train_s, np.random.default_rng(0))
        assert trainer.step == 1
        results.append(_params(model))
    torch.testing.assert_close(results[0], results[1], rtol=0, atol=1e-5)


def test_partial_final_group_is_stepped(samples):
    train_s, _ = samples
    trainer = Trainer(SeLG(tiny_config()), TrainConfig(effective_batch=6, batch_size=2))
    trainer.run_epoch(train_s, np.random.default_rng(0))
    assert trainer.step == 2


def test_early_stop_fires_after_ten_flat_epochs(samples):
    train_s, val_s = samples
    cfg = TrainConfig(lr=0.0, effective_batch=8, batch_size=8, max_epochs=50)
    result = train(tiny_config(), train_s, val_s, cfg)
    assert result.stopped == "early_stop"
    assert len(result.history) == 11
    lrs = [row["lr"] for row in result.history]
    assert all(lr == 0.0 for lr in lrs)


def test_plateau_halving_in_loop(samples):
    train_s, val_s = samples
    cfg = TrainConfig(lr=0.0, effective_batch=8, batch_size=8, max_epochs=8)
    trainer = Trainer(SeLG(tiny_config()), cfg)
    trainer.fit(train_s, val_s)
    assert trainer.schedule.halvings == 1


def test_training_is_deterministic(samples, tmp_path):
    train_s, val_s = samples
    cfg = TrainConfig(lr=1e-3, effective_batch=4, batch_size=2, max_epochs=2)
    model_cfg = tiny_config("selg_attention", dropout=0.3)
    a = train(model_cfg, train_s, val_s, cfg, out_dir=tmp_path / "a")
    b = train(model_cfg, train_s, val_s, cfg, out_dir=tmp_path / "b")
    assert [r["train_loss"] for r in a.history] == [r["train_loss"] for r in b.history]
    assert [r["val_loss"] for r in a.history] == [r["val_loss"] for r in b.history]
    rows = [json.loads(line) for line in (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2]
    assert set(rows[0]) == {"epoch", "step", "lr", "train_loss", "val_loss", "bvl"}
    assert (tmp_path / "a" / "best.ckpt").exists()


def test_nan_loss_aborts_with_diagnostic(samples):
    train_s, _ = samples
    bad = [s for s in train_s[:2]]
    bad[1] = type(bad[1])(**{**bad[1].__dict__, "target": np.full_like(bad[1].target, np.nan)})
    trainer = Trainer(SeLG(tiny_config()), TrainConfig(effective_batch=2, batch_size=2))
    with pytest.raises(TrainingDiverged) as err:
        trainer.run_epoch(bad, np.random.default_rng(0))
    assert "step 1" in str(err.value) and bad[1].id in str(err.value)


def test_gesture_infonce_needs_teacher():
    with pytest.raises(InvalidInputError):
        Trainer(SeLG(tiny_config("seg_infonce")))
    teacher = SeLG(tiny_config("usev"))
    Trainer(SeLG(tiny_config("seg_infonce")), teacher=teacher)
    narrow = tiny_config("seg_infonce")
    narrow = ModelConfig(variant=narrow.variant, codec=narrow.codec, gesture=GestureEncoderConfig(1, 8, 0.0),
                         separator=narrow.separator)
    with pytest.raises(InvalidInputError):
        Trainer(SeLG(narrow), teacher=teacher)


def test_teacher_stays_frozen(samples):
    train_s, _ = samples
    teacher = SeLG(tiny_config("usev"))
    before = _params(teacher).clone()
    trainer = Trainer(SeLG(tiny_config("seg_infonce")), TrainConfig(effective_batch=4, batch_size=4), teacher=teacher)
    trainer.run_epoch(train_s, np.random.default_rng(0))
    assert torch.equal(before, _params(teacher))


def test_finetune_with_zero_weight_matches_continued_training(samples, tmp_path):
    train_s, val_s = samples
    base = SeLG(tiny_config("selg_attention", dropout=0.3))
    save_checkpoint(tmp_path / "base.ckpt", base)
    cfg = TrainConfig(lr=1e-3, warmup_steps=2, effective_batch=4, batch_size=2, max_epochs=2)
    zero = TrainConfig.from_dict({**cfg.to_dict(), "loss": {"kappa": 0.07, "eps": 1e-8, "infonce_weight": 0.0}})
    tuned = finetune_infonce(tmp_path / "base.ckpt", train_s, val_s, zero)
    cont = train(base.config, train_s, val_s, cfg, init=tmp_path / "base.ckpt")
    assert tuned.model.config.variant.use_infonce
    assert [r["train_loss"] for r in tuned.history] == [r["train_loss"] for r in cont.history]
    torch.testing.assert_close(_params(tuned.model), _params(cont.model), rtol=0, atol=0)


def test_finetune_rejects_incompatible_base(tmp_path):
    save_checkpoint(tmp_path / "lip.ckpt", SeLG(tiny_config("usev")))
    save_checkpoint(tmp_path / "nce.ckpt", SeLG(tiny_config("selg")))
    with pytest.raises(InvalidInputError):
        finetune_infonce(tmp_path / "lip.ckpt", [], None)
    with pytest.raises(InvalidInputError):
        finetune_infonce(tmp_path / "nce.ckpt", [], None)


def test_manifest_dataset(tmp_path):
    cfg = SimConfig(counts={"train": 3, "val": 1, "test": 1}, duration=(0.4, 0.4))
    build_corpus(cfg, tmp_path)
    ds = ManifestDataset(tmp_path / "manifest.jsonl", "train")
    assert len(ds) == 3
    assert ds[1].id == "train-00001"
