import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from selg._validation import InvalidInputError
from selg.datasim import SimConfig, simulate_sample, speaker_pools
from selg.estimator import SpeakerExtractor

TINY = dict(n_filters=16, embed_dim=16, heads=2, ffn_dim=32, dp_hidden=8, chunk=20, repeats=1,
            gesture_layers=1, effective_batch=4, batch_size=2, max_epochs=1, warmup_steps=2)


@pytest.fixture(scope="module")
def samples():
    cfg = SimConfig(counts={"train": 4, "val": 0, "test": 2}, duration=(0.4, 0.4), seed=2)
    pools = speaker_pools(cfg)
    return ([simulate_sample(cfg, "train", i, pools["train"]) for i in range(4)],
            [simulate_sample(cfg, "test", i, pools["test"]) for i in range(2)])


def test_params_round_trip():
    est = SpeakerExtractor(variant="usev", lr=1e-3)
    params = est.get_params()
    assert params["variant"] == "usev" and params["lr"] == 1e-3
    assert clone(est).get_params() == params
    est.set_params(repeats=2)
    assert est.model_config().separator.repeats == 2


def test_unknown_variant_and_bad_input():
    with pytest.raises(InvalidInputError):
        SpeakerExtractor(variant="nope").model_config()
    with pytest.raises(InvalidInputError):
        SpeakerExtractor().fit([])
    with pytest.raises(InvalidInputError):
        SpeakerExtractor().fit([np.zeros(10)])


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        SpeakerExtractor().predict([])


def test_fit_predict_score_save(samples, tmp_path):
    train, test = samples
    est = SpeakerExtractor(variant="selg_attention", **TINY).fit(train)
    assert est.n_steps_ == 1 and len(est.history_) == 1
    out = est.predict(test)
    assert [len(o) for o in out] == [len(s.mixture) for s in test]
    assert np.isfinite(est.score(test))
    est.save(tmp_path / "m.ckpt")
    back = SpeakerExtractor.from_checkpoint(tmp_path / "m.ckpt")
    assert np.array_equal(back.predict(test)[0], out[0])


def test_gesture_infonce_uses_teacher(samples):
    train, _ = samples
    teacher = SpeakerExtractor(variant="usev", **TINY).fit(train)
    student = SpeakerExtractor(variant="seg_infonce", teacher=teacher, **TINY).fit(train)
    assert student.model_.lip_encoder is None
    with pytest.raises(InvalidInputError):
        SpeakerExtractor(variant="seg_infonce", **TINY).fit(train)
