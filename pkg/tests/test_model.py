import json
import struct

import numpy as np
import pytest
import torch

from selg._validation import InvalidInputError
from selg.model import VARIANTS, ModelConfig, SeLG, VariantSpec, desk_config, load_checkpoint, read_checkpoint, save_checkpoint


def test_variant_table():
    assert VARIANTS["usev"] == VariantSpec("lip", "concatenation", False)
    assert VARIANTS["seg_infonce"].use_infonce and VARIANTS["seg_infonce"].cues == "gesture"
    assert VARIANTS["selg"] == VariantSpec("both", "attention", True)
    assert VARIANTS["selg_concat"].multi_cue
    with pytest.raises(InvalidInputError):
        VariantSpec("lip", "attention", use_infonce=True)
    with pytest.raises(InvalidInputError):
        VariantSpec("audio", "attention")


def test_desk_config_values():
    cfg = desk_config("selg")
    assert (cfg.codec.n_filters, cfg.codec.kernel_size) == (64, 40)
    assert (cfg.separator.repeats, cfg.separator.dp_hidden) == (2, 64)
    assert cfg.lip.variant == "lite"


def test_unimodal_models_own_only_their_encoder():
    assert SeLG(desk_config("usev")).gesture_encoder is None
    assert SeLG(desk_config("seg")).lip_encoder is None


def test_config_dict_round_trip():
    cfg = desk_config("seg_infonce")
    assert ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    model = SeLG(desk_config("selg"))
    path = save_checkpoint(tmp_path / "m.ckpt", model, {"epoch": 3})
    raw = path.read_bytes()
    assert raw[:8] == b"SELGCKPT"
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    assert header["config"]["variant"]["cues"] == "both"
    total = sum(t["nbytes"] for t in header["tensors"])
    assert len(raw) == 16 + n + total
    loaded, meta = load_checkpoint(path)
    assert meta == {"epoch": 3}
    for (k, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), k


def test_checkpoint_validation(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", SeLG(desk_config("selg_attention")))
    # the loss flag may differ, architecture may not
    load_checkpoint(path, expected=desk_config("selg"))
    with pytest.raises(InvalidInputError):
        load_checkpoint(path, expected=desk_config("selg_concat"))
    with pytest.raises(InvalidInputError):
        load_checkpoint(path, expected=desk_config("selg", repeats=3))
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + bytes(8))
    with pytest.raises(InvalidInputError):
        read_checkpoint(tmp_path / "bad.ckpt")


def test_missing_cue_for_unimodal_model_is_zero_branch():
    torch.manual_seed(1)
    model = SeLG(desk_config("seg")).eval()
    mix = torch.randn(1, 8000) * 0.1
    with torch.no_grad():
        none = model(mix, None, None).estimate
        zeroed = model(mix, None, torch.randn(1, 7, 10, 3), has_gesture=torch.zeros(1)).estimate
    assert torch.equal(none, zeroed)
    assert np.isfinite(none.numpy()).all()
