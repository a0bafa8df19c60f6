import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from selg._validation import InvalidInputError
from selg.visual import (
    JOINT_NAMES,
    GestureEncoder,
    GestureEncoderConfig,
    LipEncoder,
    LipEncoderConfig,
    LipSequence,
    PoseSequence,
    encode_gesture,
    encode_lip,
    normalize_pose,
    read_lip,
    read_pose,
    upsample_index,
    upsample_to_rate,
    write_lip,
    write_pose,
)


@pytest.fixture
def poses():
    return PoseSequence(np.random.default_rng(0).standard_normal((30, 10, 3)).astype(np.float32))


@pytest.fixture
def lips():
    return LipSequence(np.random.default_rng(1).uniform(0, 1, (30, 24, 24)).astype(np.float32))


def test_gesture_output_shape(poses):
    enc = GestureEncoder()
    assert encode_gesture(poses, enc).shape == (30, 64)


def test_gesture_parameter_layout():
    enc = GestureEncoder(GestureEncoderConfig())
    lstm = enc.blstm
    assert (lstm.num_layers, lstm.hidden_size, lstm.bidirectional, lstm.dropout) == (5, 32, True, 0.3)
    assert lstm.weight_ih_l0.shape == (4 * 32, 30)
    for layer in range(1, 5):
        assert getattr(lstm, f"weight_ih_l{layer}").shape == (4 * 32, 64)
        assert getattr(lstm, f"weight_ih_l{layer}_reverse").shape == (4 * 32, 64)
    assert not hasattr(lstm, "weight_ih_l5")


def test_gesture_eval_is_deterministic(poses):
    enc = GestureEncoder().eval()
    assert torch.equal(encode_gesture(poses, enc), encode_gesture(poses, enc))


def test_gesture_dropout_range():
    with pytest.raises(InvalidInputError):
        GestureEncoderConfig(dropout=1.0)


def test_pose_rejects_non_finite():
    frames = np.zeros((4, 10, 3), np.float32)
    frames[1, 2, 0] = np.inf
    with pytest.raises(InvalidInputError):
        PoseSequence(frames)
    with pytest.raises(InvalidInputError):
        PoseSequence(np.zeros((4, 9, 3)))


def test_normalize_pose_invariances():
    x = torch.randn(5, 10, 3, dtype=torch.float64)
    shifted = x + torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    torch.testing.assert_close(normalize_pose(shifted), normalize_pose(x))
    torch.testing.assert_close(normalize_pose(3.0 * x), normalize_pose(x))
    assert torch.count_nonzero(normalize_pose(x)[:, JOINT_NAMES.index("spine")]) == 0


def test_gesture_gradient_matches_finite_differences():
    torch.manual_seed(0)
    enc = GestureEncoder().double().eval()
    w = torch.randn(4, 64, dtype=torch.float64)

    def f(p):
        return (enc(p.unsqueeze(0))[0] * w).sum()

    p = torch.randn(4, 10, 3, dtype=torch.float64, requires_grad=True)
    (grad,) = torch.autograd.grad(f(p), p)
    h = 1e-5
    v = torch.randn_like(p)
    fd = (f(p.detach() + h * v) - f(p.detach() - h * v)) / (2 * h)
    ad = (grad * v).sum()
    assert abs(fd - ad) <= 1e-4 * abs(ad)


def test_lip_lite_shape_and_topology(lips):
    enc = LipEncoder()
    out = encode_lip(lips, enc)
    assert out.shape == (30, 64)
    assert enc.front[0].kernel_size == (5, 5, 5)
    assert len(enc.trunk) == 4
    assert len(enc.temporal) == 2


def test_lip_faithful_topology():
    cfg = LipEncoderConfig.faithful()
    enc = LipEncoder(cfg)
    # 3-D conv front, 8 basic blocks (16 conv layers + stem + classifier-free head = 18-layer trunk), 5 temporal blocks
    assert isinstance(enc.front[0], torch.nn.Conv3d)
    assert len(enc.trunk) == 8
    assert len(enc.temporal) == 5
    out = enc(torch.rand(1, 3, 32, 32))
    assert out.shape == (1, 3, 512)


def test_lip_zero_images_are_finite():
    out = encode_lip(LipSequence(np.zeros((6, 24, 24), np.float32)), LipEncoder())
    assert bool(torch.isfinite(out).all())


def test_lip_range_validation():
    with pytest.raises(InvalidInputError):
        LipSequence(np.full((3, 8, 8), 1.5, np.float32))


def upsample_oracle(n_source, n_target):
    return [int(np.floor(t * n_source / n_target)) for t in range(n_target)]


def test_upsample_multiplicities_30_to_1599():
    idx = upsample_index(30, 1599).tolist()
    assert idx == upsample_oracle(30, 1599)
    counts = np.bincount(idx, minlength=30)
    assert set(counts.tolist()) == {53, 54}
    assert counts.sum() == 1599


def test_upsample_degenerate_cases():
    x = torch.randn(1, 4)
    assert torch.equal(upsample_to_rate(x, 10), x.repeat(10, 1))
    y = torch.randn(7, 3)
    assert torch.equal(upsample_to_rate(y, 7), y)
    with pytest.raises(InvalidInputError):
        upsample_to_rate(y, 6)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 60), st.integers(0, 400))
def test_upsample_monotone_and_surjective(n_source, extra):
    idx = upsample_index(n_source, n_source + extra).tolist()
    assert all(a <= b for a, b in zip(idx, idx[1:]))
    assert sorted(set(idx)) == list(range(n_source))


def test_pose_file_round_trip(tmp_path, poses):
    write_pose(tmp_path / "p.json", poses)
    back = read_pose(tmp_path / "p.json")
    assert np.array_equal(back.frames, poses.frames)
    assert back.fps == 15


def test_lip_file_round_trip(tmp_path, lips):
    write_lip(tmp_path / "l.bin", lips)
    raw = (tmp_path / "l.bin").read_bytes()
    assert raw[:8] == b"SELGLIP1"
    assert len(raw) == 8 + 4 * 30 * 24 * 24
    back = read_lip(tmp_path / "l.bin")
    assert np.array_equal(back.frames, lips.frames)


def test_lip_file_bad_magic(tmp_path, lips):
    write_lip(tmp_path / "l.bin", lips)
    raw = bytearray((tmp_path / "l.bin").read_bytes())
    raw[0:8] = b"XXXXXXXX"
    (tmp_path / "l.bin").write_bytes(bytes(raw))
    with pytest.raises(InvalidInputError):
        read_lip(tmp_path / "l.bin")
