import math
import struct

import mpmath
import numpy as np
import pytest

from contrastive_audio import autodiff as ad
from contrastive_audio import gradcheck
from contrastive_audio.exceptions import BatchTooSmall, CorruptCheckpoint, NotSquare, VersionMismatch
from contrastive_audio.model import (
    Checkpoint,
    ModelConfig,
    bilinear_similarity,
    contrastive_loss,
    embed,
    encoder_forward,
    init_params,
    load_checkpoint,
    pretrain_loss,
    project,
    save_checkpoint,
)

TINY = ModelConfig(input_frames=16, input_mels=16, channels=(4, 8), proj_dim=8, n_classes=3, dtype="float64")


def test_bilinear_matches_triple_loop():
    rng = np.random.default_rng(0)
    z, zp, w = rng.standard_normal((5, 3)), rng.standard_normal((5, 3)), rng.standard_normal((3, 3))
    want = np.zeros((5, 5))
    for i in range(5):
        for j in range(5):
            for a in range(3):
                for b in range(3):
                    want[i, j] += z[i, a] * w[a, b] * zp[j, b]
    np.testing.assert_allclose(bilinear_similarity(z, zp, w).data, want, rtol=1e-12, atol=1e-12)


def test_identity_w_is_dot_product():
    rng = np.random.default_rng(1)
    z, zp = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    np.testing.assert_allclose(bilinear_similarity(z, zp, np.eye(6)).data, z @ zp.T, rtol=1e-12)


def mp_loss(s):
    # arbitrary-precision oracle: mean_i [log sum_j exp(S_ij) - S_ii]
    total = mpmath.mpf(0)
    for i, row in enumerate(s):
        total += mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(v))) for v in row)) - mpmath.mpf(float(row[i]))
    return float(total / len(s))


def test_loss_matches_high_precision_oracle():
    rng = np.random.default_rng(2)
    for b in (2, 3, 8):
        s = rng.standard_normal((b, b)) * 5
        assert contrastive_loss(s).item() == pytest.approx(mp_loss(s), rel=1e-12)


@pytest.mark.parametrize("b", [2, 16, 128])
def test_zero_scores_give_log_b(b):
    assert abs(contrastive_loss(np.zeros((b, b))).item() - math.log(b)) <= 1e-12


def test_loss_shift_invariant():
    rng = np.random.default_rng(3)
    s = rng.standard_normal((6, 6))
    for c in (-50.0, 3.0, 1e3):
        assert abs(contrastive_loss(s + c).item() - contrastive_loss(s).item()) <= 1e-9


def test_loss_permutation_invariant():
    rng = np.random.default_rng(4)
    s = rng.standard_normal((7, 7))
    perm = rng.permutation(7)
    assert abs(contrastive_loss(s[perm][:, perm]).item() - contrastive_loss(s).item()) <= 1e-9


def test_loss_large_diagonal_near_zero():
    s = np.full((4, 4), -30.0)
    np.fill_diagonal(s, 30.0)
    assert 0 <= contrastive_loss(s).item() < 1e-20


def test_loss_errors():
    with pytest.raises(NotSquare):
        contrastive_loss(np.zeros((2, 3)))
    with pytest.raises(BatchTooSmall):
        contrastive_loss(np.zeros((1, 1)))


def test_projection_in_tanh_range():
    rng = np.random.default_rng(5)
    h = rng.standard_normal((10, 8)) * 100
    z = project(h, rng.standard_normal((8, 4)), rng.standard_normal(4)).data
    assert np.all(np.abs(z) <= 1)


def test_init_zero_w_and_head():
    p = init_params(ModelConfig(), np.random.default_rng(0))
    assert not p["bilinear.W"].any() and not p["clf.w"].any() and not p["clf.b"].any()
    assert p["enc0.w"].dtype == np.float32
    p.check()


def test_first_pretrain_loss_is_log_b():
    rng = np.random.default_rng(6)
    p = init_params(TINY, rng)
    x = rng.standard_normal((5, 16, 16))
    loss = pretrain_loss(x, x + 0.1, p.tensors(), TINY)
    assert abs(loss.item() - math.log(5)) <= 1e-12


def test_encoder_batch_independent():
    rng = np.random.default_rng(7)
    p = init_params(TINY, rng)
    x = rng.standard_normal((6, 16, 16))
    full = encoder_forward(x, p.tensors(), TINY).data
    for i in range(6):
        np.testing.assert_allclose(encoder_forward(x[i:i + 1], p.tensors(), TINY).data[0], full[i],
                                   rtol=1e-12, atol=1e-14)


def test_encoder_output_shape_default():
    cfg = ModelConfig()
    p = init_params(cfg, np.random.default_rng(0))
    h = embed(np.random.default_rng(1).standard_normal((3, 96, 64)), p)
    assert h.shape == (3, 64) and h.dtype == np.float32
    assert embed(np.zeros((0, 96, 64)), p).shape == (0, 64)


def test_encoder_rejects_too_small_input():
    with pytest.raises(ValueError, match="too small"):
        ModelConfig(input_frames=10, input_mels=10)


def test_full_graph_grad_check():
    assert gradcheck.check_full_graph(seed=0) <= 1e-5


def test_encoder_grad_through_scalar_head():
    rng = np.random.default_rng(8)
    p = init_params(TINY, rng)
    x = rng.standard_normal((3, 16, 16))
    v = rng.standard_normal(TINY.h_dim)
    names = ["enc0.w", "enc0.b", "enc1.w", "enc1.b"]

    def f(ts):
        h = encoder_forward(x, dict(zip(names, ts)), TINY)
        return ad.tensor_sum(ad.mul(h, v))

    assert ad.grad_check(f, [p[n] for n in names], eps=1e-5) <= 1e-5


def test_checkpoint_round_trip(tmp_path):
    p = init_params(ModelConfig(), np.random.default_rng(0))
    p["bilinear.W"] = np.random.default_rng(1).standard_normal(p["bilinear.W"].shape).astype(np.float32)
    ckpt = Checkpoint(p, {"time_stretch": True}, {"seed": 3})
    save_checkpoint(ckpt, tmp_path / "m.aclc")
    back = load_checkpoint(tmp_path / "m.aclc")
    assert back.config == p.config
    assert back.augment == {"time_stretch": True} and back.metadata == {"seed": 3}
    for name, arr in p.arrays.items():
        assert back.params[name].tobytes() == arr.tobytes()


def test_checkpoint_truncated(tmp_path):
    save_checkpoint(Checkpoint(init_params(TINY, np.random.default_rng(0))), tmp_path / "m.aclc")
    raw = (tmp_path / "m.aclc").read_bytes()
    (tmp_path / "m.aclc").write_bytes(raw[:-7])
    with pytest.raises(CorruptCheckpoint, match="truncated"):
        load_checkpoint(tmp_path / "m.aclc")
    (tmp_path / "m.aclc").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CorruptCheckpoint, match="magic"):
        load_checkpoint(tmp_path / "m.aclc")


def test_checkpoint_version_bump(tmp_path):
    save_checkpoint(Checkpoint(init_params(TINY, np.random.default_rng(0))), tmp_path / "m.aclc")
    raw = bytearray((tmp_path / "m.aclc").read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    (tmp_path / "m.aclc").write_bytes(bytes(raw))
    with pytest.raises(VersionMismatch, match=r"version 2.*version 1"):
        load_checkpoint(tmp_path / "m.aclc")


def test_checkpoint_shape_mismatch(tmp_path):
    save_checkpoint(Checkpoint(init_params(TINY, np.random.default_rng(0))), tmp_path / "m.aclc")
    side = tmp_path / "m.aclc.json"
    side.write_text(side.read_text().replace('"proj_dim": 8', '"proj_dim": 9'))
    with pytest.raises(CorruptCheckpoint, match="shape"):
        load_checkpoint(tmp_path / "m.aclc")
