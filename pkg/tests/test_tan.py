import numpy as np
import pytest

from motiontok import autodiff as ad
from motiontok.autodiff import ShapeError, Tensor
from motiontok.tan import (
    TanConfig,
    checkpoint_digest,
    embed_sequence,
    encode,
    init_weights,
    load_checkpoint,
    positional_encoding,
    project,
    save_checkpoint,
    weights_digest,
)

TINY = TanConfig(hidden_dim=16, encoder_layers=1, attention_heads=2,
                 projection_dim=8, sequence_length=6)


def tiny_weights(seed=0, joints=3):
    return init_weights(TINY, joints=joints, seed=seed)


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            TanConfig(hidden_dim=10, attention_heads=4)

    def test_ffn_defaults_to_twice_hidden(self):
        assert TanConfig(hidden_dim=32, attention_heads=4).ffn_dim == 64

    def test_temperature_positive(self):
        with pytest.raises(ValueError):
            TanConfig(temperature=0.0)


class TestPositionalEncoding:
    def test_row_zero_alternates(self):
        pe = positional_encoding(3, 6)
        np.testing.assert_allclose(pe[0], [0, 1, 0, 1, 0, 1], atol=1e-15)

    def test_hand_values_pos1(self):
        pe = positional_encoding(2, 4)
        assert pe[1, 0] == pytest.approx(np.sin(1.0))
        assert pe[1, 1] == pytest.approx(np.cos(1.0))
        assert pe[1, 2] == pytest.approx(np.sin(1.0 / 10000 ** 0.5))
        assert pe[1, 3] == pytest.approx(np.cos(1.0 / 10000 ** 0.5))

    def test_bounded(self):
        pe = positional_encoding(50, 16)
        assert pe.min() >= -1.0 and pe.max() <= 1.0

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            positional_encoding(4, 5)


class TestEncode:
    @pytest.mark.parametrize("t", [1, 7, 64])
    def test_preserves_temporal_resolution(self, t):
        w = tiny_weights()
        x = np.random.default_rng(t).normal(size=(2, t, 9))
        z = encode(x, w)
        assert z.shape == (2, t, 16)

    def test_batch_permutation_equivariance(self):
        w = tiny_weights()
        x = np.random.default_rng(1).normal(size=(3, 5, 9))
        z = encode(x, w).values
        z_perm = encode(x[[2, 0, 1]], w).values
        np.testing.assert_allclose(z_perm, z[[2, 0, 1]], atol=1e-12)

    def test_positional_encoding_breaks_symmetry(self):
        w = tiny_weights()
        x = np.zeros((1, 6, 9))
        with_pe = encode(x, w, use_positional=True).values
        without = encode(x, w, use_positional=False).values
        assert not np.allclose(with_pe, without)
        # without positions, identical frames embed identically
        np.testing.assert_allclose(without[0, 0], without[0, 3], atol=1e-12)

    def test_input_dim_mismatch(self):
        w = tiny_weights(joints=3)
        with pytest.raises(ShapeError, match="3\\*J"):
            encode(np.zeros((1, 4, 12)), w)

    def test_deterministic(self):
        w = tiny_weights()
        x = np.random.default_rng(2).normal(size=(1, 6, 9))
        assert np.array_equal(encode(x, w).values, encode(x, w).values)

    def test_attention_rows_sum_to_one(self):
        w = tiny_weights()
        sink = []
        encode(np.random.default_rng(3).normal(size=(2, 6, 9)), w, attn_sink=sink)
        assert len(sink) == TINY.encoder_layers * TINY.attention_heads
        for attn in sink:
            np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-9)


class TestProject:
    def test_unit_norm(self):
        w = tiny_weights()
        v = project(encode(np.random.default_rng(0).normal(size=(2, 5, 9)), w), w)
        np.testing.assert_allclose(np.linalg.norm(v.values, axis=-1), 1.0, atol=1e-9)

    def test_scale_invariance_of_head(self):
        w = tiny_weights()
        x = np.random.default_rng(1).normal(size=(1, 4, 9))
        v1 = project(encode(x, w), w).values
        w.tensors["proj.fc2.w"].values *= 10.0
        w.tensors["proj.fc2.b"].values *= 10.0
        v2 = project(encode(x, w), w).values
        np.testing.assert_allclose(v1, v2, atol=1e-9)

    def test_two_dim_projection_on_unit_circle(self):
        cfg = TanConfig(hidden_dim=8, encoder_layers=1, attention_heads=2,
                        projection_dim=2, sequence_length=4)
        w = init_weights(cfg, joints=2, seed=1)
        v = project(encode(np.random.default_rng(2).normal(size=(1, 4, 6)), w), w)
        radii = np.sqrt((v.values ** 2).sum(-1))
        np.testing.assert_allclose(radii, 1.0, atol=1e-9)

    def test_degenerate_projection_rejected(self):
        w = tiny_weights()
        w.tensors["proj.fc2.w"].values[:] = 0.0
        w.tensors["proj.fc2.b"].values[:] = 0.0
        with pytest.raises(ValueError, match="degenerate|norm"):
            project(encode(np.zeros((1, 3, 9)), w), w)


class TestFullModelGradient:
    def test_grad_check_through_encode_project(self):
        w = tiny_weights(seed=4)
        x = np.random.default_rng(5).normal(size=(1, 6, 9))
        weighting = np.random.default_rng(6).normal(size=(1, 6, 8))

        errs = {}
        for name in ("embed.fc1.w", "enc0.attn.q.w", "enc0.ln1.gamma",
                     "enc0.ffn.fc1.w", "proj.fc2.w", "proj.fc1.b"):
            def probe(t, _name=name):
                v = project(encode(x, w), w)
                return ad.tensor_sum(ad.mul(ad.mul(v, v), Tensor(weighting)))

            errs[name] = ad.grad_check(probe, w.tensors[name], eps=1e-4)
        worst = max(errs.values())
        assert worst < 1e-4, errs


class TestCheckpoints:
    def test_roundtrip_bit_exact(self, tmp_path):
        w = tiny_weights(seed=9)
        path = save_checkpoint(w, tmp_path / "w.tan")
        back = load_checkpoint(path)
        assert back.config == w.config
        assert back.joints == w.joints and back.seed == w.seed
        for name in w.tensors:
            assert np.array_equal(back.tensors[name].values, w.tensors[name].values)

    def test_digest_matches_in_memory(self, tmp_path):
        w = tiny_weights(seed=3)
        path = save_checkpoint(w, tmp_path / "w.tan")
        assert checkpoint_digest(path) == weights_digest(w)

    def test_digest_changes_with_weights(self, tmp_path):
        w = tiny_weights(seed=3)
        d1 = weights_digest(w)
        w.tensors["embed.fc1.w"].values[0, 0] += 1.0
        assert weights_digest(w) != d1

    def test_reject_non_checkpoint(self, tmp_path):
        p = tmp_path / "junk.tan"
        p.write_bytes(b"hello world\nmore")
        with pytest.raises(ValueError):
            load_checkpoint(p)


class TestEmbedSequence:
    def test_projection_space_shape(self):
        from motiontok.data import SkeletonSequence
        w = tiny_weights()
        seq = SkeletonSequence(data=np.random.default_rng(0).normal(size=(5, 3, 3)),
                               fps=30.0)
        emb = embed_sequence(seq, w)
        assert emb.shape == (5, 8)
        hid = embed_sequence(seq, w, space="hidden")
        assert hid.shape == (5, 16)

    def test_unknown_space_rejected(self):
        w = tiny_weights()
        with pytest.raises(ValueError):
            embed_sequence(np.zeros((3, 9)), w, space="bogus")
