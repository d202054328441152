import numpy as np
import pytest

from ropebench import gradcheck
from ropebench import tensor as tc
from ropebench.attention import build_chunk_mask, build_full_mask
from ropebench.conformer import (
    ConformerConfig,
    conformer_block,
    count_parameters,
    encoder_forward,
    init_encoder,
    pe_parameter_count,
)
from ropebench.errors import ConfigError, ShapeError
from ropebench.tensor import Tensor

KINDS = ["none", "absolute", "rotary", "relative"]


def small(kind="rotary", layers=2, d=8):
    return ConformerConfig(layers, d, 2, ffn_expansion=2, conv_kernel=5, scheme=kind)


class TestConfig:
    def test_defaults(self):
        c = ConformerConfig()
        assert (c.n_layers, c.d_model, c.n_heads, c.ffn_expansion, c.conv_kernel) == (4, 128, 4, 4, 31)
        assert c.scheme == "rotary" and c.theta_base == 10000 and c.head_dim == 32

    @pytest.mark.parametrize(
        "kwargs",
        [dict(d_model=10, n_heads=4), dict(d_model=6, n_heads=2), dict(conv_kernel=4),
         dict(scheme="alibi"), dict(n_layers=-1), dict(theta_base=0.0)],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            ConformerConfig(**kwargs)


class TestBlock:
    @pytest.mark.parametrize("kind", KINDS)
    def test_zero_weights_give_layernorm_of_input(self, kind):
        enc = init_encoder(small(kind, 1), 6, zero=True)
        x = np.random.default_rng(0).uniform(-1, 1, (6, 8))
        y = conformer_block(Tensor(x), enc.layers[0], build_full_mask(6), enc.scheme).data
        mu, var = x.mean(axis=1, keepdims=True), x.var(axis=1, keepdims=True)
        np.testing.assert_allclose(y, (x - mu) / np.sqrt(var + 1e-5), atol=1e-12)

    @pytest.mark.parametrize("kind", KINDS)
    def test_shape(self, kind):
        enc = init_encoder(small(kind, 1), 7)
        y = encoder_forward(Tensor(np.zeros((7, 8))), enc, build_full_mask(7))
        assert y.shape == (7, 8)

    def test_bad_width(self):
        enc = init_encoder(small(layers=1), 4)
        with pytest.raises(ShapeError):
            conformer_block(Tensor(np.zeros((4, 6))), enc.layers[0], None, enc.scheme)

    @pytest.mark.parametrize("kind", KINDS)
    def test_block_gradients(self, kind):
        rep = gradcheck.check(f"conformer_block_{kind}", (4, 8), seed=3)
        assert rep.max_rel_error < 1e-5, rep


class TestEncoder:
    def test_zero_layers_is_identity(self):
        enc = init_encoder(small(layers=0), 5)
        x = np.random.default_rng(1).normal(size=(5, 8))
        assert np.array_equal(encoder_forward(Tensor(x), enc).data, x)

    def test_one_layer_is_one_block(self):
        enc = init_encoder(small(layers=1), 5, seed=4)
        x = Tensor(np.random.default_rng(2).normal(size=(5, 8)))
        mask = build_full_mask(5)
        assert np.array_equal(encoder_forward(x, enc, mask).data,
                              conformer_block(x, enc.layers[0], mask, enc.scheme).data)

    def test_seeded_init_is_deterministic(self):
        a, b = init_encoder(small(), 6, seed=9), init_encoder(small(), 6, seed=9)
        assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
        c = init_encoder(small(), 6, seed=10)
        assert not np.array_equal(a.parameters()[2].data, c.parameters()[2].data)

    def test_layers_differ(self):
        enc = init_encoder(small(), 6)
        assert not np.array_equal(enc.layers[0].ffn1.w1.data, enc.layers[1].ffn1.w1.data)

    def test_shared_weights_match_across_schemes(self):
        rot, rel = init_encoder(small("rotary"), 6, seed=5), init_encoder(small("relative"), 6, seed=5)
        assert np.array_equal(rot.layers[1].attn.w_q.data, rel.layers[1].attn.w_q.data)
        assert np.array_equal(rot.layers[1].conv.dw.data, rel.layers[1].conv.dw.data)

    @pytest.mark.parametrize("kind", KINDS)
    def test_chunk_causality_two_layers(self, kind):
        T, C = 12, 4
        enc = init_encoder(small(kind), T, seed=7)
        rng = np.random.default_rng(8)
        x = rng.uniform(-1, 1, (T, 8))
        mask = build_chunk_mask(T, C)
        with tc.no_grad():
            y0 = encoder_forward(Tensor(x), enc, mask).data
            for j in range(1, T // C):
                xp = x.copy()
                xp[j * C : (j + 1) * C] += rng.normal(size=(C, 8))
                y1 = encoder_forward(Tensor(xp), enc, mask).data
                assert np.array_equal(y0[: j * C], y1[: j * C])
                assert not np.array_equal(y0[j * C :], y1[j * C :])

    def test_full_mask_sees_the_future(self):
        enc = init_encoder(small(), 8)
        x = np.random.default_rng(3).uniform(-1, 1, (8, 8))
        xp = x.copy()
        xp[-1] += 1.0
        a = encoder_forward(Tensor(x), enc, build_full_mask(8)).data
        b = encoder_forward(Tensor(xp), enc, build_full_mask(8)).data
        assert not np.array_equal(a[0], b[0])

    @pytest.mark.parametrize("kind", KINDS)
    def test_end_to_end_gradients(self, kind):
        rep = gradcheck.check(f"encoder_{kind}", (5, 8), seed=1, threshold=1e-4)
        assert rep.max_rel_error < 1e-4, rep

    def test_parameter_gradients(self):
        enc = init_encoder(small("relative"), 5, seed=2)
        x = Tensor(np.random.default_rng(4).uniform(-1, 1, (5, 8)))
        r = np.random.default_rng(5).uniform(-1, 1, (5, 8))
        params = [enc.layers[0].attn.w_q, enc.layers[1].attn.relpos.u_bias, enc.layers[1].attn.relpos.pos_proj,
                  enc.layers[0].conv.dw, enc.layers[1].ffn2.b2]
        rep = gradcheck.check_parameters(
            "encoder-params", lambda: tc.weighted_sum(encoder_forward(x, enc, build_chunk_mask(5, 2)), r), params,
            1e-4,
        )
        assert rep.passed, rep


class TestCounts:
    def test_rotary_has_no_pe_parameters(self):
        cfg = ConformerConfig(2, 16, 4)
        assert pe_parameter_count(init_encoder(cfg, 10)) == 0

    def test_relative_pe_parameters(self):
        cfg = ConformerConfig(2, 16, 4, scheme="relative")
        # per layer: u, v biases (H x dh each) and a d x d projection
        assert pe_parameter_count(init_encoder(cfg, 10)) == 2 * (16 + 16 + 16 * 16)

    def test_totals_differ_only_by_pe(self):
        rot = init_encoder(ConformerConfig(2, 16, 4), 10)
        rel = init_encoder(ConformerConfig(2, 16, 4, scheme="relative"), 10)
        assert count_parameters(rel) - count_parameters(rot) == pe_parameter_count(rel)

    @pytest.mark.parametrize("kind", ["none", "absolute", "rotary"])
    def test_fixed_schemes_have_none(self, kind):
        assert pe_parameter_count(init_encoder(ConformerConfig(1, 16, 4, scheme=kind), 10)) == 0
