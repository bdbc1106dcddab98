import math

import numpy as np
import numpy.testing as npt
import pytest

from dgtn import autodiff as ad
from dgtn import numerics
from dgtn import transformer as tf
from dgtn.errors import NonStochasticOverride, UnknownResidue


def make_params(d, heads, d_ffn, rng, scale=0.4):
    dh = d // heads
    return tf.AttnLayerParams(
        ln1_scale=np.ones(d),
        ln1_shift=np.zeros(d),
        w_query=[rng.standard_normal((d, dh)) * scale for _ in range(heads)],
        w_key=[rng.standard_normal((d, dh)) * scale for _ in range(heads)],
        w_value=[rng.standard_normal((d, dh)) * scale for _ in range(heads)],
        w_out=rng.standard_normal((d, d)) * scale,
        b_out=rng.standard_normal(d) * scale,
        ln2_scale=np.ones(d),
        ln2_shift=np.zeros(d),
        ffn_w1=rng.standard_normal((d, d_ffn)) * scale,
        ffn_b1=rng.standard_normal(d_ffn) * scale,
        ffn_w2=rng.standard_normal((d_ffn, d)) * scale,
        ffn_b2=rng.standard_normal(d) * scale,
    )


class TestEmbedding:
    def test_pe_first_position_first_column(self):
        pe = tf.sinusoidal_pe(3, 4)
        assert pe[0, 0] == pytest.approx(math.sin(1.0), abs=1e-15)
        assert pe[0, 0] == pytest.approx(0.8414709848078965, abs=1e-12)
        assert pe[0, 1] == pytest.approx(math.cos(1.0), abs=1e-15)

    def test_zero_table_gives_pure_pe(self):
        out = tf.embed_tokens("AG", np.zeros((20, 6)))
        npt.assert_array_equal(out, tf.sinusoidal_pe(2, 6))

    def test_identical_letters_differ_by_pe(self):
        rng = np.random.default_rng(0)
        table = rng.standard_normal((20, 4))
        out = tf.embed_tokens("AA", table)
        pe = tf.sinusoidal_pe(2, 4)
        npt.assert_allclose(out[0] - pe[0], out[1] - pe[1], atol=1e-14)

    def test_unknown_letter(self):
        with pytest.raises(UnknownResidue):
            tf.embed_tokens("AXZ"[0] + "B", np.zeros((20, 4)))


class TestScores:
    def test_zero_query_uniform(self):
        rng = np.random.default_rng(1)
        lp = make_params(4, 2, 8, rng)
        lp.w_query[0] = np.zeros((4, 2))
        lp.w_query[1] = np.zeros((4, 2))
        x = rng.standard_normal((5, 4))
        for a in tf.mhsa_scores(x, lp):
            npt.assert_allclose(a, np.full((5, 5), 0.2), atol=1e-12)

    def test_single_token(self):
        rng = np.random.default_rng(2)
        lp = make_params(4, 2, 8, rng)
        for a in tf.mhsa_scores(rng.standard_normal((1, 4)), lp):
            npt.assert_array_equal(a, [[1.0]])

    def test_hand_case_single_dim_head(self):
        lp = tf.AttnLayerParams(
            ln1_scale=np.ones(1), ln1_shift=np.zeros(1),
            w_query=[np.array([[1.0]])], w_key=[np.array([[1.0]])],
            w_value=[np.array([[1.0]])],
            w_out=np.eye(1), b_out=np.zeros(1),
            ln2_scale=np.ones(1), ln2_shift=np.zeros(1),
            ffn_w1=np.zeros((1, 2)), ffn_b1=np.zeros(2),
            ffn_w2=np.zeros((2, 1)), ffn_b2=np.zeros(1),
        )
        x = np.array([[1.0], [0.0]])
        (a,) = tf.mhsa_scores(x, lp)
        npt.assert_allclose(a[0], numerics.softmax_rows(np.array([[1.0, 0.0]]))[0], atol=1e-12)
        npt.assert_allclose(a[0], [0.7310585786300049, 0.2689414213699951], atol=1e-10)
        npt.assert_allclose(a[1], [0.5, 0.5], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        lp = make_params(6, 3, 12, rng)
        for a in tf.mhsa_scores(rng.standard_normal((7, 6)) * 3, lp):
            npt.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)


class TestLayer:
    def test_override_with_own_scores_is_identity(self):
        rng = np.random.default_rng(4)
        lp = make_params(4, 2, 8, rng)
        x = rng.standard_normal((5, 4))
        xn = tf.layer_norm_nodes(ad.constant(x), lp.ln1_scale, lp.ln1_shift).value
        scores = tf.mhsa_scores(xn, lp)
        base, a_base = tf.transformer_layer(x, lp)
        over, a_over = tf.transformer_layer(x, lp, a_override=scores)
        npt.assert_array_equal(base, over)
        for a, b in zip(a_base, a_over):
            npt.assert_array_equal(a, b)

    def test_identity_override_copies_values(self):
        rng = np.random.default_rng(5)
        d = 4
        lp = make_params(d, 2, 8, rng)
        x = rng.standard_normal((3, d))
        eye = [np.eye(3), np.eye(3)]
        out, _ = tf.transformer_layer(x, lp, a_override=eye)

        xn = tf.layer_norm_nodes(ad.constant(x), lp.ln1_scale, lp.ln1_shift).value
        ctx = np.concatenate([xn @ lp.w_value[0], xn @ lp.w_value[1]], axis=1)
        x1 = x + ctx @ lp.w_out + lp.b_out
        x2n = tf.layer_norm_nodes(ad.constant(x1), lp.ln2_scale, lp.ln2_shift).value
        expected = x1 + numerics.gelu(x2n @ lp.ffn_w1 + lp.ffn_b1) @ lp.ffn_w2 + lp.ffn_b2
        npt.assert_allclose(out, expected, atol=1e-12)

    def test_non_stochastic_override_rejected(self):
        rng = np.random.default_rng(6)
        lp = make_params(4, 2, 8, rng)
        x = rng.standard_normal((3, 4))
        bad = [np.full((3, 3), 0.5), np.full((3, 3), 1 / 3)]
        with pytest.raises(NonStochasticOverride):
            tf.transformer_layer(x, lp, a_override=bad)

    def test_dropout_only_in_training(self):
        rng = np.random.default_rng(7)
        lp = make_params(4, 2, 8, rng)
        x = rng.standard_normal((3, 4))
        out1, _ = tf.transformer_layer(x, lp, dropout=0.5, training=False)
        out2, _ = tf.transformer_layer(x, lp, dropout=0.5, training=False)
        npt.assert_array_equal(out1, out2)
        t1, _ = tf.transformer_layer(x, lp, dropout=0.5, rng=np.random.default_rng(0), training=True)
        t2, _ = tf.transformer_layer(x, lp, dropout=0.5, rng=np.random.default_rng(0), training=True)
        npt.assert_array_equal(t1, t2)  # same rng stream, same masks
        t3, _ = tf.transformer_layer(x, lp, dropout=0.5, rng=np.random.default_rng(1), training=True)
        assert np.abs(t1 - t3).max() > 0

    def test_gradients_through_two_layers(self):
        rng = np.random.default_rng(8)
        d, heads, d_ffn, L = 8, 2, 16, 6
        base = {}
        for l in range(2):
            base[f"{l}.ln1_g"] = np.ones(d)
            base[f"{l}.ln1_b"] = np.zeros(d)
            for h in range(heads):
                base[f"{l}.wq{h}"] = rng.standard_normal((d, d // heads)) * 0.4
                base[f"{l}.wk{h}"] = rng.standard_normal((d, d // heads)) * 0.4
                base[f"{l}.wv{h}"] = rng.standard_normal((d, d // heads)) * 0.4
            base[f"{l}.wo"] = rng.standard_normal((d, d)) * 0.4
            base[f"{l}.bo"] = np.zeros(d)
            base[f"{l}.ln2_g"] = np.ones(d)
            base[f"{l}.ln2_b"] = np.zeros(d)
            base[f"{l}.ffn_w1"] = rng.standard_normal((d, d_ffn)) * 0.4
            base[f"{l}.ffn_b1"] = np.zeros(d_ffn)
            base[f"{l}.ffn_w2"] = rng.standard_normal((d_ffn, d)) * 0.4
            base[f"{l}.ffn_b2"] = np.zeros(d)
        x0 = rng.standard_normal((L, d))
        names = sorted(base)

        def build(values):
            x = ad.constant(x0)
            for l in range(2):
                lp = tf.AttnLayerParams(
                    values[f"{l}.ln1_g"], values[f"{l}.ln1_b"],
                    [values[f"{l}.wq{h}"] for h in range(heads)],
                    [values[f"{l}.wk{h}"] for h in range(heads)],
                    [values[f"{l}.wv{h}"] for h in range(heads)],
                    values[f"{l}.wo"], values[f"{l}.bo"],
                    values[f"{l}.ln2_g"], values[f"{l}.ln2_b"],
                    values[f"{l}.ffn_w1"], values[f"{l}.ffn_b1"],
                    values[f"{l}.ffn_w2"], values[f"{l}.ffn_b2"],
                )
                x, _ = tf.transformer_layer_nodes(x, lp)
            return ad.sum_(ad.square(x))

        tape = ad.Tape()
        nodes = {k: tape.param(k, v) for k, v in base.items()}
        tape.backward(build(nodes))
        grads = tape.gradients()

        sizes = {k: base[k].size for k in names}
        x_flat = np.concatenate([base[k].ravel() for k in names])

        def f(x):
            vals = {}
            off = 0
            for k in names:
                vals[k] = x[off : off + sizes[k]].reshape(base[k].shape)
                off += sizes[k]
            return float(build(vals).value)

        fd = numerics.fd_gradient(f, x_flat, eps=1e-5)
        an = np.concatenate([grads[k].ravel() for k in names])
        denom = np.maximum(np.maximum(np.abs(an), np.abs(fd)), 1e-8)
        assert np.max(np.abs(an - fd) / denom) < 1e-5
