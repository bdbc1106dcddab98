import math
from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pytest

from dgtn import model as M
from dgtn import protein_io as pio
from dgtn.diffusion import DiffusionConfig
from dgtn.errors import EmptyBatch, InvalidConfig, IoError, LengthMismatch, MissingParam

from oracle import forward_oracle

DESK = M.ModelConfig(d=8, heads=2, d_ffn=32, d_a=4, d_p=4, d_e=6, rbf_k=4, angle_k=3,
                     dropout=0.0, diffusion=DiffusionConfig(steps=3))


def tiny_dataset(seed=0, n=4, L=(10, 10), muts_per=4, **kw):
    spec = pio.SyntheticSpec(seed=seed, n_samples=n, l_range=L,
                             muts_per_structure=muts_per, **kw)
    return pio.synthesize_dataset(spec)


class TestConfig:
    def test_paper_profile_matches_published_dims(self):
        cfg = M.ModelConfig.paper()
        assert (cfg.d, cfg.heads, cfg.gnn_layers, cfg.tf_layers, cfg.d_ffn) == (256, 8, 4, 6, 1024)
        assert cfg.head_dims == (384, 192)
        assert 3 * cfg.d == 768
        assert cfg.diffusion.steps == 5

    def test_desk_defaults(self):
        cfg = M.ModelConfig()
        assert (cfg.d, cfg.heads, cfg.gnn_layers, cfg.tf_layers) == (32, 2, 2, 2)
        assert cfg.diffusion.steps == 5

    def test_invalid_configs(self):
        with pytest.raises(InvalidConfig):
            M.ModelConfig(d=9, heads=2)
        with pytest.raises(InvalidConfig):
            M.ModelConfig(dropout=1.0)
        with pytest.raises(InvalidConfig):
            M.ModelConfig(d=2)  # 3d not divisible by 4


class TestInitParams:
    def test_deterministic_in_seed(self):
        p1 = M.init_params(DESK)
        p2 = M.init_params(DESK)
        assert p1.names() == p2.names()
        for k in p1.names():
            npt.assert_array_equal(p1.tensors[k], p2.tensors[k])

    def test_shapes_match_registry(self):
        p = M.init_params(DESK)
        shapes = M.param_shapes(DESK)
        assert set(p.tensors) == set(shapes)
        for k, shape in shapes.items():
            assert p.tensors[k].shape == shape

    def test_beta_gamma_logits_sigmoid_quarter(self):
        p = M.init_params(DESK)
        assert 1 / (1 + math.exp(-float(p.tensors["diff.b_beta"]))) == pytest.approx(0.25)
        for logit in p.tensors["diff.gamma_logits"]:
            assert 1 / (1 + math.exp(-logit)) == pytest.approx(0.25)

    def test_xavier_bound(self):
        cfg = DESK
        p = M.init_params(cfg)
        w = p.tensors["head.w2"]  # 12 x 6
        bound = math.sqrt(6.0 / (w.shape[0] + w.shape[1]))
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() > 0.5 * bound  # actually spread over the range

    def test_bound_formula_example(self):
        assert math.sqrt(6.0 / (4 + 8)) == pytest.approx(math.sqrt(0.5))

    def test_biases_zero_gains_one(self):
        p = M.init_params(DESK)
        npt.assert_array_equal(p.tensors["head.b1"], 0.0)
        npt.assert_array_equal(p.tensors["tf0.ln1_g"], 1.0)


class TestForward:
    def test_pure_and_deterministic(self):
        structures, records = tiny_dataset()
        sid = records[0].structure_id
        st = structures[sid]
        params = M.init_params(DESK)
        d1, s1 = M.forward(st, st.seq, records[0], params, DESK)
        d2, s2 = M.forward(st, st.seq, records[0], params, DESK)
        assert d1 == d2
        for a, b in zip(s1.diffused[0], s2.diffused[0]):
            npt.assert_array_equal(a, b)

    def test_length_mismatch(self):
        structures, records = tiny_dataset()
        st = structures[records[0].structure_id]
        params = M.init_params(DESK)
        with pytest.raises(LengthMismatch):
            M.forward(st, st.seq[:-1], records[0], params, DESK)
        wrong = ("A" if st.seq[0] != "A" else "C") + st.seq[1:]
        with pytest.raises(LengthMismatch):
            M.forward(st, wrong, records[0], params, DESK)

    def test_missing_param(self):
        structures, records = tiny_dataset()
        st = structures[records[0].structure_id]
        params = M.init_params(DESK)
        del params.tensors["head.w1"]
        with pytest.raises(MissingParam):
            M.forward(st, st.seq, records[0], params, DESK)

    def test_attention_rows_stochastic_in_state(self):
        structures, records = tiny_dataset()
        st = structures[records[0].structure_id]
        params = M.init_params(DESK)
        _, state = M.forward(st, st.seq, records[0], params, DESK)
        for layer in state.diffused:
            for a in layer:
                npt.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)
        assert len(state.betas) == DESK.n_couple
        assert all(0.0 < b < 1.0 for b in state.betas)

    def test_matches_straight_line_oracle(self):
        structures, records = tiny_dataset(seed=3)
        st = structures[records[0].structure_id]
        params = M.init_params(DESK)
        got, _ = M.forward(st, st.seq, records[0], params, DESK)
        want = forward_oracle(st, records[0], params.tensors, DESK)
        npt.assert_allclose(got, want, atol=1e-9)

    def test_oracle_agreement_across_configs(self):
        for seed, (lg, lt) in ((1, (2, 2)), (2, (1, 2)), (3, (2, 1)), (4, (0, 2))):
            cfg = replace(DESK, gnn_layers=lg, tf_layers=lt, seed=seed)
            structures, records = tiny_dataset(seed=seed)
            st = structures[records[0].structure_id]
            params = M.init_params(cfg)
            got, _ = M.forward(st, st.seq, records[0], params, cfg)
            want = forward_oracle(st, records[0], params.tensors, cfg)
            npt.assert_allclose(got, want, atol=1e-9, err_msg=f"layers {(lg, lt)}")

    def test_no_diffusion_equivalence_bit_exact(self):
        structures, records = tiny_dataset(seed=5, n=6, muts_per=3)
        params = M.init_params(DESK)
        forced = replace(DESK, diffusion=replace(DESK.diffusion, force_beta=0.0, force_gamma=0.0))
        bypass = replace(DESK, diffusion=replace(DESK.diffusion, enabled=False))
        for r in records:
            st = structures[r.structure_id]
            d_forced, _ = M.forward(st, st.seq, r, params, forced)
            d_bypass, _ = M.forward(st, st.seq, r, params, bypass)
            assert d_forced == d_bypass  # bitwise

    def test_transformer_output_structure_independent_when_disabled(self):
        cfg = replace(DESK, diffusion=replace(DESK.diffusion, enabled=False))
        params = M.init_params(cfg)
        structures, records = tiny_dataset(seed=6, n=2, muts_per=1)
        s2, r2 = tiny_dataset(seed=7, n=2, muts_per=1)
        import dgtn.autodiff as ad

        outs = []
        for st in (structures[records[0].structure_id], s2[r2[0].structure_id]):
            seq_st = pio.Structure(st.seq, st.coords)
            tape = ad.Tape()
            p = M._TapeParams(tape, params)
            cache = M.build_cache(seq_st, cfg)
            _, ht, _ = M._encode_nodes(p, cache, cfg)
            outs.append(ht.value)
        # same sequence content would be required for equality; instead check
        # that H^T never reads coordinates: perturb coordinates, same sequence
        st = structures[records[0].structure_id]
        moved = pio.Structure(st.seq, st.coords + 5.0)
        tape = ad.Tape()
        p = M._TapeParams(tape, params)
        _, ht1, _ = M._encode_nodes(p, M.build_cache(st, cfg), cfg)
        tape = ad.Tape()
        p = M._TapeParams(tape, params)
        _, ht2, _ = M._encode_nodes(p, M.build_cache(moved, cfg), cfg)
        npt.assert_array_equal(ht1.value, ht2.value)


class TestLoss:
    def test_perfect_predictions(self):
        params = M.ModelParams({})
        assert M.loss([1.0, 2.0], [1.0, 2.0], params, 0.0) == 0.0

    def test_mean_of_squares(self):
        params = M.ModelParams({})
        assert M.loss([1.0, -1.0], [0.0, 0.0], params, 0.0) == pytest.approx(1.0)

    def test_l2_on_weight_matrices_only(self):
        params = M.ModelParams({
            "w.x": np.array([[3.0], [4.0]]),
            "b.x": np.array([100.0]),
            "embed.aa": np.full((2, 2), 50.0),
        })
        assert M.loss([0.0], [0.0], params, 0.1) == pytest.approx(2.5)

    def test_empty_batch(self):
        with pytest.raises(EmptyBatch):
            M.loss([], [], M.ModelParams({}), 0.0)


class TestGradients:
    def test_registry_total_with_matching_shapes(self):
        structures, records = tiny_dataset()
        params = M.init_params(DESK)
        _, grads = M.gradients(records, structures, params, DESK)
        assert set(grads) == set(params.tensors)
        for k, g in grads.items():
            assert g.shape == params.tensors[k].shape

    def test_duplicate_sample_mean_invariance(self):
        structures, records = tiny_dataset()
        params = M.init_params(DESK)
        l1, g1 = M.gradients(records[:2], structures, params, DESK)
        l2, g2 = M.gradients(records[:2] + records[:2], structures, params, DESK)
        assert l1 == pytest.approx(l2, rel=1e-12)
        for k in g1:
            npt.assert_allclose(g1[k], g2[k], atol=1e-12)

    def test_zero_weight_head_grad_routes_to_bias_only(self):
        structures, records = tiny_dataset()
        params = M.init_params(DESK)
        for k in params.tensors:
            params.tensors[k] = np.zeros_like(params.tensors[k])
        _, grads = M.gradients(records[:1], structures, params, DESK)
        npt.assert_array_equal(grads["head.w3"], 0.0)
        assert np.abs(grads["head.b3"]).max() > 0

    def test_l2_term_gradient(self):
        structures, records = tiny_dataset()
        cfg = replace(DESK, l2_lambda=0.01)
        params = M.init_params(cfg)
        _, g_reg = M.gradients(records[:2], structures, params, cfg)
        _, g_plain = M.gradients(records[:2], structures, params, DESK)
        w = "head.w1"
        npt.assert_allclose(g_reg[w] - g_plain[w], 2 * 0.01 * params.tensors[w], atol=1e-10)
        npt.assert_allclose(g_reg["head.b1"], g_plain["head.b1"], atol=1e-12)


class TestCheckpoint:
    def test_round_trip_bits_and_config(self, tmp_path):
        params = M.init_params(DESK)
        path = str(tmp_path / "m.dgt")
        M.save_checkpoint(path, params, DESK)
        loaded, cfg = M.load_checkpoint(path)
        assert cfg == DESK
        for k in params.names():
            npt.assert_array_equal(loaded.tensors[k], params.tensors[k])

    def test_magic_bytes(self, tmp_path):
        params = M.init_params(DESK)
        path = str(tmp_path / "m.dgt")
        M.save_checkpoint(path, params, DESK)
        data = open(path, "rb").read()
        assert data[:4] == b"DGTN"
        bad = str(tmp_path / "bad.dgt")
        open(bad, "wb").write(b"NOPE" + data[4:])
        with pytest.raises(IoError):
            M.load_checkpoint(bad)

    def test_predictions_bit_identical_after_reload(self, tmp_path):
        structures, records = tiny_dataset(seed=9, n=6, muts_per=3)
        params = M.init_params(DESK)
        path = str(tmp_path / "m.dgt")
        M.save_checkpoint(path, params, DESK)
        loaded, cfg = M.load_checkpoint(path)
        before = M.predict_batch(records, structures, params, DESK)
        after = M.predict_batch(records, structures, loaded, cfg)
        npt.assert_array_equal(before, after)

    def test_save_is_deterministic(self, tmp_path):
        params = M.init_params(DESK)
        p1, p2 = str(tmp_path / "a.dgt"), str(tmp_path / "b.dgt")
        M.save_checkpoint(p1, params, DESK)
        M.save_checkpoint(p2, params, DESK)
        assert open(p1, "rb").read() == open(p2, "rb").read()


class TestGradientLiveness:
    def test_all_parameters_live_except_gamma(self):
        # gamma logits only steer discrete neighborhood selection, so their
        # gradient is exactly zero almost everywhere; everything else flows.
        structures, records = tiny_dataset(seed=21, n=6, muts_per=3)
        params = M.init_params(DESK)
        _, grads = M.gradients(records, structures, params, DESK)
        dead = {k for k, g in grads.items() if np.abs(g).max() == 0.0}
        assert dead == {"diff.gamma_logits"}
