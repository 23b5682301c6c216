import numpy as np
import pytest

from conftest import zero_modules
from oracles import ref_forward
from pglight.errors import InputError, NumericError, ShapeError
from pglight.model import ModelConfig, forward, random_init


class TestConfig:
    def test_heads_must_divide_into_groups(self):
        with pytest.raises(ShapeError):
            ModelConfig(2, 8, 5, 2, 4, 16, 32)

    def test_counts_positive(self):
        with pytest.raises(ShapeError):
            ModelConfig(0, 8, 4, 2, 4, 16, 32)

    def test_eps_positive(self):
        with pytest.raises(NumericError):
            ModelConfig(2, 8, 4, 2, 4, 16, 32, eps=0.0)

    def test_default_eps(self, toy_config):
        assert toy_config.eps == 1e-6

    def test_uniform_overrides_fold_away(self):
        c = ModelConfig(2, 8, 4, 2, 4, 16, 32, layer_kv_groups=(1, 1), layer_ffn_dims=(12, 12))
        assert c.layer_kv_groups is None and c.num_kv_groups == 1 and c.num_query_heads == 2
        assert c.layer_ffn_dims is None and c.ffn_dim == 12

    def test_dict_roundtrip(self):
        c = ModelConfig(2, 8, 4, 2, 4, 16, 32, postnorm_present=((True, False), (False, True)), layer_ffn_dims=(3, 5))
        assert ModelConfig.from_dict(c.to_dict()) == c


class TestForward:
    def test_matches_reference(self, toy_model):
        tokens = [3, 17, 0, 31, 5, 9]
        logits, _ = forward(toy_model, tokens)
        ref, _ = ref_forward(toy_model, tokens)
        rel = np.max(np.abs(logits - ref)) / np.max(np.abs(ref))
        assert rel < 1e-5

    def test_matches_reference_without_postnorms(self, toy_config):
        cfg = toy_config.replace(postnorm_present=((False, True), (True, False)))
        w = random_init(cfg, 11)
        logits, _ = forward(w, [1, 2, 3])
        ref, _ = ref_forward(w, [1, 2, 3])
        assert np.max(np.abs(logits - ref)) / np.max(np.abs(ref)) < 1e-5

    def test_zero_module_layer_is_passthrough(self, toy_config):
        w = zero_modules(random_init(toy_config.replace(num_layers=1, postnorm_present=None), 2))
        _, tr = forward(w, [4, 5, 6], trace=True)
        np.testing.assert_array_equal(tr.layers[0].output, tr.layers[0].input)

    def test_single_token_attention_is_v_projection(self, toy_model):
        _, tr = forward(toy_model, [12], trace=True)
        lt = tr.layers[0]
        lw = toy_model.layers[0]
        v = lt.pre_attn_out @ lw.W_V
        hpg = toy_model.config.heads_per_group
        for j in range(toy_model.config.num_query_heads):
            g = j // hpg
            np.testing.assert_allclose(lt.heads[0, j], v[0, g * 4:(g + 1) * 4], rtol=1e-6, atol=1e-7)

    def test_deterministic(self, toy_model):
        a, _ = forward(toy_model, [1, 2, 3, 4])
        b, _ = forward(toy_model, [1, 2, 3, 4])
        assert a.tobytes() == b.tobytes()

    def test_trace_complete(self, toy_model):
        S = 5
        _, tr = forward(toy_model, list(range(S)), trace=True)
        cfg = toy_model.config
        assert len(tr.layers) == cfg.num_layers
        for lt in tr.layers:
            assert lt.heads.shape == (S, cfg.num_query_heads, cfg.head_dim)
            assert lt.ffn_inter.shape == (S, cfg.ffn_dim)
            for name in ("input", "pre_attn_out", "attn_out", "post_attn_out", "pre_ffn_out", "ffn_out", "post_ffn_out", "output"):
                assert getattr(lt, name).shape == (S, cfg.hidden), name
        assert tr.final_norm_out.shape == (S, cfg.hidden)
        assert len(list(tr.norm_outputs())) == 4 * cfg.num_layers + 1

    def test_no_trace_by_default(self, toy_model):
        assert forward(toy_model, [1])[1] is None

    def test_bad_token(self, toy_model):
        with pytest.raises(InputError, match="32"):
            forward(toy_model, [1, 32])


class TestRandomInit:
    def test_same_seed_identical(self, toy_config):
        a, b = random_init(toy_config, 5), random_init(toy_config, 5)
        assert all(x[1].tobytes() == y[1].tobytes() for x, y in zip(a.tensors(), b.tensors()))

    def test_different_seed_differs(self, toy_config):
        a, b = random_init(toy_config, 5), random_init(toy_config, 6)
        assert a.embedding.tobytes() != b.embedding.tobytes()

    def test_gammas_are_one(self, toy_model):
        for _, g in toy_model.norm_gammas():
            assert np.all(g == 1.0)

    def test_fan_in_scale(self):
        cfg = ModelConfig(1, 64, 4, 2, 16, 256, 16)
        w = random_init(cfg, 0)
        assert np.std(w.layers[0].W_up) == pytest.approx(1 / 8, rel=0.05)
        assert np.std(w.layers[0].W_down) == pytest.approx(1 / 16, rel=0.05)
