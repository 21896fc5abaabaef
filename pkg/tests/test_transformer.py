import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from duo import autodiff as ad
from duo.data import ParallelData, make_batches
from duo.errors import ConfigError, DimensionError
from duo.gradcheck import finite_diff_check
from duo.rng import SplitMix64
from duo.transformer import (DuoTransformer, TransformerConfig, causal_mask, count_projection_params,
                             duo_layer_norm, duo_multi_head, fused_output_logits, input_projection_count,
                             match_vanilla_width, multi_head, scaled_dot_attention, sinusoidal_positions,
                             transformer_param_formula)


def C(values):
    return ad.constant(np.array(values, dtype=np.float64))


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def toy(seed=0, dtype=np.float64, **kw):
    opts = dict(vocab_size=12, d_model=8, d_ff=16, n_layers=2, heads=2, dropout=0.0)
    opts.update(kw)
    return DuoTransformer(TransformerConfig(**opts), SplitMix64(seed), dtype)


def counterpart(name):
    if name == "emb.s":
        return "emb.p"
    return name.replace("_s", "_p") if "_s" in name else None


class TestPositions:
    def test_position_zero(self):
        np.testing.assert_array_equal(sinusoidal_positions(3, 6)[0], [0, 1, 0, 1, 0, 1])

    def test_range(self):
        pe = sinusoidal_positions(50, 16)
        assert pe.min() >= -1 and pe.max() <= 1

    def test_first_entry(self):
        assert sinusoidal_positions(2, 4)[1, 0] == pytest.approx(math.sin(1), abs=1e-15)
        assert math.sin(1) == pytest.approx(0.8415, abs=1e-4)

    def test_odd_width(self):
        with pytest.raises(ConfigError):
            sinusoidal_positions(3, 5)


class TestCausalMask:
    def test_small(self):
        assert causal_mask(1).tolist() == [[True]]
        assert causal_mask(2).tolist() == [[True, False], [True, True]]

    def test_counts(self):
        m = causal_mask(8)
        assert [int(r.sum()) for r in m] == list(range(1, 9))


class TestScaledDot:
    def test_single_key(self):
        out = scaled_dot_attention(C([[3.0, -1.0], [0.5, 2.0]]), C([[1.0, 1.0]]), C([[7.0, 8.0, 9.0]]))
        np.testing.assert_allclose(out.data, [[7, 8, 9], [7, 8, 9]], atol=1e-14)

    def test_zero_query_is_masked_mean(self):
        V = C([[1.0], [2.0], [6.0]])
        mask = np.array([[True, False, True]])
        out = scaled_dot_attention(C([[0.0, 0.0]]), C(np.ones((3, 2))), V, mask)
        np.testing.assert_allclose(out.data, [[3.5]], atol=1e-14)

    def test_hand_oracle(self):
        out = scaled_dot_attention(C([[1.0], [0.0]]), C([[1.0], [-1.0]]), C([[10.0], [20.0]])).data
        w = 1 / (1 + math.exp(-2))
        assert w == pytest.approx(0.8808, abs=1e-4)
        assert abs(out[0, 0] - (10 * w + 20 * (1 - w))) <= 1e-10
        assert out[0, 0] == pytest.approx(11.19, abs=5e-3)
        assert abs(out[1, 0] - 15.0) <= 1e-10

    def test_fully_masked_row(self):
        out = scaled_dot_attention(C([[1.0], [1.0]]), C([[1.0], [2.0]]), C([[3.0], [4.0]]),
                                   np.array([[True, True], [False, False]]))
        assert out.data[1, 0] == 0.0

    def test_shape_error(self):
        with pytest.raises(DimensionError):
            scaled_dot_attention(C(np.ones((2, 3))), C(np.ones((2, 2))), C(np.ones((2, 2))))


def identity_site(d, shared=True):
    names = ("wq_s", "wq_p", "wkv_s", "wkv_p") if shared else ("wq_s", "wq_p", "wk_s", "wv_s", "wk_p", "wv_p")
    return {n: C(np.eye(d)) for n in names + ("wo_s", "wo_p")}


class TestDuoMultiHead:
    def test_symmetric_inputs(self):
        x = C(SplitMix64(3).uniform((4, 6)))
        A_S, A_P = duo_multi_head(x, x, x, x, identity_site(6), heads=1)
        np.testing.assert_array_equal(A_S.data, A_P.data)

    def test_length_one(self):
        rng = SplitMix64(4)
        p = {n: C(rng.uniform((4, 4))) for n in ("wq_s", "wq_p", "wkv_s", "wkv_p", "wo_s", "wo_p")}
        xs, xp, cs, cp = (C(rng.uniform((1, 4))) for _ in range(4))
        A_S, A_P = duo_multi_head(xs, xp, cs, cp, p, heads=2)
        np.testing.assert_allclose(A_S.data, cs.data @ p["wkv_s"].data @ p["wo_s"].data, atol=1e-13)
        np.testing.assert_allclose(A_P.data, cp.data @ p["wkv_p"].data @ p["wo_p"].data, atol=1e-13)

    def test_hand_composition(self):
        # h = 1, d = 2: chain the scaled-dot oracle through each projection
        x_S, x_P = np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[0.5, 0.5], [1.0, -1.0]])
        W = {"wq_s": [[1, 0], [0, 2]], "wq_p": [[0, 1], [1, 0]], "wkv_s": [[1, 1], [0, 1]],
             "wkv_p": [[2, 0], [0, 1]], "wo_s": [[1, 0], [0, 1]], "wo_p": [[0, 1], [1, 1]]}
        W = {k: np.array(v, dtype=float) for k, v in W.items()}
        A_S, A_P = duo_multi_head(C(x_S), C(x_P), C(x_S), C(x_P), {k: C(v) for k, v in W.items()}, heads=1)
        q_P, k_P, v_S = x_P @ W["wq_p"], x_P @ W["wkv_p"], x_S @ W["wkv_s"]
        exp_S = softmax(q_P @ k_P.T / math.sqrt(2)) @ v_S @ W["wo_s"]
        q_S, k_S, v_P = x_S @ W["wq_s"], x_S @ W["wkv_s"], x_P @ W["wkv_p"]
        exp_P = softmax(q_S @ k_S.T / math.sqrt(2)) @ v_P @ W["wo_p"]
        np.testing.assert_allclose(A_S.data, exp_S, atol=1e-12)
        np.testing.assert_allclose(A_P.data, exp_P, atol=1e-12)

    def test_indivisible_heads(self):
        x = C(np.ones((2, 6)))
        with pytest.raises(ConfigError):
            duo_multi_head(x, x, x, x, identity_site(6), heads=4)

    def test_shared_gradient_is_sum_of_roles(self):
        rng = SplitMix64(12)
        base = {n: rng.uniform((4, 4)) - 0.5 for n in ("wq_s", "wq_p", "wkv_s", "wkv_p", "wo_s", "wo_p")}
        xs, xp, cs, cp = (C(rng.uniform((3, 4))) for _ in range(4))
        G = C(rng.uniform((3, 8)))
        shared = {n: ad.Tensor(v.copy(), requires_grad=True) for n, v in base.items()}
        untied = {n: ad.Tensor(base[n].copy(), requires_grad=True)
                  for n in ("wq_s", "wq_p", "wo_s", "wo_p")}
        for s in ("s", "p"):
            untied[f"wk_{s}"] = ad.Tensor(base[f"wkv_{s}"].copy(), requires_grad=True)
            untied[f"wv_{s}"] = ad.Tensor(base[f"wkv_{s}"].copy(), requires_grad=True)
        for params in (shared, untied):
            out = ad.concat_lastdim(*duo_multi_head(xs, xp, cs, cp, params, heads=2, mask=causal_mask(3)))
            ad.backward(ad.sum_all(ad.mul(out, G)))
        for s in ("s", "p"):
            np.testing.assert_allclose(shared[f"wkv_{s}"].grad,
                                       untied[f"wk_{s}"].grad + untied[f"wv_{s}"].grad, atol=1e-13)


class TestDuoLayerNorm:
    def setup_method(self):
        self.g, self.b = C([1.0, 1.0, 1.0]), C([0.0, 0.0, 0.0])

    def test_zero_sublayer(self):
        x = C([[1.0, 2.0, 4.0]])
        np.testing.assert_array_equal(duo_layer_norm(x, C(np.zeros((1, 3))), self.g, self.b).data,
                                      ad.layer_norm(x, self.g, self.b).data)

    def test_zero_input(self):
        sub = C([[1.0, 2.0, 4.0]])
        np.testing.assert_array_equal(duo_layer_norm(C(np.zeros((1, 3))), sub, self.g, self.b).data,
                                      ad.layer_norm(sub, self.g, self.b).data)

    def test_hand_oracle(self):
        out = duo_layer_norm(C([1.0, -1.0]), C([1.0, 1.0]), C([1.0, 1.0]), C([0.0, 0.0]), eps=0.0)
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            duo_layer_norm(C(np.ones((2, 3))), C(np.ones((3, 3))), self.g, self.b)


class TestFusedOutput:
    def test_zero_fusion(self):
        rng = SplitMix64(1)
        out = fused_output_logits(C(rng.uniform((2, 2))), C(rng.uniform((2, 2))), C(rng.uniform((5, 3))),
                                  C(rng.uniform((5, 2))), C(np.zeros((5, 2))), C(rng.uniform((4, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 5)))

    def test_scalar_chain(self):
        # |V| = 2, d1 = d2 = 1, d_model = 1
        E_S, E_P = C([[1.0], [2.0]]), C([[3.0], [-1.0]])
        W_fuse, F_dec = C([[2.0], [1.0]]), C([[0.5], [-1.0]])
        h_S, h_P = C([[4.0]]), C([[1.0]])
        # T = [1*2 + 3*1, 2*2 - 1*1] = [5, 3]; h = 4*0.5 - 1 = 1
        np.testing.assert_allclose(fused_output_logits(h_S, h_P, E_S, E_P, W_fuse, F_dec).data,
                                   [[5.0, 3.0]], atol=1e-10)

    def test_tied_storage(self):
        model = toy()
        assert not any(n.startswith(("out", "head")) for n in model.params)
        tally = model.num_trainable()
        assert tally == transformer_param_formula(model.cfg)
        h = [C(SplitMix64(5).uniform((1, 1, 8))) for _ in range(2)]
        before = model.output_logits(h).data.copy()
        model.params["emb.s"].data[7] += 0.5
        after = model.output_logits(h).data
        changed = np.nonzero(np.abs(after - before).reshape(-1, 12).max(axis=0) > 0)[0]
        assert changed.tolist() == [7]


class TestParameterAccounting:
    def test_duo_site_has_four(self):
        report = count_projection_params(toy())
        assert set(report["sites"].values()) == {4}
        assert report["ratio"] == pytest.approx(4 / 3)

    def test_vanilla_site_has_three(self):
        report = count_projection_params(toy(meta_embeddings=False))
        assert set(report["sites"].values()) == {3}

    def test_unshared_site_has_six(self):
        assert count_projection_params(toy(kv_sharing=False))["input_projections"] == 6

    def test_closed_form_toy(self):
        model = toy(n_layers=2, heads=2, d_model=8)
        assert count_projection_params(model)["total"] == transformer_param_formula(model.cfg)

    @pytest.mark.parametrize("flags", [
        dict(meta_embeddings=False), dict(kv_sharing=False, duo_norm=False, fusion=False),
        dict(fusion=False), dict(d_model1=6), dict(d_model1=12, kv_sharing=False)])
    def test_closed_form_variants(self, flags):
        model = toy(**flags)
        assert model.num_trainable() == transformer_param_formula(model.cfg)

    def test_input_projection_count(self):
        assert input_projection_count({"wq_s": 0, "wq_p": 0, "wkv_s": 0, "wkv_p": 0, "wo_s": 0}) == 4

    def test_matched_vanilla_width(self):
        duo = TransformerConfig(vocab_size=40)
        van = match_vanilla_width(duo)
        gap = abs(transformer_param_formula(van) - transformer_param_formula(duo)) / transformer_param_formula(duo)
        assert gap <= 0.05 and not van.meta_embeddings

    def test_config_errors(self):
        with pytest.raises(ConfigError):
            TransformerConfig(vocab_size=10, d_model=7, heads=1)
        with pytest.raises(ConfigError):
            TransformerConfig(vocab_size=10, d_model=10, heads=4)


def random_ids(rng, B, l, V, pad_tail=0):
    ids = 4 + (rng.uniform((B, l)) * (V - 4)).astype(np.int64)
    if pad_tail:
        ids[:, -pad_tail:] = 0
    return ids


class TestStack:
    def test_empty_encoder_is_identity(self):
        model = toy(n_layers=0)
        xs = model.embed(np.array([[4, 5, 6]]))
        out = model.encode_streams(xs, np.ones((1, 3), dtype=bool))
        for a, b in zip(xs, out):
            np.testing.assert_array_equal(a.data, b.data)

    @given(st.integers(1, 16), st.sampled_from([1, 2]), st.sampled_from([1, 2, 4]), st.booleans())
    def test_shapes(self, l, n_layers, heads, meta):
        model = toy(n_layers=n_layers, heads=heads, meta_embeddings=meta)
        rng = SplitMix64(l)
        src, tgt = random_ids(rng, 2, l, 12), random_ids(rng, 2, l, 12)
        memory, mask = model.encode(src)
        hs = model.decode(tgt, memory, mask)
        assert len(memory) == len(hs) == (2 if meta else 1)
        assert all(h.shape == (2, l, 8) for h in list(memory) + list(hs))
        assert model.output_logits(hs).shape == (2, l, 12)

    def test_encoder_pad_neutrality(self):
        model = toy(seed=3)
        ids = np.array([[4, 9, 6, 0, 0]])
        mask = ids != 0
        xs = model.embed(ids)
        base = model.encode_streams(xs, mask)
        noisy = [C(x.data + np.where(mask[..., None], 0.0, SplitMix64(i).normal(x.shape)))
                 for i, x in enumerate(xs)]
        out = model.encode_streams(noisy, mask)
        for a, b in zip(base, out):
            assert np.abs(a.data[mask] - b.data[mask]).max() <= 1e-6

    @pytest.mark.parametrize("meta", [True, False])
    def test_decoder_causality_single_precision(self, meta):
        model = toy(seed=5, dtype=np.float32, meta_embeddings=meta)
        rng = SplitMix64(9)
        src, tgt = random_ids(rng, 2, 6, 12), random_ids(rng, 2, 7, 12)
        base = model.forward(src, tgt).data
        for i in range(7):
            changed = tgt.copy()
            changed[:, i + 1:] = random_ids(rng, 2, 7, 12)[:, i + 1:]
            out = model.forward(src, changed).data
            assert np.abs(out[:, :i + 1] - base[:, :i + 1]).max() <= 1e-6

    def test_single_step_decode_matches_forward(self):
        model = toy(seed=2)
        src = np.array([[4, 5, 6]])
        first = model.forward(src, np.array([[2]])).data[0, 0]
        full = model.forward(src, np.array([[2, 7, 8]])).data[0, 0]
        np.testing.assert_allclose(first, full, atol=1e-12)

    def test_pad_columns_do_not_change_loss(self):
        model = toy(seed=4, dtype=np.float32)
        data = ParallelData([[4, 5, 6], [7, 8]], [[9, 10], [11, 4, 5]])
        batch = make_batches(data, 2, shuffle=False)[0]
        base = float(model.loss(batch, smoothing=0.1).data)
        for key in ("src", "tgt_in", "tgt_out"):
            arr = getattr(batch, key)
            setattr(batch, key, np.concatenate([arr, np.zeros((2, 3), dtype=arr.dtype)], axis=1))
        assert abs(float(model.loss(batch, smoothing=0.1).data) - base) <= 1e-6

    @pytest.mark.parametrize("duo_norm", [True, False])
    def test_stream_symmetry(self, duo_norm):
        model = toy(seed=6, duo_norm=duo_norm)
        for name, p in model.params.items():
            other = counterpart(name)
            if other is not None:
                model.params[other].data = p.data.copy()
        rng = SplitMix64(1)
        src, tgt = random_ids(rng, 2, 5, 12, pad_tail=1), random_ids(rng, 2, 4, 12)
        memory, mask = model.encode(src)
        hs = model.decode(tgt, memory, mask)
        assert np.abs(memory[0].data - memory[1].data).max() <= 1e-10
        assert np.abs(hs[0].data - hs[1].data).max() <= 1e-10

    def test_shared_model_gradient_equals_untied(self):
        shared, untied = toy(seed=7), toy(seed=7, kv_sharing=False)
        for name, p in untied.params.items():
            if name in shared.params:
                p.data = shared.params[name].data.copy()
        for name in shared.params:
            if ".wkv_" in name:
                for role in ("wk_", "wv_"):
                    untied.params[name.replace("wkv_", role)].data = shared.params[name].data.copy()
        data = ParallelData([[4, 5, 6, 7], [8, 9]], [[10, 11], [4, 6, 8]])
        batch = make_batches(data, 2, shuffle=False)[0]
        la, lb = shared.loss(batch, smoothing=0.1), untied.loss(batch, smoothing=0.1)
        assert float(la.data) == pytest.approx(float(lb.data), abs=1e-12)
        ad.backward(la)
        ad.backward(lb)
        for name, p in shared.params.items():
            if ".wkv_" in name:
                k, v = (untied.params[name.replace("wkv_", r)].grad for r in ("wk_", "wv_"))
                np.testing.assert_allclose(p.grad, k + v, atol=1e-12)
            else:
                np.testing.assert_allclose(p.grad, untied.params[name].grad, atol=1e-12)

    def test_translator_gradient_check(self):
        model = toy(seed=8, vocab_size=9, d_model=8, d_ff=12, n_layers=1, heads=2, d_model1=6)
        data = ParallelData([[4, 5, 6, 7, 8], [5, 6]], [[6, 7, 8, 4], [8, 4]])
        batch = make_batches(data, 2, shuffle=False)[0]
        params = list(model.trainable_parameters().values())
        assert finite_diff_check(lambda *_: model.loss(batch, smoothing=0.1), params) < 1e-4

    def test_greedy_decode_respects_limit(self):
        model = toy(seed=9)
        outs = model.greedy_decode([[4, 5], [6]])
        assert len(outs[0]) <= 9 and len(outs[1]) <= 7
        assert all(0 not in o and 2 not in o and 3 not in o for o in outs)

    def test_greedy_decode_deterministic(self):
        model = toy(seed=10)
        assert model.greedy_decode([[4, 5, 6]]) == model.greedy_decode([[4, 5, 6]])

    def test_frozen_pretrained_table(self):
        table = SplitMix64(0).uniform((12, 6))
        model = DuoTransformer(TransformerConfig(vocab_size=12, d_model=8, d_ff=16, n_layers=1, heads=2,
                                                 d_model1=6), SplitMix64(0), s_table=table, train_s_table=False)
        assert "emb.s" not in model.trainable_parameters()
        np.testing.assert_array_equal(model.params["emb.s"].data[0], 0.0)
        assert "emb.proj" in model.trainable_parameters()
