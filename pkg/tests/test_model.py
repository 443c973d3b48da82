import numpy as np
import pytest

from speechface.features import FeatureSequence
from speechface.mesh import FileFormatError, ShapeMismatchError, TemplateFace
from speechface.model import (
    GruLayerParams,
    InvalidOneHotError,
    LstmLayerParams,
    ModelConfig,
    RnnLayerParams,
    condition_and_project,
    gru_cell_step,
    gru_forward,
    init_params,
    load_checkpoint,
    lstm_cell_step,
    predict,
    recurrent_forward,
    rnn_cell_step,
    save_checkpoint,
)


def tiny_config(cell="gru", dropout=0.0):
    return ModelConfig(input_width=6, num_vertices=3, subjects=["a", "b"],
                       hidden_size=8, cell_type=cell, dropout_rate=dropout)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def random_gru(rng, h, xw):
    cols = h + xw
    return GruLayerParams(*(rng.normal(scale=0.4, size=(h, cols)) for _ in range(3)),
                          *(rng.normal(scale=0.4, size=h) for _ in range(3)))


class TestGruCell:
    def test_zero_weights(self):
        h, xw = 4, 3
        p = GruLayerParams(W_r=np.zeros((h, h + xw)), W_a=np.zeros((h, h + xw)),
                           W_u=np.zeros((h, h + xw)), b_r=np.zeros(h),
                           b_a=np.zeros(h), b_u=np.zeros(h))
        a_prev = np.array([1.0, -2.0, 0.5, 3.0])
        # update gate sits at 0.5, candidate at 0: output is half the old state
        np.testing.assert_allclose(gru_cell_step(p, a_prev, np.ones(xw)), 0.5 * a_prev)

    def test_saturated_update_gate_returns_candidate(self):
        rng = np.random.default_rng(0)
        p = random_gru(rng, 4, 3)
        p.b_u[:] = 100.0
        a_prev = rng.normal(size=4)
        x = rng.normal(size=3)
        z = np.concatenate([a_prev, x])
        r = sigmoid(p.W_r @ z + p.b_r)
        candidate = np.tanh(p.W_a @ np.concatenate([r * a_prev, x]) + p.b_a)
        np.testing.assert_allclose(gru_cell_step(p, a_prev, x), candidate, atol=1e-9)

    def test_random_cases_vs_reference(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            p = random_gru(rng, 5, 4)
            a_prev = rng.normal(size=5)
            x = rng.normal(size=4)
            z = np.concatenate([a_prev, x])
            r = sigmoid(p.W_r @ z + p.b_r)
            c = np.tanh(p.W_a @ np.concatenate([r * a_prev, x]) + p.b_a)
            u = sigmoid(p.W_u @ z + p.b_u)
            expected = u * c + (1.0 - u) * a_prev
            np.testing.assert_allclose(gru_cell_step(p, a_prev, x), expected, atol=1e-9)


class TestOtherCells:
    def test_zero_weight_rnn(self):
        p = RnnLayerParams(W=np.zeros((4, 7)), b=np.zeros(4))
        np.testing.assert_array_equal(rnn_cell_step(p, np.ones(4), np.ones(3)), 0.0)

    def test_zero_weight_lstm_stays_at_zero(self):
        h, xw = 4, 3
        p = LstmLayerParams(*(np.zeros((h, h + xw)) for _ in range(4)),
                            *(np.zeros(h) for _ in range(4)))
        hv, cv = lstm_cell_step(p, (np.zeros(h), np.zeros(h)), np.ones(xw))
        np.testing.assert_array_equal(hv, 0.0)
        np.testing.assert_array_equal(cv, 0.0)

    def test_rnn_vs_reference(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            p = RnnLayerParams(W=rng.normal(scale=0.4, size=(5, 9)),
                               b=rng.normal(scale=0.4, size=5))
            hp = rng.normal(size=5)
            x = rng.normal(size=4)
            expected = np.tanh(p.W @ np.concatenate([hp, x]) + p.b)
            np.testing.assert_allclose(rnn_cell_step(p, hp, x), expected, atol=1e-9)

    def test_lstm_vs_reference(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            h, xw = 5, 4
            p = LstmLayerParams(
                *(rng.normal(scale=0.4, size=(h, h + xw)) for _ in range(4)),
                *(rng.normal(scale=0.4, size=h) for _ in range(4)))
            hp, cp = rng.normal(size=h), rng.normal(size=h)
            x = rng.normal(size=xw)
            z = np.concatenate([hp, x])
            f = sigmoid(p.W_f @ z + p.b_f)
            i = sigmoid(p.W_i @ z + p.b_i)
            o = sigmoid(p.W_o @ z + p.b_o)
            g = np.tanh(p.W_c @ z + p.b_c)
            c_new = f * cp + i * g
            h_new = o * np.tanh(c_new)
            got_h, got_c = lstm_cell_step(p, (hp, cp), x)
            np.testing.assert_allclose(got_h, h_new, atol=1e-9)
            np.testing.assert_allclose(got_c, c_new, atol=1e-9)


class TestForward:
    def test_zero_model_gives_zero_hidden(self):
        params = init_params(tiny_config(), seed=0)
        for _, arr in params.tensors():
            arr[...] = 0.0
        H = gru_forward(params, np.ones((5, 6)))
        np.testing.assert_array_equal(H, 0.0)

    def test_inference_is_deterministic(self):
        params = init_params(tiny_config(dropout=0.3), seed=1)
        X = np.random.default_rng(4).normal(size=(5, 6))
        np.testing.assert_array_equal(gru_forward(params, X), gru_forward(params, X))

    def test_matches_step_by_step_unroll(self):
        params = init_params(tiny_config(), seed=2)
        X = np.random.default_rng(5).normal(size=(5, 6))
        H = gru_forward(params, X)
        a1 = np.zeros(8)
        a2 = np.zeros(8)
        for t in range(5):
            a1 = gru_cell_step(params.layer1, a1, X[t])
            a2 = gru_cell_step(params.layer2, a2, a1)
            np.testing.assert_allclose(H[t], a2, atol=1e-9)

    def test_hidden_states_strictly_bounded(self):
        rng = np.random.default_rng(6)
        params = init_params(tiny_config(), seed=3)
        H = gru_forward(params, rng.normal(size=(50, 6)))
        assert (np.abs(H) < 1.0).all()

    def test_training_dropout_changes_output(self):
        params = init_params(tiny_config(dropout=0.5), seed=4)
        X = np.random.default_rng(7).normal(size=(10, 6))
        rng = np.random.default_rng(8)
        h_train = gru_forward(params, X, training=True, rng=rng)
        h_eval = gru_forward(params, X, training=False)
        assert not np.allclose(h_train, h_eval)

    def test_width_mismatch(self):
        params = init_params(tiny_config(), seed=5)
        with pytest.raises(ShapeMismatchError):
            gru_forward(params, np.zeros((4, 9)))

    def test_cell_swap_preserves_shapes(self):
        X = np.random.default_rng(9).normal(size=(7, 6))
        for cell in ("gru", "rnn", "lstm"):
            params = init_params(tiny_config(cell=cell), seed=6)
            assert gru_forward(params, X).shape == (7, 8)


class TestConditioning:
    def _setup(self, seed=0):
        params = init_params(tiny_config(), seed=seed)
        rng = np.random.default_rng(seed + 100)
        H = rng.normal(size=(4, 8))
        tpl = TemplateFace(vertices=rng.normal(size=(3, 3)), subject_id="a")
        return params, H, tpl

    def test_all_ones_embeddings_pass_hidden_through(self):
        params, H, tpl = self._setup()
        params.cond.W_S[...] = 0.0
        params.cond.b_S[...] = 1.0
        params.cond.W_E[...] = 0.0
        params.cond.b_E[...] = 1.0
        out = condition_and_project(params, H, np.array([1.0, 0.0]),
                                    np.array([1.0, 0.0]), tpl)
        expected = (H @ params.out.W_out.T + params.out.b_out).reshape(4, 3, 3) \
            + tpl.vertices
        np.testing.assert_allclose(out.frames, expected, atol=1e-12)

    def test_zero_emotion_embedding_annihilates_hidden(self):
        params, H, tpl = self._setup(1)
        params.cond.W_E[...] = 0.0
        params.cond.b_E[...] = 0.0
        out = condition_and_project(params, H, np.array([1.0, 0.0]),
                                    np.array([0.0, 1.0]), tpl)
        expected = params.out.b_out.reshape(3, 3) + tpl.vertices
        for t in range(4):
            np.testing.assert_allclose(out.frames[t], expected, atol=1e-12)

    def test_random_params_vs_formula_oracle(self):
        params, H, tpl = self._setup(2)
        sub = np.array([0.0, 1.0])
        emo = np.array([1.0, 0.0])
        out = condition_and_project(params, H, sub, emo, tpl)
        s = params.cond.W_S @ sub + params.cond.b_S
        e = params.cond.W_E @ emo + params.cond.b_E
        for t in range(4):
            h_tilde = H[t] * s * e
            y = params.out.W_out @ h_tilde + params.out.b_out
            np.testing.assert_allclose(out.frames[t], y.reshape(3, 3) + tpl.vertices,
                                       atol=1e-9)

    def test_subject_emotion_roles_commute(self):
        params, H, tpl = self._setup(3)
        out1 = condition_and_project(params, H, np.array([1.0, 0.0]),
                                     np.array([0.0, 1.0]), tpl)
        import copy
        swapped = copy.deepcopy(params)
        swapped.cond.W_S, swapped.cond.W_E = params.cond.W_E.copy(), params.cond.W_S.copy()
        swapped.cond.b_S, swapped.cond.b_E = params.cond.b_E.copy(), params.cond.b_S.copy()
        out2 = condition_and_project(swapped, H, np.array([0.0, 1.0]),
                                     np.array([1.0, 0.0]), tpl)
        np.testing.assert_array_equal(out1.frames, out2.frames)

    def test_one_hot_selects_embedding_column(self):
        params, _, _ = self._setup(4)
        onehot = np.array([0.0, 1.0])
        s = params.cond.W_S @ onehot + params.cond.b_S
        np.testing.assert_allclose(s, params.cond.W_S[:, 1] + params.cond.b_S)

    def test_invalid_one_hot_rejected(self):
        params, H, tpl = self._setup(5)
        for bad in (np.zeros(2), np.ones(2), np.array([0.5, 0.5])):
            with pytest.raises(InvalidOneHotError):
                condition_and_project(params, H, bad, np.array([1.0, 0.0]), tpl)


class TestPredict:
    def _setup(self):
        params = init_params(tiny_config(), seed=7)
        rng = np.random.default_rng(11)
        features = FeatureSequence(data=rng.normal(size=(20, 3)), fps=50.0)
        tpl = TemplateFace(vertices=rng.normal(size=(3, 3)), subject_id="a")
        return params, features, tpl

    def test_deterministic(self):
        params, features, tpl = self._setup()
        out1 = predict(params, features, 25.0, 10, "a", "neutral", tpl)
        out2 = predict(params, features, 25.0, 10, "a", "neutral", tpl)
        np.testing.assert_array_equal(out1.frames, out2.frames)

    def test_frame_count_contract(self):
        params, features, tpl = self._setup()
        out = predict(params, features, 25.0, 10, "b", "expressive", tpl)
        assert out.num_frames == 10
        assert out.num_vertices == 3

    def test_unknown_label(self):
        params, features, tpl = self._setup()
        with pytest.raises(KeyError, match="subject"):
            predict(params, features, 25.0, 10, "nobody", "neutral", tpl)


class TestInit:
    def test_seed_reproducible(self):
        p1 = init_params(tiny_config(), seed=42)
        p2 = init_params(tiny_config(), seed=42)
        for (n1, a1), (n2, a2) in zip(p1.tensors(), p2.tensors()):
            assert n1 == n2
            np.testing.assert_array_equal(a1, a2)

    def test_different_seeds_differ(self):
        p1 = init_params(tiny_config(), seed=1)
        p2 = init_params(tiny_config(), seed=2)
        assert any(not np.array_equal(a1, a2)
                   for (_, a1), (_, a2) in zip(p1.tensors(), p2.tensors()))

    def test_values_within_fan_in_bound(self):
        params = init_params(tiny_config(), seed=3)
        assert np.abs(params.layer1.W_r).max() <= 1.0 / np.sqrt(8 + 6)
        assert np.abs(params.out.W_out).max() <= 1.0 / np.sqrt(8)


class TestCheckpoint:
    def test_roundtrip_is_byte_exact(self, tmp_path):
        params = init_params(tiny_config(), seed=9)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(params, p1, seed=9)
        loaded, seed = load_checkpoint(p1)
        assert seed == 9
        save_checkpoint(loaded, p2, seed=seed)
        assert p1.read_bytes() == p2.read_bytes()
        assert loaded.config == params.config

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"ZZZZ" + b"\x00" * 16)
        with pytest.raises(FileFormatError, match="magic"):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        params = init_params(tiny_config(), seed=10)
        path = tmp_path / "t.ckpt"
        save_checkpoint(params, path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(FileFormatError, match="truncated"):
            load_checkpoint(path)
