import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import max_param_error, random_triple, small_manifest
from nere.errors import EmbeddingIndexError, PreconditionError, ShapeError, StateError
from nere.neuralcore import checkpoint
from nere.neuralcore.gradcheck import numerical_grad, relative_error
from nere.neuralcore.layers import (
    AttentionWithContext,
    BatchNorm,
    Bidirectional,
    Dense,
    Dropout,
    Embedding,
    GRUCell,
    attention_forward,
    bidirectional_forward,
    gru_step,
    sigmoid,
)
from nere.neuralcore.losses import add_l2, l2_grad, mse_grad, mse_loss
from nere.neuralcore.optim import AdamState, adam_step
from nere.recsys.model import ModelConfig, build_model, model_inputs

TOL = 1e-6


def _scalar_loss(out, R):
    return float(np.sum(out * R))


class TestEmbedding:
    def test_gathers_columns(self):
        layer = Embedding(4, dim=32)
        layer.params["W"] = np.eye(32, 5)
        out = layer.forward(np.array([3, 0]))
        np.testing.assert_array_equal(out[0], np.eye(32, 5)[:, 3])
        np.testing.assert_array_equal(out[1], np.eye(32, 5)[:, 0])

    def test_column_count(self):
        assert Embedding(7, dim=32).params["W"].shape == (32, 8)

    def test_repeated_index_sums_upstream(self):
        rng = np.random.default_rng(1)
        layer = Embedding(3, dim=4, rng=rng)
        idx = np.array([2, 1, 2])
        R = rng.normal(size=(3, 4))
        layer.zero_grad()
        layer.forward(idx)
        layer.backward(R)
        np.testing.assert_allclose(layer.grads["W"][:, 2], R[0] + R[2], atol=1e-15)
        np.testing.assert_array_equal(layer.grads["W"][:, 0], 0.0)

        def f():
            return _scalar_loss(layer.forward(idx), R)

        num = numerical_grad(f, layer.params["W"])
        assert relative_error(layer.grads["W"], num) <= TOL

    @pytest.mark.parametrize("bad", [-1, 4])
    def test_out_of_range(self, bad):
        layer = Embedding(3, name="platform")
        with pytest.raises(EmbeddingIndexError, match="platform") as exc:
            layer.forward(np.array([0, bad]))
        assert str(bad) in str(exc.value)


class TestGRU:
    def test_zero_weights_halve_state(self):
        cell = GRUCell(3, 2)
        for p in cell.params.values():
            p[...] = 0.0
        h = np.array([0.4, -1.2])
        np.testing.assert_allclose(gru_step(np.ones(3), h, cell), 0.5 * h, atol=1e-15)

    def test_hand_computed_step(self):
        # H=2, D=1; evaluate the four gate equations by hand
        cell = GRUCell(1, 2)
        Wz, Wr, Wh = np.array([0.5, -0.3]), np.array([0.2, 0.1]), np.array([-0.4, 0.7])
        Uz = np.array([[0.1, 0.0], [0.2, -0.1]])
        Ur = np.array([[0.3, 0.1], [0.0, 0.2]])
        Uh = np.array([[-0.2, 0.4], [0.5, 0.1]])
        bz, br, bh = np.array([0.0, 0.1]), np.array([-0.1, 0.0]), np.array([0.05, -0.05])
        cell.params["W"] = np.concatenate([Wz, Wr, Wh])[None, :]
        cell.params["U"] = np.concatenate([Uz, Ur, Uh], axis=1)
        cell.params["b"] = np.concatenate([bz, br, bh])
        x, h = np.array([0.8]), np.array([0.3, -0.6])

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))

        z = sig(Wz * x[0] + h @ Uz + bz)
        r = sig(Wr * x[0] + h @ Ur + br)
        hh = np.tanh(Wh * x[0] + (r * h) @ Uh + bh)
        expected = (1 - z) * h + z * hh
        np.testing.assert_allclose(gru_step(x, h, cell), expected, atol=1e-12)

    def test_shape_error_names_shapes(self):
        cell = GRUCell(3, 2)
        with pytest.raises(ShapeError, match=r"\(1, 4\)"):
            gru_step(np.ones((1, 4)), np.zeros((1, 2)), cell)

    def test_step_gradient(self):
        rng = np.random.default_rng(2)
        cell = GRUCell(3, 4, rng=rng)
        cell.params["b"] = rng.normal(size=12)
        from nere.neuralcore.layers import GRU

        gru = GRU(cell)
        X = rng.normal(size=(2, 1, 3))
        R = rng.normal(size=(2, 1, 4))
        gru.zero_grad()
        gru.forward(X)
        gru.backward(R)
        assert max_param_error(gru, lambda: _scalar_loss(gru.forward(X), R)) <= TOL


class TestBidirectional:
    def test_single_step(self):
        rng = np.random.default_rng(3)
        f, b = GRUCell(2, 3, rng=rng), GRUCell(2, 3, rng=rng)
        x = rng.normal(size=(1, 2))
        out = bidirectional_forward(x, f, b)
        h0 = np.zeros(3)
        np.testing.assert_allclose(out[0], np.concatenate([gru_step(x[0], h0, f), gru_step(x[0], h0, b)]))

    def test_palindrome_symmetry(self):
        rng = np.random.default_rng(4)
        cell = GRUCell(2, 3, rng=rng)
        a, b = rng.normal(size=2), rng.normal(size=2)
        seq = np.stack([a, b, a])
        out = bidirectional_forward(seq, cell, cell)
        swapped = np.concatenate([out[::-1, 3:], out[::-1, :3]], axis=1)
        np.testing.assert_allclose(out, swapped, atol=1e-14)

    @pytest.mark.parametrize("H", [1, 5, 16])
    def test_width(self, H):
        out = bidirectional_forward(np.ones((4, 2)), GRUCell(2, H), GRUCell(2, H))
        assert out.shape == (4, 2 * H)

    def test_empty_sequence(self):
        with pytest.raises(PreconditionError):
            bidirectional_forward(np.zeros((0, 2)), GRUCell(2, 3), GRUCell(2, 3))

    def test_gradient(self):
        rng = np.random.default_rng(5)
        layer = Bidirectional(GRUCell(3, 2, rng=rng), GRUCell(3, 2, rng=rng))
        X = rng.normal(size=(2, 4, 3))
        R = rng.normal(size=(2, 4, 4))
        layer.zero_grad()
        layer.forward(X)
        layer.backward(R)

        def f():
            return _scalar_loss(layer.forward(X), R)

        for sub in (layer.fwd, layer.bwd):
            assert max_param_error(sub, f) <= 1e-4


class TestAttention:
    def test_uniform_on_equal_scores(self):
        layer = AttentionWithContext(4)
        layer.params["u"][...] = 0.0
        _, alpha = attention_forward(np.random.default_rng(0).normal(size=(3, 4)), layer)
        np.testing.assert_allclose(alpha, 0.25, atol=1e-15)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(6)
        layer = AttentionWithContext(6, rng=rng)
        x = rng.normal(size=(5, 6)) * 10
        out, alpha = attention_forward(x, layer)
        np.testing.assert_allclose(alpha.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(alpha > 0)
        np.testing.assert_array_equal(out, alpha * x)

    def test_exposes_alpha(self):
        layer = AttentionWithContext(3)
        _, alpha = attention_forward(np.ones((2, 3)), layer)
        np.testing.assert_array_equal(layer.alpha[0], alpha)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            attention_forward(np.ones((2, 5)), AttentionWithContext(3))

    def test_gradient_2x3(self):
        rng = np.random.default_rng(7)
        layer = AttentionWithContext(3, rng=rng)
        layer.params["b"] = rng.normal(size=3)
        X = rng.normal(size=(1, 2, 3))
        R = rng.normal(size=(1, 2, 3))
        layer.zero_grad()
        layer.forward(X)
        layer.backward(R)
        assert max_param_error(layer, lambda: _scalar_loss(layer.forward(X)[0], R)) <= TOL

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 8), st.integers(0, 2**31 - 1), st.floats(0.1, 50.0))
    def test_property_valid_distribution(self, T, F, seed, scale):
        rng = np.random.default_rng(seed)
        layer = AttentionWithContext(F, rng=rng)
        _, alpha = attention_forward(rng.normal(size=(T, F)) * scale, layer)
        assert np.all(alpha >= 0)
        np.testing.assert_allclose(alpha.sum(axis=-1), 1.0, atol=1e-12)


class TestDenseBatchNormDropout:
    def test_dense_identity(self):
        layer = Dense(4, 4, "linear")
        layer.params["W"] = np.eye(4)
        x = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(layer.forward(x), x)

    @pytest.mark.parametrize("act", ["linear", "relu", "tanh"])
    def test_dense_gradient(self, act):
        rng = np.random.default_rng(8)
        layer = Dense(3, 2, act, rng=rng)
        layer.params["b"] = rng.normal(size=2)
        X = rng.normal(size=(4, 3))
        R = rng.normal(size=(4, 2))
        layer.zero_grad()
        layer.forward(X)
        layer.backward(R)
        assert max_param_error(layer, lambda: _scalar_loss(layer.forward(X), R)) <= TOL

    def test_batchnorm_train_moments(self):
        bn = BatchNorm(5)
        x = np.random.default_rng(9).normal(3.0, 2.0, size=(64, 5))
        y = bn.forward(x, train=True)
        np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(y.var(axis=0), 1.0, atol=1e-6)

    def test_batchnorm_running_moments(self):
        bn = BatchNorm(2, momentum=0.99)
        x = np.array([[1.0, 2.0], [3.0, 6.0]])
        bn.forward(x, train=True)
        np.testing.assert_allclose(bn.running_mean, 0.01 * np.array([2.0, 4.0]))
        np.testing.assert_allclose(bn.running_var, 0.99 + 0.01 * np.array([1.0, 4.0]))

    def test_batchnorm_infer_uses_running(self):
        bn = BatchNorm(2)
        bn.running_mean = np.array([1.0, -1.0])
        bn.running_var = np.array([4.0, 1.0])
        y = bn.forward(np.array([[3.0, 0.0]]), train=False)
        np.testing.assert_allclose(y, [[2.0 / np.sqrt(4.0 + bn.eps), 1.0 / np.sqrt(1.0 + bn.eps)]])

    def test_batchnorm_batch_of_one(self):
        with pytest.raises(PreconditionError):
            BatchNorm(3).forward(np.ones((1, 3)), train=True)

    @pytest.mark.parametrize("train", [True, False])
    def test_batchnorm_gradient(self, train):
        rng = np.random.default_rng(10)
        bn = BatchNorm(3)
        bn.params["gamma"] = rng.normal(size=3)
        bn.params["beta"] = rng.normal(size=3)
        bn.running_mean, bn.running_var = rng.normal(size=3), rng.random(3) + 0.5
        X = rng.normal(size=(2, 4, 3))
        R = rng.normal(size=(2, 4, 3))
        mean, var = bn.running_mean.copy(), bn.running_var.copy()

        def f():
            bn.running_mean, bn.running_var = mean.copy(), var.copy()
            return _scalar_loss(bn.forward(X, train=train), R)

        bn.zero_grad()
        f()
        bn.backward(R)
        assert max_param_error(bn, f) <= TOL

    def test_dropout_infer_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(Dropout(0.5).forward(x, train=False), x)

    def test_dropout_train_mask_and_scale(self):
        x = np.ones((200, 50))
        y = Dropout(0.5).forward(x, train=True, rng=np.random.default_rng(0))
        assert set(np.unique(y)) <= {0.0, 2.0}
        assert 0.45 < np.mean(y == 0.0) < 0.55

    def test_dropout_expectation(self):
        # mean of 10,000 train-mode draws matches the infer-mode output within 3 SE per element
        rng = np.random.default_rng(11)
        x = rng.normal(size=(4, 3))
        layer = Dropout(0.5)
        draws = np.stack([layer.forward(x, train=True, rng=rng) for _ in range(10000)])
        se = draws.std(axis=0) / np.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - layer.forward(x)) <= 3 * se + 1e-12)

    def test_backward_before_forward(self):
        for layer in (Dense(2, 2), BatchNorm(2), Dropout(0.5), AttentionWithContext(2), Embedding(2)):
            with pytest.raises(StateError):
                layer.backward(np.ones((1, 2)))


class TestLosses:
    def test_mse_zero(self):
        x = np.random.default_rng(0).normal(size=(3, 128))
        assert mse_loss(x, x) == 0.0

    def test_mse_ones(self):
        assert mse_loss(np.ones(128), np.zeros(128)) == 1.0

    def test_mse_shape_error(self):
        with pytest.raises(ShapeError):
            mse_loss(np.ones(3), np.ones(4))

    def test_l2_penalty(self):
        w = np.zeros((2, 2))
        w[0, 1] = 2.0
        assert add_l2(0.0, [w], 0.001) == pytest.approx(0.004, abs=1e-15)

    def test_mse_grad_matches_fd(self):
        rng = np.random.default_rng(12)
        p, t = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
        num = numerical_grad(lambda: mse_loss(p, t), p)
        assert relative_error(mse_grad(p, t), num) <= TOL

    def test_square_gradient(self):
        assert l2_grad(np.array([3.0]), lam=1.0)[0] == 6.0


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = {"w": np.array([1.0, -2.0])}
        before = p["w"].copy()
        adam_step(p, {"w": np.zeros(2)}, AdamState())
        np.testing.assert_array_equal(p["w"], before)

    def test_first_step_size_is_lr(self):
        # bias correction makes the first step lr * sign(g)
        p = {"w": np.array([1.0, 1.0])}
        adam_step(p, {"w": np.array([0.3, -5.0])}, AdamState(lr=0.01))
        np.testing.assert_allclose(p["w"], [0.99, 1.01], atol=1e-9)

    def test_minimizes_quadratic(self):
        p = {"w": np.array([3.0])}
        state = AdamState(lr=0.1)
        for _ in range(500):
            adam_step(p, {"w": 2.0 * p["w"]}, state)
        assert abs(p["w"][0]) < 1e-2
        assert state.step == 500


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(13)
        arrays = {"a.W": rng.normal(size=(3, 4)), "b": rng.normal(size=5) * 1e300, "c": np.array([np.pi])}
        checkpoint.save(tmp_path / "x.ckpt", arrays, {"k": 1})
        back, cfg = checkpoint.load(tmp_path / "x.ckpt")
        assert cfg == {"k": 1}
        assert list(back) == list(arrays)
        for k in arrays:
            assert back[k].tobytes() == arrays[k].tobytes()


class TestComposedModel:
    def test_model_gradient(self):
        # batch 4, T=5 (4 input steps), reduced dims; dropout masks fixed by reseeding
        cfg = ModelConfig(embed_dim=3, hidden=3, dense=5, content_dim=4, input_len=4)
        model = build_model(small_manifest(2), "both", cfg, seed=1)
        for layer in (model.dense1, model.dense2):
            layer.params["b"] = np.random.default_rng(2).normal(size=layer.params["b"].shape) * 0.1
        triple = random_triple(4, T=5, dim=4, card=2, seed=3)
        batch = model_inputs(model, triple)

        def f():
            loss, _ = model.loss_and_backward(batch, triple.target, rng=np.random.default_rng(0))
            return loss

        model.zero_grad()
        f()
        grads = {k: v.copy() for k, v in model.gradients().items()}
        params = model.parameters()
        worst = 0.0
        for name, p in params.items():
            num = numerical_grad(f, p)
            worst = max(worst, relative_error(grads[name], num))
        assert worst <= 1e-4

    def test_sigmoid_stable(self):
        out = sigmoid(np.array([-800.0, 0.0, 800.0]))
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])
