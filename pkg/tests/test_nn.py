import math

import numpy as np
import pytest

from poseattn import nn
from poseattn import tensor as T
from poseattn.gradcheck import grad_check_params
from poseattn.nn import (
    AdamState,
    GruParams,
    adam_step,
    cross_entropy,
    dropout,
    gru_cell_step,
    gru_init,
    gru_stack_init,
    linear_init,
    linear_zero,
    mlp_init,
)
from poseattn.tensor import NumericError, ShapeError, Tensor


def zero_gru(input_dim, hidden_dim):
    z = lambda *s: Tensor(np.zeros(s), requires_grad=True)
    return GruParams(
        W_z=z(hidden_dim, input_dim), W_r=z(hidden_dim, input_dim), W_c=z(hidden_dim, input_dim),
        U_z=z(hidden_dim, hidden_dim), U_r=z(hidden_dim, hidden_dim), U_c=z(hidden_dim, hidden_dim),
        b_z=z(hidden_dim), b_r=z(hidden_dim), b_c=z(hidden_dim),
    )


class TestMlp:
    def test_zero_params_softmax_is_uniform(self):
        mlp = nn.Mlp(layers=[linear_zero(8, 16), linear_zero(16, 4)], out_activation="softmax")
        out = mlp(Tensor(np.random.default_rng(0).normal(size=(3, 8))))
        assert np.array_equal(out.data, np.full((3, 4), 0.25))

    def test_reference_spatial_attention_dims(self):
        rng = np.random.default_rng(0)
        mlp = mlp_init(rng, [450, 256, 4], out_activation="softmax")
        out = mlp(Tensor(rng.normal(size=(5, 450))))
        assert out.shape == (5, 4)
        assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-9

    def test_reference_temporal_attention_dims(self):
        rng = np.random.default_rng(0)
        mlp = mlp_init(rng, [40, 32, 20], out_activation="softmax")
        out = mlp(Tensor(rng.normal(size=(5, 40))))
        assert out.shape == (5, 20)

    def test_shape_mismatch(self):
        mlp = mlp_init(np.random.default_rng(0), [8, 4, 2])
        with pytest.raises(ShapeError):
            mlp(Tensor(np.zeros((3, 9))))


class TestGru:
    def test_zero_params_halves_state(self):
        cell = zero_gru(4, 6)
        h = Tensor(np.random.default_rng(0).normal(size=(2, 6)))
        x = Tensor(np.random.default_rng(1).normal(size=(2, 4)))
        out = gru_cell_step(cell, h, x)
        assert np.allclose(out.data, 0.5 * h.data)

    def test_zero_state_is_fixed_point(self):
        cell = zero_gru(4, 6)
        h = Tensor(np.zeros((2, 6)))
        x = Tensor(np.random.default_rng(2).normal(size=(2, 4)))
        assert np.array_equal(gru_cell_step(cell, h, x).data, np.zeros((2, 6)))

    def test_contraction_at_zero_params(self):
        cell = zero_gru(3, 8)
        rng = np.random.default_rng(3)
        for _ in range(20):
            h = Tensor(rng.normal(size=(1, 8)))
            x = Tensor(rng.normal(size=(1, 3)))
            out = gru_cell_step(cell, h, x)
            assert np.linalg.norm(out.data) <= np.linalg.norm(h.data) + 1e-12

    def test_random_cell_gradcheck(self):
        rng = np.random.default_rng(4)
        cell = gru_init(rng, 8, 8)
        h = Tensor(rng.normal(size=(1, 8)))
        x = Tensor(rng.normal(size=(1, 8)))
        results = grad_check_params(
            lambda: T.sum_axis(gru_cell_step(cell, h, x)), cell.named("gru"), tol=1e-6
        )
        assert all(r.passed for r in results.values())

    def test_stack_reference_dims(self):
        rng = np.random.default_rng(5)
        stack = gru_stack_init(rng, 150, 150, 3)
        xs = [Tensor(rng.normal(size=(1, 150))) for _ in range(20)]
        states = stack.forward(xs)
        assert len(states) == 20
        assert all(s.shape == (1, 150) for s in states)

    def test_single_layer_stack_equals_cell_steps(self):
        rng = np.random.default_rng(6)
        stack = gru_stack_init(rng, 5, 7, 1)
        xs = [Tensor(rng.normal(size=(2, 5))) for _ in range(4)]
        states = stack.forward(xs)
        h = Tensor(np.zeros((2, 7)))
        for x, s in zip(xs, states):
            h = gru_cell_step(stack.cells[0], h, x)
            assert np.array_equal(h.data, s.data)

    def test_zero_input_zero_params_stays_zero(self):
        stack = nn.GruStack(cells=[zero_gru(4, 4), zero_gru(4, 4)])
        xs = [Tensor(np.zeros((1, 4))) for _ in range(5)]
        assert all(np.array_equal(s.data, np.zeros((1, 4))) for s in stack.forward(xs))

    def test_empty_sequence_rejected(self):
        stack = gru_stack_init(np.random.default_rng(0), 4, 4, 1)
        with pytest.raises(ShapeError, match="empty"):
            stack.forward([])


class TestCrossEntropy:
    def test_uniform_logits_gives_log_c(self):
        logits = Tensor(np.zeros((3, 60)))
        loss = cross_entropy(logits, np.array([0, 13, 59]))
        assert abs(loss.item() - math.log(60)) < 1e-12

    def test_confident_correct_goes_to_zero(self):
        losses = []
        for margin in (5.0, 20.0, 200.0):
            logits = np.zeros((1, 4))
            logits[0, 2] = margin
            losses.append(cross_entropy(Tensor(logits), np.array([2])).item())
        assert losses[0] > losses[1] > losses[2]
        assert losses[2] < 1e-12

    def test_batch_mean_of_rows(self):
        rng = np.random.default_rng(7)
        rows = rng.normal(size=(2, 5))
        y = np.array([1, 4])
        both = cross_entropy(Tensor(rows), y).item()
        a = cross_entropy(Tensor(rows[:1]), y[:1]).item()
        b = cross_entropy(Tensor(rows[1:]), y[1:]).item()
        assert abs(both - (a + b) / 2) < 1e-12

    def test_shift_invariance(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(4, 6))
        y = np.array([0, 1, 2, 3])
        base = cross_entropy(Tensor(logits), y).item()
        for c in (-100.0, 3.7, 250.0):
            shifted = cross_entropy(Tensor(logits + c), y).item()
            assert abs(base - shifted) < 1e-9

    def test_gradient_rows_sum_to_zero(self):
        rng = np.random.default_rng(9)
        logits = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        targets = logits.data.argmax(axis=1)
        with T.Tape() as tape:
            loss = cross_entropy(logits, targets)
        tape.backward(loss)
        assert np.abs(logits.grad.sum(axis=1)).max() < 1e-12

    def test_out_of_range_target(self):
        with pytest.raises(ValueError, match="class index"):
            cross_entropy(Tensor(np.zeros((1, 4))), np.array([4]))


class TestAdam:
    def test_first_step_is_signed_lr(self):
        p = {"w": Tensor(np.array([1.0, 1.0]), requires_grad=True)}
        state = AdamState(lr=0.1)
        adam_step(state, p, {"w": np.array([0.3, -7.0])})
        delta = p["w"].data - 1.0
        assert np.allclose(delta, [-0.1, 0.1], atol=1e-6)

    def test_zero_grad_zero_delta(self):
        p = {"w": Tensor(np.array([2.0]), requires_grad=True)}
        adam_step(AdamState(lr=0.1), p, {"w": np.zeros(1)})
        assert np.array_equal(p["w"].data, [2.0])

    def test_memoryless_moments_reduce_to_sign_sgd(self):
        p = {"w": Tensor(np.array([0.0]), requires_grad=True)}
        state = AdamState(lr=0.05, beta1=0.0, beta2=0.0)
        for _ in range(2):
            adam_step(state, p, {"w": np.array([4.0])})
        assert np.allclose(p["w"].data, [-0.1], atol=1e-7)

    def test_lr_zero_is_identity(self):
        p = {"w": Tensor(np.array([1.5]), requires_grad=True)}
        adam_step(AdamState(lr=0.0), p, {"w": np.array([123.0])})
        assert np.array_equal(p["w"].data, [1.5])

    def test_nan_grad_aborts(self):
        p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
        with pytest.raises(NumericError, match="w"):
            adam_step(AdamState(), p, {"w": np.array([np.nan])})

    def test_step_counter_increments_by_one(self):
        state = AdamState()
        p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
        for expected in (1, 2, 3):
            adam_step(state, p, {"w": np.array([1.0])})
            assert state.step == expected


class TestInit:
    def test_same_seed_bitwise_identical(self):
        a = linear_init(np.random.default_rng(42), 30, 20)
        b = linear_init(np.random.default_rng(42), 30, 20)
        assert np.array_equal(a.W.data, b.W.data)
        assert np.array_equal(a.b.data, b.b.data)

    def test_glorot_bounds(self):
        layer = linear_init(np.random.default_rng(0), 100, 50)
        bound = np.sqrt(6.0 / 150)
        assert np.abs(layer.W.data).max() <= bound
        assert np.array_equal(layer.b.data, np.zeros(50))

    def test_zero_output_head_gives_uniform_attention(self):
        rng = np.random.default_rng(1)
        four = mlp_init(rng, [12, 8, 4], out_activation="softmax", zero_output=True)
        p4 = four(Tensor(rng.normal(size=(6, 12)))).data
        assert np.array_equal(p4, np.full((6, 4), 0.25))
        twenty = mlp_init(rng, [40, 32, 20], out_activation="softmax", zero_output=True)
        p20 = twenty(Tensor(rng.normal(size=(6, 40)))).data
        assert np.array_equal(p20, np.full((6, 20), 1.0 / 20.0))


class TestDropout:
    def test_eval_is_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(4, 5)))
        out = dropout(x, 0.5, None, training=False)
        assert out is x

    def test_train_is_unbiased(self):
        rng = np.random.default_rng(11)
        x = Tensor(np.full((1, 8), 2.0))
        total = np.zeros((1, 8))
        n = 40_000
        for _ in range(n):
            total += dropout(x, 0.5, rng, training=True).data
        assert np.abs(total / n - 2.0).max() < 0.04  # within 2% of the input

    def test_train_needs_rng(self):
        with pytest.raises(ValueError, match="rng"):
            dropout(Tensor(np.ones(3)), 0.5, None, training=True)

    def test_mask_values_are_zero_or_scaled(self):
        rng = np.random.default_rng(12)
        out = dropout(Tensor(np.ones(1000)), 0.25, rng, training=True).data
        assert set(np.round(np.unique(out), 12)) <= {0.0, np.round(1 / 0.75, 12)}


def test_every_layer_gradcheck_small_instances():
    rng = np.random.default_rng(13)
    layer = linear_init(rng, 6, 4)
    mlp = mlp_init(rng, [6, 5, 3], out_activation="softmax")
    x = Tensor(rng.normal(size=(2, 6)))
    w = Tensor(rng.normal(size=(2, 3)))

    def f():
        a = T.sum_axis(T.multiply(layer(x), Tensor(np.ones((2, 4)))))
        b = T.sum_axis(T.multiply(mlp(x), w))
        return T.add(a, b)

    params = {"lin.W": layer.W, "lin.b": layer.b}
    for i, l in enumerate(mlp.layers):
        params[f"mlp.l{i}.W"] = l.W
        params[f"mlp.l{i}.b"] = l.b
    results = grad_check_params(f, params, tol=1e-5)
    assert all(r.passed for r in results.values())
