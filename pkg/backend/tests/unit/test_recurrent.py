# backend/tests/unit/test_recurrent.py
# Unit tests for the GRU cell, the bidirectional stack and the classifier

import math

import numpy as np
import pytest
from autodiff import ShapeMismatchError, Tape, Tensor, backward
from models import RecurrentConfig
from recurrent import (
    GruCellParams,
    SequenceLengthError,
    bigru_layer,
    build_stack,
    classify,
    gru_step,
    parameter_count,
    stack_forward,
)
from training import cross_entropy

from tests import oracles
from tests.gradcheck import check_array_gradient

pytestmark = pytest.mark.unit


def scalar_cell(**values) -> GruCellParams:
    """1-in, 1-hidden cell from plain numbers"""
    return GruCellParams(
        **{name: Tensor.parameter([[value]]) for name, value in values.items()}
    )


def sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


class TestGruStep:
    def test_closed_update_gate_keeps_previous_state(self):
        # Pre-activation of mu is -30, so mu ~ 1e-13
        cell = scalar_cell(w_r=0.3, u_r=0.2, w_mu=-30.0, u_mu=0.0, w=2.0, u=1.5)
        h_prev = Tensor([[0.42]])

        trace = gru_step(Tensor([[1.0]]), h_prev, cell)

        assert abs(trace.h_t.item() - 0.42) < 1e-6

    def test_matches_scalar_hand_trace(self):
        params = dict(w_r=0.5, u_r=-0.4, w_mu=0.8, u_mu=0.3, w=-1.2, u=0.7)
        cell = scalar_cell(**params)
        xs = [0.9, -0.3, 0.5]

        h_expected = 0.0
        h = Tensor([[0.0]])
        for x in xs:
            r = sigmoid(params["w_r"] * x + params["u_r"] * h_expected)
            mu = sigmoid(params["w_mu"] * x + params["u_mu"] * h_expected)
            candidate = math.tanh(params["w"] * x + r * params["u"] * h_expected)
            h_expected = (1 - mu) * h_expected + mu * candidate

            h = gru_step(Tensor([[x]]), h, cell).h_t

        assert abs(h.item() - h_expected) < 1e-10

    def test_gates_in_unit_interval(self, rng):
        cell = GruCellParams.create(5, 4, rng, dtype=np.float64)
        trace = gru_step(Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(3, 4))), cell)

        for gate in (trace.r_t, trace.mu_t):
            assert np.all((gate.data > 0) & (gate.data < 1))
        assert np.all(np.abs(trace.h_tilde_t.data) < 1)

    def test_width_mismatch(self, rng):
        cell = GruCellParams.create(5, 4, rng)
        with pytest.raises(ShapeMismatchError):
            gru_step(Tensor(np.zeros((1, 6))), Tensor(np.zeros((1, 4))), cell)


class TestBidirectional:
    def test_swapping_cells_and_reversing_input_mirrors_output(self, rng):
        fwd = GruCellParams.create(3, 2, rng, dtype=np.float64)
        bwd = GruCellParams.create(3, 2, rng, dtype=np.float64)
        sequence = [Tensor(rng.normal(size=3)) for _ in range(6)]

        outputs = bigru_layer(sequence, fwd, bwd)
        mirrored = bigru_layer(sequence[::-1], bwd, fwd)

        n = len(sequence)
        for t in range(n):
            expected = np.concatenate([mirrored[n - 1 - t].data[2:], mirrored[n - 1 - t].data[:2]])
            np.testing.assert_array_equal(outputs[t].data, expected)

    def test_backward_direction_reads_sequence_reversed(self, rng):
        fwd = GruCellParams.create(3, 2, rng, dtype=np.float64)
        bwd = GruCellParams.create(3, 2, rng, dtype=np.float64)
        sequence = [Tensor(rng.normal(size=3)) for _ in range(4)]

        outputs = bigru_layer(sequence, fwd, bwd)

        # The backward state at the last position has seen only that step
        only_last = gru_step(sequence[-1], Tensor(np.zeros(2)), bwd).h_t
        np.testing.assert_array_equal(outputs[-1].data[2:], only_last.data)

    def test_empty_sequence_rejected(self, rng):
        cell = GruCellParams.create(3, 2, rng)
        with pytest.raises(ValueError):
            bigru_layer([], cell, cell)


class TestStack:
    def test_representation_width(self, rng):
        params = build_stack(RecurrentConfig(num_classes=4), seed=0, dtype=np.float64)
        features = Tensor(rng.normal(size=(16, 64)))

        representation = stack_forward(features, params)

        assert representation.shape == (64,)

    def test_batched_rows_are_independent(self, rng):
        config = RecurrentConfig(input_size=5, hidden_size=3, sequence_length=4)
        params = build_stack(config, seed=0, dtype=np.float64)
        batch = rng.normal(size=(3, 4, 5))

        together = stack_forward(Tensor(batch), params).data

        for b in range(3):
            alone = stack_forward(Tensor(batch[b]), params).data
            np.testing.assert_allclose(together[b], alone, atol=1e-12)

    def test_unidirectional_uses_last_forward_state(self, rng):
        config = RecurrentConfig(
            input_size=5, hidden_size=3, sequence_length=4, bidirectional=False
        )
        params = build_stack(config, seed=0, dtype=np.float64)

        representation = stack_forward(Tensor(rng.normal(size=(4, 5))), params)

        assert representation.shape == (3,)
        assert params.classifier_weights.shape == (3, 2)

    def test_wrong_sequence_length(self, rng):
        params = build_stack(RecurrentConfig(), seed=0)
        with pytest.raises(SequenceLengthError):
            stack_forward(Tensor(rng.normal(size=(15, 64))), params)

    def test_parameter_count(self):
        params = build_stack(RecurrentConfig(num_classes=5), seed=0)
        per_direction = 3 * (64 * 32 + 32 * 32)
        assert parameter_count(params) == 3 * 2 * per_direction + 64 * 5

    def test_parameter_names(self):
        params = build_stack(RecurrentConfig(num_layers=1, use_bias=True), seed=0)
        names = [name for name, _ in params.named_parameters()]
        assert names[:3] == ["gru1.forward.w_r", "gru1.forward.u_r", "gru1.forward.b_r"]
        assert names[-1] == "classifier.w_o"


class TestClassifier:
    def test_probabilities_sum_to_one(self, rng):
        probs = classify(Tensor(rng.normal(size=8)), Tensor(rng.normal(size=(8, 3))), 3)

        assert probs.shape == (3,)
        assert probs.data.sum() == pytest.approx(1.0)
        assert np.all(probs.data > 0)

    def test_single_class_rejected(self, rng):
        with pytest.raises(ValueError):
            classify(Tensor(rng.normal(size=8)), Tensor(rng.normal(size=(8, 1))), 1)

    def test_weight_shape_must_match_classes(self, rng):
        with pytest.raises(ShapeMismatchError):
            classify(Tensor(rng.normal(size=8)), Tensor(rng.normal(size=(8, 3))), 4)


class TestBackpropagationThroughTime:
    def test_sixteen_step_gradients(self, rng):
        config = RecurrentConfig(
            input_size=6, hidden_size=4, num_layers=3, sequence_length=16, num_classes=3
        )
        params = build_stack(config, seed=3, dtype=np.float64)
        features = Tensor.parameter(rng.normal(size=(2, 16, 6)))
        labels = np.array([2, 0])

        def loss_tensor():
            representation = stack_forward(features, params)
            probs = classify(representation, params.classifier_weights, 3)
            return cross_entropy(probs, labels)

        with Tape() as tape:
            loss = loss_tensor()
        backward(tape, loss)

        def loss_value():
            return loss_tensor().item()

        check_array_gradient(loss_value, features.data, features.grad, rng)
        for _, tensor in params.named_parameters():
            check_array_gradient(loss_value, tensor.data, tensor.grad, rng, samples=2)


class TestReferenceUnroll:
    """Layers and stack against a plain NumPy step-by-step unroll"""

    def test_single_step_with_shared_cell_is_symmetric(self, rng):
        cell = GruCellParams.create(3, 2, rng, dtype=np.float64)

        (output,) = bigru_layer([Tensor(rng.normal(size=3))], cell, cell)

        np.testing.assert_array_equal(output.data[:2], output.data[2:])

    def test_layer_matches_unroll(self, rng):
        fwd = GruCellParams.create(3, 2, rng, dtype=np.float64)
        bwd = GruCellParams.create(3, 2, rng, dtype=np.float64)
        xs = [rng.normal(size=3) for _ in range(4)]

        outputs = bigru_layer([Tensor(x) for x in xs], fwd, bwd)

        for actual, expected in zip(outputs, oracles.bigru_outputs(xs, fwd, bwd)):
            np.testing.assert_allclose(actual.data, expected, atol=1e-8)

    def test_three_layer_stack_matches_unroll(self, rng):
        params = build_stack(RecurrentConfig(num_classes=3), seed=9, dtype=np.float64)
        features = rng.normal(size=(16, 64))

        representation = stack_forward(Tensor(features), params)

        expected = oracles.stack_representation(list(features), params)
        np.testing.assert_allclose(representation.data, expected, atol=1e-7)

    def test_zero_features_and_weights_give_zero_representation(self):
        params = build_stack(RecurrentConfig(), seed=0, dtype=np.float64, init="zeros")

        representation = stack_forward(Tensor(np.zeros((16, 64))), params)

        np.testing.assert_array_equal(representation.data, np.zeros(64))


class TestClassifierProperties:
    @pytest.mark.parametrize("num_classes", [2, 3, 7])
    def test_zero_weights_are_uniform(self, num_classes, rng):
        probs = classify(
            Tensor(rng.normal(size=64)), Tensor(np.zeros((64, num_classes))), num_classes
        )
        np.testing.assert_allclose(probs.data, 1.0 / num_classes, atol=1e-12)

    def test_argmax_follows_logits(self, rng):
        for _ in range(20):
            representation = Tensor(rng.normal(size=64))
            w_o = Tensor(rng.normal(size=(64, 5)))

            probs = classify(representation, w_o, 5)

            logits = representation.data @ w_o.data
            assert np.argmax(probs.data) == np.argmax(logits)
            assert probs.data.sum() == pytest.approx(1.0, abs=1e-6)
