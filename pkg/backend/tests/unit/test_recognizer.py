# backend/tests/unit/test_recognizer.py
# Unit tests for window forwarding, clip prediction and saliency

import numpy as np
import pytest
from autodiff import ShapeMismatchError, Tensor
from recognizer import ActivityRecognizer, Prediction, forward_windows

from tests.builders import random_windows

pytestmark = pytest.mark.unit


@pytest.fixture
def recognizer(tiny_model):
    return ActivityRecognizer(tiny_model, batch_size=2)


class TestForwardWindows:
    def test_rows_are_distributions(self, tiny_model, tiny_config, rng):
        windows = Tensor(random_windows(rng, 3, tiny_config))

        probs = forward_windows(tiny_model, windows).data

        assert probs.shape == (3, 2)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)

    def test_requires_batched_windows(self, tiny_model, tiny_config, rng):
        single = Tensor(random_windows(rng, 1, tiny_config)[0])
        with pytest.raises(ShapeMismatchError):
            forward_windows(tiny_model, single)

    def test_zero_model_is_uniform(self, zero_model, rng):
        windows = Tensor(rng.random((1, 16, 32, 32, 3)), dtype=np.float32)

        probs = forward_windows(zero_model, windows).data

        np.testing.assert_allclose(probs, 1.0 / 3.0, atol=1e-6)


class TestPrediction:
    def test_batch_size_does_not_change_results(self, tiny_model, tiny_config, rng):
        windows = random_windows(rng, 5, tiny_config)

        one_at_a_time = ActivityRecognizer(tiny_model, batch_size=1).predict_windows(windows)
        together = ActivityRecognizer(tiny_model, batch_size=8).predict_windows(windows)

        np.testing.assert_allclose(one_at_a_time, together, atol=1e-12)

    def test_clip_prediction_averages_windows(self, recognizer, tiny_config, rng):
        windows = random_windows(rng, 3, tiny_config)

        prediction = recognizer.predict_clip(windows)

        expected = recognizer.predict_windows(windows).mean(axis=0)
        np.testing.assert_allclose(prediction.probabilities, expected)
        assert prediction.window_count == 3
        assert prediction.label == ["class_a", "class_b"][int(np.argmax(expected))]
        assert prediction.confidence == pytest.approx(expected.max())

    def test_clip_without_windows(self, recognizer, tiny_config):
        with pytest.raises(ValueError):
            recognizer.predict_clip(np.zeros((0, 4, 16, 16, 3)))

    def test_ranked_orders_by_probability(self, recognizer):
        prediction = Prediction(
            probabilities=np.array([0.3, 0.7]), label="class_b", confidence=0.7, window_count=1
        )

        assert recognizer.ranked(prediction) == [("class_b", 0.7), ("class_a", 0.3)]
        assert recognizer.ranked(prediction, top=1) == [("class_b", 0.7)]


def test_saliency_pyramid(recognizer, rng):
    maps = recognizer.saliency(rng.random((16, 16, 3)))

    assert [m.shape[:2] for m in maps] == [(8, 8), (4, 4), (2, 2), (1, 1)]
    for m in maps:
        assert np.all((m > 0) & (m < 1))
