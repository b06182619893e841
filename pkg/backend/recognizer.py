from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from autodiff import ShapeMismatchError, Tensor, activation, reshape
from backbone import extract_features, saliency_maps
from config import debug_print
from model_store import ModelBundle
from recurrent import class_logits, stack_forward


@dataclass
class Prediction:
    """Recognition result for one clip"""

    probabilities: np.ndarray  # One entry per class, sums to 1
    label: str
    confidence: float
    window_count: int


def forward_windows(bundle: ModelBundle, windows: Tensor) -> Tensor:
    """
    Class probabilities for a batch of frame windows.

    `windows` is B x T x H x W x 3 (values in [0, 1]); all B*T frames go
    through the backbone in one batch before the sequential recurrent pass.
    Returns B x K probabilities.
    """
    if windows.ndim != 5:
        raise ShapeMismatchError(f"windows must be B x T x H x W x C, got {windows.shape}")
    batch, steps = windows.shape[:2]
    frames = reshape(windows, (batch * steps,) + windows.shape[2:])
    features, _ = extract_features(frames, bundle.backbone)
    sequence = reshape(features, (batch, steps, bundle.config.backbone.feature_size))
    representation = stack_forward(sequence, bundle.stack)
    return activation(class_logits(representation, bundle.stack.classifier_weights), "softmax")


class ActivityRecognizer:
    """Runs a trained model over clips: prediction and saliency export"""

    def __init__(self, bundle: ModelBundle, batch_size: int = 4):
        self.bundle = bundle
        self.batch_size = batch_size

    def _as_input(self, array: np.ndarray) -> Tensor:
        return Tensor(array, dtype=self.bundle.dtype)

    def predict_windows(self, windows: np.ndarray) -> np.ndarray:
        """W x K probabilities for W preprocessed windows"""
        rows = []
        for start in range(0, len(windows), self.batch_size):
            chunk = self._as_input(windows[start : start + self.batch_size])
            rows.append(forward_windows(self.bundle, chunk).data)
        return np.concatenate(rows, axis=0)

    def predict_clip(self, windows: np.ndarray) -> Prediction:
        """
        Whole-clip prediction: the mean of the per-window probabilities.

        Args:
            windows: W x T x H x W x 3 preprocessed windows of one clip

        Returns:
            Prediction with the averaged distribution and its argmax label
        """
        if len(windows) == 0:
            raise ValueError("clip produced no windows")
        per_window = self.predict_windows(windows)
        probabilities = per_window.mean(axis=0)
        best = int(np.argmax(probabilities))
        debug_print(
            f"[CLI] {len(windows)} window(s), top class {self.bundle.labels[best]}"
        )
        return Prediction(
            probabilities=probabilities,
            label=self.bundle.labels[best],
            confidence=float(probabilities[best]),
            window_count=len(windows),
        )

    def saliency(self, frame: np.ndarray) -> List[np.ndarray]:
        """The four spatial attention maps of one preprocessed frame"""
        return saliency_maps(self._as_input(frame), self.bundle.backbone)

    def ranked(self, prediction: Prediction, top: Optional[int] = None) -> List[Tuple[str, float]]:
        """(label, probability) pairs, most likely first"""
        order = np.argsort(-prediction.probabilities, kind="stable")
        if top is not None:
            order = order[:top]
        return [(self.bundle.labels[i], float(prediction.probabilities[i])) for i in order]
