import csv
import io
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from autodiff import Tape, Tensor, backward, negative_log_likelihood
from clip_io import atomic_write_bytes
from config import debug_print
from dataset import WindowDataset
from model_store import STORED_DTYPE, ModelBundle, save_model
from models import TrainConfig, TrainRecord
from recognizer import forward_windows
from recurrent import SequenceLengthError
from tqdm import tqdm

HISTORY_COLUMNS = ("epoch", "train_loss", "train_acc", "val_acc")


class LabelError(ValueError):
    """Raised for class indices outside the model's class set"""


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    bad = labels[(labels < 0) | (labels >= num_classes)]
    if bad.size:
        raise LabelError(f"label {int(bad[0])} outside 0..{num_classes - 1}")
    return labels


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """
    Categorical cross-entropy, averaged over rows.

    `probs` is one distribution (K) or a batch (B x K); each row's loss is
    -log(max(p[label], 1e-12)).
    """
    labels = _check_labels(labels, probs.shape[-1])
    return negative_log_likelihood(probs, labels)


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name"""

    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, Optional[np.ndarray]],
    state: AdamState,
    config: TrainConfig,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam update with a constant learning rate.

    A parameter with no gradient (None or absent) is treated as having a
    zero gradient. Returns new parameter arrays (same dtypes) and a new state.
    """
    beta1, beta2 = config.adam_beta1, config.adam_beta2
    step = state.step + 1
    first, second, updated = {}, {}, {}
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(value, dtype=np.float64)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != value.shape:
            raise ValueError(
                f"gradient for {name} has shape {grad.shape}, expected {value.shape}"
            )
        m = state.first_moment.get(name, np.zeros(value.shape))
        v = state.second_moment.get(name, np.zeros(value.shape))
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        delta = config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_epsilon)
        updated[name] = (value.astype(np.float64) - delta).astype(value.dtype)
        first[name] = m
        second[name] = v
    return updated, AdamState(first_moment=first, second_moment=second, step=step)


@dataclass
class TrainHistory:
    """One record per completed epoch"""

    records: List[TrainRecord] = field(default_factory=list)

    def append(self, record: TrainRecord) -> None:
        self.records.append(record)

    @property
    def losses(self) -> List[float]:
        return [r.train_loss for r in self.records]

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for record in self.records:
            writer.writerow(
                [record.epoch, record.train_loss, record.train_acc, record.val_acc]
            )
        return buffer.getvalue()

    def save(self, path: str) -> None:
        atomic_write_bytes(path, self.to_csv().encode("utf-8"))
        debug_print(f"[TRAIN] History with {len(self.records)} epochs -> {path}")


@dataclass
class EvaluationReport:
    """Accuracy and confusion counts (rows = true class, columns = predicted)"""

    accuracy: float
    confusion: np.ndarray
    total: int

    @property
    def per_class_accuracy(self) -> np.ndarray:
        counts = self.confusion.sum(axis=1)
        hits = np.diag(self.confusion).astype(np.float64)
        return np.divide(hits, counts, out=np.zeros_like(hits), where=counts > 0)

    def to_text(self, labels: Sequence[str]) -> str:
        width = max(len(label) for label in labels)
        lines = [f"accuracy: {self.accuracy:.4f} ({self.total} windows)"]
        header = " " * (width + 2) + " ".join(f"{i:>5}" for i in range(len(labels)))
        lines.append(header)
        for i, label in enumerate(labels):
            row = " ".join(f"{n:>5}" for n in self.confusion[i])
            lines.append(
                f"{label:<{width}}  {row}   recall {self.per_class_accuracy[i]:.3f}"
            )
        return "\n".join(lines)


def _predict(bundle: ModelBundle, windows: np.ndarray, batch_size: int) -> np.ndarray:
    predictions = []
    for start in range(0, len(windows), batch_size):
        chunk = Tensor(windows[start : start + batch_size], dtype=bundle.dtype)
        predictions.append(np.argmax(forward_windows(bundle, chunk).data, axis=-1))
    return np.concatenate(predictions)


def evaluate(
    bundle: ModelBundle, dataset: WindowDataset, batch_size: int = 16
) -> EvaluationReport:
    """Argmax accuracy and confusion matrix over every window of `dataset`"""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    num_classes = bundle.config.recurrent.num_classes
    labels = _check_labels(dataset.labels, num_classes)
    _check_windows(bundle, dataset)
    predicted = _predict(bundle, dataset.windows, batch_size)

    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predicted), 1)
    accuracy = float(np.trace(confusion)) / len(labels)
    return EvaluationReport(accuracy=accuracy, confusion=confusion, total=len(labels))


def _check_windows(bundle: ModelBundle, dataset: WindowDataset) -> None:
    expected = bundle.config.recurrent.sequence_length
    if dataset.windows.ndim != 5 or dataset.windows.shape[1] != expected:
        raise SequenceLengthError(
            f"windows must hold {expected} frames each, got shape {dataset.windows.shape}"
        )


def train(
    model: ModelBundle,
    train_set: WindowDataset,
    val_set: WindowDataset,
    config: TrainConfig,
    checkpoint_path: Optional[str] = None,
    quiet: bool = False,
) -> Tuple[ModelBundle, TrainHistory]:
    """
    Fit `model` with Adam on mini-batches of windows.

    Each epoch visits the training windows in a seeded random order; the
    last partial batch is kept and the batch loss is the mean over its
    rows. After every epoch the model is scored on `val_set`; the best
    scoring weights (strictly better than any earlier epoch) are kept and,
    when `checkpoint_path` is given, saved there.

    Validation is scored on the weights as they would be stored, so with
    `dtype="float64"` each epoch is evaluated on a float32 cast and a
    reloaded checkpoint reproduces the recorded val_acc. The returned model
    keeps the training dtype.

    Returns:
        (best-validation model, per-epoch history)
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must not be empty")
    if config.sequence_length != model.config.recurrent.sequence_length:
        raise SequenceLengthError(
            f"train config uses {config.sequence_length}-frame windows, "
            f"model expects {model.config.recurrent.sequence_length}"
        )
    num_classes = model.config.recurrent.num_classes
    train_labels = _check_labels(train_set.labels, num_classes)
    _check_labels(val_set.labels, num_classes)
    _check_windows(model, train_set)
    _check_windows(model, val_set)

    dtype = np.dtype(config.dtype)
    model = model.astype(dtype)
    named = model.named_parameters()
    state = AdamState()
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    best_model, best_val = model.copy(), -1.0
    count = len(train_set)

    show_bar = not quiet and sys.stdout.isatty()
    progress = tqdm(range(1, config.epochs + 1), desc="train", disable=not show_bar)
    for epoch in progress:
        order = rng.permutation(count)
        loss_sum, correct = 0.0, 0
        for start in range(0, count, config.batch_size):
            rows = order[start : start + config.batch_size]
            batch = Tensor(train_set.windows[rows], dtype=dtype)
            with Tape() as tape:
                probs = forward_windows(model, batch)
                loss = cross_entropy(probs, train_labels[rows])
            backward(tape, loss)

            values = {name: tensor.data for name, tensor in named}
            grads = {name: tape.gradient(tensor) for name, tensor in named}
            values, state = adam_step(values, grads, state, config)
            for name, tensor in named:
                tensor.data = values[name]

            loss_sum += loss.item() * len(rows)
            correct += int(np.sum(np.argmax(probs.data, axis=-1) == train_labels[rows]))

        stored = model if dtype == STORED_DTYPE else model.astype(STORED_DTYPE)
        val_acc = evaluate(stored, val_set, config.batch_size).accuracy
        record = TrainRecord(
            epoch=epoch,
            train_loss=loss_sum / count,
            train_acc=correct / count,
            val_acc=val_acc,
        )
        history.append(record)
        debug_print(f"[TRAIN] {record}")
        if not quiet:
            line = (
                f"epoch {epoch}/{config.epochs} loss {record.train_loss:.4f} "
                f"train_acc {record.train_acc:.3f} val_acc {val_acc:.3f}"
            )
            if show_bar:
                progress.write(line)
            else:
                print(line)

        if val_acc > best_val:
            best_val = val_acc
            best_model = model.copy()
            if checkpoint_path:
                save_model(best_model, checkpoint_path)

    return best_model, history
