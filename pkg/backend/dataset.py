import csv
import glob
import io
import math
import os
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
from clip_io import atomic_write_bytes, load_clip, read_ppm, save_clip
from config import debug_print
from models import POOL_FACTOR, ManifestRow, SynthSpec
from pydantic import ValidationError

MANIFEST_COLUMNS = ("path", "label", "split")
MANIFEST_NAME = "manifest.csv"
CLIP_DIR = "clips"


class ClipTooShortError(ValueError):
    """Raised when a clip cannot fill a single window"""


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifests"""


class SplitError(ValueError):
    """Raised when a class cannot be split into train and validation"""


@dataclass
class ClipSample:
    """One classification window"""

    frames: np.ndarray  # T x H x W x 3, values in [0, 1]
    label: int
    source: str = ""


def _bilinear_axis(in_size: int, out_size: int):
    # Half-pixel centres, clamped to the border
    scale = in_size / out_size
    position = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    position = np.clip(position, 0.0, in_size - 1)
    low = np.floor(position).astype(np.int64)
    high = np.minimum(low + 1, in_size - 1)
    return low, high, position - low


def resize_bilinear(frames: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of N x H x W x C frames, computed in float64"""
    frames = np.asarray(frames, dtype=np.float64)
    y0, y1, wy = _bilinear_axis(frames.shape[1], height)
    x0, x1, wx = _bilinear_axis(frames.shape[2], width)
    wy = wy[None, :, None, None]
    wx = wx[None, None, :, None]

    top = frames[:, y0, :, :]
    bottom = frames[:, y1, :, :]
    rows = top + (bottom - top) * wy
    left = rows[:, :, x0, :]
    right = rows[:, :, x1, :]
    return left + (right - left) * wx


def preprocess(raw: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """
    Resize raw 8-bit frames (N x H x W x 3) and scale them into [0, 1].

    Target dimensions must survive the backbone's four 2x poolings.
    """
    if target_h <= 0 or target_w <= 0:
        raise ValueError(f"target size {target_h}x{target_w} must be positive")
    if target_h % POOL_FACTOR or target_w % POOL_FACTOR:
        raise ValueError(
            f"target size {target_h}x{target_w} is not divisible by {POOL_FACTOR}"
        )
    raw = np.asarray(raw)
    if raw.ndim != 4 or raw.shape[3] != 3:
        raise ValueError(f"frames must be N x H x W x 3, got {raw.shape}")
    if raw.shape[1] == 0 or raw.shape[2] == 0:
        raise ValueError(f"frames have no pixels: {raw.shape}")
    return resize_bilinear(raw, target_h, target_w) / 255.0


def make_sequences(
    frames: np.ndarray, length: int = 16, stride: int = 16
) -> List[np.ndarray]:
    """
    Consecutive windows of `length` frames starting every `stride` frames.

    With the default stride the windows are disjoint and the trailing
    remainder shorter than `length` is dropped.
    """
    if length < 1 or stride < 1:
        raise ValueError("length and stride must be positive")
    if len(frames) < length:
        raise ClipTooShortError(
            f"clip has {len(frames)} frames, a window needs {length}"
        )
    return [
        frames[start : start + length]
        for start in range(0, len(frames) - length + 1, stride)
    ]


def read_manifest(path: str) -> List[ManifestRow]:
    """Rows of a `path,label,split` manifest; relative paths stay as written"""
    with open(path, "r", encoding="utf-8", newline="") as file:
        reader = csv.DictReader(file)
        header = tuple(reader.fieldnames or ())
        if header[:2] != MANIFEST_COLUMNS[:2]:
            raise ManifestError(
                f"{path}: header must be {','.join(MANIFEST_COLUMNS)}, "
                f"got {header}"
            )
        rows = []
        for line_number, record in enumerate(reader, start=2):
            try:
                rows.append(
                    ManifestRow(
                        path=record["path"],
                        label=record["label"] or "",
                        split=record.get("split") or None,
                    )
                )
            except ValidationError as e:
                message = e.errors()[0]["msg"]
                raise ManifestError(f"{path}:{line_number}: {message}") from e
    if not rows:
        raise ManifestError(f"{path}: manifest has no rows")
    debug_print(f"[DATA] Read {len(rows)} manifest rows from {path}")
    return rows


def write_manifest(rows: Sequence[ManifestRow], path: str) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for row in rows:
        writer.writerow([row.path, row.label, row.split or ""])
    atomic_write_bytes(path, buffer.getvalue().encode("utf-8"))


def class_labels(rows: Sequence[ManifestRow]) -> List[str]:
    """Class names in index order (sorted)"""
    return sorted({row.label for row in rows})


def split_dataset(
    rows: Sequence[ManifestRow],
    train_fraction: float = 0.7,
    seed: int = 0,
    test_fraction: float = 0.0,
) -> List[ManifestRow]:
    """
    Assign a stratified split to every row.

    Within each class (in sorted label order) the clips are shuffled with
    one generator seeded by `seed`. An optional test share is carved off
    first; of the rest the first ceil(train_fraction * n) go to train and
    the remainder to val, always leaving at least one clip in each.
    Row order and every other field are preserved.
    """
    if not 0.0 < train_fraction < 1.0:
        raise SplitError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if not 0.0 <= test_fraction < 1.0:
        raise SplitError(f"test_fraction must be in [0, 1), got {test_fraction}")

    by_class: Dict[str, List[int]] = {}
    for index, row in enumerate(rows):
        by_class.setdefault(row.label, []).append(index)

    rng = np.random.default_rng(seed)
    assigned: Dict[int, str] = {}
    for label in sorted(by_class):
        members = by_class[label]
        n = len(members)
        minimum = 3 if test_fraction > 0 else 2
        if n < minimum:
            raise SplitError(f"class '{label}' has {n} clip(s), needs {minimum}")

        order = [members[i] for i in rng.permutation(n)]
        n_test = min(math.floor(test_fraction * n), n - 2)
        remaining = n - n_test
        # Small epsilon keeps 0.7 * 10 from rounding up to 8
        n_train = math.ceil(train_fraction * remaining - 1e-9)
        n_train = min(max(n_train, 1), remaining - 1)
        for position, index in enumerate(order):
            if position < n_test:
                assigned[index] = "test"
            elif position < n_test + n_train:
                assigned[index] = "train"
            else:
                assigned[index] = "val"

    return [row.model_copy(update={"split": assigned[i]}) for i, row in enumerate(rows)]


def _resolve(path: str, base_dir: Optional[str]) -> str:
    if base_dir and not os.path.isabs(path):
        return os.path.join(base_dir, path)
    return path


@dataclass
class WindowDataset:
    """All windows of a set of clips, stacked for batching"""

    windows: np.ndarray  # N x T x H x W x 3
    labels: np.ndarray  # N class indices
    sources: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[ClipSample]:
        for i in range(len(self)):
            source = self.sources[i] if self.sources else ""
            yield ClipSample(self.windows[i], int(self.labels[i]), source)

    @classmethod
    def from_manifest(
        cls,
        rows: Sequence[ManifestRow],
        labels: Sequence[str],
        height: int,
        width: int,
        sequence_length: int = 16,
        split: Optional[str] = None,
        base_dir: Optional[str] = None,
        shuffle_frames: bool = False,
        seed: int = 0,
        dtype=np.float32,
    ) -> "WindowDataset":
        """
        Load, resize and window every clip of `rows` (optionally one split).

        `shuffle_frames` permutes the frames inside each window with a
        generator seeded by `seed`, destroying temporal order while keeping
        every frame.
        """
        index = {label: i for i, label in enumerate(labels)}
        selected = [row for row in rows if split is None or row.split == split]
        if not selected:
            raise ManifestError(f"no clips in split '{split}'")

        rng = np.random.default_rng(seed)
        windows, targets, sources = [], [], []
        for row in selected:
            if row.label not in index:
                raise ManifestError(
                    f"label '{row.label}' is not one of {list(labels)}"
                )
            path = _resolve(row.path, base_dir)
            frames = preprocess(load_clip(path), height, width).astype(dtype)
            for window in make_sequences(frames, sequence_length, sequence_length):
                if shuffle_frames:
                    window = window[rng.permutation(sequence_length)]
                windows.append(window)
                targets.append(index[row.label])
                sources.append(row.path)

        debug_print(
            f"[DATA] {len(windows)} window(s) from {len(selected)} clip(s)"
            + (f" in split '{split}'" if split else "")
        )
        return cls(
            windows=np.stack(windows),
            labels=np.asarray(targets, dtype=np.int64),
            sources=sources,
        )


def load_dataset(
    manifest_path: str,
    labels: Sequence[str],
    height: int,
    width: int,
    sequence_length: int = 16,
    split: Optional[str] = None,
    shuffle_frames: bool = False,
    seed: int = 0,
    dtype=np.float32,
) -> WindowDataset:
    """WindowDataset from a manifest file; clip paths are relative to it"""
    rows = read_manifest(manifest_path)
    return WindowDataset.from_manifest(
        rows,
        labels,
        height,
        width,
        sequence_length=sequence_length,
        split=split,
        base_dir=os.path.dirname(os.path.abspath(manifest_path)),
        shuffle_frames=shuffle_frames,
        seed=seed,
        dtype=dtype,
    )


# Motion patterns; a name and its mirror share a scene so only the order differs
SYNTH_CLASSES = (
    "c0_left_to_right",
    "c1_right_to_left",
    "c2_oscillate",
    "c3_top_to_bottom",
    "c4_bottom_to_top",
)
_SCENE_GROUP = (0, 0, 1, 2, 2)


def _trajectory(kind: str, frames: int, travel: int) -> np.ndarray:
    t = np.arange(frames, dtype=np.float64)
    span = max(frames - 1, 1)
    if kind == "c2_oscillate":
        # Out and back, same positions as the linear sweeps
        phase = 2.0 * t / span
        ramp = np.where(phase <= 1.0, phase, 2.0 - phase)
    else:
        ramp = t / span
    return np.round(ramp * travel).astype(np.int64)


def _render_scene(kind: str, clip: int, spec: SynthSpec, seed: int) -> np.ndarray:
    group = _SCENE_GROUP[SYNTH_CLASSES.index(kind)]
    rng = np.random.default_rng([seed, group, clip])
    size, frames = spec.size, spec.frames
    sprite = max(size // 4, 2)
    margin = max(size // 16, 1)
    travel = size - sprite - 2 * margin

    base = rng.integers(30, 90)
    background = rng.normal(base, 12.0, size=(frames, size, size, 3))
    color = rng.integers(150, 256, size=3)
    across = margin + rng.integers(0, travel + 1)  # fixed coordinate of the sprite

    video = np.clip(np.round(background), 0, 255).astype(np.uint8)
    positions = margin + _trajectory(kind, frames, travel)
    vertical = kind in ("c3_top_to_bottom", "c4_bottom_to_top")
    for t, along in enumerate(positions):
        if vertical:
            video[t, along : along + sprite, across : across + sprite] = color
        else:
            video[t, across : across + sprite, along : along + sprite] = color
    return video


def synth_clip(kind: str, clip: int, spec: SynthSpec, seed: int) -> np.ndarray:
    """Frames of one synthetic clip; mirrored classes replay their scene reversed"""
    if kind == "c1_right_to_left":
        return _render_scene("c0_left_to_right", clip, spec, seed)[::-1].copy()
    if kind == "c4_bottom_to_top":
        return _render_scene("c3_top_to_bottom", clip, spec, seed)[::-1].copy()
    return _render_scene(kind, clip, spec, seed)


def synth_dataset(spec: SynthSpec, seed: int, out_dir: str) -> List[ManifestRow]:
    """
    Write a motion-direction dataset to `out_dir`.

    Each class is a sprite moving in one way over a noisy background; per
    frame the classes look alike, only the order of frames tells them apart.
    Clips go to `out_dir/clips/`, the split manifest to `out_dir/manifest.csv`.
    """
    rows = []
    for kind in SYNTH_CLASSES[: spec.num_classes]:
        for clip in range(spec.clips_per_class):
            relative = f"{CLIP_DIR}/{kind}_{clip:03d}.dacl"
            frames = synth_clip(kind, clip, spec, seed)
            save_clip(frames, os.path.join(out_dir, relative))
            rows.append(ManifestRow(path=relative, label=kind))

    rows = split_dataset(rows, seed=seed)
    write_manifest(rows, os.path.join(out_dir, MANIFEST_NAME))
    debug_print(f"[DATA] Synthesized {len(rows)} clips in {out_dir}")
    return rows


def import_frames(frame_dir: str, out_path: str) -> np.ndarray:
    """Pack a directory of P6 frames (sorted by file name) into one clip file"""
    paths = sorted(glob.glob(os.path.join(frame_dir, "*.ppm")))
    if not paths:
        raise ValueError(f"{frame_dir}: no .ppm frames found")
    frames = [read_ppm(path) for path in paths]
    first = frames[0].shape
    for path, frame in zip(paths, frames):
        if frame.shape != first:
            raise ValueError(f"{path}: frame is {frame.shape}, expected {first}")
    stack = np.stack(frames)
    save_clip(stack, out_path)
    return stack
