import struct
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from autodiff import Tensor
from backbone import BackboneParams, build_backbone
from clip_io import atomic_write_bytes
from config import debug_print
from models import ModelConfig
from recurrent import BiGruStackParams, build_stack

MODEL_MAGIC = b"DAMB"
MODEL_FORMAT_VERSION = 1
STORED_DTYPE = np.dtype(np.float32)  # parameters are always stored as float32

# magic, version | u32 length-prefixed blocks | u8 rank + u32 extents per tensor
_HEADER = struct.Struct("<4sI")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_U8 = struct.Struct("<B")


class ModelFormatError(ValueError):
    """Base class for unreadable model files"""


class UnknownMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class CorruptModelError(ModelFormatError):
    pass


@dataclass
class ModelBundle:
    """Everything needed to run or resume the recognizer"""

    config: ModelConfig
    backbone: BackboneParams
    stack: BiGruStackParams
    labels: List[str]
    format_version: int = MODEL_FORMAT_VERSION

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        """All learnable tensors in fixed declaration order"""
        return self.backbone.named_parameters() + self.stack.named_parameters()

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    @property
    def dtype(self):
        return self.backbone.conv_kernels[0].dtype

    def astype(self, dtype) -> "ModelBundle":
        """Independent copy with every parameter cast to `dtype`"""
        copy = build_model(self.config, self.labels, seed=0, dtype=dtype, init="zeros")
        for (_, dst), (_, src) in zip(copy.named_parameters(), self.named_parameters()):
            dst.data = src.data.astype(dtype)
        return copy

    def copy(self) -> "ModelBundle":
        return self.astype(self.dtype)


def build_model(
    config: ModelConfig,
    labels: Sequence[str],
    seed: int,
    dtype=np.float32,
    init: str = "uniform",
) -> ModelBundle:
    """Fresh model; backbone and stack draw from seed-derived generators"""
    labels = list(labels)
    if len(labels) != config.recurrent.num_classes:
        raise ValueError(
            f"{len(labels)} labels for {config.recurrent.num_classes} classes"
        )
    return ModelBundle(
        config=config,
        backbone=build_backbone(config.backbone, seed, dtype, init),
        stack=build_stack(config.recurrent, seed + 1, dtype, init),
        labels=labels,
    )


def _encode(bundle: ModelBundle) -> bytes:
    config_block = bundle.config.model_dump_json().encode("utf-8")
    chunks = [_HEADER.pack(MODEL_MAGIC, bundle.format_version)]
    chunks.append(_U32.pack(len(config_block)) + config_block)

    encoded_labels = [s.encode("utf-8") for s in bundle.labels]
    label_blocks = [_U16.pack(len(b)) + b for b in encoded_labels]
    chunks.append(_U32.pack(len(bundle.labels)) + b"".join(label_blocks))

    tensors = bundle.named_parameters()
    chunks.append(_U32.pack(len(tensors)))
    for _, tensor in tensors:
        shape = tensor.shape
        chunks.append(_U8.pack(len(shape)) + b"".join(_U32.pack(d) for d in shape))
        chunks.append(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    return b"".join(chunks)


def expected_file_size(bundle: ModelBundle) -> int:
    """Closed-form size of the file `save_model` writes for `bundle`"""
    config_bytes = len(bundle.config.model_dump_json().encode("utf-8"))
    label_bytes = sum(_U16.size + len(s.encode("utf-8")) for s in bundle.labels)
    tensors = bundle.named_parameters()
    shape_prefixes = sum(_U8.size + _U32.size * t.ndim for _, t in tensors)
    return (
        _HEADER.size
        + _U32.size
        + config_bytes
        + _U32.size
        + label_bytes
        + _U32.size
        + shape_prefixes
        + 4 * bundle.parameter_count()
    )


def save_model(bundle: ModelBundle, path: str) -> int:
    """Serialize `bundle` to `path`; returns the number of bytes written"""
    payload = _encode(bundle)
    atomic_write_bytes(path, payload)
    debug_print(f"[STORE] Wrote {len(payload)} bytes to {path}")
    return len(payload)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.payload):
            raise CorruptModelError(
                f"file truncated: needed {n} bytes at offset {self.offset}, "
                f"only {len(self.payload) - self.offset} left"
            )
        chunk = self.payload[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: struct.Struct):
        return fmt.unpack(self.take(fmt.size))


def load_model(path: str) -> ModelBundle:
    """Read a model file written by `save_model`"""
    with open(path, "rb") as file:
        payload = file.read()

    if len(payload) < _HEADER.size:
        if MODEL_MAGIC.startswith(payload[:4]) and payload:
            raise CorruptModelError(f"{path}: file shorter than the header")
        raise UnknownMagicError(f"{path}: not a model file")
    reader = _Reader(payload)
    magic, version = reader.unpack(_HEADER)
    if magic != MODEL_MAGIC:
        raise UnknownMagicError(f"{path}: unknown magic {magic!r}")
    if version != MODEL_FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: format version {version}, expected {MODEL_FORMAT_VERSION}"
        )

    (config_length,) = reader.unpack(_U32)
    try:
        config = ModelConfig.model_validate_json(reader.take(config_length))
    except ValueError as e:
        if isinstance(e, ModelFormatError):
            raise
        raise CorruptModelError(f"{path}: unreadable config block ({e})") from e

    (label_count,) = reader.unpack(_U32)
    labels = []
    for _ in range(label_count):
        (length,) = reader.unpack(_U16)
        labels.append(reader.take(length).decode("utf-8"))

    try:
        bundle = build_model(config, labels, seed=0, init="zeros")
    except ValueError as e:
        raise CorruptModelError(f"{path}: inconsistent model ({e})") from e

    tensors = bundle.named_parameters()
    (tensor_count,) = reader.unpack(_U32)
    if tensor_count != len(tensors):
        raise CorruptModelError(
            f"{path}: {tensor_count} tensors stored, architecture needs {len(tensors)}"
        )
    for name, tensor in tensors:
        (rank,) = reader.unpack(_U8)
        shape = tuple(reader.unpack(_U32)[0] for _ in range(rank))
        if shape != tensor.shape:
            raise CorruptModelError(
                f"{path}: tensor {name} has shape {shape}, expected {tensor.shape}"
            )
        raw = reader.take(4 * int(np.prod(shape, dtype=np.int64)))
        tensor.data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(STORED_DTYPE)

    if reader.offset != len(payload):
        raise CorruptModelError(
            f"{path}: {len(payload) - reader.offset} unexpected trailing bytes"
        )
    debug_print(f"[STORE] Loaded {bundle.parameter_count()} parameters from {path}")
    return bundle


def model_summary(bundle: ModelBundle) -> str:
    """Per-tensor parameter counts and the serialized size"""
    lines = [f"{'parameter':<36}{'shape':>18}{'count':>10}"]
    for name, tensor in bundle.named_parameters():
        lines.append(f"{name:<36}{str(tensor.shape):>18}{tensor.size:>10}")
    size = expected_file_size(bundle)
    lines.append(f"total parameters: {bundle.parameter_count()}")
    lines.append(f"model file size: {size} bytes ({size / 1e6:.2f} MB)")
    return "\n".join(lines)
