"""
On-disk frame formats: the raw clip container plus PPM/PGM images.

A clip file stores pre-decoded video frames:

    magic "DACL" | u32 version | u16 height | u16 width | u16 channels | u16 frames
    frames x height x width x channels unsigned bytes, row-major

All header fields are little-endian.
"""

import os
import struct
import tempfile
from typing import List, Sequence, Tuple

import numpy as np
from config import debug_print

CLIP_MAGIC = b"DACL"
CLIP_FORMAT_VERSION = 1
CLIP_CHANNELS = 3

_CLIP_HEADER = struct.Struct("<4sIHHHH")


class ClipFormatError(ValueError):
    """Base class for unreadable clip files"""


class BadMagicError(ClipFormatError):
    pass


class UnsupportedVersionError(ClipFormatError):
    pass


class TruncatedClipError(ClipFormatError):
    pass


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write to a temporary sibling and rename into place"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, temp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as file:
            file.write(payload)
        os.replace(temp_path, path)
    except BaseException:
        if os.path.exists(temp_path):
            os.unlink(temp_path)
        raise


def atomic_write_all(payloads: Sequence[Tuple[str, bytes]]) -> None:
    """Write every file or none: files already written are removed on failure"""
    written: List[str] = []
    try:
        for path, payload in payloads:
            atomic_write_bytes(path, payload)
            written.append(path)
    except BaseException:
        for path in written:
            os.unlink(path)
        raise


def encode_clip(frames: np.ndarray) -> bytes:
    """Serialize a frames x H x W x 3 uint8 stack"""
    frames = np.asarray(frames)
    if frames.dtype != np.uint8:
        raise ValueError(f"clip frames must be uint8, got {frames.dtype}")
    if frames.ndim != 4 or frames.shape[3] != CLIP_CHANNELS:
        raise ValueError(f"clip must be frames x H x W x 3, got {frames.shape}")
    count, height, width, channels = frames.shape
    if max(count, height, width) > 0xFFFF:
        raise ValueError(f"clip dimensions {frames.shape} exceed 16-bit header fields")
    if height == 0 or width == 0:
        raise ValueError(f"clip frames must not be empty, got {frames.shape}")
    header = _CLIP_HEADER.pack(
        CLIP_MAGIC, CLIP_FORMAT_VERSION, height, width, channels, count
    )
    return header + np.ascontiguousarray(frames).tobytes()


def decode_clip(payload: bytes, source: str = "<bytes>") -> np.ndarray:
    """Parse clip bytes; exactly the header-declared payload must follow"""
    if len(payload) < _CLIP_HEADER.size:
        if payload and not CLIP_MAGIC.startswith(payload[:4]):
            raise BadMagicError(f"{source}: not a clip file")
        raise TruncatedClipError(f"{source}: header is {len(payload)} bytes")

    magic, version, height, width, channels, count = _CLIP_HEADER.unpack_from(payload)
    if magic != CLIP_MAGIC:
        raise BadMagicError(f"{source}: unknown magic {magic!r}")
    if version != CLIP_FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{source}: clip version {version}, expected {CLIP_FORMAT_VERSION}"
        )
    if channels != CLIP_CHANNELS:
        raise ClipFormatError(f"{source}: {channels} channels, expected 3")
    if height == 0 or width == 0:
        raise ClipFormatError(f"{source}: empty {height}x{width} frames")

    expected = count * height * width * channels
    body = payload[_CLIP_HEADER.size :]
    if len(body) < expected:
        raise TruncatedClipError(
            f"{source}: payload has {len(body)} of {expected} bytes"
        )
    if len(body) > expected:
        raise ClipFormatError(
            f"{source}: {len(body) - expected} unexpected trailing bytes"
        )
    frames = np.frombuffer(body, dtype=np.uint8)
    return frames.reshape(count, height, width, channels).copy()


def save_clip(frames: np.ndarray, path: str) -> int:
    """Write a clip file; returns the number of bytes written"""
    payload = encode_clip(frames)
    atomic_write_bytes(path, payload)
    debug_print(f"[DATA] Wrote clip {frames.shape} to {path}")
    return len(payload)


def load_clip(path: str) -> np.ndarray:
    """Raw frame stack (frames x H x W x 3, uint8) of a clip file"""
    with open(path, "rb") as file:
        return decode_clip(file.read(), source=path)


def _netpbm_header(payload: bytes, source: str) -> Tuple[bytes, int, int, int, int]:
    """(kind, width, height, max value, pixel offset) of a binary PPM/PGM"""
    tokens = []
    offset = 0
    while len(tokens) < 4:
        if offset >= len(payload):
            raise ValueError(f"{source}: truncated image header")
        char = payload[offset : offset + 1]
        if char.isspace():
            offset += 1
        elif char == b"#":
            end = payload.find(b"\n", offset)
            offset = len(payload) if end < 0 else end + 1
        else:
            start = offset
            while offset < len(payload) and not payload[offset : offset + 1].isspace():
                offset += 1
            tokens.append(payload[start:offset])

    kind = tokens[0]
    if kind not in (b"P5", b"P6"):
        raise ValueError(f"{source}: not a binary PPM/PGM image")
    try:
        width, height, max_value = (int(token) for token in tokens[1:])
    except ValueError:
        raise ValueError(f"{source}: malformed image header") from None
    # A single whitespace byte separates the header from the pixels
    return kind, width, height, max_value, offset + 1


def read_ppm(path: str) -> np.ndarray:
    """Read an 8-bit binary PPM (P6) into an H x W x 3 uint8 array"""
    with open(path, "rb") as file:
        payload = file.read()
    kind, width, height, max_value, offset = _netpbm_header(payload, path)
    if kind != b"P6":
        raise ValueError(f"{path}: expected a P6 image, got {kind.decode()}")
    if not 0 < max_value < 256:
        raise ValueError(f"{path}: only 8-bit images are supported (max {max_value})")

    expected = width * height * 3
    body = payload[offset : offset + expected]
    if len(body) < expected:
        raise ValueError(f"{path}: pixel data truncated")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    if max_value != 255:
        pixels = np.round(pixels.astype(np.float64) * 255.0 / max_value)
    return pixels.astype(np.uint8)


def encode_pgm(image: np.ndarray) -> bytes:
    """
    Serialize a grayscale map as binary PGM (P5, max value 255).

    Float input is read as intensities in [0, 1]; uint8 is written as is.
    """
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    if image.ndim != 2:
        raise ValueError(f"grayscale map must be H x W, got {image.shape}")
    if image.dtype != np.uint8:
        image = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    height, width = image.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(image).tobytes()


def write_pgm(path: str, image: np.ndarray) -> None:
    atomic_write_bytes(path, encode_pgm(image))


def read_pgm(path: str) -> np.ndarray:
    """Read an 8-bit binary PGM (P5) as an H x W uint8 array"""
    with open(path, "rb") as file:
        payload = file.read()
    kind, width, height, max_value, offset = _netpbm_header(payload, path)
    if kind != b"P5" or max_value > 255:
        raise ValueError(f"{path}: expected an 8-bit P5 image")
    body = payload[offset : offset + width * height]
    if len(body) < width * height:
        raise ValueError(f"{path}: pixel data truncated")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).copy()
