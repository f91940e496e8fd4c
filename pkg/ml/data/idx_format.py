"""
IDX reader/writer for MNIST-style digit files.

Image files:  [0] magic 0x00000803, [4] count, [8] rows, [12] cols, [16] pixels (uint8)
Label files:  [0] magic 0x00000801, [4] count, [8] labels (uint8)

All integers are big-endian 32-bit. Paths ending in `.gz` are (de)compressed
transparently.
"""

import gzip
import logging
import struct
from typing import Tuple

import numpy as np

from ml.errors import IdxFormatError

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


def _read(path: str) -> bytes:
    opener = gzip.open if path.endswith('.gz') else open
    with opener(path, 'rb') as f:
        return f.read()


def _write(path: str, payload: bytes):
    opener = gzip.open if path.endswith('.gz') else open
    with opener(path, 'wb') as f:
        f.write(payload)


def _header(data: bytes, magic: int, n_dims: int, kind: str) -> Tuple[int, ...]:
    if len(data) < 4:
        raise IdxFormatError(f"{kind} file too short for a magic number", 'truncated', offset=len(data))
    (found,) = struct.unpack('>I', data[:4])
    if found != magic:
        raise IdxFormatError(f"{kind} file has magic 0x{found:08x}, expected 0x{magic:08x}", 'bad_magic', offset=0)
    header_len = 4 + 4 * n_dims
    if len(data) < header_len:
        raise IdxFormatError(f"{kind} header truncated", 'truncated', offset=len(data))
    return struct.unpack('>' + 'I' * n_dims, data[4:header_len])


def _payload(data: bytes, header_len: int, expected: int, kind: str) -> np.ndarray:
    end = header_len + expected
    if len(data) < end:
        raise IdxFormatError(
            f"{kind} payload truncated: expected {expected} bytes, found {len(data) - header_len}",
            'truncated', offset=len(data),
        )
    if len(data) > end:
        raise IdxFormatError(f"{kind} file has {len(data) - end} unexpected trailing bytes", 'trailing_bytes', offset=end)
    return np.frombuffer(data, dtype=np.uint8, count=expected, offset=header_len)


def read_idx_arrays(images_path: str, labels_path: str) -> Tuple[np.ndarray, np.ndarray]:
    """Raw uint8 images (n, rows, cols) and labels (n,)"""
    image_data = _read(images_path)
    n_images, rows, cols = _header(image_data, IMAGES_MAGIC, 3, 'image')
    pixels = _payload(image_data, 16, n_images * rows * cols, 'image').reshape(n_images, rows, cols)

    label_data = _read(labels_path)
    (n_labels,) = _header(label_data, LABELS_MAGIC, 1, 'label')
    if n_labels != n_images:
        raise IdxFormatError(
            f"label count {n_labels} does not match image count {n_images}", 'count_mismatch', offset=4
        )
    labels = _payload(label_data, 8, n_labels, 'label')

    logger.info(f"Read {n_images} images of {rows}x{cols} from {images_path}")
    return pixels.copy(), labels.copy()


def write_idx(images_path: str, labels_path: str, images: np.ndarray, labels: np.ndarray):
    """Write images in [0, 1] (scaled to bytes) or uint8 images, plus labels"""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8)
    labels = np.asarray(labels).astype(np.uint8)
    if images.ndim != 3 or len(labels) != len(images):
        raise ValueError(f"need images of shape (n, rows, cols) and n labels, got {images.shape} and {labels.shape}")

    n, rows, cols = images.shape
    _write(images_path, struct.pack('>IIII', IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    _write(labels_path, struct.pack('>II', LABELS_MAGIC, n) + labels.tobytes())
