"""
Discrete-attention glimpse environment.

An image's class is fixed for the episode; the agent reveals one patch of a
fixed patch grid per step and sees the composite of everything revealed so
far. A synthetic glyph dataset (seven-segment style digits with salt-and-pepper
noise) stands in for MNIST; real IDX files can be loaded as well.
"""

import base64
import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Tuple

import numpy as np

from ml.data.idx_format import read_idx_arrays
from ml.errors import ConfigError, EpisodeStateError, ShapeError

logger = logging.getLogger(__name__)

GLYPH_SIZE = 12

# (row slice, col slice) for each seven-segment stroke on the 12x12 canvas
SEGMENTS = {
    'a': (slice(1, 3), slice(3, 9)),
    'b': (slice(1, 7), slice(8, 10)),
    'c': (slice(5, 11), slice(8, 10)),
    'd': (slice(9, 11), slice(3, 9)),
    'e': (slice(5, 11), slice(2, 4)),
    'f': (slice(1, 7), slice(2, 4)),
    'g': (slice(5, 7), slice(3, 9)),
}

DIGIT_SEGMENTS = ('abcdef', 'bc', 'abged', 'abgcd', 'fgbc', 'afgcd', 'afgedc', 'abc', 'abcdefg', 'abcdfg')


def base_glyphs() -> np.ndarray:
    """The ten noise-free class templates, shape (10, 12, 12)"""
    glyphs = np.zeros((len(DIGIT_SEGMENTS), GLYPH_SIZE, GLYPH_SIZE))
    for digit, strokes in enumerate(DIGIT_SEGMENTS):
        for stroke in strokes:
            rows, cols = SEGMENTS[stroke]
            glyphs[digit, rows, cols] = 1.0
    return glyphs


@dataclass
class GlyphDataset:
    """Grayscale images in [0, 1] with class labels and a train/test index split"""
    images: np.ndarray
    labels: np.ndarray
    n_classes: int = 10
    train_idx: np.ndarray = None
    test_idx: np.ndarray = None
    pixel_noise: float = 0.0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3 or len(self.images) != len(self.labels):
            raise ShapeError(f"need images (n, rows, cols) and n labels, got {self.images.shape}, {self.labels.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ShapeError(f"labels must lie in [0, {self.n_classes})")
        if self.train_idx is None:
            self.train_idx = np.arange(len(self.labels))
        if self.test_idx is None:
            self.test_idx = np.arange(0)
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.test_idx = np.asarray(self.test_idx, dtype=np.int64)
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise ShapeError("train and test splits overlap")

    def __len__(self) -> int:
        return int(len(self.labels))

    def split(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        index = {'train': self.train_idx, 'test': self.test_idx}[name]
        return self.images[index], self.labels[index]

    def to_dict(self) -> Dict[str, Any]:
        pixels = np.clip(np.round(self.images * 255.0), 0, 255).astype(np.uint8)
        return {
            'n_classes': self.n_classes,
            'shape': list(self.images.shape),
            'pixel_noise': self.pixel_noise,
            'pixels': base64.b64encode(pixels.tobytes()).decode('ascii'),
            'labels': self.labels.tolist(),
            'train_idx': self.train_idx.tolist(),
            'test_idx': self.test_idx.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'GlyphDataset':
        pixels = np.frombuffer(base64.b64decode(data['pixels']), dtype=np.uint8)
        return cls(
            images=pixels.reshape(data['shape']) / 255.0,
            labels=np.array(data['labels']),
            n_classes=data['n_classes'],
            train_idx=np.array(data['train_idx']),
            test_idx=np.array(data['test_idx']),
            pixel_noise=data.get('pixel_noise', 0.0),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> 'GlyphDataset':
        return cls.from_dict(json.loads(text))

    def save(self, filepath: str):
        with open(filepath, 'w') as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, filepath: str) -> 'GlyphDataset':
        with open(filepath, 'r') as f:
            return cls.from_json(f.read())


def make_glyph_dataset(seed: int, n_per_class: int, pixel_noise: float,
                       test_fraction: float = 0.2) -> GlyphDataset:
    """Noisy copies of the base glyphs; each pixel is flipped with probability pixel_noise"""
    if n_per_class < 2:
        raise ConfigError(f"need at least 2 images per class, got {n_per_class}")
    if not 0.0 <= pixel_noise <= 1.0:
        raise ConfigError(f"pixel_noise must be a probability, got {pixel_noise}")

    rng = np.random.default_rng(seed)
    templates = base_glyphs()
    n_classes = len(templates)
    n_test = min(n_per_class - 1, max(1, int(round(n_per_class * test_fraction))))

    images, labels, train_idx, test_idx = [], [], [], []
    for label, template in enumerate(templates):
        flips = rng.random((n_per_class,) + template.shape) < pixel_noise
        instances = np.where(flips, 1.0 - template, template)
        start = len(labels)
        images.extend(instances)
        labels.extend([label] * n_per_class)
        train_idx.extend(range(start, start + n_per_class - n_test))
        test_idx.extend(range(start + n_per_class - n_test, start + n_per_class))

    dataset = GlyphDataset(
        images=np.array(images),
        labels=np.array(labels),
        n_classes=n_classes,
        train_idx=rng.permutation(train_idx),
        test_idx=rng.permutation(test_idx),
        pixel_noise=pixel_noise,
    )
    logger.info(f"Generated {len(dataset)} glyphs ({len(dataset.train_idx)} train / "
                f"{len(dataset.test_idx)} test) with pixel noise {pixel_noise}")
    return dataset


def held_out_split(labels: np.ndarray, test_fraction: float,
                   rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-class train/test indices. Each class with at least two images holds
    out round(count * test_fraction) of them, at least one and never all.
    """
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    labels = np.asarray(labels)
    train_idx, test_idx = [], []
    for label in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == label))
        n_test = 0
        if test_fraction > 0 and len(members) > 1:
            n_test = min(len(members) - 1, max(1, int(round(len(members) * test_fraction))))
        test_idx.extend(members[:n_test].tolist())
        train_idx.extend(members[n_test:].tolist())
    return np.array(sorted(train_idx), dtype=np.int64), np.array(sorted(test_idx), dtype=np.int64)


def load_idx(images_path: str, labels_path: str, n_classes: int = 10,
             test_fraction: float = 0.0, seed: int = 0) -> GlyphDataset:
    """IDX files as a dataset; held_out_split moves test_fraction of each class to the test split"""
    pixels, labels = read_idx_arrays(images_path, labels_path)
    train_idx, test_idx = held_out_split(labels, test_fraction, np.random.default_rng(seed))
    dataset = GlyphDataset(images=pixels / 255.0, labels=labels, n_classes=n_classes,
                           train_idx=train_idx, test_idx=test_idx)
    logger.info(f"Loaded {len(dataset)} IDX images from {images_path} "
                f"({len(train_idx)} train / {len(test_idx)} test)")
    return dataset


def load_idx_splits(train_images: str, train_labels: str, test_images: str, test_labels: str,
                    n_classes: int = 10) -> GlyphDataset:
    """Separate train and test IDX pairs, the way MNIST ships them"""
    train_pixels, train_y = read_idx_arrays(train_images, train_labels)
    test_pixels, test_y = read_idx_arrays(test_images, test_labels)
    if train_pixels.shape[1:] != test_pixels.shape[1:]:
        raise ShapeError(f"train images are {train_pixels.shape[1:]} but test images are {test_pixels.shape[1:]}")
    n_train, n_test = len(train_y), len(test_y)
    dataset = GlyphDataset(
        images=np.concatenate([train_pixels, test_pixels]) / 255.0,
        labels=np.concatenate([train_y, test_y]),
        n_classes=n_classes,
        train_idx=np.arange(n_train),
        test_idx=np.arange(n_train, n_train + n_test),
    )
    logger.info(f"Loaded IDX splits: {n_train} train / {n_test} test images")
    return dataset


@dataclass(frozen=True)
class GlimpseSpec:
    """Patch grid over the image and episode length"""
    patch_rows: int = 4
    patch_cols: int = 4
    episode_len: int = 12

    def __post_init__(self):
        if self.patch_rows * self.patch_cols < 2:
            raise ConfigError("need at least 2 patches")
        if self.episode_len < 1:
            raise ConfigError(f"episode_len must be >= 1, got {self.episode_len}")

    @property
    def n_patches(self) -> int:
        return self.patch_rows * self.patch_cols

    def validate(self, image_shape: Tuple[int, int]):
        rows, cols = image_shape
        if rows % self.patch_rows or cols % self.patch_cols:
            raise ConfigError(
                f"a {self.patch_rows}x{self.patch_cols} patch grid does not tile a {rows}x{cols} image"
            )

    def patch_slices(self, patch: int, image_shape: Tuple[int, int]) -> Tuple[slice, slice]:
        if not 0 <= patch < self.n_patches:
            raise ShapeError(f"patch {patch} out of range [0, {self.n_patches})")
        height, width = image_shape[0] // self.patch_rows, image_shape[1] // self.patch_cols
        row, col = divmod(patch, self.patch_cols)
        return slice(row * height, (row + 1) * height), slice(col * width, (col + 1) * width)


@dataclass
class AttentionState:
    revealed: np.ndarray
    composite: np.ndarray
    step: int = 0


class AttentionEpisode:
    """One image, revealed patch by patch"""

    def __init__(self, spec: GlimpseSpec, image: np.ndarray, label: int):
        self.spec = spec
        self.reset(image, label)

    def reset(self, image: np.ndarray, label: int):
        image = np.asarray(image, dtype=np.float64)
        self.spec.validate(image.shape)
        self.image = image
        self.label = int(label)
        self.state = AttentionState(
            revealed=np.zeros(self.spec.n_patches, dtype=bool),
            composite=np.zeros_like(image),
        )

    @property
    def done(self) -> bool:
        return self.state.step >= self.spec.episode_len

    def step(self, patch: int) -> Tuple[np.ndarray, int]:
        """Reveal a patch (re-selection is allowed and changes nothing)"""
        if self.done:
            raise EpisodeStateError(f"episode finished after {self.spec.episode_len} steps")
        rows, cols = self.spec.patch_slices(patch, self.image.shape)
        self.state.composite[rows, cols] = self.image[rows, cols]
        self.state.revealed[patch] = True
        self.state.step += 1
        return self.state.composite.copy(), self.label


class RewardSchedule(Enum):
    CONTINUOUS = "continuous"
    TERMINAL = "terminal"


def reward_schedule(mode: RewardSchedule, step_idx: int, episode_len: int, correct: bool) -> float:
    if not 0 <= step_idx < episode_len:
        raise ValueError(f"step_idx {step_idx} outside [0, {episode_len})")
    if mode is RewardSchedule.TERMINAL and step_idx != episode_len - 1:
        return 0.0
    return 1.0 if correct else 0.0
