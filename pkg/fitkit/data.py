##################################################################################################
#                                        OVERVIEW                                                #
#                                                                                                #
# Datasets for the desk-scale experiments:                                                       #
# - make_synthetic_digits: class-conditional images drawn from fixed geometric templates with    #
#   random shift, amplitude and Gaussian noise. No downloads, deterministic per seed.            #
# - load_idx_dataset: MNIST-format IDX files (optionally gzipped), average-pooled to the desk     #
#   image size.                                                                                  #
##################################################################################################

##################################################################################################
#                                            IMPORTS                                             #
##################################################################################################

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from fitkit.errors import ValidationError
from utils.logs_config import logger    # Logs and events

##################################################################################################
#                                        CONFIGURATION                                           #
##################################################################################################

NOISE_STD = 0.35                 # Pixel noise of the synthetic digits
AMPLITUDE_RANGE = (0.7, 1.3)     # Template brightness range
MAX_SHIFT = 1                    # Templates are rolled by up to this many pixels per axis
SPLITS = ("train", "test")       # Each split is generated from its own child seed stream

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

##################################################################################################
#                                        IMPLEMENTATION                                          #
##################################################################################################

@dataclass
class Dataset:
    """
    Image classification data.

    Attributes:
        inputs (np.ndarray): (N, C, H, W) float64 images.
        labels (np.ndarray): (N,) int64 class indices in [0, num_classes).
        num_classes (int): Number of classes.
        split (str): "train" or "test".
    """

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValidationError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels.")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"Labels must lie in [0, {self.num_classes}).")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def sample_shape(self):
        return tuple(self.inputs.shape[1:])

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[indices], self.labels[indices], self.num_classes, self.split)

    def batches(self, batch_size, rng=None):
        """Yields (inputs, labels) mini-batches; shuffled when an rng is given."""

        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            chosen = order[start:start + batch_size]
            yield self.inputs[chosen], self.labels[chosen]


def _templates(image_size):
    s = image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    centre = (s - 1) / 2.0
    radius = np.hypot(yy - centre, xx - centre)
    edge = max(s // 8, 1)
    mid = slice(s // 2 - edge, s // 2 + edge)

    ring = ((radius >= s * 0.22) & (radius <= s * 0.42)).astype(float)
    vertical = np.zeros((s, s)); vertical[:, mid] = 1.0
    horizontal = vertical.T.copy()
    diagonal = (np.abs(yy - xx) <= 0.5).astype(float)
    anti = (np.abs(yy + xx - (s - 1)) <= 0.5).astype(float)
    cross = np.clip(vertical + horizontal, 0, 1)
    ex = np.clip(diagonal + anti, 0, 1)
    box = np.zeros((s, s)); box[:edge, :] = box[-edge:, :] = box[:, :edge] = box[:, -edge:] = 1.0
    quadrant = np.zeros((s, s)); quadrant[: s // 2, : s // 2] = 1.0
    double = np.zeros((s, s)); double[:, edge:2 * edge] = double[:, s - 2 * edge:s - edge] = 1.0
    return np.stack([ring, vertical, horizontal, diagonal, anti, cross, ex, box, quadrant, double])


def make_synthetic_digits(num_samples, num_classes, image_size, seed, split="train"):
    """
    Builds a balanced synthetic digit set.

    Class k uses template k; each sample is the template rolled by up to one pixel, scaled by a
    random amplitude and corrupted with Gaussian noise. Train and test come from independent
    child streams of `seed`, so the two splits are disjoint.

    Args:
        num_samples (int): Number of images (class counts differ by at most one).
        num_classes (int): 2 to 10.
        image_size (int): Side length, at least 4.
        seed (int): Seed of the generator.
        split (str): "train" or "test".

    Returns:
        Dataset: (N, 1, image_size, image_size) images.
    """

    if not 2 <= num_classes <= 10:
        raise ValidationError(f"num_classes must be in [2, 10], got {num_classes}.")
    if image_size < 4:
        raise ValidationError(f"image_size must be at least 4, got {image_size}.")
    if num_samples < 1:
        raise ValidationError(f"num_samples must be at least 1, got {num_samples}.")
    if split not in SPLITS:
        raise ValidationError(f"split must be one of {SPLITS}, got '{split}'.")

    stream = np.random.SeedSequence(seed).spawn(len(SPLITS))[SPLITS.index(split)]
    rng = np.random.default_rng(stream)
    templates = _templates(image_size)[:num_classes]

    labels = rng.permutation(np.arange(num_samples) % num_classes)
    shifts = rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=(num_samples, 2))
    amplitudes = rng.uniform(*AMPLITUDE_RANGE, size=num_samples)
    noise = rng.normal(0.0, NOISE_STD, size=(num_samples, image_size, image_size))

    images = np.empty((num_samples, 1, image_size, image_size))
    for i, (label, (dy, dx)) in enumerate(zip(labels, shifts)):
        shifted = np.roll(templates[label], (int(dy), int(dx)), axis=(0, 1))
        images[i, 0] = amplitudes[i] * shifted + noise[i]
    return Dataset(images, labels, num_classes, split)


def _open(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def load_idx_dataset(images_path, labels_path, image_size=None, split="train", num_classes=10, limit=None):
    """
    Reads MNIST-format IDX image and label files.

    Pixels are scaled to [0, 1]; when `image_size` is given the images are average-pooled down to
    it (the source side length must be a multiple of it).

    Args:
        images_path (str): IDX3 image file (".gz" is decompressed).
        labels_path (str): IDX1 label file.
        image_size (int, optional): Target side length.
        split (str): Split tag stored on the dataset.
        num_classes (int): Number of classes.
        limit (int, optional): Keep only the first `limit` examples.

    Returns:
        Dataset: (N, 1, S, S) images.

    Raises:
        ValidationError: On bad magic numbers, count mismatches or an incompatible image_size.
    """

    with _open(images_path) as f:
        magic, count, rows, cols = struct.unpack(">IIII", f.read(16))
        if magic != IDX_IMAGES_MAGIC:
            raise ValidationError(f"{images_path}: bad IDX image magic {magic}.")
        pixels = np.frombuffer(f.read(count * rows * cols), dtype=np.uint8)
    with _open(labels_path) as f:
        magic, label_count = struct.unpack(">II", f.read(8))
        if magic != IDX_LABELS_MAGIC:
            raise ValidationError(f"{labels_path}: bad IDX label magic {magic}.")
        labels = np.frombuffer(f.read(label_count), dtype=np.uint8).astype(np.int64)

    if label_count != count or pixels.size != count * rows * cols:
        raise ValidationError(f"IDX files disagree: {count} images, {label_count} labels.")
    images = pixels.reshape(count, rows, cols).astype(np.float64) / 255.0
    if limit is not None:
        images, labels = images[:limit], labels[:limit]

    if image_size is not None and image_size != rows:
        if rows != cols or rows % image_size:
            raise ValidationError(f"Cannot average-pool {rows}x{cols} images to {image_size}x{image_size}.")
        f = rows // image_size
        images = images.reshape(len(images), image_size, f, image_size, f).mean(axis=(2, 4))

    logger.info(f"✅ Loaded {len(labels)} IDX images from {images_path}.")
    return Dataset(images[:, None, :, :], labels, num_classes, split)
