"""Image containers, file I/O and range handling.

An image is a numpy float array of shape (H, W, C) with C in {1, 3} and
intensities in [0, 1]. All in-memory arithmetic runs in float64; files are
8-bit (PNG out, PNG/PPM/PGM in), so a load/save round trip is exact up to
the 8-bit quantization bound of 1/510 per channel.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage


class ImageFormatError(ValueError):
    """Unsupported or malformed image file."""


class DimensionError(ValueError):
    """Shapes of interacting arrays are inconsistent."""


# Rec. 601 luma coefficients, used wherever a grayscale view is needed.
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def as_image(arr) -> np.ndarray:
    """Coerce to a valid (H, W, C) float64 image, validating the shape.

    2-D input is promoted to a single channel. Values are not clamped;
    callers that need the [0, 1] guarantee apply clamp01.
    """
    img = np.asarray(arr, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise DimensionError(f"expected (H, W, 1|3) image, got shape {np.shape(arr)}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise DimensionError(f"empty image shape {img.shape}")
    return img


def clamp01(img: np.ndarray) -> np.ndarray:
    """Clip intensities to [0, 1]. Idempotent, shape preserving."""
    return np.clip(img, 0.0, 1.0)


def to_gray(img: np.ndarray) -> np.ndarray:
    """Luminance view, shape (H, W). Single-channel input passes through."""
    img = as_image(img)
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img @ LUMA_WEIGHTS


def load_image(path) -> np.ndarray:
    """Load an 8-bit PNG or binary PPM/PGM file as a [0, 1] image.

    Raises ImageFormatError for any other mode or bit depth, OSError for
    unreadable files.
    """
    try:
        with PILImage.open(path) as pil:
            if pil.format not in ("PNG", "PPM"):
                raise ImageFormatError(f"{path}: unsupported format {pil.format}")
            if pil.mode not in ("L", "RGB"):
                raise ImageFormatError(
                    f"{path}: unsupported mode {pil.mode} (need 8-bit gray or RGB)"
                )
            arr = np.asarray(pil, dtype=np.uint8)
    except PILImage.UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path}: not a recognized image file") from exc
    return as_image(arr.astype(np.float64) / 255.0)


def save_image(img: np.ndarray, path) -> None:
    """Write an image as an 8-bit PNG (gray or RGB by channel count)."""
    img = as_image(img)
    quant = np.rint(clamp01(img) * 255.0).astype(np.uint8)
    if quant.shape[2] == 1:
        pil = PILImage.fromarray(quant[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(quant, mode="RGB")
    pil.save(path, format="PNG")


@dataclass(frozen=True)
class LabeledSample:
    """One classified image: the pixels, its class index and a stable id."""

    image: np.ndarray
    label: int
    id: str


def load_manifest(path, num_classes=None) -> list[LabeledSample]:
    """Read a `filename,label` CSV manifest and load the referenced images.

    Image paths are resolved relative to the manifest's directory. When
    num_classes is given, labels are validated against it.
    """
    base = os.path.dirname(os.path.abspath(path))
    samples = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or {"filename", "label"} - set(reader.fieldnames):
            raise ImageFormatError(f"{path}: manifest needs a filename,label header")
        for row in reader:
            label = int(row["label"])
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise ValueError(f"{path}: label {label} out of range")
            img = load_image(os.path.join(base, row["filename"]))
            samples.append(LabeledSample(img, label, row["filename"]))
    return samples


def write_manifest(samples, directory, manifest_name) -> str:
    """Save samples as PNGs plus a `filename,label` CSV; returns the CSV path."""
    os.makedirs(directory, exist_ok=True)
    manifest_path = os.path.join(directory, manifest_name)
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label"])
        for sample in samples:
            fname = sample.id if sample.id.endswith(".png") else sample.id + ".png"
            save_image(sample.image, os.path.join(directory, fname))
            writer.writerow([fname, sample.label])
    return manifest_path
