"""Class taxonomy, raster validation and binary mask algebra.

Ground truth is stored as a single-channel class-index raster; binary masks
are derived views. Shapes follow the (C, H, W) / (H, W) row-major convention.
"""
from __future__ import annotations

from enum import IntEnum
from pathlib import Path

import numpy as np
from PIL import Image


class ClassId(IntEnum):
    BACKGROUND = 0
    LEFT_HAND = 1
    RIGHT_HAND = 2
    LEFT_OBJECT = 3
    RIGHT_OBJECT = 4
    TWO_HAND_OBJECT = 5


NUM_CLASSES = len(ClassId)
HAND_CLASSES = (ClassId.LEFT_HAND, ClassId.RIGHT_HAND)
OBJECT_CLASSES = (ClassId.LEFT_OBJECT, ClassId.RIGHT_OBJECT, ClassId.TWO_HAND_OBJECT)
CLASS_NAMES = {
    ClassId.BACKGROUND: "background",
    ClassId.LEFT_HAND: "left_hand",
    ClassId.RIGHT_HAND: "right_hand",
    ClassId.LEFT_OBJECT: "left_object",
    ClassId.RIGHT_OBJECT: "right_object",
    ClassId.TWO_HAND_OBJECT: "two_hand_object",
}

SET_OPS = ("union", "intersection", "difference")


class RasterError(ValueError):
    """Raised for malformed label rasters, masks or images."""


def validate_labels(labels: np.ndarray, name: str = "labels") -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise RasterError(f"{name}: expected a 2-D label raster, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise RasterError(f"{name}: label raster must be integer typed, got {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
        bad = sorted(set(np.unique(labels).tolist()) - set(range(NUM_CLASSES)))
        raise RasterError(f"{name}: label values {bad} outside 0..{NUM_CLASSES - 1}")
    return labels.astype(np.uint8, copy=False)


def validate_mask(mask: np.ndarray, name: str = "mask") -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise RasterError(f"{name}: expected a 2-D mask, got shape {mask.shape}")
    if mask.dtype != bool:
        if not np.isin(mask, (0, 1)).all():
            raise RasterError(f"{name}: mask values must be 0 or 1")
        mask = mask.astype(bool)
    return mask


def validate_image(image: np.ndarray, name: str = "image") -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise RasterError(f"{name}: expected an (H, W, 3) image, got shape {image.shape}")
    return image


def label_to_binary(labels: np.ndarray, cls: int) -> np.ndarray:
    """Boolean mask of the pixels carrying class ``cls``."""
    return np.asarray(labels) == int(ClassId(cls))


def binary_set_op(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    a = validate_mask(a, "a")
    b = validate_mask(b, "b")
    if a.shape != b.shape:
        raise RasterError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    if op == "union":
        return a | b
    if op == "intersection":
        return a & b
    if op == "difference":
        return a & ~b
    raise ValueError(f"unknown set operation {op!r}; expected one of {SET_OPS}")


def check_divisible(height: int, width: int, factor: int) -> None:
    if height % factor or width % factor:
        raise RasterError(
            f"image size {height}x{width} must be divisible by {factor} "
            "(patch size times 2 per downsampling, bottleneck included)"
        )


def read_label_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise RasterError(f"{path}: label PNG must be single channel, got shape {arr.shape}")
    return validate_labels(arr, str(path))


def write_label_png(path: str | Path, labels: np.ndarray) -> None:
    Image.fromarray(validate_labels(labels)).save(path)


def read_mask_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im.convert("L"))
    return arr > 0


def write_mask_png(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(validate_mask(mask).astype(np.uint8) * 255).save(path)


def read_image_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"))


def write_image_png(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(validate_image(image).astype(np.uint8)).save(path)
