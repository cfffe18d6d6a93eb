"""Procedural egocentric hand-object scenes and EgoHOS-style dataset IO.

A scene has a left forearm entering from the bottom-left border and a right
forearm from the bottom-right. Objects that touch a hand take their class
from which hands they touch (8-connected adjacency after hands are painted
over them); distractors share the object palette but never touch a hand,
so object class can only be inferred from contact.

Dataset layout on disk::

    root/images/<stem>.png     8-bit RGB
    root/labels/<stem>.png     8-bit single channel, values 0..5
    root/manifest.jsonl        {"stem": ..., "split": "train" | "val" | "test"}
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
from PIL import Image
from scipy import ndimage

from .datamodel import (
    ClassId,
    RasterError,
    read_image_png,
    validate_image,
    validate_labels,
    write_image_png,
    write_label_png,
)

log = logging.getLogger(__name__)

TOUCH_CONFIGS = ("left_only", "right_only", "both", "none", "mixed")
# resolved layouts a "mixed" scene is drawn from, with probabilities
MIXED_LAYOUTS = (("none", 0.1), ("left_only", 0.2), ("right_only", 0.2), ("both", 0.25), ("left_right", 0.25))

EGOHOS_MEAN = (106.011, 95.400, 87.429)
EGOHOS_STD = (64.357, 60.889, 61.419)

EIGHT = np.ones((3, 3), bool)


class SceneError(RuntimeError):
    pass


class SampleError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    rng_seed: int
    image_size: int = 128
    n_distractors: int = 2
    touch_config: str = "mixed"
    skin_jitter: float = 25.0
    color_jitter: float = 40.0
    noise_std: float = 6.0
    max_retries: int = 50

    def __post_init__(self):
        if self.touch_config not in TOUCH_CONFIGS:
            raise ValueError(f"touch_config must be one of {TOUCH_CONFIGS}, got {self.touch_config!r}")
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")


@dataclass
class SamplePair:
    image: np.ndarray  # uint8 (H, W, 3)
    labels: np.ndarray  # uint8 (H, W)
    metadata: dict = field(default_factory=dict)
    instances: np.ndarray | None = None  # uint8 (H, W); k = metadata["objects"][k - 1]


# --------------------------------------------------------------- rasterizing


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size]
    return yy.astype(np.float64), xx.astype(np.float64)


def _capsule(yy, xx, p0, p1, radius):
    """Pixels within ``radius`` of the segment p0-p1 (points as (y, x))."""
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    t = ((yy - y0) * dy + (xx - x0) * dx) / max(dy * dy + dx * dx, 1e-9)
    t = np.clip(t, 0.0, 1.0)
    return (yy - (y0 + t * dy)) ** 2 + (xx - (x0 + t * dx)) ** 2 <= radius**2


def _shape(yy, xx, kind, center, half_h, half_w, angle):
    cy, cx = center
    c, s = np.cos(angle), np.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    if kind == "ellipse":
        return (u / half_w) ** 2 + (v / half_h) ** 2 <= 1.0
    return (np.abs(u) <= half_w) & (np.abs(v) <= half_h)


def _touches(a, b):
    return bool((ndimage.binary_dilation(a, EIGHT) & b).any())


# ------------------------------------------------------------------- scenes


def _resolve_layout(spec: SceneSpec, rng) -> str:
    if spec.touch_config != "mixed":
        return spec.touch_config
    names, probs = zip(*MIXED_LAYOUTS)
    return str(rng.choice(names, p=probs))


def _make_hand(rng, size, side):
    s = size
    r_palm = rng.uniform(0.07, 0.095) * s
    palm_y = rng.uniform(0.5, 0.7) * s
    palm_x = rng.uniform(0.24, 0.38) * s
    base_x = rng.uniform(0.02, 0.2) * s
    if side == "right":
        palm_x, base_x = s - 1 - palm_x, s - 1 - base_x
    return {
        "side": side,
        "palm": (float(palm_y), float(palm_x)),
        "base": (float(s + 2 * r_palm), float(base_x)),
        "r_palm": float(r_palm),
        "r_arm": float(r_palm * rng.uniform(0.6, 0.8)),
    }


def _hand_mask(yy, xx, hand):
    arm = _capsule(yy, xx, hand["base"], hand["palm"], hand["r_arm"])
    palm = _capsule(yy, xx, hand["palm"], hand["palm"], hand["r_palm"])
    return arm | palm


def _random_object(rng, size):
    return {
        "shape": str(rng.choice(["rect", "ellipse"])),
        "half_h": float(rng.uniform(0.06, 0.13) * size),
        "half_w": float(rng.uniform(0.06, 0.15) * size),
        "angle": float(rng.uniform(0, np.pi)),
    }


def _place_touching(rng, size, hand):
    """Object overlapping the palm from above / inward."""
    obj = _random_object(rng, size)
    py, px = hand["palm"]
    inward = 1.0 if hand["side"] == "left" else -1.0
    theta = rng.uniform(-0.5, 1.3)  # angle away from straight up, towards the image centre
    dy, dx = -np.cos(theta), inward * np.sin(theta)
    reach = hand["r_palm"] + rng.uniform(0.2, 0.7) * min(obj["half_h"], obj["half_w"])
    obj["center"] = (float(py + dy * reach), float(px + dx * reach))
    return obj


def _place_between(rng, size, left, right):
    (ly, lx), (ry, rx) = left["palm"], right["palm"]
    dist = float(np.hypot(ry - ly, rx - lx))
    return {
        "shape": str(rng.choice(["rect", "ellipse"])),
        "center": (float((ly + ry) / 2 - rng.uniform(0.0, 0.05) * size), float((lx + rx) / 2)),
        "half_w": dist / 2 + rng.uniform(0.0, 0.5) * min(left["r_palm"], right["r_palm"]),
        "half_h": float(rng.uniform(0.06, 0.12) * size),
        "angle": float(np.arctan2(ry - ly, rx - lx)),
    }


def _place_free(rng, size):
    obj = _random_object(rng, size)
    obj["center"] = (float(rng.uniform(0.1, 0.9) * size), float(rng.uniform(0.1, 0.9) * size))
    return obj


def _obj_mask(yy, xx, obj):
    return _shape(yy, xx, obj["shape"], obj["center"], obj["half_h"], obj["half_w"], obj["angle"])


def _try_scene(spec: SceneSpec, rng, layout: str):
    size = spec.image_size
    yy, xx = _grid(size)
    left, right = _make_hand(rng, size, "left"), _make_hand(rng, size, "right")
    lmask, rmask = _hand_mask(yy, xx, left), _hand_mask(yy, xx, right)
    if _touches(ndimage.binary_dilation(lmask, EIGHT, iterations=2), rmask):
        return None
    hands = lmask | rmask

    wanted = {
        "none": [],
        "left_only": ["left"],
        "right_only": ["right"],
        "both": ["both"],
        "left_right": ["left", "right"],
    }[layout]
    objects, masks = [], []
    for kind in wanted:
        if kind == "both":
            obj = _place_between(rng, size, left, right)
        else:
            obj = _place_touching(rng, size, left if kind == "left" else right)
        obj["kind"] = kind
        objects.append(obj)
        masks.append(_obj_mask(yy, xx, obj) & ~hands)

    # interacting objects: visible part connected, correct contact set, kept apart from each other
    for obj, m in zip(objects, masks):
        if m.sum() < 25:
            return None
        if ndimage.label(m, EIGHT)[1] != 1:
            return None
        touches = (_touches(m, lmask), _touches(m, rmask))
        expected = {"left": (True, False), "right": (False, True), "both": (True, True)}[obj["kind"]]
        if touches != expected:
            return None
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            if _touches(ndimage.binary_dilation(masks[i], EIGHT, iterations=2), masks[j]):
                return None

    occupied = hands.copy()
    for m in masks:
        occupied |= m
    keep_out = ndimage.binary_dilation(occupied, EIGHT, iterations=3)
    for _ in range(spec.n_distractors):
        for _attempt in range(spec.max_retries):
            obj = _place_free(rng, size)
            m = _obj_mask(yy, xx, obj)
            if m.sum() >= 25 and not (m & keep_out).any():
                break
        else:
            return None
        obj["kind"] = "distractor"
        objects.append(obj)
        masks.append(m)
        keep_out |= ndimage.binary_dilation(m, EIGHT, iterations=3)
    return left, right, lmask, rmask, objects, masks


def _render(spec, rng, lmask, rmask, objects, masks):
    size = spec.image_size
    yy, xx = _grid(size)
    base = rng.uniform(50, 210, size=3)
    grad = rng.uniform(-30, 30, size=3)
    image = base[None, None, :] + grad[None, None, :] * (yy / size - 0.5)[..., None]
    labels = np.zeros((size, size), np.uint8)
    instances = np.zeros((size, size), np.uint8)
    cls_of = {"left": ClassId.LEFT_OBJECT, "right": ClassId.RIGHT_OBJECT, "both": ClassId.TWO_HAND_OBJECT}
    for k, (obj, m) in enumerate(zip(objects, masks), start=1):
        color = rng.uniform(20, 235, size=3)
        image[m] = color + rng.normal(0, spec.color_jitter / 8, size=3)
        instances[m] = k
        if obj["kind"] in cls_of:
            labels[m] = cls_of[obj["kind"]]
        obj["color"] = [float(c) for c in color]
    skin = np.array([205.0, 150.0, 120.0])
    for cls, m in ((ClassId.LEFT_HAND, lmask), (ClassId.RIGHT_HAND, rmask)):
        tone = skin + rng.uniform(-spec.skin_jitter, spec.skin_jitter, size=3)
        image[m] = tone
        labels[m] = cls
        instances[m] = 0
    image = image + rng.normal(0, spec.noise_std, size=image.shape)
    return np.clip(np.rint(image), 0, 255).astype(np.uint8), labels, instances


def generate_scene(spec: SceneSpec) -> SamplePair:
    """Deterministic labelled scene for ``spec``; raises SceneError if placement keeps failing."""
    rng = np.random.default_rng(spec.rng_seed)
    layout = _resolve_layout(spec, rng)
    for _ in range(spec.max_retries):
        placed = _try_scene(spec, rng, layout)
        if placed is not None:
            break
    else:
        raise SceneError(
            f"could not place a {layout!r} scene with {spec.n_distractors} distractors "
            f"after {spec.max_retries} attempts (seed={spec.rng_seed})"
        )
    left, right, lmask, rmask, objects, masks = placed
    image, labels, instances = _render(spec, rng, lmask, rmask, objects, masks)
    metadata = {
        "seed": spec.rng_seed,
        "touch_config": spec.touch_config,
        "layout": layout,
        "hands": [left, right],
        "objects": objects,
    }
    return SamplePair(image=image, labels=labels, metadata=metadata, instances=instances)


def generate_dataset(
    n: int, seed: int = 0, image_size: int = 128, touch_config: str = "mixed", max_distractors: int = 3
) -> list[SamplePair]:
    rng = np.random.default_rng(seed)
    scene_seeds = rng.integers(0, 2**31 - 1, size=n)
    counts = rng.integers(0, max_distractors + 1, size=n)
    return [
        generate_scene(SceneSpec(int(s), image_size, int(c), touch_config))
        for s, c in zip(scene_seeds, counts)
    ]


# -------------------------------------------------------------- preprocessing


def crop_box(height, width, crop, mode="center", rng=None):
    if crop > min(height, width):
        raise RasterError(f"crop {crop} larger than image {height}x{width}")
    if mode == "center":
        return (height - crop) // 2, (width - crop) // 2
    if mode == "random":
        rng = rng if rng is not None else np.random.default_rng()
        return int(rng.integers(0, height - crop + 1)), int(rng.integers(0, width - crop + 1))
    raise ValueError(f"crop mode must be 'center' or 'random', got {mode!r}")


def normalize(image, mean=EGOHOS_MEAN, std=EGOHOS_STD):
    image = np.asarray(image, np.float32)
    return (image - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)


def preprocess(image, crop: int, mean=EGOHOS_MEAN, std=EGOHOS_STD, mode="center", rng=None):
    """Crop to ``crop`` x ``crop`` then per-channel standardize. Returns float32 (H, W, 3)."""
    image = validate_image(image)
    top, left = crop_box(image.shape[0], image.shape[1], crop, mode, rng)
    return normalize(image[top : top + crop, left : left + crop], mean, std)


def crop_pair(image, labels, crop, mode="center", rng=None):
    top, left = crop_box(image.shape[0], image.shape[1], crop, mode, rng)
    sl = (slice(top, top + crop), slice(left, left + crop))
    return image[sl], labels[sl]


# ------------------------------------------------------------------ disk IO


def write_dataset(root: str | Path, samples: Mapping[str, list[SamplePair]]) -> list[str]:
    """Write ``{split: samples}`` under ``root``; returns the stems written."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    stems = []
    with open(root / "manifest.jsonl", "w") as fh:
        for split, items in samples.items():
            for i, sample in enumerate(items):
                stem = f"{split}_{i:05d}"
                write_image_png(root / "images" / f"{stem}.png", sample.image)
                write_label_png(root / "labels" / f"{stem}.png", sample.labels)
                fh.write(json.dumps({"stem": stem, "split": split}) + "\n")
                stems.append(stem)
    return stems


def read_manifest(root: str | Path) -> list[dict]:
    path = Path(root) / "manifest.jsonl"
    if not path.exists():
        return []
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _load_pair(root: Path, stem: str, remap: Mapping[int, int] | None) -> SamplePair:
    img_path, lbl_path = root / "images" / f"{stem}.png", root / "labels" / f"{stem}.png"
    if not img_path.exists() or not lbl_path.exists():
        raise SampleError(f"{stem}: missing {'image' if not img_path.exists() else 'label'} file")
    image = read_image_png(img_path)
    with Image.open(lbl_path) as im:
        raw = np.array(im)
    if raw.ndim != 2:
        raise SampleError(f"{lbl_path}: label PNG must be single channel")
    if remap is not None:
        out = np.full(raw.shape, 255, np.uint8)
        for src, dst in remap.items():
            out[raw == src] = dst
        raw = out
    try:
        labels = validate_labels(raw, str(lbl_path))
    except RasterError as exc:
        raise SampleError(str(exc)) from None
    if image.shape[:2] != labels.shape:
        raise SampleError(f"{stem}: image {image.shape[:2]} and label {labels.shape} sizes differ")
    return SamplePair(image=image, labels=labels, metadata={"stem": stem})


def load_egohos_dir(
    path: str | Path,
    split: str | None = None,
    remap: Mapping[int, int] | None = None,
    fail_fast: bool = False,
) -> Iterator[SamplePair]:
    """Yield validated samples from an ``images/`` + ``labels/`` directory.

    Stems come from ``manifest.jsonl`` when present (filtered by ``split``),
    otherwise from every file under ``images/`` and ``labels/``. ``remap``
    translates raw label values to class ids; unmapped values are rejected.
    Broken samples are logged and skipped unless ``fail_fast``.
    """
    root = Path(path)
    manifest = read_manifest(root)
    if manifest:
        stems = [m["stem"] for m in manifest if split is None or m.get("split") == split]
    else:
        found = {p.stem for sub in ("images", "labels") for p in (root / sub).glob("*.png")}
        stems = sorted(found)
    if not stems:
        log.warning("no samples found under %s (split=%s)", root, split)
        return
    for stem in stems:
        try:
            yield _load_pair(root, stem, remap)
        except SampleError as exc:
            if fail_fast:
                raise
            log.warning("skipping sample: %s", exc)
