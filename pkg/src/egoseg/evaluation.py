"""End-to-end inference, scoring, ablation runs and overlay rendering."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .cods import FinalMasks, recombine
from .config import RunConfig
from .datamodel import RasterError, validate_image
from .metrics import ConfusionCounter, EvalReport
from .model import VARIANTS, EgoHOSegNet, build_model
from .synthdata import SamplePair, normalize
from .training import TensorData, TrainState, tensorize, train

log = logging.getLogger(__name__)

# RGB overlay colours
PALETTE = {
    "left_hand": (255, 0, 0),
    "right_hand": (0, 0, 255),
    "left_object": (255, 255, 0),
    "right_object": (0, 255, 0),
    "two_hand_object": (255, 0, 255),
    "contact_boundary": (255, 255, 255),
}


@torch.no_grad()
def predict(model: EgoHOSegNet, images: torch.Tensor, threshold: float = 0.5) -> list[FinalMasks]:
    """Binarize branch outputs and split object masks with the decoupling rule."""
    model.eval()
    out = model(images)
    # argmax returns the first maximal index, so ties go to the lowest class
    hand = out["hand"].argmax(1).to(torch.uint8).numpy()
    cb = (torch.sigmoid(out["contact_boundary"][:, 0]) > threshold).numpy()
    results = []
    if "left_obj" in out:
        lo = (torch.sigmoid(out["left_obj"][:, 0]) > threshold).numpy()
        ro = (torch.sigmoid(out["right_obj"][:, 0]) > threshold).numpy()
        for i in range(len(hand)):
            m_t, m_l, m_r = recombine(lo[i], ro[i])
            results.append(FinalMasks(hand[i], m_l, m_r, m_t, cb[i]))
    else:
        obj = out["objects"].argmax(1).numpy()
        for i in range(len(hand)):
            results.append(FinalMasks(hand[i], obj[i] == 1, obj[i] == 2, obj[i] == 3, cb[i]))
    return results


def evaluate_model(model: EgoHOSegNet, data: TensorData, cfg: RunConfig, batch_size: int = 16) -> EvalReport:
    counter = ConfusionCounter()
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        images, _ = data.batch(idx)
        for masks, gt in zip(predict(model, images, cfg.data.threshold), data.labels[idx]):
            counter.update(masks, gt)
    return counter.report(cfg.digest())


def evaluate_samples(model, samples: Sequence[SamplePair], cfg: RunConfig) -> EvalReport:
    return evaluate_model(model, tensorize(samples, cfg, cfg.data.eval_crop_mode), cfg)


def infer(image: np.ndarray, state: TrainState) -> FinalMasks:
    """Full pipeline on one uint8 (H, W, 3) image at its native resolution."""
    image = validate_image(image)
    cfg = state.config
    cfg.model.encoder.check_input(image.shape[0], image.shape[1])
    x = torch.from_numpy(normalize(image, cfg.data.mean, cfg.data.std).transpose(2, 0, 1).copy())
    return predict(state.model, x[None], cfg.data.threshold)[0]


@torch.no_grad()
def attention_maps(state: TrainState, image: np.ndarray) -> dict[str, np.ndarray]:
    """HOFE attention matrices (HW_hand, HW_obj) per enhancer for one image."""
    model = state.model
    if not model.cfg.use_hofe:
        return {}
    cfg = state.config
    x = torch.from_numpy(normalize(validate_image(image), cfg.data.mean, cfg.data.std).transpose(2, 0, 1).copy())
    feats = {name: branch(model.encode(x[None])) for name, branch in model.decoder.items()}
    keys = {"left": "left_obj", "right": "right_obj", "objects": "objects"}
    return {
        name: hofe.attention_map(feats["hand"], feats[keys[name]])[0].numpy()
        for name, hofe in model.hofe.items()
    }


def attention_tiles(attn: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Each row (one hand position) reshaped to the object grid, tiled over the hand grid."""
    h, w = grid
    tiles = attn.reshape(h, w, h, w).transpose(0, 2, 1, 3).reshape(h * h, w * w)
    peak = tiles.max()
    return (255 * tiles / peak).astype(np.uint8) if peak > 0 else np.zeros_like(tiles, np.uint8)


def render_overlay(image: np.ndarray, masks: FinalMasks, alpha: float = 0.5) -> np.ndarray:
    image = validate_image(image)
    layers = [
        ("left_object", masks.m_o_l),
        ("right_object", masks.m_o_r),
        ("two_hand_object", masks.m_o_t),
        ("left_hand", masks.m_h == 1),
        ("right_hand", masks.m_h == 2),
        ("contact_boundary", masks.m_cb),
    ]
    out = image.astype(np.float64)
    for name, m in layers:
        m = np.asarray(m, bool)
        if m.shape != image.shape[:2]:
            raise RasterError(f"{name} mask {m.shape} does not match image {image.shape[:2]}")
        out[m] = (1 - alpha) * out[m] + alpha * np.asarray(PALETTE[name], np.float64)
    return np.rint(out).astype(np.uint8)


def visualize(image: np.ndarray, masks: FinalMasks, out: str | Path, alpha: float = 0.5) -> Path:
    from PIL import Image

    out = Path(out)
    if not out.parent.exists():
        raise OSError(f"cannot write overlay: directory {out.parent} does not exist")
    Image.fromarray(render_overlay(image, masks, alpha)).save(out)
    return out


def ablate(
    train_samples: Sequence[SamplePair],
    test_samples: Sequence[SamplePair],
    cfg: RunConfig,
    variants: Sequence[str] = tuple(VARIANTS),
    seed: int = 0,
    out_dir: str | Path | None = None,
) -> list[tuple[str, EvalReport]]:
    """Train every variant with the same data, order and budget; score each on ``test_samples``."""
    train_data = tensorize(train_samples, cfg, cfg.data.train_crop_mode, np.random.default_rng([seed, 1]))
    test_data = tensorize(test_samples, cfg, cfg.data.eval_crop_mode)
    results = []
    for variant in variants:
        vcfg = RunConfig.from_dict(cfg.to_dict())
        vcfg.model.use_cods, vcfg.model.use_hofe = VARIANTS[variant]
        sub = Path(out_dir) / variant.strip("+").replace("+", "_") if out_dir is not None else None
        state = train([], vcfg, seed=seed, out_dir=sub, train_data=train_data)
        report = evaluate_model(state.model, test_data, vcfg)
        report.extra["variant"] = variant
        report.extra["seed"] = seed
        log.info("variant %s seed %d: mIoU %.4f", variant, seed, report.miou)
        results.append((variant, report))
    return results


def untrained_report(test_samples: Sequence[SamplePair], cfg: RunConfig, seed: int = 0) -> EvalReport:
    model = build_model(cfg.model, seed=seed)
    return evaluate_samples(model, test_samples, cfg)


def ablation_table(results: list[tuple[str, EvalReport]]) -> str:
    names = ["left_hand", "right_hand", "left_object", "right_object", "two_hand_object"]
    head = f"{'variant':<14}" + "".join(f"{n[:12]:>14}" for n in names) + f"{'mIoU':>8}"
    lines = [head]
    for variant, rep in results:
        cells = []
        for c in rep.classes:
            cells.append(f"{'n/a':>14}" if not c.defined else f"{100 * c.iou:14.2f}")
        lines.append(f"{variant:<14}" + "".join(cells) + f"{100 * rep.miou:8.2f}")
    return "\n".join(lines)

