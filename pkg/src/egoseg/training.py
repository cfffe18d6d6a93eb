"""Loss assembly, learning-rate schedule and the optimization loop."""
from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from .checkpoint import load_into, read_metadata, save_checkpoint
from .cods import decouple_targets
from .config import ConfigError, LossWeights, RunConfig, ScheduleConfig
from .model import EgoHOSegNet, build_model
from .synthdata import SamplePair, crop_pair, normalize

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: Path | None = None):
        super().__init__(message)
        self.last_good = last_good


# ------------------------------------------------------------------ schedule


def lr_at(iteration: int, sched: ScheduleConfig) -> float:
    """Linear warmup from 0 to peak, then linear decay to 0 at ``max_iters``."""
    if not 0 <= iteration <= sched.max_iters:
        raise ValueError(f"iteration {iteration} outside [0, {sched.max_iters}]")
    if iteration < sched.warmup_iters:
        return sched.peak_lr * (iteration / sched.warmup_iters)
    span = sched.max_iters - sched.warmup_iters
    if span == 0:
        return sched.peak_lr
    return sched.peak_lr * ((sched.max_iters - iteration) / span)


# ---------------------------------------------------------------------- loss


def object_target(labels: np.ndarray) -> np.ndarray:
    """4-way object target for the direct (non-decoupled) head: 0 none, 1 left, 2 right, 3 two-hand."""
    return np.where(labels >= 3, labels - 2, 0).astype(np.int64)


def build_targets(labels: np.ndarray, cb_radius: int = 1, cb_iterations: int = 3) -> dict[str, np.ndarray]:
    t = decouple_targets(labels, cb_radius, cb_iterations)
    return {
        "g_lo": t.g_lo_prime.astype(np.float32)[None],
        "g_ro": t.g_ro_prime.astype(np.float32)[None],
        "g_hand": t.g_hand.astype(np.int64),
        "g_cb": t.g_cb.astype(np.float32)[None],
        "g_obj": object_target(labels),
    }


def total_loss(
    preds: dict[str, torch.Tensor], targets: dict[str, torch.Tensor], w: LossWeights
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted sum of per-branch cross-entropies (mean over pixels per term).

    Decoupled models contribute ``lo`` and ``ro`` terms (sigmoid BCE against
    the folded targets); direct models contribute one 4-way ``obj`` term.
    """
    terms = {"hand": F.cross_entropy(preds["hand"], targets["g_hand"])}
    if "left_obj" in preds:
        terms["lo"] = F.binary_cross_entropy_with_logits(preds["left_obj"], targets["g_lo"])
        terms["ro"] = F.binary_cross_entropy_with_logits(preds["right_obj"], targets["g_ro"])
        obj = terms["lo"] + terms["ro"]
    else:
        terms["obj"] = F.cross_entropy(preds["objects"], targets["g_obj"])
        obj = terms["obj"]
    terms["cb"] = F.binary_cross_entropy_with_logits(preds["contact_boundary"], targets["g_cb"])
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise FloatingPointError(f"non-finite loss term {name!r}")
    total = w.alpha * obj + w.gamma * terms["hand"] + w.lam * terms["cb"]
    return total, terms


# ---------------------------------------------------------------------- data


@dataclass
class TensorData:
    images: torch.Tensor  # float32 (N, 3, H, W), normalized
    targets: dict[str, torch.Tensor]
    labels: np.ndarray  # uint8 (N, H, W)

    def __len__(self):
        return self.images.shape[0]

    def batch(self, idx) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        idx = torch.as_tensor(np.asarray(idx))
        return self.images[idx], {k: v[idx] for k, v in self.targets.items()}


def tensorize(samples: Sequence[SamplePair], cfg: RunConfig, mode: str = "center", rng=None) -> TensorData:
    d = cfg.data
    images, labels, targets = [], [], {}
    for s in samples:
        img, lbl = crop_pair(s.image, s.labels, d.crop, mode, rng)
        images.append(normalize(img, d.mean, d.std).transpose(2, 0, 1))
        labels.append(lbl)
        for k, v in build_targets(lbl, d.cb_radius, d.cb_iterations).items():
            targets.setdefault(k, []).append(v)
    return TensorData(
        images=torch.from_numpy(np.stack(images)).float(),
        targets={k: torch.from_numpy(np.stack(v)) for k, v in targets.items()},
        labels=np.stack(labels),
    )


# --------------------------------------------------------------------- state


@dataclass
class TrainState:
    model: EgoHOSegNet
    optimizer: torch.optim.Optimizer
    config: RunConfig
    iteration: int = 0
    best_val_miou: float = float("-inf")
    seed: int = 0
    log: list[dict] = field(default_factory=list)

    def save(self, path: str | Path) -> Path:
        meta = {
            "config": self.config.dump(),
            "iteration": self.iteration,
            "best_val_miou": self.best_val_miou,
            "seed": self.seed,
        }
        return save_checkpoint(path, self.model, self.optimizer, meta)

    @classmethod
    def load(cls, path: str | Path, restore_rng: bool = False) -> "TrainState":
        meta = read_metadata(path)
        cfg = RunConfig.from_dict(yaml.safe_load(meta["config"]))
        model = build_model(cfg.model)
        optimizer = make_optimizer(model, cfg.schedule)
        load_into(path, model, optimizer, restore_rng=restore_rng)
        model.eval()
        return cls(
            model=model,
            optimizer=optimizer,
            config=cfg,
            iteration=int(meta.get("iteration", 0)),
            best_val_miou=float(meta.get("best_val_miou", "-inf")),
            seed=int(meta.get("seed", 0)),
        )


def make_optimizer(model: torch.nn.Module, sched: ScheduleConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        model.parameters(), lr=sched.peak_lr, betas=tuple(sched.betas), weight_decay=sched.weight_decay
    )


def set_deterministic(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


# ---------------------------------------------------------------------- loop


def train(
    train_samples: Sequence[SamplePair],
    cfg: RunConfig,
    seed: int = 0,
    val_samples: Sequence[SamplePair] | None = None,
    out_dir: str | Path | None = None,
    train_data: TensorData | None = None,
    val_data: TensorData | None = None,
) -> TrainState:
    """Run the optimization loop; returns the final state (``state.log`` holds the metric records).

    With ``out_dir`` set, writes ``config.yaml``, ``metrics.jsonl``,
    ``best.safetensors`` (by validation mIoU) and ``last.safetensors``.
    Pre-tensorized ``train_data`` / ``val_data`` skip the conversion step.
    """
    from .evaluation import evaluate_model

    if train_data is None and not train_samples:
        raise ConfigError("training set is empty")
    cfg.validate()
    sched = cfg.schedule
    set_deterministic(seed, cfg.deterministic)
    order_rng = np.random.default_rng(seed)

    if train_data is None:
        # crops are drawn once up front; with crop == image size this is exact
        crop_rng = np.random.default_rng([seed, 1])
        train_data = tensorize(train_samples, cfg, cfg.data.train_crop_mode, crop_rng)
    if val_data is None and val_samples:
        val_data = tensorize(val_samples, cfg, cfg.data.eval_crop_mode)
    if len(train_data) == 0:
        raise ConfigError("training set is empty")

    model = build_model(cfg.model, seed=seed)
    optimizer = make_optimizer(model, sched)
    state = TrainState(model=model, optimizer=optimizer, config=cfg, seed=seed)

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.yaml")
        metrics_fh = open(out / "metrics.jsonl", "w")

    n = len(train_data)
    order = np.empty(0, np.int64)
    try:
        model.train()
        for it in range(1, sched.max_iters + 1):
            if len(order) < sched.batch_size:
                order = np.concatenate([order, order_rng.permutation(n)])
            idx, order = order[: sched.batch_size], order[sched.batch_size :]
            images, targets = train_data.batch(idx)
            lr = lr_at(it, sched)
            for group in optimizer.param_groups:
                group["lr"] = lr
            try:
                loss, terms = total_loss(model(images), targets, cfg.loss)
            except FloatingPointError as exc:
                last_good = state.save(out / "last_good.safetensors") if out is not None else None
                raise TrainingDiverged(f"iteration {it}: {exc}", last_good) from exc
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            state.iteration = it

            record = None
            if it % cfg.log_every == 0 or it == 1 or it == sched.max_iters:
                record = {"iter": it, "lr": lr, "loss": loss.item(), **{k: v.item() for k, v in terms.items()}}
            if val_data is not None and (it % cfg.eval_every == 0 or it == sched.max_iters):
                report = evaluate_model(model, val_data, cfg)
                model.train()
                record = record or {"iter": it, "lr": lr, "loss": loss.item()}
                record["val_miou"] = report.miou
                if report.miou > state.best_val_miou:
                    state.best_val_miou = report.miou
                    if out is not None:
                        state.save(out / "best.safetensors")
            if record is not None:
                state.log.append(record)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(record) + "\n")
                    metrics_fh.flush()
                if it % (cfg.log_every * 10) == 0:
                    log.info("iter %d lr %.2e loss %.4f", it, lr, record["loss"])
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    model.eval()
    if out is not None:
        state.save(out / "last.safetensors")
    return state
