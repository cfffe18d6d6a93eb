"""Flat key -> tensor checkpoint container.

Checkpoints are safetensors files: a JSON header with dtype and shape for
every tensor, followed by raw little-endian data. Keys are namespaced::

    encoder.stage{i}.*         encoder stage i (stage0 holds the patch embedding)
    bottleneck.*
    decoder.{branch}.stage{i}.*, decoder.{branch}.expand0.*
    head.{branch}.*
    hofe.{left|right|objects}.*
    optim.{param key}.{exp_avg|exp_avg_sq|step}   (training checkpoints only)
    rng.torch                                     (training checkpoints only)

String metadata carries the run config (YAML) and training counters.
"""
from __future__ import annotations

import re
from pathlib import Path

import torch
from safetensors.torch import load_file, safe_open, save_file

_STAGE = re.compile(r"\.stage\.(\d+)\.")
_FLAT_STAGE = re.compile(r"\.stage(\d+)\.")


def to_flat_key(module_key: str) -> str:
    return _STAGE.sub(r".stage\1.", module_key)


def to_module_key(flat_key: str) -> str:
    return _FLAT_STAGE.sub(r".stage.\1.", flat_key)


def model_tensors(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {to_flat_key(k): v.detach().contiguous() for k, v in model.state_dict().items()}


def optimizer_tensors(model: torch.nn.Module, optimizer: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    names = {id(p): to_flat_key(n) for n, p in model.named_parameters()}
    out = {}
    for p, state in optimizer.state.items():
        for slot, value in state.items():
            if torch.is_tensor(value):
                out[f"optim.{names[id(p)]}.{slot}"] = value.detach().contiguous()
    return out


def save_checkpoint(
    path: str | Path,
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer | None = None,
    metadata: dict[str, str] | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = model_tensors(model)
    if optimizer is not None:
        tensors.update(optimizer_tensors(model, optimizer))
        tensors["rng.torch"] = torch.get_rng_state()
    meta = {k: str(v) for k, v in (metadata or {}).items()}
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_file(tensors, str(tmp), metadata=meta)
    tmp.replace(path)
    return path


def read_metadata(path: str | Path) -> dict[str, str]:
    with safe_open(str(path), framework="pt") as fh:
        return dict(fh.metadata() or {})


def load_into(
    path: str | Path,
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer | None = None,
    restore_rng: bool = False,
) -> dict[str, str]:
    """Load weights (and optionally optimizer moments / RNG) in place; returns metadata."""
    tensors = load_file(str(path))
    weights = {to_module_key(k): v for k, v in tensors.items() if not k.startswith(("optim.", "rng."))}
    model.load_state_dict(weights, strict=True)
    if optimizer is not None:
        params = dict(model.named_parameters())
        for key, value in tensors.items():
            if not key.startswith("optim."):
                continue
            name, slot = key[len("optim."):].rsplit(".", 1)
            optimizer.state[params[to_module_key(name)]][slot] = value.clone()
    if restore_rng and "rng.torch" in tensors:
        torch.set_rng_state(tensors["rng.torch"])
    return read_metadata(path)
