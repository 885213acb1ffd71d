"""
Checkpoint container.

One JSON header line (format tag, ModelConfig, parameter manifest, optimizer
step counts, epoch, loss history) followed by little-endian float32 payload:
every parameter in manifest order, then, if an optimizer was saved, the first
and second Adam moments of every parameter in the same order.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import torch

from lmr.errors import FeatureWriteError, FormatError, ShapeError, TruncationError
from lmr.feature_io import PathLike
from lmr.model import LMR, ModelConfig

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "LMR-CKPT1"


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    params: Dict[str, np.ndarray]
    epoch: int = 0
    loss_history: List[Dict[str, float]] = field(default_factory=list)
    optimizer_steps: Optional[List[int]] = None
    exp_avg: Optional[Dict[str, np.ndarray]] = None
    exp_avg_sq: Optional[Dict[str, np.ndarray]] = None
    extra: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(
    path: PathLike,
    model: LMR,
    optimizer: Optional[torch.optim.Optimizer] = None,
    epoch: int = 0,
    loss_history: Optional[List[Dict[str, float]]] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> None:
    named = list(model.named_parameters())
    header = {
        "format": CHECKPOINT_FORMAT,
        "model": model.cfg.model_dump(),
        "params": [{"name": name, "shape": list(p.shape)} for name, p in named],
        "epoch": epoch,
        "loss_history": loss_history or [],
        "extra": extra or {},
        "optimizer": None,
    }
    chunks = [p.detach().cpu().numpy().astype("<f4").tobytes() for _, p in named]

    if optimizer is not None:
        steps, first, second = [], [], []
        for _, p in named:
            state = optimizer.state.get(p, {})
            if state:
                steps.append(int(state["step"]))
                first.append(state["exp_avg"].detach().cpu().numpy().astype("<f4").tobytes())
                second.append(state["exp_avg_sq"].detach().cpu().numpy().astype("<f4").tobytes())
            else:
                zeros = np.zeros(p.shape, dtype="<f4").tobytes()
                steps.append(0)
                first.append(zeros)
                second.append(zeros)
        header["optimizer"] = {"steps": steps}
        chunks.extend(first)
        chunks.extend(second)

    try:
        with open(path, "wb") as f:
            f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            for chunk in chunks:
                f.write(chunk)
    except OSError as e:
        raise FeatureWriteError(path, e) from e
    logger.debug(f"Saved checkpoint {path} at epoch {epoch}")


def load_checkpoint(path: PathLike) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()

    newline = raw.find(b"\n")
    if newline < 0:
        raise FormatError(f"{path}: missing checkpoint header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable checkpoint header ({e})") from e
    if not isinstance(header, dict) or header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")

    manifest = header["params"]
    sizes = [int(np.prod(entry["shape"], dtype=np.int64)) for entry in manifest]
    blocks = 3 if header.get("optimizer") else 1
    expected = 4 * sum(sizes) * blocks
    payload = raw[newline + 1 :]
    if len(payload) != expected:
        raise TruncationError(f"{path}: payload has {len(payload)} bytes, header declares {expected}")

    values = np.frombuffer(payload, dtype="<f4")
    offset = 0
    tensors = []
    for _ in range(blocks):
        block = {}
        for entry, size in zip(manifest, sizes):
            block[entry["name"]] = values[offset : offset + size].reshape(entry["shape"]).astype(np.float32)
            offset += size
        tensors.append(block)

    optimizer = header.get("optimizer")
    return Checkpoint(
        model_cfg=ModelConfig(**header["model"]),
        params=tensors[0],
        epoch=int(header.get("epoch", 0)),
        loss_history=header.get("loss_history", []),
        optimizer_steps=optimizer["steps"] if optimizer else None,
        exp_avg=tensors[1] if optimizer else None,
        exp_avg_sq=tensors[2] if optimizer else None,
        extra=header.get("extra", {}),
    )


def restore_model(ckpt: Checkpoint, model: LMR) -> None:
    """
    Copy checkpoint weights into model.

    Raises:
        ShapeError: a parameter is missing, unexpected or has another shape.
    """
    named = dict(model.named_parameters())
    for name in ckpt.params:
        if name not in named:
            raise ShapeError(f"checkpoint parameter {name} does not exist in the model")
    for name, p in named.items():
        if name not in ckpt.params:
            raise ShapeError(f"model parameter {name} is missing from the checkpoint")
        stored = ckpt.params[name]
        if tuple(stored.shape) != tuple(p.shape):
            raise ShapeError(f"parameter {name}: checkpoint shape {tuple(stored.shape)} != model shape {tuple(p.shape)}")
    with torch.no_grad():
        for name, p in named.items():
            p.copy_(torch.from_numpy(ckpt.params[name]).to(p.dtype))


def restore_optimizer(ckpt: Checkpoint, model: LMR, optimizer: torch.optim.Optimizer) -> None:
    if ckpt.optimizer_steps is None:
        return
    for (name, p), step in zip(model.named_parameters(), ckpt.optimizer_steps):
        if step == 0:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(ckpt.exp_avg[name].copy()).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(ckpt.exp_avg_sq[name].copy()).to(p.dtype),
        }
