"""Supervised fine-tuning, validation cadence, best-checkpoint selection and sliding-window inference."""

from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CheckpointError, NumericError, ValidationError
from .model import MCSwinU, ModelConfig, init_model, load_checkpoint
from .volumes import NUM_CLASSES, AugmentConfig, LabelMap, Volume, augment, check_pair, extract_patch

log = logging.getLogger(__name__)

DICE_EPS = 1e-5


@dataclass
class TrainConfig:
    iterations: int = 2000
    validate_every: int = 100
    batch_size: int = 2
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    warmup: int = 100
    patch_shape: tuple[int, int, int] = (32, 32, 32)
    fg_bias: float = 0.5
    dice_weight: float = 1.0
    ce_weight: float = 1.0
    overlap: float = 0.5
    dropout: bool = True
    seed: int = 0
    init: str = "random"

    def __post_init__(self):
        self.patch_shape = tuple(int(p) for p in self.patch_shape)
        if not self.iterations >= self.validate_every >= 1:
            raise ValidationError(
                f"need iterations >= validate_every >= 1, got {self.iterations} and {self.validate_every}"
            )
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.batch_size < 1 or self.warmup < 0:
            raise ValidationError("batch_size must be >= 1 and warmup >= 0")
        if not 0.0 <= self.fg_bias <= 1.0:
            raise ValidationError("fg_bias must lie in [0, 1]")
        if self.dice_weight < 0 or self.ce_weight < 0 or self.dice_weight + self.ce_weight == 0:
            raise ValidationError("loss weights must be non-negative and not both zero")
        if not 0.0 <= self.overlap <= 0.9:
            raise ValidationError("overlap must lie in [0, 0.9]")


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    validations: list[tuple[int, float]] = field(default_factory=list)
    best_iteration: int = 0
    best_dice: float = -math.inf

    def to_csv(self, path) -> None:
        val = dict(self.validations)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "loss", "val_dice"])
            for i, loss in enumerate(self.losses, start=1):
                writer.writerow([i, repr(loss), repr(val[i]) if i in val else ""])


# --------------------------------------------------------------------------- #
# Loss
# --------------------------------------------------------------------------- #

def soft_dice_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """``1 - mean_c (2 sum p*g + eps) / (sum p + sum g + eps)`` with sums over batch and voxels."""
    onehot = F.one_hot(target.long(), NUM_CLASSES).movedim(-1, 1).to(probs.dtype)
    dims = (0, *range(2, probs.ndim))
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    return 1.0 - ((2.0 * inter + DICE_EPS) / (denom + DICE_EPS)).mean()


def seg_loss(logits: torch.Tensor, labels: torch.Tensor, dice_weight: float = 1.0, ce_weight: float = 1.0,
             head: str = "sigmoid") -> torch.Tensor:
    """Weighted soft-Dice + cross-entropy. ``logits``: (B, 6, ...); ``labels``: (B, ...)."""
    if logits.shape[1] != NUM_CLASSES or logits.shape[:1] + logits.shape[2:] != labels.shape:
        raise ValidationError(f"logits {tuple(logits.shape)} do not match labels {tuple(labels.shape)}")
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits passed to seg_loss")
    labels = labels.long()
    if labels.min() < 0 or labels.max() >= NUM_CLASSES:
        raise ValidationError("labels must lie in 0..5")
    probs = logits.softmax(1) if head == "softmax" else torch.sigmoid(logits)
    loss = logits.new_zeros(())
    if dice_weight:
        loss = loss + dice_weight * soft_dice_loss(probs, labels)
    if ce_weight:
        loss = loss + ce_weight * F.cross_entropy(logits, labels)
    return loss


# --------------------------------------------------------------------------- #
# Sliding window
# --------------------------------------------------------------------------- #

def tile_starts(size: int, patch: int, overlap: float) -> list[int]:
    stride = max(1, int(patch * (1.0 - overlap)))
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def _pad_amounts(shape, patch_shape):
    return [(max(0, p - s) // 2, max(0, p - s) - max(0, p - s) // 2) for s, p in zip(shape, patch_shape)]


def tile_grid(shape, patch_shape, overlap: float) -> list[tuple[int, int, int]]:
    """Tile corners (in padded coordinates) visited by :func:`sliding_window_predict`."""
    padded = [s + a + b for s, (a, b) in zip(shape, _pad_amounts(shape, patch_shape))]
    axes = [tile_starts(s, p, overlap) for s, p in zip(padded, patch_shape)]
    return [tuple(c) for c in np.array(np.meshgrid(*axes, indexing="ij")).reshape(3, -1).T]


def coverage_counts(shape, patch_shape, overlap: float) -> np.ndarray:
    pads = _pad_amounts(shape, patch_shape)
    padded = [s + a + b for s, (a, b) in zip(shape, pads)]
    counts = np.zeros(padded, dtype=np.int64)
    for corner in tile_grid(shape, patch_shape, overlap):
        counts[tuple(slice(c, c + p) for c, p in zip(corner, patch_shape))] += 1
    return counts[tuple(slice(a, a + s) for (a, _), s in zip(pads, shape))]


@torch.no_grad()
def sliding_window_predict(model: MCSwinU, volume: Volume | np.ndarray, patch_shape=None, overlap: float = 0.5,
                           dropout: bool = False, generator: torch.Generator | None = None,
                           tile_batch: int = 4) -> np.ndarray:
    """Average head probabilities over overlapping tiles; returns float32 ``(6, D, H, W)``."""
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float32)
    patch_shape = tuple(model.config.input_shape if patch_shape is None else patch_shape)
    if not 0.0 <= overlap <= 0.9:
        raise ValidationError("overlap must lie in [0, 0.9]")
    model.config.check_shape(patch_shape)
    pads = _pad_amounts(data.shape, patch_shape)
    padded = np.pad(data, pads, mode="constant", constant_values=float(data.min()))
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(padded)).to(dtype)
    acc = torch.zeros((NUM_CLASSES, *padded.shape), dtype=torch.float64)
    hits = torch.zeros(padded.shape, dtype=torch.float64)
    corners = tile_grid(data.shape, patch_shape, overlap)
    was_training = model.training
    model.eval()
    try:
        for i in range(0, len(corners), tile_batch):
            chunk = corners[i:i + tile_batch]
            slices = [tuple(slice(c, c + p) for c, p in zip(corner, patch_shape)) for corner in chunk]
            batch = torch.stack([x[s] for s in slices])[:, None]
            probs = model.probabilities(model(batch, dropout=dropout, generator=generator)).to(torch.float64)
            for s, p in zip(slices, probs):
                acc[(slice(None), *s)] += p
                hits[s] += 1
    finally:
        model.train(was_training)
    out = acc / hits
    crop = tuple(slice(a, a + s) for (a, _), s in zip(pads, data.shape))
    return out[(slice(None), *crop)].numpy().astype(np.float32)


def predict_labels(model: MCSwinU, volume: Volume, overlap: float = 0.5, **kwargs) -> LabelMap:
    probs = sliding_window_predict(model, volume, overlap=overlap, **kwargs)
    return LabelMap(probs.argmax(0).astype(np.uint8), volume.spacing_mm)


def mean_foreground_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    from .metrics import dice_masks

    return float(np.mean([dice_masks(pred == c, gt == c) for c in range(1, NUM_CLASSES)]))


def validate(model: MCSwinU, cases: Sequence[tuple[Volume, LabelMap]], overlap: float = 0.5) -> float:
    scores = [mean_foreground_dice(predict_labels(model, v, overlap).data, lab.data) for v, lab in cases]
    return float(np.mean(scores))


# --------------------------------------------------------------------------- #
# Fine-tuning
# --------------------------------------------------------------------------- #

def lr_factor(iteration: int, total: int, warmup: int) -> float:
    """Linear warm-up to 1, then cosine decay to 0 at ``total``."""
    if warmup and iteration < warmup:
        return (iteration + 1) / warmup
    span = max(1, total - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * min(1.0, (iteration - warmup) / span)))


def load_pretrained_encoder(model: MCSwinU, path) -> None:
    """Copy every ``encoder.*`` tensor from a checkpoint; the decoder and head keep their initialization."""
    source = load_checkpoint(path)
    target = model.state_dict()
    src = {k: v for k, v in source.state_dict().items() if k.startswith("encoder.")}
    mine = {k for k in target if k.startswith("encoder.")}
    if set(src) != mine:
        missing = sorted(mine ^ set(src))[:3]
        raise CheckpointError(f"{path}: encoder parameters do not match ({missing} ...)")
    for name, value in src.items():
        if value.shape != target[name].shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
    model.load_state_dict({**target, **src})
    model.metadata["init"] = "pretrained"
    model.metadata["pretrained_from"] = Path(path).name
    model.metadata["pretrained_sha256"] = hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _sample_batch(cases, config: TrainConfig, augment_config, rng):
    images, labels = [], []
    for _ in range(config.batch_size):
        vol, lab = cases[int(rng.integers(len(cases)))]
        if augment_config is not None:
            vol, lab = augment(vol, lab, augment_config, int(rng.integers(2 ** 31)))
        pv, pl = extract_patch(vol, lab, config.patch_shape, 0, config.fg_bias, rng=rng)
        images.append(pv.data)
        labels.append(pl.data)
    return torch.from_numpy(np.stack(images))[:, None], torch.from_numpy(np.stack(labels)).long()


def finetune(train_cases: Sequence[tuple[Volume, LabelMap]], val_cases: Sequence[tuple[Volume, LabelMap]],
             model_config: ModelConfig, config: TrainConfig, augment_config: AugmentConfig | None = None,
             progress: Callable[[str], None] | None = None) -> tuple[MCSwinU, TrainLog]:
    """Train for ``config.iterations`` steps and return the best-validating model and its log."""
    if not train_cases or not val_cases:
        raise ValidationError("train and validation sets must be non-empty")
    for vol, lab in list(train_cases) + list(val_cases):
        check_pair(vol, lab)
    torch.manual_seed(config.seed)
    model = init_model(model_config, config.seed)
    model.metadata["init"] = "random"
    if config.init != "random":
        load_pretrained_encoder(model, config.init)
    rng = np.random.default_rng(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate, betas=config.betas,
                            weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda it: lr_factor(it, config.iterations, config.warmup))
    history = TrainLog()
    best_state = copy.deepcopy(model.state_dict())
    model.train()
    for it in range(1, config.iterations + 1):
        images, labels = _sample_batch(train_cases, config, augment_config, rng)
        logits = model(images, dropout=config.dropout, generator=generator)
        loss = seg_loss(logits, labels, config.dice_weight, config.ce_weight, model_config.head)
        if not torch.isfinite(loss):
            model.load_state_dict(best_state)
            raise NumericError(f"non-finite training loss at iteration {it}", state=model)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        model.iteration = it
        history.losses.append(loss.item())
        if it % config.validate_every == 0:
            score = validate(model, val_cases, config.overlap)
            history.validations.append((it, score))
            if score > history.best_dice:
                history.best_dice, history.best_iteration = score, it
                best_state = copy.deepcopy(model.state_dict())
            message = f"iter {it:6d}  loss {history.losses[-1]:.4f}  val_dice {score:.4f}  best {history.best_dice:.4f}"
            log.info(message)
            if progress is not None:
                progress(message)
    model.load_state_dict(best_state)
    model.iteration = history.best_iteration
    model.metadata["best_iteration"] = history.best_iteration
    model.metadata["best_val_dice"] = history.best_dice
    model.eval()
    return model, history
