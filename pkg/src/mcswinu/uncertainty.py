"""Monte Carlo dropout sampling, agreement voting and uncertainty export."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError
from .model import MCSwinU
from .train import sliding_window_predict
from .volumes import NUM_CLASSES, ByteGrid, LabelMap, Volume, write_volume


def stream_seed(seed: int, index: int) -> int:
    """Seed of the ``index``-th dropout stream: first 63 bits of ``SeedSequence([seed, index])``."""
    state = np.random.SeedSequence([int(seed), int(index)]).generate_state(1, dtype=np.uint64)[0]
    return int(state) & (2 ** 63 - 1)


@dataclass
class PredictionStack:
    labels: np.ndarray  # (T, D, H, W) uint8
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    probabilities: np.ndarray | None = None  # (T, 6, D, H, W)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 4 or self.labels.shape[0] < 1:
            raise ValidationError("a prediction stack needs shape (T, D, H, W) with T >= 1")
        if self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES:
            raise ValidationError("stack labels must lie in 0..5")
        self.labels = self.labels.astype(np.uint8)

    @property
    def samples(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class UncertaintyMap:
    agreement: np.ndarray  # (D, H, W) modal vote count
    uncertain: np.ndarray  # (D, H, W) bool
    consensus: LabelMap
    threshold: int
    samples: int


def mc_predict(model: MCSwinU, volume: Volume, samples: int = 10, seed: int = 0, patch_shape=None,
               overlap: float = 0.5, keep_probabilities: bool = False) -> PredictionStack:
    """Run ``samples`` sliding-window passes with dropout active, pass ``i`` using stream ``stream_seed(seed, i)``."""
    if samples < 1:
        raise ValidationError("samples must be >= 1")
    labels, probs = [], []
    for i in range(samples):
        gen = torch.Generator().manual_seed(stream_seed(seed, i))
        p = sliding_window_predict(model, volume, patch_shape, overlap, dropout=True, generator=gen)
        labels.append(p.argmax(0).astype(np.uint8))
        if keep_probabilities:
            probs.append(p)
    return PredictionStack(np.stack(labels), volume.spacing_mm, np.stack(probs) if keep_probabilities else None)


def vote(stack: PredictionStack, threshold: int = 5) -> UncertaintyMap:
    """Modal class per voxel (ties to the smallest index); uncertain where fewer than ``threshold`` samples agree."""
    t = stack.samples
    if not 1 <= threshold <= t:
        raise ValidationError(f"threshold {threshold} must lie in 1..{t}")
    counts = np.stack([(stack.labels == c).sum(axis=0) for c in range(NUM_CLASSES)])
    consensus = counts.argmax(axis=0).astype(np.uint8)
    agreement = counts.max(axis=0).astype(np.uint8)
    return UncertaintyMap(agreement, agreement < threshold, LabelMap(consensus, stack.spacing_mm), threshold, t)


def heatmap_slices(umap: UncertaintyMap) -> np.ndarray:
    """Per-voxel disagreement scaled to 0..255: 0 where all samples agree, 255 at the lowest possible agreement."""
    floor = math.ceil(umap.samples / NUM_CLASSES)
    span = umap.samples - floor
    if span == 0:
        return np.zeros(umap.agreement.shape, dtype=np.uint8)
    level = (umap.samples - umap.agreement.astype(np.float64)) / span
    return np.rint(255.0 * np.clip(level, 0.0, 1.0)).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValidationError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def export_uncertainty(umap: UncertaintyMap, path_prefix) -> dict[str, list[Path] | Path]:
    """Write agreement and mask grids (``.mvol``, uint8), the consensus labels and one PGM per axial slice."""
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    spacing = umap.consensus.spacing_mm
    out = {
        "agreement": prefix.with_name(prefix.name + "_agreement.mvol"),
        "uncertain": prefix.with_name(prefix.name + "_uncertain.mvol"),
        "consensus": prefix.with_name(prefix.name + "_consensus.mvol"),
    }
    write_volume(out["agreement"], ByteGrid(umap.agreement, spacing))
    write_volume(out["uncertain"], ByteGrid(umap.uncertain.astype(np.uint8), spacing))
    write_volume(out["consensus"], umap.consensus)
    heat = heatmap_slices(umap)
    digits = max(3, len(str(heat.shape[0] - 1)))
    slices = []
    for z, image in enumerate(heat):
        path = prefix.with_name(f"{prefix.name}_heatmap_z{z:0{digits}d}.pgm")
        write_pgm(path, image)
        slices.append(path)
    out["heatmaps"] = slices
    return out
