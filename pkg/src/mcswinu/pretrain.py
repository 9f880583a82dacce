"""Self-supervised encoder pre-training with rotation, inpainting and contrastive pretext tasks.

Each sub-volume yields two views. A view is rotated by ``k * 90`` degrees about a
random axis and then has random blocks cut out. The encoder learns to predict
``k``, to fill the cut-out voxels back in, and to map the two views of one
sub-volume close together relative to the other views in the batch.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericError, ValidationError
from .model import MCSwinU, ModelConfig, init_model, reset_parameters
from .volumes import Volume

log = logging.getLogger(__name__)

# rotation about axis a turns the plane spanned by the two other axes
ROTATION_PLANES = {0: (1, 2), 1: (0, 2), 2: (0, 1)}


@dataclass
class PretrainConfig:
    iterations: int = 300
    batch_size: int = 4
    sub_shape: tuple[int, int, int] = (32, 32, 32)
    cutout_fraction: float = 0.25
    cutout_fill: float = 0.0
    temperature: float = 0.1
    lambda_rot: float = 1.0
    lambda_inpaint: float = 1.0
    lambda_contrast: float = 1.0
    projection_dim: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    warmup: int = 20
    dropout: bool = False
    seed: int = 0

    def __post_init__(self):
        self.sub_shape = tuple(int(s) for s in self.sub_shape)
        if len(set(self.sub_shape)) != 1:
            raise ValidationError("sub_shape must be cubic so 90-degree rotations keep its shape")
        if not 0.1 <= self.cutout_fraction <= 0.5:
            raise ValidationError("cutout_fraction must lie in [0.1, 0.5]")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValidationError("iterations and batch_size must be >= 1")
        if self.temperature <= 0 or self.learning_rate <= 0:
            raise ValidationError("temperature and learning_rate must be positive")
        if min(self.lambda_rot, self.lambda_inpaint, self.lambda_contrast) < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.lambda_contrast > 0 and self.batch_size < 2:
            raise ValidationError("contrastive loss needs batch_size >= 2 to have negatives")


@dataclass
class PretextBatch:
    originals: np.ndarray    # (B, s, s, s) crops before any augmentation
    views: np.ndarray        # (2B, s, s, s) rotated + cut out
    targets: np.ndarray      # (2B, s, s, s) rotated, not cut out
    rotations: np.ndarray    # (2B,) k in 0..3
    axes: np.ndarray         # (2B,) rotation axis
    masks: np.ndarray        # (2B, s, s, s) bool, True where cut out
    provenance: np.ndarray   # (2B,) index of the source crop


def rotate(x: np.ndarray, k: int, axis: int) -> np.ndarray:
    return np.rot90(x, k, axes=ROTATION_PLANES[int(axis)])


def cutout_mask(shape, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Union of random boxes (sides in ``[s/8, s/4]``) grown until ``fraction`` of voxels is covered."""
    mask = np.zeros(shape, dtype=bool)
    target = fraction * mask.size
    lo = [max(1, s // 8) for s in shape]
    hi = [max(lo_i, s // 4) for lo_i, s in zip(lo, shape)]
    while mask.sum() < target:
        size = [int(rng.integers(a, b + 1)) for a, b in zip(lo, hi)]
        corner = [int(rng.integers(0, s - z + 1)) for s, z in zip(shape, size)]
        mask[tuple(slice(c, c + z) for c, z in zip(corner, size))] = True
    return mask


def make_pretext_batch(volumes: Sequence[Volume | np.ndarray], config: PretrainConfig, seed: int) -> PretextBatch:
    if not volumes:
        raise ValidationError("need at least one volume")
    arrays = [v.data if isinstance(v, Volume) else np.asarray(v, dtype=np.float32) for v in volumes]
    sub = config.sub_shape
    if any(any(s > d for s, d in zip(sub, a.shape)) for a in arrays):
        raise ValidationError(f"sub-volume {sub} is larger than a source volume")
    rng = np.random.default_rng(seed)
    originals = []
    for _ in range(config.batch_size):
        src = arrays[int(rng.integers(len(arrays)))]
        corner = [int(rng.integers(0, d - s + 1)) for d, s in zip(src.shape, sub)]
        originals.append(src[tuple(slice(c, c + s) for c, s in zip(corner, sub))].copy())
    views, targets, rots, axes, masks, prov = [], [], [], [], [], []
    for _view in range(2):
        for b, crop in enumerate(originals):
            axis, k = int(rng.integers(3)), int(rng.integers(4))
            turned = np.ascontiguousarray(rotate(crop, k, axis))
            mask = cutout_mask(turned.shape, config.cutout_fraction, rng)
            view = turned.copy()
            view[mask] = config.cutout_fill
            views.append(view)
            targets.append(turned)
            rots.append(k)
            axes.append(axis)
            masks.append(mask)
            prov.append(b)
    return PretextBatch(np.stack(originals), np.stack(views), np.stack(targets), np.array(rots),
                        np.array(axes), np.stack(masks), np.array(prov))


class PretrainHeads(nn.Module):
    """Rotation classifier, projection head and a light reconstruction decoder over encoder features."""

    def __init__(self, config: ModelConfig, projection_dim: int = 64):
        super().__init__()
        dims = config.stage_dims
        bottleneck = dims[-1]
        self.rotation = nn.Linear(bottleneck, 4)
        self.projection = nn.Sequential(nn.Linear(bottleneck, bottleneck), nn.GELU(),
                                        nn.Linear(bottleneck, projection_dim))
        self.ups = nn.ModuleList([nn.ConvTranspose3d(dims[i], dims[i - 1], 2, stride=2)
                                  for i in range(len(dims) - 1, 0, -1)])
        self.final = nn.ConvTranspose3d(dims[0], dims[0], config.patch_size, stride=config.patch_size)
        self.out = nn.Conv3d(dims[0], 1, kernel_size=3, padding=1)

    def reconstruct(self, features):
        h = features[-1]
        for up, skip in zip(self.ups, reversed(features[:-1])):
            h = up(h) + skip
        return self.out(F.gelu(self.final(h)))[:, 0]

    def forward(self, features):
        pooled = features[-1].mean(dim=(2, 3, 4))
        return self.rotation(pooled), self.projection(pooled), self.reconstruct(features)


def rotation_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, targets.long())


def inpainting_loss(recon: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over cut-out voxels only."""
    mask = mask.to(recon.dtype)
    return ((recon - target).abs() * mask).sum() / mask.sum().clamp_min(1.0)


def info_nce(embeddings: torch.Tensor, provenance, temperature: float = 0.1) -> torch.Tensor:
    """NT-Xent: each view's positive is the other view with the same provenance; all other views are negatives."""
    prov = torch.as_tensor(np.asarray(provenance))
    n = embeddings.shape[0]
    if n < 3:
        raise ValidationError("contrastive loss needs at least two source sub-volumes")
    z = F.normalize(embeddings, dim=1)
    sim = z @ z.T / temperature
    eye = torch.eye(n, dtype=torch.bool)
    sim = sim.masked_fill(eye, -math.inf)
    positive = (prov[:, None] == prov[None, :]) & ~eye
    if not bool(positive.any(dim=1).all()):
        raise ValidationError("every view needs a positive partner")
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    return -(log_prob.masked_fill(~positive, 0.0).sum(1) / positive.sum(1)).mean()


def pretext_losses(batch: PretextBatch, model: MCSwinU, heads: PretrainHeads, config: PretrainConfig | None = None,
                   generator: torch.Generator | None = None) -> dict[str, torch.Tensor]:
    config = config or PretrainConfig(batch_size=max(2, len(batch.originals)))
    if config.lambda_contrast > 0 and len(batch.originals) < 2:
        raise ValidationError("contrastive loss needs at least two sub-volumes per batch")
    dtype = next(model.parameters()).dtype
    views = torch.from_numpy(batch.views).to(dtype)[:, None]
    features = model.encoder(views, dropout=config.dropout, generator=generator)
    rot_logits, embeddings, recon = heads(features)
    l_rot = rotation_loss(rot_logits, torch.from_numpy(batch.rotations))
    l_inp = inpainting_loss(recon, torch.from_numpy(batch.targets).to(dtype), torch.from_numpy(batch.masks))
    if config.lambda_contrast > 0:
        l_con = info_nce(embeddings, batch.provenance, config.temperature)
    else:
        l_con = embeddings.new_zeros(())
    total = config.lambda_rot * l_rot + config.lambda_inpaint * l_inp + config.lambda_contrast * l_con
    return {"rot": l_rot, "inpaint": l_inp, "contrast": l_con, "total": total,
            "rot_logits": rot_logits, "embeddings": embeddings, "reconstruction": recon}


@dataclass
class PretrainResult:
    model: MCSwinU
    heads: PretrainHeads
    history: list[dict] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "L_rot", "L_inpaint", "L_contrast", "L_total"])
            for row in self.history:
                writer.writerow([row["iteration"], repr(row["rot"]), repr(row["inpaint"]),
                                 repr(row["contrast"]), repr(row["total"])])


def pretrain(volumes: Sequence[Volume], model_config: ModelConfig, config: PretrainConfig,
             seed: int | None = None, progress=None) -> PretrainResult:
    """Optimize encoder + pretext heads jointly; the returned model carries ``metadata['pretrained'] = True``."""
    if len(volumes) < 2:
        raise ValidationError("pre-training needs at least two unlabeled volumes")
    if any(s % model_config.divisor for s in config.sub_shape):
        raise ValidationError(f"sub_shape {config.sub_shape} must be a multiple of {model_config.divisor}")
    seed = config.seed if seed is None else int(seed)
    torch.manual_seed(seed)
    model = init_model(model_config, seed)
    heads = PretrainHeads(model_config, config.projection_dim)
    reset_parameters(heads, torch.Generator().manual_seed(seed + 1))
    params = list(model.encoder.parameters()) + list(heads.parameters())
    opt = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    warm = max(1, config.warmup)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda it: min(1.0, (it + 1) / warm))
    generator = torch.Generator().manual_seed(seed)
    seeds = np.random.SeedSequence(seed).generate_state(config.iterations)
    result = PretrainResult(model, heads)
    last_good = copy.deepcopy(model.state_dict())
    model.train()
    for it in range(1, config.iterations + 1):
        batch = make_pretext_batch(volumes, config, int(seeds[it - 1]))
        losses = pretext_losses(batch, model, heads, config, generator)
        if not torch.isfinite(losses["total"]):
            model.load_state_dict(last_good)
            raise NumericError(f"non-finite pretext loss at iteration {it}", state=model)
        opt.zero_grad(set_to_none=True)
        losses["total"].backward()
        opt.step()
        sched.step()
        last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
        row = {"iteration": it, **{k: losses[k].item() for k in ("rot", "inpaint", "contrast", "total")}}
        result.history.append(row)
        if progress is not None and (it == 1 or it % 50 == 0 or it == config.iterations):
            progress(f"iter {it:6d}  rot {row['rot']:.4f}  inpaint {row['inpaint']:.4f}  "
                     f"contrast {row['contrast']:.4f}  total {row['total']:.4f}")
    model.iteration = config.iterations
    model.metadata.update({"pretrained": True, "pretrain_iterations": config.iterations, "pretrain_seed": seed})
    model.eval()
    return result
