"""3D Swin-transformer U-Net with Monte Carlo dropout.

The encoder embeds non-overlapping voxel patches into tokens and runs a stack of
Swin stages (alternating regular and shifted window attention, patch merging in
between). A convolutional decoder upsamples the stage outputs back to voxel
resolution through skip connections and a 1x1x1 head emits one logit per class.

Dropout layers draw their masks from an explicit ``torch.Generator`` so that
repeated stochastic passes are reproducible.
"""

from __future__ import annotations

import itertools
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CheckpointError, NumericError, ValidationError

MASK_VALUE = -1e4


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 6
    patch_size: int = 2
    embed_dim: int = 12
    depths: tuple[int, ...] = (2, 2, 2, 2)
    num_heads: tuple[int, ...] = (3, 6, 12, 24)
    window_size: int = 4
    mlp_ratio: float = 4.0
    dropout_rate: float = 0.5
    input_shape: tuple[int, int, int] = (32, 32, 32)
    head: str = "sigmoid"

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "num_heads", tuple(int(h) for h in self.num_heads))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.in_channels != 1:
            raise ValidationError("in_channels must be 1")
        if self.num_classes != 6:
            raise ValidationError("num_classes must be 6 (five structures + background)")
        if not self.depths or len(self.depths) != len(self.num_heads):
            raise ValidationError("depths and num_heads must be non-empty and of equal length")
        if min(self.depths) < 1 or min(self.num_heads) < 1:
            raise ValidationError("every stage needs at least one block and one head")
        for i, heads in enumerate(self.num_heads):
            dim = self.embed_dim * 2 ** i
            if dim % heads:
                raise ValidationError(f"stage {i}: dim {dim} is not divisible by {heads} heads")
        if self.patch_size < 1 or self.window_size < 1 or self.mlp_ratio <= 0:
            raise ValidationError("patch_size, window_size and mlp_ratio must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("dropout_rate must lie in [0, 1)")
        if self.head not in ("sigmoid", "softmax"):
            raise ValidationError("head must be 'sigmoid' or 'softmax'")
        if len(self.input_shape) != 3:
            raise ValidationError("input_shape must have three entries")
        self.check_shape(self.input_shape)

    @property
    def divisor(self) -> int:
        return self.patch_size * 2 ** (len(self.depths) - 1)

    @property
    def stage_dims(self) -> tuple[int, ...]:
        return tuple(self.embed_dim * 2 ** i for i in range(len(self.depths)))

    def check_shape(self, shape) -> None:
        if any(s < 1 or s % self.divisor for s in shape):
            raise ValidationError(f"spatial shape {tuple(shape)} must be a positive multiple of {self.divisor}")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- #
# Token grids and window bookkeeping
# --------------------------------------------------------------------------- #

@dataclass
class TokenGrid:
    """Tokens of one volume laid out row-major: ``index = (z * h + y) * w + x``."""

    tokens: torch.Tensor  # (d*h*w, c)
    spatial: tuple[int, int, int]

    def __post_init__(self):
        d, h, w = self.spatial
        if self.tokens.ndim != 2 or self.tokens.shape[0] != d * h * w:
            raise ValidationError(f"{tuple(self.tokens.shape)} tokens do not match grid {self.spatial}")

    @property
    def channels(self) -> int:
        return int(self.tokens.shape[1])

    def index_of(self, z: int, y: int, x: int) -> int:
        _, h, w = self.spatial
        return (z * h + y) * w + x

    def location_of(self, index: int) -> tuple[int, int, int]:
        _, h, w = self.spatial
        return index // (h * w), (index // w) % h, index % w

    def to_volume(self) -> torch.Tensor:
        """(d, h, w, c) view of the tokens."""
        return self.tokens.reshape(*self.spatial, self.channels)

    @classmethod
    def from_volume(cls, x: torch.Tensor) -> "TokenGrid":
        d, h, w, c = x.shape
        return cls(x.reshape(d * h * w, c), (d, h, w))


def effective_window(spatial, window: int, shift: int):
    """Clip the window to the grid and drop the shift on axes the window already covers."""
    win = tuple(min(window, s) for s in spatial)
    sh = tuple(0 if s <= window else shift for s in spatial)
    return win, sh


def pad_to_windows(x: torch.Tensor, window) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero-pad ``(B, D, H, W, C)`` up to multiples of ``window``; return padded tensor and validity mask."""
    _, d, h, w, _ = x.shape
    pads = [(-s) % win for s, win in zip((d, h, w), window)]
    valid = torch.ones(d, h, w, dtype=torch.bool, device=x.device)
    if any(pads):
        x = F.pad(x, (0, 0, 0, pads[2], 0, pads[1], 0, pads[0]))
        valid = F.pad(valid, (0, pads[2], 0, pads[1], 0, pads[0]), value=False)
    return x, valid


def window_partition(x: torch.Tensor, window) -> torch.Tensor:
    """``(B, D, H, W, C)`` with every side divisible by ``window`` -> ``(B * nW, wd*wh*ww, C)``."""
    b, d, h, w, c = x.shape
    wd, wh, ww = window
    x = x.reshape(b, d // wd, wd, h // wh, wh, w // ww, ww, c)
    return x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, wd * wh * ww, c)


def window_reverse(windows: torch.Tensor, window, spatial, batch: int) -> torch.Tensor:
    d, h, w = spatial
    wd, wh, ww = window
    x = windows.reshape(batch, d // wd, h // wh, w // ww, wd, wh, ww, -1)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(batch, d, h, w, -1)


def shifted_window_mask(padded_spatial, valid: torch.Tensor, window, shift) -> torch.Tensor | None:
    """Additive attention mask ``(nW, N, N)`` for one (possibly shifted) window layout.

    Keys in the zero padding are always masked. With a non-zero shift, tokens that
    only share a window because of the cyclic roll are masked from each other.
    """
    region = torch.zeros(padded_spatial, dtype=torch.long)
    if any(shift):
        count = 0
        spans = [
            ((slice(0, -win), slice(-win, -s), slice(-s, None)) if s else (slice(None),))
            for win, s in zip(window, shift)
        ]
        for sd, sh, sw in itertools.product(*spans):
            region[sd, sh, sw] = count
            count += 1
    keep = valid
    if any(shift):
        keep = torch.roll(valid, shifts=tuple(-s for s in shift), dims=(0, 1, 2))
    if not any(shift) and bool(keep.all()):
        return None
    region_w = window_partition(region[None, ..., None].float(), window)[..., 0]
    keep_w = window_partition(keep[None, ..., None].float(), window)[..., 0] > 0.5
    allowed = (region_w[:, :, None] == region_w[:, None, :]) & keep_w[:, None, :]
    return torch.where(allowed, 0.0, MASK_VALUE)


def relative_position_index(window) -> torch.Tensor:
    """Index into a ``(2w-1)^3`` bias table for every query/key pair of a window of size ``window``.

    The table is sized by the configured window; clipped windows index a sub-block of it.
    """
    coords = torch.stack(torch.meshgrid(*[torch.arange(s) for s in window], indexing="ij")).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    return rel.permute(1, 2, 0)


# --------------------------------------------------------------------------- #
# Layers
# --------------------------------------------------------------------------- #

class MCDropout(nn.Module):
    """Inverted dropout whose mask comes from an explicit generator; inactive unless ``active``."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p

    def forward(self, x, active: bool = False, generator: torch.Generator | None = None):
        if not active or self.p == 0.0:
            return x
        keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= self.p
        return x * keep / (1.0 - self.p)


class WindowAttention(nn.Module):
    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        self.dim, self.heads, self.window = dim, heads, window
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.relative_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 3, heads))

    def bias(self, window) -> torch.Tensor:
        rel = relative_position_index(window) + (self.window - 1)
        span = 2 * self.window - 1
        flat = (rel[..., 0] * span + rel[..., 1]) * span + rel[..., 2]
        n = flat.shape[0]
        return self.relative_bias[flat.reshape(-1)].reshape(n, n, self.heads).permute(2, 0, 1)

    def forward(self, x, window, mask=None, return_weights: bool = False):
        """``x``: (B*nW, N, C); ``mask``: (nW, N, N) additive or ``None``."""
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1) + self.bias(window)[None]
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.reshape(bw // nw, nw, self.heads, n, n) + mask[None, :, None].to(attn.dtype)
            attn = attn.reshape(bw, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        out = self.proj(out)
        return (out, attn) if return_weights else out


class SwinBlock(nn.Module):
    """Pre-norm block: ``x + Drop(MSA(LN x))`` then ``x + Drop(MLP(LN x))``."""

    def __init__(self, dim, heads, window, shift, mlp_ratio, dropout_rate):
        super().__init__()
        self.window, self.shift = window, shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.drop1 = MCDropout(dropout_rate)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.drop2 = MCDropout(dropout_rate)

    def attention(self, x, shift=None, return_weights=False):
        """Windowed attention on a ``(B, D, H, W, C)`` grid (already normalized)."""
        b, d, h, w, c = x.shape
        window, sh = effective_window((d, h, w), self.window, self.shift if shift is None else shift)
        x, valid = pad_to_windows(x, window)
        padded = tuple(x.shape[1:4])
        if any(sh):
            x = torch.roll(x, shifts=tuple(-s for s in sh), dims=(1, 2, 3))
        mask = shifted_window_mask(padded, valid, window, sh)
        windows = window_partition(x, window)
        result = self.attn(windows, window, mask, return_weights=return_weights)
        out, weights = result if return_weights else (result, None)
        x = window_reverse(out, window, padded, b)
        if any(sh):
            x = torch.roll(x, shifts=sh, dims=(1, 2, 3))
        x = x[:, :d, :h, :w].contiguous()
        return (x, weights) if return_weights else x

    def forward(self, x, dropout=False, generator=None, shift=None):
        x = x + self.drop1(self.attention(self.norm1(x), shift), dropout, generator)
        x = x + self.drop2(self.mlp(self.norm2(x)), dropout, generator)
        return x


class PatchMerging(nn.Module):
    """Concatenate each 2x2x2 neighbourhood (8C), normalize, project to 2C."""

    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x):
        parts = [x[:, i::2, j::2, k::2] for i, j, k in itertools.product((0, 1), repeat=3)]
        return self.reduction(self.norm(torch.cat(parts, dim=-1)))


class SwinEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.patch_embed = nn.Conv3d(config.in_channels, config.embed_dim,
                                     kernel_size=config.patch_size, stride=config.patch_size)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        self.norms = nn.ModuleList()
        for i, (depth, heads) in enumerate(zip(config.depths, config.num_heads)):
            dim = config.stage_dims[i]
            self.stages.append(nn.ModuleList([
                SwinBlock(dim, heads, config.window_size, 0 if j % 2 == 0 else config.window_size // 2,
                          config.mlp_ratio, config.dropout_rate)
                for j in range(depth)
            ]))
            self.norms.append(nn.LayerNorm(dim))
            if i < len(config.depths) - 1:
                self.merges.append(PatchMerging(dim))

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, 1, D, H, W)`` -> channels-last token grid ``(B, d, h, w, C)``."""
        return self.patch_embed(x).permute(0, 2, 3, 4, 1)

    def forward(self, x, dropout=False, generator=None) -> list[torch.Tensor]:
        """Return one channels-first feature map per stage, finest first."""
        h = self.embed(x)
        features = []
        for i, blocks in enumerate(self.stages):
            for block in blocks:
                h = block(h, dropout, generator)
            features.append(self.norms[i](h).permute(0, 4, 1, 2, 3))
            if i < len(self.merges):
                h = self.merges[i](h)
        return features


class ConvBlock(nn.Module):
    """Two 3x3x3 convolutions, each followed by instance norm and leaky ReLU."""

    def __init__(self, cin, cout):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv3d(cin, cout, 3, padding=1), nn.InstanceNorm3d(cout, affine=True), nn.LeakyReLU(0.01),
            nn.Conv3d(cout, cout, 3, padding=1), nn.InstanceNorm3d(cout, affine=True), nn.LeakyReLU(0.01),
        )

    def forward(self, x):
        return self.body(x)


class UpBlock(nn.Module):
    def __init__(self, cin, cskip, cout, factor):
        super().__init__()
        self.up = nn.ConvTranspose3d(cin, cout, kernel_size=factor, stride=factor)
        self.conv = ConvBlock(cout + cskip, cout)

    def forward(self, x, skip):
        return self.conv(torch.cat([self.up(x), skip], dim=1))


class Decoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        dims = config.stage_dims
        self.stem = ConvBlock(config.in_channels, config.embed_dim)
        self.ups = nn.ModuleList([
            UpBlock(dims[i], dims[i - 1], dims[i - 1], 2) for i in range(len(dims) - 1, 0, -1)
        ])
        self.final = UpBlock(dims[0], config.embed_dim, config.embed_dim, config.patch_size)

    def forward(self, x, features):
        h = features[-1]
        for up, skip in zip(self.ups, reversed(features[:-1])):
            h = up(h, skip)
        return self.final(h, self.stem(x))


class MCSwinU(nn.Module):
    """Swin encoder + CNN decoder + 1x1x1 head; ``forward`` returns logits ``(B, 6, D, H, W)``."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = SwinEncoder(config)
        self.decoder = Decoder(config)
        self.head = nn.Conv3d(config.embed_dim, config.num_classes, kernel_size=1)
        self.metadata: dict = {}
        self.iteration = 0

    def forward(self, x, dropout: bool = False, generator: torch.Generator | None = None):
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ValidationError(f"expected input (B, 1, D, H, W), got {tuple(x.shape)}")
        self.config.check_shape(x.shape[2:])
        logits = self.head(self.decoder(x, self.encoder(x, dropout, generator)))
        if not torch.isfinite(logits).all():
            raise NumericError("non-finite logits in forward pass")
        return logits

    def probabilities(self, logits: torch.Tensor) -> torch.Tensor:
        if self.config.head == "softmax":
            return logits.softmax(dim=1)
        return torch.sigmoid(logits)


def _trunc_normal_(tensor, std, generator):
    with torch.no_grad():
        values = torch.empty(tensor.shape, dtype=torch.float64)
        values.normal_(0.0, 1.0, generator=generator)
        while True:
            bad = values.abs() > 2.0
            if not bad.any():
                break
            values[bad] = torch.empty(int(bad.sum()), dtype=torch.float64).normal_(0.0, 1.0, generator=generator)
        tensor.copy_(values * std)


def reset_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Truncated-normal(0.02) for transformer weights, He-normal for decoder convolutions and the head,
    zero biases, unit/zero normalization affines."""
    for name, param in sorted(module.named_parameters()):
        leaf = name.rsplit(".", 1)[-1]
        owner = module.get_submodule(name.rsplit(".", 1)[0]) if "." in name else module
        conv = isinstance(owner, (nn.Conv3d, nn.ConvTranspose3d)) and not name.startswith(("encoder.", "patch_embed."))
        with torch.no_grad():
            if isinstance(owner, (nn.LayerNorm, nn.InstanceNorm3d)):
                param.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias":
                param.zero_()
            elif conv:
                # the decoder is instance-normalized, so the 0.02 scale would only slow the head down
                nn.init.kaiming_normal_(param, a=0.01, nonlinearity="leaky_relu", generator=generator)
            else:
                _trunc_normal_(param, 0.02, generator)


def init_model(config: ModelConfig, seed: int) -> MCSwinU:
    """Build a model with deterministic initialization for ``(config, seed)``."""
    if not isinstance(config, ModelConfig):
        raise ValidationError("config must be a ModelConfig")
    model = MCSwinU(config)
    reset_parameters(model, torch.Generator().manual_seed(int(seed)))
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def patch_partition(model: MCSwinU, volume_patch) -> TokenGrid:
    """Embed a single-channel ``(D, H, W)`` patch into a token grid."""
    x = torch.as_tensor(np.asarray(volume_patch), dtype=next(model.parameters()).dtype)
    if x.ndim != 3:
        raise ValidationError("patch_partition expects a (D, H, W) array")
    p = model.config.patch_size
    if any(s % p for s in x.shape):
        raise ValidationError(f"shape {tuple(x.shape)} is not divisible by patch size {p}")
    return TokenGrid.from_volume(model.encoder.embed(x[None, None])[0])


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #

CKPT_MAGIC = b"MCKP"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIQ")


def config_from_dict(data: dict) -> ModelConfig:
    from .config import build_dataclass

    return build_dataclass(ModelConfig, data, "model")


def save_checkpoint(model: MCSwinU, path, extra_metadata: dict | None = None) -> None:
    """Versioned container: header, JSON index (config, metadata, tensor table), raw little-endian f32 data."""
    metadata = dict(model.metadata)
    if extra_metadata:
        metadata.update(extra_metadata)
    tensors, table, offset = [], [], 0
    for name, value in model.state_dict().items():
        arr = value.detach().cpu().numpy().astype("<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
        tensors.append(arr.tobytes(order="C"))
    index = {"config": model.config.to_dict(), "metadata": metadata, "iteration": model.iteration, "tensors": table}
    blob = json.dumps(index, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)))
        fh.write(blob)
        for t in tensors:
            fh.write(t)


def read_checkpoint(path) -> tuple[ModelConfig, dict, dict[str, np.ndarray]]:
    """Return ``(config, index, tensors)`` without building a model."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _CKPT_HEADER.size:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, blob_len = _CKPT_HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _CKPT_HEADER.size
    try:
        index = json.loads(raw[start:start + blob_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt index") from exc
    data = raw[start + blob_len:]
    tensors = {}
    for entry in index["tensors"]:
        lo, n = entry["offset"], entry["nbytes"]
        if lo + n > len(data):
            raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(data[lo:lo + n], dtype="<f4").reshape(entry["shape"])
    if sum(e["nbytes"] for e in index["tensors"]) != len(data):
        raise CheckpointError(f"{path}: payload size does not match tensor table")
    try:
        config = config_from_dict(index["config"])
    except ValidationError as exc:
        raise CheckpointError(f"{path}: invalid stored config: {exc}") from exc
    return config, index, tensors


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> MCSwinU:
    config, index, tensors = read_checkpoint(path)
    if expected_config is not None and expected_config != config:
        raise CheckpointError(
            f"{path}: stored config {config.to_dict()} does not match requested {expected_config.to_dict()}"
        )
    model = MCSwinU(config)
    state = model.state_dict()
    if set(state) != set(tensors):
        raise CheckpointError(f"{path}: parameter names do not match the architecture")
    for name, ref in state.items():
        if tuple(ref.shape) != tensors[name].shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
    model.load_state_dict({k: torch.from_numpy(v.astype(np.float32)) for k, v in tensors.items()})
    model.metadata = dict(index.get("metadata", {}))
    model.iteration = int(index.get("iteration", 0))
    return model
