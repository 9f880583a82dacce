"""Volumes, label maps, the ``.mvol`` container, thoracic phantoms, splits and augmentation.

Arrays are always indexed ``(z, y, x)`` with ``z`` the slowest axis, and spacing
tuples follow the same order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import CorruptionError, FormatError, GenerationError, ValidationError

NUM_CLASSES = 6
CLASS_NAMES = ("Background", "Lung R", "Lung L", "Spinal Cord", "Esophagus", "GTV")
BACKGROUND, LUNG_R, LUNG_L, CORD, ESOPHAGUS, GTV = range(NUM_CLASSES)

MAGIC = b"MVOL"
VERSION = 1
DTYPE_F32, DTYPE_LABEL, DTYPE_U8 = 0, 1, 2
# magic, version, dtype, D, H, W, spacing
_HEADER = struct.Struct("<4sIB3I3d")
HEADER_SIZE = _HEADER.size  # 45 bytes


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
        raise ValidationError(f"spacing must be three positive finite values, got {spacing}")
    return spacing


class _Grid:
    data: np.ndarray
    spacing_mm: tuple[float, float, float]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return (
            self.spacing_mm == other.spacing_mm
            and self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape}, spacing_mm={self.spacing_mm})"


@dataclass(eq=False, repr=False)
class Volume(_Grid):
    """Scalar intensity grid stored as float32."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValidationError(f"volume must be a non-empty 3D grid, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("volume contains non-finite values")
        self.spacing_mm = _check_spacing(self.spacing_mm)


@dataclass(eq=False, repr=False)
class LabelMap(_Grid):
    """Integer class grid with values in ``0..5``."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValidationError(f"label map must be a non-empty 3D grid, got shape {data.shape}")
        if data.size and (data.min() < 0 or data.max() >= NUM_CLASSES):
            raise ValidationError(f"label values must lie in 0..{NUM_CLASSES - 1}")
        self.data = np.ascontiguousarray(data, dtype=np.uint8)
        self.spacing_mm = _check_spacing(self.spacing_mm)

    def counts(self) -> np.ndarray:
        return np.bincount(self.data.ravel(), minlength=NUM_CLASSES)


@dataclass(eq=False, repr=False)
class ByteGrid(_Grid):
    """Unconstrained uint8 grid (agreement counts, boolean masks)."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValidationError(f"grid must be a non-empty 3D array, got shape {data.shape}")
        if data.size and (data.min() < 0 or data.max() > 255):
            raise ValidationError("byte grid values must lie in 0..255")
        self.data = np.ascontiguousarray(data, dtype=np.uint8)
        self.spacing_mm = _check_spacing(self.spacing_mm)


def check_pair(volume: Volume, labels: LabelMap) -> None:
    if volume.shape != labels.shape:
        raise ValidationError(f"volume shape {volume.shape} != label shape {labels.shape}")
    if volume.spacing_mm != labels.spacing_mm:
        raise ValidationError(f"volume spacing {volume.spacing_mm} != label spacing {labels.spacing_mm}")


# --------------------------------------------------------------------------- #
# .mvol container
# --------------------------------------------------------------------------- #

def write_volume(path, grid: Volume | LabelMap | ByteGrid) -> None:
    """Write ``grid`` as a little-endian ``.mvol`` file (45-byte header + z-major payload)."""
    if isinstance(grid, Volume):
        dtype_code, payload = DTYPE_F32, grid.data.astype("<f4")
    elif isinstance(grid, LabelMap):
        dtype_code, payload = DTYPE_LABEL, grid.data.astype("u1")
    elif isinstance(grid, ByteGrid):
        dtype_code, payload = DTYPE_U8, grid.data.astype("u1")
    else:
        raise ValidationError(f"cannot write object of type {type(grid).__name__}")
    header = _HEADER.pack(MAGIC, VERSION, dtype_code, *grid.shape, *grid.spacing_mm)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(payload).tobytes(order="C"))


def read_volume(path) -> Volume | LabelMap | ByteGrid:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        if not raw.startswith(MAGIC[: len(raw)]):
            raise FormatError(f"{path}: not an .mvol file")
        raise CorruptionError(f"{path}: truncated header")
    magic, version, dtype_code, d, h, w, sz, sy, sx = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype_code not in (DTYPE_F32, DTYPE_LABEL, DTYPE_U8):
        raise ValidationError(f"{path}: unknown dtype code {dtype_code}")
    itemsize = 4 if dtype_code == DTYPE_F32 else 1
    expected = d * h * w * itemsize
    payload = raw[HEADER_SIZE:]
    if len(payload) != expected:
        raise CorruptionError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    spacing = (sz, sy, sx)
    if dtype_code == DTYPE_F32:
        data = np.frombuffer(payload, dtype="<f4").reshape(d, h, w).astype(np.float32)
        return Volume(data, spacing)
    data = np.frombuffer(payload, dtype="u1").reshape(d, h, w).copy()
    if dtype_code == DTYPE_LABEL:
        return LabelMap(data, spacing)
    return ByteGrid(data, spacing)


# --------------------------------------------------------------------------- #
# Phantoms
# --------------------------------------------------------------------------- #

STRUCTURES = ("air", "tissue", "lung_r", "lung_l", "cord", "esophagus", "gtv")


def _default_means():
    return {"air": -1.0, "tissue": 0.05, "lung_r": -0.8, "lung_l": -0.8,
            "cord": 0.4, "esophagus": 0.25, "gtv": 0.1}


def _default_stds():
    return {name: 0.0 for name in STRUCTURES}


@dataclass
class PhantomSpec:
    """Geometry and intensity ranges for a synthetic thoracic phantom.

    Radii and semi-axes are voxel counts given as ``(lo, hi)`` ranges; each
    phantom draws one value per range. Semi-axes are ordered ``(z, y, x)``.
    """

    shape: tuple[int, int, int] = (64, 64, 64)
    spacing_mm: tuple[float, float, float] = (3.0, 1.7, 1.7)
    body_semi_axes: tuple[float, float] = (26.0, 29.0)
    lung_semi_axes: tuple[tuple[float, float], ...] = ((17.0, 21.0), (11.0, 14.0), (8.0, 10.0))
    left_lung_scale: float = 0.9
    cord_radius: tuple[float, float] = (2.5, 3.0)
    esophagus_radius: tuple[float, float] = (1.8, 2.2)
    tumor_radius: tuple[float, float] = (2.5, 4.0)
    position_jitter: float = 2.0
    intensity_means: dict = field(default_factory=_default_means)
    intensity_stds: dict = field(default_factory=_default_stds)
    noise_std: float = 0.05

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing_mm = _check_spacing(self.spacing_mm)
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise ValidationError(f"phantom shape must be 3D with every side >= 8, got {self.shape}")
        ranges = {
            "cord_radius": self.cord_radius,
            "esophagus_radius": self.esophagus_radius,
            "tumor_radius": self.tumor_radius,
        }
        for i, r in enumerate(self.lung_semi_axes):
            ranges[f"lung_semi_axes[{i}]"] = r
        if len(self.lung_semi_axes) != 3:
            raise ValidationError("lung_semi_axes needs one (lo, hi) range per axis")
        for name, (lo, hi) in ranges.items():
            if not 1.0 <= lo <= hi:
                raise ValidationError(f"{name} must satisfy 1 <= lo <= hi, got ({lo}, {hi})")
        if min(self.body_semi_axes) < 1:
            raise ValidationError("body semi-axes must be >= 1 voxel")
        if not 0 < self.left_lung_scale <= 1:
            raise ValidationError("left_lung_scale must lie in (0, 1]")
        if self.noise_std < 0 or self.position_jitter < 0:
            raise ValidationError("noise_std and position_jitter must be non-negative")
        for table in ("intensity_means", "intensity_stds"):
            values = getattr(self, table)
            missing = set(STRUCTURES) - set(values)
            extra = set(values) - set(STRUCTURES)
            if missing or extra:
                raise ValidationError(f"{table} must have exactly the keys {STRUCTURES}")
        if any(v < 0 for v in self.intensity_stds.values()):
            raise ValidationError("intensity_stds must be non-negative")
        d, h, w = self.shape
        if self.body_semi_axes[0] >= h / 2 or self.body_semi_axes[1] >= w / 2:
            raise ValidationError("body does not fit inside the grid")
        if self.lung_semi_axes[0][1] + self.position_jitter >= d / 2:
            raise ValidationError("lungs do not fit along z")


def _ellipsoid(grid, center, semi_axes):
    z, y, x = grid
    return (((z - center[0]) / semi_axes[0]) ** 2
            + ((y - center[1]) / semi_axes[1]) ** 2
            + ((x - center[2]) / semi_axes[2]) ** 2) <= 1.0


def _tube(grid, center_yx, radius):
    _, y, x = grid
    return (y - center_yx[0]) ** 2 + (x - center_yx[1]) ** 2 <= radius ** 2


def generate_phantom(spec: PhantomSpec, seed: int) -> tuple[Volume, LabelMap]:
    """Draw one thoracic phantom: two lungs, spinal cord, esophagus and a tumour in one lung.

    Deterministic in ``(spec, seed)``. Lungs sit slightly below the mid-plane and
    the left lung is smaller, so the phantom has no mirror symmetry.
    """
    rng = np.random.default_rng(seed)
    d, h, w = spec.shape
    grid = np.ogrid[:d, :h, :w]
    jit = lambda: rng.uniform(-spec.position_jitter, spec.position_jitter)  # noqa: E731
    draw = lambda r: rng.uniform(r[0], r[1])  # noqa: E731

    cz, cy, cx = (d - 1) / 2, (h - 1) / 2, (w - 1) / 2
    _, yy, xx = grid
    by, bx = spec.body_semi_axes
    body = np.broadcast_to(((yy - cy) / by) ** 2 + ((xx - cx) / bx) ** 2 <= 1.0, spec.shape)

    labels = np.zeros(spec.shape, dtype=np.uint8)
    lung_axes = np.array([draw(r) for r in spec.lung_semi_axes])
    lung_z = cz + 0.08 * d + jit()
    lung_y = cy - 0.05 * h + jit()
    offset_x = lung_axes[2] + 0.06 * w + 2.0
    lung_r = _ellipsoid(grid, (lung_z, lung_y, cx - offset_x + jit()), lung_axes) & body
    left_axes = lung_axes * spec.left_lung_scale
    lung_l = _ellipsoid(grid, (lung_z + jit(), lung_y + jit(), cx + offset_x + jit()), left_axes) & body
    labels[lung_r] = LUNG_R
    labels[lung_l & ~lung_r] = LUNG_L

    cord_r = draw(spec.cord_radius)
    cord_yx = (cy + 0.30 * h + jit() * 0.5, cx + jit() * 0.5)
    esophagus_r = draw(spec.esophagus_radius)
    esophagus_yx = (cy + 0.12 * h + jit() * 0.5, cx + 0.05 * w + jit() * 0.5)
    cord = np.broadcast_to(_tube(grid, cord_yx, cord_r), spec.shape) & body
    esophagus = np.broadcast_to(_tube(grid, esophagus_yx, esophagus_r), spec.shape) & body
    labels[esophagus] = ESOPHAGUS
    labels[cord] = CORD

    host = LUNG_R if rng.random() < 0.5 else LUNG_L
    tumor_r = draw(spec.tumor_radius)
    host_mask = labels == host
    depth = ndimage.distance_transform_edt(host_mask)
    candidates = np.argwhere(depth >= tumor_r + 1.5)
    if len(candidates) == 0:
        raise GenerationError(f"no room for a tumour of radius {tumor_r:.2f} inside class {host}")
    center = candidates[rng.integers(len(candidates))]
    tumor = _ellipsoid(grid, center, (tumor_r,) * 3) & host_mask
    labels[tumor] = GTV

    counts = np.bincount(labels.ravel(), minlength=NUM_CLASSES)
    if not (min(counts[LUNG_R], counts[LUNG_L]) > counts[CORD] > counts[ESOPHAGUS] >= counts[GTV] > 0):
        raise GenerationError(f"structure sizes out of order: {counts.tolist()}")

    means = spec.intensity_means
    stds = spec.intensity_stds
    image = np.full(spec.shape, means["air"], dtype=np.float64)
    sd = np.full(spec.shape, stds["air"], dtype=np.float64)
    regions = [
        (body, "tissue"), (labels == LUNG_R, "lung_r"), (labels == LUNG_L, "lung_l"),
        (labels == CORD, "cord"), (labels == ESOPHAGUS, "esophagus"), (labels == GTV, "gtv"),
    ]
    for mask, name in regions:
        image[mask] = means[name]
        sd[mask] = stds[name]
    total_sd = np.sqrt(sd ** 2 + spec.noise_std ** 2)
    noise = rng.standard_normal(spec.shape)
    image = np.where(total_sd > 0, image + total_sd * noise, image)
    return Volume(image.astype(np.float32), spec.spacing_mm), LabelMap(labels, spec.spacing_mm)


# --------------------------------------------------------------------------- #
# Splits
# --------------------------------------------------------------------------- #

@dataclass
class SplitRatios:
    train: float = 0.7
    val: float = 0.15
    test: float = 0.15

    def __post_init__(self):
        for name in ("train", "val", "test"):
            value = getattr(self, name)
            if not 0 < value < 1:
                raise ValidationError(f"split ratio {name}={value} must lie in (0, 1)")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValidationError("split ratios must sum to 1")


def split_dataset(ids: Sequence, ratios: SplitRatios, seed: int) -> tuple[list, list, list]:
    """Shuffle ``ids`` by ``seed`` and cut into train/val/test; rounding remainder goes to train."""
    ids = list(ids)
    if not ids:
        raise ValidationError("cannot split an empty id list")
    if len(set(ids)) != len(ids):
        raise ValidationError("ids must be distinct")
    n = len(ids)
    n_val = int(round(n * ratios.val))
    n_test = int(round(n * ratios.test))
    n_train = n - n_val - n_test
    while n_train < 0:  # tiny n with large val/test ratios
        if n_test >= n_val:
            n_test -= 1
        else:
            n_val -= 1
        n_train = n - n_val - n_test
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


# --------------------------------------------------------------------------- #
# Augmentation
# --------------------------------------------------------------------------- #

@dataclass
class AugmentConfig:
    """Random transform ranges; each ``p_*`` is the probability the transform fires."""

    scale_range: tuple[float, float] = (0.9, 1.1)
    shift_range: tuple[float, float] = (-0.1, 0.1)
    crop_margin: int = 4
    rotation_deg: tuple[tuple[float, float], ...] = ((-10.0, 10.0), (-10.0, 10.0), (-10.0, 10.0))
    zoom_range: tuple[float, float] = (0.9, 1.1)
    translation_vox: tuple[float, float] = (-3.0, 3.0)
    elastic_spacing: int = 16
    elastic_max_disp: float = 2.0
    noise_std: float = 0.02
    p_scale: float = 0.5
    p_shift: float = 0.5
    p_crop: float = 0.0
    p_affine: float = 0.3
    p_elastic: float = 0.2
    p_noise: float = 0.3

    def __post_init__(self):
        pairs = {
            "scale_range": self.scale_range, "shift_range": self.shift_range,
            "zoom_range": self.zoom_range, "translation_vox": self.translation_vox,
        }
        if len(self.rotation_deg) != 3:
            raise ValidationError("rotation_deg needs one (lo, hi) range per axis")
        for i, r in enumerate(self.rotation_deg):
            pairs[f"rotation_deg[{i}]"] = r
        for name, (lo, hi) in pairs.items():
            if lo > hi:
                raise ValidationError(f"{name} is not ordered: ({lo}, {hi})")
        if self.zoom_range[0] <= 0:
            raise ValidationError("zoom_range must be positive")
        for name in ("p_scale", "p_shift", "p_crop", "p_affine", "p_elastic", "p_noise"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        if self.crop_margin < 0 or self.elastic_spacing < 1 or self.elastic_max_disp < 0 or self.noise_std < 0:
            raise ValidationError("crop_margin, elastic parameters and noise_std must be non-negative")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(p_scale=0.0, p_shift=0.0, p_crop=0.0, p_affine=0.0, p_elastic=0.0, p_noise=0.0)


def _rotation_matrix(angles_deg) -> np.ndarray:
    mats = []
    for axis, angle in enumerate(angles_deg):
        c, s = math.cos(math.radians(angle)), math.sin(math.radians(angle))
        i, j = [a for a in range(3) if a != axis]
        m = np.eye(3)
        m[i, i], m[i, j], m[j, i], m[j, j] = c, -s, s, c
        mats.append(m)
    rot = mats[0] @ mats[1] @ mats[2]
    # snap cos/sin of multiples of 90 degrees so lattice rotations stay exact
    snapped = np.round(rot)
    return np.where(np.abs(rot - snapped) < 1e-12, snapped, rot)


def _resample(image, labels, coords, fill):
    """Sample ``image`` trilinearly and ``labels`` by nearest neighbour at ``coords``."""
    out_img = ndimage.map_coordinates(image, coords, order=1, mode="constant", cval=fill)
    out_lab = ndimage.map_coordinates(labels, coords, order=0, mode="constant", cval=0)
    return out_img.astype(np.float32), out_lab.astype(np.uint8)


def augment(volume: Volume, labels: LabelMap, config: AugmentConfig, seed: int) -> tuple[Volume, LabelMap]:
    """Random crop, affine, elastic, intensity scale/shift and noise, in that order.

    Geometric transforms share one parameter draw between image and labels.
    Boundary cropping shrinks the grid; the other transforms keep its shape.
    """
    check_pair(volume, labels)
    if 2 * config.crop_margin >= min(volume.shape):
        raise ValidationError(
            f"crop margin {config.crop_margin} must be below half the smallest dimension {min(volume.shape)}"
        )
    rng = np.random.default_rng(seed)
    img = volume.data.astype(np.float64)
    lab = labels.data.copy()
    fill = float(img.min())
    fires = {name: rng.random() < getattr(config, f"p_{name}")
             for name in ("crop", "affine", "elastic", "scale", "shift", "noise")}

    if fires["crop"] and config.crop_margin > 0:
        lo = rng.integers(0, config.crop_margin + 1, size=3)
        hi = rng.integers(0, config.crop_margin + 1, size=3)
        sl = tuple(slice(int(a), s - int(b)) for a, b, s in zip(lo, hi, img.shape))
        img, lab = img[sl], lab[sl]

    if fires["affine"]:
        angles = [rng.uniform(lo, hi) for lo, hi in config.rotation_deg]
        zoom = rng.uniform(*config.zoom_range)
        shift = rng.uniform(*config.translation_vox, size=3)
        matrix = _rotation_matrix(angles) / zoom
        center = (np.array(img.shape) - 1) / 2.0
        offset = center - matrix @ center - shift
        img = ndimage.affine_transform(img, matrix, offset=offset, order=1, mode="constant", cval=fill)
        lab = ndimage.affine_transform(lab, matrix, offset=offset, order=0, mode="constant", cval=0)

    if fires["elastic"] and config.elastic_max_disp > 0:
        coarse = tuple(max(2, math.ceil(s / config.elastic_spacing) + 1) for s in img.shape)
        disp = rng.uniform(-config.elastic_max_disp, config.elastic_max_disp, size=(3, *coarse))
        factors = [(s - 1) / (c - 1) if s > 1 else 1.0 for s, c in zip(img.shape, coarse)]
        dense = []
        for comp in disp:
            pts = np.meshgrid(*[np.arange(s) / f if s > 1 else np.zeros(1) for s, f in zip(img.shape, factors)],
                              indexing="ij")
            dense.append(ndimage.map_coordinates(comp, pts, order=1, mode="nearest"))
        base = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in img.shape], indexing="ij")
        coords = np.stack([b + dv for b, dv in zip(base, dense)])
        img, lab = _resample(img, lab, coords, fill)

    img = img.astype(np.float64)
    if fires["scale"]:
        img = img * rng.uniform(*config.scale_range)
    if fires["shift"]:
        img = img + rng.uniform(*config.shift_range)
    if fires["noise"] and config.noise_std > 0:
        img = img + rng.normal(0.0, config.noise_std, size=img.shape)
    return Volume(img.astype(np.float32), volume.spacing_mm), LabelMap(lab, labels.spacing_mm)


# --------------------------------------------------------------------------- #
# Patches
# --------------------------------------------------------------------------- #

def extract_patch(volume: Volume, labels: LabelMap, patch_shape, seed: int, fg_bias: float = 0.5,
                  rng: np.random.Generator | None = None) -> tuple[Volume, LabelMap]:
    """Cut a ``patch_shape`` block, centred on a random foreground voxel with probability ``fg_bias``."""
    check_pair(volume, labels)
    patch_shape = tuple(int(p) for p in patch_shape)
    if len(patch_shape) != 3 or any(p < 1 or p > s for p, s in zip(patch_shape, volume.shape)):
        raise ValidationError(f"patch {patch_shape} does not fit inside volume {volume.shape}")
    if not 0.0 <= fg_bias <= 1.0:
        raise ValidationError("fg_bias must lie in [0, 1]")
    rng = rng if rng is not None else np.random.default_rng(seed)
    limits = np.array(volume.shape) - np.array(patch_shape)
    corner = None
    if rng.random() < fg_bias:
        fg = np.flatnonzero(labels.data)
        if fg.size:
            center = np.array(np.unravel_index(fg[rng.integers(fg.size)], volume.shape))
            corner = np.clip(center - np.array(patch_shape) // 2, 0, limits)
    if corner is None:
        corner = np.array([rng.integers(0, lim + 1) for lim in limits])
    sl = tuple(slice(int(c), int(c) + p) for c, p in zip(corner, patch_shape))
    return Volume(volume.data[sl], volume.spacing_mm), LabelMap(labels.data[sl], labels.spacing_mm)
