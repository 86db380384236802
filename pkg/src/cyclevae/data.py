"""Datasets: MNIST IDX files, procedural toy sprites, splits and pair sampling."""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049
SPLITS = ("train", "val", "test")


class IDXFormatError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass
class LabeledImageDataset:
    images: np.ndarray  # (n, c, h, w) in [0, 1]
    labels: np.ndarray  # (n,) integer class ids
    split: np.ndarray = None  # (n,) entries of SPLITS

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.split is None:
            self.split = np.full(len(self.labels), "train")
        self.split = np.asarray(self.split, dtype="<U5")
        if len(self.split) != len(self.labels) or not np.isin(self.split, SPLITS).all():
            raise ValueError("split tags must be one of train/val/test for every image")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def indices(self, split: str | None = None) -> np.ndarray:
        if split is None:
            return np.arange(len(self))
        return np.flatnonzero(self.split == split)

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(split)
        return self.images[idx], self.labels[idx]


# ---------------------------------------------------------------- IDX


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_exact(f, n: int, path) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise OSError(f"{path}: truncated IDX file (wanted {n} bytes, got {len(data)})")
    return data


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as f:
        (found,) = struct.unpack(">I", _read_exact(f, 4, path))
        if found != magic:
            raise IDXFormatError(f"{path}: bad magic number {found}, expected {magic}")
        dims = struct.unpack(f">{ndim}I", _read_exact(f, 4 * ndim, path))
        count = int(np.prod(dims))
        body = _read_exact(f, count, path)
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (magic 0x0800 | ndim, big-endian dims)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("IDX writer only supports uint8 data")
    header = struct.pack(">I", 0x800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if Path(path).suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(header)
        f.write(array.tobytes())


def load_mnist_idx(images_path, labels_path, split: str = "train") -> LabeledImageDataset:
    """Load an IDX image/label file pair; pixels are scaled to [0, 1] by 1/255."""
    raw = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if len(raw) != len(labels):
        raise ValueError(f"{images_path} holds {len(raw)} images but {labels_path} holds {len(labels)} labels")
    images = (raw.astype(np.float32) / 255.0)[:, None, :, :]
    return LabeledImageDataset(images, labels.astype(np.int64), np.full(len(labels), split))


def concat_datasets(*parts: LabeledImageDataset) -> LabeledImageDataset:
    return LabeledImageDataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.split for p in parts]),
    )


# ---------------------------------------------------------------- toy sprites

SHAPES = ("square", "triangle", "plus", "ell", "tee")
PALETTE = np.array([
    [1.00, 0.25, 0.25],
    [0.25, 0.85, 0.30],
    [0.30, 0.45, 1.00],
    [1.00, 0.85, 0.20],
    [0.90, 0.35, 0.95],
    [0.20, 0.90, 0.90],
    [1.00, 0.60, 0.15],
    [0.95, 0.95, 0.95],
])
# largest distance of any shape point from its centre, in shape units
_SHAPE_RADIUS = 1.28


@dataclass(frozen=True)
class ToySpriteConfig:
    num_identities: int = 10
    images_per_identity: int = 200
    image_size: int = 64
    shape_extent: float = 0.18  # half-size of a unit-scale shape as a fraction of the canvas
    max_translation: float = 0.25
    max_rotation_deg: float = 45.0
    scale_range: tuple[float, float] = (0.7, 1.2)
    supersample: int = 2

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(self.scale_range))
        if self.num_identities < 1 or self.images_per_identity < 1:
            raise ValueError("num_identities and images_per_identity must be >= 1")
        if self.num_identities > len(SHAPES) * len(PALETTE):
            raise ValueError(f"at most {len(SHAPES) * len(PALETTE)} identities are available")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad scale_range {self.scale_range}")


@dataclass(frozen=True)
class Nuisance:
    dx: float = 0.0  # translation, fraction of canvas
    dy: float = 0.0
    angle: float = 0.0  # radians
    scale: float = 1.0


def identity_factors(num_identities: int, seed: int) -> list[tuple[int, int]]:
    """(shape index, palette index) per identity; distinct and fixed by ``seed``."""
    combos = [(s, p) for p in range(len(PALETTE)) for s in range(len(SHAPES))]
    order = np.random.default_rng([seed, 0x5EED]).permutation(len(combos))
    return [combos[i] for i in order[:num_identities]]


def _inside(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    if shape == "square":
        return (au <= 0.8) & (av <= 0.8)
    if shape == "triangle":
        # apex (0, 0.9), base corners (+-0.9, -0.7)
        return (v >= -0.7) & (v <= 0.9 - (1.6 / 0.9) * au)
    if shape == "plus":
        return ((au <= 0.3) & (av <= 0.9)) | ((av <= 0.3) & (au <= 0.9))
    if shape == "ell":
        return ((u >= -0.8) & (u <= -0.2) & (av <= 0.8)) | ((au <= 0.8) & (v >= -0.8) & (v <= -0.2))
    if shape == "tee":
        return ((au <= 0.9) & (v >= 0.3) & (v <= 0.9)) | ((au <= 0.3) & (av <= 0.9))
    raise ValueError(f"unknown shape {shape}")


def render_sprite(shape_index: int, palette_index: int, nuisance: Nuisance, config: ToySpriteConfig) -> np.ndarray:
    """One (3, size, size) image of a coloured shape on a black background."""
    size, ss = config.image_size, config.supersample
    offsets = (np.arange(size * ss) + 0.5) / (size * ss) - 0.5  # canvas units, centre at 0
    py, px = np.meshgrid(offsets, offsets, indexing="ij")
    extent = config.shape_extent * nuisance.scale
    cx, cy = px - nuisance.dx, py - nuisance.dy
    cos, sin = np.cos(nuisance.angle), np.sin(nuisance.angle)
    u = (cos * cx + sin * cy) / extent
    v = -(-sin * cx + cos * cy) / extent  # image rows grow downwards
    mask = _inside(SHAPES[shape_index], u, v).astype(np.float64)
    coverage = mask.reshape(size, ss, size, ss).mean(axis=(1, 3))
    return (PALETTE[palette_index][:, None, None] * coverage[None]).astype(np.float32)


def _sample_nuisance(rng: np.random.Generator, config: ToySpriteConfig) -> tuple[Nuisance, bool]:
    scale = rng.uniform(*config.scale_range)
    angle = np.deg2rad(rng.uniform(-config.max_rotation_deg, config.max_rotation_deg))
    dx, dy = rng.uniform(-config.max_translation, config.max_translation, size=2)
    limit = 0.5 - _SHAPE_RADIUS * config.shape_extent * scale
    clamped = abs(dx) > limit or abs(dy) > limit
    dx, dy = np.clip([dx, dy], -max(limit, 0.0), max(limit, 0.0))
    return Nuisance(float(dx), float(dy), float(angle), float(scale)), clamped


@dataclass
class ToySprites:
    dataset: LabeledImageDataset
    nuisance: list[Nuisance] = field(default_factory=list)
    clamped: int = 0


def generate_toy_sprites(config: ToySpriteConfig, seed: int) -> ToySprites:
    """Render ``num_identities * images_per_identity`` sprites; label = identity id.

    Translations that would push a shape off the canvas are clamped and counted.
    """
    rng = np.random.default_rng(seed)
    factors = identity_factors(config.num_identities, seed)
    n = config.num_identities * config.images_per_identity
    images = np.empty((n, 3, config.image_size, config.image_size), dtype=np.float32)
    labels = np.repeat(np.arange(config.num_identities), config.images_per_identity)
    nuisances, clamped = [], 0
    for i, ident in enumerate(labels):
        nuisance, was_clamped = _sample_nuisance(rng, config)
        clamped += was_clamped
        nuisances.append(nuisance)
        images[i] = render_sprite(*factors[ident], nuisance, config)
    if clamped:
        logger.warning("toy sprites: clamped %d of %d translations to keep shapes on the canvas", clamped, n)
    return ToySprites(LabeledImageDataset(images, labels), nuisances, clamped)


def export_toy_sprites(dataset: LabeledImageDataset, out_dir) -> Path:
    """Write one PNG per image plus a ``labels.csv`` manifest of ``index,label`` lines."""
    from .generation import write_image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (image, label) in enumerate(zip(dataset.images, dataset.labels)):
        write_image(image, out / f"{i:05d}.png", "PNG")
        lines.append(f"{i},{int(label)}")
    (out / "labels.csv").write_text("\n".join(lines) + "\n")
    return out


# ---------------------------------------------------------------- splits and sampling


def split_dataset(dataset: LabeledImageDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0,
                  disjoint_identities: bool = False) -> LabeledImageDataset:
    """Tag every image train/val/test. With ``disjoint_identities`` whole classes are assigned."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.shape != (3,) or (fractions < 0).any() or abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions.tolist()}")
    rng = np.random.default_rng(seed)
    tags = np.empty(len(dataset), dtype="<U5")
    if disjoint_identities:
        classes = rng.permutation(np.unique(dataset.labels))
        bounds = _bounds(len(classes), fractions)
        for name, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
            tags[np.isin(dataset.labels, classes[lo:hi])] = name
    else:
        order = rng.permutation(len(dataset))
        bounds = _bounds(len(dataset), fractions)
        for name, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
            tags[order[lo:hi]] = name
    return LabeledImageDataset(dataset.images, dataset.labels, tags)


def _bounds(n: int, fractions: np.ndarray) -> list[int]:
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return [0, n_train, n_train + n_val, n]


class PairSampler:
    """Draws same-class pairs from one split: a class uniformly, then two distinct members."""

    def __init__(self, dataset: LabeledImageDataset, split: str = "train"):
        idx = dataset.indices(split)
        labels = dataset.labels[idx]
        order = np.argsort(labels, kind="stable")
        idx, labels = idx[order], labels[order]
        classes, starts, counts = np.unique(labels, return_index=True, return_counts=True)
        keep = counts >= 2
        if not keep.any():
            raise SamplingError(f"no class in split {split!r} has two or more images")
        self.dataset = dataset
        self.members = idx
        self.classes, self.starts, self.counts = classes[keep], starts[keep], counts[keep]

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        which = rng.integers(len(self.classes), size=batch_size)
        counts, starts = self.counts[which], self.starts[which]
        first = rng.integers(counts)
        second = rng.integers(counts - 1)
        second = second + (second >= first)
        return self.members[starts + first], self.members[starts + second]

    def sample(self, batch_size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        i, j = self.sample_indices(batch_size, rng)
        return self.dataset.images[i], self.dataset.images[j]


def sample_similar_pair_batch(dataset: LabeledImageDataset, split: str, batch_size: int,
                              rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays (i, j) with labels[i] == labels[j] and i != j."""
    return PairSampler(dataset, split).sample_indices(batch_size, rng)


def sample_independent_batch(dataset: LabeledImageDataset, split: str, batch_size: int,
                             rng: np.random.Generator) -> np.ndarray:
    idx = dataset.indices(split)
    if len(idx) == 0:
        raise SamplingError(f"split {split!r} is empty")
    return idx[rng.integers(len(idx), size=batch_size)]
