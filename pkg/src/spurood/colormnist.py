"""ColorMNIST: digit images on colored backgrounds with a controlled label-color correlation.

ID data keeps digits 0 and 1. With correlation r, digit 0 gets a red or purple
background with probability r each and green or pink with probability 0.5 - r
each; digit 1 mirrors this (green/pink with r, red/purple with 0.5 - r). r=0.25
removes the correlation.

Spurious OOD: digits 5-9 on the training colors red and green.
Non-spurious OOD: digits 5-9 on held-out colors (blue, yellow) and uniform RGB noise.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import BadMagicError, DataError, DimMismatchError, EmptyClassError, TruncatedError
from .numerics import Rng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATASET_MAGIC = b"CMN1"

COLOR_NAMES = ("red", "green", "purple", "pink", "blue", "yellow", "noise")
RED, GREEN, PURPLE, PINK, BLUE, YELLOW, NOISE = range(7)
TRAIN_COLORS = (RED, GREEN, PURPLE, PINK)
HELDOUT_COLORS = (BLUE, YELLOW)

DEFAULT_PALETTE = {
    "red": (220, 60, 60),
    "green": (60, 180, 60),
    "purple": (150, 60, 200),
    "pink": (240, 130, 180),
    "blue": (60, 90, 220),
    "yellow": (230, 210, 60),
}

FOREGROUND_THRESHOLD = 64
OOD_DIGITS = (5, 6, 7, 8, 9)


@dataclass
class IdxImages:
    images: np.ndarray  # (n, 28, 28) uint8
    labels: np.ndarray  # (n,) uint8

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DimMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class CorrelationSpec:
    r: float

    def __post_init__(self):
        if not 0.0 <= self.r <= 0.5:
            raise ValueError(f"correlation r must lie in [0, 0.5], got {self.r}")

    def color_probs(self, label: int) -> np.ndarray:
        """Probabilities over (red, green, purple, pink) for an ID label."""
        r, q = self.r, 0.5 - self.r
        return np.array([r, q, r, q]) if label == 0 else np.array([q, r, q, r])


@dataclass
class ColoredDataset:
    images: np.ndarray  # (n, 28, 28, 3) uint8
    labels: np.ndarray  # (n,) uint8: 0/1 for ID, 5-9 for digit OOD, 255 for noise
    env: np.ndarray  # (n,) uint8 index into COLOR_NAMES
    split: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def group(self) -> np.ndarray:
        """Group id ``label * 4 + env`` for ID data (8 groups)."""
        return self.labels.astype(np.int64) * len(TRAIN_COLORS) + self.env

    def subset(self, idx, split: str | None = None) -> ColoredDataset:
        return replace(
            self,
            images=self.images[idx],
            labels=self.labels[idx],
            env=self.env[idx],
            split=self.split if split is None else split,
            meta=dict(self.meta),
        )

    def features(self) -> np.ndarray:
        """Flattened inputs scaled to [-1, 1], shape (n, 2352)."""
        return self.images.reshape(len(self), -1).astype(np.float64) / 127.5 - 1.0


def _open(path):
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse one IDX file (images or labels, optionally gzipped) into a uint8 array."""
    with _open(path) as f:
        buf = f.read()
    if len(buf) < 8:
        raise TruncatedError(f"{path}: header is incomplete")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic == IMAGES_MAGIC:
        ndim = 3
    elif magic == LABELS_MAGIC:
        ndim = 1
    else:
        raise BadMagicError(f"{path}: unexpected magic {magic}")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise TruncatedError(f"{path}: header is incomplete")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(buf) - header
    if payload < expected:
        raise TruncatedError(f"{path}: payload has {payload} bytes, header promises {expected}")
    if payload > expected:
        raise DataError(f"{path}: {payload - expected} trailing bytes after payload")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims).copy()


def load_idx(images_path, labels_path) -> IdxImages:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise DataError("expected an image file (magic 2051) and a label file (magic 2049)")
    return IdxImages(images, labels)


def find_idx_pair(directory) -> tuple[Path, Path]:
    """Locate ``*images-idx3-ubyte*`` and ``*labels-idx1-ubyte*`` in a directory."""
    directory = Path(directory)
    imgs = sorted(directory.glob("*images-idx3-ubyte*"))
    labs = sorted(directory.glob("*labels-idx1-ubyte*"))
    if len(imgs) != 1 or len(labs) != 1:
        raise DataError(f"{directory}: expected exactly one images and one labels IDX file")
    return imgs[0], labs[0]


def colorize(gray: np.ndarray, env: np.ndarray, palette: dict, threshold: int = FOREGROUND_THRESHOLD) -> np.ndarray:
    """Paint pixels below ``threshold`` with each sample's background color."""
    out = np.repeat(gray[..., None], 3, axis=-1)
    table = np.array([palette[name] for name in COLOR_NAMES[:NOISE]], dtype=np.uint8)
    background = gray < threshold
    colors = np.broadcast_to(table[env][:, None, None, :], out.shape)
    out[background] = colors[background]
    return out


def _check_palette(palette: dict, names) -> None:
    missing = [n for n in names if n not in palette]
    if missing:
        raise ValueError(f"palette lacks colors: {missing}")


def compose(
    idx: IdxImages,
    spec: CorrelationSpec,
    palette: dict | None = None,
    rng: Rng | None = None,
    threshold: int = FOREGROUND_THRESHOLD,
) -> ColoredDataset:
    """Keep digits 0/1 and give each a background color drawn from the r-table."""
    palette = DEFAULT_PALETTE if palette is None else palette
    _check_palette(palette, [COLOR_NAMES[c] for c in TRAIN_COLORS])
    rng = Rng(0) if rng is None else rng
    keep = np.flatnonzero(idx.labels <= 1)
    if keep.size == 0 or not (np.any(idx.labels == 0) and np.any(idx.labels == 1)):
        raise EmptyClassError("input has no digits 0 and 1")
    labels = idx.labels[keep]
    u = rng.uniform(keep.size)
    env = np.empty(keep.size, dtype=np.uint8)
    for y in (0, 1):
        mask = labels == y
        cdf = np.cumsum(spec.color_probs(y))
        # uniforms lie in (0, 1]; side="left" maps u == cdf[k] to color k
        env[mask] = np.minimum(np.searchsorted(cdf, u[mask], side="left"), len(cdf) - 1)
    images = colorize(idx.images[keep], env, palette, threshold)
    return ColoredDataset(images, labels.copy(), env, "id", {"r": spec.r})


def _balanced_colors(n: int, colors, rng: Rng) -> np.ndarray:
    env = np.array([colors[i % len(colors)] for i in range(n)], dtype=np.uint8)
    return env[rng.permutation(n)]


def _pick(pool: np.ndarray, n: int, rng: Rng) -> np.ndarray:
    order = pool[rng.permutation(pool.size)]
    if n <= pool.size:
        return order[:n]
    return np.concatenate([order, pool[rng.integers(0, pool.size, n - pool.size)]])


def ood_splits(
    idx: IdxImages,
    palette: dict | None = None,
    rng: Rng | None = None,
    n: int = 1000,
    threshold: int = FOREGROUND_THRESHOLD,
) -> tuple[ColoredDataset, ColoredDataset]:
    """Spurious and non-spurious OOD sets of ``n`` images each per kind.

    The non-spurious set holds ``n`` held-out-color digits (env blue/yellow)
    followed by ``n`` uniform-noise images (env ``NOISE``, label 255).
    """
    palette = DEFAULT_PALETTE if palette is None else palette
    _check_palette(palette, COLOR_NAMES[:NOISE])
    rng = Rng(0) if rng is None else rng
    pool = np.flatnonzero(np.isin(idx.labels, OOD_DIGITS))
    if pool.size == 0:
        raise EmptyClassError("input has no digits 5-9")

    sp_rng, ns_rng, noise_rng = rng.child("spurious"), rng.child("heldout"), rng.child("noise")
    sel = _pick(pool, n, sp_rng)
    env = _balanced_colors(n, (RED, GREEN), sp_rng)
    spurious = ColoredDataset(
        colorize(idx.images[sel], env, palette, threshold), idx.labels[sel].copy(), env, "spurious"
    )

    sel = _pick(pool, n, ns_rng)
    env = _balanced_colors(n, HELDOUT_COLORS, ns_rng)
    held = colorize(idx.images[sel], env, palette, threshold)
    noise = noise_rng.integers(0, 256, size=(n, *idx.images.shape[1:], 3)).astype(np.uint8)
    nonspurious = ColoredDataset(
        np.concatenate([held, noise]),
        np.concatenate([idx.labels[sel], np.full(n, 255, dtype=np.uint8)]),
        np.concatenate([env, np.full(n, NOISE, dtype=np.uint8)]),
        "nonspurious",
    )
    return spurious, nonspurious


def nonspurious_sets(ds: ColoredDataset) -> dict[str, ColoredDataset]:
    """Split a non-spurious dataset into its named OOD sets."""
    return {
        "heldout_color": ds.subset(np.flatnonzero(np.isin(ds.env, HELDOUT_COLORS)), "heldout_color"),
        "noise": ds.subset(np.flatnonzero(ds.env == NOISE), "noise"),
    }


def split_id(ds: ColoredDataset, rng: Rng, test_frac: float = 0.2, val_frac: float = 0.2):
    """Shuffle into (train, val, test); val is ``val_frac`` of the non-test pool."""
    order = rng.permutation(len(ds))
    n_test = int(round(test_frac * len(ds)))
    test, pool = order[:n_test], order[n_test:]
    n_val = int(round(val_frac * pool.size))
    val, train = pool[:n_val], pool[n_val:]
    return ds.subset(np.sort(train), "train"), ds.subset(np.sort(val), "val"), ds.subset(np.sort(test), "test")


def label_color_mutual_information(labels: np.ndarray, env: np.ndarray) -> float:
    """Plug-in estimate of I(label; color) in bits."""
    ys, yi = np.unique(labels, return_inverse=True)
    es, ei = np.unique(env, return_inverse=True)
    joint = np.zeros((ys.size, es.size))
    np.add.at(joint, (yi, ei), 1.0)
    joint /= joint.sum()
    py = joint.sum(axis=1, keepdims=True)
    pe = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log2(joint[nz] / (py @ pe)[nz])))


def save_dataset(path, ds: ColoredDataset, manifest: dict | None = None) -> None:
    """Write ``CMN1`` binary (little-endian header) plus a ``.manifest`` text file."""
    n, h, w, c = ds.images.shape
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<IIII", n, h, w, c))
        f.write(np.ascontiguousarray(ds.images, dtype=np.uint8).tobytes())
        f.write(np.ascontiguousarray(ds.labels, dtype=np.uint8).tobytes())
        f.write(np.ascontiguousarray(ds.env, dtype=np.uint8).tobytes())
    info = {"split": ds.split, **ds.meta, **(manifest or {})}
    lines = [f"{k} = {v}" for k, v in info.items()]
    Path(str(path) + ".manifest").write_text("\n".join(lines) + "\n")


def load_dataset(path) -> ColoredDataset:
    buf = Path(path).read_bytes()
    if buf[:4] != DATASET_MAGIC:
        raise BadMagicError(f"{path}: expected magic {DATASET_MAGIC!r}")
    if len(buf) < 20:
        raise TruncatedError(f"{path}: header is incomplete")
    n, h, w, c = struct.unpack("<IIII", buf[4:20])
    size = n * h * w * c
    if len(buf) < 20 + size + 2 * n:
        raise TruncatedError(f"{path}: payload shorter than header promises")
    images = np.frombuffer(buf, np.uint8, size, 20).reshape(n, h, w, c).copy()
    labels = np.frombuffer(buf, np.uint8, n, 20 + size).copy()
    env = np.frombuffer(buf, np.uint8, n, 20 + size + n).copy()
    split = ""
    manifest = Path(str(path) + ".manifest")
    if manifest.exists():
        for line in manifest.read_text().splitlines():
            key, _, value = line.partition("=")
            if key.strip() == "split":
                split = value.strip()
    return ColoredDataset(images, labels, env, split)
