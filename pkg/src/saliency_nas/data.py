"""Synthetic saliency data, its on-disk format, loaders and splits.

Directory layout::

    DIR/manifest.json
    DIR/samples/000000.bin, 000001.bin, ...

Each sample file is a 16-byte little-endian header followed by float32
values in row-major order::

    offset 0   4s   magic b"SALS"
    offset 4   u16  rank (always 3)
    offset 6   u16  channels C (always 5)
    offset 8   u32  height H
    offset 12  u32  width W
    offset 16  f32[C*H*W]  image R, G, B, density, fixations
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .rng import stream

GENERATOR_VERSION = "blobs-v1"
MAGIC = b"SALS"
HEADER = struct.Struct("<4sHHII")
CHANNELS = 5
TRUNCATE = 3.0


class DatasetError(ValueError):
    """Malformed dataset directory or sample file."""


@dataclass
class SaliencyDataset:
    """Stacked samples: images (N,3,H,W), densities and fixations (N,1,H,W)."""

    images: np.ndarray
    densities: np.ndarray
    fixations: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.images.shape[2:])

    def subset(self, indices: Sequence[int]) -> "SaliencyDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return SaliencyDataset(self.images[idx], self.densities[idx], self.fixations[idx],
                               dict(self.manifest, indices=[int(i) for i in idx]))

    def validate(self) -> None:
        n, c, h, w = self.images.shape
        if c != 3 or self.densities.shape != (n, 1, h, w) or self.fixations.shape != (n, 1, h, w):
            raise DatasetError("images/densities/fixations shapes disagree")
        if self.images.min() < 0 or self.images.max() > 1:
            raise DatasetError("image values outside [0, 1]")
        if (self.densities < 0).any():
            raise DatasetError("negative density values")
        sums = self.densities.reshape(n, -1).sum(axis=1, dtype=np.float64)
        if np.abs(sums - 1).max() > 1e-4:
            raise DatasetError(f"density maps do not sum to 1 (worst {sums[np.argmax(np.abs(sums - 1))]})")
        if not np.isin(self.fixations, (0, 1)).all():
            raise DatasetError("fixation maps must be binary")
        counts = self.fixations.reshape(n, -1).sum(axis=1)
        if counts.min() < 1 or counts.max() > h * w - 1:
            raise DatasetError("each fixation map needs between 1 and H*W-1 fixations")


def blur_fixations(fix: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur (zero boundary, truncated at 3 sigma) renormalized to sum 1."""
    g = gaussian_filter(fix.astype(np.float64), sigma=sigma, mode="constant", cval=0.0, truncate=TRUNCATE)
    return g / g.sum()


def blur_radius(sigma: float) -> int:
    return int(TRUNCATE * sigma + 0.5)


def gen_synthetic(n: int, resolution: tuple[int, int] = (32, 24), k_fixations: tuple[int, int] = (1, 3),
                  blur_sigma: float = 1.5, seed: int = 0, blob_sigma: float | None = None) -> SaliencyDataset:
    """Bright Gaussian blobs over textured noise; fixations at the blob centres."""
    h, w = resolution
    if n < 2:
        raise DatasetError(f"need at least 2 samples, got {n}")
    if h < 8 or w < 8:
        raise DatasetError(f"resolution {h}x{w} below the 8x8 minimum")
    kmin, kmax = k_fixations
    if not 1 <= kmin <= kmax or kmax > h * w - 1:
        raise DatasetError(f"invalid fixation-count range {k_fixations}")
    blob_sigma = blob_sigma if blob_sigma is not None else max(1.0, min(h, w) / 12)
    yy, xx = np.mgrid[0:h, 0:w]

    images = np.empty((n, 3, h, w), np.float32)
    dens = np.empty((n, 1, h, w), np.float32)
    fixs = np.zeros((n, 1, h, w), np.float32)
    for i in range(n):
        r = stream(seed, f"sample/{i}")
        texture = gaussian_filter(r.random((3, h, w)), sigma=(0, 1.0, 1.0))
        texture = 0.35 * (texture - texture.min()) / max(np.ptp(texture), 1e-12)
        k = int(r.integers(kmin, kmax + 1))
        ys = r.integers(0, h, size=k)
        xs = r.integers(0, w, size=k)
        blobs = np.zeros((3, h, w))
        for y, x in zip(ys, xs):
            tint = 0.75 + 0.25 * r.random(3)
            bump = np.exp(-((yy - y) ** 2 + (xx - x) ** 2) / (2 * blob_sigma ** 2))
            blobs += tint[:, None, None] * bump[None]
            fixs[i, 0, y, x] = 1.0
        images[i] = np.clip(texture + 0.65 * blobs, 0.0, 1.0)
        dens[i, 0] = blur_fixations(fixs[i, 0], blur_sigma)
    manifest = {"format": "saliency-nas-dataset", "generator_version": GENERATOR_VERSION, "n": n,
                "resolution": [h, w], "seed": seed, "k_fixations": [kmin, kmax],
                "blur_sigma": blur_sigma, "blob_sigma": blob_sigma}
    ds = SaliencyDataset(images, dens, fixs, manifest)
    # at least one validation sample even for tiny n
    n_val = max(1, int(round(0.2 * n)))
    train, _ = split_indices(n, (1 - n_val / n, n_val / n), seed)
    ds.manifest["split"] = ["train" if j in set(train) else "val" for j in range(n)]
    return ds


# ------------------------------------------------------------------ splits
def split_indices(n: int, fractions: Sequence[float], seed: int) -> tuple[list[int], list[int]]:
    if len(fractions) != 2 or min(fractions) < 0 or abs(sum(fractions) - 1) > 1e-9:
        raise DatasetError(f"split fractions must be two non-negative numbers summing to 1, got {fractions}")
    n_val = int(round(n * fractions[1]))
    if n_val < 1:
        raise DatasetError("validation split is empty; a non-empty val split is required")
    if n_val >= n:
        raise DatasetError("training split is empty")
    perm = stream(seed, "split").permutation(n)
    return sorted(int(i) for i in perm[n_val:]), sorted(int(i) for i in perm[:n_val])


def split(ds: SaliencyDataset, fractions: Sequence[float] = (0.8, 0.2),
          seed: int = 0) -> tuple[SaliencyDataset, SaliencyDataset]:
    train, val = split_indices(len(ds), fractions, seed)
    return ds.subset(train), ds.subset(val)


def manifest_split(ds: SaliencyDataset) -> tuple[SaliencyDataset, SaliencyDataset]:
    """Train/val partition recorded in the manifest."""
    labels = ds.manifest.get("split")
    if labels is None or len(labels) != len(ds):
        raise DatasetError("manifest carries no split assignment")
    train = [i for i, s in enumerate(labels) if s == "train"]
    val = [i for i, s in enumerate(labels) if s == "val"]
    if not train or not val:
        raise DatasetError("manifest split leaves train or val empty")
    return ds.subset(train), ds.subset(val)


def iter_batches(ds: SaliencyDataset, batch_size: int,
                 rng: np.random.Generator | None = None) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield (images, densities, fixations); manifest order unless ``rng`` shuffles."""
    order = np.arange(len(ds)) if rng is None else rng.permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        yield ds.images[idx], ds.densities[idx], ds.fixations[idx]


# ------------------------------------------------------------------ disk IO
def _encode(sample: np.ndarray) -> bytes:
    c, h, w = sample.shape
    return HEADER.pack(MAGIC, 3, c, h, w) + np.ascontiguousarray(sample, dtype="<f4").tobytes()


def _decode(blob: bytes, path) -> np.ndarray:
    if len(blob) < HEADER.size:
        raise DatasetError(f"{path}: truncated header, expected {HEADER.size} bytes, got {len(blob)}")
    magic, rank, c, h, w = HEADER.unpack_from(blob)
    if magic != MAGIC or rank != 3:
        raise DatasetError(f"{path}: bad header (magic={magic!r}, rank={rank})")
    expected = HEADER.size + 4 * c * h * w
    if len(blob) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes, got {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=HEADER.size).reshape(c, h, w).astype(np.float32)


def save_dataset(ds: SaliencyDataset, path: str | Path) -> None:
    root = Path(path)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    for i in range(len(ds)):
        sample = np.concatenate([ds.images[i], ds.densities[i], ds.fixations[i]], axis=0)
        (root / "samples" / f"{i:06d}.bin").write_bytes(_encode(sample))
    manifest = dict(ds.manifest, n=len(ds), resolution=list(ds.resolution), channels=CHANNELS,
                    sample_bytes=HEADER.size + 4 * CHANNELS * ds.resolution[0] * ds.resolution[1])
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> SaliencyDataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DatasetError(f"{root}: missing manifest.json")
    try:
        manifest = json.loads(mpath.read_text())
        n, (h, w) = int(manifest["n"]), manifest["resolution"]
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"{mpath}: corrupt manifest ({exc})") from None
    samples = []
    for i in range(n):
        fp = root / "samples" / f"{i:06d}.bin"
        if not fp.is_file():
            raise DatasetError(f"{fp}: missing sample file")
        arr = _decode(fp.read_bytes(), fp)
        if arr.shape != (CHANNELS, h, w):
            raise DatasetError(f"{fp}: extents {arr.shape} disagree with manifest ({CHANNELS}, {h}, {w})")
        samples.append(arr)
    stack = np.stack(samples)
    ds = SaliencyDataset(stack[:, 0:3].copy(), stack[:, 3:4].copy(), stack[:, 4:5].copy(), manifest)
    ds.validate()
    return ds
