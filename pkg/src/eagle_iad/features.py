"""Patch-feature grids: the ``.eaglfeat`` binary format, local patch
aggregation and a seeded synthetic dataset generator.

File layout (all little-endian)::

    8 bytes   magic  b"EAGLFEAT"
    3 x u32   C, H, W
    C*H*W f32 payload, c-major then h then w
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

MAGIC = b"EAGLFEAT"
_HEADER = struct.Struct("<8s3I")

SPLITS = ("train_normal", "test_normal", "test_anomalous")
LABELS = ("normal", "anomalous")
MANIFEST_SCHEMA_VERSION = 1


class FeatureLoadError(ValueError):
    """Raised when an ``.eaglfeat`` file cannot be decoded."""


class TruncatedFeatureError(FeatureLoadError):
    pass


@dataclass(frozen=True)
class FeatureGrid:
    """A C x H x W patch-feature tensor for one image."""

    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"feature grid must be a non-empty (C, H, W) array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature grid contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def patches(self) -> np.ndarray:
        """(H*W, C) matrix of patch vectors in row-major (h, w) order."""
        return self.data.reshape(self.channels, -1).T

    def __eq__(self, other):
        if not isinstance(other, FeatureGrid):
            return NotImplemented
        return self.data.shape == other.data.shape and self.data.tobytes() == other.data.tobytes()

    def __hash__(self):
        return hash((self.data.shape, self.data.tobytes()))


def encode_feature_grid(grid: FeatureGrid) -> bytes:
    c, h, w = grid.data.shape
    return _HEADER.pack(MAGIC, c, h, w) + grid.data.astype("<f4", copy=False).tobytes()


def decode_feature_grid(buf: bytes) -> FeatureGrid:
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise FeatureLoadError("bad magic: not an EAGLFEAT file")
    if len(buf) < _HEADER.size:
        raise TruncatedFeatureError("truncated header")
    _, c, h, w = _HEADER.unpack_from(buf)
    if min(c, h, w) < 1:
        raise FeatureLoadError(f"invalid dimensions C={c} H={h} W={w}")
    n = c * h * w
    payload = buf[_HEADER.size:]
    if len(payload) < 4 * n:
        raise TruncatedFeatureError(f"truncated payload: expected {4 * n} bytes, got {len(payload)}")
    if len(payload) > 4 * n:
        raise FeatureLoadError(f"trailing bytes after payload ({len(payload) - 4 * n})")
    data = np.frombuffer(payload, dtype="<f4").reshape(c, h, w)
    if not np.all(np.isfinite(data)):
        raise FeatureLoadError("payload contains non-finite values")
    return FeatureGrid(data.astype(np.float32))


def save_feature_grid(grid: FeatureGrid, path) -> None:
    Path(path).write_bytes(encode_feature_grid(grid))


def load_feature_grid(path) -> FeatureGrid:
    return decode_feature_grid(Path(path).read_bytes())


def aggregate_patches(grid: FeatureGrid, patchsize: int = 3, stride: int = 1) -> FeatureGrid:
    """Channel-wise mean over each ``patchsize`` x ``patchsize`` neighbourhood.

    Borders are zero padded and the mean is always taken over the full window,
    so a corner of a constant grid shrinks by ``(k+1)^2 / patchsize^2`` where
    ``k = patchsize // 2``. The result is sampled every ``stride`` locations,
    giving ``ceil(H / stride)`` x ``ceil(W / stride)``.
    """
    if patchsize < 1 or patchsize % 2 == 0:
        raise ValueError(f"patchsize must be a positive odd integer, got {patchsize}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if patchsize > min(grid.height, grid.width):
        raise ValueError(f"patchsize {patchsize} exceeds grid size {grid.height}x{grid.width}")
    if patchsize == 1:
        pooled = grid.data
    else:
        pooled = ndimage.uniform_filter(
            grid.data.astype(np.float64), size=(1, patchsize, patchsize), mode="constant", cval=0.0
        )
    return FeatureGrid(pooled[:, ::stride, ::stride].astype(np.float32))


# --------------------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    feature_path: str
    split: str
    label: str
    mask_path: str | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")
        if self.split == "train_normal" and self.label != "normal":
            raise ValueError(f"training entry {self.image_id!r} must be labelled normal")


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = Path(".")
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("image ids in a manifest must be unique")

    def split(self, name: str) -> list[ManifestEntry]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [e for e in self.entries if e.split == name]

    def resolve(self, relpath: str) -> Path:
        p = Path(relpath)
        return p if p.is_absolute() else self.root / p

    def load_grid(self, entry: ManifestEntry) -> FeatureGrid:
        return load_feature_grid(self.resolve(entry.feature_path))

    def load_mask(self, entry: ManifestEntry) -> np.ndarray | None:
        if entry.mask_path is None:
            return None
        return np.load(self.resolve(entry.mask_path))

    def to_json(self) -> str:
        doc = {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "meta": self.meta,
            "entries": [
                {
                    "split": e.split,
                    "image_id": e.image_id,
                    "feature_path": e.feature_path,
                    "mask_path": e.mask_path,
                    "label": e.label,
                }
                for e in self.entries
            ],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        entries = [
            ManifestEntry(
                image_id=r["image_id"],
                feature_path=r["feature_path"],
                split=r["split"],
                label=r["label"],
                mask_path=r.get("mask_path"),
            )
            for r in doc["entries"]
        ]
        return cls(entries=entries, root=path.parent, meta=doc.get("meta", {}))


# --------------------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticParams:
    n_components: int = 4
    component_spread: float = 3.0
    noise_sigma: float = 1.0
    latent_angles: int = 2
    jitter_sigma: float = 0.01
    pixel_scale: int = 8
    min_rect: int = 2
    max_rect: int = 3


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def _latent_basis(rng: np.random.Generator, channels: int, angles: int) -> np.ndarray:
    k = 2 * angles
    if k > channels:
        raise ValueError(f"{angles} latent angles need at least {k} channels, got {channels}")
    q, _ = np.linalg.qr(rng.standard_normal((channels, k)))
    return q.T


def _normal_grid(rng, means, basis, params: SyntheticParams, shape) -> np.ndarray:
    c, h, w = shape
    n = h * w
    comp = rng.integers(len(means), size=n)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=(n, len(basis) // 2))
    z = np.concatenate([np.cos(theta), np.sin(theta)], axis=1)
    patches = means[comp] + params.noise_sigma * (z @ basis) + params.jitter_sigma * rng.standard_normal((n, c))
    return patches.T.reshape(c, h, w)


def generate_synthetic_dataset(
    out_dir,
    seed: int = 0,
    n_train: int = 100,
    n_test_normal: int = 50,
    n_test_anom: int = 50,
    grid_shape: tuple[int, int, int] = (8, 12, 12),
    anomaly_shift: float = 10.0,
    params: SyntheticParams = SyntheticParams(),
) -> DatasetManifest:
    """Write a seeded synthetic one-class dataset under ``out_dir``.

    Every patch picks one of ``params.n_components`` mixture components whose
    means are Gaussian draws keyed by ``seed``. Around its mean a patch varies
    on a low-dimensional torus of radius ``params.noise_sigma`` (the generator
    sigma) plus a small isotropic Gaussian jitter, which mimics the bounded,
    low-rank spread of real CNN patch descriptors. Anomalous grids are drawn
    the same way and then a random rectangle of patches is moved by
    ``anomaly_shift`` along a fixed unit direction. The rectangle is stored as
    a binary mask at ``params.pixel_scale`` pixels per patch.
    """
    if anomaly_shift < 0:
        raise ValueError("anomaly_shift must be non-negative")
    c, h, w = grid_shape
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)

    base = _rng(seed, 0)
    means = params.component_spread * base.standard_normal((params.n_components, c))
    direction = base.standard_normal(c)
    direction /= np.linalg.norm(direction)
    basis = _latent_basis(base, c, params.latent_angles)

    entries: list[ManifestEntry] = []
    counts = {"train_normal": n_train, "test_normal": n_test_normal, "test_anomalous": n_test_anom}
    for code, split in enumerate(SPLITS, start=1):
        for idx in range(counts[split]):
            rng = _rng(seed, code, idx)
            data = _normal_grid(rng, means, basis, params, grid_shape)
            image_id = f"{split}_{idx:04d}"
            feature_path = f"features/{image_id}.eaglfeat"
            mask_path = None
            label = "normal"
            if split == "test_anomalous":
                label = "anomalous"
                hi = min(params.max_rect, h, w)
                lo = min(params.min_rect, hi)
                rh, rw = rng.integers(lo, hi + 1, size=2)
                r0 = int(rng.integers(0, h - rh + 1))
                c0 = int(rng.integers(0, w - rw + 1))
                data[:, r0:r0 + rh, c0:c0 + rw] += anomaly_shift * direction[:, None, None]
                mask = np.zeros((h, w), dtype=np.uint8)
                mask[r0:r0 + rh, c0:c0 + rw] = 1
                s = params.pixel_scale
                mask_path = f"masks/{image_id}.npy"
                np.save(out / mask_path, np.kron(mask, np.ones((s, s), dtype=np.uint8)))
            save_feature_grid(FeatureGrid(data), out / feature_path)
            entries.append(ManifestEntry(image_id, feature_path, split, label, mask_path))

    manifest = DatasetManifest(
        entries=entries,
        root=out,
        meta={
            "seed": seed,
            "grid_shape": list(grid_shape),
            "anomaly_shift": anomaly_shift,
            "noise_sigma": params.noise_sigma,
            "pixel_scale": params.pixel_scale,
        },
    )
    manifest.save(out / "manifest.json")
    return manifest


def patch_mask(pixel_mask: np.ndarray, grid_hw: tuple[int, int]) -> np.ndarray:
    """Downsample a pixel mask to a boolean patch-grid mask (any pixel set)."""
    h, w = grid_hw
    sy, sx = pixel_mask.shape[0] // h, pixel_mask.shape[1] // w
    return pixel_mask[: h * sy, : w * sx].reshape(h, sy, w, sx).any(axis=(1, 3))


def iter_grids(manifest: DatasetManifest, entries: Iterable[ManifestEntry]):
    for e in entries:
        yield e, manifest.load_grid(e)
