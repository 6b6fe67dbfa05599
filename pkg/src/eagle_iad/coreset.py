"""Greedy k-center coreset selection with per-image provenance.

The bank keeps the original (unprojected) patch vectors; the random
projection is only used to rank candidates during selection.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .features import FeatureGrid, load_feature_grid, save_feature_grid
from .neighbors import nearest_neighbors

TRACE_SCHEMA_VERSION = 1
START_RULES = ("max_norm", "first")


class PatchFeature(NamedTuple):
    vector: np.ndarray
    source_image: int
    source_patch: int


@dataclass(frozen=True)
class PatchSet:
    """All training patches, stacked. Row ``g`` is global patch id ``g``."""

    vectors: np.ndarray
    image_index: np.ndarray
    patch_index: np.ndarray
    n_images: int

    @classmethod
    def from_grids(cls, grids: Sequence[FeatureGrid]) -> "PatchSet":
        if not grids:
            raise ValueError("no feature grids given")
        c = grids[0].channels
        blocks, img, pat = [], [], []
        for i, g in enumerate(grids):
            if g.channels != c:
                raise ValueError(f"grid {i} has {g.channels} channels, expected {c}")
            p = g.patches()
            blocks.append(p)
            img.append(np.full(len(p), i, dtype=np.int64))
            pat.append(np.arange(len(p), dtype=np.int64))
        return cls(np.concatenate(blocks), np.concatenate(img), np.concatenate(pat), len(grids))

    @classmethod
    def from_features(cls, features: Sequence[PatchFeature]) -> "PatchSet":
        if not features:
            raise ValueError("empty feature list")
        vectors = np.stack([np.asarray(f.vector, dtype=np.float32) for f in features])
        img = np.array([f.source_image for f in features], dtype=np.int64)
        pat = np.array([f.source_patch for f in features], dtype=np.int64)
        return cls(vectors, img, pat, int(img.max()) + 1)

    def __len__(self):
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def of_image(self, i: int) -> np.ndarray:
        """Global ids of image ``i``'s patches, in patch order."""
        return np.flatnonzero(self.image_index == i)

    def counts(self) -> dict[int, int]:
        return {i: int(n) for i, n in enumerate(np.bincount(self.image_index, minlength=self.n_images))}


@dataclass(frozen=True)
class ProjectionMatrix:
    seed: int
    out_dim: int
    in_dim: int

    @property
    def matrix(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        return rng.normal(0.0, 1.0 / np.sqrt(self.out_dim), size=(self.out_dim, self.in_dim))

    def apply(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.in_dim:
            raise ValueError(f"projection expects {self.in_dim} input dims, got {x.shape[1]}")
        return np.asarray(x, dtype=np.float64) @ self.matrix.T

    @classmethod
    def default(cls, in_dim: int, seed: int = 0, max_dim: int = 128) -> "ProjectionMatrix":
        return cls(seed=seed, out_dim=min(in_dim, max_dim), in_dim=in_dim)


@dataclass(frozen=True)
class CoresetTrace:
    memory_bank: np.ndarray  # (l, C), unprojected
    selection_order: np.ndarray  # global patch ids in pick order
    bank_image: np.ndarray
    bank_patch: np.ndarray
    total_patches_by_image: dict[int, int]
    projection: ProjectionMatrix | None = None
    start_rule: str = "max_norm"

    def __len__(self):
        return len(self.memory_bank)

    @property
    def sampled_by_image(self) -> dict[int, set[int]]:
        out: dict[int, set[int]] = {i: set() for i in self.total_patches_by_image}
        for i, j in zip(self.bank_image.tolist(), self.bank_patch.tolist()):
            out[i].add(j)
        return out

    def source_of(self, row: int) -> tuple[int, int]:
        return int(self.bank_image[row]), int(self.bank_patch[row])


def _max_norm_start(proj: np.ndarray) -> int:
    return int(np.argmax(np.einsum("ij,ij->i", proj, proj)))


def build_coreset(
    patches: PatchSet,
    target_fraction: float = 0.10,
    projection: ProjectionMatrix | None = None,
    start: str = "max_norm",
) -> CoresetTrace:
    """Farthest-first selection of ``round(target_fraction * N)`` patches.

    Each step picks the unselected patch whose projected distance to the
    current selection is largest (lowest global id on ties). ``start`` is
    either ``"max_norm"`` (largest projected norm) or ``"first"`` (id 0).
    """
    n = len(patches)
    if n == 0:
        raise ValueError("empty feature list")
    if not 0.0 < target_fraction <= 1.0:
        raise ValueError(f"target_fraction must lie in (0, 1], got {target_fraction}")
    k = int(round(target_fraction * n))
    if k < 1:
        raise ValueError(f"target_fraction {target_fraction} selects no patches out of {n}")
    if start not in START_RULES:
        raise ValueError(f"unknown start rule {start!r}")

    x = projection.apply(patches.vectors) if projection is not None else patches.vectors.astype(np.float64)
    first = _max_norm_start(x) if start == "max_norm" else 0

    order = np.empty(k, dtype=np.int64)
    order[0] = first
    diff = x - x[first]
    min_d2 = np.einsum("ij,ij->i", diff, diff)
    min_d2[first] = -1.0
    for t in range(1, k):
        nxt = int(np.argmax(min_d2))
        order[t] = nxt
        diff = x - x[nxt]
        np.minimum(min_d2, np.einsum("ij,ij->i", diff, diff), out=min_d2)
        min_d2[nxt] = -1.0

    return CoresetTrace(
        memory_bank=np.ascontiguousarray(patches.vectors[order]),
        selection_order=order,
        bank_image=patches.image_index[order],
        bank_patch=patches.patch_index[order],
        total_patches_by_image=patches.counts(),
        projection=projection,
        start_rule=start,
    )


def unsampled_of(trace: CoresetTrace) -> dict[int, list[int]]:
    """Per-image sorted list of patch indices that did not enter the bank."""
    sampled = trace.sampled_by_image
    return {
        i: sorted(set(range(total)) - sampled[i])
        for i, total in trace.total_patches_by_image.items()
    }


def coreset_cover_radius(trace: CoresetTrace, patches: PatchSet) -> float:
    dist, _ = nearest_neighbors(patches.vectors, trace.memory_bank)
    return float(dist.max())


# --------------------------------------------------------------------------- persistence


def save_trace(trace: CoresetTrace, out_dir, image_ids: Sequence[str], config_hash: str = "") -> None:
    """Write ``bank.eaglfeat`` (C x l x 1 grid) and the ``bank_index.json`` sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_feature_grid(FeatureGrid(trace.memory_bank.T[:, :, None]), out / "bank.eaglfeat")
    proj = trace.projection
    doc = {
        "schema_version": TRACE_SCHEMA_VERSION,
        "config_hash": config_hash,
        "start_rule": trace.start_rule,
        "projection": None if proj is None else {"seed": proj.seed, "out_dim": proj.out_dim, "in_dim": proj.in_dim},
        "image_ids": list(image_ids),
        "total_patches_by_image": [trace.total_patches_by_image[i] for i in range(len(image_ids))],
        "rows": [
            {"row": r, "global_id": int(g), "image_id": image_ids[int(i)], "patch_index": int(j)}
            for r, (g, i, j) in enumerate(zip(trace.selection_order, trace.bank_image, trace.bank_patch))
        ],
    }
    (out / "bank_index.json").write_text(json.dumps(doc, indent=1) + "\n")
    unsampled = unsampled_of(trace)
    (out / "unsampled.json").write_text(
        json.dumps(
            {
                "schema_version": TRACE_SCHEMA_VERSION,
                "config_hash": config_hash,
                "unsampled": {image_ids[i]: v for i, v in unsampled.items()},
            }
        )
        + "\n"
    )


def load_trace(out_dir) -> tuple[CoresetTrace, list[str], dict]:
    out = Path(out_dir)
    doc = json.loads((out / "bank_index.json").read_text())
    if doc.get("schema_version") != TRACE_SCHEMA_VERSION:
        raise ValueError(f"unsupported bank schema version {doc.get('schema_version')}")
    bank = load_feature_grid(out / "bank.eaglfeat").data[:, :, 0].T
    ids = doc["image_ids"]
    pos = {name: i for i, name in enumerate(ids)}
    rows = doc["rows"]
    p = doc["projection"]
    trace = CoresetTrace(
        memory_bank=np.ascontiguousarray(bank),
        selection_order=np.array([r["global_id"] for r in rows], dtype=np.int64),
        bank_image=np.array([pos[r["image_id"]] for r in rows], dtype=np.int64),
        bank_patch=np.array([r["patch_index"] for r in rows], dtype=np.int64),
        total_patches_by_image=dict(enumerate(doc["total_patches_by_image"])),
        projection=None if p is None else ProjectionMatrix(p["seed"], p["out_dim"], p["in_dim"]),
        start_rule=doc["start_rule"],
    )
    return trace, ids, doc
