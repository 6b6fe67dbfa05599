"""Patch and image anomaly scores, anomaly maps and box localisation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .coreset import CoresetTrace
from .features import FeatureGrid
from .neighbors import nearest_neighbors


@dataclass(frozen=True)
class ScoreGrid:
    scores: np.ndarray  # (H, W) nearest-neighbour distances
    nearest_ids: np.ndarray  # (H, W) memory-bank rows

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]


@dataclass(frozen=True)
class ImageScore:
    value: float
    argmax_patch: tuple[int, int]

    def argmax_index(self, width: int) -> int:
        return self.argmax_patch[0] * width + self.argmax_patch[1]


@dataclass(frozen=True)
class AnomalyMap:
    values: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class BoundingBox:
    x0: int
    y0: int
    x1: int
    y1: int
    peak_score: float
    area: int = 0

    def as_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1, "peak": self.peak_score}


def _bank(bank) -> np.ndarray:
    return bank.memory_bank if isinstance(bank, CoresetTrace) else np.asarray(bank)


def score_grid(grid: FeatureGrid, bank) -> ScoreGrid:
    """Exact nearest-neighbour distance of every patch to the memory bank."""
    m = _bank(bank)
    if m.shape[1] != grid.channels:
        raise ValueError(f"grid has {grid.channels} channels but bank vectors have {m.shape[1]}")
    dist, ids = nearest_neighbors(grid.patches(), m)
    shape = (grid.height, grid.width)
    return ScoreGrid(dist.reshape(shape), ids.reshape(shape))


def image_score(sg: ScoreGrid) -> ImageScore:
    flat = int(np.argmax(sg.scores))
    h, w = divmod(flat, sg.width)
    return ImageScore(float(sg.scores.reshape(-1)[flat]), (h, w))


def _bilinear_axis(n_in: int, n_out: int):
    # align_corners=False: pixel centres, source coordinate clamped at the edges
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def upsample_map(sg: ScoreGrid | np.ndarray, target: tuple[int, int], blur_sigma: float = 0.0) -> AnomalyMap:
    """Bilinear upsampling of patch scores to ``target`` = (H_img, W_img).

    Uses the align-corners-false convention (patch centres sit at
    ``(k + 0.5) * scale``). ``blur_sigma`` > 0 applies a Gaussian blur
    afterwards; it is off by default.
    """
    s = np.asarray(sg.scores if isinstance(sg, ScoreGrid) else sg, dtype=np.float64)
    h_out, w_out = target
    if h_out < s.shape[0] or w_out < s.shape[1]:
        raise ValueError(f"target {target} is smaller than the score grid {s.shape}")
    r0, r1, wr = _bilinear_axis(s.shape[0], h_out)
    c0, c1, wc = _bilinear_axis(s.shape[1], w_out)
    rows = s[r0] * (1.0 - wr)[:, None] + s[r1] * wr[:, None]
    out = rows[:, c0] * (1.0 - wc)[None, :] + rows[:, c1] * wc[None, :]
    if blur_sigma > 0:
        out = ndimage.gaussian_filter(out, blur_sigma, mode="nearest")
    return AnomalyMap(out)


_EIGHT = np.ones((3, 3), dtype=bool)


def extract_boxes(amap: AnomalyMap | np.ndarray, threshold: float, min_area: int = 1) -> list[BoundingBox]:
    """Tight boxes around 8-connected components of ``values >= threshold``.

    Components smaller than ``min_area`` pixels are dropped. Boxes are
    inclusive pixel coordinates, sorted by descending peak score.
    """
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    values = np.asarray(amap.values if isinstance(amap, AnomalyMap) else amap)
    labels, n = ndimage.label(values >= threshold, structure=_EIGHT)
    if n == 0:
        return []
    idx = np.arange(1, n + 1)
    peaks = ndimage.maximum(values, labels, idx)
    areas = ndimage.sum_labels(np.ones_like(values), labels, idx)
    boxes = []
    for sl, peak, area in zip(ndimage.find_objects(labels), peaks, areas):
        if area < min_area:
            continue
        ys, xs = sl
        boxes.append(BoundingBox(xs.start, ys.start, xs.stop - 1, ys.stop - 1, float(peak), int(area)))
    boxes.sort(key=lambda b: -b.peak_score)
    return boxes
