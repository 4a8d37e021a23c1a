"""Region-level weak supervision and the dominant-polygon pixel baseline.

The regional loss compares, for every labelled polygon in a batch, the mean
predicted class probabilities over its sea pixels with the chart's
concentration vector using cross-entropy, and sums the result over all
polygons of all images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .icechart import EXCLUDED, NUM_CLASSES, dominant_class

PROB_FLOOR = 1e-7
IGNORE = 255


class EmptyPolygonError(ValueError):
    """The polygon has no sea pixels left after land masking."""


class MissingChartEntryError(KeyError):
    def __str__(self) -> str:
        return f"polygon {self.args[0]} present in map but absent from chart"


@dataclass
class LossDiagnostics:
    n_polygons: int = 0
    n_excluded: int = 0
    empty_polygons: list[tuple[int, int]] = field(default_factory=list)  # (image, polygon id)


def aggregate_polygon(probs, polygon_map, land_mask, polygon_id: int):
    """Mean class probabilities over the polygon's sea pixels.

    Args:
        probs: (C, H, W) Tensor or array.
        polygon_map, land_mask: (H, W) grids.

    Returns:
        A (C,) Tensor when ``probs`` is a Tensor, otherwise an array.

    Raises:
        EmptyPolygonError: no pixel of the polygon is sea.
    """
    sel = (np.asarray(polygon_map) == polygon_id) & (np.asarray(land_mask) == 0)
    if not sel.any():
        raise EmptyPolygonError(f"polygon {polygon_id} has no sea pixels")
    if not isinstance(probs, ad.Tensor):
        return np.asarray(probs)[:, sel].mean(axis=1)
    c, h, w = probs.shape
    seg = np.where(sel, 0, -1)[None]
    return ad.reshape(ad.segment_mean(ad.reshape(probs, (1, c, h, w)), seg, 1), (c,))


def region_ce(pred, label) -> ad.Tensor:
    """-(1/n) * sum_i label_i * ln(clamp(pred_i, 1e-7, 1)) with n classes.

    ``pred`` may be a (n,) vector or an (S, n) stack of polygons, in which
    case the per-polygon losses are summed.
    """
    pred = ad.as_tensor(pred)
    label = np.asarray(label, dtype=pred.dtype)
    n = pred.shape[-1]
    return ad.mul(ad.tsum(ad.mul(ad.log(ad.clip(pred, PROB_FLOOR, 1.0)), label)), -1.0 / n)


def polygon_segments(polygon_maps, land_masks, charts, diag: LossDiagnostics | None = None):
    """Assign one segment per usable polygon, in (image, ascending id) order.

    Returns:
        (segments, labels): a (B, H, W) int map with -1 for ignored pixels and
        an (S, 4) array of chart labels aligned with segment numbers.
    """
    polygon_maps = np.asarray(polygon_maps)
    land_masks = np.asarray(land_masks)
    seg = np.full(polygon_maps.shape, -1, dtype=np.int64)
    labels = []
    for b in range(polygon_maps.shape[0]):
        pm = polygon_maps[b]
        sea = land_masks[b] == 0
        ids, inverse = np.unique(pm, return_inverse=True)
        inverse = inverse.reshape(pm.shape)
        for j, pid in enumerate(ids):
            pid = int(pid)
            if pid < 0:
                continue
            if pid not in charts[b]:
                raise MissingChartEntryError(pid)
            entry = charts[b][pid]
            if entry is EXCLUDED:
                if diag is not None:
                    diag.n_excluded += 1
                continue
            sel = (inverse == j) & sea
            if not sel.any():
                if diag is not None:
                    diag.empty_polygons.append((b, pid))
                continue
            seg[b][sel] = len(labels)
            labels.append(np.asarray(entry, dtype=np.float64))
    if diag is not None:
        diag.n_polygons += len(labels)
    return seg, np.array(labels).reshape(-1, NUM_CLASSES)


def batch_region_loss(probs: ad.Tensor, polygon_maps, land_masks, charts, diag=None) -> ad.Tensor:
    """Sum of regional cross-entropies over every labelled polygon in the batch.

    Excluded polygons and polygons entirely under land contribute nothing.
    Returns a 0-d Tensor; 0 when no polygon qualifies.
    """
    seg, labels = polygon_segments(polygon_maps, land_masks, charts, diag)
    if len(labels) == 0:
        return ad.mul(ad.tsum(probs), 0.0)
    preds = ad.segment_mean(probs, seg, len(labels))
    return region_ce(preds, labels)


def derive_pixel_labels(chart, polygon_map, threshold: float = 0.65) -> np.ndarray:
    """Per-pixel dominant class; 255 for non-dominant, excluded or unlabelled pixels."""
    polygon_map = np.asarray(polygon_map)
    out = np.full(polygon_map.shape, IGNORE, dtype=np.uint8)
    for pid in np.unique(polygon_map):
        pid = int(pid)
        entry = chart.get(pid, EXCLUDED) if pid >= 0 else EXCLUDED
        if entry is EXCLUDED:
            continue
        k = dominant_class(entry, threshold)
        if k is not None:
            out[polygon_map == pid] = k
    return out


def pixel_ce_masked(probs: ad.Tensor, labels, land_masks) -> ad.Tensor:
    """Mean of -ln(clamp(p_label)) over labelled sea pixels.

    Raises:
        EmptyPolygonError: no pixel qualifies (the caller skips the step).
    """
    labels = np.asarray(labels)
    land_masks = np.asarray(land_masks)
    valid = (labels != IGNORE) & (land_masks == 0)
    n = int(valid.sum())
    if n == 0:
        raise EmptyPolygonError("no labelled sea pixels in batch")
    c = probs.shape[1]
    onehot = np.zeros(probs.shape, dtype=probs.dtype)
    for k in range(c):
        onehot[:, k] = valid & (labels == k)
    return ad.mul(ad.tsum(ad.mul(ad.log(ad.clip(probs, PROB_FLOOR, 1.0)), onehot)), -1.0 / n)
