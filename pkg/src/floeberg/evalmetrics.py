"""Polygon-level R² per class, pixel metrics against synthetic truth, reports."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import unet
from .icechart import CLASS_NAMES, EXCLUDED, NUM_CLASSES
from .scene_io import NO_TRUTH, ChannelStats, Scene, normalize

R2_DENOM_FLOOR = 1e-15


@dataclass
class MetricsReport:
    r2: np.ndarray  # (4,), nan where undefined
    defined: np.ndarray  # (4,) bool
    n_poly: int
    accuracy: Optional[float] = None
    confusion: Optional[np.ndarray] = None  # rows: truth, columns: prediction

    def to_csv(self) -> str:
        lines = ["class,r2,defined"]
        for k in range(NUM_CLASSES):
            val = repr(float(self.r2[k])) if self.defined[k] else ""
            lines.append(f"{k},{val},{int(self.defined[k])}")
        return "\n".join(lines) + "\n"

    def summary(self, title: str = "model") -> str:
        width = 16
        head = "".join(f"{name:>{width}}" for name in CLASS_NAMES)
        cells = "".join(
            f"{(f'{100 * self.r2[k]:.2f}%' if self.defined[k] else 'undefined'):>{width}}"
            for k in range(NUM_CLASSES)
        )
        out = [f"{'R2':<24}{head}", f"{title:<24}{cells}", f"polygons: {self.n_poly}"]
        if self.accuracy is not None:
            out.append(f"pixel accuracy: {self.accuracy:.4f}")
        if self.confusion is not None:
            out.append("confusion (rows truth, cols prediction):")
            out.extend("  " + " ".join(f"{int(v):>9d}" for v in row) for row in self.confusion)
        return "\n".join(out) + "\n"


def r2_per_class(labels, preds) -> tuple[np.ndarray, np.ndarray]:
    """Coefficient of determination per class across polygons.

    Args:
        labels: (N, 4) chart concentrations.
        preds: (N, 4) predicted concentrations.

    Returns:
        (r2, defined). Classes whose labels have (near) zero spread are
        flagged undefined and carry nan.
    """
    y = np.asarray(labels, dtype=np.float64).reshape(-1, NUM_CLASSES)
    p = np.asarray(preds, dtype=np.float64).reshape(-1, NUM_CLASSES)
    if y.shape != p.shape:
        raise ValueError(f"label/prediction count mismatch: {len(y)} vs {len(p)}")
    if len(y) == 0:
        raise ValueError("r2_per_class needs at least one polygon")
    ss_res = ((y - p) ** 2).sum(axis=0)
    ss_tot = ((y - y.mean(axis=0)) ** 2).sum(axis=0)
    defined = ss_tot >= R2_DENOM_FLOOR
    r2 = np.full(NUM_CLASSES, np.nan)
    r2[defined] = 1.0 - ss_res[defined] / ss_tot[defined]
    return r2, defined


def argmax_classes(probs: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over axis 0; the smallest index wins ties."""
    return np.argmax(probs, axis=0).astype(np.uint8)


def pixel_metrics(pred_map, truth, land_mask) -> tuple[float, np.ndarray]:
    """Accuracy and 4x4 confusion over sea pixels with known truth."""
    pred_map = np.asarray(pred_map)
    truth = np.asarray(truth)
    valid = (truth != NO_TRUTH) & (np.asarray(land_mask) == 0)
    t = truth[valid].astype(np.int64)
    p = pred_map[valid].astype(np.int64)
    conf = np.bincount(t * NUM_CLASSES + p, minlength=NUM_CLASSES ** 2).reshape(NUM_CLASSES, NUM_CLASSES)
    n = int(valid.sum())
    acc = float(np.trace(conf) / n) if n else float("nan")
    return acc, conf


def predict_scene(params, scene: Scene, tile: int, cfg: unet.UNetConfig | None = None, batch: int = 8) -> np.ndarray:
    """Whole-scene class probabilities (4, H, W) from non-overlapping tiles.

    The scene is reflection-padded up to a multiple of ``tile`` and the
    stitched result cropped back.
    """
    c, h, w = scene.channels.shape
    if h < tile or w < tile:
        raise ValueError(f"scene {h}x{w} is smaller than tile {tile}; pad the scene first")
    ph, pw = (-h) % tile, (-w) % tile
    x = np.pad(scene.channels, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    dtype = params.tensors[0].dtype
    origins = [(r, q) for r in range(0, h + ph, tile) for q in range(0, w + pw, tile)]
    out = np.empty((NUM_CLASSES, h + ph, w + pw), dtype=np.float64)
    for i in range(0, len(origins), batch):
        chunk = origins[i:i + batch]
        xb = np.stack([x[:, r:r + tile, q:q + tile] for r, q in chunk]).astype(dtype)
        probs = unet.forward(params, ad.Tensor(xb), cfg).data
        for (r, q), pr in zip(chunk, probs):
            out[:, r:r + tile, q:q + tile] = pr
    return out[:, :h, :w]


def polygon_table(probs: np.ndarray, scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    """Chart labels and mean predicted probabilities of every usable polygon."""
    labels, preds = [], []
    sea = scene.land_mask == 0
    for pid in np.unique(scene.polygon_map):
        pid = int(pid)
        if pid < 0 or scene.chart[pid] is EXCLUDED:
            continue
        sel = (scene.polygon_map == pid) & sea
        if not sel.any():
            continue
        labels.append(scene.chart[pid])
        preds.append(probs[:, sel].mean(axis=1))
    return np.array(labels).reshape(-1, NUM_CLASSES), np.array(preds).reshape(-1, NUM_CLASSES)


def evaluate(params, scenes: Sequence[Scene], tile: int, stats: ChannelStats | None = None,
             cfg: unet.UNetConfig | None = None, batch: int = 8) -> MetricsReport:
    """Pooled-polygon R² over ``scenes``, plus pixel metrics where truth exists."""
    if not scenes:
        raise ValueError("evaluate needs at least one scene")
    labels, preds = [], []
    conf = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    have_truth = False
    for s in scenes:
        if stats is not None:
            s = normalize(s, stats)
        probs = predict_scene(params, s, tile, cfg, batch)
        y, p = polygon_table(probs, s)
        labels.append(y)
        preds.append(p)
        if s.truth is not None:
            have_truth = True
            conf += pixel_metrics(argmax_classes(probs), s.truth, s.land_mask)[1]
    y = np.concatenate(labels)
    p = np.concatenate(preds)
    if len(y):
        r2, defined = r2_per_class(y, p)
    else:
        r2, defined = np.full(NUM_CLASSES, np.nan), np.zeros(NUM_CLASSES, dtype=bool)
    acc = float(np.trace(conf) / conf.sum()) if have_truth and conf.sum() else None
    return MetricsReport(r2, defined, len(y), acc, conf if have_truth else None)
