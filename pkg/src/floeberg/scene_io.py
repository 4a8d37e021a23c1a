"""Scene container: storage, downscaling, normalisation and patch sampling.

A scene directory holds ``manifest.json``, one ``<name>.f32`` plane per
channel, ``polygons.i32``, ``land.u8``, ``chart.csv`` and, for synthetic
scenes, ``truth.u8``. All planes are row-major little-endian.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import icechart
from .icechart import EXCLUDED

CHANNELS = ("hh", "hv", "amsr_h", "amsr_v", "lat", "lon", "month")
FORMAT_VERSION = 1
NO_POLYGON = -1
NO_TRUTH = 255


class SceneFormatError(ValueError):
    """A scene directory or in-memory scene violates the container format."""


@dataclass
class Scene:
    channels: np.ndarray  # (C, H, W) float32
    polygon_map: np.ndarray  # (H, W) int32, -1 = no polygon
    land_mask: np.ndarray  # (H, W) uint8, 1 = land
    chart: dict
    scene_id: str = "scene"
    month: int = 1
    center_lat: float = 0.0
    center_lon: float = 0.0
    truth: Optional[np.ndarray] = None  # (H, W) uint8, 255 = none
    channel_names: tuple[str, ...] = CHANNELS

    @property
    def shape(self) -> tuple[int, int]:
        return self.polygon_map.shape

    def validate(self) -> None:
        if self.channels.ndim != 3 or len(self.channel_names) != self.channels.shape[0]:
            raise SceneFormatError("channels must be (C, H, W) with one name per channel")
        hw = self.channels.shape[1:]
        for name in ("polygon_map", "land_mask", "truth"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != hw:
                raise SceneFormatError(f"{name} shape {arr.shape} differs from channels {hw}")
        if not 1 <= self.month <= 12:
            raise SceneFormatError(f"month {self.month} outside 1-12")
        if (self.polygon_map < NO_POLYGON).any():
            raise SceneFormatError("polygon ids must be >= -1")
        if not np.isin(self.land_mask, (0, 1)).all():
            raise SceneFormatError("land mask must hold only 0/1")
        for pid in np.unique(self.polygon_map):
            if pid != NO_POLYGON and int(pid) not in self.chart:
                raise SceneFormatError(f"unreferenced polygon {int(pid)}")


@dataclass
class Patch:
    channels: np.ndarray
    polygon_map: np.ndarray
    land_mask: np.ndarray
    chart: dict
    origin: tuple[int, int]
    truth: Optional[np.ndarray] = None


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if (self.std < 0).any():
            raise ValueError("channel std must be non-negative")

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> ChannelStats:
        return cls(np.array(d["mean"]), np.array(d["std"]))


# ------------------------------------------------------------------ storage


def save_scene(s: Scene, path) -> None:
    s.validate()
    os.makedirs(path, exist_ok=True)
    h, w = s.shape
    manifest = {
        "version": FORMAT_VERSION,
        "height": int(h),
        "width": int(w),
        "channels": list(s.channel_names),
        "month": int(s.month),
        "scene_id": s.scene_id,
        "center_lat": float(s.center_lat),
        "center_lon": float(s.center_lon),
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    for name, plane in zip(s.channel_names, s.channels):
        plane.astype("<f4").tofile(os.path.join(path, f"{name}.f32"))
    s.polygon_map.astype("<i4").tofile(os.path.join(path, "polygons.i32"))
    s.land_mask.astype("u1").tofile(os.path.join(path, "land.u8"))
    with open(os.path.join(path, "chart.csv"), "w", encoding="utf-8") as fh:
        fh.write(icechart.format_chart(s.chart))
    truth_path = os.path.join(path, "truth.u8")
    if s.truth is not None:
        s.truth.astype("u1").tofile(truth_path)
    elif os.path.exists(truth_path):
        os.remove(truth_path)


def _read_plane(path: str, name: str, dtype: str, h: int, w: int) -> np.ndarray:
    if not os.path.exists(path):
        raise SceneFormatError(f"missing plane file: {os.path.basename(path)}")
    arr = np.fromfile(path, dtype=dtype)
    if arr.size != h * w:
        raise SceneFormatError(f"plane size mismatch: {name}")
    return arr.reshape(h, w)


def load_scene(path, mapping=None) -> Scene:
    """Load a scene directory written by :func:`save_scene`.

    Raises:
        SceneFormatError: bad version, missing or mis-sized plane, or a
            polygon id without a chart entry.
    """
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise SceneFormatError(f"missing manifest.json in {path}")
    with open(mpath) as fh:
        try:
            m = json.load(fh)
        except json.JSONDecodeError as err:
            raise SceneFormatError(f"unreadable manifest: {err}") from None
    if m.get("version") != FORMAT_VERSION:
        raise SceneFormatError(f"unsupported scene version {m.get('version')!r}")
    try:
        h, w, names = int(m["height"]), int(m["width"]), list(m["channels"])
    except (KeyError, TypeError, ValueError) as err:
        raise SceneFormatError(f"incomplete manifest: {err}") from None
    planes = [_read_plane(os.path.join(path, f"{n}.f32"), n, "<f4", h, w) for n in names]
    channels = np.stack(planes).astype(np.float32) if planes else np.zeros((0, h, w), np.float32)
    polygon_map = _read_plane(os.path.join(path, "polygons.i32"), "polygons", "<i4", h, w).astype(np.int32)
    land = _read_plane(os.path.join(path, "land.u8"), "land", "u1", h, w)
    cpath = os.path.join(path, "chart.csv")
    if not os.path.exists(cpath):
        raise SceneFormatError("missing chart.csv")
    with open(cpath, encoding="utf-8") as fh:
        chart = icechart.parse_chart(fh.read(), mapping)
    tpath = os.path.join(path, "truth.u8")
    truth = _read_plane(tpath, "truth", "u1", h, w) if os.path.exists(tpath) else None
    s = Scene(
        channels=channels,
        polygon_map=polygon_map,
        land_mask=land,
        chart=chart,
        scene_id=str(m.get("scene_id", os.path.basename(os.path.normpath(path)))),
        month=int(m.get("month", 1)),
        center_lat=float(m.get("center_lat", 0.0)),
        center_lon=float(m.get("center_lon", 0.0)),
        truth=truth,
        channel_names=tuple(names),
    )
    s.validate()
    return s


# ----------------------------------------------------------- transformations


def _block_majority(blocks: np.ndarray) -> np.ndarray:
    """Most frequent value per row; ties go to the smallest value."""
    srt = np.sort(blocks, axis=1)
    n, k = srt.shape
    counts = np.empty((n, k), dtype=np.int64)
    for j in range(k):
        counts[:, j] = (srt == srt[:, j:j + 1]).sum(axis=1)
    # argmax takes the first maximal column, i.e. the smallest tied value
    return srt[np.arange(n), counts.argmax(axis=1)]


def downscale_scene(s: Scene, ratio: int) -> Scene:
    """Block-reduce a scene by an integer ratio.

    Bottom/right remainders are cropped first. Channels take the block mean,
    the land mask is 1 if any pixel in the block is land, polygon ids and
    truth take the block majority (smallest value wins ties).
    """
    if int(ratio) != ratio or ratio <= 0:
        raise ValueError(f"downscale ratio must be a positive integer, got {ratio!r}")
    r = int(ratio)
    if r == 1:
        return replace(s)
    h, w = s.shape
    hh, ww = h // r, w // r
    if hh == 0 or ww == 0:
        raise ValueError(f"ratio {r} exceeds scene dims {h}x{w}")

    def blocks(a):
        a = a[..., : hh * r, : ww * r]
        lead = a.shape[:-2]
        a = a.reshape(*lead, hh, r, ww, r)
        return np.moveaxis(a, -3, -2).reshape(*lead, hh, ww, r * r)

    channels = blocks(s.channels.astype(np.float64)).mean(axis=-1).astype(np.float32)
    land = blocks(s.land_mask).max(axis=-1).astype(np.uint8)
    polys = _block_majority(blocks(s.polygon_map).reshape(-1, r * r)).reshape(hh, ww).astype(np.int32)
    truth = None
    if s.truth is not None:
        truth = _block_majority(blocks(s.truth).reshape(-1, r * r)).reshape(hh, ww).astype(np.uint8)
    present = {int(p) for p in np.unique(polys)} - {NO_POLYGON}
    chart = {pid: e for pid, e in s.chart.items() if pid in present}
    return replace(s, channels=channels, polygon_map=polys, land_mask=land, chart=chart, truth=truth)


def compute_stats(scenes: Sequence[Scene]) -> ChannelStats:
    """Per-channel mean and population std over all non-land pixels."""
    if not scenes:
        raise ValueError("compute_stats needs at least one scene")
    c = scenes[0].channels.shape[0]
    total = np.zeros(c)
    sq = np.zeros(c)
    n = 0
    for s in scenes:
        sea = s.land_mask == 0
        vals = s.channels[:, sea].astype(np.float64)
        total += vals.sum(axis=1)
        n += vals.shape[1]
    if n == 0:
        raise ValueError("compute_stats found no non-land pixels")
    mean = total / n
    for s in scenes:
        vals = s.channels[:, s.land_mask == 0].astype(np.float64)
        sq += ((vals - mean[:, None]) ** 2).sum(axis=1)
    return ChannelStats(mean, np.sqrt(sq / n))


def normalize(s: Scene, stats: ChannelStats) -> Scene:
    """z-score each channel; channels with std below 1e-12 become zeros."""
    x = s.channels.astype(np.float64)
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        if stats.std[i] >= 1e-12:
            out[i] = (x[i] - stats.mean[i]) / stats.std[i]
    return replace(s, channels=out.astype(s.channels.dtype))


def usable_pixels(polygon_map: np.ndarray, land_mask: np.ndarray, chart: dict) -> np.ndarray:
    """Sea pixels that belong to a polygon with a regional label."""
    excluded = [pid for pid, e in chart.items() if e is EXCLUDED]
    ok = (polygon_map != NO_POLYGON) & (land_mask == 0)
    if excluded:
        ok &= ~np.isin(polygon_map, excluded)
    return ok


def extract_patches(s: Scene, size: int, rng_seed, count: int, max_tries: int = 10) -> list[Patch]:
    """Sample ``count`` square patches at uniformly random origins.

    A candidate without any usable (labelled, sea) pixel is redrawn up to
    ``max_tries`` times; the last draw is then kept regardless.
    """
    h, w = s.shape
    if size <= 0 or size > min(h, w):
        raise ValueError(f"patch size {size} does not fit scene {h}x{w}")
    rng = np.random.default_rng(rng_seed)
    ok = usable_pixels(s.polygon_map, s.land_mask, s.chart)
    # summed-area table for O(1) usable-pixel counts per window
    sat = np.zeros((h + 1, w + 1), dtype=np.int64)
    sat[1:, 1:] = ok.cumsum(0).cumsum(1)
    patches = []
    for _ in range(count):
        for _ in range(max_tries):
            r = int(rng.integers(0, h - size + 1))
            c = int(rng.integers(0, w - size + 1))
            n = sat[r + size, c + size] - sat[r, c + size] - sat[r + size, c] + sat[r, c]
            if n > 0:
                break
        sl = (slice(r, r + size), slice(c, c + size))
        patches.append(
            Patch(
                channels=s.channels[(slice(None),) + sl],
                polygon_map=s.polygon_map[sl],
                land_mask=s.land_mask[sl],
                chart=s.chart,
                origin=(r, c),
                truth=None if s.truth is None else s.truth[sl],
            )
        )
    return patches


def load_dataset(root, mapping=None) -> list[Scene]:
    """Load every scene listed in ``<root>/index.txt``, in index order."""
    index = os.path.join(root, "index.txt")
    if not os.path.exists(index):
        raise SceneFormatError(f"missing index.txt in {root}")
    with open(index) as fh:
        ids = [line.strip() for line in fh if line.strip()]
    return [load_scene(os.path.join(root, sid), mapping) for sid in ids]
