"""Synthetic scenes with hidden per-pixel truth and chart labels derived from it."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import ndimage

from . import icechart, scene_io
from .icechart import EXCLUDED, NUM_CLASSES
from .scene_io import NO_TRUTH, Scene

# Per-class (water, young, FYI, MYI) signatures for hh, hv, amsr_h, amsr_v.
_SAR_MEANS = (
    (-25.0, -20.0, -14.0, -8.0),
    (-30.0, -24.0, -18.0, -12.0),
)
_AMSR_MEANS = (
    (160.0, 215.0, 235.0, 225.0),
    (200.0, 240.0, 250.0, 240.0),
)


@dataclass(frozen=True)
class SynthConfig:
    height: int = 128
    width: int = 128
    n_polygon_sites: int = 16
    smoothing_radius: float = 10.0
    priors: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    channel_means: tuple[tuple[float, ...], ...] = _SAR_MEANS + _AMSR_MEANS
    channel_stds: tuple[float, ...] = (2.0, 2.0, 3.0, 3.0)
    amsr_blur: float = 4.0
    land_fraction: float = 0.1
    excluded_fraction: float = 0.0
    lat_range: tuple[float, float] = (55.0, 80.0)
    lon_range: tuple[float, float] = (-130.0, -50.0)
    pixel_spacing_deg: float = 0.01
    seed: int = 0
    preset: str = "custom"

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise ValueError("synthetic scenes need height and width >= 32")
        if len(self.priors) != NUM_CLASSES or min(self.priors) < 0:
            raise ValueError("priors must be 4 non-negative weights")
        if abs(sum(self.priors) - 1.0) > 1e-9:
            raise ValueError("priors must sum to 1")
        if len(self.channel_means) != 4 or any(len(m) != NUM_CLASSES for m in self.channel_means):
            raise ValueError("channel_means must be 4 rows (hh, hv, amsr_h, amsr_v) of 4 class means")
        if len(self.channel_stds) != 4 or min(self.channel_stds) <= 0:
            raise ValueError("channel_stds must be 4 positive values")
        if self.n_polygon_sites < 1 or self.n_polygon_sites > self.height * self.width:
            raise ValueError("n_polygon_sites out of range")
        if not 0 <= self.land_fraction < 1 or not 0 <= self.excluded_fraction <= 1:
            raise ValueError("land_fraction must be in [0, 1) and excluded_fraction in [0, 1]")
        if self.smoothing_radius <= 0:
            raise ValueError("smoothing_radius must be positive")


PRESETS = {
    "separable-v1": SynthConfig(preset="separable-v1"),
    "mixed-v1": SynthConfig(
        preset="mixed-v1",
        smoothing_radius=3.0,
        priors=(0.35, 0.15, 0.20, 0.30),
        channel_stds=(4.0, 4.0, 3.0, 3.0),
    ),
}


def preset(name: str, **overrides) -> SynthConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


def voronoi_from_sites(height: int, width: int, sites) -> np.ndarray:
    """Nearest-site id per pixel (Euclidean, ties to the smaller id)."""
    sites = np.asarray(sites, dtype=np.float64).reshape(-1, 2)
    rr, cc = np.mgrid[0:height, 0:width]
    best = np.full((height, width), np.inf)
    out = np.zeros((height, width), dtype=np.int32)
    for i, (sr, sc) in enumerate(sites):
        d = (rr - sr) ** 2 + (cc - sc) ** 2
        closer = d < best
        out[closer] = i
        best[closer] = d[closer]
    return out


def voronoi_map(height: int, width: int, n_sites: int, seed) -> np.ndarray:
    """Voronoi partition over ``n_sites`` distinct random pixel sites, ids 0..n-1."""
    rng = np.random.default_rng(seed)
    flat = rng.choice(height * width, size=n_sites, replace=False)
    sites = np.stack([flat // width, flat % width], axis=1)
    return voronoi_from_sites(height, width, sites)


def class_field(height: int, width: int, cfg: SynthConfig, seed) -> np.ndarray:
    """Spatially coherent class map whose frequencies track ``cfg.priors``.

    One smoothed Gaussian noise field per class plus a per-class offset,
    arg-maxed per pixel. Offsets are tuned so class areas match the priors.
    """
    rng = np.random.default_rng(seed)
    priors = np.asarray(cfg.priors, dtype=np.float64)
    fields = np.empty((NUM_CLASSES, height, width))
    for k in range(NUM_CLASSES):
        f = ndimage.gaussian_filter(rng.standard_normal((height, width)), cfg.smoothing_radius, mode="wrap")
        fields[k] = (f - f.mean()) / (f.std() + 1e-12)
    fields[priors == 0] = -np.inf
    offsets = np.zeros(NUM_CLASSES)
    active = priors > 0
    for _ in range(200):
        cls = np.argmax(fields + offsets[:, None, None], axis=0)
        freq = np.bincount(cls.ravel(), minlength=NUM_CLASSES) / cls.size
        err = priors - freq
        if np.abs(err[active]).max() < 0.005:
            break
        offsets[active] += 2.0 * err[active]
    return np.argmax(fields + offsets[:, None, None], axis=0).astype(np.uint8)


def _land_mask(height: int, width: int, fraction: float, rng) -> np.ndarray:
    if fraction <= 0:
        return np.zeros((height, width), dtype=np.uint8)
    rr, cc = np.mgrid[0:height, 0:width]
    edge = int(rng.integers(4))
    dist = (rr / height, cc / width, 1 - rr / height, 1 - cc / width)[edge]
    noise = ndimage.gaussian_filter(rng.standard_normal((height, width)), max(height, width) / 16, mode="nearest")
    score = dist + 0.15 * noise / (noise.std() + 1e-12)
    return (score <= np.quantile(score, fraction)).astype(np.uint8)


def chart_from_truth(truth: np.ndarray, polygon_map: np.ndarray, land_mask: np.ndarray) -> dict:
    """Egg-code-quantised sea-pixel class fractions per polygon."""
    chart = {}
    sea = land_mask == 0
    for pid in np.unique(polygon_map):
        pid = int(pid)
        if pid < 0:
            continue
        sel = (polygon_map == pid) & sea
        if not sel.any():
            chart[pid] = EXCLUDED
            continue
        frac = np.bincount(truth[sel], minlength=NUM_CLASSES)[:NUM_CLASSES] / sel.sum()
        chart[pid] = icechart.eggcode_to_label(icechart.label_to_eggcode(frac))
    return chart


def gen_scene(cfg: SynthConfig, seed, scene_id: str = "synthetic") -> Scene:
    """Generate one scene (with truth plane) as a pure function of (cfg, seed)."""
    ss = np.random.SeedSequence(seed)
    s_truth, s_poly, s_land, s_chan, s_meta = ss.spawn(5)
    h, w = cfg.height, cfg.width
    truth = class_field(h, w, cfg, s_truth)
    polys = voronoi_map(h, w, cfg.n_polygon_sites, s_poly)
    land = _land_mask(h, w, cfg.land_fraction, np.random.default_rng(s_land))

    rng = np.random.default_rng(s_chan)
    means = np.asarray(cfg.channel_means)
    stds = np.asarray(cfg.channel_stds)
    chans = np.empty((len(scene_io.CHANNELS), h, w))
    for i in range(2):
        chans[i] = means[i][truth] + stds[i] * rng.standard_normal((h, w))
    for i in (2, 3):
        coarse = ndimage.gaussian_filter(means[i][truth], cfg.amsr_blur, mode="nearest")
        chans[i] = coarse + stds[i] * rng.standard_normal((h, w))

    meta = np.random.default_rng(s_meta)
    month = int(meta.integers(1, 13))
    lat0 = float(meta.uniform(*cfg.lat_range))
    lon0 = float(meta.uniform(*cfg.lon_range))
    rr, cc = np.mgrid[0:h, 0:w]
    chans[4] = lat0 - (rr - (h - 1) / 2) * cfg.pixel_spacing_deg
    chans[5] = lon0 + (cc - (w - 1) / 2) * cfg.pixel_spacing_deg
    chans[6] = month / 12.0

    chart = chart_from_truth(truth, polys, land)
    if cfg.excluded_fraction > 0:
        for pid in sorted(chart):
            if meta.random() < cfg.excluded_fraction:
                chart[pid] = EXCLUDED
    truth = np.where(land == 1, NO_TRUTH, truth).astype(np.uint8)
    return Scene(
        channels=chans.astype(np.float32),
        polygon_map=polys,
        land_mask=land,
        chart=chart,
        scene_id=scene_id,
        month=month,
        center_lat=lat0,
        center_lon=lon0,
        truth=truth,
    )


def scene_seeds(seed: int, n: int) -> list[int]:
    """Pairwise-distinct per-scene seeds derived from a master seed."""
    out: list[int] = []
    seen: set[int] = set()
    state = np.random.SeedSequence(seed)
    while len(out) < n:
        for v in state.generate_state(n - len(out) + 1, dtype=np.uint64)[: n - len(out)]:
            v = int(v)
            if v not in seen:
                seen.add(v)
                out.append(v)
        state = np.random.SeedSequence([seed, len(out)])
    return out


def gen_dataset(cfg: SynthConfig, n_scenes: int, seed: int, out_dir) -> list[str]:
    """Write ``n_scenes`` scene directories plus ``index.txt``; return the ids."""
    if n_scenes < 0:
        raise ValueError("n_scenes must be non-negative")
    os.makedirs(out_dir, exist_ok=True)
    ids = []
    for i, s in enumerate(scene_seeds(seed, n_scenes)):
        sid = f"scene_{i:04d}"
        scene_io.save_scene(gen_scene(cfg, s, scene_id=sid), os.path.join(out_dir, sid))
        ids.append(sid)
    with open(os.path.join(out_dir, "index.txt"), "w") as fh:
        fh.write("".join(f"{sid}\n" for sid in ids))
    with open(os.path.join(out_dir, "synth_config.json"), "w") as fh:
        json.dump({"config": asdict(cfg), "n_scenes": n_scenes, "seed": seed}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return ids
