"""SGD with momentum, cosine annealing with warm restarts, training loop, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import evalmetrics, regionloss, scene_io, unet
from .icechart import dominant_class
from .scene_io import ChannelStats, Scene

logger = logging.getLogger(__name__)

MAGIC = b"FLOEBRG1"
CHECKPOINT_VERSION = 1
MODES = ("weak", "baseline")


@dataclass
class TrainConfig:
    lr_max: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.01
    batch_size: int = 16
    iterations_per_epoch: int = 500
    epochs: int = 50
    restart_T0_epochs: int = 50
    eta_min: float = 0.0
    patch_size: int = 256
    downscale_ratio: int = 10
    seed: int = 0
    mode: str = "weak"
    val_scenes: int = 0
    dominance_threshold: float = 0.65
    dtype: str = "float32"
    encoder_filters: tuple[int, ...] = (16, 32, 64, 64)

    def __post_init__(self):
        self.encoder_filters = tuple(int(f) for f in self.encoder_filters)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("batch_size", "iterations_per_epoch", "restart_T0_epochs", "patch_size", "downscale_ratio"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.val_scenes < 0:
            raise ValueError("epochs and val_scenes must be non-negative")
        if self.lr_max <= 0 or not 0 <= self.eta_min <= self.lr_max:
            raise ValueError("need lr_max > 0 and 0 <= eta_min <= lr_max")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("need 0 <= momentum < 1 and weight_decay >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @classmethod
    def desk(cls, **overrides) -> TrainConfig:
        """Defaults scaled for synthetic scenes on a desktop CPU."""
        base = dict(batch_size=8, iterations_per_epoch=100, patch_size=64, downscale_ratio=1)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_filters"] = list(self.encoder_filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class History:
    losses: list[float] = field(default_factory=list)  # per iteration, nan = skipped step
    epoch_lr: list[float] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"losses": self.losses, "epoch_lr": self.epoch_lr, "validation": self.validation}

    @classmethod
    def from_dict(cls, d: dict) -> History:
        return cls(list(d["losses"]), list(d["epoch_lr"]), list(d["validation"]))

    def iterations_csv(self, iterations_per_epoch: int) -> str:
        lines = ["iteration,epoch,loss"]
        for i, loss in enumerate(self.losses):
            lines.append(f"{i},{i // iterations_per_epoch},{loss!r}")
        return "\n".join(lines) + "\n"

    def epochs_csv(self) -> str:
        cols = ["epoch", "lr", "mean_loss", "r2_water", "r2_young", "r2_fyi", "r2_myi", "accuracy"]
        lines = [",".join(cols)]
        per = len(self.losses) // max(len(self.epoch_lr), 1) if self.epoch_lr else 0
        for e, lr in enumerate(self.epoch_lr):
            chunk = [v for v in self.losses[e * per:(e + 1) * per] if not math.isnan(v)]
            mean = repr(float(np.mean(chunk))) if chunk else "nan"
            v = self.validation[e] if e < len(self.validation) else {}
            r2 = [repr(x) if x is not None else "" for x in v.get("r2", [None] * 4)]
            acc = v.get("accuracy")
            lines.append(",".join([str(e), repr(lr), mean, *r2, "" if acc is None else repr(acc)]))
        return "\n".join(lines) + "\n"


# ------------------------------------------------------------ optimisation


def cosine_lr(t: float, T0: float, lr_max: float, eta_min: float = 0.0) -> float:
    """Cosine-annealed learning rate at epoch position ``t``.

    Cycles have constant length ``T0``. A positive exact multiple of ``T0``
    is read as the end of its cycle (``eta_min``); the schedule restarts at
    ``lr_max`` immediately after.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    tc = t - T0 * (math.ceil(t / T0) - 1) if t > 0 else 0.0
    return eta_min + 0.5 * (lr_max - eta_min) * (1.0 + math.cos(math.pi * tc / T0))


def lr_at(cfg: TrainConfig, epoch: int, iteration: int) -> float:
    """Learning rate used for ``iteration`` of ``epoch`` (restart at each cycle start)."""
    t = (epoch % cfg.restart_T0_epochs) + iteration / cfg.iterations_per_epoch
    return cosine_lr(t, cfg.restart_T0_epochs, cfg.lr_max, cfg.eta_min)


@dataclass
class OptimizerState:
    velocity: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params) -> OptimizerState:
        return cls([np.zeros_like(p.data) for p in params])


def sgdm_step(params, grads, state: OptimizerState, lr: float, momentum: float, weight_decay: float) -> None:
    """In-place SGD with momentum and coupled L2 decay.

    ``g' = g + wd * w``; ``v <- momentum * v + g'``; ``w <- w - lr * v``.
    """
    params = list(params)
    grads = list(grads)
    if not len(params) == len(grads) == len(state.velocity):
        raise ValueError("params, grads and velocity buffers differ in count")
    for p, g, v in zip(params, grads, state.velocity):
        if p.data.shape != g.shape or v.shape != g.shape:
            raise ValueError(f"shape mismatch: param {p.data.shape}, grad {g.shape}, velocity {v.shape}")
        d = g + weight_decay * p.data if weight_decay else g
        v *= momentum
        v += d
        p.data -= lr * v


# ---------------------------------------------------------------- training


def split_scenes(n: int, n_val: int, seed: int) -> tuple[list[int], list[int]]:
    """Seeded train/validation split of scene indices."""
    if n_val >= n:
        raise ValueError(f"cannot hold out {n_val} of {n} scenes for validation")
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    return sorted(int(i) for i in perm[n_val:]), sorted(int(i) for i in perm[:n_val])


def _has_usable(scenes: Sequence[Scene], mode: str, threshold: float) -> bool:
    for s in scenes:
        ok = scene_io.usable_pixels(s.polygon_map, s.land_mask, s.chart)
        if mode == "weak" and ok.any():
            return True
        if mode == "baseline":
            for pid in np.unique(s.polygon_map[ok]):
                if dominant_class(s.chart[int(pid)], threshold) is not None:
                    return True
    return False


class Trainer:
    """Owns parameters, optimiser state and history for one training run."""

    def __init__(self, dataset: Sequence[Scene], cfg: TrainConfig):
        if not dataset:
            raise ValueError("training needs a non-empty dataset")
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        scenes = list(dataset)
        if cfg.downscale_ratio > 1:
            scenes = [scene_io.downscale_scene(s, cfg.downscale_ratio) for s in scenes]
        self.train_idx, self.val_idx = split_scenes(len(scenes), cfg.val_scenes, cfg.seed)
        train = [scenes[i] for i in self.train_idx]
        if not _has_usable(train, cfg.mode, cfg.dominance_threshold):
            raise ValueError(f"training scenes contain no usable polygon for mode {cfg.mode!r}")
        self.stats = scene_io.compute_stats(train)
        self.train_scenes = [self._prepare(s) for s in train]
        self.val_scenes = [self._prepare(scenes[i]) for i in self.val_idx]
        self.pixel_labels = []
        if cfg.mode == "baseline":
            self.pixel_labels = [
                regionloss.derive_pixel_labels(s.chart, s.polygon_map, cfg.dominance_threshold)
                for s in self.train_scenes
            ]
        for s in self.train_scenes + self.val_scenes:
            h, w = s.shape
            if cfg.patch_size > min(h, w):
                raise ValueError(f"patch size {cfg.patch_size} exceeds scene {s.scene_id} ({h}x{w})")
        self.unet_cfg = unet.UNetConfig(
            in_channels=scenes[0].channels.shape[0], encoder_filters=cfg.encoder_filters, seed=cfg.seed
        )
        self.params = unet.init_params(self.unet_cfg, self.dtype)
        self.state = OptimizerState.zeros_like(self.params)
        self.history = History()
        self.epoch = 0

    def _prepare(self, s: Scene) -> Scene:
        s = scene_io.normalize(s, self.stats)
        s.channels = s.channels.astype(self.dtype)
        return s

    def sample_batch(self, epoch: int, iteration: int):
        """Deterministic batch for (seed, epoch, iteration), independent of mode."""
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, epoch, iteration])
        which = rng.integers(len(self.train_scenes), size=cfg.batch_size)
        seeds = rng.integers(2 ** 63, size=cfg.batch_size)
        patches = []
        for i, s in zip(which, seeds):
            patches.extend(scene_io.extract_patches(self.train_scenes[int(i)], cfg.patch_size, int(s), 1))
        return patches, [int(i) for i in which]

    def step(self, epoch: int, iteration: int) -> float:
        cfg = self.cfg
        patches, sources = self.sample_batch(epoch, iteration)
        x = ad.Tensor(np.stack([p.channels for p in patches]))
        pmaps = np.stack([p.polygon_map for p in patches])
        lands = np.stack([p.land_mask for p in patches])
        self.params.zero_grad()
        with ad.Tape() as tape:
            probs = unet.forward(self.params, x, self.unet_cfg)
            if cfg.mode == "weak":
                seg, labels = regionloss.polygon_segments(pmaps, lands, [p.chart for p in patches])
                if len(labels) == 0:
                    return float("nan")
                loss = regionloss.region_ce(ad.segment_mean(probs, seg, len(labels)), labels)
            else:
                size = cfg.patch_size
                lab = np.stack([
                    self.pixel_labels[i][r0:r0 + size, c0:c0 + size]
                    for i, (r0, c0) in zip(sources, (p.origin for p in patches))
                ])
                try:
                    loss = regionloss.pixel_ce_masked(probs, lab, lands)
                except regionloss.EmptyPolygonError:
                    return float("nan")
        ad.backward(loss, tape)
        lr = lr_at(cfg, epoch, iteration)
        sgdm_step(self.params, [p.grad for p in self.params], self.state, lr, cfg.momentum, cfg.weight_decay)
        return float(loss.item())

    def validate(self) -> dict:
        rep = evalmetrics.evaluate(self.params, self.val_scenes, self.cfg.patch_size,
                                   cfg=self.unet_cfg, batch=self.cfg.batch_size)
        return {
            "r2": [float(v) if d else None for v, d in zip(rep.r2, rep.defined)],
            "n_poly": rep.n_poly,
            "accuracy": rep.accuracy,
        }

    def run_epoch(self) -> None:
        e = self.epoch
        self.history.epoch_lr.append(lr_at(self.cfg, e, 0))
        for it in range(self.cfg.iterations_per_epoch):
            self.history.losses.append(self.step(e, it))
        if self.val_scenes:
            self.history.validation.append(self.validate())
        self.epoch += 1
        done = [v for v in self.history.losses[-self.cfg.iterations_per_epoch:] if not math.isnan(v)]
        logger.info("epoch %d lr %.3g mean loss %.5f", e, self.history.epoch_lr[-1],
                    float(np.mean(done)) if done else float("nan"))

    def fit(self, until_epoch: Optional[int] = None) -> None:
        stop = self.cfg.epochs if until_epoch is None else min(until_epoch, self.cfg.epochs)
        while self.epoch < stop:
            self.run_epoch()

    def save(self, path) -> None:
        save_checkpoint(self.params, self.state, self.cfg, path, epoch=self.epoch,
                        stats=self.stats, history=self.history, unet_cfg=self.unet_cfg)

    def restore(self, ckpt: Checkpoint) -> None:
        if [p.shape for p in ckpt.params] != [p.shape for p in self.params]:
            raise ValueError("checkpoint parameter shapes do not match this configuration")
        self.params = ckpt.params.astype(self.dtype)
        self.state = OptimizerState([v.astype(self.dtype) for v in ckpt.state.velocity])
        self.epoch = ckpt.epoch
        self.history = ckpt.history


def train(dataset: Sequence[Scene], cfg: TrainConfig):
    """Train a U-Net on ``dataset``; returns (params, history)."""
    t = Trainer(dataset, cfg)
    t.fit()
    return t.params, t.history


# -------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: unet.UNetParams
    state: OptimizerState
    cfg: TrainConfig
    unet_cfg: unet.UNetConfig
    epoch: int
    stats: Optional[ChannelStats]
    history: History


def save_checkpoint(params, state: OptimizerState, cfg: TrainConfig, path, epoch: int = 0,
                    stats: ChannelStats | None = None, history: History | None = None,
                    unet_cfg: unet.UNetConfig | None = None) -> None:
    """Write magic, manifest length (u64 LE), JSON manifest, then f64 LE planes.

    Planes are all parameters in declaration order followed by their
    velocity buffers in the same order.
    """
    unet_cfg = unet_cfg or unet.UNetConfig(encoder_filters=cfg.encoder_filters, seed=cfg.seed)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "unet": {
            "in_channels": unet_cfg.in_channels,
            "num_classes": unet_cfg.num_classes,
            "encoder_filters": list(unet_cfg.encoder_filters),
            "kernel": unet_cfg.kernel,
            "seed": unet_cfg.seed,
        },
        "params": [[n, list(p.shape)] for n, p in params.items()],
        "epoch": int(epoch),
        "stats": stats.to_dict() if stats is not None else None,
        "history": (history or History()).to_dict(),
    }
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        for p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        for v in state.velocity:
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    if len(blob) < 16:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack("<Q", blob[8:16])
    try:
        m = json.loads(blob[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"unreadable checkpoint manifest: {err}") from None
    if m.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {m.get('version')!r}")
    cfg = TrainConfig.from_dict(m["config"])
    ucfg = unet.UNetConfig(**m["unet"])
    expected = [[name, list(shape)] for name, shape in unet.layer_shapes(ucfg)]
    if m["params"] != expected:
        raise CheckpointError("checkpoint parameter shapes do not match its configuration")
    sizes = [int(np.prod(s)) for _, s in expected]
    data = np.frombuffer(blob, dtype="<f8", offset=16 + n)
    if data.size != 2 * sum(sizes):
        raise CheckpointError(f"checkpoint payload holds {data.size} values, expected {2 * sum(sizes)}")
    params = unet.UNetParams()
    velocity = []
    off = 0
    for name, shape in expected:
        k = int(np.prod(shape))
        params.add(name, ad.Parameter(data[off:off + k].reshape(shape).astype(np.float64)))
        off += k
    for _, shape in expected:
        k = int(np.prod(shape))
        velocity.append(data[off:off + k].reshape(shape).astype(np.float64))
        off += k
    stats = ChannelStats.from_dict(m["stats"]) if m.get("stats") else None
    return Checkpoint(params, OptimizerState(velocity), cfg, ucfg, int(m["epoch"]), stats,
                      History.from_dict(m["history"]))
