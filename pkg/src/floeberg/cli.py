"""Command-line entry point: ``floeberg gen|train|eval|predict|render``.

Exit codes: 0 success, 1 usage error, 2 data or model error.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import evalmetrics, scene_io, synthgen, trainer
from .icechart import ChartParseError, parse_stage_mapping
from .scene_io import NO_TRUTH, SceneFormatError

logger = logging.getLogger("floeberg")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

# water, young ice, first-year ice, multiyear ice; land and unlabelled pixels are white
PALETTE = np.array([
    (10, 30, 120),
    (110, 190, 255),
    (255, 215, 0),
    (200, 20, 20),
], dtype=np.uint8)
WHITE = (255, 255, 255)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def render_ppm(classes: np.ndarray) -> bytes:
    """Binary PPM (P6, maxval 255) of a class plane; values outside 0-3 are white."""
    classes = np.asarray(classes)
    if classes.ndim != 2:
        raise ValueError(f"class plane must be 2-D, got shape {classes.shape}")
    h, w = classes.shape
    rgb = np.empty((h, w, 3), dtype=np.uint8)
    rgb[...] = WHITE
    known = classes < len(PALETTE)
    rgb[known] = PALETTE[classes[known].astype(np.intp)]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def _load_model(path):
    ck = trainer.load_checkpoint(path)
    return ck, ck.params.astype(np.dtype(ck.cfg.dtype))


def _prepare(scene, ck):
    if ck.cfg.downscale_ratio > 1:
        scene = scene_io.downscale_scene(scene, ck.cfg.downscale_ratio)
    if ck.stats is not None:
        scene = scene_io.normalize(scene, ck.stats)
    return scene


def _mapping(a):
    if not getattr(a, "stage_mapping", None):
        return None
    with open(a.stage_mapping) as fh:
        return parse_stage_mapping(fh.read())


def _write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text)


# ---------------------------------------------------------------- commands


def cmd_gen(a) -> int:
    overrides = {k: v for k, v in (("height", a.height), ("width", a.width)) if v is not None}
    cfg = synthgen.preset(a.preset, **overrides)
    ids = synthgen.gen_dataset(cfg, a.scenes, a.seed, a.out)
    logger.info("wrote %d scenes to %s", len(ids), a.out)
    return EXIT_OK


def cmd_train(a) -> int:
    cfg = trainer.TrainConfig.desk(
        lr_max=a.lr, momentum=a.momentum, weight_decay=a.weight_decay, batch_size=a.batch,
        iterations_per_epoch=a.iters, epochs=a.epochs, restart_T0_epochs=a.t0 or a.epochs or 1,
        patch_size=a.patch, downscale_ratio=a.downscale, seed=a.seed, mode=a.mode,
        val_scenes=a.val, dtype=a.dtype,
    )
    t = trainer.Trainer(scene_io.load_dataset(a.data, _mapping(a)), cfg)
    if a.resume:
        ck = trainer.load_checkpoint(a.resume)
        if dataclasses.replace(ck.cfg, epochs=cfg.epochs) != cfg:
            raise ValueError("--resume checkpoint was written with different training flags")
        t.restore(ck)
    t.fit()
    os.makedirs(a.out, exist_ok=True)
    t.save(os.path.join(a.out, "model.ckpt"))
    _write_text(os.path.join(a.out, "history_iterations.csv"), t.history.iterations_csv(cfg.iterations_per_epoch))
    _write_text(os.path.join(a.out, "history_epochs.csv"), t.history.epochs_csv())
    logger.info("trained %d epochs; checkpoint in %s", t.epoch, a.out)
    return EXIT_OK


def cmd_eval(a) -> int:
    ck, params = _load_model(a.model)
    scenes = scene_io.load_dataset(a.data, _mapping(a))
    if a.split != "all":
        tr, va = trainer.split_scenes(len(scenes), ck.cfg.val_scenes, ck.cfg.seed)
        scenes = [scenes[i] for i in (va if a.split == "val" else tr)]
    scenes = [_prepare(s, ck) for s in scenes]
    rep = evalmetrics.evaluate(params, scenes, a.tile or ck.cfg.patch_size, cfg=ck.unet_cfg, batch=ck.cfg.batch_size)
    os.makedirs(a.out, exist_ok=True)
    _write_text(os.path.join(a.out, "report.csv"), rep.to_csv())
    text = rep.summary(ck.cfg.mode)
    _write_text(os.path.join(a.out, "summary.txt"), text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_predict(a) -> int:
    ck, params = _load_model(a.model)
    scene = _prepare(scene_io.load_scene(a.scene, _mapping(a)), ck)
    probs = evalmetrics.predict_scene(params, scene, a.tile or ck.cfg.patch_size, ck.unet_cfg, ck.cfg.batch_size)
    pred = evalmetrics.argmax_classes(probs)
    pred[scene.land_mask == 1] = NO_TRUTH
    os.makedirs(a.out, exist_ok=True)
    pred.tofile(os.path.join(a.out, "pred.u8"))
    h, w = pred.shape
    _write_text(os.path.join(a.out, "pred.json"), json.dumps({"height": h, "width": w}) + "\n")
    return EXIT_OK


def cmd_render(a) -> int:
    if a.scene:
        s = scene_io.load_scene(a.scene)
        if s.truth is None:
            raise SceneFormatError(f"scene {a.scene} has no truth plane")
        plane = np.where(s.land_mask == 1, NO_TRUTH, s.truth)
    else:
        h, w = a.height, a.width
        if h is None or w is None:
            meta = os.path.join(os.path.dirname(os.path.abspath(a.input)), "pred.json")
            if not os.path.exists(meta):
                raise UsageError("render needs --height and --width when no pred.json sits next to the input")
            with open(meta) as fh:
                m = json.load(fh)
            h, w = m["height"], m["width"]
        if not os.path.exists(a.input):
            raise SceneFormatError(f"missing class plane {a.input}")
        raw = np.fromfile(a.input, dtype=np.uint8)
        if raw.size != h * w:
            raise SceneFormatError(f"class plane holds {raw.size} bytes, expected {h}x{w}")
        plane = raw.reshape(h, w)
    with open(a.out, "wb") as fh:
        fh.write(render_ppm(plane))
    return EXIT_OK


# ------------------------------------------------------------------ parsing


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="floeberg", description="Weakly supervised sea ice typing from polygon charts.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic scene dataset")
    g.add_argument("--preset", default="separable-v1", choices=sorted(synthgen.PRESETS))
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    d = trainer.TrainConfig.desk()
    t = sub.add_parser("train", help="train a U-Net and write a checkpoint plus history CSVs")
    t.add_argument("--data", required=True, help="dataset directory holding index.txt")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--mode", choices=trainer.MODES, default="weak")
    t.add_argument("--lr", type=float, default=d.lr_max)
    t.add_argument("--momentum", type=float, default=d.momentum)
    t.add_argument("--weight-decay", type=float, default=d.weight_decay)
    t.add_argument("--batch", type=int, default=d.batch_size)
    t.add_argument("--iters", type=int, default=d.iterations_per_epoch)
    t.add_argument("--epochs", type=int, default=d.epochs)
    t.add_argument("--t0", type=int, default=None, help="epochs per cosine cycle (default: --epochs)")
    t.add_argument("--patch", type=int, default=d.patch_size)
    t.add_argument("--downscale", type=int, default=d.downscale_ratio)
    t.add_argument("--val", type=int, default=0, help="scenes held out for per-epoch validation")
    t.add_argument("--dtype", choices=("float32", "float64"), default=d.dtype)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stage-mapping", help="external_code,entry CSV replacing the default stage mapping")
    t.add_argument("--deterministic", action="store_true", help="pin BLAS to one thread")

    e = sub.add_parser("eval", help="polygon R2 and pixel metrics of a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=("all", "train", "val"), default="all")
    e.add_argument("--tile", type=int)
    e.add_argument("--stage-mapping", help="external_code,entry CSV replacing the default stage mapping")
    e.add_argument("--seed", type=int, default=0, help="unused; accepted for flag symmetry")
    e.add_argument("--deterministic", action="store_true")

    r = sub.add_parser("predict", help="write the per-pixel argmax class plane pred.u8")
    r.add_argument("--scene", required=True)
    r.add_argument("--model", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--tile", type=int)
    r.add_argument("--stage-mapping", help="external_code,entry CSV replacing the default stage mapping")
    r.add_argument("--seed", type=int, default=0, help="unused; accepted for flag symmetry")
    r.add_argument("--deterministic", action="store_true")

    m = sub.add_parser("render", help="colour a class plane as a binary PPM")
    src = m.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="uint8 class plane (e.g. pred.u8)")
    src.add_argument("--scene", help="render the truth plane of a synthetic scene")
    m.add_argument("--height", type=int)
    m.add_argument("--width", type=int)
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int, default=0, help="unused; accepted for flag symmetry")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "render": cmd_render}


def _single_thread():
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def run(argv=None) -> int:
    """Parse ``argv`` and dispatch; returns the process exit code."""
    try:
        a = build_parser().parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as err:  # --help
        return EXIT_OK if err.code in (0, None) else EXIT_USAGE
    if a.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    ctx = _single_thread() if getattr(a, "deterministic", False) else contextlib.nullcontext()
    try:
        with ctx:
            return COMMANDS[a.command](a)
    except UsageError as err:
        print(f"floeberg {a.command}: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (SceneFormatError, ChartParseError, trainer.CheckpointError, ValueError, KeyError, OSError) as err:
        print(f"floeberg {a.command}: {err}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())

