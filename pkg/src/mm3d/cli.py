"""Command-line front end.

Subcommands: stats, mask, pretrain, reconstruct, ablate, gradcheck. Numeric
settings come from a JSON config file; flags only override scalars, so the
manifest written into every output directory is enough to reproduce the run.
Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import Tensor, gradcheck, sum_all
from .consistency import ConsistencyConfig, csd_loss, make_teacher, match_correspondence
from .decoder import (DecoderConfig, DecoderParams, build_grid, chamfer,
                      expand_and_fold, init_decoder_params, loss_pc)
from .encoder import EncoderConfig, EncoderParams, encode, init_encoder_params
from .errors import (CheckpointError, ConfigError, DegenerateSceneError,
                     NumericError, PlyParseError)
from .figures import (save_ablation_bars, save_heatmap_scatter, save_loss_curves,
                      save_mask_progression, save_reconstruction_panels)
from .masking import MaskSchedule, build_sequence, export_sequence_json
from .scene import PointScene, load_ply, normalize_scene, save_ply
from .stats import StatConfig, compute_statistics, export_heatmap, write_stats_csv
from .trainer import (TrainConfig, evaluate_reconstruction, load_checkpoint,
                      save_checkpoint, train)

MASK_STRATEGIES = ("informative_preserved", "informative_abandoned", "random")

_STAT_KEYS = {"k", "alphas", "channels"}
_SCHEDULE_KEYS = {"ratios", "gap", "gap_mode"}
_TRAIN_SCALARS = {"epochs", "batch_size", "lr0", "weight_decay", "decay_factor",
                  "zeta1", "zeta2", "beta", "tau", "gap", "gap_mode",
                  "mask_strategy", "seed", "normalize_scenes",
                  "normalize_features"}


def _load_json(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            data = json.load(fh)
    except ValueError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return data


def _stat_config(raw):
    extra = set(raw) - _STAT_KEYS
    if extra:
        raise ConfigError(f"unknown statistics config keys: {sorted(extra)}")
    return StatConfig(**raw)


def _train_config(raw, overrides=None):
    known = _TRAIN_SCALARS | {"decay_fractions", "ratios", "encoder", "decoder",
                              "stats"}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    kwargs = dict(raw)
    for key, builder in (("encoder", EncoderConfig), ("decoder", DecoderConfig)):
        if key in kwargs:
            try:
                kwargs[key] = builder(**kwargs[key])
            except TypeError as exc:
                raise ConfigError(f"bad '{key}' section: {exc}") from exc
    if "stats" in kwargs:
        kwargs["stats"] = _stat_config(kwargs["stats"])
    for key in ("decay_fractions", "ratios", "alphas"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    for key, value in (overrides or {}).items():
        if value is not None:
            kwargs[key] = value
    try:
        return TrainConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad training config: {exc}") from exc


def _n_threads():
    raw = os.environ.get("MM3D_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"MM3D_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)


def _prepare_outdir(args, inputs):
    """Create the output directory and write the manifest before anything else."""
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "config": str(args.config) if getattr(args, "config", None) else None,
        "inputs": [str(p) for p in inputs],
        "outdir": str(outdir),
        "seed": getattr(args, "seed", None),
        "version": __version__,
    }
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return outdir


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_dataset(dataset_dir):
    root = Path(dataset_dir)
    if not root.is_dir():
        raise DegenerateSceneError(f"dataset directory not found: {root}")
    paths = sorted(root.glob("*.ply"))
    if not paths:
        raise DegenerateSceneError(f"no .ply scenes under {root}")
    return paths, [load_ply(p) for p in paths]


# ------------------------------------------------------------------ commands

def cmd_stats(args):
    raw = _load_json(args.config)
    normalize = bool(raw.pop("normalize", True))
    stat_cfg = _stat_config(raw)
    outdir = _prepare_outdir(args, [args.scene])
    scene = load_ply(args.scene)
    if normalize:
        scene = normalize_scene(scene)
    field = compute_statistics(scene, stat_cfg)
    export_heatmap(scene, field, outdir / "heatmap.ply")
    write_stats_csv(field, outdir / "stats.csv")
    save_heatmap_scatter(scene, field, outdir / "heatmap.png")
    _write_json(outdir / "summary.json", {
        "n_points": scene.n_points,
        "k": stat_cfg.k,
        "alphas": list(stat_cfg.alphas),
        "channels": list(stat_cfg.channels),
        "d0_range": [float(field.d0.min()), float(field.d0.max())],
        "d1_range": [float(field.d1.min()), float(field.d1.max())],
        "d_range": [float(field.d.min()), float(field.d.max())],
    })
    return 0


def cmd_mask(args):
    raw = _load_json(args.config)
    normalize = bool(raw.pop("normalize", True))
    sched_raw = {k: raw.pop(k) for k in tuple(raw) if k in _SCHEDULE_KEYS}
    if "ratios" in sched_raw and isinstance(sched_raw["ratios"], list):
        sched_raw["ratios"] = tuple(sched_raw["ratios"])
    sched = MaskSchedule(**sched_raw)
    stat_cfg = _stat_config(raw)
    outdir = _prepare_outdir(args, [args.scene])
    scene = load_ply(args.scene)
    if normalize:
        scene = normalize_scene(scene)
    field = compute_statistics(scene, stat_cfg)
    seq = build_sequence(scene, field, sched)
    export_sequence_json(seq, outdir / "sequence.json")
    save_mask_progression(scene, seq, outdir / "masks.png")
    _write_json(outdir / "summary.json", {
        "n_points": scene.n_points,
        "ratios": [float(t) for t in seq.theta],
        "retained": [int(len(s)) for s in seq.sets],
    })
    return 0


def cmd_pretrain(args):
    raw = _load_json(args.config)
    cfg = _train_config(raw, overrides={
        "epochs": args.epochs, "batch_size": args.batch_size, "lr0": args.lr0,
        "zeta1": args.zeta1, "zeta2": args.zeta2, "seed": args.seed,
    })
    paths, scenes = _load_dataset(args.dataset)
    args.seed = cfg.seed
    outdir = _prepare_outdir(args, paths)
    ckpt, report = train(scenes, cfg, n_threads=_n_threads())
    save_checkpoint(ckpt, outdir / "checkpoint.mmck")
    report.write_csv(outdir / "losses.csv")
    save_loss_curves(report, outdir / "loss_curves.png")
    _write_json(outdir / "summary.json", {
        "epochs": cfg.epochs,
        "scenes": len(scenes),
        "skipped_scenes": report.skipped_scenes,
        "final_loss_pc": report.loss_pc[-1],
        "final_loss_csd": report.loss_csd[-1],
        "final_loss_total": report.loss_total[-1],
        "config_hash": cfg.config_hash(),
    })
    return 0


def cmd_reconstruct(args):
    raw = _load_json(args.config)
    cfg = _train_config(raw)
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.config_hash != cfg.config_hash():
        raise CheckpointError("checkpoint was trained under a different config")
    outdir = _prepare_outdir(args, [args.checkpoint, args.scene])
    scene = load_ply(args.scene)
    if cfg.normalize_scenes:
        scene = normalize_scene(scene)
    theta = float(args.theta)
    sched = MaskSchedule(ratios=(theta,), gap=theta, gap_mode="fixed")
    field = compute_statistics(scene, cfg.stats)
    seq = build_sequence(scene, field, sched)
    hier = encode(scene, seq.sets[0], ckpt.online, cfg.encoder, None)
    grids = [build_grid(-(-scene.n_points // layer.ids.shape[0]),
                        cfg.decoder.grid_scale) for layer in hier.layers[1:]]
    pred = expand_and_fold(hier, ckpt.decoder, grids, None)

    save_ply(scene, outdir / "target.ply")
    per_layer = []
    for l, layer_pred in enumerate(pred.predicted, start=1):
        points = layer_pred.data.astype(np.float32)
        recon = PointScene(points,
                           np.full_like(points, 0.7, dtype=np.float32),
                           np.arange(points.shape[0], dtype=np.int64))
        save_ply(recon, outdir / f"recon_layer{l}.ply")
        per_layer.append(float(chamfer(layer_pred, scene.positions).data))
    save_reconstruction_panels(scene.positions,
                               [p.data for p in pred.predicted],
                               outdir / "panels.png")
    _write_json(outdir / "summary.json", {
        "theta": theta,
        "retained": int(len(seq.sets[0])),
        "chamfer_per_layer": per_layer,
        "chamfer_total": float(sum(per_layer)),
    })
    return 0


def cmd_ablate(args):
    raw = _load_json(args.config)
    base = _train_config(raw, overrides={"epochs": args.epochs,
                                         "seed": args.seed})
    paths, scenes = _load_dataset(args.dataset)
    args.seed = base.seed
    outdir = _prepare_outdir(args, paths)

    # one held-out split for every cell, fixed by the base seed
    rng = np.random.default_rng([base.seed, 0x5917])
    perm = rng.permutation(len(scenes))
    n_eval = max(1, int(round(0.2 * len(scenes))))
    eval_idx = np.sort(perm[:n_eval])
    train_idx = np.sort(perm[n_eval:])
    if len(train_idx) == 0:
        raise DegenerateSceneError("dataset too small to hold out 20%")
    train_scenes = [scenes[i] for i in train_idx]
    eval_scenes = [scenes[i] for i in eval_idx]

    seeds = [base.seed + i for i in range(args.seeds)]
    threads = _n_threads()
    cells = {}
    for strategy in MASK_STRATEGIES:
        for progressive in (True, False):
            if progressive:
                ratios, gap = base.ratios, base.gap
            else:
                ratios, gap = (base.ratios[-1],), base.ratios[-1]
            name = f"{strategy}/{'progressive' if progressive else 'single_step'}"
            losses = []
            for seed in seeds:
                cell_cfg = dataclasses.replace(
                    base, mask_strategy=strategy, ratios=ratios, gap=gap,
                    seed=seed)
                ckpt, _ = train(train_scenes, cell_cfg, n_threads=threads)
                losses.append(evaluate_reconstruction(
                    eval_scenes, ckpt.online, ckpt.decoder, cell_cfg))
            cells[name] = {"seeds": seeds, "losses": losses,
                           "mean": float(np.mean(losses))}
    _write_json(outdir / "ablation.json", {
        "cells": cells,
        "split": {"train": [paths[i].name for i in train_idx],
                  "eval": [paths[i].name for i in eval_idx]},
        "epochs": base.epochs,
    })
    save_ablation_bars({name: cell["losses"] for name, cell in cells.items()},
                       outdir / "ablation.png")
    return 0


def _gradcheck_rows(seed):
    """Primitive and end-to-end checks, all on float64 graphs.

    Float32 central differences sit within a few ULP of the loss for weakly
    coupled coordinates, so any-seed robustness requires the wider type; the
    chain rule being verified is the same either way.
    """
    from .autodiff import l2norm_rows, logsumexp, matmul, relu

    rng = np.random.default_rng(seed)
    rows = []

    def check(name, f, x, eps=1e-5, tol=1e-3):
        err = gradcheck(f, x, eps=eps)
        rows.append({"check": name, "seed": seed, "error": float(err),
                     "tolerance": tol, "passed": bool(err < tol)})

    f64 = lambda arr: Tensor(arr, requires_grad=True, dtype=np.float64)
    a = f64(rng.standard_normal((4, 3)))
    b = Tensor(rng.standard_normal((3, 5)), dtype=np.float64)
    check("matmul", lambda x, tape: sum_all(matmul(x, b, tape), tape), a)
    x = rng.standard_normal((5, 4))
    x += np.sign(x) * 0.5  # keep clear of the relu kink
    check("relu", lambda t, tape: sum_all(relu(t, tape), tape), f64(x))
    check("logsumexp",
          lambda t, tape: sum_all(logsumexp(t, tape), tape),
          f64(rng.standard_normal((4, 6))))
    y = rng.standard_normal((4, 3))
    y += np.sign(y) * 0.5
    check("l2norm_rows", lambda t, tape: sum_all(l2norm_rows(t, tape), tape),
          f64(y))

    # end-to-end in float64: float32 differences drown in quantization noise
    scene = PointScene(rng.standard_normal((12, 3)).astype(np.float32),
                       rng.random((12, 3)).astype(np.float32),
                       np.arange(12, dtype=np.int64))
    enc_cfg = EncoderConfig(n_layers=1, channels=(4,), k_group=3, downsample=3)
    dec_cfg = DecoderConfig(hidden=6)
    base = init_encoder_params(enc_cfg, rng)
    dec = init_decoder_params(enc_cfg, dec_cfg, rng)
    dec64 = DecoderParams([{branch: [(Tensor(w.data, dtype=np.float64),
                                      Tensor(bb.data, dtype=np.float64))
                                     for w, bb in layer[branch]]
                            for branch in ("psi1", "psi2")}
                           for layer in dec.layers])

    def params64(w1):
        return EncoderParams([{
            "w1": w1,
            "b1": Tensor(base.layers[0]["b1"].data, dtype=np.float64),
            "w2": Tensor(base.layers[0]["w2"].data, dtype=np.float64),
            "b2": Tensor(base.layers[0]["b2"].data, dtype=np.float64),
        }])

    grids = [build_grid(3, dec_cfg.grid_scale)]

    def f_pc(w1, tape):
        hier = encode(scene, scene.ids, params64(w1), enc_cfg, tape)
        pred = expand_and_fold(hier, dec64, grids, tape)
        return loss_pc(pred, scene.positions, tape)

    t64 = EncoderParams([{k: Tensor(v.data, dtype=np.float64)
                          for k, v in base.layers[0].items()}])
    target = encode(scene, scene.ids, t64, enc_cfg, None)

    def f_csd(w1, tape):
        hier = encode(scene, scene.ids, params64(w1), enc_cfg, tape)
        pairs = match_correspondence(hier, target)
        loss, _ = csd_loss(pairs, hier, target, ConsistencyConfig(), tape)
        return loss

    w1 = Tensor(base.layers[0]["w1"].data, dtype=np.float64)
    check("encode_reconstruction", f_pc, w1, 1e-5, 1e-3)
    w1 = Tensor(base.layers[0]["w1"].data, dtype=np.float64)
    check("encode_consistency", f_csd, w1, 1e-5, 1e-3)
    return rows


def cmd_gradcheck(args):
    outdir = _prepare_outdir(args, [])
    rows = []
    for seed in range(args.seeds):
        rows.extend(_gradcheck_rows(seed))
    with open(outdir / "gradcheck.csv", "w") as fh:
        fh.write("check,seed,error,tolerance,passed\n")
        for row in rows:
            fh.write(f"{row['check']},{row['seed']},{row['error']!r},"
                     f"{row['tolerance']!r},{int(row['passed'])}\n")
    n_failed = sum(1 for row in rows if not row["passed"])
    _write_json(outdir / "summary.json", {
        "n_checks": len(rows),
        "n_failed": n_failed,
        "max_error": max(row["error"] for row in rows),
    })

    import matplotlib.pyplot as plt
    names = sorted({row["check"] for row in rows})
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, name in enumerate(names):
        errs = [row["error"] for row in rows if row["check"] == name]
        ax.plot([i] * len(errs), errs, "o", markersize=5)
    ax.axhline(1e-3, color="red", linestyle="--", label="tolerance")
    ax.set_yscale("log")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("relative gradient error")
    ax.legend()
    fig.tight_layout()
    fig.savefig(outdir / "gradcheck.png", dpi=110)
    plt.close(fig)

    if n_failed:
        raise NumericError(f"{n_failed} of {len(rows)} gradient checks failed; "
                           f"see {outdir / 'gradcheck.csv'}")
    return 0


# -------------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="mm3d",
        description="Masked pretraining for 3D point scenes: local statistics, "
                    "informative-preserved masking, reconstruction and "
                    "consistency losses.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="local-statistics heatmap and table")
    p.add_argument("scene", help="input PLY scene")
    p.add_argument("config", help="statistics config JSON")
    p.add_argument("outdir")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("mask", help="export a progressive mask sequence")
    p.add_argument("scene")
    p.add_argument("config")
    p.add_argument("outdir")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("pretrain", help="run the pretraining loop")
    p.add_argument("dataset", help="directory of PLY scenes")
    p.add_argument("config")
    p.add_argument("outdir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--zeta1", type=float)
    p.add_argument("--zeta2", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("reconstruct", help="fold reconstructions from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("scene")
    p.add_argument("config")
    p.add_argument("outdir")
    p.add_argument("--theta", type=float, default=0.4)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("ablate", help="mask-strategy ablation grid")
    p.add_argument("dataset")
    p.add_argument("config")
    p.add_argument("outdir")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="run the gradient-check suite")
    p.add_argument("outdir")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PlyParseError, DegenerateSceneError, CheckpointError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
