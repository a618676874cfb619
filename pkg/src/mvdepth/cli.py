"""``mvdepth`` command line: data generation, training, sampling, completion,
fusion, point-cloud export and evaluation.

Exit codes: 0 success, 2 usage, 3 data/config mismatch, 4 IO.
Option values resolve as command-line flag > ``--config`` JSON > default.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import metrics, plotting
from .camera import CameraRig, Intrinsics, dynamic_cube_rig, fixed_cuboid_rig
from .dataset import KINDS, build_dataset
from .denoiser import DenoiserConfig, build_denoiser, load_checkpoint, save_checkpoint, train
from .geometry import (EPS_REL, MIN_VIEWS, PSI_MAX, DepthMapSet, depth_average, depth_filter,
                       fuse_to_pointcloud, read_ply, write_ply)
from .io import FormatError, read_depth_container, read_pfm, write_depth_container
from .scheduler import SamplerConfig, cosine_schedule, sample_completion, sample_unconditional

log = logging.getLogger("mvdepth")

EXIT_OK, EXIT_USAGE, EXIT_MISMATCH, EXIT_IO = 0, 2, 3, 4
FULL_RIG = 8
FUSION_WINDOW = 20


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def usage_error(msg):
    return CliError(msg, EXIT_USAGE)


def mismatch_error(msg):
    return CliError(msg, EXIT_MISMATCH)


# built-in defaults per command; parser defaults stay None so that the
# config file can fill anything the user did not pass explicitly
DEFAULTS = {
    "gen-data": {"count": 64, "views": 4, "res": 16, "seed": 0, "rig": "fixed",
                 "first_camera": [1.0, 1.0, 1.0], "kinds": list(KINDS)},
    "train": {"epochs": 30, "seed": 0, "T": 100, "s": 0.008, "batch_size": 8, "lr": 2e-4,
              "levels": 3, "base_channels": 32, "channel_multipliers": [1, 2, 4], "groups": 8,
              "heads": 2, "attention_levels": [1, 2], "k": 10, "R": 3, "delta": 0.3, "tau": 0.15},
    "sample": {"seed": 0, "fusion_window": None, "count": 1, "psi_max": PSI_MAX,
               "epsilon_rel": EPS_REL, "min_views": None, "background_cut": 0.8},
    "complete": {"seed": 0, "fusion_window": None, "index": 0, "psi_max": PSI_MAX,
                 "epsilon_rel": EPS_REL, "min_views": None, "background_cut": 0.8},
    "fuse": {"index": None, "psi_max": PSI_MAX, "epsilon_rel": EPS_REL, "min_views": None,
             "average": False},
    "export-ply": {"index": None},
    "eval": {"metric": ["cd", "emd"], "subsample": None, "seed": 0, "oracle": False},
}


def resolve(args: argparse.Namespace, command: str) -> dict:
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise usage_error(f"config file {path} not found")
        try:
            cfg.update(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise CliError(f"cannot parse {path}: {exc}", EXIT_IO) from exc
    for key, val in vars(args).items():
        if val is not None and key not in ("command", "func", "config"):
            cfg[key] = val
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    for key in keys:
        if cfg.get(key) is None:
            raise usage_error(f"--{key.replace('_', '-')} is required")


def _existing(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise usage_error(f"input {path} does not exist")
    return path


def _sidecar(out: Path, suffix: str) -> Path:
    return out.with_name(out.name + suffix)


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _sampler_config(cfg: dict, meta: dict) -> SamplerConfig:
    mcfg = meta["config"]
    sch = meta["schedule"]
    window = cfg["fusion_window"]
    if window is None:
        # the default window never exceeds a short chain
        window = min(FUSION_WINDOW, sch["T"])
    try:
        return SamplerConfig(
            T=sch["T"], s=sch["s"], fusion_window=window, psi_max=cfg["psi_max"],
            epsilon_rel=cfg["epsilon_rel"],
            min_views=cfg["min_views"] if cfg["min_views"] is not None
            else default_min_views(len(meta["rig"]["cameras"])),
            tau=cfg.get("tau") or mcfg["tau"], k=cfg.get("k") or mcfg["k"],
            R=cfg.get("R") or mcfg["R"], delta=cfg.get("delta") or mcfg["delta"],
            seed=cfg["seed"], near=meta["near"], far=meta["far"],
            background_cut=cfg["background_cut"])
    except ValueError as exc:
        raise usage_error(str(exc)) from exc


def default_min_views(views: int) -> int:
    """Support needed by the depth filter unless ``--min-views`` is given.

    Reduced rigs (the toy four-view subset) see most surface points from only
    two cameras, so one supporting neighbour is required there.
    """
    return MIN_VIEWS if views >= FULL_RIG else 1


def _load_model(cfg: dict):
    model, meta = load_checkpoint(_existing(cfg["ckpt"]))
    rig = CameraRig.from_dict(meta["rig"])
    if cfg.get("rig_file"):
        rig = CameraRig.from_json(_existing(cfg["rig_file"]).read_text())
        mc = model.config
        if len(rig) != mc.views or rig.resolution != (mc.resolution, mc.resolution):
            raise mismatch_error(
                f"rig has {len(rig)} views at {rig.resolution}, checkpoint expects "
                f"{mc.views} views at {mc.resolution}x{mc.resolution}")
    return model, meta, rig


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> int:
    _require(cfg, "out")
    intr = Intrinsics.default(int(cfg["res"]))
    try:
        if cfg["rig"] == "fixed":
            rig = fixed_cuboid_rig(intr, views=int(cfg["views"]))
        else:
            rig = dynamic_cube_rig(cfg["first_camera"], intr, views=int(cfg["views"]))
        ds = build_dataset(int(cfg["count"]), rig, int(cfg["seed"]), cfg["out"], kinds=cfg["kinds"])
    except ValueError as exc:
        raise usage_error(str(exc)) from exc
    out = Path(cfg["out"])
    plotting.plot_depth_grid(ds.samples[0], _sidecar(out, ".png"), labels=rig.labels)
    m = ds.manifest
    print(json.dumps({k: m[k] for k in ("count", "N", "H", "W", "seed")}
                     | {"kinds": sorted(set(m["shapes"])), "out": str(out)}))
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    _require(cfg, "data", "out")
    ds_meta, samples = read_depth_container(_existing(cfg["data"]))
    rig = CameraRig.from_dict(ds_meta["rig"])
    N, H, W = ds_meta["N"], ds_meta["H"], ds_meta["W"]
    if H != W:
        raise mismatch_error(f"the denoiser needs square maps, dataset is {H}x{W}")
    for key, have in (("views", N), ("res", H)):
        if cfg.get(key) is not None and int(cfg[key]) != have:
            raise mismatch_error(f"--{key} {cfg[key]} does not match the dataset ({have})")
    try:
        mcfg = DenoiserConfig(
            levels=cfg["levels"], base_channels=cfg["base_channels"],
            channel_multipliers=cfg["channel_multipliers"], groups=cfg["groups"],
            heads=cfg["heads"], resolution=H, views=N, attention_levels=cfg["attention_levels"],
            k=cfg["k"], R=min(cfg["R"], N - 1), delta=cfg["delta"], tau=cfg["tau"])
        schedule = cosine_schedule(int(cfg["T"]), float(cfg["s"]))
    except ValueError as exc:
        raise mismatch_error(str(exc)) from exc
    model = build_denoiser(mcfg, seed=int(cfg["seed"]))
    result = train(model, samples, rig, schedule, int(cfg["epochs"]), seed=int(cfg["seed"]),
                   batch_size=int(cfg["batch_size"]), lr=float(cfg["lr"]),
                   log=lambda e, l: log.info("epoch %d loss %.6f", e, l))
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result.model, {
        "schedule": schedule.to_dict(), "rig": rig.to_dict(),
        "near": ds_meta["near"], "far": ds_meta["far"], "seed": int(cfg["seed"])})
    with open(_sidecar(out, ".loss.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss"])
        writer.writerows((i + 1, repr(l)) for i, l in enumerate(result.losses))
    _write_json(_sidecar(out, ".config.json"), cfg)
    if result.losses:
        plotting.plot_loss_curve(result.losses, _sidecar(out, ".loss.png"))
        print(json.dumps({"epochs": len(result.losses), "first_loss": result.losses[0],
                          "final_loss": result.losses[-1], "out": str(out)}))
    else:
        print(json.dumps({"epochs": 0, "out": str(out)}))
    return EXIT_OK


def cmd_sample(cfg: dict) -> int:
    _require(cfg, "ckpt", "out")
    model, meta, rig = _load_model(cfg)
    scfg = _sampler_config(cfg, meta)
    model.set_attention(k=scfg.k, R=scfg.R, delta=scfg.delta, tau=scfg.tau)
    schedule = cosine_schedule(scfg.T, scfg.s)
    maps, masks = [], []
    for i in range(int(cfg["count"])):
        run = SamplerConfig(**{**scfg.to_dict(), "seed": scfg.seed + i})
        res = sample_unconditional(model, rig, schedule, run)
        maps.append(res.depths.values)
        masks.append(res.mask)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = {"kind": "samples", "near": scfg.near, "far": scfg.far, "rig": rig.to_dict(),
                "sampler": scfg.to_dict()}
    write_depth_container(out, manifest, np.stack(maps).astype(np.float32))
    _write_json(_sidecar(out, ".config.json"), cfg | {"sampler": scfg.to_dict()})
    plotting.plot_depth_grid(maps[0], _sidecar(out, ".png"), labels=rig.labels)
    summary = {"count": len(maps), "out": str(out)}
    if cfg.get("ply"):
        pts = np.concatenate([fuse_to_pointcloud(DepthMapSet(m, rig, scfg.near, scfg.far), k)
                              for m, k in zip(maps, masks)])
        write_ply(cfg["ply"], pts)
        summary["points"] = len(pts)
    print(json.dumps(summary))
    return EXIT_OK


def _read_single_map(path: Path, index: int) -> np.ndarray:
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    meta, data = read_depth_container(path)
    if not 0 <= index < len(data):
        raise usage_error(f"sample index {index} outside [0, {len(data)})")
    return data[index]


def cmd_complete(cfg: dict) -> int:
    _require(cfg, "ckpt", "input", "view", "out")
    path = _existing(cfg["input"])
    model, meta, rig = _load_model(cfg)
    view = int(cfg["view"])
    if not 0 <= view < len(rig):
        raise usage_error(f"--view {view} outside [0, {len(rig)})")
    x_in = _read_single_map(path, int(cfg["index"]))
    if x_in.ndim == 3:
        x_in = x_in[view]
    if x_in.shape != rig.resolution:
        raise mismatch_error(f"input map is {x_in.shape}, rig expects {rig.resolution}")
    scfg = _sampler_config(cfg, meta)
    model.set_attention(k=scfg.k, R=scfg.R, delta=scfg.delta, tau=scfg.tau)
    res = sample_completion(model, x_in, view, rig, cosine_schedule(scfg.T, scfg.s), scfg)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = {"kind": "completion", "view": view, "near": scfg.near, "far": scfg.far,
                "rig": rig.to_dict(), "sampler": scfg.to_dict()}
    write_depth_container(out, manifest, res.depths.values[None].astype(np.float32))
    _write_json(_sidecar(out, ".config.json"), cfg | {"sampler": scfg.to_dict()})
    plotting.plot_depth_grid(res.depths.values, _sidecar(out, ".png"), labels=rig.labels)
    print(json.dumps({"view": view, "out": str(out)}))
    return EXIT_OK


def _depth_sets(path: Path, index):
    meta, data = read_depth_container(path)
    rig = CameraRig.from_dict(meta["rig"])
    idx = range(len(data)) if index is None else [int(index)]
    for i in idx:
        if not 0 <= i < len(data):
            raise usage_error(f"sample index {i} outside [0, {len(data)})")
        yield DepthMapSet(data[i], rig, meta["near"], meta["far"])


def cmd_fuse(cfg: dict) -> int:
    _require(cfg, "input", "out")
    pts, kept = [], 0
    for depths in _depth_sets(_existing(cfg["input"]), cfg["index"]):
        if cfg["average"]:
            depths = depth_average(depths, cfg["psi_max"], cfg["epsilon_rel"])
        min_views = cfg["min_views"]
        if min_views is None:
            min_views = default_min_views(len(depths.rig))
        mask = depth_filter(depths, cfg["psi_max"], cfg["epsilon_rel"], min_views)
        kept += int(mask.sum())
        pts.append(fuse_to_pointcloud(depths, mask))
    write_ply(cfg["out"], np.concatenate(pts))
    print(json.dumps({"points": kept, "out": str(cfg["out"])}))
    return EXIT_OK


def cmd_export_ply(cfg: dict) -> int:
    _require(cfg, "input", "out")
    pts = np.concatenate([fuse_to_pointcloud(d) for d in _depth_sets(_existing(cfg["input"]), cfg["index"])])
    write_ply(cfg["out"], pts)
    print(json.dumps({"points": len(pts), "out": str(cfg["out"])}))
    return EXIT_OK


def load_cloud_set(path: Path) -> list[np.ndarray]:
    """Clouds from an ``.npz`` (one array per cloud, key order), a ``.ply`` or a
    depth container (one depth-filtered cloud per sample)."""
    suffix = path.suffix.lower()
    if suffix == ".npz":
        with np.load(path) as z:
            return [np.asarray(z[k], dtype=np.float64) for k in z.files]
    if suffix == ".ply":
        return [read_ply(path).astype(np.float64)]
    return [fuse_to_pointcloud(d, depth_filter(d, min_views=default_min_views(len(d.rig))))
            .astype(np.float64) for d in _depth_sets(path, None)]


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "gen", "ref", "out")
    gen = load_cloud_set(_existing(cfg["gen"]))
    ref = load_cloud_set(_existing(cfg["ref"]))
    names = list(dict.fromkeys(cfg["metric"]))
    if any(len(c) == 0 for c in gen + ref):
        raise mismatch_error("empty point cloud in the input sets")
    if cfg["subsample"] is not None:
        n = int(cfg["subsample"])
        if any(len(c) < n for c in gen + ref):
            raise mismatch_error(f"--subsample {n} exceeds the smallest cloud")
        gen = [metrics.subsample(c, n, cfg["seed"] + i) for i, c in enumerate(gen)]
        ref = [metrics.subsample(c, n, cfg["seed"] + len(gen) + i) for i, c in enumerate(ref)]
    if "emd" in names and len({len(c) for c in gen + ref}) > 1:
        raise mismatch_error("EMD needs equal point counts; pass --subsample")
    report = metrics.evaluate(gen, ref, names)
    result = {"metrics": report, "generated": len(gen), "reference": len(ref)}
    if cfg["oracle"]:
        if "emd" in names and max(len(c) for c in gen + ref) > 8:
            raise usage_error("--oracle with emd enumerates permutations; use clouds of at most 8 points")
        brute = metrics.evaluate_bruteforce(gen, ref, names)
        diff = max(abs(report[k] - brute[k]) for k in report)
        result["oracle"] = {"metrics": brute, "max_abs_diff": diff, "agree": diff <= 1e-9}
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, result)
    table = metrics.format_table(report)
    _sidecar(out, ".txt").write_text(table + "\n")
    plotting.plot_metrics(report, _sidecar(out, ".png"))
    print(table)
    if cfg["oracle"] and not result["oracle"]["agree"]:
        return EXIT_MISMATCH
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvdepth", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    p.subcommands = {}

    def command(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="JSON file with option defaults")
        sp.set_defaults(func=func)
        p.subcommands[name] = sp
        return sp

    def sampler_flags(sp):
        sp.add_argument("--ckpt")
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--fusion-window", type=int)
        sp.add_argument("--psi-max", type=float)
        sp.add_argument("--epsilon-rel", type=float)
        sp.add_argument("--min-views", type=int)
        sp.add_argument("--tau", type=float)
        sp.add_argument("--k", type=int)
        sp.add_argument("--R", type=int)
        sp.add_argument("--delta", type=float)
        sp.add_argument("--background-cut", type=float,
                        help="sampled values above this become background")
        sp.add_argument("--rig", dest="rig_file", help="camera rig JSON replacing the checkpoint rig")

    sp = command("gen-data", cmd_gen_data, "render a synthetic multi-view depth dataset")
    sp.add_argument("--count", type=int)
    sp.add_argument("--views", type=int)
    sp.add_argument("--res", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--rig", choices=("fixed", "dynamic"))
    sp.add_argument("--first-camera", type=float, nargs=3)
    sp.add_argument("--kinds", nargs="+", choices=KINDS)
    sp.add_argument("--out")

    sp = command("train", cmd_train, "train the denoiser on a dataset")
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--T", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--views", type=int)
    sp.add_argument("--res", type=int)
    sp.add_argument("--base-channels", type=int)
    sp.add_argument("--heads", type=int)

    sp = command("sample", cmd_sample, "unconditional sampling")
    sampler_flags(sp)
    sp.add_argument("--count", type=int)
    sp.add_argument("--ply")

    sp = command("complete", cmd_complete, "complete missing views from one depth map")
    sampler_flags(sp)
    sp.add_argument("--input")
    sp.add_argument("--view", type=int)
    sp.add_argument("--index", type=int, help="sample index when the input is a container")

    sp = command("fuse", cmd_fuse, "depth-filter a depth set and write the fused cloud")
    sp.add_argument("--input")
    sp.add_argument("--out")
    sp.add_argument("--index", type=int)
    sp.add_argument("--psi-max", type=float)
    sp.add_argument("--epsilon-rel", type=float)
    sp.add_argument("--min-views", type=int)
    sp.add_argument("--average", action="store_true", default=None)

    sp = command("export-ply", cmd_export_ply, "back-project all foreground pixels to PLY")
    sp.add_argument("--input")
    sp.add_argument("--out")
    sp.add_argument("--index", type=int)

    sp = command("eval", cmd_eval, "MMD / COV / 1-NNA between cloud sets")
    sp.add_argument("--gen")
    sp.add_argument("--ref")
    sp.add_argument("--out")
    sp.add_argument("--metric", action="append", choices=tuple(metrics.DISTANCES))
    sp.add_argument("--subsample", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--oracle", action="store_true", default=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    torch.set_num_threads(max(1, args.threads))
    command = args.command
    func = args.func
    del args.threads, args.verbose
    try:
        return func(resolve(args, command))
    except CliError as exc:
        print(f"mvdepth {command}: {exc}", file=sys.stderr)
        if exc.code == EXIT_USAGE:
            print(parser.subcommands[command].format_usage(), end="", file=sys.stderr)
        return exc.code
    except (FormatError, OSError) as exc:
        print(f"mvdepth {command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
