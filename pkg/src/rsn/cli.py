"""Command line entry point: ``rsn <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .core import PEDESTRIAN, VEHICLE, Box7, Detection, DetectorConfig, make_rng
from .evalkit import evaluation_report, wbf_3d
from .pipeline import (SWEEP_HEADER, RunConfig, Scene, bench_gamma_sweep, detections_to_jsonl,
                       init_weights, run_pipeline, synth_scene, synth_sequence)
from .rife import load_weights, save_weights
from .sparse import PRESET_NAMES, SpfeConfig
from .voxelizer import regroup_sequence

CLASSES = {"vehicle": VEHICLE, "pedestrian": PEDESTRIAN}


def worker_count() -> int:
    raw = os.environ.get("RSN_THREADS")
    if raw is None:
        return min(8, os.cpu_count() or 1)
    n = int(raw)
    if n < 1:
        raise ValueError("RSN_THREADS must be a positive integer")
    return n


def ordered_map(fn, items):
    """Map over a thread pool of RSN_THREADS workers, results in input order."""
    items = list(items)
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        return list(pool.map(fn, items))


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="RunConfig JSON; flags below override it")
    p.add_argument("--class", dest="cls", choices=sorted(CLASSES), default=None)
    p.add_argument("--preset", choices=PRESET_NAMES, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--frames", type=int, default=None, help="k + 1 input frames")


def build_config(args) -> RunConfig:
    """RunConfig from --config (or class defaults), then flag overrides."""
    if args.config:
        cfg = RunConfig.from_json(json.loads(args.config.read_text()))
    else:
        ped = args.cls == "pedestrian"
        det = DetectorConfig.pedestrian() if ped else DetectorConfig.vehicle()
        cfg = RunConfig(detector=det, spfe=SpfeConfig.preset("PedS" if ped else "CarS"))
    det = cfg.detector
    if args.gamma is not None:
        det = replace(det, gamma=args.gamma)
    spfe = cfg.spfe
    if args.preset:
        spfe = SpfeConfig.preset(args.preset)
        if spfe.dims == 3 and det.pillar:
            det = replace(det, voxel_size=(det.voxel_size[0], det.voxel_size[1], det.voxel_size[0]))
    frames = args.frames or cfg.frames
    return replace(cfg, detector=det, spfe=spfe, height=args.height or cfg.height,
                   width=args.width or cfg.width, frames=frames, temporal=frames > 1)


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = make_rng(args.seed)
    cls = CLASSES[args.cls]
    names = []
    for i in range(args.num_scenes):
        if args.frames > 1:
            seq = synth_sequence(rng, args.frames, args.boxes, args.bg_points, cls,
                                 args.height, args.width)
            for f, s in enumerate(seq):
                name = f"scene_{i:04d}_f{f:02d}.npz"
                s.save(out / name)
                names.append(name)
        else:
            s = synth_scene(rng, args.boxes, args.bg_points, cls, args.height, args.width)
            name = f"scene_{i:04d}.npz"
            s.save(out / name)
            names.append(name)
    (out / "manifest.json").write_text(json.dumps({"seed": args.seed, "scenes": names}, indent=2))
    print(f"wrote {len(names)} scenes to {out}")
    return 0


def cmd_weights_init(args) -> int:
    cfg = build_config(args)
    w = init_weights(cfg, make_rng(args.seed))
    save_weights(w, args.out)
    Path(str(args.out) + ".config.json").write_text(
        json.dumps(replace(cfg, seed=args.seed).to_json(), indent=2, sort_keys=True))
    print(f"wrote {len(w)} tensors to {args.out}")
    return 0


def _load_scenes(paths) -> list[tuple[str, Scene]]:
    out = []
    for p in paths:
        p = Path(p)
        files = sorted(p.glob("*.npz")) if p.is_dir() else [p]
        out.extend((f.stem, Scene.load(f)) for f in files)
    if not out:
        raise SystemExit("no scenes found")
    return out


def _sequences(scenes):
    """Split oldest-first scenes named ``<seq>_fNN`` into their sequences."""
    groups: dict[str, list] = {}
    for name, s in scenes:
        key = name.rsplit("_f", 1)[0] if "_f" in name else name
        groups.setdefault(key, []).append((name, s))
    return list(groups.values())


def cmd_run(args) -> int:
    cfg = build_config(args)
    if not (args.planted_seg and args.planted_head) and args.weights is None:
        raise SystemExit("--weights is required unless both oracles are planted")
    weights = load_weights(args.weights) if args.weights else init_weights(cfg, make_rng(0))
    scenes = _load_scenes(args.scenes)
    jobs = []
    for seq in _sequences(scenes):
        jobs.extend(list(g) for g in regroup_sequence(seq, cfg.frames - 1))

    def job(group):
        res = run_pipeline([s for _, s in group], cfg, weights, args.planted_seg, args.planted_head)
        return group[0][0], res

    results = ordered_map(job, jobs)
    with open(args.out, "w") as f:
        for name, res in results:
            f.write(detections_to_jsonl(res.detections, scene=name))
    if args.stats:
        Path(args.stats).write_text(json.dumps(
            [{"scene": n, "timings_ms": r.timings, "counts": r.counts,
              "spfe": [b.__dict__ for b in r.spfe_stats]} for n, r in results], indent=2))
    print(f"{sum(len(r.detections) for _, r in results)} detections from {len(results)} scenes")
    return 0


def cmd_bench_gamma(args) -> int:
    cfg = build_config(args)
    scenes = [s for _, s in _load_scenes(args.scenes)]
    gammas = [float(g) for g in args.gammas.split(",")] if args.gammas else \
        np.linspace(0.0, 1.0, args.steps).tolist()
    rows = bench_gamma_sweep(scenes, cfg, gammas, seed=args.seed)
    text = SWEEP_HEADER + "\n" + "".join(r.as_csv() + "\n" for r in rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def read_detections(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(path) as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                out.setdefault(d.get("scene", ""), []).append(Detection.from_json(d))
    return out


SCENE_SPACING = 1000.0


def _shift(b: Box7, t: np.ndarray) -> Box7:
    return Box7(*(b.center + t), b.l, b.w, b.h, b.theta)


def cmd_eval(args) -> int:
    dets = read_detections(args.dets)
    scenes = _load_scenes(args.scenes)
    all_d, all_g = [], []
    # scenes are pooled into one frame, spaced far apart so no box of one
    # scene can overlap a box of another
    for i, (name, s) in enumerate(scenes):
        shift = np.array([SCENE_SPACING * i, 0.0, 0.0])
        all_d.extend(Detection(_shift(d.box, shift), d.score, d.class_id)
                     for d in dets.get(name, []))
        all_g.extend((_shift(b, shift), c) for b, c in zip(s.boxes, s.classes))
    thr = {VEHICLE: args.iou_vehicle, PEDESTRIAN: args.iou_pedestrian}
    report = evaluation_report(all_d, all_g, thr, args.mode)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_fuse(args) -> int:
    sets = [read_detections(p) for p in args.inputs]
    names = sorted(set().union(*sets))
    with open(args.out, "w") as f:
        for name in names:
            fused = wbf_3d([s.get(name, []) for s in sets], args.threshold)
            f.write(detections_to_jsonl(fused, scene=name))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rsn", description="Range-image sparse detector toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic LiDAR scenes")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--num-scenes", type=int, default=4)
    p.add_argument("--boxes", type=int, default=4)
    p.add_argument("--bg-points", type=int, default=200)
    p.add_argument("--class", dest="cls", choices=sorted(CLASSES), default="vehicle")
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=512)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("weights-init", help="write random network weights")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_weights_init)

    p = sub.add_parser("run", help="run the detector over scenes")
    p.add_argument("scenes", nargs="+")
    p.add_argument("--weights")
    p.add_argument("--out", required=True, help="detections JSON lines")
    p.add_argument("--stats", help="per-scene timings and counts JSON")
    p.add_argument("--planted-seg", action="store_true", help="segmentation from labels")
    p.add_argument("--planted-head", action="store_true", help="head output from labels")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench-gamma", help="cost and recall against the score threshold")
    p.add_argument("scenes", nargs="+")
    p.add_argument("--gammas", help="comma separated list")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    _add_config_flags(p)
    p.set_defaults(func=cmd_bench_gamma)

    p = sub.add_parser("eval", help="AP / APH of detections against scene labels")
    p.add_argument("--dets", required=True)
    p.add_argument("scenes", nargs="+")
    p.add_argument("--mode", choices=("bev", "3d"), default="3d")
    p.add_argument("--iou-vehicle", type=float, default=0.7)
    p.add_argument("--iou-pedestrian", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse", help="weighted boxes fusion of detection files")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.55)
    p.set_defaults(func=cmd_fuse)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
