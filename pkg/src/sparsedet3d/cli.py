"""Command-line interface.

Subcommands: synth, train, infer, eval, oracles, bench, gradcheck.
`SPARSEDET3D_THREADS` bounds worker parallelism for per-scene inference.
"""
import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import _kernels, __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config, load_config_file, preset
from .data import SceneRecord, load_scene_dir, save_scene, synth_scenes
from .detector import Detector
from .geometry import Box3D
from .metrics import eval_map, recall_at_iou
from .voxelize import ClassSizeTable


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("SPARSEDET3D_THREADS", "1")))
    except ValueError:
        return 1


def _load_config(args, default_preset="toy") -> RunConfig:
    cfg = preset(default_preset)
    if getattr(args, "config", None):
        cfg = load_config_file(args.config, base=None)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "precision", None):
        cfg.precision = args.precision
    return cfg


def _detector_from_checkpoint(path, precision=None) -> Detector:
    tensors, config_text = load_checkpoint(path)
    from .config import parse_config

    cfg = parse_config(config_text, base=RunConfig())
    if precision:
        cfg.precision = precision
    if "class_sizes" not in tensors:
        raise ValueError(f"{path}: checkpoint lacks the class_sizes tensor")
    det = Detector(cfg, ClassSizeTable(tensors["class_sizes"].astype(np.float64)))
    det.store.load_tensors(tensors)
    return det


def cmd_synth(args):
    from .data import SynthSpec

    spec = SynthSpec(n_class=args.classes)
    scenes = synth_scenes(args.count, args.seed if args.seed is not None else 0, spec)
    for s in scenes:
        save_scene(s, args.out, fmt=args.format)
    print(f"wrote {len(scenes)} scenes to {args.out} ({args.format})")
    return 0


def cmd_train(args):
    from .train import checkpoint_payload, run_toy_train

    cfg = _load_config(args)
    scenes = load_scene_dir(args.scenes)
    print(f"training on {len(scenes)} scenes, {cfg.steps} steps, "
          f"preset={cfg.dataset_preset}, backend={_kernels.BACKEND}")
    det, trace = run_toy_train(scenes, cfg, log=print)
    tensors, config_text = checkpoint_payload(det)
    save_checkpoint(args.out, tensors, config_text)
    print(f"checkpoint -> {args.out} ({det.store.n_parameters()} parameters)")
    print(f"loss first={trace[0].total:.4f} last={trace[-1].total:.4f}")
    return 0


def _infer_one(det, scene):
    dets = det.infer(scene.cloud)
    return [
        {
            "scene_id": scene.scene_id,
            "class": int(c),
            "score": float(s),
            "cx": b.cx, "cy": b.cy, "cz": b.cz,
            "w": b.w, "l": b.l, "h": b.h,
            "theta": b.theta,
        }
        for (b, s, c) in dets
    ]


def cmd_infer(args):
    det = _detector_from_checkpoint(args.checkpoint, args.precision)
    scenes = load_scene_dir(args.scenes)
    workers = worker_count()
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda s: _infer_one(det, s), scenes))
    else:
        results = [_infer_one(det, s) for s in scenes]
    out = Path(args.out)
    with out.open("w") as f:
        for recs in results:
            for r in recs:
                f.write(json.dumps(r) + "\n")
    n = sum(len(r) for r in results)
    print(f"{n} detections over {len(scenes)} scenes -> {out}")
    return 0


def _read_predictions(path, scenes):
    by_scene = {s.scene_id: [] for s in scenes}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            r = json.loads(line)
            box = Box3D(r["cx"], r["cy"], r["cz"], r["w"], r["l"], r["h"], r["theta"])
            if r["scene_id"] in by_scene:
                by_scene[r["scene_id"]].append((int(r["class"]), float(r["score"]), box))
    return [by_scene[s.scene_id] for s in scenes]


def cmd_eval(args):
    scenes = load_scene_dir(args.scenes)
    preds = _read_predictions(args.pred, scenes)
    gts = [(s.boxes, s.class_ids) for s in scenes]
    thresholds = tuple(float(t) for t in args.iou.split(","))
    res = eval_map(preds, gts, thresholds)
    for thr in thresholds:
        print(f"IoU {thr}:")
        for cid, ap in sorted(res["ap"][thr].items()):
            print(f"  class {cid}: AP = {ap:.4f}")
        print(f"  mAP = {res['map'][thr]:.4f}")
    rec = recall_at_iou(preds, gts, thresholds[0])
    print(f"recall@{thresholds[0]} = {rec:.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps(
            {"map": {str(k): v for k, v in res["map"].items()},
             "recall": rec}, indent=2) + "\n")
    return 0


def cmd_oracles(args):
    from .oracle_suites import run_suites

    ok = run_suites(seed=args.seed if args.seed is not None else 0)
    print("all oracle suites passed" if ok else "ORACLE FAILURES")
    return 0 if ok else 1


def cmd_gradcheck(args):
    from .oracle_suites import GRAD_SUITES, run_suites

    ok = run_suites(GRAD_SUITES, seed=args.seed if args.seed is not None else 0)
    print("gradient checks passed" if ok else "GRADIENT CHECK FAILURES")
    return 0 if ok else 1


def cmd_bench(args):
    from .bench import run_bench

    rows, text = run_bench(seed=args.seed if args.seed is not None else 0,
                           out=args.out)
    print(text, end="")
    if args.out:
        print(f"# table -> {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="sparsedet3d",
        description="Sparse 3D voxel detection pipeline (CPU, from scratch).")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *flags):
        if "config" in flags:
            sp.add_argument("--config", help="flat key = value config file")
        if "seed" in flags:
            sp.add_argument("--seed", type=int, default=None)
        if "scenes" in flags:
            sp.add_argument("--scenes", required=True, help="scene directory")
        if "checkpoint" in flags:
            sp.add_argument("--checkpoint", required=True)
        if "out" in flags:
            sp.add_argument("--out", required=True)
        if "precision" in flags:
            sp.add_argument("--precision", choices=("f32", "f64"), default=None)

    sp = sub.add_parser("synth", help="generate synthetic scenes")
    common(sp, "seed", "out")
    sp.add_argument("-n", "--count", type=int, default=10)
    sp.add_argument("--classes", type=int, default=3)
    sp.add_argument("--format", choices=("binary", "text"), default="binary")
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", help="toy training loop")
    common(sp, "config", "seed", "scenes", "out", "precision")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("infer", help="run the pipeline on scenes")
    common(sp, "config", "seed", "scenes", "checkpoint", "out", "precision")
    sp.set_defaults(fn=cmd_infer)

    sp = sub.add_parser("eval", help="mAP/recall of predictions against gt")
    common(sp, "scenes")
    sp.add_argument("--pred", required=True, help="line-delimited JSON detections")
    sp.add_argument("--iou", default="0.25,0.5")
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("oracles", help="run every derived-oracle suite")
    common(sp, "seed")
    sp.set_defaults(fn=cmd_oracles)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(sp, "seed")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("bench", help="kernel throughput, compiled vs fallback")
    common(sp, "seed")
    sp.add_argument("--out", default=None, help="write the TSV table here")
    sp.set_defaults(fn=cmd_bench)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
