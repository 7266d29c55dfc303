"""Command-line entry point: ``vvdet <command> [--config FILE] [--set key=value ...]``."""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from vvdet.config import ConfigError, apply_overrides, load_config
from vvdet.data import SceneDataset, SceneSpec, generate_dataset
from vvdet.fsd1 import format_statistics, group_statistics, perfect_votes
from vvdet.model import ModelConfig
from vvdet.train import evaluate_model, load_model, train
from vvdet.virtual_voxel import voxel_counts

ABLATE_STRATEGIES = ("geometric-center", "plain-centroid", "weighted-centroid")


def scene_spec(cfg):
    return SceneSpec(**cfg.section("scene"), seed=cfg["seed"])


def _split(cfg, name):
    return SceneDataset(os.path.join(cfg["data.root"], name), cfg["eval.max_scenes"] if name != "train" else 0)


def _train_variant(cfg, out, name, overrides):
    vcfg = apply_overrides(cfg, list(overrides) + [f"train.out={os.path.join(out, name)}"])
    res = train(vcfg, log=lambda line: print(f"[{name}] {line}", flush=True))
    return vcfg, res


def cmd_gen(cfg, args):
    root = args.out or cfg["data.root"]
    generate_dataset(root, scene_spec(cfg), cfg["data.num_train"], cfg["data.num_val"])
    print(f"wrote {cfg['data.num_train']} train and {cfg['data.num_val']} val scenes to {root}")
    return 0


def cmd_train(cfg, args):
    if args.out:
        cfg = apply_overrides(cfg, [f"train.out={args.out}"])
    res = train(cfg)
    print(f"checkpoint: {res.checkpoint}")
    if res.final is not None:
        print(res.final.format(cfg["scene.class_names"]))
        print(f"mAP: {res.final.mAP:.4f}")
    return 0


def cmd_eval(cfg, args):
    det, mcfg = load_model(args.checkpoint, args.set)
    if args.data:
        mcfg = apply_overrides(mcfg, [f"data.root={args.data}"])
    ev = evaluate_model(det, _split(mcfg, args.split), mcfg)
    print(ev.format(mcfg["scene.class_names"]))
    print(f"mAP: {ev.mAP:.4f}")
    return 0


def _vote_source(cfg, checkpoint):
    """Yields (xyz, boxes, votes) using a trained model, or exact centre votes without one."""
    if checkpoint:
        det, mcfg = load_model(checkpoint)
    else:
        det, mcfg = None, cfg
    ds = _split(cfg, "val")

    def scenes():
        for i in range(len(ds)):
            points, boxes = ds[i]
            if det is None:
                votes = perfect_votes(points.xyz, boxes, len(cfg["scene.class_names"]))
            else:
                votes, _ = det.run(points)
            yield points.xyz, boxes, votes

    return scenes(), ModelConfig.from_config(mcfg).grid


def cmd_stats(cfg, args):
    scenes, grid = _vote_source(cfg, args.checkpoint)
    scenes = list(scenes)
    stats = group_statistics(scenes, grid, cfg["model.ccl_radius"])
    counts = np.array([voxel_counts(xyz, votes, grid) for xyz, _, votes in scenes]).reshape(-1, 2)
    report = format_statistics(stats, cfg["scene.class_names"]) + "\n" + format_sparsity(*counts.sum(axis=0))
    print(report)
    if args.report:
        with open(args.report, "w") as f:
            f.write(report + "\n")
    return 0


def format_sparsity(real, total):
    increase = (total - real) / max(real, 1)
    return f"real_voxels,total_voxels,virtual_increase\n{int(real)},{int(total)},{increase:.4f}"


def _table(header, rows):
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    line = lambda r: " | ".join(str(v).ljust(w) for v, w in zip(r, widths))  # noqa: E731
    return "\n".join([line(header), "-+-".join("-" * w for w in widths)] + [line(r) for r in rows])


def _ap_row(label, ev, classes):
    return [label] + [f"{ev.ap[c] * 100:.1f}" for c in classes] + [f"{ev.mAP * 100:.1f}"]


def cmd_ablate_assign(cfg, args):
    names = cfg["scene.class_names"]
    classes = list(range(len(names)))
    rows = []
    out = args.out or os.path.join(cfg["train.out"], "ablate-assign")
    for strategy in args.strategies.split(","):
        _, res = _train_variant(cfg, out, strategy, [f"assign.strategy={strategy}"])
        rows.append(_ap_row(strategy, res.final, classes))
    print(_table(["assignment"] + list(names) + ["mAP"], rows))
    return 0


def cmd_sweep_voxel_size(cfg, args):
    names = cfg["scene.class_names"]
    classes = list(range(len(names)))
    rows = []
    out = args.out or os.path.join(cfg["train.out"], "sweep-voxel-size")
    for size in [float(s) for s in args.sizes.split(",")]:
        vcfg, res = _train_variant(cfg, out, f"vs{size:g}", [f"model.voxel_size=[{size},{size},{size}]"])
        det, _ = load_model(res.checkpoint)
        ds = _split(vcfg, "val")
        nv = [det.run(ds[i][0])[1].extra["vset"].num_virtual for i in range(len(ds))]
        rows.append(_ap_row(f"{size:g}", res.final, classes) + [f"{np.mean(nv):.1f}"])
    print(_table(["voxel size"] + list(names) + ["mAP", "virtual/scene"], rows))
    return 0


def cmd_compare_v1(cfg, args):
    names = cfg["scene.class_names"]
    classes = list(range(len(names)))
    out = args.out or os.path.join(cfg["train.out"], "compare-v1")
    rows = []
    for tail in ("v1", "v2"):
        _, res = _train_variant(cfg, out, tail, [f"model.tail={tail}"])
        ev = res.final
        rows.append(_ap_row(tail, ev, classes)
                    + [f"{np.mean([ev.ap_crowded[c] for c in classes]) * 100:.1f}"])
    print(_table(["tail"] + list(names) + ["mAP", "crowded mAP"], rows))
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "stats": cmd_stats,
    "ablate-assign": cmd_ablate_assign,
    "sweep-voxel-size": cmd_sweep_voxel_size,
    "compare-v1": cmd_compare_v1,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="vvdet", description="Fully sparse virtual-voxel 3D detection")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--data", help="dataset root (overrides data.root)")
        return p

    add("gen", "generate a synthetic dataset").add_argument("--out", help="dataset root to write")
    add("train", "train a detector").add_argument("--out", help="run directory (overrides train.out)")
    p = add("eval", "evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p = add("stats", "per-object cluster / virtual voxel / real voxel statistics")
    p.add_argument("--checkpoint", help="use this model's votes (default: exact centre votes)")
    p.add_argument("--report", help="also write the report to this file")
    p = add("ablate-assign", "train once per assignment strategy and compare AP")
    p.add_argument("--strategies", default=",".join(ABLATE_STRATEGIES))
    p.add_argument("--out")
    p = add("sweep-voxel-size", "train once per virtual voxel size and compare AP")
    p.add_argument("--sizes", default="0.2,0.4,0.8")
    p.add_argument("--out")
    add("compare-v1", "cluster tail vs virtual voxel tail on the same backbone").add_argument("--out")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = list(args.set)
        if args.data:
            overrides.append(f"data.root={args.data}")
        cfg = load_config(args.config, overrides if args.command != "eval" else [])
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"vvdet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
