"""Training loop, evaluation driver and checkpoint IO for the detector."""
from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from vvdet.assign import AssignConfig
from vvdet.autodiff.checkpoint import load_checkpoint, save_checkpoint
from vvdet.autodiff.optim import AdamW, one_cycle_lr
from vvdet.config import Config, apply_overrides
from vvdet.data import SceneDataset, canonical_box
from vvdet.evaluate import evaluate_ap
from vvdet.geom import Box3D, PointCloud
from vvdet.model import Detector, LossConfig, ModelConfig

METRICS_HEADER = "epoch,loss_cls,loss_reg,loss_vote,mAP"


def assign_config(cfg):
    a = cfg.section("assign")
    return AssignConfig(a["strategy"], a["alpha"], a["margin"], a["k"])


def loss_config(cfg):
    return LossConfig(**cfg.section("loss"))


def build_detector(cfg, seed=None):
    rng = np.random.default_rng(cfg["seed"] if seed is None else seed)
    return Detector(ModelConfig.from_config(cfg), rng)


def square_classes(cfg):
    return {c for c, d in enumerate(cfg["scene.class_dims"]) if d[0] == d[1]}


def augment(points: PointCloud, boxes, rng, square=frozenset()):
    """Random mirror across the x axis and a rotation about z in [-pi/4, pi/4].

    Boxes are re-canonicalized afterwards (``square`` lists square-footprint classes).
    """
    xyz = points.xyz.copy()
    yaws = np.array([b.yaw for b in boxes])
    centers = np.array([b.center for b in boxes]).reshape(-1, 3)
    if rng.uniform() < 0.5:
        xyz[:, 1] *= -1
        centers[:, 1] *= -1
        yaws = -yaws
    theta = rng.uniform(-math.pi / 4, math.pi / 4)
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    xyz[:, :2] = xyz[:, :2] @ rot.T
    centers[:, :2] = centers[:, :2] @ rot.T
    new_boxes = [canonical_box(Box3D(ctr, b.dims, y + theta, b.class_id), b.class_id in square)
                 for b, ctr, y in zip(boxes, centers, yaws)]
    return PointCloud(xyz, points.attrs, points.gt_label), new_boxes


def clip_gradients(params, max_norm):
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm and total > max_norm:
        for g in grads:
            g *= max_norm / total
    return total


def predict_dataset(det: Detector, dataset, cfg, limit=0):
    det.eval()
    preds, gts = [], []
    n = len(dataset) if not limit else min(limit, len(dataset))
    acfg = assign_config(cfg)
    for i in range(n):
        points, boxes = dataset[i]
        preds.append(det.predict(points, cfg["eval.score_thresh"], cfg["eval.nms_iou"], acfg))
        gts.append(boxes)
    det.train()
    return preds, gts


def evaluate_model(det: Detector, dataset, cfg, limit=0):
    preds, gts = predict_dataset(det, dataset, cfg, limit or cfg["eval.max_scenes"])
    classes = list(range(len(cfg["scene.class_names"])))
    return evaluate_ap(preds, gts, cfg["eval.iou_thresholds"], classes)


def save_model(path, det: Detector, cfg, extra=None):
    meta = {"config": dict(cfg), "format": "vvdet-detector"}
    meta.update(extra or {})
    save_checkpoint(path, det.state_dict(), meta)


def load_model(path, overrides=()):
    """Detector and config restored from a checkpoint; ``overrides`` may change eval-time keys."""
    tensors, meta = load_checkpoint(path)
    if meta.get("format") != "vvdet-detector":
        raise ValueError(f"{path}: not a detector checkpoint")
    cfg = apply_overrides(Config(meta["config"]), overrides)
    det = build_detector(cfg)
    det.load_state_dict(tensors)
    det.eval()
    return det, cfg


@dataclass
class TrainResult:
    checkpoint: str
    history: list = field(default_factory=list)
    final: object = None
    seconds: float = 0.0


def _load_item(dataset, idx, seed, epoch, do_augment, square):
    points, boxes = dataset[idx]
    if do_augment:
        points, boxes = augment(points, boxes, np.random.default_rng([seed, epoch, idx]), square)
    return points, boxes


def train(cfg, log=print, train_set=None, val_set=None):
    """Train per ``cfg``; writes ``last.ckpt`` and ``metrics.csv`` under ``train.out``.

    Scene loading and augmentation run on worker threads; each scene's
    augmentation draws from its own (seed, epoch, index) generator and the
    optimizer consumes scenes in a fixed order, so results do not depend on
    thread timing.
    """
    t0 = time.time()
    seed = cfg["seed"]
    root = cfg["data.root"]
    train_set = train_set or SceneDataset(os.path.join(root, "train"), cfg["train.max_scenes"])
    if val_set is None and os.path.isdir(os.path.join(root, "val")):
        val_set = SceneDataset(os.path.join(root, "val"), cfg["eval.max_scenes"])
    out_dir = cfg["train.out"]
    os.makedirs(out_dir, exist_ok=True)
    ckpt = os.path.join(out_dir, "last.ckpt")
    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(dict(cfg), f, indent=1, sort_keys=True)

    det = build_detector(cfg)
    det.train()
    params = det.parameters()
    opt = AdamW(params, cfg["train.lr"], tuple(cfg["train.betas"]), weight_decay=cfg["train.weight_decay"])
    acfg, lcfg = assign_config(cfg), loss_config(cfg)
    epochs = cfg["train.epochs"]
    total_steps = epochs * len(train_set)
    step = 0
    result = TrainResult(ckpt)
    with open(metrics_path, "w") as f:
        f.write(METRICS_HEADER + "\n")
    workers = max(int(cfg["train.workers"]), 1)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for epoch in range(epochs):
            order = np.random.default_rng([seed, epoch]).permutation(len(train_set))
            futures = [pool.submit(_load_item, train_set, int(i), seed, epoch, cfg["train.augment"],
                                   square_classes(cfg))
                       for i in order]
            sums = np.zeros(3)
            for fut in futures:
                points, boxes = fut.result()
                if cfg["train.schedule"] == "onecycle":
                    lr = one_cycle_lr(step, total_steps, cfg["train.lr"])
                else:
                    lr = cfg["train.lr"]
                losses = det.loss(points, boxes, acfg, lcfg)
                opt.zero_grad()
                losses["total"].backward()
                clip_gradients(params, cfg["train.grad_clip"])
                opt.step(lr)
                sums += [float(losses[k].data) for k in ("cls", "reg", "vote")]
                step += 1
            means = sums / max(len(train_set), 1)
            every = cfg["train.eval_every"]
            last = epoch == epochs - 1
            mAP = ""
            if val_set is not None and len(val_set) and (last or (every and (epoch + 1) % every == 0)):
                ev = evaluate_model(det, val_set, cfg)
                mAP = f"{ev.mAP:.4f}"
                if last:
                    result.final = ev
            line = f"{epoch + 1},{means[0]:.6f},{means[1]:.6f},{means[2]:.6f},{mAP}"
            with open(metrics_path, "a") as f:
                f.write(line + "\n")
            result.history.append(line)
            if log:
                log(line)
            save_model(ckpt, det, cfg, {"epoch": epoch + 1})
    result.seconds = time.time() - t0
    return result
