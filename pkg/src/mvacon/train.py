"""Plain-SGD training loop over one synthetic scene."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import config_hash, save_config
from .head import match_and_loss
from .model import Detector
from .scene import Scene, generate_scene, render
from .tensor import EvaluationError

log = logging.getLogger(__name__)

CSV_HEADER = "step,loss,box_err,cls_acc"


class TrainingError(RuntimeError):
    """Training hit a non-finite loss; a diagnostic dump was written."""


@dataclass
class Batch:
    scene: Scene
    images: np.ndarray
    images_next: np.ndarray | None


def make_batch(cfg: dict) -> Batch:
    scene = generate_scene(cfg["scene"])
    images = render(scene).images
    nxt = None
    if cfg["model"]["head"]["two_frame"]:
        nxt = render(scene.advance(float(cfg["scene"]["dt"]))).images
    return Batch(scene, images, nxt)


def evaluate(det: Detector, batch: Batch):
    res = det.forward(batch.images, batch.images_next)
    cfg = det.cfg["model"]["head"]
    match = match_and_loss(res.detections, batch.scene.boxes, cfg["lambda_cls"], cfg["lambda_box"])
    return res, match


def metrics(res, match, gt) -> tuple[float, float]:
    """Mean matched center error (m) and per-query class accuracy."""
    dets = res.detections
    O = len(dets)
    target = np.full(O, dets.logits.shape[1] - 1)
    errs = []
    for j, i in match.assignment:
        target[i] = gt[j].label
        errs.append(float(np.linalg.norm(dets.centers[i] - np.asarray(gt[j].center))))
    acc = float((dets.labels() == target).mean())
    return (float(np.mean(errs)) if errs else 0.0), acc


def save_checkpoint(det: Detector, path: str | Path, cfg_hash: str) -> None:
    state = det.store.state_dict()
    np.savez(path, __config_hash__=np.array(cfg_hash), __config__=np.array(json.dumps(det.cfg)), **state)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path) as z:
        cfg = json.loads(str(z["__config__"]))
        state = {k: z[k] for k in z.files if not k.startswith("__")}
    return cfg, state


def train(cfg: dict, out_dir: str | Path) -> dict:
    """Train on the configured scene; writes ``metrics.csv``, ``checkpoint.npz``, ``config.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = config_hash(cfg)
    save_config(cfg, out / "config.json")
    batch = make_batch(cfg)
    det = Detector(cfg, batch.scene.rig)
    lr = float(cfg["training"]["lr"])
    steps = int(cfg["training"]["steps"])
    gt = batch.scene.boxes
    rows = []
    with open(out / "metrics.csv", "w", buffering=1) as fh:
        fh.write(f"# config_hash={h}\n{CSV_HEADER}\n")
        for step in range(1, steps + 1):
            try:
                res, match = evaluate(det, batch)
                loss = match.loss.item()
                if not math.isfinite(loss):
                    raise EvaluationError("non-finite loss")
                det.store.zero_grad()
                match.loss.backward()
                for p in det.params:
                    if p.grad is not None and not np.isfinite(p.grad).all():
                        raise EvaluationError(f"non-finite gradient in {p.name}")
            except EvaluationError as exc:
                dump = out / f"nonfinite_step{step}.json"
                with open(dump, "w") as dfh:
                    json.dump({"step": step, "error": str(exc), "config_hash": h,
                               "param_norms": {p.name: float(np.linalg.norm(p.data))
                                               for p in det.params}}, dfh, indent=1)
                raise TrainingError(f"step {step}: {exc}; diagnostics in {dump}") from exc
            box_err, acc = metrics(res, match, gt)
            for p in det.params:
                if p.grad is not None:
                    p.data -= lr * p.grad
            row = (step, loss, box_err, acc)
            rows.append(row)
            fh.write(f"{step},{loss:.10g},{box_err:.10g},{acc:.10g}\n")
            if step % 20 == 0 or step == 1:
                log.info("step %d loss %.4f box_err %.3f cls_acc %.3f", *row)
    save_checkpoint(det, out / "checkpoint.npz", h)
    return {"rows": rows, "config_hash": h, "detector": det, "batch": batch}
