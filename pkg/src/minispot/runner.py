"""Training and evaluation orchestration: deterministic loops, logging,
checkpoint resume, and prediction extraction for the metrics protocol."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError
from .metrics import (EvalResult, GroundTruth, Prediction, cxcywh_to_corners,
                      end_to_end_metrics, iou)
from .model import (AdamW, GtInstance, SpotterConfig, SpotterModel, train_step,
                    transcribe)
from .scenes import ALPHABET, SceneAnnotation
from .tensor import load_checkpoint, save_checkpoint

__all__ = [
    "truths_from_annotation",
    "train",
    "extract_predictions",
    "evaluate",
    "save_training_checkpoint",
    "load_training_checkpoint",
]

SCORE_THRESHOLD = 0.5
NMS_IOU = 0.5
WARMUP_STEPS = 100
MIN_LR_FRACTION = 0.01


def lr_at_step(step: int, total_steps: int, base_lr: float) -> float:
    """Linear warmup then cosine decay; a pure function of (step, total),
    so a resumed run sees the same schedule as an uninterrupted one."""
    warmup = min(WARMUP_STEPS, max(1, total_steps // 10))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = (step - warmup) / span
    floor = base_lr * MIN_LR_FRACTION
    return float(floor + 0.5 * (base_lr - floor) * (1.0 + np.cos(np.pi * progress)))


def truths_from_annotation(ann: SceneAnnotation) -> list[GtInstance]:
    return [GtInstance(inst.control_points, inst.char_ids(), inst.bbox)
            for inst in ann.instances]


def _normalize_image(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float32) / 255.0


def save_training_checkpoint(path, model: SpotterModel, optimizer: AdamW,
                             step: int) -> None:
    arrays = {name: p.data for name, p in model.params().items()}
    arrays.update(optimizer.state_arrays())
    save_checkpoint(arrays, path, meta={"step": step,
                                        "config": model.config.to_dict()})


def load_training_checkpoint(path, model: SpotterModel,
                             optimizer: AdamW | None = None) -> int:
    arrays, meta = load_checkpoint(path)
    model.load_arrays(arrays)
    step = int(meta.get("step", 0))
    if optimizer is not None:
        optimizer.load_state_arrays(arrays, step)
    return step


def train(model: SpotterModel, scenes, steps: int, seed: int = 0,
          batch_size: int = 2, lr: float = 1e-3, log_path=None,
          checkpoint_path=None, resume_from=None,
          checkpoint_every: int | None = None,
          optimizer: AdamW | None = None) -> list[dict]:
    """Deterministic training loop; the batch at step t depends only on
    (seed, t), so resumed runs replay the uninterrupted trajectory."""
    if steps < 1:
        raise DataError("steps must be >= 1")
    if not scenes:
        raise DataError("empty dataset: nothing to train on")
    optimizer = optimizer or AdamW(model.params(), lr=lr)
    start = 0
    if resume_from is not None:
        start = load_training_checkpoint(resume_from, model, optimizer)

    images = [_normalize_image(img) for img, _ in scenes]
    truths = [truths_from_annotation(ann) for _, ann in scenes]

    log_lines: list[dict] = []
    log_fh = open(log_path, "a") if log_path else None
    try:
        for step in range(start, steps):
            rng = np.random.default_rng([seed, step])
            idx = rng.choice(len(scenes), size=min(batch_size, len(scenes)),
                             replace=False)
            optimizer.lr = lr_at_step(step, steps, lr)
            breakdown = train_step(model, optimizer,
                                   [images[i] for i in idx],
                                   [truths[i] for i in idx])
            line = {"step": step, "lr": optimizer.lr, **breakdown}
            log_lines.append(line)
            if log_fh:
                log_fh.write(json.dumps(line, sort_keys=True) + "\n")
            if (checkpoint_path and checkpoint_every
                    and (step + 1) % checkpoint_every == 0):
                save_training_checkpoint(checkpoint_path, model, optimizer, step + 1)
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_path:
        save_training_checkpoint(checkpoint_path, model, optimizer, steps)
    return log_lines


def _nms(preds: list[Prediction], thresh: float = NMS_IOU) -> list[Prediction]:
    kept: list[Prediction] = []
    for p in sorted(preds, key=lambda q: -q.score):
        if all(iou(p.box, q.box) <= thresh for q in kept):
            kept.append(p)
    return kept


def extract_predictions(model: SpotterModel, image: np.ndarray,
                        score_threshold: float = SCORE_THRESHOLD) -> list[Prediction]:
    out = model.forward(_normalize_image(image))
    scores = 1.0 / (1.0 + np.exp(-out.instance_logits.data))
    preds = []
    for k in np.argsort(-scores):
        if scores[k] < score_threshold:
            break
        preds.append(Prediction(
            box=cxcywh_to_corners(out.bbox.data[k]),
            score=float(scores[k]),
            text=transcribe(out.char_logits.data[k], ALPHABET)))
    return _nms(preds)


def evaluate(model: SpotterModel, scenes,
             score_threshold: float = SCORE_THRESHOLD) -> EvalResult:
    if not scenes:
        raise DataError("empty dataset: nothing to evaluate")
    per_image = []
    for image, ann in scenes:
        preds = extract_predictions(model, image, score_threshold)
        gts = [GroundTruth(box=cxcywh_to_corners(inst.bbox), text=inst.transcription)
               for inst in ann.instances]
        per_image.append((preds, gts))
    return end_to_end_metrics(per_image)


def build_model_from_checkpoint(path) -> SpotterModel:
    arrays, meta = load_checkpoint(path)
    if "config" not in meta:
        raise DataError(f"checkpoint {path} carries no model config")
    model = SpotterModel(SpotterConfig.from_dict(meta["config"]))
    model.load_arrays(arrays)
    return model


def write_eval_json(result: EvalResult, path) -> None:
    with open(Path(path), "w") as fh:
        json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
