"""Detection and end-to-end recognition evaluation.

Greedy score-ordered matching at IoU > 0.5; recognition additionally
requires exact, case-sensitive transcription equality (lexicon-free).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

__all__ = [
    "Prediction",
    "GroundTruth",
    "EvalResult",
    "iou",
    "cxcywh_to_corners",
    "match_detections",
    "end_to_end_metrics",
]


@dataclass
class Prediction:
    box: np.ndarray        # corners (x0, y0, x1, y1)
    score: float
    text: str = ""


@dataclass
class GroundTruth:
    box: np.ndarray
    text: str = ""


@dataclass
class EvalResult:
    detection_precision: float
    detection_recall: float
    detection_f1: float
    recognition_precision: float
    recognition_recall: float
    recognition_h: float
    per_image_matches: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "detection": {"precision": self.detection_precision,
                          "recall": self.detection_recall,
                          "f1": self.detection_f1},
            "recognition": {"precision": self.recognition_precision,
                            "recall": self.recognition_recall,
                            "h": self.recognition_h},
        }


def cxcywh_to_corners(box: np.ndarray) -> np.ndarray:
    cx, cy, w, h = np.asarray(box, dtype=np.float64)
    return np.array([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0])


def iou(box_a, box_b) -> float:
    """Intersection over union for corner boxes; degenerate boxes give 0."""
    ax0, ay0, ax1, ay1 = np.asarray(box_a, dtype=np.float64)
    bx0, by0, bx1, by1 = np.asarray(box_b, dtype=np.float64)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    area_a = max(0.0, ax1 - ax0) * max(0.0, ay1 - ay0)
    area_b = max(0.0, bx1 - bx0) * max(0.0, by1 - by0)
    union = area_a + area_b - inter
    return inter / union if union > 0.0 else 0.0


def match_detections(preds: list[Prediction], gts: list[GroundTruth],
                     iou_thresh: float = 0.5,
                     require_text_match: bool = False) -> list[tuple[int, int]]:
    """Greedy matching by descending score; each ground truth matches once.

    Tie-break on equal scores is the original prediction index, so the
    result does not depend on input ordering.
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    taken = [False] * len(gts)
    matches = []
    for pi in order:
        best_j, best_iou = -1, iou_thresh
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            if require_text_match and preds[pi].text != gt.text:
                continue
            v = iou(preds[pi].box, gt.box)
            if v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            taken[best_j] = True
            matches.append((pi, best_j))
    return matches


def _prf(num_matched: int, num_pred: int, num_gt: int) -> tuple[float, float, float]:
    p = num_matched / num_pred if num_pred else 0.0
    r = num_matched / num_gt if num_gt else 0.0
    f = 2.0 * p * r / (p + r) if (p + r) > 0 else 0.0
    return p, r, f


def end_to_end_metrics(per_image: list[tuple[list[Prediction], list[GroundTruth]]],
                       iou_thresh: float = 0.5) -> EvalResult:
    """Micro-averaged detection P/R/F1 and recognition P/R/H over a dataset."""
    if not per_image:
        raise DataError("empty dataset: no images to evaluate")
    det_m = rec_m = n_pred = n_gt = 0
    details = []
    for preds, gts in per_image:
        det = match_detections(preds, gts, iou_thresh, require_text_match=False)
        rec = match_detections(preds, gts, iou_thresh, require_text_match=True)
        det_m += len(det)
        rec_m += len(rec)
        n_pred += len(preds)
        n_gt += len(gts)
        details.append({"detection": det, "recognition": rec})
    dp, dr, df = _prf(det_m, n_pred, n_gt)
    rp, rr, rh = _prf(rec_m, n_pred, n_gt)
    return EvalResult(dp, dr, df, rp, rr, rh, details)
