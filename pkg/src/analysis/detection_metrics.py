"""
Detection Metrics

mAP@0.5 for the detection transformer:
    - predictions_from_model: (labels, scores, boxes) per image from the last
      decoder layer, one detection per object query
    - match_detections: greedy confidence-ordered matching to ground truth
    - average_precision: all-point interpolated area under the PR curve
    - evaluate_detections / evaluate_map: per-class AP and their mean

Classes with no ground-truth object in the evaluated set are left out of the
mean. Each ground-truth object can be matched at most once.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from src.autodiff.tensor import Tensor, no_grad
from src.data.preprocessing import CLASS_NAMES, iterate_batches
from src.data.synthetic_scenes import Scene
from src.losses.matching import GroundTruth, iou_matrix
from src.models.detection_transformer import DetectionTransformer

logger = logging.getLogger(__name__)


@dataclass
class ImagePredictions:
    labels: np.ndarray
    scores: np.ndarray
    boxes: np.ndarray


@dataclass
class EvalReport:
    """
    Result of one evaluation.

    per_class_ap : class name -> AP, None for classes without ground truth
    map : unweighted mean over classes with ground truth (0.0 if there are none)
    """
    per_class_ap: dict[str, float | None]
    map: float
    num_predictions: int
    num_ground_truth: int
    iou_threshold: float = 0.5
    score_threshold: float = 0.0
    arm: str | None = None
    checkpoint: str | None = None
    pr_curves: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        data = asdict(self)
        data.pop("pr_curves")
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


# === Core ===

def average_precision(scores: np.ndarray, is_tp: np.ndarray, num_gt: int) -> tuple[float, np.ndarray, np.ndarray]:
    """
    All-point interpolated average precision.

    Parameters
    ----------
    scores : np.ndarray
        Confidence of each detection.
    is_tp : np.ndarray of bool
        Whether each detection matched a ground-truth object.
    num_gt : int
        Number of ground-truth objects of the class.

    Returns
    -------
    ap : float
    recall, precision : np.ndarray
        The PR curve in descending-score order.
    """
    if num_gt == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.asarray(is_tp, dtype=bool)[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    recall = cum_tp / num_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    ap = float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    return ap, recall, precision


def match_detections(predictions: Sequence[ImagePredictions], gts: Sequence[GroundTruth], class_id: int,
                     iou_threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray, int]:
    """
    Greedy matching of one class across all images, highest score first.

    Returns
    -------
    scores, is_tp : np.ndarray
    num_gt : int
    """
    records = []
    for image_id, pred in enumerate(predictions):
        keep = pred.labels == class_id
        records.extend((float(s), image_id, b) for s, b in zip(pred.scores[keep], pred.boxes[keep]))
    records.sort(key=lambda r: -r[0])

    gt_boxes = [gt.boxes[gt.classes == class_id] for gt in gts]
    taken = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
    scores = np.array([r[0] for r in records])
    is_tp = np.zeros(len(records), dtype=bool)
    for k, (_, image_id, box) in enumerate(records):
        candidates = gt_boxes[image_id]
        if not len(candidates):
            continue
        overlaps = iou_matrix(box, candidates)[0]
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_threshold and not taken[image_id][best]:
            taken[image_id][best] = True
            is_tp[k] = True
    return scores, is_tp, int(sum(len(b) for b in gt_boxes))


def evaluate_detections(predictions: Sequence[ImagePredictions], gts: Sequence[GroundTruth],
                        class_names: Sequence[str] = CLASS_NAMES, iou_threshold: float = 0.5,
                        score_threshold: float = 0.0) -> EvalReport:
    """Per-class AP over a set of images; detections at or below `score_threshold` are dropped."""
    kept = []
    for pred in predictions:
        mask = pred.scores > score_threshold
        kept.append(ImagePredictions(pred.labels[mask], pred.scores[mask], pred.boxes[mask]))

    per_class, curves = {}, {}
    for class_id, name in enumerate(class_names):
        scores, is_tp, num_gt = match_detections(kept, gts, class_id, iou_threshold)
        if num_gt == 0:
            per_class[name] = None
            continue
        ap, recall, precision = average_precision(scores, is_tp, num_gt)
        per_class[name] = ap
        curves[name] = (recall, precision)

    populated = [ap for ap in per_class.values() if ap is not None]
    return EvalReport(
        per_class_ap=per_class,
        map=float(np.mean(populated)) if populated else 0.0,
        num_predictions=int(sum(len(p.scores) for p in kept)),
        num_ground_truth=int(sum(len(gt) for gt in gts)),
        iou_threshold=iou_threshold,
        score_threshold=score_threshold,
        pr_curves=curves,
    )


# === Model wrapper ===

def predictions_from_model(model: DetectionTransformer, scenes: Sequence[Scene],
                           batch_size: int = 16) -> list[ImagePredictions]:
    """Label = most likely foreground class, score = its probability, for every query."""
    out = []
    with no_grad():
        for batch in iterate_batches(scenes, batch_size):
            result = model(Tensor(batch.images))
            last = result.predictions[-1]
            for b in range(last.batch_size):
                probs, boxes = last.sample(b)
                foreground = probs[:, :-1]
                labels = foreground.argmax(axis=-1)
                scores = foreground[np.arange(len(labels)), labels]
                out.append(ImagePredictions(labels, scores, boxes.copy()))
    return out


def evaluate_map(model: DetectionTransformer, scenes: Sequence[Scene], score_threshold: float = 0.0,
                 iou_threshold: float = 0.5, batch_size: int = 16) -> EvalReport:
    """
    mAP of `model` on annotated scenes.

    Parameters
    ----------
    model : DetectionTransformer
    scenes : sequence of Scene
        Annotated scenes; target-domain labels are used here only.
    score_threshold : float, optional
        Detections scoring at or below this are discarded. Default is 0.
    iou_threshold : float, optional
        Minimum IoU for a true positive. Default is 0.5.

    Returns
    -------
    EvalReport
    """
    if not scenes:
        return evaluate_detections([], [], iou_threshold=iou_threshold, score_threshold=score_threshold)
    predictions = predictions_from_model(model, scenes, batch_size)
    report = evaluate_detections(predictions, [s.annotations for s in scenes],
                                 iou_threshold=iou_threshold, score_threshold=score_threshold)
    logger.debug("evaluated %d scenes: mAP %.4f", len(scenes), report.map)
    return report


__all__ = [
    "ImagePredictions",
    "EvalReport",
    "average_precision",
    "match_detections",
    "evaluate_detections",
    "predictions_from_model",
    "evaluate_map",
]
