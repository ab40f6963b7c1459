"""
Bipartite Matching and Set-Prediction Loss

Supervised detection loss with one-to-one matching between the M predictions
of a decoder layer and the ground-truth objects of the image:
    - giou / giou_matrix / giou_tensor: generalised IoU on (cx, cy, w, h) boxes
    - matching_cost: M x |gt| cost of assigning query i to object j
    - hungarian: minimum-cost injective assignment (Kuhn-Munkres with potentials)
    - set_loss: weighted cross-entropy + L1 + (1 - GIoU) for a fixed assignment
    - detection_loss: per-layer matching and set loss, summed over layers

Queries left unmatched are supervised towards the background class K, whose
cross-entropy weight is scaled down by `LossWeights.no_object_weight`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import networkx as nx
import numpy as np

from src.autodiff.tensor import Tensor, log, maximum, minimum, relu
from src.errors import ConfigError, MatchingError
from src.models.detection_transformer import DetectionSet


# Reduced costs within this fraction of the cost scale count as ties.
TIE_TOLERANCE = 1e-9


# === Types ===

@dataclass
class GroundTruth:
    """
    Annotated objects of one image.

    classes : (n,) int array of class ids in [0, K)
    boxes : (n, 4) float array of (cx, cy, w, h) relative to the image
    """
    classes: np.ndarray
    boxes: np.ndarray

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.classes) != len(self.boxes):
            raise MatchingError(f"{len(self.classes)} classes but {len(self.boxes)} boxes")
        if np.any(self.boxes[:, 2:] <= 0):
            raise MatchingError("ground-truth boxes need positive width and height")

    def __len__(self) -> int:
        return len(self.classes)

    @classmethod
    def empty(cls) -> "GroundTruth":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 4)))


@dataclass
class Assignment:
    """Matched (query_index, gt_index) pairs; every other query is background."""
    pairs: list[tuple[int, int]] = field(default_factory=list)

    @property
    def query_indices(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=np.int64)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)

    def total_cost(self, cost: np.ndarray) -> float:
        return float(sum(cost[q, g] for q, g in self.pairs))


@dataclass
class LossWeights:
    w_cls: float = 1.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    no_object_weight: float = 0.1

    def validate(self) -> "LossWeights":
        for name, value in vars(self).items():
            if value < 0:
                raise ConfigError(f"matching.{name} must be non-negative, got {value}")
        return self


# === Generalised IoU ===

def _corners(boxes: np.ndarray) -> tuple[np.ndarray, ...]:
    cx, cy, w, h = np.moveaxis(boxes, -1, 0)
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def giou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """
    Pairwise GIoU between two sets of (cx, cy, w, h) boxes.

    Returns
    -------
    np.ndarray of shape (len(boxes_a), len(boxes_b))
    """
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    if np.any(a[:, 2:] <= 0) or np.any(b[:, 2:] <= 0):
        raise MatchingError("giou needs boxes with positive width and height")
    ax1, ay1, ax2, ay2 = (c[:, None] for c in _corners(a))
    bx1, by1, bx2, by2 = (c[None, :] for c in _corners(b))
    inter = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0, None) * \
        np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    enclosure = (np.maximum(ax2, bx2) - np.minimum(ax1, bx1)) * (np.maximum(ay2, by2) - np.minimum(ay1, by1))
    return inter / union - (enclosure - union) / enclosure


def giou(box_a, box_b) -> float:
    """GIoU of two boxes: IoU minus the share of the enclosing box left uncovered."""
    return float(giou_matrix(box_a, box_b)[0, 0])


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1, ax2, ay2 = (c[:, None] for c in _corners(a))
    bx1, by1, bx2, by2 = (c[None, :] for c in _corners(b))
    inter = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0, None) * \
        np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def giou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Row-wise GIoU between predicted boxes (n, 4) and constant targets (n, 4)."""
    px1 = pred[:, 0] - 0.5 * pred[:, 2]
    py1 = pred[:, 1] - 0.5 * pred[:, 3]
    px2 = pred[:, 0] + 0.5 * pred[:, 2]
    py2 = pred[:, 1] + 0.5 * pred[:, 3]
    tx1, ty1, tx2, ty2 = _corners(np.asarray(target, dtype=np.float64))

    inter = relu(minimum(px2, tx2) - maximum(px1, tx1)) * relu(minimum(py2, ty2) - maximum(py1, ty1))
    union = pred[:, 2] * pred[:, 3] + target[:, 2] * target[:, 3] - inter
    enclosure = (maximum(px2, tx2) - minimum(px1, tx1)) * (maximum(py2, ty2) - minimum(py1, ty1))
    return inter / union - (enclosure - union) / enclosure


# === Matching ===

def matching_cost(pred: DetectionSet, gt: GroundTruth, weights: LossWeights, index: int = 0) -> np.ndarray:
    """
    Cost of assigning each query of image `index` to each ground-truth object.

    cost[i, j] = -w_cls * p_i[class_j] + w_l1 * |b_i - b_j|_1 - w_giou * giou(b_i, b_j)

    Returns
    -------
    np.ndarray of shape (M, len(gt))
    """
    probs, boxes = pred.sample(index)
    if len(gt) > len(probs):
        raise MatchingError(f"{len(gt)} objects cannot be matched to {len(probs)} queries")
    if len(gt) == 0:
        return np.zeros((len(probs), 0))
    cls_cost = -probs[:, gt.classes]
    l1_cost = np.abs(boxes[:, None, :] - gt.boxes[None, :, :]).sum(axis=-1)
    giou_cost = -giou_matrix(boxes, gt.boxes)
    return weights.w_cls * cls_cost + weights.w_l1 * l1_cost + weights.w_giou * giou_cost


def _tight_matching(tight: np.ndarray, must_match: np.ndarray, fixed: dict[int, int]) -> np.ndarray | None:
    """Optimal completion of `fixed` on zero-reduced-cost edges, or None if there is none."""
    n, m = tight.shape
    taken = set(fixed.values())
    graph = nx.Graph()
    left = [("gt", g) for g in range(n) if g not in fixed] + [("pad", k) for k in range(m - n)]
    graph.add_nodes_from(left)
    graph.add_nodes_from(("query", q) for q in range(m) if q not in taken)
    for g in range(n):
        if g not in fixed:
            graph.add_edges_from((("gt", g), ("query", int(q))) for q in np.flatnonzero(tight[g]) if q not in taken)
    free_queries = [q for q in range(m) if q not in taken and not must_match[q]]
    for k in range(m - n):
        graph.add_edges_from((("pad", k), ("query", q)) for q in free_queries)
    matching = nx.bipartite.hopcroft_karp_matching(graph, top_nodes=left) if left else {}
    if any(node not in matching for node in left):
        return None
    query_of = np.full(n, -1, dtype=np.int64)
    for g, q in fixed.items():
        query_of[g] = q
    for kind, g in left:
        if kind == "gt":
            query_of[g] = matching[(kind, g)][1]
    return query_of


def _lowest_query_optimum(reduced: np.ndarray, slack: np.ndarray, query_of: np.ndarray,
                          tol: float) -> np.ndarray:
    """
    Among all optimal assignments pick the one whose query for object 0 is
    lowest, then for object 1, and so on.

    `reduced` holds the reduced costs of a feasible optimal dual (all >= 0 up
    to `tol`), so the optimal assignments are exactly the perfect matchings on
    its zero entries that also cover every query with negative potential.
    """
    tight = reduced <= tol
    if np.all(tight.sum(axis=1) == 1):
        return query_of
    must_match = slack < -tol
    fixed: dict[int, int] = {}
    for g in range(len(query_of)):
        for q in np.flatnonzero(tight[g]):
            if q >= query_of[g]:
                break
            if int(q) in fixed.values():
                continue
            candidate = _tight_matching(tight, must_match, {**fixed, g: int(q)})
            if candidate is not None:
                query_of = candidate
                break
        fixed[g] = int(query_of[g])
    return query_of


def hungarian(cost: np.ndarray) -> Assignment:
    """
    Minimum-cost assignment of every column to a distinct row.

    Shortest augmenting paths with row/column potentials, run on the transposed
    matrix so each ground-truth object is inserted in turn. Among equal-cost
    optima the lowest row wins: column 0 gets the lowest row any optimum gives
    it, then column 1 the lowest row still possible, and so on.

    Parameters
    ----------
    cost : np.ndarray
        (rows, columns) matrix with rows >= columns; rows are queries,
        columns ground-truth objects.

    Returns
    -------
    Assignment
        Pairs sorted by query index.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchingError(f"cost must be a matrix, got shape {cost.shape}")
    rows, cols = cost.shape
    if rows < cols:
        raise MatchingError(f"cannot match {cols} columns into {rows} rows")
    if not np.all(np.isfinite(cost)):
        raise MatchingError("cost matrix contains non-finite entries")
    if cols == 0:
        return Assignment()

    a = cost.T
    n, m = a.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)     # owner[j]: 1-based object held by query j
    way = np.zeros(m + 1, dtype=np.int64)

    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = a[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    query_of = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            query_of[owner[j] - 1] = j - 1
    reduced = a - u[1:, None] - v[None, 1:]
    tol = TIE_TOLERANCE * (1.0 + float(np.abs(a).max()))
    query_of = _lowest_query_optimum(reduced, v[1:], query_of, tol)
    return Assignment(sorted((int(q), g) for g, q in enumerate(query_of)))


# === Loss ===

def set_loss(class_probs: Tensor, boxes: Tensor, gt: GroundTruth, assignment: Assignment,
             weights: LossWeights) -> Tensor:
    """
    Set-prediction loss of one image for a FIXED assignment.

    Parameters
    ----------
    class_probs : Tensor
        (M, K + 1) row-stochastic class probabilities.
    boxes : Tensor
        (M, 4) predicted boxes.
    gt : GroundTruth
    assignment : Assignment
    weights : LossWeights

    Returns
    -------
    Tensor
        w_cls * weighted-mean CE over all M queries plus
        (w_l1 * L1 + w_giou * (1 - GIoU)) summed over matched pairs and divided
        by max(len(gt), 1).
    """
    num_queries, num_labels = class_probs.shape
    background = num_labels - 1
    targets = np.full(num_queries, background, dtype=np.int64)
    q_idx, g_idx = assignment.query_indices, assignment.gt_indices
    targets[q_idx] = gt.classes[g_idx]
    ce_weights = np.where(targets == background, weights.no_object_weight, 1.0)

    picked = class_probs[np.arange(num_queries), targets]
    loss = weights.w_cls * (-(log(picked) * ce_weights).sum() * (1.0 / ce_weights.sum()))
    if len(q_idx):
        matched = boxes[q_idx]
        target_boxes = gt.boxes[g_idx]
        l1 = (matched - target_boxes).abs().sum()
        giou_term = (1.0 - giou_tensor(matched, target_boxes)).sum()
        loss = loss + (weights.w_l1 * l1 + weights.w_giou * giou_term) * (1.0 / max(len(gt), 1))
    return loss


def detection_loss(all_layer_preds: Sequence[DetectionSet], gts: Sequence[GroundTruth] | GroundTruth,
                   weights: LossWeights | None = None) -> Tensor:
    """
    Deep-supervised detection loss L_det.

    Every decoder layer is matched independently against the ground truth;
    the per-image set losses are averaged over the batch and summed over layers.

    Parameters
    ----------
    all_layer_preds : sequence of DetectionSet
        One entry per decoder layer, each batched (B, M, ...).
    gts : sequence of GroundTruth, or a single GroundTruth for B = 1
    weights : LossWeights, optional

    Returns
    -------
    Tensor
        Scalar L_det.
    """
    weights = weights or LossWeights()
    if isinstance(gts, GroundTruth):
        gts = [gts]
    total = Tensor(0.0)
    for pred in all_layer_preds:
        if pred.batch_size != len(gts):
            raise MatchingError(f"{pred.batch_size} predictions but {len(gts)} annotations")
        layer = Tensor(0.0)
        for b, gt in enumerate(gts):
            assignment = hungarian(matching_cost(pred, gt, weights, index=b))
            layer = layer + set_loss(pred.class_probs[b], pred.boxes[b], gt, assignment, weights)
        total = total + layer * (1.0 / len(gts))
    return total


__all__ = [
    "GroundTruth",
    "Assignment",
    "LossWeights",
    "giou",
    "giou_matrix",
    "giou_tensor",
    "iou_matrix",
    "matching_cost",
    "hungarian",
    "set_loss",
    "detection_loss",
]
