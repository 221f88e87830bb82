"""Supervised losses for the three perceptual tasks and their combination.

Classification uses log-sum-exp stabilized cross-entropy. The keyframe
task is supervised as a distribution over frames with target-first KL
(one-hot targets reduce it to negative log-likelihood). Detection is a
set-prediction loss: queries are matched to ground-truth boxes by
minimum-cost assignment, the match is held fixed during backward, and
unmatched queries are pushed toward the no-object class. The combined
loss weighs tasks by learnable log-variances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tl
from .assignment import Assignment, CostMatrix, hungarian
from .tensor import ContractError, DomainError, Tensor

CLASS_HAND = 0
CLASS_OBJECT = 1
CLASS_NO_OBJECT = 2
BOX_CLASS_COUNT = 3

# Matching / loss coefficients, DETR recipe: class, L1, generalized IoU.
LAMBDA_CLS = 1.0
LAMBDA_L1 = 5.0
LAMBDA_GIOU = 2.0

TASK_ORDER = ("oscc", "pnr", "scod")


class LabelError(Exception):
    """Clip labels violate their invariants."""


@dataclass
class LabeledBox:
    kind: str  # "hand" | "object"
    box: tuple[float, float, float, float]  # (cx, cy, w, h), normalized

    def __post_init__(self):
        if self.kind not in ("hand", "object"):
            raise LabelError(f"unknown box kind {self.kind!r}")
        cx, cy, w, h = self.box
        if w <= 0 or h <= 0:
            raise LabelError(f"box must have positive extent, got w={w} h={h}")
        if not all(0.0 <= v <= 1.0 for v in (cx, cy, w, h)):
            raise LabelError(f"box coords must lie in [0, 1], got {self.box}")

    @property
    def class_index(self) -> int:
        return CLASS_HAND if self.kind == "hand" else CLASS_OBJECT


@dataclass
class ClipLabels:
    state_change: bool
    pnr_frame: int | None = None
    boxes: list[LabeledBox] = field(default_factory=list)

    def __post_init__(self):
        if self.state_change:
            if self.pnr_frame is None:
                raise LabelError("state-change clip without a keyframe index")
        else:
            if self.pnr_frame is not None or self.boxes:
                raise LabelError("no-change clip must carry no keyframe/boxes")
        if len(self.boxes) > 2:
            raise LabelError(f"at most 2 boxes per clip, got {len(self.boxes)}")


@dataclass
class PnrTarget:
    dist: np.ndarray  # [T] probability vector

    def __post_init__(self):
        self.dist = np.asarray(self.dist, dtype=np.float64)
        if np.any(self.dist < 0) or abs(self.dist.sum() - 1.0) > 1e-12:
            raise LabelError("keyframe target must be a probability vector")


@dataclass
class SigmaParams:
    """Learnable per-task log-variances s_i = log(sigma_i^2)."""

    s: Tensor

    @classmethod
    def init(cls) -> "SigmaParams":
        return cls(s=tl.zeros(len(TASK_ORDER), requires_grad=True))

    def sigma2(self) -> np.ndarray:
        return np.exp(self.s.data)


def _comp(t: Tensor, i: int) -> Tensor:
    return tl.reshape(tl.narrow(t, 0, i, 1), ())


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label], stabilized by a detached max shift."""
    n = logits.shape[0]
    if not (0 <= label < n):
        raise ContractError(f"label {label} out of range for {n} classes")
    m = float(np.max(logits.data))  # shift has exactly zero gradient
    z = tl.sub(logits, m)
    lse = tl.log(tl.sum_all(tl.exp(z)))
    return tl.sub(lse, _comp(z, label))


def oscc_loss(oscc_logits: Tensor, state_change: bool) -> Tensor:
    """Two-class cross-entropy; class 0 means a state change occurs."""
    if oscc_logits.shape != (2,):
        raise ContractError(f"expected 2 logits, got shape {oscc_logits.shape}")
    return cross_entropy(oscc_logits, 0 if state_change else 1)


def make_pnr_target(labels: ClipLabels, frames: int) -> PnrTarget:
    """One-hot at the change frame, or uniform 1/T when nothing changes."""
    if labels.state_change:
        if labels.pnr_frame >= frames or labels.pnr_frame < 0:
            raise LabelError(f"keyframe {labels.pnr_frame} outside [0, {frames})")
        dist = np.zeros(frames)
        dist[labels.pnr_frame] = 1.0
    else:
        dist = np.full(frames, 1.0 / frames)
    return PnrTarget(dist=dist)


def pnr_loss(pnr_logits: Tensor, target: PnrTarget) -> Tensor:
    """KL(target || softmax(logits)) with the 0*log(0) = 0 convention."""
    t = target.dist
    if pnr_logits.shape != t.shape:
        raise ContractError(f"logits shape {pnr_logits.shape} != target shape "
                            f"{t.shape}")
    nz = t > 0
    target_entropy_term = float(np.sum(t[nz] * np.log(t[nz])))
    m = float(np.max(pnr_logits.data))
    z = tl.sub(pnr_logits, m)
    lse = tl.log(tl.sum_all(tl.exp(z)))
    log_p = tl.sub(z, lse)
    return tl.sub(target_entropy_term, tl.sum_all(tl.mul(tl.constant(t), log_p)))


def _corners(box: Tensor):
    cx, cy, w, h = (_comp(box, i) for i in range(4))
    hw, hh = tl.scale(w, 0.5), tl.scale(h, 0.5)
    return (tl.sub(cx, hw), tl.sub(cy, hh), tl.add(cx, hw), tl.add(cy, hh),
            w, h)


def giou(a: Tensor, b: Tensor) -> Tensor:
    """Generalized IoU of two (cx, cy, w, h) boxes; differentiable, in (-1, 1]."""
    a = a if isinstance(a, Tensor) else tl.constant(np.asarray(a, dtype=np.float64))
    b = b if isinstance(b, Tensor) else tl.constant(np.asarray(b, dtype=np.float64))
    if a.shape != (4,) or b.shape != (4,):
        raise ContractError(f"boxes must be [4], got {a.shape} and {b.shape}")
    if a.data[2] <= 0 or a.data[3] <= 0 or b.data[2] <= 0 or b.data[3] <= 0:
        raise DomainError("degenerate (zero-area) box")

    ax1, ay1, ax2, ay2, aw, ah = _corners(a)
    bx1, by1, bx2, by2, bw, bh = _corners(b)

    iw = tl.relu(tl.sub(tl.minimum(ax2, bx2), tl.maximum(ax1, bx1)))
    ih = tl.relu(tl.sub(tl.minimum(ay2, by2), tl.maximum(ay1, by1)))
    inter = tl.mul(iw, ih)
    union = tl.sub(tl.add(tl.mul(aw, ah), tl.mul(bw, bh)), inter)
    iou = tl.div(inter, union)

    hw = tl.sub(tl.maximum(ax2, bx2), tl.minimum(ax1, bx1))
    hh = tl.sub(tl.maximum(ay2, by2), tl.minimum(ay1, by1))
    hull = tl.mul(hw, hh)
    return tl.sub(iou, tl.div(tl.sub(hull, union), hull))


def iou_giou_values(a, b) -> tuple[float, float]:
    """Plain-number IoU and generalized IoU of two (cx, cy, w, h) boxes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise DomainError("degenerate (zero-area) box")
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    iou = inter / union
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return iou, iou - (hull - union) / hull


def _l1(pred_box: Tensor, gt: np.ndarray) -> Tensor:
    d = tl.sub(pred_box, tl.constant(gt))
    return tl.sum_all(tl.add(tl.relu(d), tl.relu(tl.scale(d, -1.0))))


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x))
    return e / e.sum()


def match_queries(queries: Sequence, boxes: Sequence[LabeledBox]) -> Assignment:
    """Minimum-cost pairing of ground-truth boxes (rows) to queries (cols).

    The cost mirrors the loss terms but is computed on detached values;
    gradients never flow through the discrete match.
    """
    g, q = len(boxes), len(queries)
    costs = np.zeros((g, q))
    for i, gt in enumerate(boxes):
        gt_box = np.asarray(gt.box, dtype=np.float64)
        for j, query in enumerate(queries):
            prob = _softmax_np(query.class_logits.data)[gt.class_index]
            l1 = float(np.abs(query.box.data - gt_box).sum())
            _, g_iou = iou_giou_values(query.box.data, gt_box)
            costs[i, j] = (LAMBDA_CLS * (-prob) + LAMBDA_L1 * l1
                           + LAMBDA_GIOU * (1.0 - g_iou))
    return hungarian(CostMatrix(costs))


def scod_loss(queries: Sequence, labels: ClipLabels,
              match: Assignment | None = None) -> Tensor:
    """Hungarian-matched detection loss over the 8 query outputs.

    Matched queries pay class cross-entropy plus weighted L1 and GIoU box
    terms; unmatched queries pay cross-entropy against no-object. Only
    valid on state-change clips; the caller masks the loss elsewhere.
    The match is recomputed per call unless one is supplied (gradient
    checks condition on a fixed match; gradients never cross it).
    """
    if not labels.state_change or not labels.boxes:
        raise ContractError("detection loss is undefined without ground-truth "
                            "boxes; caller must mask no-change clips")
    if match is None:
        match = match_queries(queries, labels.boxes)
    matched_cols = {j: i for i, j in match.pairs}

    total = tl.constant(0.0)
    for i, j in sorted(match.pairs):
        gt = labels.boxes[i]
        gt_box = np.asarray(gt.box, dtype=np.float64)
        q = queries[j]
        term = cross_entropy(q.class_logits, gt.class_index)
        term = tl.add(term, tl.scale(_l1(q.box, gt_box), LAMBDA_L1))
        term = tl.add(term, tl.scale(
            tl.sub(1.0, giou(q.box, tl.constant(gt_box))), LAMBDA_GIOU))
        total = tl.add(total, term)
    for j, q in enumerate(queries):
        if j not in matched_cols:
            total = tl.add(total, cross_entropy(q.class_logits, CLASS_NO_OBJECT))
    return total


def joint_loss(parts: Mapping[str, Tensor], sigma: SigmaParams,
               enabled: Sequence[str]) -> Tensor:
    """Uncertainty-weighted sum: exp(-s_i)/2 * L_i + s_i/2 per enabled task.

    Algebraically equal to 1/(2 sigma_i^2) L_i + log sigma_i summed over
    tasks, since s_i = log sigma_i^2. Disabled tasks contribute neither
    the weighted term nor the regularizer.
    """
    enabled = tuple(enabled)
    if not enabled:
        raise ContractError("at least one task must be enabled")
    unknown = set(enabled) - set(TASK_ORDER)
    if unknown:
        raise ContractError(f"unknown tasks {sorted(unknown)}")
    total = tl.constant(0.0)
    for i, task in enumerate(TASK_ORDER):
        if task not in enabled:
            continue
        if task not in parts:
            raise ContractError(f"enabled task {task!r} missing its loss")
        s_i = _comp(sigma.s, i)
        weighted = tl.scale(tl.mul(tl.exp(tl.scale(s_i, -1.0)), parts[task]), 0.5)
        total = tl.add(total, tl.add(weighted, tl.scale(s_i, 0.5)))
    return total
