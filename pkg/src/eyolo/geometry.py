"""Axis-aligned box arithmetic: 2D/3D IoU and greedy non-maximum suppression.

Boxes live in normalized scene coordinates. ``cx, cy`` are image-plane
fractions, ``cz`` is depth as a fraction of the working range, and the
extents ``w, h, d`` are measured in the same units.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    w: float
    h: float
    d: float
    confidence: float = 1.0
    class_scores: Tuple[float, ...] = field(default=(1.0, 0.0))

    def __post_init__(self):
        if self.w < 0 or self.h < 0 or self.d < 0:
            raise ValueError(f"box extents must be non-negative, got w={self.w} h={self.h} d={self.d}")
        object.__setattr__(self, "class_scores", tuple(float(s) for s in self.class_scores))

    @classmethod
    def labelled(cls, class_id: int, cx, cy, cz, w, h, d, num_classes: int = 2, confidence: float = 1.0):
        scores = [0.0] * max(num_classes, class_id + 1)
        scores[class_id] = 1.0
        return cls(cx, cy, cz, w, h, d, confidence, tuple(scores))

    @property
    def class_id(self) -> int:
        return int(np.argmax(self.class_scores)) if self.class_scores else 0

    @property
    def volume(self) -> float:
        return self.w * self.h * self.d

    @property
    def geometry(self) -> Tuple[float, float, float, float, float, float]:
        return (self.cx, self.cy, self.cz, self.w, self.h, self.d)

    def lo(self) -> Tuple[float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cz - self.d / 2)

    def hi(self) -> Tuple[float, float, float]:
        return (self.cx + self.w / 2, self.cy + self.h / 2, self.cz + self.d / 2)


def _overlap(a_c, a_e, b_c, b_e):
    a_lo, a_hi = a_c - a_e / 2, a_c + a_e / 2
    b_lo, b_hi = b_c - b_e / 2, b_c + b_e / 2
    # a nested interval overlaps by its own extent; hi - lo would round
    a_in_b = b_lo <= a_lo and a_hi <= b_hi
    b_in_a = a_lo <= b_lo and b_hi <= a_hi
    if a_in_b or b_in_a:
        return min(a_e, b_e) if a_in_b and b_in_a else (a_e if a_in_b else b_e)
    return max(0.0, min(a_hi, b_hi) - max(a_lo, b_lo))


def iou3d(a: Box3D, b: Box3D) -> float:
    """Intersection volume over union volume; 0 whenever the union is empty."""
    inter = _overlap(a.cx, a.w, b.cx, b.w) * _overlap(a.cy, a.h, b.cy, b.h) * _overlap(a.cz, a.d, b.cz, b.d)
    union = a.volume + b.volume - inter
    if union <= 0.0 or inter <= 0.0:
        return 0.0
    return min(1.0, inter / union)


def iou2d(a: Box3D, b: Box3D) -> float:
    """Image-plane IoU over (cx, cy, w, h); depth is ignored."""
    inter = _overlap(a.cx, a.w, b.cx, b.w) * _overlap(a.cy, a.h, b.cy, b.h)
    union = a.w * a.h + b.w * b.h - inter
    if union <= 0.0 or inter <= 0.0:
        return 0.0
    return min(1.0, inter / union)


# -- batched forms ------------------------------------------------------------


def boxes_to_array(boxes: Sequence[Box3D]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 6))
    return np.array([b.geometry for b in boxes], dtype=np.float64)


def _pairwise_overlap(a: np.ndarray, b: np.ndarray, centre: int, extent: int) -> np.ndarray:
    a_lo = a[:, centre] - a[:, extent] / 2
    a_hi = a[:, centre] + a[:, extent] / 2
    b_lo = b[:, centre] - b[:, extent] / 2
    b_hi = b[:, centre] + b[:, extent] / 2
    out = np.clip(np.minimum(a_hi[:, None], b_hi[None, :]) - np.maximum(a_lo[:, None], b_lo[None, :]), 0.0, None)
    a_in_b = (b_lo[None, :] <= a_lo[:, None]) & (a_hi[:, None] <= b_hi[None, :])
    b_in_a = (a_lo[:, None] <= b_lo[None, :]) & (b_hi[None, :] <= a_hi[:, None])
    ae, be = a[:, extent][:, None], b[:, extent][None, :]
    out = np.where(a_in_b, ae, out)
    out = np.where(b_in_a, be, out)
    return np.where(a_in_b & b_in_a, np.minimum(ae, be), out)


def _ratio(inter: np.ndarray, union: np.ndarray) -> np.ndarray:
    out = np.zeros_like(inter)
    ok = (union > 0) & (inter > 0)
    out[ok] = np.minimum(1.0, inter[ok] / union[ok])
    return out


def iou3d_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise 3D IoU between (n, 6) and (m, 6) arrays of cx, cy, cz, w, h, d."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    inter = _pairwise_overlap(a, b, 0, 3) * _pairwise_overlap(a, b, 1, 4) * _pairwise_overlap(a, b, 2, 5)
    va = a[:, 3] * a[:, 4] * a[:, 5]
    vb = b[:, 3] * b[:, 4] * b[:, 5]
    return _ratio(inter, va[:, None] + vb[None, :] - inter)


def iou2d_matrix(a: np.ndarray, b: np.ndarray, axes: Tuple[int, int] = (0, 1)) -> np.ndarray:
    """Pairwise 2D IoU on a projection plane; ``axes=(0, 2)`` gives the top-down view."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    i, j = axes
    inter = _pairwise_overlap(a, b, i, i + 3) * _pairwise_overlap(a, b, j, j + 3)
    aa = a[:, i + 3] * a[:, j + 3]
    ab = b[:, i + 3] * b[:, j + 3]
    return _ratio(inter, aa[:, None] + ab[None, :] - inter)


# -- suppression --------------------------------------------------------------


@dataclass(frozen=True)
class NmsConfig:
    iou_threshold_3d: float = 0.35
    iou_threshold_2d: float = 0.5
    confidence_floor: float = 0.5
    class_agnostic: bool = True

    def __post_init__(self):
        for name in ("iou_threshold_3d", "iou_threshold_2d"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")


def _ranked(boxes: Iterable[Box3D], floor: float) -> List[Box3D]:
    kept = [b for b in boxes if b.confidence >= floor]
    # sorted() is stable: equal confidences keep input order
    return sorted(kept, key=lambda b: -b.confidence)


def _greedy(ranked: List[Box3D], suppress: np.ndarray, class_agnostic: bool) -> List[Box3D]:
    if not class_agnostic:
        classes = np.array([b.class_id for b in ranked])
        suppress = suppress & (classes[:, None] == classes[None, :])
    dead = np.zeros(len(ranked), dtype=bool)
    keep: List[int] = []
    for i in range(len(ranked)):
        if dead[i]:
            continue
        keep.append(i)
        dead |= suppress[i]
    return [ranked[i] for i in keep]


def nms3d(boxes: Sequence[Box3D], cfg: NmsConfig = NmsConfig()) -> List[Box3D]:
    """Greedy NMS on volume IoU.

    The full pairwise IoU matrix is computed once; a box survives iff its IoU
    with every already-kept box is at most ``cfg.iou_threshold_3d``.
    """
    ranked = _ranked(boxes, cfg.confidence_floor)
    if not ranked:
        return []
    arr = boxes_to_array(ranked)
    suppress = iou3d_matrix(arr, arr) > cfg.iou_threshold_3d
    return _greedy(ranked, suppress, cfg.class_agnostic)


def nms_two_view_2d(boxes: Sequence[Box3D], cfg: NmsConfig = NmsConfig()) -> List[Box3D]:
    """Baseline NMS from two 2D IoU passes (front view and top-down view).

    A box is suppressed only when both projections overlap a kept box beyond
    ``cfg.iou_threshold_2d``. Used for speed comparisons against ``nms3d``.
    """
    ranked = _ranked(boxes, cfg.confidence_floor)
    if not ranked:
        return []
    arr = boxes_to_array(ranked)
    front = iou2d_matrix(arr, arr, (0, 1))
    top = iou2d_matrix(arr, arr, (0, 2))
    suppress = (front > cfg.iou_threshold_2d) & (top > cfg.iou_threshold_2d)
    return _greedy(ranked, suppress, cfg.class_agnostic)


# -- detection list text format -----------------------------------------------


def format_detections(boxes: Iterable[Box3D]) -> str:
    lines = []
    for b in boxes:
        lines.append(
            f"{b.class_id:d} {b.confidence:.6f} {b.cx:.6f} {b.cy:.6f} {b.cz:.6f} {b.w:.6f} {b.h:.6f} {b.d:.6f}"
        )
    return "".join(line + "\n" for line in lines)


def parse_detections(text: str, num_classes: int = 2) -> List[Box3D]:
    boxes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"line {lineno}: expected 8 fields, got {len(parts)}")
        try:
            cid = int(parts[0])
            conf, *geom = (float(p) for p in parts[1:])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
        boxes.append(Box3D.labelled(cid, *geom, num_classes=num_classes, confidence=conf))
    return boxes
