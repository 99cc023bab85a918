"""Mapping between box lists and the S x S x S x 10 detection grid.

Grid arrays are indexed ``[i, j, k, channel]`` with ``i`` along image x,
``j`` along image y and ``k`` along depth. Per-cell channel layout::

    0 confidence   1 unreliable   2..4 x, y, z   5..7 w, h, d   8.. class probs

Raw network outputs are logits. Decoding applies a sigmoid to every channel,
then turns the anchor point into a global coordinate with ``(sigma + cell) / S``.
Extents are plain sigmoids, i.e. fractions of the whole scene.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, logit

from .geometry import Box3D
from .tensor import DimensionError, Tensor, as_tensor, sigmoid

CONF, UNRELIABLE = 0, 1
CENTER = slice(2, 5)
EXTENT = slice(5, 8)
CLASSES = slice(8, None)

# logit magnitude used when building raw grids from targets: sigmoid(40) == 1.0 in float64
SATURATED_LOGIT = 40.0


@dataclass(frozen=True)
class GridSpec:
    S: int = 26
    K: int = 2
    B: int = 1

    def __post_init__(self):
        if self.B != 1:
            raise ValueError(f"exactly one box per cell is supported, got B={self.B}")
        if self.S < 1:
            raise ValueError(f"grid size must be positive, got S={self.S}")
        if self.channels_per_cell != 10:
            raise ValueError(f"cells carry 10 channels (8 box values + 2 classes), got K={self.K}")

    @property
    def channels_per_cell(self) -> int:
        return 8 + self.K

    @property
    def cell_count(self) -> int:
        return self.S**3

    @property
    def grid_shape(self) -> Tuple[int, int, int, int]:
        return (self.S, self.S, self.S, self.channels_per_cell)


@dataclass(frozen=True)
class CellPrediction:
    c: float
    u: float
    x: float
    y: float
    z: float
    w: float
    h: float
    d: float
    p: Tuple[float, ...]


@dataclass
class TargetGrid:
    """Supervision for one sample: occupancy mask plus per-cell box targets."""

    spec: GridSpec
    obj_mask: np.ndarray  # (S, S, S) bool
    boxes: np.ndarray  # (S, S, S, 6): x, y, z, w, h, d
    classes: np.ndarray  # (S, S, S, K) one-hot
    collisions: int = 0

    @classmethod
    def empty(cls, spec: GridSpec) -> "TargetGrid":
        S = spec.S
        return cls(spec, np.zeros((S, S, S), bool), np.zeros((S, S, S, 6)), np.zeros((S, S, S, spec.K)))

    @property
    def confidence(self) -> np.ndarray:
        return self.obj_mask.astype(np.float64)

    def as_array(self) -> np.ndarray:
        """Targets in the decoded channel layout; unreliable channel left at 0."""
        out = np.zeros(self.spec.grid_shape)
        out[..., CONF] = self.confidence
        out[..., CENTER] = self.boxes[..., :3]
        out[..., EXTENT] = self.boxes[..., 3:]
        out[..., CLASSES] = self.classes
        return out

    def occupied(self) -> List[Tuple[int, int, int]]:
        return [tuple(int(v) for v in idx) for idx in np.argwhere(self.obj_mask)]


def cell_of(center: Sequence[float], spec: GridSpec) -> Tuple[int, int, int]:
    idx = []
    for axis, v in zip("xyz", center):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{axis} centre {v} outside [0, 1]")
        idx.append(min(int(np.floor(v * spec.S)), spec.S - 1))
    return tuple(idx)


def encode_targets(boxes: Sequence[Box3D], spec: GridSpec) -> TargetGrid:
    """Assign each box to the cell holding its centre.

    When two boxes land in one cell the larger volume wins; ``collisions``
    counts the losers.
    """
    grid = TargetGrid.empty(spec)
    for box in boxes:
        i, j, k = cell_of((box.cx, box.cy, box.cz), spec)
        if grid.obj_mask[i, j, k]:
            grid.collisions += 1
            held = grid.boxes[i, j, k, 3:]
            if box.volume <= held[0] * held[1] * held[2]:
                continue
        grid.obj_mask[i, j, k] = True
        grid.boxes[i, j, k] = box.geometry
        onehot = np.zeros(spec.K)
        onehot[min(box.class_id, spec.K - 1)] = 1.0
        grid.classes[i, j, k] = onehot
    return grid


def map_raw_to_cell(raw: Sequence[float], cell: Tuple[int, int, int], spec: GridSpec) -> CellPrediction:
    s = expit(np.asarray(raw, dtype=np.float64))
    i, j, k = cell
    return CellPrediction(
        c=float(s[0]),
        u=float(s[1]),
        x=float((s[2] + i) / spec.S),
        y=float((s[3] + j) / spec.S),
        z=float((s[4] + k) / spec.S),
        w=float(s[5]),
        h=float(s[6]),
        d=float(s[7]),
        p=tuple(float(v) for v in s[8:]),
    )


def _offsets(spec: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    S = spec.S
    offset = np.zeros(spec.grid_shape)
    idx = np.arange(S, dtype=np.float64)
    offset[..., 2] = idx[:, None, None]
    offset[..., 3] = idx[None, :, None]
    offset[..., 4] = idx[None, None, :]
    scale = np.ones(spec.channels_per_cell)
    scale[CENTER] = 1.0 / S
    return offset, scale


def decode_tensor(raw: Tensor, spec: GridSpec) -> Tensor:
    """Differentiable decode of a (batch, S, S, S, 10) logit grid."""
    raw = as_tensor(raw)
    if raw.shape[-4:] != spec.grid_shape:
        raise DimensionError(f"raw grid shape {raw.shape} does not end with {spec.grid_shape}")
    offset, scale = _offsets(spec)
    return (sigmoid(raw) + offset) * scale


def decode_grid(raw_grid: Union[Tensor, np.ndarray], spec: GridSpec, confidence_floor: float = 0.5) -> List[Box3D]:
    """Boxes from every cell whose decoded confidence reaches ``confidence_floor``."""
    arr = raw_grid.data if isinstance(raw_grid, Tensor) else np.asarray(raw_grid, dtype=np.float64)
    if arr.ndim == 5 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.shape != spec.grid_shape:
        raise DimensionError(f"raw grid shape {arr.shape} does not match {spec.grid_shape}")
    offset, scale = _offsets(spec)
    dec = (expit(arr) + offset) * scale
    boxes = []
    for i, j, k in np.argwhere(dec[..., CONF] >= confidence_floor):
        v = dec[i, j, k]
        boxes.append(Box3D(*(float(t) for t in v[2:8]), confidence=float(v[CONF]), class_scores=tuple(v[CLASSES])))
    return boxes


def logits_from_targets(target: TargetGrid) -> np.ndarray:
    """Raw logits whose decode reproduces ``target`` (inverse-sigmoid construction)."""
    spec = target.spec
    S = spec.S
    raw = np.zeros(spec.grid_shape)
    raw[..., CONF] = np.where(target.obj_mask, SATURATED_LOGIT, -SATURATED_LOGIT)
    occ = target.obj_mask
    idx = np.argwhere(occ)
    eps = 1e-12
    frac = np.clip(target.boxes[occ][:, :3] * S - idx, eps, 1 - eps)
    ext = np.clip(target.boxes[occ][:, 3:], eps, 1 - eps)
    raw[occ, 2:5] = logit(frac)
    raw[occ, 5:8] = logit(ext)
    raw[occ, 8:] = np.where(target.classes[occ] > 0.5, SATURATED_LOGIT, -SATURATED_LOGIT)
    return raw


def split_to_depth(features: Tensor, spec: GridSpec) -> Tensor:
    """(batch, S*10, S, S) feature map -> (batch, S, S, S, 10) grid.

    Channel block ``g*10 .. g*10+10`` at spatial position (row j, column i)
    becomes the 10 values of cell (i, j, k=g). Pure reindexing.
    """
    features = as_tensor(features)
    S, C = spec.S, spec.channels_per_cell
    if features.ndim != 4 or features.shape[1:] != (S * C, S, S):
        raise DimensionError(f"expected features of shape (batch, {S * C}, {S}, {S}), got {features.shape}")
    b = features.shape[0]
    # (b, k, c, j, i) -> (b, i, j, k, c)
    return features.reshape(b, S, C, S, S).transpose(0, 4, 3, 1, 2)


def depth_to_channels(grid: Tensor, spec: GridSpec) -> Tensor:
    """Inverse of :func:`split_to_depth`."""
    grid = as_tensor(grid)
    S, C = spec.S, spec.channels_per_cell
    if grid.ndim != 5 or grid.shape[1:] != spec.grid_shape:
        raise DimensionError(f"expected grid of shape (batch, {S}, {S}, {S}, {C}), got {grid.shape}")
    b = grid.shape[0]
    return grid.transpose(0, 3, 4, 2, 1).reshape(b, S * C, S, S)
