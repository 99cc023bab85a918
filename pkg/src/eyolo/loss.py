"""Sum-of-squares detection loss over the decoded 3D grid.

Five terms, each summed over cells and averaged over the batch:

* centre:    lambda_coord * sum_obj |xyz - xyz_hat|^2
* size:      lambda_coord * sum_obj |whd - whd_hat|^2   (no square roots)
* obj conf:  lambda_coord * sum_obj (1 - c_hat)^2
* no-obj:    lambda_noobj * sum_noobj c_hat^2
* class:     sum_obj sum_k (p_k - p_hat_k)^2

The unreliable channel is never supervised.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Sequence, Union

import numpy as np

from .codec import CENTER, CLASSES, CONF, EXTENT, GridSpec, TargetGrid
from .tensor import DimensionError, Tensor, as_tensor

TERMS = ("center_term", "size_term", "conf_obj_term", "conf_noobj_term", "class_term")


@dataclass(frozen=True)
class LossConfig:
    lambda_coord: float = 1.0
    lambda_noobj: float = 10.0

    def __post_init__(self):
        if self.lambda_coord < 0 or self.lambda_noobj < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    center_term: Tensor
    size_term: Tensor
    conf_obj_term: Tensor
    conf_noobj_term: Tensor
    class_term: Tensor
    total: Tensor

    def floats(self) -> Dict[str, float]:
        out = {name: getattr(self, name).item() for name in TERMS}
        out["total"] = self.total.item()
        return out

    def csv_row(self, step: int) -> str:
        f = self.floats()
        return ",".join([str(step), repr(f["total"])] + [repr(f[t]) for t in TERMS])


CSV_HEADER = "step,total," + ",".join(TERMS)


def _stack_targets(target: Union[TargetGrid, Sequence[TargetGrid]], spec: GridSpec) -> np.ndarray:
    targets = [target] if isinstance(target, TargetGrid) else list(target)
    for t in targets:
        if t.spec != spec:
            raise DimensionError(f"target grid spec {t.spec} does not match prediction spec {spec}")
    return np.stack([t.as_array() for t in targets])


def compute_loss(
    pred: Tensor,
    target: Union[TargetGrid, Sequence[TargetGrid]],
    cfg: LossConfig = LossConfig(),
) -> LossBreakdown:
    """Loss between a decoded prediction grid and its targets.

    ``pred`` is the (batch, S, S, S, 10) output of ``codec.decode_tensor``;
    ``target`` is one TargetGrid per batch element.
    """
    pred = as_tensor(pred)
    if pred.ndim == 4:
        pred = pred.reshape((1,) + pred.shape)
    S = pred.shape[1]
    spec = GridSpec(S=S, K=pred.shape[-1] - 8)
    if pred.shape[1:] != spec.grid_shape:
        raise DimensionError(f"prediction grid shape {pred.shape} is not (batch, S, S, S, 10)")
    tgt = _stack_targets(target, spec)
    if tgt.shape[0] != pred.shape[0]:
        raise DimensionError(f"{tgt.shape[0]} targets for a batch of {pred.shape[0]} predictions")

    batch = pred.shape[0]
    obj = tgt[..., CONF : CONF + 1]
    noobj = 1.0 - obj
    sq = (pred - tgt) ** 2
    coord = cfg.lambda_coord / batch

    center = (sq[..., CENTER] * obj).sum() * coord
    size = (sq[..., EXTENT] * obj).sum() * coord
    conf_obj = (sq[..., CONF : CONF + 1] * obj).sum() * coord
    conf_noobj = (sq[..., CONF : CONF + 1] * noobj).sum() * (cfg.lambda_noobj / batch)
    cls = (sq[..., CLASSES] * obj).sum() * (1.0 / batch)
    total = center + size + conf_obj + conf_noobj + cls
    return LossBreakdown(center, size, conf_obj, conf_noobj, cls, total)
