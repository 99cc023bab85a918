"""Adam, the training loop, IoU evaluation and the speed benchmark."""

from __future__ import annotations

import csv
import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .codec import decode_grid, decode_tensor, encode_targets
from .geometry import Box3D, NmsConfig, iou2d, iou3d_matrix, boxes_to_array, nms3d, nms_two_view_2d
from .loss import CSV_HEADER, LossConfig, compute_loss
from .net import Network
from .tensor import NonFiniteError, Tensor

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    """Loss went non-finite; the network was rolled back to the last good checkpoint."""


# -- optimizer ----------------------------------------------------------------


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        out = {"optim.t": np.array([float(self.t)])}
        out.update({f"optim.m.{k}": a for k, a in self.m.items()})
        out.update({f"optim.v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], **hyper) -> "OptimState":
        state = cls(**hyper)
        if "optim.t" in arrays:
            state.t = int(arrays["optim.t"][0])
        for k, a in arrays.items():
            if k.startswith("optim.m."):
                state.m[k[len("optim.m.") :]] = a.copy()
            elif k.startswith("optim.v."):
                state.v[k[len("optim.v.") :]] = a.copy()
        return state


def adam_step(weights: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimState) -> Dict[str, np.ndarray]:
    """One bias-corrected Adam update, applied to ``weights`` in place."""
    for name, g in grads.items():
        if g is None:
            continue
        if g.shape != weights[name].shape:
            raise TrainingError(f"{name}: gradient shape {g.shape} != weight shape {weights[name].shape}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in layer {name}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(weights[name])
            state.v[name] = np.zeros_like(weights[name])
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        weights[name] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return weights


# -- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    lr: float = 1e-3
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)


@dataclass
class FitResult:
    history: List[Tuple[int, float, float]]  # epoch, train_loss, val_loss
    best_checkpoint: Optional[Path]
    last_checkpoint: Optional[Path]
    steps: int


def _batch_input(samples) -> np.ndarray:
    return np.concatenate([s.input.data for s in samples], axis=0)


def batch_loss(net: Network, samples, targets, loss_cfg: LossConfig, weights=None):
    raw = net.forward(Tensor(_batch_input(samples)), weights)
    return compute_loss(decode_tensor(raw, net.grid), targets, loss_cfg)


def mean_loss(net: Network, samples, loss_cfg: LossConfig, batch_size: int = 8) -> float:
    """Per-sample mean loss without recording a graph."""
    if not samples:
        return float("nan")
    total = 0.0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        targets = [encode_targets(s.boxes, net.grid) for s in chunk]
        total += batch_loss(net, chunk, targets, loss_cfg).total.item() * len(chunk)
    return total / len(samples)


def fit(
    net: Network,
    train_samples: Sequence,
    val_samples: Sequence = (),
    cfg: TrainConfig = TrainConfig(),
    out_dir=None,
    resume: Optional[Path] = None,
) -> FitResult:
    """Train end to end with Adam.

    Writes ``loss.csv`` (epoch,train_loss,val_loss), ``steps.csv`` (per-step
    loss breakdown), ``last.ckpt`` every epoch and ``best.ckpt`` whenever the
    validation loss (training loss when no validation set) improves.
    Shuffling is seeded by ``(seed, epoch)`` so a resumed run replays the same
    batches as an uninterrupted one.
    """
    if not train_samples:
        raise ValueError("training set is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    state = OptimState(lr=cfg.lr)
    start_epoch, best = 1, math.inf
    if resume is not None:
        loaded, extra = Network.load(resume, net.cfg)
        net.params = loaded.params
        state = OptimState.from_arrays(extra, lr=cfg.lr)
        start_epoch = int(extra.get("meta.epoch", np.array([0.0]))[0]) + 1
        best = float(extra.get("meta.best", np.array([math.inf]))[0])
        logger.info("resumed from %s at epoch %d", resume, start_epoch)

    targets = [encode_targets(s.boxes, net.grid) for s in train_samples]
    collisions = sum(t.collisions for t in targets)
    if collisions:
        logger.warning("%d ground-truth boxes dropped by cell collisions", collisions)

    history: List[Tuple[int, float, float]] = []
    loss_csv = step_csv = None
    if out is not None:
        append = resume is not None and (out / "loss.csv").exists()
        loss_csv = open(out / "loss.csv", "a" if append else "w", newline="")
        step_csv = open(out / "steps.csv", "a" if append else "w")
        if not append:
            loss_csv.write("epoch,train_loss,val_loss\n")
            step_csv.write(CSV_HEADER + "\n")

    last_good = dict((k, v.copy()) for k, v in net.params.items())
    best_path = out / "best.ckpt" if out is not None else None
    last_path = out / "last.ckpt" if out is not None else None
    n = len(train_samples)
    try:
        for epoch in range(start_epoch, start_epoch + cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            running = 0.0
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                weights = net.tensors()
                try:
                    lb = batch_loss(net, [train_samples[i] for i in idx], [targets[i] for i in idx], cfg.loss, weights)
                    lb.total.backward()
                    adam_step(net.params, {k: t.grad for k, t in weights.items()}, state)
                except (NonFiniteError, TrainingError) as exc:
                    net.params = last_good
                    raise DivergenceError(f"epoch {epoch}, step {state.t + 1}: {exc}; rolled back to last good weights") from exc
                running += lb.total.item() * len(idx)
                if step_csv is not None:
                    step_csv.write(lb.csv_row(state.t) + "\n")
            train_loss = running / n
            val_loss = mean_loss(net, list(val_samples), cfg.loss) if val_samples else float("nan")
            history.append((epoch, train_loss, val_loss))
            logger.info("epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)
            last_good = dict((k, v.copy()) for k, v in net.params.items())
            score = val_loss if val_samples else train_loss
            if out is not None:
                loss_csv.write(f"{epoch},{train_loss!r},{val_loss!r}\n")
                loss_csv.flush()
                step_csv.flush()
                if score < best:
                    best = score
                    net.save(best_path, {"meta.epoch": np.array([float(epoch)])})
                meta = {"meta.epoch": np.array([float(epoch)]), "meta.best": np.array([best])}
                net.save(last_path, {**state.to_arrays(), **meta})
            else:
                best = min(best, score)
    finally:
        if loss_csv is not None:
            loss_csv.close()
            step_csv.close()
    return FitResult(history, best_path, last_path, state.t)


def read_loss_csv(path) -> List[Tuple[int, float, float]]:
    with open(path, newline="") as fh:
        return [(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"])) for r in csv.DictReader(fh)]


# -- inference and evaluation -------------------------------------------------


def detect(net: Network, x: np.ndarray, nms_cfg: NmsConfig = NmsConfig()) -> List[List[Box3D]]:
    """Forward, decode and suppress; one box list per batch element."""
    raw = net.forward(Tensor(x)).data
    return [nms3d(decode_grid(raw[b], net.grid, nms_cfg.confidence_floor), nms_cfg) for b in range(raw.shape[0])]


@dataclass
class Match:
    gt: Box3D
    det: Optional[Box3D]
    iou_2d: float
    iou_3d: float

    @property
    def iou_3d_23(self) -> float:
        return self.iou_3d ** (2.0 / 3.0)


def match_boxes(gt: Sequence[Box3D], dets: Sequence[Box3D]) -> List[Match]:
    """Greedy one-to-one matching by descending 3D IoU.

    Each detection is used at most once; ground truths left without an
    overlapping detection get a Match with ``det=None`` and zero scores.
    """
    matches: Dict[int, Match] = {}
    if gt and dets:
        ious = iou3d_matrix(boxes_to_array(gt), boxes_to_array(dets))
        flat = np.argsort(-ious, axis=None, kind="stable")
        used = set()
        for g, d in zip(*np.unravel_index(flat, ious.shape)):
            if ious[g, d] <= 0.0:
                break
            if g in matches or d in used:
                continue
            used.add(d)
            matches[g] = Match(gt[g], dets[d], iou2d(gt[g], dets[d]), float(ious[g, d]))
    return [matches.get(i, Match(box, None, 0.0, 0.0)) for i, box in enumerate(gt)]


@dataclass
class EvalReport:
    mean_2d: float
    mean_3d: float
    mean_3d_23: float
    max_2d: float
    max_3d: float
    max_3d_23: float
    matched: int
    unmatched_gt: int
    detections: int
    matches: List[Match] = field(default_factory=list, repr=False)

    def table(self) -> str:
        head = f"{'':6}{'2D IoU':>10}{'3D IoU':>10}{'3D IoU^(2/3)':>14}"
        rows = [
            f"{'Mean':6}{self.mean_2d:>10.2f}{self.mean_3d:>10.2f}{self.mean_3d_23:>14.2f}",
            f"{'Max':6}{self.max_2d:>10.2f}{self.max_3d:>10.2f}{self.max_3d_23:>14.2f}",
        ]
        foot = f"matched {self.matched}, unmatched ground truth {self.unmatched_gt}, detections {self.detections}"
        return "\n".join([head, *rows, foot])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["gt_index", "matched", "iou_2d", "iou_3d", "iou_3d_pow_2_3"])
            for i, m in enumerate(self.matches):
                w.writerow([i, int(m.det is not None), repr(m.iou_2d), repr(m.iou_3d), repr(m.iou_3d_23)])


def summarize(matches: Sequence[Match], detections: int) -> EvalReport:
    if not matches:
        raise ValueError("no ground-truth boxes to evaluate")
    c2 = [m.iou_2d for m in matches]
    c3 = [m.iou_3d for m in matches]
    c23 = [m.iou_3d_23 for m in matches]
    matched = sum(m.det is not None for m in matches)
    return EvalReport(
        float(np.mean(c2)), float(np.mean(c3)), float(np.mean(c23)),
        max(c2), max(c3), max(c23),
        matched, len(matches) - matched, detections, list(matches),
    )


def evaluate_detections(pairs: Iterable[Tuple[Sequence[Box3D], Sequence[Box3D]]]) -> EvalReport:
    """Report over (ground truth, detections) pairs; unmatched ground truth counts as 0."""
    matches: List[Match] = []
    n_det = 0
    for gt, dets in pairs:
        matches.extend(match_boxes(gt, dets))
        n_det += len(dets)
    return summarize(matches, n_det)


def evaluate_iou(net: Optional[Network], samples: Sequence, nms_cfg: NmsConfig = NmsConfig(), oracle: bool = False) -> EvalReport:
    """IoU report over a dataset; ``oracle=True`` feeds ground truth as detections."""
    if not samples:
        raise ValueError("evaluation dataset is empty")
    if oracle:
        return evaluate_detections((s.boxes, list(s.boxes)) for s in samples)
    if net is None:
        raise ValueError("a network is required unless oracle mode is on")
    return evaluate_detections((s.boxes, detect(net, s.input.data, nms_cfg)[0]) for s in samples)


# -- speed --------------------------------------------------------------------


@dataclass
class BenchReport:
    method: str
    fps: float
    median_forward_s: float
    nms_candidates: int
    nms3d_ms: float
    nms2d_ms: float
    iterations: int

    def table(self) -> str:
        lines = [
            f"{'Method':<34}{'SPEED [fps]':>12}",
            f"{self.method:<34}{self.fps:>12.2f}",
            "",
            f"{'NMS variant':<34}{'median [ms]':>12}{'candidates':>12}",
            f"{'single-pass 3D IoU':<34}{self.nms3d_ms:>12.3f}{self.nms_candidates:>12d}",
            f"{'two-pass 2D IoU (front + top)':<34}{self.nms2d_ms:>12.3f}{self.nms_candidates:>12d}",
        ]
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("method,fps,median_forward_s,nms_candidates,nms3d_ms,nms2d_ms,iterations\n")
            fh.write(
                f"{self.method},{self.fps!r},{self.median_forward_s!r},{self.nms_candidates},"
                f"{self.nms3d_ms!r},{self.nms2d_ms!r},{self.iterations}\n"
            )


def random_candidates(rng: np.random.Generator, n: int) -> List[Box3D]:
    """Clustered candidate boxes, roughly what an untrained grid emits around a few objects."""
    centres = rng.uniform(0.2, 0.8, size=(max(1, n // 20), 3))
    boxes = []
    for _ in range(n):
        c = centres[rng.integers(len(centres))] + rng.normal(0.0, 0.03, size=3)
        c = np.clip(c, 0.0, 1.0)
        ext = rng.uniform(0.05, 0.25, size=3)
        boxes.append(Box3D.labelled(int(rng.integers(2)), *c, *ext, confidence=float(rng.uniform(0.5, 1.0))))
    return boxes


def bench_speed(
    net: Network,
    iterations: int = 10,
    nms_cfg: NmsConfig = NmsConfig(),
    candidates: int = 300,
    seed: int = 0,
) -> BenchReport:
    """Median wall-clock timings for detection and for the two NMS variants."""
    iterations = max(1, iterations)
    rng = np.random.default_rng(seed)
    n = net.cfg.input_size
    x = rng.random((1, net.cfg.in_channels, n, n))
    detect(net, x, nms_cfg)  # warm-up

    times = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        detect(net, x, nms_cfg)
        times.append(time.perf_counter() - t0)
    med = statistics.median(times)

    cand = random_candidates(rng, candidates)
    t3, t2 = [], []
    for _ in range(iterations):
        t0 = time.perf_counter()
        nms3d(cand, nms_cfg)
        t3.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        nms_two_view_2d(cand, nms_cfg)
        t2.append(time.perf_counter() - t0)

    return BenchReport(
        method=f"eyolo {net.cfg.preset} (CPU, float64)",
        fps=1.0 / med,
        median_forward_s=med,
        nms_candidates=candidates,
        nms3d_ms=statistics.median(t3) * 1e3,
        nms2d_ms=statistics.median(t2) * 1e3,
        iterations=iterations,
    )
