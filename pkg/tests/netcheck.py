"""Kink-aware finite-difference check of whole-network loss gradients.

A central difference is only a derivative estimate when no leaky-ReLU input
changes sign between the +eps and -eps evaluations. Weights whose probe
crosses a kink are redrawn; the number of redraws is reported.

Relative errors use ``max(|analytic|, |numeric|, floor)`` as denominator,
where ``floor = 1e3 * machine_eps * |loss| / eps`` is the resolution of a
central difference on a float64 loss of that size (the loss is a sum over
thousands of cells, hence the 1e3 allowance for accumulated rounding).
"""

from contextlib import contextmanager

import numpy as np

import eyolo.net as netmod
from eyolo.codec import encode_targets
from eyolo.loss import LossConfig
from eyolo.train import batch_loss


@contextmanager
def record_signs(log):
    original = netmod.leaky_relu

    def recording(x, *args, **kwargs):
        log.append(np.signbit(x.data))
        return original(x, *args, **kwargs)

    netmod.leaky_relu = recording
    try:
        yield
    finally:
        netmod.leaky_relu = original


def _crossed(a, b):
    return any(not np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(net, sample, n_weights=20, eps=1e-5, seed=0, cfg=LossConfig()):
    """Returns ``(rows, redraws, floor)``; each row is (name, index, analytic, numeric, rel_error)."""
    targets = [encode_targets(sample.boxes, net.grid)]
    weights = net.tensors()
    loss = batch_loss(net, [sample], targets, cfg, weights).total
    floor = 1e3 * np.finfo(np.float64).eps * abs(loss.item()) / eps
    loss.backward()

    names = sorted(net.params)
    sizes = np.array([net.params[n].size for n in names])
    ends = np.cumsum(sizes)
    rng = np.random.default_rng(seed)
    rows, redraws, tried = [], 0, set()
    while len(rows) < n_weights:
        flat = int(rng.integers(ends[-1]))
        if flat in tried:
            continue
        tried.add(flat)
        k = int(np.searchsorted(ends, flat, side="right"))
        name = names[k]
        idx = np.unravel_index(flat - (ends[k] - sizes[k]), net.params[name].shape)
        old = net.params[name][idx]
        up_signs, down_signs = [], []
        net.params[name][idx] = old + eps
        with record_signs(up_signs):
            up = batch_loss(net, [sample], targets, cfg).total.item()
        net.params[name][idx] = old - eps
        with record_signs(down_signs):
            down = batch_loss(net, [sample], targets, cfg).total.item()
        net.params[name][idx] = old
        if _crossed(up_signs, down_signs):
            redraws += 1
            continue
        numeric = (up - down) / (2 * eps)
        analytic = float(weights[name].grad[idx])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        rows.append((name, tuple(int(i) for i in idx), analytic, numeric, rel))
    return rows, redraws, floor
