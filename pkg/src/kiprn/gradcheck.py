"""Central finite-difference gradient checks (float64).

``run_suite`` exercises every differentiable op plus the composed resizer
and classifier.  Large tensors are spot-checked on a random coordinate
subset per seed.  A coordinate whose left and right one-sided differences
disagree straddles a ReLU kink; it is counted as skipped, not compared.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .classifier import Backbone, BackboneConfig
from .resizer import Kiprn, KiprnConfig
from .tensor import Tape, Tensor

STEP = 1e-6


@dataclass
class GradReport:
    name: str
    max_rel_err: float
    checked: int
    skipped: int
    seconds: float = 0.0


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two max magnitudes."""
    analytic, numeric = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale == 0.0:
        return diff
    return float(diff / scale)


class Projector:
    """Maps a tensor to ``sum(out * R)``; ``R`` is drawn once per shape and reused."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.weights = {}

    def __call__(self, out: Tensor) -> Tensor:
        if out.shape not in self.weights:
            self.weights[out.shape] = Tensor(self.rng.standard_normal(out.shape))
        return ops.total(ops.mul(out, self.weights[out.shape]))


def check_grads(loss_fn, leaves, rng: np.random.Generator, coords: int | None = None, h: float = STEP):
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``leaves`` are float64 tensors with ``requires_grad``; ``coords`` caps the
    number of coordinates checked per tensor.  Returns
    ``(max_rel_err, checked, skipped)``; the error is taken over all checked
    coordinates of all leaves jointly.
    """
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss, wrt=leaves)
    analytic, numeric = [], []
    checked = skipped = 0
    for t in leaves:
        flat = t.data.reshape(-1)
        g = grads[t].reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and flat.size > coords:
            idx = rng.choice(flat.size, coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn().data)
            flat[i] = orig - h
            fm = float(loss_fn().data)
            flat[i] = orig
            f0 = float(loss_fn().data)
            right, left = (fp - f0) / h, (f0 - fm) / h
            central = (fp - fm) / (2 * h)
            if abs(right - left) > 1e-4 * max(1.0, abs(central)):
                skipped += 1
                continue
            analytic.append(g[i])
            numeric.append(central)
            checked += 1
    return rel_err(np.array(analytic), np.array(numeric)), checked, skipped


def _leaf(rng, shape, scale=1.0, away_from_zero=False):
    x = rng.standard_normal(shape) * scale
    if away_from_zero:
        x = np.where(np.abs(x) < 0.1, np.sign(x + 1e-12) * 0.1 + x, x)
    return Tensor(x, requires_grad=True)


# each case: (rng, proj) -> (loss_fn, leaves, coords per tensor or None for all)

def _case_conv2d(rng, proj):
    n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, k // 2 + 1))
    hw = int(rng.integers(k, 8))
    x, w, b = _leaf(rng, (n, c, hw, hw)), _leaf(rng, (o, c, k, k)), _leaf(rng, (o,))

    def loss():
        with ops.conv_path("im2col"):
            return proj(ops.conv2d(x, w, b, stride=stride, padding=pad))

    return loss, [x, w, b], None


def _case_conv2d_fft(rng, proj):
    c, o = rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([3, 5, 7]))
    pad = int(rng.integers(0, k // 2 + 1))
    hw = int(rng.integers(k, 10))
    x, w, b = _leaf(rng, (2, c, hw, hw)), _leaf(rng, (o, c, k, k)), _leaf(rng, (o,))

    def loss():
        with ops.conv_path("fft"):
            return proj(ops.conv2d(x, w, b, stride=1, padding=pad))

    return loss, [x, w, b], None


def _case_bilinear(rng, proj):
    h, w = rng.integers(1, 8, size=2)
    oh, ow = rng.integers(1, 12, size=2)
    x = _leaf(rng, (2, 2, h, w))
    return (lambda: proj(ops.bilinear_resize(x, oh, ow))), [x], None


def _case_group_norm(rng, proj):
    x = _leaf(rng, (1, 4, 3, 3))
    gamma, beta = _leaf(rng, (4,)), _leaf(rng, (4,))
    return (lambda: proj(ops.group_norm(x, 2, gamma, beta, 1e-5))), [x, gamma, beta], None


def _case_relu(rng, proj):
    x = _leaf(rng, (2, 3, 4, 4), away_from_zero=True)
    return (lambda: proj(ops.relu(x))), [x], None


def _case_gap(rng, proj):
    x = _leaf(rng, (2, 3, int(rng.integers(1, 6)), int(rng.integers(1, 6))))
    return (lambda: proj(ops.global_avg_pool(x))), [x], None


def _case_linear(rng, proj):
    x, w, b = _leaf(rng, (3, 5)), _leaf(rng, (4, 5)), _leaf(rng, (4,))
    return (lambda: proj(ops.linear(x, w, b))), [x, w, b], None


def _case_concat(rng, proj):
    a, b = _leaf(rng, (2, 2, 3, 3)), _leaf(rng, (2, 3, 3, 3))
    return (lambda: proj(ops.concat([a, b], axis=1))), [a, b], None


def _case_xent(rng, proj):
    logits = _leaf(rng, (4, 5), scale=2.0)
    labels = rng.integers(0, 5, size=4)
    return (lambda: ops.softmax_cross_entropy(logits, labels)), [logits], None


def micro_kiprn_config(levels=((6, 6), (8, 8), (10, 10)), blocks: int = 1, placement: str = "first"):
    return KiprnConfig(num_levels=len(levels), level_sizes=list(levels), pyconv_channels=(6, 4),
                       branch_channels=4, resblocks_per_branch=blocks, zero_init_projection=False,
                       pyconv_placement=placement)


def _case_kiprn(rng, proj):
    model = Kiprn(micro_kiprn_config(), rng, dtype=np.float64)
    x = _leaf(rng, (1, 3, 12, 12))

    def loss():
        terms = [proj(level) for level in model(x).levels]
        out = terms[0]
        for term in terms[1:]:
            out = ops.add(out, term)
        return out

    return loss, [x] + model.parameters(), 2


def _case_kic(rng, proj):
    cfg = micro_kiprn_config(levels=((8, 8),))
    model = Kiprn(cfg, rng, dtype=np.float64)
    f = _leaf(rng, (1, 4, 10, 10))
    return (lambda: proj(model.kic_compensate(f)[0])), [f] + model.branches[0].parameters(), 6


def _case_backbone(rng, proj):
    model = Backbone(BackboneConfig(stage_channels=[4, 8], num_classes=3), rng, dtype=np.float64)
    x = _leaf(rng, (1, 3, 9, 9))
    labels = rng.integers(0, 3, size=1)
    return (lambda: ops.softmax_cross_entropy(model(x)[0], labels)), [x] + model.parameters(), 3


CASES = {
    "conv2d": _case_conv2d,
    "conv2d_fft": _case_conv2d_fft,
    "bilinear_resize": _case_bilinear,
    "group_norm": _case_group_norm,
    "activation": _case_relu,
    "global_avg_pool": _case_gap,
    "linear": _case_linear,
    "concat": _case_concat,
    "softmax_cross_entropy": _case_xent,
    "kic_compensate": _case_kic,
    "backbone_forward": _case_backbone,
    "kiprn_forward": _case_kiprn,
}

def run_case(name: str, seed: int) -> tuple:
    rng = np.random.default_rng([seed, list(CASES).index(name)])
    loss_fn, leaves, coords = CASES[name](rng, Projector(np.random.default_rng([seed, 99])))
    for t in leaves:
        t.data = np.asarray(t.data, dtype=np.float64)
    return check_grads(loss_fn, leaves, rng, coords)


def run_suite(seeds: int = 20, names=None) -> list:
    reports = []
    for name in names or CASES:
        t0 = time.perf_counter()
        worst, checked, skipped = 0.0, 0, 0
        for seed in range(seeds):
            err, c, s = run_case(name, seed)
            worst = max(worst, err)
            checked += c
            skipped += s
        reports.append(GradReport(name, worst, checked, skipped, time.perf_counter() - t0))
    return reports
