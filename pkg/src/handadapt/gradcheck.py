"""Finite-difference checks for every autodiff primitive and for the full
two-head training loss on a small network."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckResult, Tensor
from .losses import LossWeights, loss_task
from .nethead import ArchConfig, build_network, encode_heatmaps, forward

THRESHOLD = 1e-4


def _u(rng, shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def primitive_cases(seed: int = 0) -> dict[str, tuple[dict[str, np.ndarray], Callable]]:
    """One scalar-valued probe per primitive. Fixed random projections turn
    vector outputs into scalars so every output coordinate matters."""
    rng = np.random.default_rng(seed)
    a, b = _u(rng, (2, 3)), _u(rng, (2, 3))
    img = _u(rng, (2, 4, 6, 3))
    ker, bias = _u(rng, (3, 3, 3, 2)), _u(rng, (2,))
    pos = rng.uniform(0.2, 2.0, size=(2, 3))
    tgt = (rng.random((2, 3)) > 0.5).astype(float)
    proj = Tensor(_u(rng, (2, 3)))
    proj_img = Tensor(_u(rng, img.shape))
    proj_t = Tensor(_u(rng, (2, 3, 4, 6)))
    proj_r = Tensor(_u(rng, (2, 72)))
    dot = lambda t: ad.sum(ad.mul(t, proj))  # noqa: E731
    return {
        "add": ({"a": a, "b": b}, lambda p: dot(ad.add(p["a"], p["b"]))),
        "sub": ({"a": a, "b": b}, lambda p: dot(ad.sub(p["a"], p["b"]))),
        "mul": ({"a": a, "b": b}, lambda p: ad.sum(ad.mul(p["a"], p["b"]))),
        "scale": ({"a": a}, lambda p: dot(ad.scale(p["a"], -1.7))),
        "matmul": ({"a": a, "m": _u(rng, (3, 4))}, lambda p: ad.sum(ad.square(ad.matmul(p["a"], p["m"])))),
        "conv2d": ({"x": img, "w": ker, "b": bias}, lambda p: ad.sum(ad.square(ad.conv2d(p["x"], p["w"], p["b"])))),
        "upsample2": ({"x": img}, lambda p: ad.sum(ad.square(ad.upsample2(p["x"])))),
        "maxpool2": ({"x": img}, lambda p: ad.sum(ad.square(ad.maxpool2(p["x"])))),
        "relu": ({"a": a}, lambda p: dot(ad.relu(p["a"]))),
        "sigmoid": ({"a": a}, lambda p: dot(ad.sigmoid(p["a"]))),
        "exp": ({"a": a}, lambda p: dot(ad.exp(p["a"]))),
        "log": ({"a": pos}, lambda p: dot(ad.log(p["a"]))),
        "square": ({"a": a}, lambda p: dot(ad.square(p["a"]))),
        "sum": ({"a": a}, lambda p: ad.square(ad.sum(p["a"]))),
        "mean": ({"a": a}, lambda p: ad.mean(ad.square(p["a"]))),
        "concat": ({"x": img, "y": _u(rng, (2, 4, 6, 2))},
                   lambda p: ad.sum(ad.square(ad.concat([p["x"], p["y"]], axis=-1)))),
        "spatial_softmax": ({"x": img}, lambda p: ad.sum(ad.mul(ad.spatial_softmax(p["x"]), proj_img))),
        "smooth_l1": ({"a": a * 1.5}, lambda p: ad.sum(ad.smooth_l1(p["a"]))),
        "bce_with_logits": ({"a": a}, lambda p: ad.mean(ad.bce_with_logits(p["a"], tgt))),
        "transpose": ({"x": img}, lambda p: ad.sum(ad.mul(ad.transpose(p["x"], (0, 3, 1, 2)), proj_t))),
        "reshape": ({"x": img}, lambda p: ad.sum(ad.mul(ad.reshape(p["x"], (2, -1)), proj_r))),
        # finite differences cannot see a blocked path, so only the open one is probed here
        "stop_gradient": ({"a": a}, lambda p: ad.sum(ad.mul(p["a"], ad.stop_gradient(ad.square(Tensor(b)))))),
    }


def network_case(seed: int = 0, batch: int = 2) -> tuple[dict[str, np.ndarray], Callable]:
    """Full two-head loss (heatmap smooth L1 + mask BCE) on a narrow network."""
    arch = ArchConfig(image_size=8, num_joints=3, width1=2, width2=3, width3=2)
    net = build_network(arch, seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.uniform(0.0, 1.0, size=(batch, 8, 8, 3))
    kp = rng.uniform(1.0, 6.0, size=(batch, 3, 2))
    heat = np.stack([encode_heatmaps(k, arch.sigma, (4, 4), 8)[0] for k in kp])
    masks = (rng.random((batch, 8, 8)) > 0.6).astype(float)
    # a small pose weight keeps both terms on the same order of magnitude
    weights = LossWeights(lambda_p=1.0, lambda_m=1.0)
    labels = {"heatmaps": heat, "masks": masks}
    return dict(net.blocks), lambda p: loss_task(forward(p, x, arch), labels, weights)


@dataclass
class SuiteReport:
    results: list[GradCheckResult]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.max_rel_error < THRESHOLD and r.n_checked > 0 for r in self.results)

    @property
    def worst(self) -> float:
        return max(r.max_rel_error for r in self.results)


def run_suite(seed: int = 0, step: float = 1e-5, floor: float = 1e-6) -> SuiteReport:
    """Check every primitive, then the network loss, in float64."""
    t0 = time.perf_counter()
    results = []
    for name, (params, fn) in primitive_cases(seed).items():
        results.append(ad.check_gradients(fn, params, step=step, floor=floor, name=name))
    params, fn = network_case(seed)
    results.append(ad.check_gradients(fn, params, step=step, floor=floor, name="network_loss"))
    return SuiteReport(results, time.perf_counter() - t0)
