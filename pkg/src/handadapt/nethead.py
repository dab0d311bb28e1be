"""Two-head network: shared conv backbone, keypoint-heatmap branch, mask branch.

Layout (defaults, 32x32x3 input)::

    backbone  conv(3->c1) relu                      -> skip (H x W)
              maxpool2
              conv(c1->c1) relu, conv(c1->c2) relu, conv(c2->c2) relu  -> feat (H/2 x W/2)
    pose      conv(c2->c2) relu, conv(c2->K) sigmoid      -> K heatmaps at H/2
    mask      conv(c2->c3) relu, upsample2, concat(skip), conv(c3+c1->1) -> logits at H
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BRANCHES = ("backbone", "pose", "mask")


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 32
    in_channels: int = 3
    num_joints: int = 21
    width1: int = 8
    width2: int = 16
    width3: int = 8
    pose_depth: int = 2
    sigma: float = 2.0
    temperature: float = 0.05

    def validate(self) -> None:
        if self.image_size <= 0 or self.image_size % 4:
            raise ValueError(f"image_size must be a positive multiple of 4, got {self.image_size}")
        for name in ("in_channels", "num_joints", "width1", "width2", "width3"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.pose_depth < 2:
            raise ValueError("pose_depth must be >= 2")
        if self.sigma <= 0 or self.temperature <= 0:
            raise ValueError("sigma and temperature must be positive")

    @property
    def grid_size(self) -> int:
        return self.image_size // 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NetParams:
    """Parameter blocks keyed ``"<branch>.<layer>.<w|b>"``."""

    arch: ArchConfig
    blocks: dict[str, np.ndarray] = field(default_factory=dict)

    def branch(self, name: str) -> list[str]:
        return [k for k in self.blocks if k.split(".", 1)[0] == name]

    def copy(self) -> "NetParams":
        return NetParams(self.arch, {k: v.copy() for k, v in self.blocks.items()})

    def distance(self, other: "NetParams") -> float:
        return float(np.sqrt(np.sum([np.sum((self.blocks[k] - other.blocks[k]) ** 2) for k in self.blocks])))


@dataclass
class Prediction:
    heatmaps: Tensor    # (N, K, H', W') in [0, 1]
    mask_logits: Tensor  # (N, H, W)
    mask_prob: Tensor    # (N, H, W)

    def detach(self) -> "Prediction":
        return Prediction(Tensor(self.heatmaps.data), Tensor(self.mask_logits.data), Tensor(self.mask_prob.data))

    @property
    def batch_size(self) -> int:
        return self.heatmaps.shape[0]


def _layer_specs(arch: ArchConfig) -> list[tuple[str, int, int]]:
    c1, c2, c3, k = arch.width1, arch.width2, arch.width3, arch.num_joints
    specs = [
        ("backbone.conv1", arch.in_channels, c1),
        ("backbone.conv2", c1, c1),
        ("backbone.conv3", c1, c2),
        ("backbone.conv4", c2, c2),
    ]
    for i in range(arch.pose_depth - 1):
        specs.append((f"pose.conv{i + 1}", c2, c2))
    specs.append((f"pose.conv{arch.pose_depth}", c2, k))
    specs += [("mask.conv1", c2, c3), ("mask.conv2", c3 + c1, 1)]
    return specs


def build_network(arch: ArchConfig | None = None, seed: int = 0) -> NetParams:
    """He-initialised parameters, deterministic in ``seed``."""
    arch = arch or ArchConfig()
    arch.validate()
    rng = np.random.default_rng(seed)
    blocks = {}
    for name, cin, cout in _layer_specs(arch):
        std = np.sqrt(2.0 / (9 * cin))
        blocks[f"{name}.w"] = rng.normal(0.0, std, size=(3, 3, cin, cout))
        blocks[f"{name}.b"] = np.zeros(cout)
    # start heatmaps near zero so the sigmoid output is mostly background
    blocks[f"pose.conv{arch.pose_depth}.b"][:] = -4.0
    return NetParams(arch, blocks)


def _conv(x: Tensor, p: dict[str, Tensor], name: str) -> Tensor:
    return ad.conv2d(x, p[f"{name}.w"], p[f"{name}.b"])


def _as_leaves(params) -> dict[str, Tensor]:
    blocks = params.blocks if isinstance(params, NetParams) else params
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in blocks.items()}


def forward(params, images, arch: ArchConfig | None = None, dropout: tuple[np.random.Generator, float] | None = None) -> Prediction:
    """Run the network on an (N, H, W, C) batch (a single H x W x C image is promoted).

    ``params`` is a NetParams or a dict of blocks (arrays or Tensors, for gradients).
    ``dropout`` = (rng, rate) applies inverted dropout to the backbone output.
    """
    if isinstance(params, NetParams):
        arch = params.arch
    arch = arch or ArchConfig()
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
    if x.data.ndim == 3:
        x = Tensor(x.data[None])
    if x.data.ndim != 4 or x.shape[1:] != (arch.image_size, arch.image_size, arch.in_channels):
        raise ad.ShapeError(f"forward: expected (N, {arch.image_size}, {arch.image_size}, {arch.in_channels}) images, got {x.shape}")
    p = _as_leaves(params)
    try:
        skip = ad.relu(_conv(x, p, "backbone.conv1"))
        h = ad.maxpool2(skip)
        h = ad.relu(_conv(h, p, "backbone.conv2"))
        h = ad.relu(_conv(h, p, "backbone.conv3"))
        feat = ad.relu(_conv(h, p, "backbone.conv4"))
        if dropout is not None:
            rng, rate = dropout
            if rate > 0:
                keep = (rng.random(feat.shape) >= rate) / (1.0 - rate)
                feat = ad.mul(feat, Tensor(keep))
        h = feat
        for i in range(arch.pose_depth - 1):
            h = ad.relu(_conv(h, p, f"pose.conv{i + 1}"))
        heat = ad.sigmoid(_conv(h, p, f"pose.conv{arch.pose_depth}"))
        heat = ad.transpose(heat, (0, 3, 1, 2))
        m = ad.relu(_conv(feat, p, "mask.conv1"))
        m = ad.concat([ad.upsample2(m), skip], axis=-1)
        logits = _conv(m, p, "mask.conv2")
        logits = ad.reshape(logits, logits.shape[:3])
        prob = ad.sigmoid(logits)
    except ad.NonFiniteError as exc:
        raise ad.NonFiniteError(f"forward: {exc}") from exc
    return Prediction(heat, logits, prob)


def predict(params: NetParams, images: np.ndarray, batch_size: int = 64) -> dict[str, np.ndarray]:
    """Gradient-free forward over a large array, returning numpy outputs."""
    outs = {"heatmaps": [], "mask_prob": [], "mask_logits": []}
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            pred = forward(params, images[i:i + batch_size])
            outs["heatmaps"].append(pred.heatmaps.data)
            outs["mask_prob"].append(pred.mask_prob.data)
            outs["mask_logits"].append(pred.mask_logits.data)
    return {k: np.concatenate(v) for k, v in outs.items()}


# heatmap coding -------------------------------------------------------------------
# grid cell g covers image pixels 2g and 2g+1, so its centre is at 2g + 0.5.

def image_to_grid(coords: np.ndarray, stride: int = 2) -> np.ndarray:
    return (np.asarray(coords, dtype=np.float64) - (stride - 1) / 2.0) / stride


def grid_to_image(coords: np.ndarray, stride: int = 2) -> np.ndarray:
    return np.asarray(coords, dtype=np.float64) * stride + (stride - 1) / 2.0


def encode_heatmaps(coords: np.ndarray, sigma: float = 2.0, grid: tuple[int, int] = (16, 16),
                    image_size: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalised Gaussian target per joint (peak 1), ``sigma`` in grid cells.

    Returns (heatmaps K x H' x W', in_frame K bool). Joints outside the image
    still get their (clipped) Gaussian tail and are flagged False.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    coords = np.asarray(coords, dtype=np.float64)
    gh, gw = grid
    size = image_size if image_size is not None else 2 * gw
    stride = size // gw
    g = image_to_grid(coords, stride)
    ys, xs = np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64)
    dx = xs[None, None, :] - g[:, 0, None, None]
    dy = ys[None, :, None] - g[:, 1, None, None]
    heat = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
    in_frame = (coords[:, 0] >= 0) & (coords[:, 0] <= size - 1) & (coords[:, 1] >= 0) & (coords[:, 1] <= size - 1)
    return heat, in_frame


def decode_keypoints(heatmaps: np.ndarray, temperature: float = 0.05, image_size: int | None = None
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Soft-argmax decode of (..., K, H', W') heatmaps to image-pixel coordinates.

    Returns (coords ..., K, 2 as (x, y), valid ..., K). Channels that are all zero
    decode to the grid centre and are flagged invalid.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    h = np.asarray(heatmaps, dtype=np.float64)
    gh, gw = h.shape[-2:]
    size = image_size if image_size is not None else 2 * gw
    stride = size // gw
    z = h / temperature
    z = z - z.max(axis=(-2, -1), keepdims=True)
    e = np.exp(z)
    w = e / e.sum(axis=(-2, -1), keepdims=True)
    gx = (w.sum(axis=-2) * np.arange(gw)).sum(axis=-1)
    gy = (w.sum(axis=-1) * np.arange(gh)).sum(axis=-1)
    coords = grid_to_image(np.stack([gx, gy], axis=-1), stride)
    valid = np.any(h != 0, axis=(-2, -1))
    return coords, valid
