"""Procedural 2-D hands: skeleton sampling, capsule-mask rendering, and an
index-addressable on-disk dataset format."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

NUM_JOINTS = 21
FINGERS = ("thumb", "index", "middle", "ring", "little")
JOINT_NAMES = ["wrist"] + [f"{f}_{j}" for f in FINGERS for j in ("mcp", "pip", "dip", "tip")]
BONES = [(0, 1 + 4 * f) for f in range(5)] + [(1 + 4 * f + j, 2 + 4 * f + j) for f in range(5) for j in range(3)]
BONE_GROUPS = {
    "wrist_mcp": [(0, 1 + 4 * f) for f in range(5)],
    "mcp_pip": [(1 + 4 * f, 2 + 4 * f) for f in range(5)],
    "pip_dip": [(2 + 4 * f, 3 + 4 * f) for f in range(5)],
    "dip_tip": [(3 + 4 * f, 4 + 4 * f) for f in range(5)],
}

# hand-frame geometry in units of hand scale; y points down, fingers point up
_MCP = np.array([[-0.24, 0.20], [-0.14, -0.08], [-0.03, -0.11], [0.07, -0.09], [0.16, -0.04]])
_SEGMENTS = np.array([[0.20, 0.15, 0.13], [0.20, 0.12, 0.10], [0.22, 0.14, 0.11], [0.20, 0.13, 0.10], [0.16, 0.10, 0.09]])
_BASE_ANGLE = np.deg2rad([-50.0, -10.0, 0.0, 10.0, 21.0])
_WRIST = np.array([0.0, 0.45])


@dataclass(frozen=True)
class DomainConfig:
    name: str = "source"
    image_size: int = 32
    background: str = "plain"           # plain | textured | scenery-noise
    background_level: tuple[float, float] = (0.70, 0.85)
    light_gain_range: tuple[float, float] = (0.95, 1.05)
    light_bias_range: tuple[float, float] = (0.0, 0.0)
    rotation_range_deg: tuple[float, float] = (-20.0, 20.0)
    scale_range: tuple[float, float] = (17.0, 20.0)
    center_jitter: float = 1.5
    curl_range: tuple[float, float] = (0.0, 0.5)
    occluder_count_range: tuple[int, int] = (0, 0)
    occluder_radius_range: tuple[float, float] = (2.5, 4.5)
    noise_sigma: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if self.background not in ("plain", "textured", "scenery-noise"):
            raise ValueError(f"unknown background {self.background!r}")
        for name in ("background_level", "light_gain_range", "light_bias_range", "rotation_range_deg",
                     "scale_range", "curl_range", "occluder_count_range", "occluder_radius_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range ({lo}, {hi})")
        if self.image_size <= 0 or self.image_size % 4:
            raise ValueError("image_size must be a positive multiple of 4")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def source_domain(seed: int = 0, image_size: int = 32) -> DomainConfig:
    return DomainConfig(name="source", image_size=image_size, seed=seed)


def target_domain(seed: int = 1, image_size: int = 32) -> DomainConfig:
    return DomainConfig(
        name="target", image_size=image_size, background="textured", background_level=(0.6, 0.85),
        light_gain_range=(0.8, 0.95), light_bias_range=(0.0, 0.03), rotation_range_deg=(-70.0, 70.0),
        scale_range=(15.0, 21.0), curl_range=(0.0, 0.7), occluder_count_range=(0, 2),
        noise_sigma=0.02, seed=seed,
    )


@dataclass
class Skeleton:
    joints: np.ndarray  # (21, 2) pixel (x, y)
    scale: float
    bones: list = field(default_factory=lambda: list(BONES))

    def in_frame(self, image_size: int) -> np.ndarray:
        j = self.joints
        return np.all((j >= 0) & (j <= image_size - 1), axis=-1)


@dataclass
class Sample:
    image: np.ndarray      # (H, W, 3) in [0, 1]
    mask: np.ndarray       # (H, W) uint8 in {0, 1}
    keypoints: np.ndarray  # (21, 2)


def _rot(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def sample_skeleton(rng: np.random.Generator, domain: DomainConfig) -> Skeleton:
    """Palm pose plus per-finger splay and curl. Curl shortens the projected
    finger and bends each joint toward the palm."""
    scale = rng.uniform(*domain.scale_range)
    theta = np.deg2rad(rng.uniform(*domain.rotation_range_deg))
    center = (domain.image_size - 1) / 2.0 + rng.uniform(-domain.center_jitter, domain.center_jitter, size=2)
    local = np.zeros((NUM_JOINTS, 2))
    local[0] = _WRIST
    for f in range(5):
        splay = rng.uniform(-0.12, 0.12)
        curl = rng.uniform(*domain.curl_range)
        ang = _BASE_ANGLE[f] + splay
        pos = _MCP[f] * rng.uniform(0.95, 1.05)
        local[1 + 4 * f] = pos
        bend = (0.35 if f == 0 else -0.25) * curl * np.sign(_BASE_ANGLE[f] + 1e-9)
        for j in range(3):
            length = _SEGMENTS[f, j] * (1.0 - 0.45 * curl) * rng.uniform(0.92, 1.08)
            pos = pos + length * np.array([np.sin(ang), -np.cos(ang)])
            local[2 + 4 * f + j] = pos
            ang += bend
    joints = center + (local * scale) @ _rot(theta).T
    return Skeleton(joints=joints, scale=float(scale))


def _segment_distance(px: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ab = b - a
    t = np.clip(((px - a) @ ab) / max(float(ab @ ab), 1e-12), 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(px - closest, axis=-1), t


def _bone_radius(bone: tuple[int, int], scale: float) -> float:
    return (0.12 if bone[0] == 0 else 0.065) * scale


def _background(rng: np.random.Generator, domain: DomainConfig) -> np.ndarray:
    n = domain.image_size
    level = rng.uniform(*domain.background_level)
    tint = rng.uniform(0.9, 1.1, size=3)
    if domain.background == "plain":
        return np.broadcast_to(level * tint, (n, n, 3)).copy()
    if domain.background == "textured":
        yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
        tex = np.zeros((n, n))
        for _ in range(3):
            fx, fy = rng.uniform(0.2, 1.2, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            tex += np.sin(fx * xx + fy * yy + ph)
        tex = tex / 3.0
        colors = rng.uniform(0.6, 1.4, size=3)
        return np.clip(level * (1.0 + 0.6 * tex[..., None] * colors) * tint, 0.0, 1.0)
    noise = ndimage.gaussian_filter(rng.normal(size=(n, n, 3)), sigma=(2.5, 2.5, 0))
    noise /= noise.std() + 1e-12
    return np.clip(level * (1.0 + 0.4 * noise) * tint, 0.0, 1.0)


def render(skeleton: Skeleton, domain: DomainConfig, rng: np.random.Generator) -> Sample:
    n = domain.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    px = np.stack([xx, yy], axis=-1)
    shade = np.zeros((n, n))
    mask = np.zeros((n, n), dtype=bool)
    j = skeleton.joints
    for bone in BONES:
        r = _bone_radius(bone, skeleton.scale)
        d, _ = _segment_distance(px, j[bone[0]], j[bone[1]])
        inside = d <= r
        mask |= inside
        shade = np.maximum(shade, np.where(inside, np.sqrt(np.clip(1.0 - (d / r) ** 2, 0.0, 1.0)), 0.0))
    skin = np.array([0.92, 0.68, 0.55]) * rng.uniform(0.85, 1.1)
    hand = skin * (0.55 + 0.45 * shade[..., None])
    image = np.where(mask[..., None], hand, _background(rng, domain))
    image = image * rng.uniform(*domain.light_gain_range) + rng.uniform(*domain.light_bias_range)
    if domain.noise_sigma > 0:
        image = image + rng.normal(0.0, domain.noise_sigma, size=image.shape)
    lo, hi = domain.occluder_count_range
    for _ in range(int(rng.integers(lo, hi + 1))):
        # occluders land near the hand so they can hide joints
        c = j[rng.integers(1, NUM_JOINTS)] + rng.normal(0.0, 2.0, size=2)
        rad = rng.uniform(*domain.occluder_radius_range)
        disc = (xx - c[0]) ** 2 + (yy - c[1]) ** 2 <= rad * rad
        image = np.where(disc[..., None], rng.uniform(0.05, 0.9, size=3), image)
    return Sample(image=np.clip(image, 0.0, 1.0), mask=mask.astype(np.uint8), keypoints=j.copy())


def generate(domain: DomainConfig, index: int) -> Sample:
    """Sample ``index`` of a domain; a pure function of (domain, index)."""
    rng = np.random.default_rng([domain.seed, index])
    sk = sample_skeleton(rng, domain)
    return render(sk, domain, rng)


@dataclass
class HandDataset:
    images: np.ndarray     # (N, H, W, 3) float32
    masks: np.ndarray      # (N, H, W) uint8
    keypoints: np.ndarray  # (N, 21, 2) float32
    domain: DomainConfig

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i].astype(np.float64), self.masks[i], self.keypoints[i].astype(np.float64))

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = np.asarray(idx)
        return (self.images[idx].astype(np.float64), self.masks[idx].astype(np.float64),
                self.keypoints[idx].astype(np.float64))


def build_dataset(domain: DomainConfig, n: int, offset: int = 0) -> HandDataset:
    """In-memory dataset of samples ``offset .. offset+n-1``, stored at the on-disk precisions."""
    if n <= 0:
        raise ValueError("n must be positive")
    domain.validate()
    samples = [generate(domain, offset + i) for i in range(n)]
    return HandDataset(
        images=np.stack([s.image for s in samples]).astype(np.float32),
        masks=np.stack([s.mask for s in samples]).astype(np.uint8),
        keypoints=np.stack([s.keypoints for s in samples]).astype(np.float32),
        domain=domain,
    )


FORMAT_VERSION = 1


def save_dataset(ds: HandDataset, out_dir: str | Path, offset: int = 0) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n, h, w, c = ds.images.shape
    meta = {
        "format_version": FORMAT_VERSION,
        "count": n,
        "offset": offset,
        "image_shape": [h, w, c],
        "num_joints": ds.keypoints.shape[1],
        "files": {"images": "images.f32", "masks": "masks.u8", "keypoints": "keypoints.f32"},
        "dtypes": {"images": "<f4", "masks": "u1", "keypoints": "<f4"},
        "domain": ds.domain.to_dict(),
        "seed": ds.domain.seed,
    }
    ds.images.astype("<f4").tofile(out / "images.f32")
    ds.masks.astype("u1").tofile(out / "masks.u8")
    ds.keypoints.astype("<f4").tofile(out / "keypoints.f32")
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out


def make_dataset(domain: DomainConfig, n: int, out_dir: str | Path, offset: int = 0) -> HandDataset:
    ds = build_dataset(domain, n, offset)
    save_dataset(ds, out_dir, offset)
    return ds


def load_dataset(path: str | Path, mmap: bool = False) -> HandDataset:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported dataset format {meta.get('format_version')}")
    n = meta["count"]
    h, w, c = meta["image_shape"]
    k = meta["num_joints"]
    mode = "r" if mmap else None

    def read(name, dtype, shape):
        f = path / meta["files"][name]
        if mmap:
            return np.memmap(f, dtype=dtype, mode=mode, shape=shape)
        return np.fromfile(f, dtype=dtype).reshape(shape)

    dom = meta["domain"]
    dom = {key: tuple(v) if isinstance(v, list) else v for key, v in dom.items()}
    return HandDataset(
        images=read("images", "<f4", (n, h, w, c)),
        masks=read("masks", "u1", (n, h, w)),
        keypoints=read("keypoints", "<f4", (n, k, 2)),
        domain=replace(DomainConfig(), **dom),
    )


def bone_lengths(coords: np.ndarray, group: str) -> np.ndarray:
    """Lengths of the bones in ``group`` for an (N, 21, 2) batch, flattened."""
    if group not in BONE_GROUPS:
        raise ValueError(f"unknown bone group {group!r}")
    c = np.asarray(coords, dtype=np.float64).reshape(-1, NUM_JOINTS, 2)
    pairs = np.array(BONE_GROUPS[group])
    return np.linalg.norm(c[:, pairs[:, 1]] - c[:, pairs[:, 0]], axis=-1).reshape(-1)
