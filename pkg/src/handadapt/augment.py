"""Paired augmentations: one geometric affine map shared by image and labels,
photometric jitter applied to images only."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugConfig:
    rotation_weak: float = 30.0
    rotation_strong: float = 45.0
    translate_frac: float = 0.10
    flip_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.0, 1.2)
    brightness: tuple[float, float] = (0.7, 1.3)
    contrast: tuple[float, float] = (0.7, 1.3)
    hue_shift: float = 0.05
    saturation: tuple[float, float] = (0.7, 1.3)
    cutout_max_boxes: int = 2
    cutout_max_area: float = 0.25

    def validate(self) -> None:
        for name in ("blur_sigma", "brightness", "contrast", "saturation"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"aug_config.{name}: invalid range {lo, hi}")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("aug_config.flip_prob must lie in [0, 1]")
        if self.rotation_weak < 0 or self.rotation_strong < 0 or self.translate_frac < 0:
            raise ValueError("aug_config: rotation/translation ranges must be non-negative")
        if not 0 <= self.cutout_max_area <= 1 or self.cutout_max_boxes < 0:
            raise ValueError("aug_config: invalid cutout settings")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Geometric:
    flip: bool = False
    rotation_deg: float = 0.0
    translate_px: tuple[float, float] = (0.0, 0.0)

    @property
    def is_identity(self) -> bool:
        return not self.flip and self.rotation_deg == 0.0 and self.translate_px == (0.0, 0.0)


@dataclass(frozen=True)
class Photometric:
    blur_sigma: float = 0.0
    brightness_gain: float = 1.0
    contrast_gain: float = 1.0
    hue_shift: float = 0.0
    saturation_gain: float = 1.0
    cutout_boxes: tuple[tuple[int, int, int, int], ...] = ()  # (x0, y0, w, h)

    @property
    def is_identity(self) -> bool:
        return self == Photometric()


@dataclass(frozen=True)
class AugPair:
    geometric: Geometric = field(default_factory=Geometric)
    photometric: Photometric = field(default_factory=Photometric)
    strength: str = "weak"

    @property
    def is_identity(self) -> bool:
        return self.geometric.is_identity and self.photometric.is_identity


IDENTITY = AugPair()


def sample_aug(rng: np.random.Generator, strength: str = "weak", cfg: AugConfig | None = None,
               image_size: int = 32) -> AugPair:
    """Draw one paired augmentation. Weak: flip, rotation, translation, blur.
    Strong adds brightness/contrast, hue/saturation jitter and cutout."""
    cfg = cfg or AugConfig()
    if strength not in ("weak", "strong"):
        raise ValueError(f"unknown augmentation strength {strength!r}")
    rot = cfg.rotation_strong if strength == "strong" else cfg.rotation_weak
    tmax = cfg.translate_frac * image_size
    geo = Geometric(
        flip=bool(rng.random() < cfg.flip_prob),
        rotation_deg=float(rng.uniform(-rot, rot)),
        translate_px=(float(rng.uniform(-tmax, tmax)), float(rng.uniform(-tmax, tmax))),
    )
    blur = float(rng.uniform(*cfg.blur_sigma))
    if strength == "weak":
        return AugPair(geo, Photometric(blur_sigma=blur), strength)
    boxes = []
    for _ in range(int(rng.integers(0, cfg.cutout_max_boxes + 1))):
        area = rng.uniform(0.02, cfg.cutout_max_area) * image_size * image_size
        aspect = rng.uniform(0.5, 2.0)
        w = int(np.clip(round(np.sqrt(area * aspect)), 1, image_size))
        h = int(np.clip(round(area / max(w, 1)), 1, image_size))
        while w * h > cfg.cutout_max_area * image_size * image_size and h > 1:
            h -= 1
        x0 = int(rng.integers(0, image_size - w + 1))
        y0 = int(rng.integers(0, image_size - h + 1))
        boxes.append((x0, y0, w, h))
    photo = Photometric(
        blur_sigma=blur,
        brightness_gain=float(rng.uniform(*cfg.brightness)),
        contrast_gain=float(rng.uniform(*cfg.contrast)),
        hue_shift=float(rng.uniform(-cfg.hue_shift, cfg.hue_shift)),
        saturation_gain=float(rng.uniform(*cfg.saturation)),
        cutout_boxes=tuple(boxes),
    )
    return AugPair(geo, photo, strength)


# geometry --------------------------------------------------------------------

def affine_matrix(geo: Geometric, width: int, height: int) -> np.ndarray:
    """3x3 forward map on (x, y, 1) pixel coordinates: flip, then rotate
    counterclockwise (in x-right/y-down pixel axes, x' = cx + c*dx - s*dy) about
    the image centre, then translate."""
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    flip = np.eye(3)
    if geo.flip:
        flip = np.array([[-1.0, 0.0, width - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    th = np.deg2rad(geo.rotation_deg)
    c, s = np.cos(th), np.sin(th)
    # exact values at multiples of 90 degrees keep grid-aligned rotations lossless
    if geo.rotation_deg % 90 == 0:
        c, s = float(round(c)), float(round(s))
    rot = np.array([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy], [0.0, 0.0, 1.0]])
    tx, ty = geo.translate_px
    shift = np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    return shift @ rot @ flip


def apply_keypoints(aug: AugPair | Geometric, coords: np.ndarray, image_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Map (..., 2) pixel coordinates through the geometric part.

    Returns (coords, in_frame flags)."""
    geo = aug.geometric if isinstance(aug, AugPair) else aug
    coords = np.asarray(coords, dtype=np.float64)
    a = affine_matrix(geo, image_size, image_size)
    out = coords @ a[:2, :2].T + a[:2, 2]
    inside = np.all((out >= 0) & (out <= image_size - 1), axis=-1)
    return out, inside


def _warp_planes(planes: np.ndarray, a: np.ndarray, order: int = 1) -> np.ndarray:
    """Warp (P, H, W) planes by forward pixel map ``a``; bilinear, zero fill."""
    inv = np.linalg.inv(a)
    # ndimage works on (row, col) = (y, x)
    m = np.array([[inv[1, 1], inv[1, 0]], [inv[0, 1], inv[0, 0]]])
    off = np.array([inv[1, 2], inv[0, 2]])
    out = np.empty_like(planes, dtype=np.float64)
    for i, p in enumerate(planes):
        out[i] = ndimage.affine_transform(p, m, offset=off, order=order, mode="constant", cval=0.0)
    return out


def _grid_matrix(a: np.ndarray, stride: int) -> np.ndarray:
    """Conjugate a pixel-space map into a stride-``stride`` grid (cell centre 2g+0.5 for stride 2)."""
    half = (stride - 1) / 2.0
    to_px = np.array([[stride, 0.0, half], [0.0, stride, half], [0.0, 0.0, 1.0]])
    return np.linalg.inv(to_px) @ a @ to_px


def apply_spatial(aug: AugPair | Geometric, field_: np.ndarray, image_size: int | None = None,
                  binary: bool = False) -> np.ndarray:
    """Geometric-only warp of a (..., H, W) field (mask, probability map or
    heatmap stack). Fields coarser than the image are warped in their own grid."""
    geo = aug.geometric if isinstance(aug, AugPair) else aug
    f = np.asarray(field_, dtype=np.float64)
    if geo.is_identity:
        return f.copy()
    h, w = f.shape[-2:]
    size = image_size or w
    a = affine_matrix(geo, size, size)
    if w != size:
        a = _grid_matrix(a, size // w)
    out = _warp_planes(f.reshape(-1, h, w), a).reshape(f.shape)
    if binary:
        return (out >= 0.5).astype(f.dtype)
    return np.clip(out, 0.0, 1.0) if f.min() >= 0 and f.max() <= 1 else out


def _rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    mx, mn = img.max(axis=-1), img.min(axis=-1)
    d = mx - mn
    safe = np.where(d > 0, d, 1.0)
    hue = np.where(mx == r, ((g - b) / safe) % 6.0, np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    hue = np.where(d > 0, hue / 6.0, 0.0)
    sat = np.where(mx > 0, d / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([hue, sat, mx], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0] * 6.0, hsv[..., 1], hsv[..., 2]
    i = np.floor(h).astype(int) % 6
    f = h - np.floor(h)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    choices = [np.stack(c, axis=-1) for c in ((v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q))]
    out = np.zeros_like(hsv)
    for k in range(6):
        out = np.where((i == k)[..., None], choices[k], out)
    return out


def apply_photometric(photo: Photometric, image: np.ndarray) -> np.ndarray:
    img = image
    if photo.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(photo.blur_sigma, photo.blur_sigma, 0), mode="constant")
    if photo.brightness_gain != 1.0:
        img = img * photo.brightness_gain
    if photo.contrast_gain != 1.0:
        mu = img.mean()
        img = (img - mu) * photo.contrast_gain + mu
    if img.shape[-1] == 3 and (photo.hue_shift != 0.0 or photo.saturation_gain != 1.0):
        hsv = _rgb_to_hsv(np.clip(img, 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + photo.hue_shift) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * photo.saturation_gain, 0.0, 1.0)
        img = _hsv_to_rgb(hsv)
    if photo.cutout_boxes:
        img = img.copy()
        for x0, y0, w, h in photo.cutout_boxes:
            img[y0:y0 + h, x0:x0 + w, :] = 0.0
    return img


def apply_image(aug: AugPair, image: np.ndarray) -> np.ndarray:
    """Warp an H x W x C image (bilinear, zero padding), then photometric ops; result in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if aug.is_identity:
        return img.copy()
    if not aug.geometric.is_identity:
        h, w = img.shape[:2]
        a = affine_matrix(aug.geometric, w, h)
        img = _warp_planes(np.moveaxis(img, -1, 0), a).transpose(1, 2, 0)
    img = apply_photometric(aug.photometric, img)
    return np.clip(img, 0.0, 1.0)


def apply_image_batch(augs, images: np.ndarray) -> np.ndarray:
    return np.stack([apply_image(a, im) for a, im in zip(augs, images)])


def apply_spatial_batch(augs, fields: np.ndarray, image_size: int | None = None) -> np.ndarray:
    return np.stack([apply_spatial(a, f, image_size) for a, f in zip(augs, fields)])
