"""Task, consistency, disagreement and distillation losses.

Every consistency-style loss has the form ``sum_k lam_k * L_k(pred, target)``
with smooth L1 on heatmaps (k = pose) and MSE on mask probabilities
(k = mask), averaged per instance and then over the batch.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import augment
from .autodiff import Tensor
from .nethead import ArchConfig, Prediction, decode_keypoints, forward

TASKS = ("both", "pose_only", "mask_only")


@dataclass(frozen=True)
class LossWeights:
    """Pose weight (shared by the supervised and consistency terms), mask task
    weight, mask consistency weight, disagreement scale.

    ``pose_scale`` multiplies ``lambda_p`` so the paper-scale value can be
    retuned to the heatmap-loss magnitude of a smaller network.
    """

    lambda_p: float = 1e7
    lambda_m: float = 1e2
    lambda_m_tilde: float = 5.0
    lambda_d: float = 0.5
    pose_scale: float = 1.0

    def __post_init__(self):
        for name in ("lambda_p", "lambda_m", "lambda_m_tilde", "lambda_d", "pose_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"LossWeights.{name} must be > 0")

    @property
    def pose(self) -> float:
        return self.lambda_p * self.pose_scale

    def scaled_consistency(self, c: float) -> "LossWeights":
        """Scale both consistency weights by ``c``."""
        return LossWeights(self.lambda_p * c, self.lambda_m, self.lambda_m_tilde * c, self.lambda_d, self.pose_scale)

    def to_dict(self) -> dict:
        return asdict(self)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_tasks(tasks: str) -> None:
    if tasks not in TASKS:
        raise ValueError(f"tasks must be one of {TASKS}, got {tasks!r}")


def _weighted_mean(elem: Tensor, weight: np.ndarray | None) -> Tensor:
    if weight is None:
        return ad.mean(elem)
    return ad.mean(ad.mul(elem, Tensor(np.broadcast_to(weight, elem.shape))))


def smooth_l1(pred, target, beta: float = 1.0, weight: np.ndarray | None = None) -> Tensor:
    """Mean smooth L1 (0.5 d^2 below ``beta``, |d| - 0.5 beta above)."""
    pred, target = _t(pred), _t(target)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"smooth_l1: shape mismatch {pred.shape} vs {target.shape}")
    return _weighted_mean(ad.smooth_l1(ad.sub(pred, target), beta), weight)


def mse(pred, target, weight: np.ndarray | None = None) -> Tensor:
    pred, target = _t(pred), _t(target)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    return _weighted_mean(ad.square(ad.sub(pred, target)), weight)


def bce(logits, target) -> Tensor:
    """Mean binary cross-entropy from logits."""
    target = np.asarray(target, dtype=np.float64)
    if not np.all((target == 0) | (target == 1)):
        raise ValueError("bce: targets must be 0 or 1")
    return ad.mean(ad.bce_with_logits(_t(logits), target))


def loss_task(pred: Prediction, labels: dict, weights: LossWeights, tasks: str = "both") -> Tensor:
    """Supervised multi-task loss: lam_p * smoothL1(heatmaps) + lam_m * BCE(mask)."""
    _check_tasks(tasks)
    for key in ("heatmaps", "masks"):
        if key not in labels or labels[key] is None:
            raise KeyError(f"loss_task: missing label {key!r}")
    terms = []
    if tasks != "mask_only":
        terms.append(ad.scale(smooth_l1(pred.heatmaps, labels["heatmaps"]), weights.pose))
    if tasks != "pose_only":
        terms.append(ad.scale(bce(pred.mask_logits, labels["masks"]), weights.lambda_m))
    return terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])


def consistency(pred: Prediction, target_heatmaps: np.ndarray, target_mask_prob: np.ndarray,
                weights: LossWeights, instance_weight: np.ndarray | None = None,
                joint_valid: np.ndarray | None = None, tasks: str = "both") -> Tensor:
    """sum_k lam~_k L~_k(pred, target), targets held constant.

    ``instance_weight`` (N,) multiplies each instance's term; ``joint_valid``
    (N, K) drops heatmap channels of out-of-frame joints.
    """
    _check_tasks(tasks)
    n = pred.heatmaps.shape[0]
    iw = np.ones(n) if instance_weight is None else np.asarray(instance_weight, dtype=np.float64).reshape(n)
    terms = []
    if tasks != "mask_only":
        w = iw[:, None, None, None]
        if joint_valid is not None:
            w = w * np.asarray(joint_valid, dtype=np.float64)[:, :, None, None]
        terms.append(ad.scale(smooth_l1(pred.heatmaps, target_heatmaps, weight=w), weights.pose))
    if tasks != "pose_only":
        terms.append(ad.scale(mse(pred.mask_prob, target_mask_prob, weight=iw[:, None, None]), weights.lambda_m_tilde))
    return terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])


def _as_list(augs, n: int) -> list:
    if isinstance(augs, augment.AugPair):
        return [augs] * n
    augs = list(augs)
    if len(augs) != n:
        raise ValueError(f"expected {n} augmentations, got {len(augs)}")
    return augs


def _batch(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    return x[None] if x.ndim == 3 else x


def warp_targets(heatmaps: np.ndarray, mask_prob: np.ndarray, augs, arch: ArchConfig
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Apply T_y to (constant) predictions. Returns warped heatmaps, warped
    mask probabilities and per-joint in-frame flags after the warp."""
    coords, _ = decode_keypoints(heatmaps, arch.temperature, arch.image_size)
    th, tm, valid = [], [], []
    for a, h, m, c in zip(augs, heatmaps, mask_prob, coords):
        th.append(augment.apply_spatial(a, h, arch.image_size))
        tm.append(augment.apply_spatial(a, m, arch.image_size))
        valid.append(augment.apply_keypoints(a, c, arch.image_size)[1])
    return np.stack(th), np.stack(tm), np.stack(valid)


def loss_gac(params, target_images, augs, weights: LossWeights, arch: ArchConfig | None = None,
             target_params=None, tasks: str = "both", aug_images: np.ndarray | None = None,
             instance_weight: np.ndarray | None = None) -> Tensor:
    """Geometric augmentation consistency: the prediction on T_x(x) is pulled
    toward T_y(prediction on x). The unaugmented branch is wrapped in
    stop_gradient; ``target_params`` (default ``params``) produces it."""
    arch = arch or getattr(params, "arch", None) or ArchConfig()
    x = _batch(target_images)
    augs = _as_list(augs, len(x))
    clean = forward(params if target_params is None else target_params, x, arch)
    hm = ad.stop_gradient(clean.heatmaps).data
    mp = ad.stop_gradient(clean.mask_prob).data
    th, tm, valid = warp_targets(hm, mp, augs, arch)
    xa = augment.apply_image_batch(augs, x) if aug_images is None else aug_images
    pred_aug = forward(params, xa, arch)
    return consistency(pred_aug, th, tm, weights, instance_weight=instance_weight, joint_valid=valid, tasks=tasks)


def disagreement(pred_t1: Prediction, pred_t2: Prediction, weights: LossWeights, tasks: str = "both"):
    """Per-instance sum_k lam~_k L~_k(p_t1, p_t2), outside any gradient graph.

    Returns a float for a single instance, else an (N,) array.
    """
    _check_tasks(tasks)
    h1, h2 = np.asarray(pred_t1.heatmaps.data), np.asarray(pred_t2.heatmaps.data)
    m1, m2 = np.asarray(pred_t1.mask_prob.data), np.asarray(pred_t2.mask_prob.data)
    n = h1.shape[0]
    out = np.zeros(n)
    if tasks != "mask_only":
        d = np.abs(h1 - h2)
        elem = np.where(d < 1.0, 0.5 * d * d, d - 0.5)
        out += weights.pose * elem.reshape(n, -1).mean(axis=1)
    if tasks != "pose_only":
        out += weights.lambda_m_tilde * ((m1 - m2) ** 2).reshape(n, -1).mean(axis=1)
    return float(out[0]) if n == 1 else out


def confidence_weight(disagreement_value, lambda_d: float = 0.5):
    """w = 2 (1 - sigmoid(lambda_d * disagreement)); 1 at zero, -> 0 as it grows."""
    d = np.asarray(disagreement_value, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("disagreement must be non-negative")
    # 2(1 - sigm(z)) = 2 sigm(-z)
    w = 2.0 * np.exp(-np.logaddexp(0.0, lambda_d * d))
    return float(w) if w.ndim == 0 else w


def ensemble(pred_t1: Prediction, pred_t2: Prediction) -> Prediction:
    """Elementwise mean of two predictions (constant, no gradient)."""
    for a, b in ((pred_t1.heatmaps, pred_t2.heatmaps), (pred_t1.mask_prob, pred_t2.mask_prob)):
        if a.shape != b.shape:
            raise ad.ShapeError(f"ensemble: shape mismatch {a.shape} vs {b.shape}")
    hm = (pred_t1.heatmaps.data + pred_t2.heatmaps.data) / 2.0
    mp = (pred_t1.mask_prob.data + pred_t2.mask_prob.data) / 2.0
    mp_c = np.clip(mp, 1e-12, 1 - 1e-12)
    return Prediction(Tensor(hm), Tensor(np.log(mp_c) - np.log1p(-mp_c)), Tensor(mp))


def loss_cgac(student_params, pred_ens: Prediction, w_t, target_images, augs, weights: LossWeights,
              arch: ArchConfig | None = None, tasks: str = "both", aug_images: np.ndarray | None = None) -> Tensor:
    """Confidence-weighted consistency between the student on T_x(x) and
    T_y(teacher ensemble on x)."""
    arch = arch or getattr(student_params, "arch", None) or ArchConfig()
    x = _batch(target_images)
    augs = _as_list(augs, len(x))
    w = np.broadcast_to(np.asarray(w_t, dtype=np.float64), (len(x),))
    if np.any(w < 0) or np.any(w > 1):
        raise ValueError("w_t must lie in [0, 1]")
    th, tm, valid = warp_targets(np.asarray(pred_ens.heatmaps.data), np.asarray(pred_ens.mask_prob.data), augs, arch)
    xa = augment.apply_image_batch(augs, x) if aug_images is None else aug_images
    pred_aug = forward(student_params, xa, arch)
    return consistency(pred_aug, th, tm, weights, instance_weight=w, joint_valid=valid, tasks=tasks)


def loss_distill(teacher_params, student_pred_on_aug: Prediction, target_images, augs, weights: LossWeights,
                 arch: ArchConfig | None = None, tasks: str = "both", aug_images: np.ndarray | None = None) -> Tensor:
    """Teacher on T_x(x) matches the (detached) student prediction on the same
    augmented image; only the teacher receives gradients."""
    arch = arch or getattr(teacher_params, "arch", None) or ArchConfig()
    x = _batch(target_images)
    augs = _as_list(augs, len(x))
    xa = augment.apply_image_batch(augs, x) if aug_images is None else aug_images
    pred_t = forward(teacher_params, xa, arch)
    hs = ad.stop_gradient(student_pred_on_aug.heatmaps).data
    ms = ad.stop_gradient(student_pred_on_aug.mask_prob).data
    return consistency(pred_t, hs, ms, weights, tasks=tasks)
