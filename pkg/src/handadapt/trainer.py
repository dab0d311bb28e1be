"""Source pre-training and target adaptation (C-GAC and its baselines).

All adaptation methods share one step function (``adapt_step``); they differ in how
many teachers exist, how teachers are updated (distillation, EMA, frozen),
what the student's consistency target is and how it is weighted.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import augment
from .augment import AugConfig
from .autodiff import AdamState
from .losses import (LossWeights, confidence_weight, disagreement, ensemble, loss_cgac,
                     loss_distill, loss_gac, loss_task)
from .nethead import ArchConfig, NetParams, Prediction, build_network, encode_heatmaps, forward
from .synthhands import HandDataset

log = logging.getLogger(__name__)

METHODS = ("source_only", "gac", "gac_uma", "gac_mt", "gac_distill", "cgac")
STREAMS = ("source-batch", "target-batch-student", "target-batch-teacher1", "target-batch-teacher2",
           "augmentation", "dropout")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    method: str = "cgac"
    tasks: str = "both"
    seed: int = 0
    # the paper's 1e-5 / 5e-6 are for a large pretrained hourglass; these keep the 1:2 ratio
    lr_source: float = 2e-3
    lr_student: float = 2e-4
    lr_teacher: float = 1e-4
    source_steps: int = 1500
    adapt_steps: int = 2000
    batch_source: int = 8
    batch_target: int = 8
    stage_switch_step: int | None = None   # default: 30% of adapt_steps
    ema_alpha: float = 0.99
    weights: LossWeights = field(default_factory=lambda: LossWeights(pose_scale=1e-4))
    source_aug: str | None = None          # label-preserving augmentation during source pre-training
    student_aug: str = "strong"
    teacher_aug: str = "weak"
    consistency_weight: float = 1.0
    dropout_rate: float = 0.2
    dropout_forwards: int = 4
    # test hooks
    teacher_update: str | None = None      # override: distill | ema | frozen
    sync_teachers: bool = False
    w_override: float | None = None

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.tasks not in ("both", "pose_only", "mask_only"):
            raise ValueError(f"unknown tasks {self.tasks!r}")
        if self.lr_teacher > self.lr_student:
            raise ValueError("lr_teacher must not exceed lr_student")
        if min(self.lr_source, self.lr_student, self.lr_teacher) <= 0:
            raise ValueError("learning rates must be positive")
        if self.source_steps < 0 or self.adapt_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.batch_source <= 0 or self.batch_target <= 0:
            raise ValueError("batch sizes must be positive")
        if self.switch_step > max(self.adapt_steps, 0):
            raise ValueError("stage_switch_step exceeds adapt_steps")
        if not 0 <= self.ema_alpha <= 1:
            raise ValueError("ema_alpha must lie in [0, 1]")
        if self.source_aug not in (None, "weak", "strong"):
            raise ValueError(f"unknown source_aug {self.source_aug!r}")
        if self.teacher_update not in (None, "distill", "ema", "frozen"):
            raise ValueError(f"unknown teacher_update {self.teacher_update!r}")

    @property
    def switch_step(self) -> int:
        if self.stage_switch_step is not None:
            return self.stage_switch_step
        return int(round(0.3 * self.adapt_steps))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named random streams derived from one seed."""
    return {name: np.random.default_rng([seed, i]) for i, name in enumerate(STREAMS)}


@dataclass
class Member:
    params: NetParams
    opt: AdamState = field(default_factory=AdamState)

    def copy(self) -> "Member":
        return Member(self.params.copy(), self.opt.copy())


@dataclass
class TrainerState:
    student: Member
    teacher1: Member | None = None
    teacher2: Member | None = None
    step: int = 0
    stage: str = "pose_only"
    streams: dict = field(default_factory=dict)
    method: str = "cgac"

    @property
    def teachers(self) -> list[Member]:
        return [t for t in (self.teacher1, self.teacher2) if t is not None]


@dataclass
class AdaptResult:
    state: TrainerState
    logs: list[dict]


# helpers ------------------------------------------------------------------------

def heatmap_targets(keypoints: np.ndarray, arch: ArchConfig) -> np.ndarray:
    g = arch.grid_size
    return np.stack([encode_heatmaps(k, arch.sigma, (g, g), arch.image_size)[0] for k in keypoints])


def _grad_step(member: Member, loss_fn, lr: float, frozen=()) -> float:
    try:
        value, grads = ad.grad(loss_fn, member.params.blocks)
    except ad.NonFiniteError as exc:
        raise TrainingDiverged(str(exc)) from exc
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value}")
    new, _ = ad.adam_step(member.params.blocks, grads, member.opt, lr, frozen=frozen)
    member.params = NetParams(member.params.arch, new)
    return value


def stage_schedule(step: int, config: TrainConfig, params: NetParams) -> tuple[str, set[str]]:
    """Stage name and the set of frozen parameter blocks at ``step``.

    Before the switch only the backbone and pose branch adapt; with
    tasks=pose_only the mask branch never trains."""
    if config.tasks == "pose_only":
        return "pose_only", set(params.branch("mask"))
    if config.tasks == "mask_only":
        return "full", set(params.branch("pose"))
    if step < config.switch_step:
        return "pose_only", set(params.branch("mask"))
    return "full", set()


def ema_update(teacher: NetParams, student: NetParams, alpha: float) -> NetParams:
    """teacher <- alpha * teacher + (1 - alpha) * student, per block."""
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    if set(teacher.blocks) != set(student.blocks):
        raise ad.ShapeError("ema_update: parameter sets differ")
    out = {}
    for k, t in teacher.blocks.items():
        s = student.blocks[k]
        if t.shape != s.shape:
            raise ad.ShapeError(f"ema_update: {k} has shapes {t.shape} vs {s.shape}")
        out[k] = alpha * t + (1.0 - alpha) * s
    return NetParams(teacher.arch, out)


def dropout_confidence(params: NetParams, images: np.ndarray, n_forwards: int, drop_rate: float,
                       weights: LossWeights | None = None, rng: np.random.Generator | None = None,
                       tasks: str = "both") -> tuple[np.ndarray, np.ndarray]:
    """UMA-like confidence: per-instance variance over ``n_forwards`` dropout
    forwards, squashed with 2(1 - sigmoid(lambda_d * v)). Returns (weights, variances)."""
    if n_forwards < 2:
        raise ValueError("n_forwards must be >= 2")
    weights = weights or LossWeights()
    rng = rng or np.random.default_rng(0)
    x = np.asarray(images, dtype=np.float64)
    x = x[None] if x.ndim == 3 else x
    hs, ms = [], []
    with ad.no_grad():
        for _ in range(n_forwards):
            p = forward(params, x, dropout=(rng, drop_rate) if drop_rate > 0 else None)
            hs.append(p.heatmaps.data)
            ms.append(p.mask_prob.data)
    n = len(x)
    v = np.zeros(n)
    if tasks != "mask_only":
        v += weights.pose * np.var(np.stack(hs), axis=0, ddof=1).reshape(n, -1).mean(axis=1)
    if tasks != "pose_only":
        v += weights.lambda_m_tilde * np.var(np.stack(ms), axis=0, ddof=1).reshape(n, -1).mean(axis=1)
    return confidence_weight(v, weights.lambda_d), v


def infer(state: TrainerState, images: np.ndarray) -> Prediction:
    """Final prediction: teacher ensemble, the single teacher, or the student."""
    x = np.asarray(images, dtype=np.float64)
    with ad.no_grad():
        if state.teacher1 is not None and state.teacher2 is not None:
            return ensemble(forward(state.teacher1.params, x), forward(state.teacher2.params, x))
        if state.teacher1 is not None:
            return forward(state.teacher1.params, x)
        return forward(state.student.params, x)


def inference_params(state: TrainerState) -> list[NetParams]:
    if state.teacher1 is not None and state.teacher2 is not None:
        return [state.teacher1.params, state.teacher2.params]
    if state.teacher1 is not None:
        return [state.teacher1.params]
    return [state.student.params]


# source training -----------------------------------------------------------------

def augment_labelled(augs, images: np.ndarray, masks: np.ndarray, keypoints: np.ndarray, image_size: int
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Warp images together with their masks and keypoints."""
    x = augment.apply_image_batch(augs, images)
    m = np.stack([augment.apply_spatial(a, mi, image_size, binary=True) for a, mi in zip(augs, masks)])
    k = np.stack([augment.apply_keypoints(a, ki, image_size)[0] for a, ki in zip(augs, keypoints)])
    return x, m, k


def train_source(config: TrainConfig, source: HandDataset, arch: ArchConfig | None = None,
                 init: NetParams | None = None, aug_cfg: AugConfig | None = None) -> tuple[NetParams, list[dict]]:
    """Minimise the supervised multi-task loss on labelled source data with Adam,
    optionally on label-preserving augmentations of each batch."""
    config.validate()
    arch = arch or (init.arch if init is not None else ArchConfig())
    aug_cfg = aug_cfg or AugConfig()
    params = init.copy() if init is not None else build_network(arch, seed=config.seed)
    member = Member(params)
    streams = make_streams(config.seed)
    rng = streams["source-batch"]
    logs = []
    for step in range(config.source_steps):
        idx = rng.choice(len(source), size=min(config.batch_source, len(source)), replace=False)
        x, m, k = source.batch(idx)
        if config.source_aug is not None:
            augs = _sample_augs(streams["augmentation"], len(x), config.source_aug, aug_cfg, arch)
            x, m, k = augment_labelled(augs, x, m, k, arch.image_size)
        labels = {"heatmaps": heatmap_targets(k, arch), "masks": m}

        def lf(p):
            return loss_task(forward(p, x, arch), labels, config.weights, config.tasks)

        frozen = stage_schedule(config.switch_step, config, member.params)[1] if config.tasks != "both" else ()
        try:
            value = _grad_step(member, lf, config.lr_source, frozen)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"source training diverged at step {step}: {exc}") from exc
        logs.append({"step": step, "L_task": value})
        if step % 250 == 0:
            log.info("source step %d  L_task %.5f", step, value)
    return member.params, logs


# adaptation ---------------------------------------------------------------------

@dataclass(frozen=True)
class _Plan:
    n_teachers: int
    teacher_update: str   # distill | ema | frozen | none
    confidence: str       # disagreement | dropout | none
    student_target: str   # teacher | self | none


def _plan(config: TrainConfig) -> _Plan:
    plans = {
        "source_only": _Plan(0, "none", "none", "none"),
        "gac": _Plan(0, "none", "none", "self"),
        "gac_uma": _Plan(0, "none", "dropout", "self"),
        "gac_mt": _Plan(1, "ema", "none", "teacher"),
        "gac_distill": _Plan(1, "distill", "none", "teacher"),
        "cgac": _Plan(2, "distill", "disagreement", "teacher"),
    }
    p = plans[config.method]
    if config.teacher_update is not None and p.n_teachers:
        p = replace(p, teacher_update=config.teacher_update)
    return p


def init_state(config: TrainConfig, init: NetParams) -> TrainerState:
    plan = _plan(config)
    st = TrainerState(student=Member(init.copy()), streams=make_streams(config.seed), method=config.method)
    if plan.n_teachers >= 1:
        st.teacher1 = Member(init.copy())
    if plan.n_teachers == 2:
        st.teacher2 = Member(init.copy())
    return st


def _target_batch(rng: np.random.Generator, target: HandDataset, n: int) -> np.ndarray:
    idx = rng.choice(len(target), size=min(n, len(target)), replace=False)
    return target.images[idx].astype(np.float64)


def _sample_augs(rng, n, strength, aug_cfg, arch):
    return [augment.sample_aug(rng, strength, aug_cfg, arch.image_size) for _ in range(n)]


def adapt_step(state: TrainerState, config: TrainConfig, source: HandDataset, target: HandDataset,
               aug_cfg: AugConfig | None = None) -> dict:
    """One interleaved step: student, then teacher 1, then teacher 2."""
    plan = _plan(config)
    aug_cfg = aug_cfg or AugConfig()
    arch = state.student.params.arch
    streams = state.streams
    step = state.step
    stage, frozen = stage_schedule(step, config, state.student.params)
    state.stage = stage
    tasks = "pose_only" if stage == "pose_only" else config.tasks
    row = {"step": step, "stage": stage}

    # (a) student
    idx = streams["source-batch"].choice(len(source), size=min(config.batch_source, len(source)), replace=False)
    xs, ms, ks = source.batch(idx)
    labels = {"heatmaps": heatmap_targets(ks, arch), "masks": ms}
    use_cons = plan.student_target != "none" and config.consistency_weight > 0
    if use_cons:
        xt = _target_batch(streams["target-batch-student"], target, config.batch_target)
        augs = _sample_augs(streams["augmentation"], len(xt), config.student_aug, aug_cfg, arch)
        xa = augment.apply_image_batch(augs, xt)
        w = np.ones(len(xt))
        ens = None
        if plan.student_target == "teacher":
            with ad.no_grad():
                preds = [forward(t.params, xt) for t in state.teachers]
            if len(preds) == 2:
                d = disagreement(preds[0], preds[1], config.weights, tasks)
                if plan.confidence == "disagreement":
                    w = np.atleast_1d(confidence_weight(d, config.weights.lambda_d))
                row["disagree_mean"] = float(np.mean(d))
                ens = ensemble(preds[0], preds[1])
            else:
                ens = preds[0]
        elif plan.confidence == "dropout":
            w, _ = dropout_confidence(state.student.params, xt, config.dropout_forwards, config.dropout_rate,
                                      config.weights, streams["dropout"], tasks)
        if config.w_override is not None:
            w = np.full(len(xt), float(config.w_override))
        row.update(w_mean=float(w.mean()), w_min=float(w.min()), w_max=float(w.max()))

    parts = {}

    def student_loss(p):
        lt = loss_task(forward(p, xs, arch), labels, config.weights, config.tasks)
        parts["L_task"] = float(lt.data)
        if not use_cons:
            return lt
        if ens is not None:
            lc = loss_cgac(p, ens, w, xt, augs, config.weights, arch, tasks, aug_images=xa)
        else:
            lc = loss_gac(p, xt, augs, config.weights, arch, tasks=tasks, aug_images=xa, instance_weight=w)
        parts["L_cons"] = float(lc.data)
        if config.consistency_weight != 1.0:
            lc = ad.scale(lc, config.consistency_weight)
        return ad.add(lt, lc)

    try:
        _grad_step(state.student, student_loss, config.lr_student, frozen)
    except TrainingDiverged as exc:
        raise TrainingDiverged(f"student update diverged at step {step}: {exc}") from exc
    row.update(parts)

    # (b), (c) teachers
    if plan.teacher_update == "ema":
        for t in state.teachers:
            t.params = ema_update(t.params, state.student.params, config.ema_alpha)
    elif plan.teacher_update == "distill":
        names = ("target-batch-teacher1", "target-batch-teacher2")
        for i, t in enumerate(state.teachers):
            if i == 1 and config.sync_teachers:
                state.teacher2 = state.teacher1.copy()
                row["L_distill2"] = row.get("L_distill1")
                break
            xt_i = _target_batch(streams[names[i]], target, config.batch_target)
            augs_i = _sample_augs(streams["augmentation"], len(xt_i), config.teacher_aug, aug_cfg, arch)
            xa_i = augment.apply_image_batch(augs_i, xt_i)
            with ad.no_grad():
                sp = forward(state.student.params, xa_i)

            def teacher_loss(p, sp=sp, xt_i=xt_i, augs_i=augs_i, xa_i=xa_i):
                return loss_distill(p, sp, xt_i, augs_i, config.weights, arch, tasks, aug_images=xa_i)

            try:
                row[f"L_distill{i + 1}"] = _grad_step(t, teacher_loss, config.lr_teacher, frozen)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"teacher{i + 1} update diverged at step {step}: {exc}") from exc
    state.step += 1
    return row


def adapt(config: TrainConfig, source: HandDataset, target: HandDataset, init: NetParams,
          aug_cfg: AugConfig | None = None, state: TrainerState | None = None, log_every: int = 250) -> AdaptResult:
    """Run ``config.adapt_steps`` adaptation steps of ``config.method``."""
    config.validate()
    state = state or init_state(config, init)
    logs = []
    for _ in range(config.adapt_steps - state.step):
        row = adapt_step(state, config, source, target, aug_cfg)
        logs.append(row)
        if row["step"] % log_every == 0:
            log.info("%s step %d %s", config.method, row["step"],
                     {k: round(v, 5) for k, v in row.items() if isinstance(v, float)})
    return AdaptResult(state, logs)


def adapt_gac(config, source, target, init, aug_cfg=None) -> AdaptResult:
    return adapt(replace(config, method="gac"), source, target, init, aug_cfg)


def adapt_gac_mt(config, source, target, init, aug_cfg=None) -> AdaptResult:
    return adapt(replace(config, method="gac_mt"), source, target, init, aug_cfg)


def adapt_gac_distill(config, source, target, init, aug_cfg=None) -> AdaptResult:
    return adapt(replace(config, method="gac_distill"), source, target, init, aug_cfg)


def adapt_uma(config, source, target, init, aug_cfg=None) -> AdaptResult:
    return adapt(replace(config, method="gac_uma"), source, target, init, aug_cfg)


LOG_FIELDS = ("step", "stage", "L_task", "L_cons", "L_distill1", "L_distill2", "w_mean", "w_min", "w_max",
              "disagree_mean")


def write_log_csv(rows: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
