"""Experiment plumbing: the JSON config schema, dataset splits, checkpoint
I/O and one function per pipeline stage (used by the CLI and the demos)."""
from __future__ import annotations

import dataclasses
import json
import logging
import types
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import evalkit
from .augment import AugConfig
from .losses import LossWeights, disagreement
from .nethead import ArchConfig, NetParams, decode_keypoints, forward, predict
from .synthhands import BONE_GROUPS, DomainConfig, HandDataset, build_dataset, load_dataset, save_dataset, \
    source_domain, target_domain
from .trainer import METHODS, AdaptResult, TrainConfig, adapt, inference_params, train_source, write_log_csv

log = logging.getLogger(__name__)

# sample-index offsets keep the three splits of a domain disjoint
SPLIT_OFFSETS = {"train": 0, "val": 100_000, "test": 200_000}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message starts with the JSON path."""


@dataclass(frozen=True)
class DatasetConfig:
    source: DomainConfig = field(default_factory=source_domain)
    target: DomainConfig = field(default_factory=target_domain)
    n_train: int = 2000
    n_val: int = 300
    n_test: int = 300
    data_dir: str | None = None   # materialised datasets (gen-data); None: build in memory


@dataclass(frozen=True)
class EvalOptions:
    max_threshold: float | None = None   # None: 20 px scaled to the image size
    n_thresholds: int = 20
    n_bins: int = 10
    kde_bandwidth: float = 0.5
    kde_groups: tuple[str, ...] = ("wrist_mcp",)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    output_dir: str = "runs/experiment"

    @property
    def train_config(self) -> TrainConfig:
        """Training settings with the experiment seed applied."""
        return replace(self.train, seed=self.seed)


# strict schema ---------------------------------------------------------------------

def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{path}: null is not allowed")
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(a, value, path)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0])
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}: unknown key")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}") for k, v in data.items()}
    defaults = _defaults(cls, path)
    try:
        obj = replace(defaults, **kwargs) if defaults is not None else cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if hasattr(obj, "validate"):
        try:
            obj.validate()
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return obj


def _defaults(cls, path: str):
    # the two domains start from their own presets, so a partial override stays sensible
    if cls is DomainConfig:
        return target_domain() if path.endswith(".target") else source_domain()
    return None


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "$")


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"$: config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"$: {path} is not valid JSON ({exc})") from exc
    return config_from_dict(data)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    return obj


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _plain(cfg)


# data ------------------------------------------------------------------------------

def _domain(cfg: ExperimentConfig, name: str) -> DomainConfig:
    if name not in ("source", "target"):
        raise ValueError(f"domain must be 'source' or 'target', got {name!r}")
    return getattr(cfg.dataset, name)


def _split_size(cfg: ExperimentConfig, split: str) -> int:
    if split not in SPLIT_OFFSETS:
        raise ValueError(f"split must be one of {tuple(SPLIT_OFFSETS)}, got {split!r}")
    return getattr(cfg.dataset, f"n_{split}")


def data_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.dataset.data_dir) if cfg.dataset.data_dir else Path(cfg.output_dir) / "data"


def get_dataset(cfg: ExperimentConfig, domain: str, split: str) -> HandDataset:
    """Load a materialised split when one matches the config, else build it in memory."""
    dom, n = _domain(cfg, domain), _split_size(cfg, split)
    path = data_dir(cfg) / domain / split
    if (path / "meta.json").exists():
        ds = load_dataset(path)
        if len(ds) == n and ds.domain == dom:
            return ds
        log.warning("%s does not match the config; regenerating in memory", path)
    return build_dataset(dom, n, SPLIT_OFFSETS[split])


def gen_data(cfg: ExperimentConfig, out: str | Path | None = None) -> Path:
    out = Path(out) if out is not None else data_dir(cfg)
    for domain in ("source", "target"):
        for split, offset in SPLIT_OFFSETS.items():
            ds = build_dataset(_domain(cfg, domain), _split_size(cfg, split), offset)
            save_dataset(ds, out / domain / split, offset)
            log.info("wrote %s/%s (%d samples)", domain, split, len(ds))
    return out


# checkpoints -----------------------------------------------------------------------

def save_net(path: str | Path, params: NetParams, **meta) -> Path:
    ad.save_checkpoint(path, params.blocks, {"arch": params.arch.to_dict(), **meta})
    return Path(path)


def load_net(path: str | Path) -> NetParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    blocks, meta = ad.load_checkpoint(path)
    if "arch" not in meta:
        raise ValueError(f"{path}: checkpoint has no architecture record")
    return NetParams(ArchConfig(**meta["arch"]), blocks)


# stages ----------------------------------------------------------------------------

def run_train_source(cfg: ExperimentConfig, out: str | Path | None = None) -> tuple[NetParams, Path]:
    out = Path(out) if out is not None else Path(cfg.output_dir) / "source"
    params, logs = train_source(cfg.train_config, get_dataset(cfg, "source", "train"), cfg.arch, aug_cfg=cfg.aug)
    ckpt = save_net(out / "model.ckpt", params, role="source", seed=cfg.seed)
    write_log_csv(logs, out / "log.csv")
    return params, ckpt


def run_adapt(cfg: ExperimentConfig, method: str, init: NetParams, out: str | Path | None = None,
              write: bool = True) -> AdaptResult:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    tc = replace(cfg.train_config, method=method)
    res = adapt(tc, get_dataset(cfg, "source", "train"), get_dataset(cfg, "target", "train"), init, cfg.aug)
    if write:
        out = Path(out) if out is not None else Path(cfg.output_dir) / "adapt" / method
        st = res.state
        save_net(out / "student.ckpt", st.student.params, role="student", method=method, seed=cfg.seed)
        for i, t in enumerate(st.teachers, start=1):
            save_net(out / f"teacher{i}.ckpt", t.params, role=f"teacher{i}", method=method, seed=cfg.seed)
        write_log_csv(res.logs, out / "log.csv")
    return res


def ensemble_predict(nets: list[NetParams], images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean heatmaps and mask probabilities over ``nets`` (one net: its own output)."""
    outs = [predict(p, images) for p in nets]
    return np.mean([o["heatmaps"] for o in outs], axis=0), np.mean([o["mask_prob"] for o in outs], axis=0)


def evaluate_nets(cfg: ExperimentConfig, nets: list[NetParams], ds: HandDataset,
                  with_disagreement: bool = False) -> evalkit.MetricsRecord:
    arch = nets[0].arch
    x = ds.images.astype(np.float64)
    heat, mask = ensemble_predict(nets, x)
    coords, _ = decode_keypoints(heat, arch.temperature, arch.image_size)
    d = teacher_disagreement(cfg, nets[0], nets[1], x) if with_disagreement and len(nets) == 2 else None
    return evalkit.evaluate(coords, mask, ds.keypoints, ds.masks, arch.image_size, cfg.eval.max_threshold,
                            cfg.eval.n_thresholds, disagreement=d)


def teacher_disagreement(cfg: ExperimentConfig, t1: NetParams, t2: NetParams, images: np.ndarray,
                         batch_size: int = 64) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            xb = images[i:i + batch_size]
            d = disagreement(forward(t1, xb), forward(t2, xb), cfg.train.weights, cfg.train.tasks)
            out.append(np.atleast_1d(d))
    return np.concatenate(out)


def run_eval(cfg: ExperimentConfig, nets: list[NetParams], split: str = "val", domain: str = "target",
             out: str | Path | None = None) -> evalkit.MetricsRecord:
    out = Path(out) if out is not None else Path(cfg.output_dir) / "eval" / f"{domain}_{split}"
    rec = evaluate_nets(cfg, nets, get_dataset(cfg, domain, split))
    evalkit.write_metrics(rec, out)
    return rec


def load_predictions(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Stored predictions: an .npz with ``keypoints`` (N, K, 2) and ``mask_prob`` (N, H, W)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"prediction file {path} not found")
    with np.load(path) as z:
        missing = {"keypoints", "mask_prob"} - set(z.files)
        if missing:
            raise ValueError(f"{path}: missing arrays {sorted(missing)}")
        return z["keypoints"].astype(np.float64), z["mask_prob"].astype(np.float64)


def run_eval_predictions(cfg: ExperimentConfig, pred_path: str | Path, split: str = "val", domain: str = "target",
                         out: str | Path | None = None) -> evalkit.MetricsRecord:
    """Score stored predictions against a split, for models trained elsewhere."""
    out = Path(out) if out is not None else Path(cfg.output_dir) / "eval" / f"{domain}_{split}"
    ds = get_dataset(cfg, domain, split)
    coords, mask = load_predictions(pred_path)
    if coords.shape != ds.keypoints.shape or mask.shape != ds.masks.shape:
        raise ValueError(f"predictions {coords.shape}/{mask.shape} do not match the {domain} {split} split "
                         f"{ds.keypoints.shape}/{ds.masks.shape}")
    rec = evalkit.evaluate(coords, mask, ds.keypoints, ds.masks, ds.domain.image_size, cfg.eval.max_threshold,
                           cfg.eval.n_thresholds)
    evalkit.write_metrics(rec, out)
    return rec


@dataclass
class Analysis:
    correlation: evalkit.Correlation
    kde_l1: dict[str, dict[str, float]]   # group -> {"adapted": L1, "baseline": L1}


def run_analyze(cfg: ExperimentConfig, teachers: list[NetParams], baseline: NetParams | None = None,
                out: str | Path | None = None, split: str = "val") -> Analysis:
    """Disagreement vs. score correlation on target data and bone-length
    density curves (adapted, optional baseline, ground truth)."""
    if len(teachers) != 2:
        raise ValueError("analyze needs exactly two teacher checkpoints")
    out = Path(out) if out is not None else Path(cfg.output_dir) / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    ds = get_dataset(cfg, "target", split)
    rec = evaluate_nets(cfg, teachers, ds, with_disagreement=True)
    d = np.array([r["disagreement"] for r in rec.per_instance])
    score = np.array([r["avg"] for r in rec.per_instance])
    corr = evalkit.disagreement_correlation(d, score, cfg.eval.n_bins)
    (out / "correlation.json").write_text(json.dumps(
        {"spearman_rho": corr.spearman_rho, "p_value": corr.p_value, "degenerate": corr.degenerate,
         "n": int(d.size)}, indent=2, sort_keys=True) + "\n")
    evalkit.write_rows_csv(corr.bins, out / "correlation_bins.csv")
    evalkit.polyline_svg({"mean Avg": ([b["disagreement_mean"] for b in corr.bins], [b["score_mean"] for b in corr.bins])},
                         out / "correlation.svg", title="score vs. teacher disagreement")

    arch = teachers[0].arch
    x = ds.images.astype(np.float64)
    coords = {"adapted": decode_keypoints(ensemble_predict(teachers, x)[0], arch.temperature, arch.image_size)[0]}
    if baseline is not None:
        coords["baseline"] = decode_keypoints(ensemble_predict([baseline], x)[0], arch.temperature,
                                              arch.image_size)[0]
    kde_l1 = {}
    for group in cfg.eval.kde_groups:
        if group not in BONE_GROUPS:
            raise ValueError(f"unknown bone group {group!r}")
        gt_len = evalkit.bone_lengths(ds.keypoints, group)
        pools = [gt_len] + [evalkit.bone_lengths(c, group) for c in coords.values()]
        lo = min(p.min() for p in pools) - 6 * cfg.eval.kde_bandwidth
        hi = max(p.max() for p in pools) + 6 * cfg.eval.kde_bandwidth
        grid = np.linspace(lo, hi, 512)
        curves = {"ground_truth": evalkit.kde_curve(gt_len, cfg.eval.kde_bandwidth, grid)[1]}
        for name, c in coords.items():
            curves[name] = evalkit.bone_length_kde(c, group, cfg.eval.kde_bandwidth, grid)[1]
        kde_l1[group] = {name: evalkit.curve_l1(grid, curves[name], curves["ground_truth"]) for name in coords}
        rows = [{"length": float(g), **{k: float(v[i]) for k, v in curves.items()}} for i, g in enumerate(grid)]
        evalkit.write_rows_csv(rows, out / f"kde_{group}.csv")
        evalkit.polyline_svg({k: (grid, v) for k, v in curves.items()}, out / f"kde_{group}.svg",
                             title=f"bone length density ({group})")
    (out / "kde_l1.json").write_text(json.dumps(kde_l1, indent=2, sort_keys=True) + "\n")
    return Analysis(corr, kde_l1)


def run_pipeline(cfg: ExperimentConfig, method: str = "cgac") -> evalkit.MetricsRecord:
    """Source training, adaptation and target-val evaluation, writing every artefact."""
    init, _ = run_train_source(cfg)
    res = run_adapt(cfg, method, init)
    return run_eval(cfg, inference_params(res.state), "val", "target")


# the desk-scale method comparison ---------------------------------------------------

@dataclass
class OrderingRun:
    seed: int
    method: str
    metrics: evalkit.MetricsRecord
    state: object = None


def ordering_experiment(cfg: ExperimentConfig, seeds=(0, 1, 2),
                        methods=("source_only", "gac", "gac_distill", "cgac"), keep_states: bool = False,
                        out: str | Path | None = None) -> list[OrderingRun]:
    """Per seed: train a source model, adapt with each method, score on target val."""
    val = get_dataset(cfg, "target", "val")
    runs = []
    for seed in seeds:
        c = replace(cfg, seed=seed)
        init, _ = train_source(c.train_config, get_dataset(c, "source", "train"), c.arch, aug_cfg=c.aug)
        for m in methods:
            res = run_adapt(c, m, init, write=False)
            nets = inference_params(res.state)
            rec = evaluate_nets(c, nets, val)
            log.info("seed %d %s avg %.3f", seed, m, rec.avg)
            runs.append(OrderingRun(seed, m, rec, res.state if keep_states else None))
        if keep_states:
            runs.append(OrderingRun(seed, "source_init", evaluate_nets(c, [init], val), init))
    if out is not None:
        rows = [{"seed": r.seed, "method": r.method, **{k: v for k, v in r.metrics.summary().items()}} for r in runs]
        evalkit.write_rows_csv(rows, Path(out) / "ordering.csv")
    return runs


def mean_scores(runs: list[OrderingRun]) -> dict[str, float]:
    by = {}
    for r in runs:
        by.setdefault(r.method, []).append(r.metrics.avg)
    return {m: float(np.mean(v)) for m, v in by.items()}
