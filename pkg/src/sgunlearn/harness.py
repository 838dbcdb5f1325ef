"""Experiment configuration, method dispatch, run records and plot data."""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacker import cv_mia_metrics
from .datasets import DatasetBundle, ForgetPartition, gen_gaussian_mixture, load_csv, split_forget
from .errors import ConfigError, ContractError
from .metrics import REPORT_FIELDS, AuditConfig, MetricsReport, assemble_report, loss_samples
from .models import (ModelCheckpoint, MlpSpec, TrainConfig, evaluate, load_ckpt,
                     output_features_np, save_ckpt, train)
from . import unlearn as ul

CONFIG_HEADER = "# sgunlearn-config v1"
METHODS = ("sg", "retrain", "ft", "ga", "rl", "l1", "iu")
OUT_ENV = "SGUNLEARN_OUT"

# defaults of every config key; the method block's keys depend on the method
_DEFAULTS = {
    "dataset": {"source": "synthetic", "path": "", "n_classes": "5", "n_per_class": "600",
                "dim": "20", "separation": "2.0", "seed": "0"},
    "model": {"hidden": "128,128", "lr": "0.05", "momentum": "0.9", "weight_decay": "5e-4",
              "epochs": "60", "batch_size": "64", "milestones": "30:0.1,50:0.1"},
    "forget": {"mode": "random", "ratio": "0.1", "class": "", "seed": ""},
    "method": {"name": "sg"},
    "audit": {"family": "sq-hinge-svm", "reg": "", "feature_mode": "probs+loss", "k_folds": "10"},
    "run": {"seeds": "0", "output_dir": "runs"},
}

_METHOD_KEYS = {
    "sg": ("alpha", "lr", "epochs", "milestones", "attack_lr", "audit_seed"),
    "retrain": (),
    "ft": ("lr", "epochs", "milestones"),
    "ga": ("lr", "epochs", "milestones"),
    "rl": ("lr", "epochs", "milestones"),
    "l1": ("lr", "epochs", "milestones", "gamma"),
    "iu": ("damping", "cg_iters", "step_scale"),
}


def _parse_milestones(text: str) -> tuple:
    out = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        at, _, mult = part.partition(":")
        out.append((int(at), float(mult)))
    return tuple(out)


def parse_float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad number list {text!r}: {exc}") from None
    if not vals:
        raise ConfigError("empty number list")
    return vals


def parse_int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad integer list {text!r}: {exc}") from None
    if not vals:
        raise ConfigError("empty integer list")
    return vals


@dataclass
class ExperimentConfig:
    """All knobs of one experiment, stored as section -> key -> string value.

    Typed accessors build the library objects; ``digest`` hashes every block
    except the run block (seeds and output directory do not change results).
    """

    sections: dict = field(default_factory=lambda: {k: dict(v) for k, v in _DEFAULTS.items()})

    def __post_init__(self):
        merged = {k: dict(v) for k, v in _DEFAULTS.items()}
        for name, block in self.sections.items():
            if name not in merged:
                raise ConfigError(f"unknown config section [{name}]")
            merged[name].update({str(k): str(v) for k, v in block.items()})
        self.sections = merged
        self.validate()

    def get(self, section: str, key: str) -> str:
        return self.sections[section].get(key, "")

    def _num(self, section: str, key: str, kind=float):
        raw = self.get(section, key)
        try:
            return kind(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {kind.__name__}") from None

    def validate(self) -> None:
        name = self.method
        if name not in METHODS:
            raise ConfigError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")
        extra = set(self.sections["method"]) - {"name"} - set(_METHOD_KEYS[name])
        if extra:
            raise ConfigError(f"method {name} does not take {sorted(extra)}")
        for section, block in self.sections.items():
            if section in ("method",):
                continue
            unknown = set(block) - set(_DEFAULTS[section])
            if unknown:
                raise ConfigError(f"unknown key(s) {sorted(unknown)} in [{section}]")
        seeds = self.seeds
        if len(set(seeds)) != len(seeds):
            raise ConfigError("seeds must be distinct")
        if self.get("dataset", "source") not in ("synthetic", "csv"):
            raise ConfigError("[dataset] source must be synthetic or csv")
        self.train_config()
        self.audit_config()

    # typed views

    @property
    def method(self) -> str:
        return self.get("method", "name")

    @property
    def seeds(self) -> list[int]:
        return parse_int_list(self.get("run", "seeds"))

    @property
    def output_dir(self) -> Path:
        return Path(os.environ.get(OUT_ENV) or self.get("run", "output_dir"))

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(lr=self._num("model", "lr"), momentum=self._num("model", "momentum"),
                               weight_decay=self._num("model", "weight_decay"),
                               epochs=self._num("model", "epochs", int),
                               batch_size=self._num("model", "batch_size", int),
                               lr_milestones=_parse_milestones(self.get("model", "milestones")))
        except (ValueError, ContractError) as exc:
            raise ConfigError(f"[model]: {exc}") from None

    def audit_config(self) -> AuditConfig:
        reg = self.get("audit", "reg")
        return AuditConfig(self.get("audit", "family"), float(reg) if reg else None,
                           self.get("audit", "feature_mode"), self._num("audit", "k_folds", int))

    def hidden(self) -> tuple:
        raw = self.get("model", "hidden")
        return tuple(parse_int_list(raw)) if raw.strip() else ()

    def load_bundle(self) -> DatasetBundle:
        if self.get("dataset", "source") == "csv":
            path = self.get("dataset", "path")
            if not path:
                raise ConfigError("[dataset] source = csv needs a path")
            return load_csv(path, seed=self._num("dataset", "seed", int))
        return gen_gaussian_mixture(self._num("dataset", "n_classes", int),
                                    self._num("dataset", "n_per_class", int),
                                    self._num("dataset", "dim", int),
                                    self._num("dataset", "separation"),
                                    self._num("dataset", "seed", int))

    def model_spec(self, bundle: DatasetBundle, seed: int) -> MlpSpec:
        return MlpSpec((bundle.n_features, *self.hidden(), bundle.n_classes), seed)

    def partition(self, bundle: DatasetBundle, seed: int) -> ForgetPartition:
        """Forget split; an empty ``[forget] seed`` follows the run seed (paired runs)."""
        raw = self.get("forget", "seed")
        fseed = int(raw) if raw else seed
        mode = self.get("forget", "mode")
        cls = self.get("forget", "class")
        return split_forget(bundle, mode, fseed, ratio=self._num("forget", "ratio"),
                            forget_class=int(cls) if cls else None)

    def method_params(self) -> dict:
        return {k: v for k, v in self.sections["method"].items() if k != "name"}

    def with_method(self, name: str, **params) -> "ExperimentConfig":
        sections = {k: dict(v) for k, v in self.sections.items()}
        sections["method"] = {"name": name, **{k: str(v) for k, v in params.items()}}
        return ExperimentConfig(sections)

    def with_values(self, section: str, **values) -> "ExperimentConfig":
        sections = {k: dict(v) for k, v in self.sections.items()}
        sections[section].update({k: str(v) for k, v in values.items()})
        return ExperimentConfig(sections)

    # serialisation

    def canonical(self) -> dict:
        return {k: dict(sorted(v.items())) for k, v in sorted(self.sections.items()) if k != "run"}

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_text(self) -> str:
        lines = [CONFIG_HEADER]
        for section, block in self.sections.items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in block.items())
            lines.append("")
        return "\n".join(lines)


def parse_config(text: str) -> ExperimentConfig:
    first = text.lstrip("﻿").splitlines()[0].strip() if text.strip() else ""
    if first != CONFIG_HEADER:
        raise ConfigError(f"config must start with {CONFIG_HEADER!r}, got {first!r}")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return ExperimentConfig({s: dict(parser.items(s)) for s in parser.sections()})


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


# method dispatch

def _sub_train(base: TrainConfig, params: dict, default: TrainConfig) -> TrainConfig:
    lr = float(params.get("lr", default.lr))
    epochs = int(params.get("epochs", default.epochs))
    ms = params.get("milestones")
    milestones = _parse_milestones(ms) if ms is not None else default.lr_milestones
    return TrainConfig(lr=lr, momentum=base.momentum, weight_decay=base.weight_decay,
                       epochs=epochs, batch_size=base.batch_size, lr_milestones=milestones)


def sg_config(params: dict, base: TrainConfig, audit: AuditConfig) -> ul.SgConfig:
    default = ul.SgConfig()
    attack_lr = params.get("attack_lr", default.attack_lr)
    return ul.SgConfig(alpha=float(params.get("alpha", default.alpha)),
                       train=_sub_train(base, params, default.train),
                       family=audit.family, reg=audit.reg, feature_mode=audit.feature_mode,
                       audit_seed=int(params.get("audit_seed", default.audit_seed)),
                       attack_lr=None if attack_lr in (None, "") else float(attack_lr))


def run_method(method: str, params: dict, orig: ModelCheckpoint | None, bundle: DatasetBundle,
               partition: ForgetPartition, spec: MlpSpec, base: TrainConfig,
               audit: AuditConfig, seed: int, callback=None):
    """Run one unlearning method; returns ``(checkpoint, trace, runtime_s)``.

    ``callback(epoch, params)`` (SG only) runs outside the timed region.
    """
    trace = []
    t0 = time.perf_counter()
    if method == "retrain":
        ckpt = ul.retrain(bundle, partition, spec, base, seed)
    elif method == "sg":
        res = ul.sg_unlearn(orig, bundle, partition, sg_config(params, base, audit), seed, callback)
        ckpt = res.ckpt
        trace = [vars(t) for t in res.trace]
        # callback time is excluded from the SG trace; use its own clock
        runtime = res.trace[-1].elapsed_s
        return ckpt, trace, runtime
    elif method == "ft":
        ckpt = ul.fine_tune(orig, bundle, partition, _sub_train(base, params, ul.FT_CONFIG), seed)
    elif method == "ga":
        ckpt = ul.gradient_ascent(orig, bundle, partition, _sub_train(base, params, ul.GA_CONFIG), seed)
    elif method == "rl":
        ckpt = ul.random_label(orig, bundle, partition, _sub_train(base, params, ul.RL_CONFIG), seed)
    elif method == "l1":
        ckpt = ul.l1_sparse(orig, bundle, partition, _sub_train(base, params, ul.L1_CONFIG),
                            float(params.get("gamma", 5e-4)), seed)
    elif method == "iu":
        ckpt = ul.influence_unlearn(orig, bundle, partition, float(params.get("damping", 1e-2)),
                                    int(params.get("cg_iters", 100)),
                                    float(params.get("step_scale", 1.0)))
    else:
        raise ConfigError(f"unknown method {method!r}")
    return ckpt, trace, time.perf_counter() - t0


# records

@dataclass
class RunRecord:
    digest: str
    method: str
    seed: int
    metrics: MetricsReport
    trace: list = field(default_factory=list)
    wall_clock: float = 0.0
    params: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    curve: list = field(default_factory=list)
    losses: dict = field(default_factory=dict)

    @property
    def filename(self) -> str:
        return f"{self.method}_s{self.seed}_{self.digest}.json"

    def to_json(self) -> dict:
        out = {"digest": self.digest, "method": self.method, "seed": self.seed,
               "metrics": self.metrics.to_dict(), "trace": self.trace,
               "wall_clock": self.wall_clock, "params": self.params, "config": self.config,
               "curve": self.curve, "losses": self.losses}
        return out

    @classmethod
    def from_json(cls, d: dict) -> "RunRecord":
        try:
            return cls(d["digest"], d["method"], int(d["seed"]), MetricsReport.from_dict(d["metrics"]),
                       d.get("trace", []), float(d.get("wall_clock", 0.0)), d.get("params", {}),
                       d.get("config", {}), d.get("curve", []), d.get("losses", {}))
        except KeyError as exc:
            raise ContractError(f"run record lacks {exc}") from None

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / self.filename
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))
        return path


def load_records(directory) -> list[RunRecord]:
    paths = sorted(Path(directory).glob("*.json"))
    return [RunRecord.from_json(json.loads(p.read_text())) for p in paths]


def original_model(cfg: ExperimentConfig, bundle: DatasetBundle, seed: int,
                   cache_dir=None) -> ModelCheckpoint:
    """Train (or load from ``cache_dir``) the model every unlearner starts from."""
    spec = cfg.model_spec(bundle, seed)
    train_cfg = cfg.train_config()
    path = None
    if cache_dir is not None:
        key = hashlib.sha256(json.dumps([cfg.canonical()["dataset"], cfg.canonical()["model"]],
                                        sort_keys=True).encode()).hexdigest()[:16]
        path = Path(cache_dir) / f"orig_s{seed}_{key}.ckpt"
        if path.exists():
            return load_ckpt(path)
    ckpt = train(*bundle.rows(bundle.indices("train")), spec, train_cfg, seed=seed)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_ckpt(ckpt, path)
    return ckpt


def curve_point(ckpt: ModelCheckpoint, bundle: DatasetBundle, partition: ForgetPartition,
                audit: AuditConfig, seed: int, epoch: int) -> dict:
    """Per-epoch audit summary used by the ablation plot data."""
    rep = assemble_report(ckpt, bundle, partition, audit, seed)
    return {"epoch": epoch, "acc_te": rep.acc_te, "mia_acc": rep.mia_acc, "w_dist": rep.w_dist,
            "defender_utility": rep.acc_te - rep.mia_acc}


def run_experiment(cfg: ExperimentConfig, seed: int, bundle: DatasetBundle | None = None,
                   track_curve: bool = False, keep_losses: bool = False,
                   cache_dir=None, orig: ModelCheckpoint | None = None):
    """One method x seed run; returns ``(RunRecord, checkpoint)``."""
    bundle = cfg.load_bundle() if bundle is None else bundle
    partition = cfg.partition(bundle, seed)
    spec = cfg.model_spec(bundle, seed)
    base = cfg.train_config()
    audit = cfg.audit_config()
    method = cfg.method
    curve = []
    callback = None
    if method != "retrain" and orig is None:
        orig = original_model(cfg, bundle, seed, cache_dir)
    if track_curve:
        if method != "sg":
            raise ConfigError("per-epoch curves are recorded for the sg method only")
        curve.append(curve_point(orig, bundle, partition, audit, seed, 0))

        def callback(epoch, params):
            curve.append(curve_point(orig.with_params(params), bundle, partition, audit, seed,
                                     epoch + 1))
    t0 = time.perf_counter()
    ckpt, trace, runtime = run_method(method, cfg.method_params(), orig, bundle, partition,
                                      spec, base, audit, seed, callback)
    wall = time.perf_counter() - t0
    report = assemble_report(ckpt, bundle, partition, audit, seed, runtime)
    losses = {}
    if keep_losses:
        lf, lt = loss_samples(ckpt, bundle, partition)
        losses = {"forget": lf.tolist(), "test": lt.tolist()}
    record = RunRecord(cfg.digest(), method, int(seed), report, trace, wall,
                       cfg.method_params(), cfg.canonical(), curve, losses)
    return record, ckpt


# hyperparameter selection

def selection_score(ckpt: ModelCheckpoint, bundle: DatasetBundle, partition: ForgetPartition,
                    audit: AuditConfig, seed: int = 0) -> float:
    """Validation accuracy minus MIA accuracy on a forget-vs-validation auditing set."""
    val = bundle.indices("val")
    if partition.excluded_class is not None:
        val = val[bundle.labels[val] != partition.excluded_class]
    if val.size == 0:
        raise ContractError("no validation rows to select hyperparameters with")
    val_acc = evaluate(ckpt, *bundle.rows(val))
    rng = np.random.default_rng([int(seed), 0x5E1])
    n = min(partition.forget_indices.size, val.size)
    members = np.sort(rng.choice(partition.forget_indices, size=n, replace=False))
    negatives = np.sort(rng.choice(val, size=n, replace=False))
    rows = np.concatenate([members, negatives])
    feats = output_features_np(ckpt, bundle.features[rows], bundle.labels[rows], audit.feature_mode)
    membership = np.concatenate([np.ones(n), -np.ones(n)])
    k = min(audit.k_folds, n)
    mia_acc, _, _ = cv_mia_metrics((feats, membership), k, audit.family, audit.reg, seed)
    return val_acc - mia_acc


def select_hyperparams(grid, cfg: ExperimentConfig, bundle: DatasetBundle | None = None,
                       seed: int = 0, orig: ModelCheckpoint | None = None):
    """Return ``(best_params, scores)`` over a grid of method-parameter dicts.

    Each point is run with ``cfg``'s method and scored by
    :func:`selection_score`; ties go to the lower grid index.
    """
    grid = list(grid)
    if not grid:
        raise ContractError("hyperparameter grid is empty")
    bundle = cfg.load_bundle() if bundle is None else bundle
    partition = cfg.partition(bundle, seed)
    audit = cfg.audit_config()
    if cfg.method != "retrain" and orig is None:
        orig = original_model(cfg, bundle, seed)
    scores = []
    for point in grid:
        run_cfg = cfg.with_method(cfg.method, **{**cfg.method_params(), **point})
        ckpt, _, _ = run_method(run_cfg.method, run_cfg.method_params(), orig, bundle, partition,
                                run_cfg.model_spec(bundle, seed), run_cfg.train_config(), audit, seed)
        scores.append(selection_score(ckpt, bundle, partition, audit, seed))
    best = int(np.argmax(scores))  # first maximum wins ties
    return grid[best], scores


# aggregation and plot data

def aggregate(records, keys=("method",)) -> list[dict]:
    """Mean and sample standard deviation (ddof=1; 0 for a single run) per group."""
    if not records:
        raise ContractError("no run records to aggregate")
    groups: dict = {}
    for r in records:
        key = tuple(_group_value(r, k) for k in keys)
        groups.setdefault(key, []).append(r)
    rows = []
    for key in sorted(groups, key=lambda k: tuple(str(v) for v in k)):
        recs = groups[key]
        row = dict(zip(keys, key))
        row["n"] = len(recs)
        for f in REPORT_FIELDS:
            vals = np.array([getattr(r.metrics, f) for r in recs])
            row[f + "_mean"] = float(np.mean(vals))
            row[f + "_std"] = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
        rows.append(row)
    return rows


def _group_value(record: RunRecord, key: str):
    if key == "method":
        return record.method
    if key == "alpha":
        if record.method != "sg":
            return ""
        return float(record.params.get("alpha", ul.SgConfig().alpha))
    return record.params.get(key, "")


def write_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def loss_histogram(forget, test, bins: int = 30, floor: float = 1e-12):
    """Shared log10-spaced bins over both loss samples; counts sum to the sample sizes."""
    forget = np.maximum(np.asarray(forget, dtype=np.float64), floor)
    test = np.maximum(np.asarray(test, dtype=np.float64), floor)
    logs = np.log10(np.concatenate([forget, test]))
    lo, hi = logs.min(), logs.max()
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    cf, _ = np.histogram(np.log10(forget), edges)
    ct, _ = np.histogram(np.log10(test), edges)
    return 10.0 ** edges, cf, ct


def emit_plot_data(records, kind: str, out_dir) -> list[Path]:
    """Write plot-ready CSV files; returns their paths.

    ``ablation``: one file per alpha, rows = epochs + 1 (epoch 0 is the
    original model), values averaged over seeds.  ``alpha-sweep``: one row
    per alpha.  ``loss-hist``: one file per method with pooled loss counts.
    """
    records = list(records)
    if not records:
        raise ContractError("no run records for plot data")
    out_dir = Path(out_dir)
    if kind == "ablation":
        paths = []
        by_alpha: dict = {}
        for r in records:
            if not r.curve:
                raise ContractError(f"record {r.filename} has no per-epoch curve")
            by_alpha.setdefault(_group_value(r, "alpha"), []).append(r)
        for alpha, recs in sorted(by_alpha.items()):
            n_points = {len(r.curve) for r in recs}
            if len(n_points) != 1:
                raise ContractError("ablation records disagree on epoch count")
            rows = []
            for i in range(n_points.pop()):
                row = {"epoch": i}
                for col in ("defender_utility", "acc_te", "mia_acc", "w_dist"):
                    row[col] = float(np.mean([r.curve[i][col] for r in recs]))
                rows.append(row)
            paths.append(write_csv(rows, out_dir / f"ablation_alpha{alpha:g}.csv"))
        return paths
    if kind == "alpha-sweep":
        rows = aggregate(records, keys=("alpha",))
        return [write_csv(rows, out_dir / "alpha_sweep.csv")]
    if kind == "loss-hist":
        paths = []
        by_method: dict = {}
        for r in records:
            if not r.losses:
                raise ContractError(f"record {r.filename} has no stored losses")
            by_method.setdefault(r.method, []).append(r)
        for method, recs in sorted(by_method.items()):
            lf = np.concatenate([r.losses["forget"] for r in recs])
            lt = np.concatenate([r.losses["test"] for r in recs])
            edges, cf, ct = loss_histogram(lf, lt)
            rows = [{"bin_lo": float(edges[i]), "bin_hi": float(edges[i + 1]),
                     "forget_count": int(cf[i]), "test_count": int(ct[i])} for i in range(cf.size)]
            paths.append(write_csv(rows, out_dir / f"loss_hist_{method}.csv"))
        return paths
    raise ContractError(f"unknown plot kind {kind!r}")
