"""Two-sample loss statistics and the per-model metrics report."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .attacker import build_audit_set, cv_mia_metrics, negative_pool
from .datasets import DatasetBundle, ForgetPartition
from .errors import ContractError, NumericError
from .models import ModelCheckpoint, evaluate, per_example_losses

REPORT_FIELDS = ("acc_r", "acc_te", "acc_f", "acc_gap", "mia_acc", "mia_auc", "mia_f1",
                 "ks_stat", "ks_pvalue", "w_dist", "runtime_s")


def _sample(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ContractError(f"{name} is empty")
    return a


def kolmogorov_pvalue(stat: float, m: int, n: int, terms: int = 100) -> float:
    """Asymptotic two-sided p-value with the small-sample correction of the effective size."""
    ne = m * n / (m + n)
    lam = (math.sqrt(ne) + 0.12 + 0.11 / math.sqrt(ne)) * stat
    if lam == 0.0:
        return 1.0
    k = np.arange(1, terms + 1)
    total = 2.0 * np.sum((-1.0) ** (k - 1) * np.exp(-2.0 * k ** 2 * lam ** 2))
    return float(min(1.0, max(0.0, total)))


def ks_two_sample(a, b) -> tuple[float, float]:
    """Supremum distance between the two empirical CDFs, and its p-value."""
    a = np.sort(_sample(a, "first sample"))
    b = np.sort(_sample(b, "second sample"))
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / a.size
    cdf_b = np.searchsorted(b, pooled, side="right") / b.size
    stat = float(np.max(np.abs(cdf_a - cdf_b)))
    return stat, kolmogorov_pvalue(stat, a.size, b.size)


def wasserstein1(a, b) -> float:
    """Integral of ``|F_a - F_b|`` over the pooled sorted breakpoints."""
    a = np.sort(_sample(a, "first sample"))
    b = np.sort(_sample(b, "second sample"))
    pts = np.sort(np.concatenate([a, b]))
    widths = np.diff(pts)
    cdf_a = np.searchsorted(a, pts[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, pts[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * widths))


@dataclass(frozen=True)
class MetricsReport:
    acc_r: float
    acc_te: float
    acc_f: float
    acc_gap: float
    mia_acc: float
    mia_auc: float
    mia_f1: float
    ks_stat: float
    ks_pvalue: float
    w_dist: float
    runtime_s: float

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value):
                raise NumericError(f"metrics field {name} is not finite")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        missing = set(REPORT_FIELDS) - set(d)
        if missing:
            raise ContractError(f"metrics record lacks fields {sorted(missing)}")
        return cls(**{k: float(d[k]) for k in REPORT_FIELDS})


@dataclass(frozen=True)
class AuditConfig:
    family: str = "sq-hinge-svm"
    reg: float | None = None
    feature_mode: str = "probs+loss"
    k_folds: int = 10


def eval_population(bundle: DatasetBundle, partition: ForgetPartition) -> np.ndarray:
    """Held-out test rows for accuracy (the forgotten class is dropped in class-wise mode)."""
    rows = bundle.indices("test_eval")
    if partition.excluded_class is not None:
        rows = rows[bundle.labels[rows] != partition.excluded_class]
    return rows


def loss_samples(ckpt: ModelCheckpoint, bundle: DatasetBundle,
                 partition: ForgetPartition) -> tuple[np.ndarray, np.ndarray]:
    """Per-instance cross-entropies of the forget rows and of the audit test pool."""
    spec, params = ckpt.spec, ckpt.params
    forget = per_example_losses(spec, params, *bundle.rows(partition.forget_indices))
    test = per_example_losses(spec, params, *bundle.rows(negative_pool(bundle, partition)))
    return forget, test


def assemble_report(ckpt: ModelCheckpoint, bundle: DatasetBundle, partition: ForgetPartition,
                    audit_cfg: AuditConfig = AuditConfig(), seed: int = 0,
                    runtime_s: float = 0.0) -> MetricsReport:
    acc_r = evaluate(ckpt, *bundle.rows(partition.retain_indices))
    acc_te = evaluate(ckpt, *bundle.rows(eval_population(bundle, partition)))
    acc_f = evaluate(ckpt, *bundle.rows(partition.forget_indices))
    audit = build_audit_set(ckpt, bundle, partition, audit_cfg.feature_mode, seed)
    mia_acc, mia_auc, mia_f1 = cv_mia_metrics(audit, audit_cfg.k_folds, audit_cfg.family,
                                              audit_cfg.reg, seed)
    lf, lt = loss_samples(ckpt, bundle, partition)
    ks, pval = ks_two_sample(lf, lt)
    return MetricsReport(acc_r, acc_te, acc_f, abs(acc_f - acc_te), mia_acc, mia_auc, mia_f1,
                         ks, pval, wasserstein1(lf, lt), float(runtime_s))
