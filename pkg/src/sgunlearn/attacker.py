"""The membership-inference auditor.

Builds auditing sets from model outputs, fits the attacker's convex best
response with a damped Newton method, differentiates that best response with
respect to the audit features through its stationarity system, and scores
attacks with stratified k-fold cross validation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import autograd as ag
from .autograd import Tensor
from .datasets import DatasetBundle, ForgetPartition
from .errors import ContractError, NumericError, SolverError
from .models import ModelCheckpoint, output_features_np

FAMILIES = ("sq-hinge-svm", "logistic")
DEFAULT_REG = {"sq-hinge-svm": 1.0, "logistic": 1e-2}
IFT_DAMPING = 1e-6


@dataclass(frozen=True, eq=False)
class AuditLayout:
    """Which bundle rows make up an auditing set, before any model is queried.

    The first N rows are forget rows (membership +1), the next N are test
    rows (membership -1).
    """

    rows: np.ndarray
    targets: np.ndarray
    membership: np.ndarray
    tr_indices: np.ndarray
    val_indices: np.ndarray
    seed: int


@dataclass(frozen=True, eq=False)
class AuditSet:
    features: np.ndarray
    membership: np.ndarray
    tr_indices: np.ndarray
    val_indices: np.ndarray
    seed: int
    rows: np.ndarray | None = None

    @property
    def tr(self) -> tuple[np.ndarray, np.ndarray]:
        return self.features[self.tr_indices], self.membership[self.tr_indices]

    @property
    def val(self) -> tuple[np.ndarray, np.ndarray]:
        return self.features[self.val_indices], self.membership[self.val_indices]

    def __eq__(self, other):
        if not isinstance(other, AuditSet):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("features", "membership", "tr_indices", "val_indices"))


@dataclass(frozen=True, eq=False)
class AttackSolution:
    w: np.ndarray
    b: float
    family: str
    reg: float
    objective: float
    grad_norm_at_solution: float
    active_set: np.ndarray | None
    n_iter: int = 0

    @property
    def theta(self) -> np.ndarray:
        return np.append(self.w, self.b)

    def decision_function(self, features) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.w + self.b


def negative_pool(bundle: DatasetBundle, partition: ForgetPartition) -> np.ndarray:
    """Test rows available as auditing non-members."""
    pool = bundle.indices("test_audit")
    if partition.excluded_class is not None:
        pool = pool[bundle.labels[pool] != partition.excluded_class]
    return pool


def _stratified_halves(membership: np.ndarray, rng: np.random.Generator):
    tr, val = [], []
    for label in (1, -1):
        idx = rng.permutation(np.flatnonzero(membership == label))
        half = (idx.size + 1) // 2
        tr.append(idx[:half])
        val.append(idx[half:])
    return np.sort(np.concatenate(tr)), np.sort(np.concatenate(val))


def audit_layout(bundle: DatasetBundle, partition: ForgetPartition, seed: int,
                 pool: np.ndarray | None = None) -> AuditLayout:
    """Pair every forget row with a seeded uniform draw of test rows and split 50/50."""
    forget = partition.forget_indices
    pool = negative_pool(bundle, partition) if pool is None else np.asarray(pool)
    n = forget.size
    if pool.size < n:
        raise ContractError(f"need at least {n} test rows for the auditing set, have {pool.size}")
    rng = np.random.default_rng(seed)
    negatives = np.sort(rng.choice(pool, size=n, replace=False))
    rows = np.concatenate([forget, negatives])
    membership = np.concatenate([np.ones(n), -np.ones(n)])
    tr, val = _stratified_halves(membership, rng)
    return AuditLayout(rows, bundle.labels[rows], membership, tr, val, seed)


def build_audit_set(ckpt: ModelCheckpoint, bundle: DatasetBundle, partition: ForgetPartition,
                    mode: str = "probs+loss", seed: int = 0,
                    pool: np.ndarray | None = None) -> AuditSet:
    layout = audit_layout(bundle, partition, seed, pool)
    feats = output_features_np(ckpt, bundle.features[layout.rows], layout.targets, mode)
    return AuditSet(feats, layout.membership, layout.tr_indices, layout.val_indices, seed, layout.rows)


def _check_family(family: str) -> None:
    if family not in FAMILIES:
        raise ContractError(f"unknown attack family {family!r}; expected one of {FAMILIES}")


def _design(x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((x.shape[0], 1))])


def objective_terms(family: str, theta: np.ndarray, x: np.ndarray, y: np.ndarray, reg: float):
    """Objective, gradient and (generalised) Hessian in ``theta = [w; b]``."""
    z = _design(x)
    p = x.shape[1]
    w = theta[:p]
    m = y * (z @ theta)
    reg_mask = np.ones(p + 1)
    reg_mask[-1] = 0.0
    if family == "sq-hinge-svm":
        xi = 1.0 - m
        active = xi > 0
        xa = xi * active
        obj = 0.5 * w @ w + reg * np.sum(xa ** 2)
        grad = reg_mask * theta - 2.0 * reg * (z.T @ (y * xa))
        za = z[active]
        hess = np.diag(reg_mask) + 2.0 * reg * (za.T @ za)
        return obj, grad, hess
    if family == "logistic":
        n = x.shape[0]
        obj = np.mean(np.logaddexp(0.0, -m)) + 0.5 * reg * w @ w
        s_neg = _sigmoid(-m)
        grad = z.T @ (-y * s_neg) / n + reg * reg_mask * theta
        curv = s_neg * (1.0 - s_neg)
        hess = (z.T * curv) @ z / n + reg * np.diag(reg_mask)
        return obj, grad, hess
    _check_family(family)


def _sigmoid(v):
    return np.exp(-np.logaddexp(0.0, -v))


def attack_objective(family: str, w, b, x, y, reg: float) -> float:
    return float(objective_terms(family, np.append(w, b), np.asarray(x, float),
                                 np.asarray(y, float), reg)[0])


def solve_attack(features, membership, family: str = "sq-hinge-svm", reg: float | None = None,
                 tol: float = 1e-10, max_iter: int = 100) -> AttackSolution:
    """Fit the attacker's best response by damped Newton iterations.

    ``sq-hinge-svm`` minimises ``1/2 |w|^2 + C sum max(0, 1 - y (w.s + b))^2``;
    ``logistic`` minimises ``mean log(1 + exp(-y (w.s + b))) + lam/2 |w|^2``.
    Iterates until the gradient infinity-norm is at most ``tol``.
    """
    _check_family(family)
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(membership, dtype=np.float64)
    reg = DEFAULT_REG[family] if reg is None else float(reg)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ContractError("features must be n x p with one membership label per row")
    if not (np.any(y == 1) and np.any(y == -1)) or not np.all(np.abs(y) == 1):
        raise ContractError("membership must be +-1 with both labels present")
    if tol <= 0 or reg <= 0:
        raise ContractError("tol and reg must be positive")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite audit features")

    theta = np.zeros(x.shape[1] + 1)
    obj, grad, hess = objective_terms(family, theta, x, y, reg)
    it = 0
    while np.max(np.abs(grad)) > tol and it < max_iter:
        it += 1
        try:
            step = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            shift = 1e-10 * max(1.0, np.max(np.abs(np.diag(hess))))
            step = -np.linalg.solve(hess + shift * np.eye(hess.shape[0]), grad)
        slope = grad @ step
        if not slope < 0:
            step, slope = -grad, -(grad @ grad)
        gmax = np.max(np.abs(grad))
        slack = 1e-12 * max(1.0, abs(obj))  # objective rounding near the optimum
        t = 1.0
        while True:
            cand = theta + t * step
            c_obj, c_grad, c_hess = objective_terms(family, cand, x, y, reg)
            if c_obj <= obj + 1e-4 * t * slope:
                break
            if c_obj <= obj + slack and np.max(np.abs(c_grad)) < gmax:
                break
            if t < 1e-12:
                break
            t *= 0.5
        if c_obj > obj + slack:
            break
        theta, obj, grad, hess = cand, c_obj, c_grad, c_hess
    gnorm = float(np.max(np.abs(grad)))
    if gnorm > tol:
        raise SolverError(
            f"{family} attack solver stopped after {it} iterations with gradient norm {gnorm:.3e}",
            residual=gnorm)
    active = None
    if family == "sq-hinge-svm":
        margins = y * (_design(x) @ theta)
        active = np.flatnonzero(margins < 1.0)
    p = x.shape[1]
    return AttackSolution(theta[:p].copy(), float(theta[p]), family, reg, float(obj), gnorm,
                          active, it)


def ift_grad(sol: AttackSolution, tr_features, membership, upstream,
             damping: float = IFT_DAMPING) -> np.ndarray:
    """Pull ``d(utility)/d(w, b)`` back to ``d(utility)/d(tr features)``.

    With ``F(theta, S) = grad_theta J = 0`` at the solution, the implicit
    function theorem gives ``d theta / dS = -H^{-1} dF/dS``, so the feature
    gradient is ``-(dF/dS)^T H_damped^{-1} g``.
    """
    x = np.asarray(tr_features, dtype=np.float64)
    y = np.asarray(membership, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64).reshape(-1)
    p = x.shape[1]
    if g.size != p + 1:
        raise ContractError(f"upstream gradient must have {p + 1} entries")
    if not np.any(g):
        return np.zeros_like(x)
    theta = sol.theta
    _, _, hess = objective_terms(sol.family, theta, x, y, sol.reg)
    h = hess + damping * np.eye(p + 1)
    try:
        v = np.linalg.solve(h, g)
    except np.linalg.LinAlgError:
        raise NumericError("attack Hessian is singular after damping") from None
    if not np.all(np.isfinite(v)):
        raise NumericError("attack Hessian is singular after damping")
    w, b = theta[:p], theta[p]
    vw, vb = v[:p], v[p]
    score = x @ w + b
    proj = x @ vw + vb  # v . [s_i; 1]
    if sol.family == "sq-hinge-svm":
        xi = 1.0 - y * score
        active = (xi > 0).astype(float)
        c2 = 2.0 * sol.reg * active
        # -d(v.F)/ds_i = 2C [y_i xi_i v_w - (v.[s_i;1]) w]
        return c2[:, None] * ((y * xi)[:, None] * vw[None, :] - proj[:, None] * w[None, :])
    n = x.shape[0]
    m = y * score
    d1 = -_sigmoid(-m)                 # l'(m)
    d2 = _sigmoid(m) * _sigmoid(-m)    # l''(m)
    return -((d2 * proj)[:, None] * w[None, :] + (d1 * y)[:, None] * vw[None, :]) / n


def attack_layer(tr_features: Tensor, membership, family: str = "sq-hinge-svm",
                 reg: float | None = None, tol: float = 1e-10) -> tuple[Tensor, AttackSolution]:
    """Best-response layer: ``[w; b]`` as a tensor whose backward pass runs :func:`ift_grad`."""
    tr_features = ag.as_tensor(tr_features)
    y = np.asarray(membership, dtype=np.float64)
    sol = solve_attack(tr_features.data, y, family, reg, tol)
    x = tr_features.data

    def vjp(g):
        return (ift_grad(sol, x, y, g),)

    return ag.make_op("attack_best_response", sol.theta, (tr_features,), vjp), sol


def attack_utility_soft(sol, val_features, membership) -> Tensor:
    """Negative mean logistic loss of the attacker on the validation split.

    ``sol`` is an :class:`AttackSolution` (held constant) or the ``[w; b]``
    tensor returned by :func:`attack_layer` (gradient continues into the
    training features).
    """
    theta = ag.as_tensor(sol.theta) if isinstance(sol, AttackSolution) else ag.as_tensor(sol)
    s = ag.as_tensor(val_features)
    y = np.asarray(membership, dtype=np.float64)
    p = s.shape[1]
    if theta.shape != (p + 1,):
        raise ContractError("attack parameters do not match the feature dimension")
    w = ag.reshape(ag.gather(theta, np.arange(p)), (p, 1))
    b = ag.gather(theta, [p])
    scores = ag.add(ag.reshape(ag.matmul(s, w), (s.shape[0],)), b)
    return ag.mul(ag.mean(ag.logistic_loss(ag.mul(scores, y))), -1.0)


def stratified_folds(membership, k: int, seed: int) -> np.ndarray:
    y = np.asarray(membership)
    if k < 2:
        raise ContractError("need k >= 2 folds")
    rng = np.random.default_rng(seed)
    folds = np.empty(y.size, dtype=np.int64)
    for label in (1, -1):
        idx = rng.permutation(np.flatnonzero(y == label))
        if idx.size < k:
            raise ContractError(f"only {idx.size} rows with membership {label:+d} for {k} folds")
        folds[idx] = np.arange(idx.size) % k
    return folds


def auc_score(labels, scores) -> float:
    """Probability a random member outscores a random non-member (ties count half)."""
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def f1_score(labels, predicted) -> float:
    labels = np.asarray(labels) == 1
    predicted = np.asarray(predicted) == 1
    tp = np.sum(labels & predicted)
    denom = 2 * tp + np.sum(~labels & predicted) + np.sum(labels & ~predicted)
    return float(2 * tp / denom) if denom else 0.0


def cv_mia_metrics(audit, k: int = 10, family: str = "sq-hinge-svm", reg: float | None = None,
                   seed: int = 0, folds: np.ndarray | None = None,
                   tol: float = 1e-10) -> tuple[float, float, float]:
    """Stratified k-fold (accuracy, AUC, F1) of freshly fitted attackers.

    ``audit`` is an :class:`AuditSet` or a ``(features, membership)`` pair.
    Members are predicted where the decision value is strictly positive.
    """
    if isinstance(audit, AuditSet):
        x, y = audit.features, audit.membership
    else:
        x, y = (np.asarray(a, dtype=np.float64) for a in audit)
    folds = stratified_folds(y, k, seed) if folds is None else np.asarray(folds)
    accs, aucs, f1s = [], [], []
    for f in range(k):
        held = folds == f
        yh = y[held]
        if not (np.any(yh == 1) and np.any(yh == -1)):
            raise ContractError(f"fold {f} does not contain both membership labels")
        sol = solve_attack(x[~held], y[~held], family, reg, tol)
        scores = sol.decision_function(x[held])
        pred = np.where(scores > 0, 1, -1)
        accs.append(np.mean(pred == yh))
        aucs.append(auc_score(yh, scores))
        f1s.append(f1_score(yh, pred))
    return float(np.mean(accs)), float(np.mean(aucs)), float(np.mean(f1s))
