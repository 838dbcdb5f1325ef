"""SG-Unlearn and the baseline unlearning methods.

Every method takes the original checkpoint (or, for retraining, the data
alone) and returns a new :class:`ModelCheckpoint`; runs are deterministic
given their seed.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .attacker import attack_layer, attack_utility_soft, audit_layout, negative_pool
from .autograd import Tensor
from .datasets import DatasetBundle, ForgetPartition
from .errors import ContractError, NumericError, SolverError
from .models import (SGD, ModelCheckpoint, MlpSpec, TrainConfig, loss_and_grad, loss_hvp,
                     output_features, shuffle_rng, train)

FT_CONFIG = TrainConfig(lr=1e-2, epochs=30, lr_milestones=())
GA_CONFIG = TrainConfig(lr=5e-2, epochs=5, lr_milestones=())
RL_CONFIG = TrainConfig(lr=1e-2, epochs=10, lr_milestones=())
L1_CONFIG = TrainConfig(lr=1e-2, epochs=10, lr_milestones=())


@dataclass(frozen=True)
class SgConfig:
    alpha: float = 1.0
    train: TrainConfig = FT_CONFIG
    family: str = "sq-hinge-svm"
    reg: float | None = None
    tol: float = 1e-10
    feature_mode: str = "probs+loss"
    audit_seed: int = 0
    attack_lr: float | None = 10.0

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ContractError("alpha must be non-negative")

    @property
    def epochs(self) -> int:
        return self.train.epochs

    def attack_step(self, epoch: int) -> float:
        """Step size of the attacker update; follows the retain schedule's decay.

        ``attack_lr=None`` reuses the retain learning rate.
        """
        lr = self.train.lr_at(epoch)
        if self.attack_lr is None:
            return lr
        return self.attack_lr * (lr / self.train.lr) if self.train.lr > 0 else 0.0


@dataclass
class EpochTrace:
    epoch: int
    retain_loss: float
    soft_utility: float
    elapsed_s: float


@dataclass
class UnlearnResult:
    ckpt: ModelCheckpoint
    trace: list = field(default_factory=list)


def _retain(bundle: DatasetBundle, partition: ForgetPartition):
    return bundle.rows(partition.retain_indices)


def _forget(bundle: DatasetBundle, partition: ForgetPartition):
    return bundle.rows(partition.forget_indices)


def epoch_audit_seed(base: int, epoch: int) -> int:
    """Per-epoch seed for re-drawing the auditing negatives."""
    return int(np.random.SeedSequence([int(base), int(epoch)]).generate_state(1)[0])


def sg_unlearn(orig: ModelCheckpoint, bundle: DatasetBundle, partition: ForgetPartition,
               cfg: SgConfig = SgConfig(), seed: int = 0,
               callback: Callable | None = None) -> UnlearnResult:
    """Alternate a retain-set SGD epoch with a step against the auditor's best response.

    Per epoch: (i) one momentum-SGD pass over the retain rows gives theta';
    (ii) the auditing set is rebuilt from theta' outputs on forget rows and a
    fresh draw of test rows; (iii) the attacker is fitted on its training
    half; (iv) the logistic surrogate utility is evaluated on the validation
    half; (v) ``theta = theta' - lr * alpha * dU/dtheta'`` with the gradient
    flowing through both the validation features and the implicit
    best-response layer.

    ``callback(epoch, params)`` runs after each epoch and is excluded from
    the recorded elapsed time.
    """
    spec = orig.spec
    xr, yr = _retain(bundle, partition)
    pool = negative_pool(bundle, partition)
    opt = SGD(spec, orig.params, cfg.train.momentum, cfg.train.weight_decay)
    rng = shuffle_rng(seed)
    trace = []
    elapsed = 0.0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.train.lr_at(epoch)
        try:
            retain_loss = opt.epoch(xr, yr, lr, cfg.train.batch_size, rng)
        except NumericError as exc:
            raise NumericError(f"epoch {epoch}: {exc}") from None

        layout = audit_layout(bundle, partition, epoch_audit_seed(cfg.audit_seed, epoch), pool)
        params = Tensor(opt.params, requires_grad=True)
        feats = output_features(spec, params, bundle.features[layout.rows], layout.targets,
                                cfg.feature_mode)
        s_tr = ag.gather(feats, layout.tr_indices)
        s_val = ag.gather(feats, layout.val_indices)
        try:
            theta_a, _ = attack_layer(s_tr, layout.membership[layout.tr_indices],
                                      cfg.family, cfg.reg, cfg.tol)
        except SolverError as exc:
            raise SolverError(f"epoch {epoch}: {exc}", residual=exc.residual) from None
        utility = attack_utility_soft(theta_a, s_val, layout.membership[layout.val_indices])
        attack_lr = cfg.attack_step(epoch)
        if cfg.alpha > 0 and attack_lr > 0:
            utility.backward()
            opt.params = opt.params - attack_lr * cfg.alpha * params.grad
            if not np.all(np.isfinite(opt.params)):
                raise NumericError(f"epoch {epoch}: attacker step produced non-finite parameters")
        elapsed += time.perf_counter() - t0
        trace.append(EpochTrace(epoch, retain_loss, utility.item(), elapsed))
        if callback is not None:
            callback(epoch, opt.params)
    ckpt = orig.with_params(opt.params, method="sg", alpha=cfg.alpha, unlearn_seed=int(seed))
    return UnlearnResult(ckpt, trace)


def retrain(bundle: DatasetBundle, partition: ForgetPartition, spec: MlpSpec,
            train_cfg: TrainConfig = TrainConfig(), seed: int = 0) -> ModelCheckpoint:
    """Train from a fresh initialisation on the retain rows only."""
    spec = MlpSpec(spec.layer_dims, seed)
    return train(*_retain(bundle, partition), spec, train_cfg, seed=seed)


def _continue(orig: ModelCheckpoint, x, y, cfg: TrainConfig, seed: int, *,
              ascent: bool = False, l1: float = 0.0, callback: Callable | None = None) -> np.ndarray:
    opt = SGD(orig.spec, orig.params, cfg.momentum, cfg.weight_decay)
    rng = shuffle_rng(seed)
    for epoch in range(cfg.epochs):
        loss = opt.epoch(x, y, cfg.lr_at(epoch), cfg.batch_size, rng, ascent=ascent, l1=l1)
        if callback is not None:
            callback(epoch, loss, opt.params)
    return opt.params


def fine_tune(orig: ModelCheckpoint, bundle: DatasetBundle, partition: ForgetPartition,
              train_cfg: TrainConfig = FT_CONFIG, seed: int = 0,
              callback: Callable | None = None) -> ModelCheckpoint:
    params = _continue(orig, *_retain(bundle, partition), train_cfg, seed, callback=callback)
    return orig.with_params(params, method="ft", unlearn_seed=int(seed))


def gradient_ascent(orig: ModelCheckpoint, bundle: DatasetBundle, partition: ForgetPartition,
                    train_cfg: TrainConfig = GA_CONFIG, seed: int = 0,
                    callback: Callable | None = None) -> ModelCheckpoint:
    """Ascend the cross-entropy of the forget rows."""
    params = _continue(orig, *_forget(bundle, partition), train_cfg, seed, ascent=True,
                       callback=callback)
    return orig.with_params(params, method="ga", unlearn_seed=int(seed))


def random_labels(labels: np.ndarray, n_classes: int, seed: int) -> np.ndarray:
    """Uniform draws over the ``K - 1`` wrong classes of each label."""
    if n_classes < 2:
        raise ContractError("random labels need at least two classes")
    rng = np.random.default_rng([int(seed), 0xA1])
    return (labels + rng.integers(1, n_classes, size=labels.size)) % n_classes


def random_label(orig: ModelCheckpoint, bundle: DatasetBundle, partition: ForgetPartition,
                 train_cfg: TrainConfig = RL_CONFIG, seed: int = 0) -> ModelCheckpoint:
    xr, yr = _retain(bundle, partition)
    xf, yf = _forget(bundle, partition)
    x = np.vstack([xr, xf])
    y = np.concatenate([yr, random_labels(yf, orig.spec.n_classes, seed)])
    params = _continue(orig, x, y, train_cfg, seed)
    return orig.with_params(params, method="rl", unlearn_seed=int(seed))


def l1_sparse(orig: ModelCheckpoint, bundle: DatasetBundle, partition: ForgetPartition,
              train_cfg: TrainConfig = L1_CONFIG, gamma: float = 5e-4,
              seed: int = 0) -> ModelCheckpoint:
    """Fine-tune with an added ``gamma * |theta|_1`` penalty (subgradient ``sign``, sign(0)=0)."""
    if gamma < 0:
        raise ContractError("gamma must be non-negative")
    params = _continue(orig, *_retain(bundle, partition), train_cfg, seed, l1=gamma)
    return orig.with_params(params, method="l1", unlearn_seed=int(seed))


def conjugate_residual(matvec: Callable, rhs: np.ndarray, max_iter: int = 100,
                       rtol: float = 1e-4) -> tuple[np.ndarray, list]:
    """Solve ``A x = rhs`` for symmetric ``A`` given only ``v -> A v``.

    The conjugate-residual variant of CG minimises the residual norm over the
    Krylov subspace, so the returned residual history is non-increasing.
    Raises :class:`SolverError` when ``|r| / |rhs| > rtol`` after ``max_iter``.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    x = np.zeros_like(rhs)
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return x, [0.0]
    r = rhs.copy()
    ar = matvec(r)
    p, ap = r.copy(), ar.copy()
    rar = r @ ar
    history = [float(np.linalg.norm(r))]
    for _ in range(max_iter):
        if history[-1] <= rtol * bnorm:
            break
        denom = ap @ ap
        if denom == 0.0 or rar == 0.0:
            break
        step = rar / denom
        x = x + step * p
        r = r - step * ap
        history.append(float(np.linalg.norm(r)))
        ar = matvec(r)
        rar_new = r @ ar
        beta = rar_new / rar
        rar = rar_new
        p = r + beta * p
        ap = ar + beta * ap
    if history[-1] > rtol * bnorm:
        raise SolverError(
            f"conjugate residual stopped with relative residual {history[-1] / bnorm:.3e}",
            residual=history[-1] / bnorm)
    return x, history


def fd_hvp(grad_fn: Callable, theta: np.ndarray, v: np.ndarray, rel_eps: float = 1e-5) -> np.ndarray:
    """Hessian-vector product by central differences of the gradient."""
    vnorm = np.linalg.norm(v)
    if vnorm == 0.0:
        return np.zeros_like(v)
    eps = rel_eps * max(1.0, np.linalg.norm(theta)) / vnorm
    return (grad_fn(theta + eps * v) - grad_fn(theta - eps * v)) / (2.0 * eps)


def influence_update(grad_fn: Callable, forget_grad_sum: np.ndarray, theta: np.ndarray,
                     n_train: int, damping: float = 1e-2, cg_iters: int = 100,
                     step_scale: float = 1.0, hvp: Callable | None = None):
    """``theta + step_scale / n_train * (H + damping I)^{-1} forget_grad_sum``.

    ``hvp(v)`` gives ``H v``; without it, products come from central
    differences of ``grad_fn``.
    """
    if hvp is None:
        def hvp(v):
            return fd_hvp(grad_fn, theta, v)

    delta, history = conjugate_residual(lambda v: hvp(v) + damping * v, forget_grad_sum, cg_iters)
    return theta + step_scale * delta / n_train, history


def influence_unlearn(orig: ModelCheckpoint, bundle: DatasetBundle, partition: ForgetPartition,
                      damping: float = 1e-2, cg_iters: int = 100,
                      step_scale: float = 1.0) -> ModelCheckpoint:
    """One Newton-style influence step removing the forget rows' contribution."""
    spec = orig.spec
    xt, yt = bundle.rows(bundle.indices("train"))
    xf, yf = _forget(bundle, partition)

    def hvp(v):
        return loss_hvp(spec, orig.params, xt, yt, v)

    _, g_mean = loss_and_grad(spec, orig.params, xf, yf)
    forget_sum = g_mean * len(yf)
    params, _ = influence_update(None, forget_sum, orig.params, len(yt), damping,
                                 cg_iters, step_scale, hvp=hvp)
    return orig.with_params(params, method="iu")
