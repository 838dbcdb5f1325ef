"""MLP classifier: parameters, SGD training, evaluation, output features, checkpoints."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, NumericError, ParseError

CKPT_FORMAT = "sgunlearn-ckpt"
CKPT_VERSION = 1
FEATURE_MODES = ("loss", "probs", "probs+loss")


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or min(dims) < 1:
            raise ContractError("an MLP needs at least two positive layer dims")
        object.__setattr__(self, "layer_dims", dims)

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        d = self.layer_dims
        return sum((d[i] + 1) * d[i + 1] for i in range(len(d) - 1))

    def layer_slices(self):
        """Yield ``(w_start, w_shape, b_start, b_len)`` per layer of the flat vector."""
        start = 0
        d = self.layer_dims
        for i in range(len(d) - 1):
            fan_in, fan_out = d[i], d[i + 1]
            yield start, (fan_in, fan_out), start + fan_in * fan_out, fan_out
            start += (fan_in + 1) * fan_out


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 60
    batch_size: int = 64
    lr_milestones: tuple = ((30, 0.1), (50, 0.1))

    def __post_init__(self):
        if not self.lr >= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ContractError("TrainConfig needs lr >= 0, epochs >= 1, batch_size >= 1")
        object.__setattr__(self, "lr_milestones",
                           tuple((int(e), float(m)) for e, m in self.lr_milestones))

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for at, mult in self.lr_milestones:
            if epoch >= at:
                lr *= mult
        return lr

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(eq=False)
class ModelCheckpoint:
    spec: MlpSpec
    params: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (self.spec.n_params,):
            raise ContractError(
                f"expected {self.spec.n_params} parameters, got {self.params.shape}")

    def with_params(self, params, **meta) -> "ModelCheckpoint":
        return ModelCheckpoint(self.spec, np.array(params, dtype=np.float64), {**self.meta, **meta})

    def __eq__(self, other):
        if not isinstance(other, ModelCheckpoint):
            return NotImplemented
        return (self.spec == other.spec and np.array_equal(self.params, other.params)
                and self.meta == other.meta)


def init_params(spec: MlpSpec) -> np.ndarray:
    """Uniform(+-sqrt(6 / (fan_in + fan_out))) weights, zero biases."""
    rng = np.random.default_rng(spec.seed)
    params = np.zeros(spec.n_params)
    for w0, (fi, fo), _, _ in spec.layer_slices():
        bound = np.sqrt(6.0 / (fi + fo))
        params[w0:w0 + fi * fo] = rng.uniform(-bound, bound, size=fi * fo)
    return params


def forward(spec: MlpSpec, params: Tensor, x: np.ndarray) -> Tensor:
    """Logits of the MLP (ReLU hidden layers) for the rows of ``x``."""
    h = ag.as_tensor(x)
    n_layers = len(spec.layer_dims) - 1
    for i, (w0, shape, b0, blen) in enumerate(spec.layer_slices()):
        w = ag.reshape(ag.gather(params, np.arange(w0, w0 + shape[0] * shape[1])), shape)
        b = ag.gather(params, np.arange(b0, b0 + blen))
        h = ag.add(ag.matmul(h, w), b)
        if i < n_layers - 1:
            h = ag.relu(h)
    return h


def logits_np(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Plain-numpy forward pass (no tape)."""
    h = np.asarray(x, dtype=np.float64)
    n_layers = len(spec.layer_dims) - 1
    for i, (w0, shape, b0, blen) in enumerate(spec.layer_slices()):
        h = h @ params[w0:w0 + shape[0] * shape[1]].reshape(shape) + params[b0:b0 + blen]
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
    return h


def per_example_losses(spec: MlpSpec, params: np.ndarray, x, y) -> np.ndarray:
    return ag.softmax_cross_entropy(logits_np(spec, params, x), np.asarray(y)).data


def loss_and_grad(spec: MlpSpec, params: np.ndarray, x, y) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the rows and its gradient w.r.t. the flat parameters."""
    p = Tensor(params, requires_grad=True)
    loss = ag.mean(ag.softmax_cross_entropy(forward(spec, p, x), np.asarray(y)))
    loss.backward()
    return loss.item(), p.grad


def loss_hvp(spec: MlpSpec, params: np.ndarray, x, y, v: np.ndarray) -> np.ndarray:
    """Exact Hessian-vector product of the mean cross-entropy (R-operator pass).

    ReLU second derivatives are taken as zero, matching the gradient's
    ``relu'(0) = 0`` convention; the result is exactly symmetric in ``v``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = x.shape[0]
    layers = list(spec.layer_slices())
    ws, vs, vbs = [], [], []
    for w0, shape, b0, blen in layers:
        size = shape[0] * shape[1]
        ws.append(params[w0:w0 + size].reshape(shape))
        vs.append(v[w0:w0 + size].reshape(shape))
        vbs.append(v[b0:b0 + blen])
    b_all = [params[b0:b0 + blen] for _, _, b0, blen in layers]
    hs, rhs, masks = [x], [np.zeros_like(x)], []
    z = rz = None
    for i, (w, vw, vb) in enumerate(zip(ws, vs, vbs)):
        z = hs[-1] @ w + b_all[i]
        rz = rhs[-1] @ w + hs[-1] @ vw + vb
        if i < len(ws) - 1:
            mask = (z > 0).astype(np.float64)
            masks.append(mask)
            hs.append(z * mask)
            rhs.append(rz * mask)
    p = ag._softmax(z)
    delta = p.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    rdelta = (p * rz - p * np.sum(p * rz, axis=1, keepdims=True)) / n
    out = np.zeros_like(params)
    for i in range(len(ws) - 1, -1, -1):
        w0, shape, b0, blen = layers[i]
        out[w0:w0 + shape[0] * shape[1]] = (rhs[i].T @ delta + hs[i].T @ rdelta).ravel()
        out[b0:b0 + blen] = rdelta.sum(axis=0)
        if i > 0:
            rdelta = (rdelta @ ws[i].T + delta @ vs[i].T) * masks[i - 1]
            delta = (delta @ ws[i].T) * masks[i - 1]
    return out


class SGD:
    """Momentum SGD with coupled weight decay (``g += wd * theta``)."""

    def __init__(self, spec: MlpSpec, params: np.ndarray, momentum: float = 0.9,
                 weight_decay: float = 5e-4):
        self.spec = spec
        self.params = np.array(params, dtype=np.float64)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = np.zeros_like(self.params)

    def step(self, grad: np.ndarray, lr: float) -> None:
        g = grad + self.weight_decay * self.params
        self.velocity = self.momentum * self.velocity + g
        self.params = self.params - lr * self.velocity

    def epoch(self, x, y, lr: float, batch_size: int, rng: np.random.Generator, *,
              ascent: bool = False, l1: float = 0.0) -> float:
        """One shuffled pass over ``(x, y)``; returns the mean batch loss.

        ``ascent`` flips the loss gradient (gradient ascent); ``l1`` adds the
        subgradient ``l1 * sign(theta)``.
        """
        n = len(y)
        if n == 0:
            raise ContractError("cannot run an epoch on zero rows")
        order = rng.permutation(n)
        total = 0.0
        batches = 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grad = loss_and_grad(self.spec, self.params, x[idx], y[idx])
            if ascent:
                grad = -grad
            if l1:
                grad = grad + l1 * np.sign(self.params)
            self.step(grad, lr)
            if not np.all(np.isfinite(self.params)):
                raise NumericError("parameters diverged to non-finite values")
            total += loss
            batches += 1
        return total / batches


def shuffle_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 0x5EED])


def train(x, y, spec: MlpSpec, cfg: TrainConfig,
          init: np.ndarray | None = None, seed: int | None = None,
          callback: Callable | None = None) -> ModelCheckpoint:
    """SGD training from ``init`` (fresh initialisation when None).

    ``seed`` drives the mini-batch shuffle (defaults to ``spec.seed``).
    ``callback(epoch, loss, params)`` runs after every epoch.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise ContractError("training rows are empty")
    if y.min() < 0 or y.max() >= spec.n_classes:
        raise ContractError("labels outside [0, K)")
    seed = spec.seed if seed is None else seed
    opt = SGD(spec, init_params(spec) if init is None else init, cfg.momentum, cfg.weight_decay)
    rng = shuffle_rng(seed)
    losses = []
    for epoch in range(cfg.epochs):
        try:
            loss = opt.epoch(x, y, cfg.lr_at(epoch), cfg.batch_size, rng)
        except NumericError as exc:
            raise NumericError(f"training diverged at epoch {epoch}: {exc}") from None
        losses.append(loss)
        if callback is not None:
            callback(epoch, loss, opt.params)
    meta = {"seed": int(seed), "config_digest": cfg.digest(), "epochs": cfg.epochs}
    ckpt = ModelCheckpoint(spec, opt.params, meta)
    return ckpt


def predict(ckpt: ModelCheckpoint, x) -> np.ndarray:
    # np.argmax breaks ties toward the lower class index
    return np.argmax(logits_np(ckpt.spec, ckpt.params, x), axis=1)


def evaluate(ckpt: ModelCheckpoint, x, y) -> float:
    y = np.asarray(y)
    if y.size == 0:
        raise ContractError("evaluate needs at least one row")
    return float(np.mean(predict(ckpt, x) == y))


def output_features(spec: MlpSpec, params: Tensor, x, y, mode: str = "probs+loss") -> Tensor:
    """Per-row model outputs used by the auditor, differentiable w.r.t. ``params``.

    ``loss`` gives n x 1 cross-entropies, ``probs`` the n x K softmax rows and
    ``probs+loss`` their n x (K+1) concatenation.
    """
    if mode not in FEATURE_MODES:
        raise ContractError(f"unknown feature mode {mode!r}")
    logits = forward(spec, ag.as_tensor(params), x)
    n = logits.shape[0]
    parts = []
    if mode in ("probs", "probs+loss"):
        parts.append(ag.softmax(logits))
    if mode in ("loss", "probs+loss"):
        parts.append(ag.reshape(ag.softmax_cross_entropy(logits, np.asarray(y)), (n, 1)))
    return parts[0] if len(parts) == 1 else ag.concat(parts, axis=1)


def output_features_np(ckpt: ModelCheckpoint, x, y, mode: str = "probs+loss") -> np.ndarray:
    return output_features(ckpt.spec, Tensor(ckpt.params), x, y, mode).data


def save_ckpt(ckpt: ModelCheckpoint, path) -> None:
    lines = [
        f"{CKPT_FORMAT} v{CKPT_VERSION}",
        "layer_dims " + " ".join(str(d) for d in ckpt.spec.layer_dims),
        f"spec_seed {ckpt.spec.seed}",
        "meta " + json.dumps(ckpt.meta, sort_keys=True),
        f"n_params {ckpt.params.size}",
    ]
    lines.extend("%.17g" % v for v in ckpt.params)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_ckpt(path) -> ModelCheckpoint:
    with open(path) as fh:
        lines = fh.read().splitlines()
    expected = f"{CKPT_FORMAT} v{CKPT_VERSION}"
    if not lines or lines[0] != expected:
        got = lines[0] if lines else ""
        raise ParseError(f"unsupported checkpoint header {got!r}, expected {expected!r}", line=1)
    keys = ("layer_dims", "spec_seed", "meta", "n_params")
    fields = {}
    for i, key in enumerate(keys, start=2):
        if len(lines) < i or not lines[i - 1].startswith(key + " "):
            raise ParseError(f"expected '{key}' record", line=i)
        fields[key] = lines[i - 1][len(key) + 1:]
    try:
        dims = tuple(int(v) for v in fields["layer_dims"].split())
        spec = MlpSpec(dims, int(fields["spec_seed"]))
        meta = json.loads(fields["meta"])
        n = int(fields["n_params"])
    except (ValueError, ContractError) as exc:
        raise ParseError(f"bad checkpoint header field: {exc}") from None
    body = lines[1 + len(keys):]
    if len(body) != n or n != spec.n_params:
        raise ParseError(f"expected {spec.n_params} parameter lines, found {len(body)} (truncated?)")
    try:
        params = np.array([float(v) for v in body])
    except ValueError as exc:
        raise ParseError(str(exc)) from None
    return ModelCheckpoint(spec, params, meta)
