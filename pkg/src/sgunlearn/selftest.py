"""Built-in oracle checks behind ``sgunlearn selftest``."""
from __future__ import annotations

import time

import numpy as np
from scipy.optimize import linprog

from . import autograd as ag
from .attacker import attack_layer, attack_utility_soft, solve_attack
from .metrics import ks_two_sample, wasserstein1
from .unlearn import influence_update


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def op_cases(rng: np.random.Generator) -> dict:
    """One scalar-valued test function per engine op, with its input."""
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    c = rng.standard_normal(4)
    pos = rng.uniform(0.5, 2.0, (3, 4))
    away = a + np.sign(a) * 0.1  # keep relu inputs away from the kink
    tgt = rng.integers(0, 4, 3)
    idx = np.array([2, 0, 2, 1])
    w = rng.standard_normal((3, 4))
    return {
        "matmul": (lambda t: ag.sum(ag.matmul(t, b)), a),
        "add": (lambda t: ag.sum(ag.mul(ag.add(t, c), w)), a),
        "mul": (lambda t: ag.sum(ag.mul(ag.mul(t, t), w)), a),
        "relu": (lambda t: ag.sum(ag.mul(ag.relu(t), w)), away),
        "sigmoid": (lambda t: ag.sum(ag.mul(ag.sigmoid(t), w)), a),
        "log": (lambda t: ag.sum(ag.mul(ag.log(t), w)), pos),
        "exp": (lambda t: ag.sum(ag.mul(ag.exp(t), w)), a),
        "sum": (lambda t: ag.sum(ag.mul(ag.sum(t, axis=0), c)), a),
        "mean": (lambda t: ag.sum(ag.mul(ag.mean(t, axis=1), w[:, 0])), a),
        "gather": (lambda t: ag.sum(ag.mul(ag.gather(t, idx[:3]), w)), a),
        "concat": (lambda t: ag.sum(ag.mul(ag.concat([t, ag.mul(t, 2.0)], axis=1),
                                           np.hstack([w, w]))), a),
        "reshape": (lambda t: ag.sum(ag.mul(ag.reshape(t, (4, 3)), w.reshape(4, 3))), a),
        "softmax": (lambda t: ag.sum(ag.mul(ag.softmax(t), w)), a),
        "softmax_cross_entropy": (lambda t: ag.sum(ag.softmax_cross_entropy(t, tgt)), a),
        "logistic_loss": (lambda t: ag.sum(ag.mul(ag.logistic_loss(t), w)), a),
    }


def check_gradients(n_seeds: int = 50, tol: float = 1e-4) -> tuple[bool, str]:
    worst = 0.0
    for seed in range(n_seeds):
        for name, (f, x) in op_cases(np.random.default_rng(seed)).items():
            t = ag.Tensor(x, requires_grad=True)
            f(t).backward()
            err = rel_err(t.grad, ag.finite_diff_grad(f, x))
            worst = max(worst, err)
            if err > tol:
                return False, f"op {name} seed {seed}: relative error {err:.2e}"
    return True, f"worst relative error {worst:.2e}"


def resolve_fd_grad(x, y, val_x, val_y, family, eps=1e-5) -> np.ndarray:
    """d(soft utility)/d(train features) by re-solving the attacker per coordinate."""
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            vals = []
            for sgn in (1.0, -1.0):
                xp = x.copy()
                xp[i, j] += sgn * eps
                sol = solve_attack(xp, y, family)
                vals.append(attack_utility_soft(sol, val_x, val_y).item())
            out[i, j] = (vals[0] - vals[1]) / (2 * eps)
    return out


def ift_instance(seed: int, n: int = 30, p: int = 3):
    rng = np.random.default_rng(seed)
    y = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    x = rng.standard_normal((n, p)) + 0.5 * y[:, None]
    vy = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    vx = rng.standard_normal((n, p)) + 0.5 * vy[:, None]
    return x, y, vx, vy


def ift_error(seed: int, family: str, n: int = 30, p: int = 3) -> float:
    x, y, vx, vy = ift_instance(seed, n, p)
    t = ag.Tensor(x, requires_grad=True)
    theta, _ = attack_layer(t, y, family)
    attack_utility_soft(theta, vx, vy).backward()
    fd = resolve_fd_grad(x, y, vx, vy, family)
    return float(np.linalg.norm(t.grad - fd) / max(np.linalg.norm(fd), 1e-12))


def check_ift(n_seeds: int = 10, tol: float = 1e-3) -> tuple[bool, str]:
    worst = 0.0
    for family in ("sq-hinge-svm", "logistic"):
        for seed in range(n_seeds):
            err = ift_error(seed, family)
            worst = max(worst, err)
            if err > tol:
                return False, f"{family} seed {seed}: relative error {err:.2e}"
    return True, f"worst relative error {worst:.2e}"


def check_statistics(n_cases: int = 100) -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    for case in range(n_cases):
        a = rng.standard_normal(rng.integers(1, 9))
        b = rng.standard_normal(rng.integers(1, 9)) + 0.3
        pts = np.concatenate([a, b])
        brute = max(abs(np.mean(a <= t) - np.mean(b <= t)) for t in pts)
        if ks_two_sample(a, b)[0] != brute:
            return False, f"KS case {case} differs from the pooled-ECDF supremum"
        cost = np.abs(a[:, None] - b[None, :]).ravel()
        m, n = a.size, b.size
        rows = np.kron(np.eye(m), np.ones(n))
        cols = np.kron(np.ones(m), np.eye(n))
        lp = linprog(cost, A_eq=np.vstack([rows, cols]),
                     b_eq=np.concatenate([np.full(m, 1 / m), np.full(n, 1 / n)]),
                     bounds=(0, None), method="highs")
        if abs(lp.fun - wasserstein1(a, b)) > 1e-9:
            return False, f"W1 case {case}: {wasserstein1(a, b)} vs transport {lp.fun}"
    return True, f"{n_cases} cases"


def check_influence_toy() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    d = 8
    m = rng.standard_normal((d, d))
    h = m @ m.T / d + 0.1 * np.eye(d)
    theta = rng.standard_normal(d)
    g = rng.standard_normal(d)
    got, _ = influence_update(lambda t: h @ t, g, theta, 50, damping=1e-2, cg_iters=100,
                              hvp=lambda v: h @ v)
    want = theta + np.linalg.solve(h + 1e-2 * np.eye(d), g) / 50
    err = float(np.max(np.abs(got - want)))
    return err <= 1e-8, f"max abs difference {err:.2e}"


def run_selftest(quick: bool = True, out=print) -> bool:
    seeds = 5 if quick else 50
    checks = [
        ("gradient checks", lambda: check_gradients(seeds)),
        ("implicit gradient vs re-solve", lambda: check_ift(2 if quick else 10)),
        ("KS and Wasserstein oracles", lambda: check_statistics(20 if quick else 100)),
        ("influence step vs dense solve", check_influence_toy),
    ]
    ok_all = True
    for name, fn in checks:
        t0 = time.perf_counter()
        ok, detail = fn()
        ok_all &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail} ({time.perf_counter() - t0:.1f}s)")
    return ok_all
