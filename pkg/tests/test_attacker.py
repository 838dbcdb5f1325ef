from __future__ import annotations

import numpy as np
import pytest

from oracles import brute_auc, gd_attack_oracle, ift_instance, logistic_objective, resolve_utility, sq_hinge_objective
from sgunlearn import autograd as ag
from sgunlearn.attacker import (attack_layer, attack_objective, attack_utility_soft, audit_layout,
                                auc_score, build_audit_set, cv_mia_metrics, f1_score, ift_grad,
                                negative_pool, solve_attack, stratified_folds)
from sgunlearn.datasets import split_forget
from sgunlearn.errors import ContractError

FAMILIES = ("sq-hinge-svm", "logistic")


def ten_point(seed):
    rng = np.random.default_rng(seed)
    p = int(rng.integers(1, 4))
    y = np.array([1.0] * 5 + [-1.0] * 5)
    return rng.standard_normal((10, p)) + 0.5 * y[:, None], y


def fd_feature_grad(x, y, vx, vy, family, eps=1e-5):
    out = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        out[i] = (resolve_utility(xp, y, vx, vy, family, solve_attack)
                  - resolve_utility(xm, y, vx, vy, family, solve_attack)) / (2 * eps)
    return out


@pytest.mark.parametrize("family", FAMILIES)
def test_solver_matches_gradient_descent_oracle(family):
    for seed in range(20):
        x, y = ten_point(seed)
        sol = solve_attack(x, y, family)
        assert abs(sol.objective - gd_attack_oracle(x, y, family)) <= 1e-9


def test_objectives_match_their_definitions(rng):
    x, y = ten_point(3)
    theta = rng.standard_normal(x.shape[1] + 1)
    w, b = theta[:-1], theta[-1]
    assert attack_objective("sq-hinge-svm", w, b, x, y, 1.0) == pytest.approx(sq_hinge_objective(theta, x, y))
    assert attack_objective("logistic", w, b, x, y, 1e-2) == pytest.approx(logistic_objective(theta, x, y))


@pytest.mark.parametrize("family", FAMILIES)
def test_solution_is_stationary_and_locally_optimal(family):
    rng = np.random.default_rng(0)
    x, y, _, _ = ift_instance(1)
    sol = solve_attack(x, y, family)
    assert sol.grad_norm_at_solution <= 1e-10
    for _ in range(100):
        d = rng.standard_normal(x.shape[1] + 1)
        d *= 1e-3 / np.linalg.norm(d)
        assert attack_objective(family, sol.w + d[:-1], sol.b + d[-1], x, y, sol.reg) >= sol.objective


@pytest.mark.parametrize("family", FAMILIES)
def test_sign_flip_negates_solution_and_keeps_objective(family):
    x, y, _, _ = ift_instance(2)
    a = solve_attack(x, y, family)
    b = solve_attack(x, -y, family)
    assert b.objective == pytest.approx(a.objective, rel=1e-12)
    np.testing.assert_allclose(b.w, -a.w, atol=1e-9)
    assert b.b == pytest.approx(-a.b, abs=1e-9)


def test_duplicating_rows_leaves_logistic_solution_unchanged():
    x, y, _, _ = ift_instance(3)
    a = solve_attack(x, y, "logistic")
    b = solve_attack(np.vstack([x, x]), np.concatenate([y, y]), "logistic")
    np.testing.assert_allclose(b.theta, a.theta, atol=1e-9)


def test_duplicating_rows_matches_doubling_hinge_penalty():
    x, y, _, _ = ift_instance(4)
    a = solve_attack(x, y, "sq-hinge-svm", reg=2.0)
    b = solve_attack(np.vstack([x, x]), np.concatenate([y, y]), "sq-hinge-svm", reg=1.0)
    np.testing.assert_allclose(b.theta, a.theta, atol=1e-9)


def test_solver_rejects_single_class():
    with pytest.raises(ContractError):
        solve_attack(np.zeros((4, 2)), np.ones(4))


@pytest.mark.parametrize("family", FAMILIES)
def test_composed_feature_gradient_matches_resolve_differences(family):
    for seed in range(10):
        x, y, vx, vy = ift_instance(seed, n=40, p=4)
        t = ag.Tensor(x, requires_grad=True)
        theta, _ = attack_layer(t, y, family)
        attack_utility_soft(theta, vx, vy).backward()
        fd = fd_feature_grad(x, y, vx, vy, family)
        assert np.linalg.norm(t.grad - fd) / np.linalg.norm(fd) <= 1e-3, seed


def test_both_gradient_paths_reach_shared_features():
    x, y, vx, vy = ift_instance(5, n=20, p=3)
    both = np.vstack([x, vx])
    t = ag.Tensor(both, requires_grad=True)
    theta, _ = attack_layer(ag.gather(t, np.arange(20)), y)
    attack_utility_soft(theta, ag.gather(t, np.arange(20, 40)), vy).backward()

    def utility(v):
        return resolve_utility(v[:20], y, v[20:], vy, "sq-hinge-svm", solve_attack)

    fd = np.zeros_like(both)
    for i in np.ndindex(both.shape):
        vp, vm = both.copy(), both.copy()
        vp[i] += 1e-5
        vm[i] -= 1e-5
        fd[i] = (utility(vp) - utility(vm)) / 2e-5
    assert np.linalg.norm(t.grad - fd) / np.linalg.norm(fd) <= 1e-3


def test_inactive_rows_get_zero_feature_gradient():
    x, y, vx, vy = ift_instance(6)
    sol = solve_attack(x, y)
    g = ift_grad(sol, x, y, np.ones(x.shape[1] + 1))
    inactive = np.setdiff1d(np.arange(len(y)), sol.active_set)
    assert inactive.size > 0
    assert not np.any(g[inactive])


def test_zero_upstream_gives_zero_feature_gradient():
    x, y, _, _ = ift_instance(7)
    sol = solve_attack(x, y)
    assert not np.any(ift_grad(sol, x, y, np.zeros(x.shape[1] + 1)))


def test_soft_utility_is_negative_mean_logistic_loss():
    x, y, vx, vy = ift_instance(8)
    sol = solve_attack(x, y)
    want = -np.mean(np.log1p(np.exp(-vy * (vx @ sol.w + sol.b))))
    assert attack_utility_soft(sol, vx, vy).item() == pytest.approx(want, rel=1e-12)


def test_auc_on_handcrafted_set_with_one_tie():
    labels = np.array([1, 1, 1, 1, -1, -1, -1, -1])
    scores = np.array([0.9, 0.8, 0.5, 0.3, 0.5, 0.2, 0.1, 0.05])
    assert brute_auc(labels, scores) == 0.90625
    assert auc_score(labels, scores) == 0.90625


def test_auc_matches_brute_force_on_random_ties(rng):
    for _ in range(20):
        labels = np.where(rng.random(15) < 0.5, 1, -1)
        labels[:2] = [1, -1]
        scores = rng.integers(0, 4, 15).astype(float)
        assert auc_score(labels, scores) == pytest.approx(brute_auc(labels, scores), abs=1e-12)


def test_f1_counts_members_as_positive():
    assert f1_score([1, 1, -1, -1], [1, -1, 1, -1]) == 0.5
    assert f1_score([-1, -1], [-1, -1]) == 0.0


def test_perfect_signal_gives_perfect_metrics():
    y = np.repeat([1.0, -1.0], 20)
    assert cv_mia_metrics((y[:, None].copy(), y), k=10) == (1.0, 1.0, 1.0)


def test_no_signal_gives_chance_accuracy():
    accs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        y = np.repeat([1.0, -1.0], 50)
        accs.append(cv_mia_metrics((rng.standard_normal((100, 3)), y), k=10, seed=seed)[0])
    assert 0.43 <= np.mean(accs) <= 0.57


def test_cv_metrics_invariant_to_row_permutation(rng):
    x, y, _, _ = ift_instance(9, n=60, p=3)
    folds = stratified_folds(y, 5, seed=0)
    perm = rng.permutation(60)
    a = cv_mia_metrics((x, y), k=5, folds=folds)
    b = cv_mia_metrics((x[perm], y[perm]), k=5, folds=folds[perm])
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_stratified_folds_balance_labels():
    y = np.repeat([1.0, -1.0], [23, 31])
    folds = stratified_folds(y, 5, seed=1)
    for f in range(5):
        assert 4 <= np.sum((folds == f) & (y == 1)) <= 5
        assert 6 <= np.sum((folds == f) & (y == -1)) <= 7


def test_too_few_rows_per_fold_is_contract_error():
    with pytest.raises(ContractError):
        stratified_folds(np.repeat([1.0, -1.0], [3, 10]), 5, seed=0)


def test_audit_layout_structure(small_bundle, small_partition):
    lay = audit_layout(small_bundle, small_partition, seed=4)
    n = small_partition.forget_indices.size
    np.testing.assert_array_equal(lay.rows[:n], small_partition.forget_indices)
    assert np.all(np.isin(lay.rows[n:], small_bundle.indices("test_audit")))
    np.testing.assert_array_equal(lay.membership, np.repeat([1.0, -1.0], n))
    assert np.intersect1d(lay.tr_indices, lay.val_indices).size == 0
    assert lay.tr_indices.size + lay.val_indices.size == 2 * n
    assert abs(np.sum(lay.membership[lay.tr_indices])) <= 1
    again = audit_layout(small_bundle, small_partition, seed=4)
    np.testing.assert_array_equal(again.rows, lay.rows)


def test_classwise_negatives_exclude_the_forgotten_class(small_bundle):
    part = split_forget(small_bundle, "classwise", forget_class=1)
    pool = negative_pool(small_bundle, part)
    assert not np.any(small_bundle.labels[pool] == 1)


def test_build_audit_set_is_deterministic(small_model, small_bundle, small_partition):
    a = build_audit_set(small_model, small_bundle, small_partition, seed=2)
    b = build_audit_set(small_model, small_bundle, small_partition, seed=2)
    assert a == b
    assert a.features.shape[1] == small_bundle.n_classes + 1
