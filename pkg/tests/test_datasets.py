from __future__ import annotations

import numpy as np
import pytest

from sgunlearn.datasets import (SPLITS, DatasetBundle, gen_gaussian_mixture, load_csv, save_csv,
                                split_forget)
from sgunlearn.errors import ContractError, ParseError


def test_generator_counts_and_stratified_splits():
    b = gen_gaussian_mixture(5, 600, 20, 2.0, seed=0)
    assert b.features.shape == (3000, 20)
    assert b.n_classes == 5
    for k in range(5):
        rows = b.labels == k
        counts = [np.sum(rows & (b.split == s)) for s in SPLITS]
        assert counts == [360, 60, 90, 90]


def test_generator_is_deterministic_per_seed():
    assert gen_gaussian_mixture(3, 50, 4, 1.0, 7) == gen_gaussian_mixture(3, 50, 4, 1.0, 7)
    assert not gen_gaussian_mixture(3, 50, 4, 1.0, 7) == gen_gaussian_mixture(3, 50, 4, 1.0, 8)


def test_class_means_sit_at_separation_times_unit_directions():
    b = gen_gaussian_mixture(4, 4000, 6, 3.0, seed=1)
    means = np.array([b.features[b.labels == k].mean(axis=0) for k in range(4)])
    np.testing.assert_allclose(np.linalg.norm(means, axis=1), 3.0, atol=0.1)
    # regular simplex: every pair of centres is equally far apart
    d = [np.linalg.norm(means[i] - means[j]) for i in range(4) for j in range(i + 1, 4)]
    assert max(d) - min(d) < 0.15


def test_zero_separation_gives_common_mean():
    b = gen_gaussian_mixture(3, 2000, 4, 0.0, seed=2)
    for k in range(3):
        assert np.all(np.abs(b.features[b.labels == k].mean(axis=0)) < 0.1)


def test_more_classes_than_dims_uses_a_circle():
    b = gen_gaussian_mixture(6, 2000, 2, 4.0, seed=3)
    means = np.array([b.features[b.labels == k].mean(axis=0) for k in range(6)])
    np.testing.assert_allclose(np.linalg.norm(means, axis=1), 4.0, atol=0.15)


@pytest.mark.parametrize("args", [(1, 10, 3, 1.0), (3, 0, 3, 1.0), (3, 10, 1, 1.0), (3, 10, 3, -1.0)])
def test_generator_rejects_bad_arguments(args):
    with pytest.raises(ContractError):
        gen_gaussian_mixture(*args, seed=0)


def test_random_forget_partition_invariants(small_bundle):
    train = small_bundle.indices("train")
    p = split_forget(small_bundle, "random", seed=3, ratio=0.1)
    assert p.forget_indices.size == round(0.1 * train.size)
    assert np.intersect1d(p.forget_indices, p.retain_indices).size == 0
    np.testing.assert_array_equal(np.union1d(p.forget_indices, p.retain_indices), train)
    assert p == split_forget(small_bundle, "random", seed=3, ratio=0.1)


def test_classwise_partition_holds_exactly_one_class(small_bundle):
    p = split_forget(small_bundle, "classwise", forget_class=2)
    assert np.all(small_bundle.labels[p.forget_indices] == 2)
    assert not np.any(small_bundle.labels[p.retain_indices] == 2)
    assert p.excluded_class == 2


@pytest.mark.parametrize("kwargs", [{"mode": "random", "ratio": 0.0}, {"mode": "random", "ratio": 1.0},
                                    {"mode": "classwise"}, {"mode": "classwise", "forget_class": 9},
                                    {"mode": "other"}])
def test_partition_rejects_bad_arguments(small_bundle, kwargs):
    with pytest.raises(ContractError):
        split_forget(small_bundle, **kwargs)


def test_bundle_is_read_only(small_bundle):
    with pytest.raises(ValueError):
        small_bundle.features[0, 0] = 1.0


def test_bundle_rejects_unknown_split_tags():
    with pytest.raises(ContractError):
        DatasetBundle(np.zeros((2, 2)), np.array([0, 1]), np.array(["train", "holdout"], dtype=object))


def test_csv_round_trip_is_exact(tmp_path, small_bundle):
    path = tmp_path / "d.csv"
    save_csv(small_bundle, path)
    assert load_csv(path) == small_bundle


def _write(tmp_path, text):
    p = tmp_path / "x.csv"
    p.write_text(text)
    return p


def test_csv_bad_header_reports_line_one(tmp_path):
    with pytest.raises(ParseError, match="line 1"):
        load_csv(_write(tmp_path, "a,b,label,split\n1,2,0,train\n"))


def test_csv_wrong_field_count_reports_line(tmp_path):
    with pytest.raises(ParseError, match="line 3"):
        load_csv(_write(tmp_path, "f0,f1,label,split\n1,2,0,train\n1,0,train\n"))


def test_csv_non_integral_label_reports_line(tmp_path):
    with pytest.raises(ParseError, match="line 2"):
        load_csv(_write(tmp_path, "f0,f1,label,split\n1,2,0.5,train\n"))


def test_csv_unknown_split_is_contract_error(tmp_path):
    with pytest.raises(ContractError):
        load_csv(_write(tmp_path, "f0,f1,label,split\n1,2,0,holdout\n"))
