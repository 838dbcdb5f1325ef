from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from sgunlearn import harness as hx
from sgunlearn.cli import main
from sgunlearn.errors import ConfigError, ContractError
from sgunlearn.metrics import REPORT_FIELDS, MetricsReport

TINY = """# sgunlearn-config v1
[dataset]
n_classes = 3
n_per_class = 60
dim = 4
[model]
hidden = 8
epochs = 4
milestones =
[method]
name = sg
alpha = 1.0
epochs = 2
lr = 0.01
milestones =
[audit]
k_folds = 3
[run]
seeds = 0
"""


@pytest.fixture
def tiny():
    return hx.parse_config(TINY)


@pytest.fixture
def tiny_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def _record(method, seed, alpha=None, **metrics):
    vals = dict.fromkeys(REPORT_FIELDS, 0.0)
    vals.update(metrics)
    params = {} if alpha is None else {"alpha": str(alpha)}
    return hx.RunRecord("d", method, seed, MetricsReport(**vals), params=params)


# configuration

def test_defaults_build_the_default_experiment():
    cfg = hx.ExperimentConfig()
    assert cfg.method == "sg"
    assert cfg.hidden() == (128, 128)
    assert cfg.train_config().lr_milestones == ((30, 0.1), (50, 0.1))
    assert cfg.seeds == [0]


def test_config_text_round_trip(tiny):
    again = hx.parse_config(tiny.to_text())
    assert again.sections == tiny.sections
    assert again.digest() == tiny.digest()


def test_digest_ignores_key_order_and_run_block(tiny):
    sections = {k: dict(reversed(list(v.items()))) for k, v in reversed(list(tiny.sections.items()))}
    assert hx.ExperimentConfig(sections).digest() == tiny.digest()
    assert tiny.with_values("run", seeds="3,4").digest() == tiny.digest()
    assert tiny.with_values("model", lr="0.1").digest() != tiny.digest()


def test_missing_header_is_config_error():
    with pytest.raises(ConfigError, match="must start"):
        hx.parse_config(TINY.split("\n", 1)[1])


@pytest.mark.parametrize("text", [
    "[dataset]\nbogus = 1\n",
    "[nowhere]\nx = 1\n",
    "[method]\nname = ft\nalpha = 1\n",
    "[method]\nname = nope\n",
    "[run]\nseeds = 1,1\n",
    "[model]\nlr = fast\n",
    "[model]\nepochs = 0\n",
])
def test_bad_configs_are_rejected(text):
    with pytest.raises(ConfigError):
        hx.parse_config(hx.CONFIG_HEADER + "\n" + text)


def test_number_lists():
    assert hx.parse_float_list("0.5, 1;2") == [0.5, 1.0, 2.0]
    assert hx.parse_int_list("0,1,2") == [0, 1, 2]
    with pytest.raises(ConfigError):
        hx.parse_int_list("1,x")


def test_output_dir_environment_variable_wins(monkeypatch, tiny, tmp_path):
    monkeypatch.setenv(hx.OUT_ENV, str(tmp_path / "env"))
    assert tiny.output_dir == tmp_path / "env"
    monkeypatch.delenv(hx.OUT_ENV)
    assert str(tiny.output_dir) == "runs"


def test_forget_seed_follows_run_seed_unless_set(tiny):
    bundle = tiny.load_bundle()
    assert tiny.partition(bundle, 3) != tiny.partition(bundle, 4)
    fixed = tiny.with_values("forget", seed="7")
    assert fixed.partition(bundle, 3) == fixed.partition(bundle, 4)


# experiments

def test_run_experiment_is_deterministic_except_runtime(tiny, tmp_path):
    a, ck_a = hx.run_experiment(tiny, 0, cache_dir=tmp_path)
    b, ck_b = hx.run_experiment(tiny, 0, cache_dir=tmp_path)
    assert ck_a == ck_b
    for f in REPORT_FIELDS:
        if f != "runtime_s":
            assert getattr(a.metrics, f) == getattr(b.metrics, f), f
    assert len(a.trace) == 2
    assert list(tmp_path.glob("orig_s0_*.ckpt"))


def test_run_record_json_round_trip(tiny, tmp_path):
    rec, _ = hx.run_experiment(tiny, 1, keep_losses=True)
    path = rec.save(tmp_path)
    assert path.name == f"sg_s1_{tiny.digest()}.json"
    back = hx.load_records(tmp_path)[0]
    assert back.metrics == rec.metrics
    assert back.losses == rec.losses
    assert len(rec.losses["forget"]) == tiny.partition(tiny.load_bundle(), 1).forget_indices.size


def test_curve_has_one_point_per_epoch_plus_start(tiny):
    rec, _ = hx.run_experiment(tiny, 0, track_curve=True)
    assert [p["epoch"] for p in rec.curve] == [0, 1, 2]
    for p in rec.curve:
        assert p["defender_utility"] == p["acc_te"] - p["mia_acc"]
    with pytest.raises(ConfigError):
        hx.run_experiment(tiny.with_method("ft"), 0, track_curve=True)


@pytest.mark.parametrize("method", ["retrain", "ft", "ga", "rl", "l1", "iu"])
def test_every_method_produces_a_finite_report(tiny, method):
    cfg = tiny.with_method(method, **({"cg_iters": 400} if method == "iu" else {}))
    rec, _ = hx.run_experiment(cfg, 0)
    assert all(np.isfinite(getattr(rec.metrics, f)) for f in REPORT_FIELDS)


# hyperparameter selection

def test_single_point_grid_returns_that_point(tiny):
    best, scores = hx.select_hyperparams([{"alpha": 0.5}], tiny)
    assert best == {"alpha": 0.5}
    assert len(scores) == 1


def test_selection_is_argmax_with_ties_to_first(tiny, monkeypatch):
    values = iter([0.1, 0.3, 0.3, 0.2])
    monkeypatch.setattr(hx, "selection_score", lambda *a, **k: next(values))
    grid = [{"alpha": a} for a in (0.0, 0.5, 1.0, 2.0)]
    best, scores = hx.select_hyperparams(grid, tiny)
    assert best == {"alpha": 0.5}
    assert scores == [0.1, 0.3, 0.3, 0.2]


def test_empty_grid_is_contract_error(tiny):
    with pytest.raises(ContractError):
        hx.select_hyperparams([], tiny)


# aggregation and plot data

def test_aggregate_mean_and_sample_std():
    vals = [0.2, 0.5, 0.9]
    recs = [_record("ft", s, mia_acc=v) for s, v in enumerate(vals)] + [_record("ga", 0, mia_acc=0.4)]
    rows = {r["method"]: r for r in hx.aggregate(recs)}
    assert rows["ft"]["n"] == 3
    assert abs(rows["ft"]["mia_acc_mean"] - np.mean(vals)) <= 1e-12
    assert abs(rows["ft"]["mia_acc_std"] - np.std(vals, ddof=1)) <= 1e-12
    assert rows["ga"]["mia_acc_std"] == 0.0


def test_aggregate_by_alpha_keeps_non_sg_apart():
    recs = [_record("sg", 0, alpha=1.0), _record("sg", 1, alpha=0.5), _record("ft", 0)]
    rows = hx.aggregate(recs, keys=("method", "alpha"))
    assert [(r["method"], r["alpha"]) for r in rows] == [("ft", ""), ("sg", 0.5), ("sg", 1.0)]
    with pytest.raises(ContractError):
        hx.aggregate([])


def _read(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_alpha_sweep_has_one_row_per_alpha(tmp_path):
    recs = [_record("sg", s, alpha=a) for a in (0.1, 1.0, 5.0) for s in range(2)]
    (path,) = hx.emit_plot_data(recs, "alpha-sweep", tmp_path)
    assert len(_read(path)) == 3


def test_ablation_rows_are_epochs_plus_one(tmp_path):
    recs = []
    for alpha in (0.0, 1.0):
        for s in range(2):
            r = _record("sg", s, alpha=alpha)
            r.curve = [{"epoch": e, "defender_utility": s + e, "acc_te": 0.5, "mia_acc": 0.5,
                        "w_dist": 0.1} for e in range(5)]
            recs.append(r)
    paths = hx.emit_plot_data(recs, "ablation", tmp_path)
    assert sorted(p.name for p in paths) == ["ablation_alpha0.csv", "ablation_alpha1.csv"]
    rows = _read(paths[0])
    assert len(rows) == 5
    assert float(rows[2]["defender_utility"]) == 2.5


def test_loss_histogram_counts_sum_to_sample_sizes(tmp_path, rng):
    r = _record("sg", 0, alpha=1.0)
    r.losses = {"forget": list(rng.exponential(size=37)), "test": list(rng.exponential(size=51)) + [0.0]}
    (path,) = hx.emit_plot_data([r], "loss-hist", tmp_path)
    rows = _read(path)
    assert len(rows) == 30
    assert sum(int(x["forget_count"]) for x in rows) == 37
    assert sum(int(x["test_count"]) for x in rows) == 52


def test_plot_data_rejects_empty_and_unknown(tmp_path):
    with pytest.raises(ContractError):
        hx.emit_plot_data([], "ablation", tmp_path)
    with pytest.raises(ContractError):
        hx.emit_plot_data([_record("sg", 0)], "pie", tmp_path)
    with pytest.raises(ContractError):
        hx.emit_plot_data([_record("sg", 0)], "ablation", tmp_path)


# command line

def test_cli_unlearn_then_audit(tiny_file, tmp_path, capsys):
    out = tmp_path / "runs"
    assert main(["unlearn", "--config", str(tiny_file), "--out-dir", str(out)]) == 0
    (ckpt,) = out.glob("sg_s0_*.ckpt")
    record = json.loads(next(out.glob("sg_s0_*.json")).read_text())
    capsys.readouterr()
    assert main(["audit", "--config", str(tiny_file), "--ckpt", str(ckpt)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert list(report) == sorted(REPORT_FIELDS)
    for f in REPORT_FIELDS:
        if f != "runtime_s":
            assert report[f] == record["metrics"][f], f
    assert main(["report", "--runs", str(out)]) == 0
    assert (out / "report.csv").exists()


def test_cli_environment_output_dir(monkeypatch, tiny_file, tmp_path):
    monkeypatch.setenv(hx.OUT_ENV, str(tmp_path / "env"))
    assert main(["unlearn", "--config", str(tiny_file), "--method", "ga",
                 "--out-dir", str(tmp_path / "flag")]) == 0
    assert list((tmp_path / "env").glob("ga_s0_*.json"))
    assert not (tmp_path / "flag").exists()


def test_cli_gen_data_writes_csv(tiny_file, tmp_path):
    out = tmp_path / "d.csv"
    assert main(["gen-data", "--config", str(tiny_file), "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 181


def test_cli_errors_exit_with_code_two(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[dataset]\n")
    assert main(["unlearn", "--config", str(bad)]) == 2
    assert main(["audit", "--ckpt", str(tmp_path / "missing.ckpt")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["unlearn", "--method", "magic"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
