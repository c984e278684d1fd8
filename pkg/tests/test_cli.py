import csv
import re

import numpy as np
import pytest

from trialcate.cli import main
from trialcate.config import ConfigError, parse_config
from trialcate.evaluation import aggregate, aggregate_fields, read_metrics

SMALL = """\
seed: 3
dgp: {n_source: 3000}
simulate: {trial_size: 300}
grid: {trial_sizes: [200, 300], dim_x1_values: [2], coef_x2_values: [0.5], replicates: 2}
forest: {num_trees: 25}
"""


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture()
def cfg(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(SMALL, encoding="utf-8")
    return path


@pytest.fixture()
def simulated(tmp_path, cfg):
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "sim")]) == 0
    return tmp_path / "sim"


def test_simulate_default_sizes(tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    with open(tmp_path / "source.csv", encoding="utf-8") as fh:
        assert sum(1 for _ in fh) == 100_001
    with open(tmp_path / "trial.csv", encoding="utf-8") as fh:
        n_trial = sum(1 for _ in fh) - 1
    assert abs(n_trial - 2000) <= 100
    assert f"trial size: {n_trial}" in out and "mu:" in out


def test_simulate_rerun_identical(tmp_path, cfg, simulated):
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    for name in ("source.csv", "trial.csv"):
        assert (simulated / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_seed_override_changes_output(tmp_path, cfg, simulated):
    assert main(["simulate", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "s4")]) == 0
    assert (simulated / "trial.csv").read_bytes() != (tmp_path / "s4" / "trial.csv").read_bytes()


def test_bad_key_fails_without_output(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("seed: 1\ndgp:\n  n_sorce: 10\n", encoding="utf-8")
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(path), "--out", str(out)]) == 1
    assert "line 3" in capsys.readouterr().err
    assert not out.exists()
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".trialcate-")]


def test_unknown_top_level_key_line():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("seed: 1\nsede: 2\n")


def test_missing_referenced_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config("apply:\n  trial: nope.csv\n", base_dir=tmp_path)


def test_invalid_value_is_config_error():
    with pytest.raises(ConfigError):
        parse_config("forest: {num_trees: 0}\n")
    with pytest.raises(ConfigError):
        parse_config("estimators:\n  - {model: M9}\n")


def test_usage_errors_exit_one(capsys):
    assert main(["frobnicate"]) == 1
    assert main(["plot"]) == 1
    assert main(["replicate", "--parallelism", "0"]) == 1


def test_runtime_error_exit_two(tmp_path, simulated):
    bad = tmp_path / "bad_trial.csv"
    text = (simulated / "trial.csv").read_text(encoding="utf-8").splitlines()
    header = text[0].split(",")
    row = text[1].split(",")
    row[header.index("a")] = "2.0"
    bad.write_text("\n".join([text[0], ",".join(row)] + text[2:]) + "\n", encoding="utf-8")
    out = tmp_path / "o"
    code = main(["apply", "--trial", str(bad), "--source", str(simulated / "source.csv"), "--out", str(out)])
    assert code == 2
    assert not out.exists()


def test_out_dir_env_override(tmp_path, cfg, monkeypatch):
    monkeypatch.setenv("TRIALCATE_OUT", str(tmp_path / "envout"))
    assert main(["simulate", "--config", str(cfg)]) == 0
    assert (tmp_path / "envout" / "trial.csv").exists()


def test_replicate_smoke_and_reaggregation(tmp_path, cfg):
    out = tmp_path / "rep"
    assert main(["replicate", "--config", str(cfg), "--out", str(out)]) == 0
    metrics = read_metrics(out / "metrics.csv")
    agg = _rows(out / "aggregate.csv")
    assert len(metrics) == 2 * 2 * 8
    assert len(agg) == 2 * 8
    assert list(agg[0].keys()) == aggregate_fields()
    again = aggregate(metrics)
    for mine, theirs in zip(again, agg):
        for key, value in mine.items():
            if isinstance(value, float):
                assert (np.isnan(value) and theirs[key] == "nan") or float(theirs[key]) == value
            else:
                assert str(value) == theirs[key]


def test_apply_round_trip(tmp_path, cfg, simulated):
    out = tmp_path / "app"
    code = main(["apply", "--config", str(cfg), "--trial", str(simulated / "trial.csv"),
                 "--source", str(simulated / "source.csv"), "--out", str(out)])
    assert code == 0
    preds = _rows(out / "predictions.csv")
    n_source = 3000
    aim_a = [p for p in preds if p["aim"] == "A"]
    assert len(aim_a) == n_source * 2
    assert {p["model"] for p in preds} == {"M1_IPW", "M2_IPW"}
    weights = _rows(out / "weights.csv")
    n_trial = sum(1 for _ in open(simulated / "trial.csv")) - 1
    assert len(weights) == n_trial
    w = np.array([float(r["weight"]) for r in weights])
    assert abs(w.mean() - 1) < 1e-12
    gate = _rows(out / "gate.csv")
    assert [g["group"] for g in gate[:4]] == ["T1", "T2", "T3", "ATE"]


def _shuffle_x2(src, dst, seed):
    rows = _rows(src)
    names = list(rows[0].keys())
    x2 = [c for c in names if c.startswith("x2_")]
    perm = np.random.default_rng(seed).permutation(len(rows))
    shuffled = [dict(r) for r in rows]
    for i, j in enumerate(perm):
        for c in x2:
            shuffled[i][c] = rows[j][c]
    with open(dst, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, names, lineterminator="\n")
        w.writeheader()
        w.writerows(shuffled)


def test_apply_m1_ignores_source_x2(tmp_path, simulated):
    path = tmp_path / "m1.yaml"
    path.write_text("forest: {num_trees: 25}\ndgp: {n_source: 3000}\nestimators:\n"
                    "  - {model: M1, aim: A}\n  - {model: M1, aim: B}\n", encoding="utf-8")
    _shuffle_x2(simulated / "source.csv", tmp_path / "shuffled.csv", seed=1)
    outs = []
    for name, src in (("plain", simulated / "source.csv"), ("shuf", tmp_path / "shuffled.csv")):
        out = tmp_path / name
        assert main(["apply", "--config", str(path), "--trial", str(simulated / "trial.csv"),
                     "--source", str(src), "--out", str(out)]) == 0
        outs.append((out / "predictions.csv").read_bytes())
    assert outs[0] == outs[1]


def test_apply_disjoint_trial_mode(tmp_path, simulated):
    path = tmp_path / "disjoint.yaml"
    path.write_text("forest: {num_trees: 20}\napply:\n  trial_in_source: false\n"
                    "  schema: {X1: [x1_01, x1_02], X2: [x2_01, x2_02, x2_03], treatment: a, outcome: y}\n",
                    encoding="utf-8")
    out = tmp_path / "dis"
    assert main(["apply", "--config", str(path), "--trial", str(simulated / "trial.csv"),
                 "--source", str(simulated / "source.csv"), "--out", str(out)]) == 0
    assert len(_rows(out / "predictions.csv")) == 4 * 3000


def test_plot_from_replicate(tmp_path, cfg):
    rep = tmp_path / "rep"
    assert main(["replicate", "--config", str(cfg), "--out", str(rep)]) == 0
    p1, p2 = tmp_path / "p1", tmp_path / "p2"
    assert main(["plot", "--metrics", str(rep / "metrics.csv"), "--out", str(p1)]) == 0
    assert main(["plot", "--metrics", str(rep / "metrics.csv"), "--out", str(p2)]) == 0
    files = sorted(p.name for p in p1.iterdir())
    assert len(files) == 2 * 3
    for name in files:
        assert (p1 / name).read_bytes() == (p2 / name).read_bytes()
    text = (p1 / "aimA_mse_dimx1-2.svg").read_text(encoding="utf-8")
    assert text.count("<polyline") == 4
    assert re.findall(r'class="xtick"[^>]*>([^<]+)<', text) == ["200", "300"]


def test_plot_empty_input(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("scenario,model,aim,trial_size,dim_x1,coef_x2,replicate,mse,bias,variance,status\n",
                    encoding="utf-8")
    assert main(["plot", "--metrics", str(path), "--out", str(tmp_path / "p")]) == 2
