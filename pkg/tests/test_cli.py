import json

import pytest

from impute_ate.cli import main
from impute_ate.io import read_json, write_csv_dataset

from conftest import make_dataset


@pytest.fixture
def data_csv(tmp_path, rng):
    ds = make_dataset(rng, n=60, d=2)
    path = tmp_path / "d.csv"
    write_csv_dataset(ds, str(path))
    return str(path)


def write_config(tmp_path, doc, name="c.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def test_estimate_writes_report(tmp_path, data_csv):
    cfg = write_config(
        tmp_path,
        {
            "smoother": {"type": "wnn", "M": 4},
            "adjuster": {"type": "polynomial", "degree": 1},
        },
    )
    out = str(tmp_path / "r.json")
    assert main(["estimate", "--data", data_csv, "--config", cfg, "--out", out]) == 0
    report = read_json(out)
    est = report["estimate"]
    c = est["components"]
    reassembled = (
        c["regression"]
        + c["treated_residual"]
        - c["control_residual"]
        + c["unnormalized_bias"]
    )
    assert abs(reassembled - est["tau_hat"]) <= 1e-10
    assert report["provenance"]["data"]["n"] == 60
    assert len(report["provenance"]["data"]["fingerprint"]) == 64


def test_estimate_is_seed_reproducible(tmp_path, data_csv):
    cfg = write_config(
        tmp_path,
        {"smoother": {"type": "forest", "trees": 12, "min_leaf": 3}, "mode": {"type": "full"}},
    )
    out_a = str(tmp_path / "a.json")
    out_b = str(tmp_path / "b.json")
    assert main(["estimate", "--data", data_csv, "--config", cfg, "--out", out_a, "--seed", "5"]) == 0
    assert main(["estimate", "--data", data_csv, "--config", cfg, "--out", out_b, "--seed", "5"]) == 0
    a, b = read_json(out_a), read_json(out_b)
    assert a["estimate"] == b["estimate"]


def test_estimate_crossfit_mode(tmp_path, data_csv):
    cfg = write_config(
        tmp_path,
        {
            "smoother": {"type": "kernel"},
            "mode": {"type": "crossfit", "folds": 2},
            "adjuster": {"type": "polynomial", "degree": 1},
        },
    )
    out = str(tmp_path / "r.json")
    assert main(["estimate", "--data", data_csv, "--config", cfg, "--out", out]) == 0
    assert read_json(out)["estimate"]["method"]["mode"] == "crossfit-2"


def test_nonstandard_confidence_level(tmp_path, data_csv):
    cfg = write_config(tmp_path, {"smoother": {"type": "kernel"}})
    out = str(tmp_path / "r.json")
    assert main(
        ["estimate", "--data", data_csv, "--config", cfg, "--out", out, "--confidence", "0.9"]
    ) == 0
    est = read_json(out)["estimate"]
    assert est["ci"]["level"] == 0.9
    width_90 = est["ci"]["upper"] - est["ci"]["lower"]
    width_95 = est["ci95"][1] - est["ci95"][0]
    assert width_90 < width_95


def test_config_error_exit_code(tmp_path, data_csv):
    cfg = write_config(tmp_path, {"smoother": {"type": "wnn", "gamma": [0.5, 0.6]}})
    assert main(["estimate", "--data", data_csv, "--config", cfg, "--out", str(tmp_path / "r.json")]) == 2


def test_command_mismatch_is_config_error(tmp_path, data_csv):
    cfg = write_config(tmp_path, {"command": "simulate", "smoother": {"type": "kernel"}})
    assert main(["estimate", "--data", data_csv, "--config", cfg, "--out", str(tmp_path / "r.json")]) == 2


def test_data_error_exit_code(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("x1,d,y\n0.2,2,3.0\n")
    cfg = write_config(tmp_path, {"smoother": {"type": "kernel"}})
    assert main(["estimate", "--data", str(bad), "--config", cfg, "--out", str(tmp_path / "r.json")]) == 3


def test_internal_consistency_exit_code(tmp_path, data_csv, monkeypatch):
    from impute_ate import cli as cli_mod
    from impute_ate.estimation import AipwComponents, AteEstimate

    def doctored(self, ds):
        return AteEstimate(
            tau_hat=1.0,
            components=AipwComponents(0.0, 0.0, 0.0, 0.0),
            sigma2_hat=1.0,
            n=ds.n,
        )

    monkeypatch.setattr(cli_mod.ImputationAte, "estimate", doctored)
    cfg = write_config(tmp_path, {"smoother": {"type": "kernel"}})
    assert main(["estimate", "--data", data_csv, "--config", cfg, "--out", str(tmp_path / "r.json")]) == 4


def test_weights_subcommand(tmp_path, data_csv):
    cfg = write_config(tmp_path, {"command": "weights", "smoother": {"type": "wnn", "M": 3}})
    out = str(tmp_path / "w.csv")
    assert main(["weights", "--data", data_csv, "--config", cfg, "--out", out]) == 0
    lines = open(out).read().strip().splitlines()
    assert lines[0] == "i,j,w"
    assert len(lines) == 1 + 60 * 3
    summary = read_json(out + ".summary.json")
    assert summary["summary"]["fallback_count"] == 0
    assert len(summary["row_sum"]) == 60


def test_bound_subcommand(tmp_path, capsys):
    cfg = write_config(tmp_path, {"dgp": "benchmark"})
    assert main(["bound", "--config", cfg]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["sigma2"] == pytest.approx(49 / 12, abs=1e-9)
    assert payload["tau"] == pytest.approx(0.5, abs=1e-12)


def test_bound_unknown_dgp(tmp_path):
    cfg = write_config(tmp_path, {"dgp": "mystery"})
    assert main(["bound", "--config", cfg]) == 2


def test_simulate_subcommand(tmp_path):
    cfg = write_config(
        tmp_path,
        {
            "dgp": "benchmark",
            "smoother": {"type": "wnn", "M": 8},
            "adjuster": {"type": "polynomial", "degree": 1},
            "n_grid": [80],
            "replications": 10,
            "seed": 3,
        },
    )
    out = str(tmp_path / "report.json")
    rows = str(tmp_path / "rows.csv")
    assert main(["simulate", "--config", cfg, "--out", out, "--rows", rows]) == 0
    report = read_json(out)
    assert report["results"]["80"]["completed"] == 10
    lines = open(rows).read().strip().splitlines()
    assert lines[0].startswith("n,replication,tau_hat")
    assert len(lines) == 11


def test_simulate_reproducible(tmp_path):
    cfg = write_config(
        tmp_path,
        {
            "dgp": "benchmark",
            "smoother": {"type": "kernel"},
            "n_grid": [60],
            "replications": 6,
            "seed": 12,
        },
    )
    out_a, out_b = str(tmp_path / "a.json"), str(tmp_path / "b.json")
    assert main(["simulate", "--config", cfg, "--out", out_a]) == 0
    assert main(["simulate", "--config", cfg, "--out", out_b]) == 0
    assert read_json(out_a)["results"] == read_json(out_b)["results"]


def test_forest_diag_subcommand(tmp_path, capsys):
    cfg = write_config(
        tmp_path,
        {
            "forest_diag": {"n": 96, "dim": 1, "s_grid": [16, 48], "trees": 4, "min_leaf": 4},
            "seed": 2,
        },
    )
    out = str(tmp_path / "p.json")
    assert main(["forest-diag", "--config", cfg, "--out", out]) == 0
    payload = read_json(out)
    keys = sorted(payload["profiles"])
    assert keys == ["s=16,theta=4,B=4", "s=48,theta=4,B=4"]
    small = payload["profiles"]["s=16,theta=4,B=4"]["mean_diameter"]
    large = payload["profiles"]["s=48,theta=4,B=4"]["mean_diameter"]
    assert large < small
