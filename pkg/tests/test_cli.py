import json

import numpy as np
import pytest

from stratacausal import cli, dgp, panel_io


def _run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def genpop_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("gp")
    assert _run("genpop", "--scenario", 1, "--size", 1000, "--seed", 3, "--out-dir", out,
                "--sample", 600) == 0
    return out


def test_genpop_population_and_manifest(genpop_dir):
    lines = (genpop_dir / "population.csv").read_text().splitlines()
    assert len(lines) == 1001
    assert tuple(lines[0].split(",")) == dgp.POPULATION_COLUMNS
    doc = json.loads((genpop_dir / "manifest.json").read_text())
    assert dgp.ParameterSet.from_dict(doc["params"]) == dgp.scenario_params(1)


def test_genpop_full_size_oracle(tmp_path):
    assert _run("genpop", "--scenario", 3, "--size", 1_000_000, "--seed", 11,
                "--out-dir", tmp_path, "--truths") == 0
    truths = json.loads((tmp_path / "true_effects.json").read_text())
    assert abs(truths["111,000"] - (-4.032)) < 0.03
    assert abs(truths["11,00"] - (-3.062)) < 0.03


def _study(tmp_path):
    cfg = {"scenario": 2, "sample_sizes": [300], "n_replications": 2, "population_size": 20000,
           "methods": {"naive": {"n_boot": 20}, "proposed": {"B": 3, "simplified": True}}}
    path = tmp_path / "study.json"
    path.write_text(json.dumps(cfg))
    return path


def test_simulate_byte_identical(tmp_path):
    cfg = _study(tmp_path)
    for d in ("a", "b"):
        assert _run("simulate", "--config", cfg, "--seed", 42, "--out-dir", tmp_path / d) == 0
    for name in ("raw_estimates.csv", "metrics.csv", "metrics.json", "comparison.json", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_missing_field(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"scenario": 1, "methods": {"naive": {}}}))
    assert _run("simulate", "--config", path, "--out-dir", tmp_path) == 2
    assert "$.n_replications" in capsys.readouterr().err


def test_simulate_bad_type_path(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"scenario": 1, "n_replications": 2,
                                "methods": {"proposed": {"B": "many"}}}))
    assert _run("simulate", "--config", path, "--out-dir", tmp_path) == 2
    assert "$.methods.proposed.B" in capsys.readouterr().err


def test_quick_profile_resolution():
    args = cli.build_parser().parse_args(["simulate", "--scenario", "1", "--quick"])
    doc = cli.resolve_study(args)
    assert doc["population_size"] == cli.QUICK_PROFILE["population_size"]
    assert doc["n_replications"] == 5
    assert doc["methods"]["proposed"]["B"] == 10
    assert doc["methods"]["msm"]["n_boot"] == 50


def test_estimate_round_trip(genpop_dir, tmp_path):
    out = tmp_path / "est"
    assert _run("estimate", "--panel", genpop_dir / "panel.csv", "--schema",
                genpop_dir / "panel_schema.json", "--method", "proposed", "--B", 4,
                "--seed", 8, "--out-dir", out) == 0
    got = json.loads((out / "estimates.json").read_text())
    schema = panel_io.PanelSchema.load(genpop_dir / "panel_schema.json")
    panel = panel_io.read_panel_csv(genpop_dir / "panel.csv", schema)
    labels = [g["contrast"] for g in got]
    ref = cli.run_estimate(panel, "proposed", labels, "glm", 8, 4, 200)
    for g, r in zip(got, ref):
        assert g["delta_bar"] == r.delta_bar
        assert (g["ci_low"], g["ci_high"]) == (r.ci_low, r.ci_high)
    assert got[6]["label"] == "6 years vs. no shock"


def test_estimate_masked_layout_matches_wide(genpop_dir, tmp_path):
    schema = {"layout": "masked", "waves": 3, "treatment": ["z1", "z2", "z3"],
              "outcome": ["y1", "y2", "y3"], "survival": ["s1", "s2", "s3"]}
    (tmp_path / "m.json").write_text(json.dumps(schema))
    for name, panel, sch in (("w", "panel.csv", genpop_dir / "panel_schema.json"),
                             ("m", "panel_masked.csv", tmp_path / "m.json")):
        assert _run("estimate", "--panel", genpop_dir / panel, "--schema", sch, "--method", "naive",
                    "--n-boot", 20, "--out-dir", tmp_path / name) == 0
    assert (tmp_path / "w" / "estimates.json").read_text() == (tmp_path / "m" / "estimates.json").read_text()


def test_estimate_rejects_resurrection(tmp_path, capsys):
    (tmp_path / "p.csv").write_text("id,v,z1,z2,y1,y2,s1,s2\n1,0,0,0,1,1,1,1\n42,0,0,0,1,2,1,0\n")
    schema = {"id": "id", "baseline": ["v"], "waves": 2, "treatment": ["z1", "z2"],
              "outcome": ["y1", "y2"], "survival": ["s1", "s2"]}
    (tmp_path / "s.json").write_text(json.dumps(schema))
    assert _run("estimate", "--panel", tmp_path / "p.csv", "--schema", tmp_path / "s.json",
                "--out-dir", tmp_path) == 2
    assert "subject 42" in capsys.readouterr().err


def test_estimate_parse_error_line(tmp_path, capsys):
    (tmp_path / "p.csv").write_text("id,v,z1,y1,s1\n1,0,0,1,1\n2,0,x,1,1\n")
    schema = {"id": "id", "baseline": ["v"], "waves": 1, "treatment": ["z1"],
              "outcome": ["y1"], "survival": ["s1"]}
    (tmp_path / "s.json").write_text(json.dumps(schema))
    assert _run("estimate", "--panel", tmp_path / "p.csv", "--schema", tmp_path / "s.json",
                "--out-dir", tmp_path) == 2
    assert "line 3" in capsys.readouterr().err


def test_estimate_estimator_error_verbatim(genpop_dir, tmp_path, capsys):
    assert _run("estimate", "--panel", genpop_dir / "panel.csv", "--schema",
                genpop_dir / "panel_schema.json", "--method", "proposed", "--B", 1,
                "--out-dir", tmp_path) == 1
    assert "need B >= 2 replicates" in capsys.readouterr().err


def test_zero_death_panel_proposed_matches_pencomp(tmp_path):
    d = dgp.scenario_params(1).to_dict()
    d["alpha"] = dict.fromkeys(d["alpha"], 0.0)
    d["alpha"]["a0"] = 40.0
    pop = dgp.generate_population(dgp.ParameterSet.from_dict(d), 40_000, 5)
    panel = dgp.sample_observed(pop, 3000, 6)
    schema = panel_io.write_panel_csv(panel, tmp_path / "p.csv")
    (tmp_path / "s.json").write_text(json.dumps(schema.to_dict()))
    res = {}
    for m in ("naive", "proposed", "pencomp"):
        assert _run("estimate", "--panel", tmp_path / "p.csv", "--schema", tmp_path / "s.json",
                    "--method", m, "--B", 10, "--n-boot", 50, "--contrast", "11,00",
                    "--out-dir", tmp_path / m) == 0
        res[m] = json.loads((tmp_path / m / "estimates.json").read_text())[0]
    a, b = res["proposed"], res["pencomp"]
    assert abs(a["delta_bar"] - b["delta_bar"]) < 3 * np.hypot(np.sqrt(a["T_B"]), np.sqrt(b["T_B"]))


def test_compare_command(tmp_path, capsys):
    from stratacausal import simharness as sh

    ref = sh.load_reference()
    f = ref.assign(n_reps=200, bias_mcse=ref.rmse / np.sqrt(200), coverage_mcse=0.0)
    f.to_csv(tmp_path / "metrics.csv", index=False)
    assert _run("compare", "--metrics", tmp_path / "metrics.csv", "--out-dir", tmp_path) == 0
    assert json.loads((tmp_path / "comparison.json").read_text())["all_pass"] is True
    assert "FAIL" not in capsys.readouterr().out


def test_duration_labels():
    from stratacausal.panel import Contrast

    assert cli.contrast_label(Contrast.parse("111,000")) == "6 years vs. no shock"
    assert cli.contrast_label(Contrast.parse("11,01")) == "4 years vs. 2 years"
