import json
import shutil
from fractions import Fraction

import pytest

from mpq.cli import RunConfig, main
from mpq.graph import load_dataset, load_model
from mpq.quant import Candidate, derive_quantizer_groups

ARTIFACTS = ("specs.json", "sensitivity.csv", "pareto.csv", "result.json", "eval.json")


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def mlp_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("mlp")
    assert _run("fixture", "--kind", "mlp", "--seed", 0, "--out", out) == 0
    assert _run("run", "--out", out, "--target", 0.5, "--mse-grid", 20) == 0
    return out


def _bops_by_hand(model_dir, result):
    """BOPs recomputed straight from graph.json shapes, without mpq.search."""
    g = load_model(model_dir)
    groups = derive_quantizer_groups(g)
    owner = {}
    for grp in groups:
        for q in grp.members:
            owner[str(q)] = grp.id
    a = {int(k): Candidate.parse(v) for k, v in result["assignment"].items()}
    total = base = 0
    for nid in g.order:
        node = g.nodes[nid]
        if node.kind != "dense":
            continue
        m = node.params["in_features"] * node.params["out_features"]
        src = node.sources()[0]
        act = owner[f"{src}:act"]
        wgt = owner[f"{nid}:weight"]
        total += a[wgt].w_bits * a[act].a_bits * m
        base += 8 * 16 * m
    return Fraction(total, base)


def test_full_pipeline(mlp_dir):
    for name in ARTIFACTS:
        assert (mlp_dir / name).exists()
    res = json.loads((mlp_dir / "result.json").read_text())
    assert res["r"] <= 0.5
    r = _bops_by_hand(mlp_dir / "model", res)
    assert r == Fraction(res["r_exact"]) and float(r) == res["r"]
    assert res["flags"] == []


def test_eval_replay(mlp_dir):
    res = json.loads((mlp_dir / "result.json").read_text())
    ev = json.loads((mlp_dir / "eval.json").read_text())
    assert ev["r_exact"] == res["r_exact"]
    assert abs(ev["value"] - res["performance"]) <= 1e-9
    assert ev["assignment_digest"] == res["assignment_digest"]
    assert ev["num_samples"] == len(load_dataset(mlp_dir / "eval"))


def test_pareto_csv(mlp_dir):
    lines = (mlp_dir / "pareto.csv").read_text().splitlines()
    assert lines[0] == "k,relative_bops,performance,assignment_digest"
    rs = [float(line.split(",")[1]) for line in lines[1:]]
    assert rs[0] == 1.0 and rs == sorted(rs, reverse=True)


def test_rerun_byte_identical(mlp_dir, tmp_path):
    other = tmp_path / "again"
    assert _run("fixture", "--kind", "mlp", "--seed", 0, "--out", other) == 0
    for sub in ("model/graph.json", "model/weights.bin"):
        assert (other / sub).read_bytes() == (mlp_dir / sub).read_bytes()
    assert _run("run", "--out", other, "--target", 0.5, "--mse-grid", 20, "--workers", 4) == 0
    for name in ARTIFACTS:
        assert (other / name).read_bytes() == (mlp_dir / name).read_bytes(), name


def test_workers_identical_csv(mlp_dir, tmp_path):
    for w in (1, 8):
        d = tmp_path / f"w{w}"
        shutil.copytree(mlp_dir, d)
        assert _run("sensitivity", "--out", d, "--workers", w) == 0
    assert (tmp_path / "w1/sensitivity.csv").read_bytes() == (tmp_path / "w8/sensitivity.csv").read_bytes()


def test_binary_matches_sequential(mlp_dir, tmp_path):
    docs = {}
    for strategy in ("sequential", "binary", "hybrid"):
        d = tmp_path / strategy
        shutil.copytree(mlp_dir, d)
        code = _run("search", "--out", d, "--budget-kind", "performance", "--target", 0.9,
                    "--eval-metric", "accuracy", "--strategy", strategy)
        assert code == 0
        docs[strategy] = json.loads((d / "result.json").read_text())
    assert docs["binary"]["assignment"] == docs["sequential"]["assignment"]
    assert docs["hybrid"]["assignment"] == docs["sequential"]["assignment"]
    assert docs["binary"]["evaluations_used"] <= docs["sequential"]["evaluations_used"] + 2


def test_budget_unmet_exit_code(mlp_dir, tmp_path, capsys):
    d = tmp_path / "unmet"
    shutil.copytree(mlp_dir, d)
    assert _run("search", "--out", d, "--budget-kind", "efficiency", "--target", 0.05) == 2
    res = json.loads((d / "result.json").read_text())
    assert res["flags"] == ["budget_unmet"] and res["r"] == 0.25
    assert _run("search", "--out", d, "--budget-kind", "performance", "--target", 2.0) == 2


def test_missing_prerequisite(mlp_dir, tmp_path, capsys):
    d = tmp_path / "bare"
    shutil.copytree(mlp_dir / "model", d / "model")
    shutil.copytree(mlp_dir / "eval", d / "eval")
    shutil.copytree(mlp_dir / "calib", d / "calib")
    assert _run("sensitivity", "--out", d) == 1
    err = capsys.readouterr().err
    assert "specs.json" in err and "mpq calibrate" in err
    assert _run("calibrate", "--out", d, "--mse-grid", 10) == 0
    assert _run("search", "--out", d) == 1
    assert "sensitivity.csv" in capsys.readouterr().err
    assert _run("eval", "--out", d) == 1
    assert "result.json" in capsys.readouterr().err
    assert _run("sensitivity", "--out", d, "--weights", "adaround") == 1
    assert "mpq adaround" in capsys.readouterr().err


def test_bad_arguments(mlp_dir, capsys):
    assert _run("search", "--out", mlp_dir / "nowhere", "--model", mlp_dir / "missing") == 1
    assert _run("search", "--out", mlp_dir, "--candidates", "W8") == 1
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        _run("search", "--out", mlp_dir, "--strategy", "random")


def test_config_file(mlp_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"candidates": ["W4A8", "W8A16"], "budget": {"kind": "efficiency", "target": 0.3},
                               "strategy": "sequential", "seed": 3}))
    loaded = RunConfig.from_json(json.loads(cfg.read_text()))
    assert loaded.target == 0.3 and loaded.candidates == "W4A8,W8A16" and loaded.seed == 3
    d = tmp_path / "cfgrun"
    shutil.copytree(mlp_dir, d)
    assert _run("run", "--out", d, "--config", cfg, "--target", 0.5, "--mse-grid", 10) == 0
    res = json.loads((d / "result.json").read_text())
    assert res["budget"]["target"] == 0.5  # flag beats file
    assert res["candidates"] == ["W4A8", "W8A16"]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": "red"}))
    assert _run("search", "--out", d, "--config", bad) == 1


def test_adaround_weights(tmp_path):
    d = tmp_path / "ada"
    assert _run("fixture", "--kind", "mlp", "--seed", 1, "--out", d) == 0
    assert _run("run", "--out", d, "--weights", "adaround", "--iters", 100, "--mse-grid", 10) == 0
    assert (d / "adaround_cache" / "manifest.json").exists()
    res = json.loads((d / "result.json").read_text())
    ev = json.loads((d / "eval.json").read_text())
    assert res["weights"] == "adaround"
    assert abs(ev["value"] - res["performance"]) <= 1e-9


def test_report(mlp_dir, capsys):
    assert _run("report", "--out", mlp_dir) == 0
    rep = json.loads((mlp_dir / "report.json").read_text())
    assert rep["range"] >= 0
