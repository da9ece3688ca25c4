import math

import numpy as np
import pytest
from scipy import stats

from helpers import chain_mlp, dense
from mpq.fixtures import make_fixture
from mpq.graph import Dataset, build_graph, logits
from mpq.quant import (
    Candidate,
    calibrate,
    derive_quantizer_groups,
    fit_range_minmax,
    parse_candidates,
    qdq,
    quantized_forward,
)
from mpq.sensitivity import (
    SensitivityEntry,
    SensitivityList,
    build_sensitivity_list,
    kendall_tau,
    score_candidate,
    sensitivity_report,
)

B3 = parse_candidates("W4A8,W8A8,W8A16")


@pytest.fixture(scope="module")
def mlp_setup():
    fx = make_fixture("mlp", 0, calib_size=128, eval_size=256)
    specs = calibrate(fx.graph, fx.calib, B3, grid=20)
    return fx, specs, derive_quantizer_groups(fx.graph)


def test_kendall_examples():
    assert kendall_tau([1, 2, 3, 4], [1, 2, 3, 4]) == 1.0
    assert kendall_tau([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
    assert kendall_tau([1, 2, 3], [1, 3, 2]) == pytest.approx(1 / 3)
    with pytest.raises(ValueError, match="different"):
        kendall_tau([1, 2], [1, 3])
    with pytest.raises(ValueError, match="duplicate"):
        kendall_tau([1, 1], [1, 1])


def test_kendall_matches_scipy():
    rng = np.random.default_rng(0)
    for n in (2, 3, 7, 20):
        for _ in range(10):
            a = list(rng.permutation(n))
            b = list(rng.permutation(n))
            rank_b = [b.index(x) for x in a]
            ref = stats.kendalltau(np.arange(n), rank_b).statistic
            assert kendall_tau(a, b) == pytest.approx(ref, abs=1e-12)


def test_list_cardinality_and_order(mlp_setup):
    fx, specs, groups = mlp_setup
    sl = build_sensitivity_list(fx.graph, specs, groups, B3, fx.calib)
    assert len(sl.entries) == len(groups) * 2
    assert all(e.candidate != Candidate(8, 16) for e in sl.entries)
    keys = [e.sort_key() for e in sl.entries]
    assert keys == sorted(keys)
    # the logits group's activation width feeds no MACs, so its W8A8 saving is 0
    assert all(e.bops_delta >= 0 for e in sl.entries)


def test_two_groups_four_entries():
    g = chain_mlp([3, 4, 2])  # fc0 -> relu0 -> fc1
    groups = derive_quantizer_groups(g)
    assert len(groups) == 2
    calib = Dataset(np.random.default_rng(0).standard_normal((16, 3)).astype(np.float32))
    specs = calibrate(g, calib, B3, grid=5)
    assert len(build_sensitivity_list(g, specs, groups, B3, calib).entries) == 4


def test_single_group_order_is_fidelity():
    g = build_graph([dense("fc", [], 6, 3, 0)], [6], "fc",
                    np.random.default_rng(1).standard_normal(18))
    groups = derive_quantizer_groups(g)
    calib = Dataset(np.random.default_rng(2).standard_normal((32, 6)).astype(np.float32))
    cands = parse_candidates("W2A4,W4A8,W8A8,W8A16")
    specs = calibrate(g, calib, cands, grid=10)
    sl = build_sensitivity_list(g, specs, groups, cands, calib)
    brute = sorted(
        (c for c in cands if c.name != "W8A16"),
        key=lambda c: -score_candidate(g, specs, groups, 0, c, calib),
    )
    assert [e.candidate for e in sl.entries] == brute
    assert [e.candidate.name for e in sl.entries] == ["W8A8", "W4A8", "W2A4"]


def test_sqnr_score_by_hand():
    # W2 min-max fit on W=[0.4, 0.1]: s = 0.4, so 0.1 rounds to 0
    w = np.array([0.4, 0.1])
    g = build_graph([dense("fc", [], 2, 1, 0)], [2], "fc", w)
    groups = derive_quantizer_groups(g)
    x = np.random.default_rng(3).uniform(0.5, 2.0, (20, 2)).astype(np.float32)
    calib = Dataset(x)
    specs = calibrate(g, calib, [Candidate(2, 16), Candidate(8, 16)], method="minmax")
    # oracle: standalone qdq of weights and activations, then the SQNR formula
    wq = qdq(w.reshape(1, 2), fit_range_minmax(w.reshape(1, 2), 2, True, 0)).astype(np.float64)
    xq = qdq(x, fit_range_minmax(x, 16, False)).astype(np.float64)
    yq = xq @ wq.T
    yq = qdq(yq, specs[groups[0].activation_quantizers[-1]][16]).astype(np.float64)
    fp = logits(g, x).astype(np.float64)
    ratio = np.mean(np.minimum(fp[:, 0] ** 2 / (fp[:, 0] - yq[:, 0]) ** 2, 1e10))
    got = score_candidate(g, specs, groups, 0, Candidate(2, 16), calib)
    assert got == pytest.approx(10 * math.log10(ratio), abs=1e-3)


def test_harmless_candidate_scores():
    g = build_graph([dense("fc", [], 2, 2, 0)], [2], "fc", np.eye(2).ravel())
    groups = derive_quantizer_groups(g)
    x = np.array([[-128.0, 127.0], [127.0, -128.0], [3.0, 5.0]], dtype=np.float32)
    calib = Dataset(x, np.argmax(x, axis=1))
    specs = calibrate(g, calib, [Candidate(8, 8)], method="minmax")
    assert score_candidate(g, specs, groups, 0, Candidate(8, 8), calib) == 100.0
    assert score_candidate(g, specs, groups, 0, Candidate(8, 8), calib, "accuracy") == 1.0
    assert score_candidate(g, specs, groups, 0, Candidate(8, 8), calib, "mse") == 0.0
    with pytest.raises(ValueError, match="metric"):
        score_candidate(g, specs, groups, 0, Candidate(8, 8), calib, "f1")


@pytest.mark.parametrize("metric", ["sqnr", "accuracy", "xent", "mse"])
def test_metric_sign_convention(mlp_setup, metric):
    fx, specs, groups = mlp_setup
    for g in groups:
        lo = score_candidate(fx.graph, specs, groups, g.id, Candidate(4, 8), fx.calib, metric)
        hi = score_candidate(fx.graph, specs, groups, g.id, Candidate(8, 16), fx.calib, metric)
        if metric != "accuracy":
            assert hi >= lo - 1e-9


def test_isolation(mlp_setup):
    fx, specs, groups = mlp_setup
    before = {q: {b: s.scale.copy() for b, s in v.items()} for q, v in specs.items()}
    w_before = {k: v.copy() for k, v in fx.graph.weights.items()}
    build_sensitivity_list(fx.graph, specs, groups, B3, fx.calib)
    for q, v in specs.items():
        for b, s in v.items():
            assert s.scale.tobytes() == before[q][b].tobytes()
    for k, v in fx.graph.weights.items():
        assert v.tobytes() == w_before[k].tobytes()
    # scoring group 1 perturbs only group-1 tensors
    q = quantized_forward(fx.graph, {1: Candidate(4, 8)}, specs, fx.calib.samples, groups=groups)
    assert not np.array_equal(q, logits(fx.graph, fx.calib.samples))


def test_workers_identical_csv(mlp_setup):
    fx, specs, groups = mlp_setup
    one = build_sensitivity_list(fx.graph, specs, groups, B3, fx.calib, workers=1)
    many = build_sensitivity_list(fx.graph, specs, groups, B3, fx.calib, workers=8)
    assert one.to_csv() == many.to_csv()


def test_csv_roundtrip(tmp_path, mlp_setup):
    fx, specs, groups = mlp_setup
    sl = build_sensitivity_list(fx.graph, specs, groups, B3, fx.calib, seed=7)
    sl.save(tmp_path / "sensitivity.csv")
    header = (tmp_path / "sensitivity.csv").read_text().splitlines()[0]
    assert header == "rank,group_id,candidate,score,bops_delta,metric"
    back = SensitivityList.load(tmp_path / "sensitivity.csv")
    assert back.entries == sl.entries
    assert back.candidates == sl.candidates
    assert back.metadata["seed"] == 7
    assert back.metadata["calibration_fingerprint"] == fx.calib.fingerprint()
    with pytest.raises(FileNotFoundError, match="mpq sensitivity"):
        SensitivityList.load(tmp_path / "missing.csv")


def test_tie_break_rule():
    c8, c4 = Candidate(8, 8), Candidate(4, 8)
    entries = [SensitivityEntry(1, c8, 10.0, 5), SensitivityEntry(0, c8, 10.0, 5),
               SensitivityEntry(2, c4, 10.0, 9), SensitivityEntry(3, c4, 11.0, 1)]
    entries.sort(key=SensitivityEntry.sort_key)
    assert [e.group for e in entries] == [3, 2, 0, 1]


def test_report_examples():
    c = Candidate(8, 8)
    cap = SensitivityList([SensitivityEntry(g, c, 100.0, 1) for g in range(3)], "sqnr", [c])
    assert sensitivity_report(cap)["range"] == 0.0
    one = SensitivityList([SensitivityEntry(0, c, 10.0, 1), SensitivityEntry(1, c, 100.0, 1)], "sqnr", [c])
    rep = sensitivity_report(one, threshold_db=20.0)
    assert rep["range"] == 90.0 and rep["flagged"] == [0]
    with pytest.raises(ValueError):
        sensitivity_report(SensitivityList([], "sqnr", [c]))


def test_surrogate_agreement(mlp_setup):
    fx, specs, groups = mlp_setup
    sq = build_sensitivity_list(fx.graph, specs, groups, B3, fx.calib, "sqnr").items()
    gt = build_sensitivity_list(fx.graph, specs, groups, B3, fx.eval, "accuracy").items()
    assert kendall_tau(sq, gt) >= 0.5


def test_sensitive_group_ranked_last():
    fx = make_fixture("mlp", 1, calib_size=128, eval_size=16)
    specs = calibrate(fx.graph, fx.calib, B3, grid=20)
    groups = derive_quantizer_groups(fx.graph)
    sl = build_sensitivity_list(fx.graph, specs, groups, B3, fx.calib)
    sens = next(g.id for g in groups if fx.sensitive in g.weight_nodes)
    w8a8 = [(e.group, e.candidate.name) for e in sl.entries if e.candidate.name == "W8A8"]
    assert w8a8[-1][0] == sens
