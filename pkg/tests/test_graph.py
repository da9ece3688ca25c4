import json

import numpy as np
import pytest

from helpers import chain_mlp, conv, dense, op, write_model
from mpq.fixtures import KINDS, make_fixture
from mpq.graph import (
    CycleError,
    Dataset,
    GraphError,
    Node,
    build_graph,
    forward,
    load_dataset,
    load_model,
    logits,
    save_dataset,
    save_model,
    topo_order,
)


def _doc(nodes, input_shape, output):
    recs = []
    for n in nodes:
        rec = {"id": n.id, "kind": n.kind, "params": n.params, "inputs": list(n.inputs)}
        if n.weight_offset is not None:
            rec["weight_offset"], rec["weight_len"] = n.weight_offset, n.weight_len
        recs.append(rec)
    return {"nodes": recs, "input_shape": input_shape, "output": output}


def test_single_dense_loads(tmp_path):
    d = write_model(tmp_path / "m", _doc([dense("fc", [], 4, 2, 0)], [4], "fc"), np.arange(8))
    g = load_model(d)
    assert len(g.nodes) == 1
    assert g.shapes["fc"] == (2,)
    assert g.weights["fc"].shape == (2, 4)


def test_dangling_reference_named(tmp_path):
    d = write_model(tmp_path / "m", _doc([dense("fc", ["x9"], 4, 2, 0)], [4], "fc"), np.zeros(8))
    with pytest.raises(GraphError, match="x9"):
        load_model(d)


def test_malformed_json(tmp_path):
    d = tmp_path / "m"
    d.mkdir()
    (d / "graph.json").write_text("{nodes: ")
    np.zeros(1, "<f4").tofile(d / "weights.bin")
    with pytest.raises(GraphError, match="malformed JSON"):
        load_model(d)


def test_blob_length_mismatch(tmp_path):
    d = write_model(tmp_path / "m", _doc([dense("fc", [], 4, 2, 0)], [4], "fc"), np.zeros(6))
    with pytest.raises(GraphError, match="fc"):
        load_model(d)
    d = write_model(tmp_path / "m2", _doc([dense("fc", [], 4, 2, 0)], [4], "fc"), np.zeros(10))
    with pytest.raises(GraphError, match="weights.bin"):
        load_model(d)


def test_shape_inference_failure_names_node():
    nodes = [dense("a", [], 4, 3, 0), dense("b", ["a"], 4, 2, 12)]
    with pytest.raises(GraphError, match="'b'"):
        build_graph(nodes, [4], "b", np.zeros(20))


def test_weight_ref_rules():
    bad = Node("fc", "dense", {"in_features": 2, "out_features": 2}, (), 0, None)
    with pytest.raises(GraphError, match="weight reference"):
        build_graph([bad], [2], "fc", np.zeros(4))
    relu = Node("r", "relu", {}, (), 0, 4)
    with pytest.raises(GraphError, match="must not carry"):
        build_graph([relu], [2], "r", np.zeros(4))


def test_input_counts():
    with pytest.raises(GraphError, match="at least 2"):
        build_graph([op("r", "relu", []), op("s", "add", ["r"])], [2], "s", np.zeros(0))
    with pytest.raises(GraphError, match="one input"):
        build_graph([op("r", "relu", []), op("t", "relu", []), op("s", "relu", ["r", "t"])],
                    [2], "s", np.zeros(0))


def test_reserved_and_duplicate_ids():
    with pytest.raises(GraphError, match="reserved"):
        build_graph([op("input", "relu", [])], [2], "input", np.zeros(0))
    with pytest.raises(GraphError, match="duplicate"):
        build_graph([op("r", "relu", []), op("r", "relu", [])], [2], "r", np.zeros(0))


def test_cycle_detected():
    nodes = {"a": op("a", "relu", ["b"]), "b": op("b", "relu", ["a"])}
    with pytest.raises(CycleError):
        topo_order(nodes)


def test_topo_order_examples():
    assert topo_order({"a": op("a", "relu", [])}) == ["a"]
    chain = {"c": op("c", "relu", ["b"]), "b": op("b", "relu", ["a"]), "a": op("a", "relu", [])}
    assert topo_order(chain) == ["a", "b", "c"]
    diamond = {
        "z": op("z", "add", ["b2", "b1"]),
        "b2": op("b2", "relu", ["a"]),
        "b1": op("b1", "relu", ["a"]),
        "a": op("a", "relu", []),
    }
    assert topo_order(diamond) == ["a", "b1", "b2", "z"]


def test_diamond_add_last():
    nodes = [dense("d", [], 2, 2, 0), op("r1", "relu", ["d"]), op("r2", "relu", ["d"]),
             op("sum", "add", ["r1", "r2"])]
    g = build_graph(nodes, [2], "sum", np.eye(2).ravel())
    assert g.order[-1] == "sum"


def test_forward_examples():
    g = build_graph([dense("fc", [], 2, 2, 0)], [2], "fc", np.eye(2).ravel())
    np.testing.assert_array_equal(logits(g, np.array([[3.0, 5.0]])), [[3.0, 5.0]])
    g = build_graph([dense("fc", [], 2, 2, 0), op("r", "relu", ["fc"])], [2], "r", np.eye(2).ravel())
    np.testing.assert_array_equal(logits(g, np.array([[-1.0, 2.0]])), [[0.0, 2.0]])
    g = build_graph([conv("c", [], 1, 1, 1, 0)], [1, 2, 2], "c", np.array([2.0]))
    np.testing.assert_array_equal(logits(g, np.ones((1, 1, 2, 2))), np.full((1, 1, 2, 2), 2.0))


def test_batch_shape_checked():
    g = chain_mlp([4, 3])
    with pytest.raises(GraphError, match="batch shape"):
        logits(g, np.zeros((2, 5)))


def test_concat_and_gap():
    nodes = [conv("c1", [], 1, 2, 1, 0), conv("c2", [], 1, 3, 1, 2), op("cat", "concat", ["c1", "c2"]),
             op("gap", "global-avg-pool", ["cat"])]
    g = build_graph(nodes, [1, 3, 3], "gap", np.arange(5, dtype=np.float32))
    x = np.random.default_rng(0).standard_normal((2, 1, 3, 3))
    out = logits(g, x)
    assert out.shape == (2, 5)
    expect = x.mean(axis=(2, 3)) * np.arange(5)
    np.testing.assert_allclose(out, expect, rtol=1e-5, atol=1e-6)


def test_linearity_without_relu():
    nodes = [conv("c", [], 2, 3, 3, 0, stride=2, padding=1), op("f", "flatten", ["c"]),
             dense("d", ["f"], 3 * 2 * 2, 4, 54), dense("e", ["f"], 12, 4, 102), op("s", "add", ["d", "e"])]
    rng = np.random.default_rng(1)
    g = build_graph(nodes, [2, 4, 4], "s", rng.standard_normal(150))
    x1, x2 = rng.standard_normal((2, 5, 2, 4, 4))
    lhs = logits(g, x1 + x2)
    rhs = logits(g, x1) + logits(g, x2)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("kind", KINDS)
def test_fixture_shapes_and_determinism(kind):
    fx = make_fixture(kind, 0, calib_size=16, eval_size=16)
    acts, out = forward(fx.graph, fx.eval.samples)
    for nid, a in acts.items():
        assert a.shape[1:] == fx.graph.shapes[nid]
        assert np.isfinite(a).all()
    again = logits(fx.graph, fx.eval.samples)
    assert out.tobytes() == again.tobytes()
    # self-labeled: full precision is exactly right
    assert np.mean(np.argmax(out, axis=1) == fx.eval.labels) == 1.0


def test_model_roundtrip(tmp_path):
    fx = make_fixture("branchy", 3, calib_size=8, eval_size=8)
    save_model(fx.graph, tmp_path / "m")
    g = load_model(tmp_path / "m")
    assert g.order == fx.graph.order
    assert logits(g, fx.eval.samples).tobytes() == logits(fx.graph, fx.eval.samples).tobytes()
    save_model(g, tmp_path / "m2")
    for f in ("graph.json", "weights.bin"):
        assert (tmp_path / "m" / f).read_bytes() == (tmp_path / "m2" / f).read_bytes()


def test_dataset_roundtrip(tmp_path):
    ds = Dataset(np.random.default_rng(0).standard_normal((5, 2, 3)).astype(np.float32),
                 np.array([0, 1, 2, 1, 0]))
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.samples.tobytes() == ds.samples.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.fingerprint() == ds.fingerprint()
    back2 = load_dataset(tmp_path / "d" / "meta.json")
    assert back2.fingerprint() == ds.fingerprint()
    meta = json.loads((tmp_path / "d" / "meta.json").read_text())
    assert meta["sample_shape"] == [2, 3]


def test_dataset_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope")
    save_dataset(Dataset(np.zeros((3, 2), np.float32), np.array([0, 1, 0])), tmp_path / "d")
    (tmp_path / "d" / "labels.txt").write_text("0\n1\n")
    with pytest.raises(GraphError, match="labels"):
        load_dataset(tmp_path / "d")
