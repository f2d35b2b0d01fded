"""Rewrite catalog: match discovery, legality, application, invariants."""

import json

import numpy as np
import pytest

from dfir import frontend, interp, ir, lowering, transforms
from dfir.ir import Memlet, Subset
from dfir.symexpr import Sym, evaluate, parse, render

RNG_SEED = 31


def build_model(nodes, inputs, outputs, inits=None, dtype="f64"):
    return frontend.import_model(
        {
            "version": "dfm-0.1",
            "name": "t",
            "inputs": [
                {"name": n, "shape": list(s), "dtype": dtype} for n, s in inputs
            ],
            "outputs": list(outputs),
            "initializers": inits or [],
            "nodes": nodes,
        }
    )


def graph_outputs(g):
    return [d.name for d in g.containers if d.storage == "Global"]


def run_both(g1, g2, arrays, rtol=1e-6):
    """Compare every Global container the two graphs share (transformations
    may delete transient intermediates, never externally visible data)."""
    shared = set(graph_outputs(g1)) & set(graph_outputs(g2))
    assert set(graph_outputs(g2)) <= set(graph_outputs(g1))
    o1 = interp.run_outputs(g1, arrays, outputs=sorted(shared))
    o2 = interp.run_outputs(g2, arrays, outputs=sorted(shared))
    for name in o1:
        np.testing.assert_allclose(
            o2[name], o1[name], rtol=rtol, atol=rtol * 1e-3, err_msg=name
        )


def rand_inputs(g, rng, positive=False):
    out = {}
    for d in g.containers:
        if d.storage != "Global" or d.constant:
            continue
        writers = any(
            isinstance(st.nodes[e.dst], ir.AccessNode)
            and st.nodes[e.dst].data == d.name
            for st in g.states
            for e in st.edges
        )
        if writers:
            continue  # produced, not fed
        shape = tuple(int(interp_shape(s)) for s in d.shape)
        arr = rng.standard_normal(shape)
        if positive:
            arr = np.abs(arr) + 0.5
        out[d.name] = arr.astype(ir.NUMPY_DTYPES[d.dtype])
    return out


def interp_shape(expr):
    from dfir.symexpr import evaluate

    return evaluate(expr, {})


# ---------------------------------------------------------------------------
# Framework


EXPECTED_CATALOG = {
    "constant_folding",
    "input_to_constant",
    "einsum_vertical_fusion",
    "lift_layernorm",
    "redundant_copy_elimination",
    "reduce_expansion",
    "subgraph_fusion",
    "tasklet_fusion",
    "map_replication",
    "map_tiling",
    "local_storage",
    "transient_reuse",
    "trivial_map_elimination",
    "init_hoisting",
    "map_flattening",
    "dead_dataflow_elimination",
}


def softmax_model(h=16, b=8, n=128):
    return build_model(
        [
            {
                "op": "Softmax",
                "name": "s0",
                "inputs": ["x"],
                "outputs": ["y"],
                "attrs": {"axis": -1},
            }
        ],
        [("x", (h, b, n))],
        ["y"],
    )


def test_catalog_has_sixteen_entries():
    names = {e["name"] for e in transforms.catalog()}
    assert names == EXPECTED_CATALOG
    assert len(transforms.catalog()) == 16


def test_unknown_transformation_rejected():
    g = softmax_model(2, 2, 4)
    with pytest.raises(transforms.UnknownTransformError, match="available"):
        transforms.find_matches(g, "loop_unswitching")


def test_stale_match_rejected_after_apply():
    g = lowering.lower_all(softmax_model(4, 3, 8))
    matches = transforms.find_matches(g, "subgraph_fusion")
    assert matches
    g2, _ = transforms.apply(matches[0], g)
    with pytest.raises(transforms.StaleMatchError):
        transforms.apply(matches[0], g2)


def test_stale_match_rejected_after_mutation():
    g = lowering.lower_all(softmax_model(4, 3, 8))
    m = transforms.find_matches(g, "subgraph_fusion")[0]
    g.states[0].nodes[m.nodes[0][1]].label += "_renamed"
    with pytest.raises(transforms.StaleMatchError, match="version"):
        transforms.apply(m, g)


def test_match_lists_are_deterministic():
    def listing(g):
        return json.dumps(
            [m.to_json() for m in transforms.find_matches(g, "ALL")],
            sort_keys=True,
        )

    g1 = lowering.lower_all(softmax_model(4, 3, 8))
    g2 = lowering.lower_all(softmax_model(4, 3, 8))
    a, b, c = listing(g1), listing(g2), listing(g1.clone())
    assert a == b == c
    ids = [m.match_id for m in transforms.find_matches(g1, "ALL")]
    assert len(ids) == len(set(ids)), "match ids must be unique"


def test_selection_filters_matches():
    g = lowering.lower_all(softmax_model(4, 3, 8))
    all_matches = transforms.find_matches(g, "map_tiling")
    assert len(all_matches) >= 2
    chosen = all_matches[0].nodes[0][1]
    narrowed = transforms.find_matches(g, "map_tiling", selection=[chosen])
    assert len(narrowed) == 1
    assert narrowed[0].nodes[0][1] == chosen


def test_apply_returns_diff_record():
    g = lowering.lower_all(softmax_model(4, 3, 8))
    m = transforms.find_matches(g, "subgraph_fusion")[-1]
    g2, diff = transforms.apply(m, g)
    assert diff["transformation"] == "subgraph_fusion"
    assert diff["match_id"] == m.match_id
    assert diff["added_nodes"] and diff["removed_nodes"]
    assert "y_exp" in diff["removed_containers"]
    # The source graph is untouched.
    assert g.content_hash() == transforms.find_matches(g, "ALL")[0].graph_hash


def test_match_roundtrips_through_json():
    g = lowering.lower_all(softmax_model(4, 3, 8))
    m = transforms.find_matches(g, "subgraph_fusion")[0]
    m2 = transforms.TransformMatch.from_json(json.loads(json.dumps(m.to_json())))
    g2a, _ = transforms.apply(m2, g)
    g2b, _ = transforms.apply(m, g)
    assert ir.serialize(g2a) == ir.serialize(g2b)


# ---------------------------------------------------------------------------
# constant_folding


def constant_chain_model():
    return build_model(
        [
            {
                "op": "Constant",
                "name": "c0",
                "inputs": [],
                "outputs": ["k"],
                "attrs": {
                    "value": {
                        "dtype": "f64",
                        "dims": [4],
                        "data": [1.0, 2.0, 3.0, 4.0],
                    }
                },
            },
            {"op": "Neg", "name": "n0", "inputs": ["k"], "outputs": ["nk"], "attrs": {}},
            {"op": "Mul", "name": "m0", "inputs": ["x", "nk"], "outputs": ["y"], "attrs": {}},
        ],
        [("x", (4,))],
        ["y"],
    )


def test_constant_folding_evaluates_chain():
    g = constant_chain_model()
    before = sum(len(s.nodes) for s in g.states)
    matches = transforms.find_matches(g, "constant_folding")
    assert len(matches) == 1
    g2, _ = transforms.apply(matches[0], g)
    after = sum(len(s.nodes) for s in g2.states)
    assert after < before, "node count must strictly decrease"
    np.testing.assert_allclose(g2.constants["nk"], [-1.0, -2.0, -3.0, -4.0])
    x = np.array([1.0, 2.0, 3.0, 4.0])
    out = interp.run_outputs(lowering.lower_all(g2), {"x": x})["y"]
    np.testing.assert_allclose(out, x * np.array([-1.0, -2.0, -3.0, -4.0]))
    assert transforms.find_matches(g2, "constant_folding") == []


def test_constant_folding_leaves_runtime_data_alone():
    g = build_model(
        [{"op": "Relu", "name": "r", "inputs": ["x"], "outputs": ["y"], "attrs": {}}],
        [("x", (4,))],
        ["y"],
    )
    assert transforms.find_matches(g, "constant_folding") == []


def test_constant_folding_does_not_swallow_weights():
    # Trainable initializers are runtime-bound; only Constant nodes seed folds.
    g = build_model(
        [{"op": "Mul", "name": "m", "inputs": ["x", "w"], "outputs": ["y"], "attrs": {}}],
        [("x", (4,))],
        ["y"],
        inits=[{"name": "w", "dtype": "f64", "dims": [4], "data": [1, 2, 3, 4]}],
    )
    assert transforms.find_matches(g, "constant_folding") == []


# ---------------------------------------------------------------------------
# input_to_constant


def test_input_to_constant_pow_chain_removes_pow():
    g = build_model(
        [
            {
                "op": "Constant",
                "name": "c3",
                "inputs": [],
                "outputs": ["p3"],
                "attrs": {"value": {"dtype": "f64", "dims": [], "data": [3.0]}},
            },
            {"op": "Pow", "name": "pw", "inputs": ["x", "p3"], "outputs": ["y"], "attrs": {}},
        ],
        [("x", (6,))],
        ["y"],
    )
    g, _ = transforms.apply(transforms.find_matches(g, "constant_folding")[0], g)
    matches = transforms.find_matches(g, "input_to_constant")
    assert len(matches) == 1 and "exponent" in matches[0].description
    g, _ = transforms.apply(matches[0], g)
    node = next(
        n for st in g.states for n in st.nodes.values()
        if isinstance(n, ir.LibraryNode)
    )
    assert node.attrs["exponent"] == 3.0 and node.in_conns == ("in_0",)
    gl = lowering.lower_all(g)
    assert "^" not in ir.serialize(gl)
    x = np.linspace(-2.0, 2.0, 6)
    np.testing.assert_allclose(interp.run_outputs(gl, {"x": x})["y"], x**3)


def test_input_to_constant_inlines_scalar_literal():
    g = build_model(
        [
            {
                "op": "Constant",
                "name": "c0",
                "inputs": [],
                "outputs": ["k"],
                "attrs": {"value": {"dtype": "f64", "dims": [], "data": [2.5]}},
            },
            {"op": "Add", "name": "a0", "inputs": ["x", "k"], "outputs": ["y"], "attrs": {}},
        ],
        [("x", (4,))],
        ["y"],
    )
    g, _ = transforms.apply(transforms.find_matches(g, "constant_folding")[0], g)
    gl = lowering.lower_all(g)
    m = transforms.find_matches(gl, "input_to_constant")
    assert len(m) == 1
    g2, _ = transforms.apply(m[0], gl)
    assert not any(d.name == "k" for d in g2.containers)
    body = next(
        t.body for st in g2.states for t in st.nodes.values()
        if isinstance(t, ir.Tasklet)
    )
    assert "2.5" in render(body["o"])
    x = np.arange(4.0)
    np.testing.assert_allclose(interp.run_outputs(g2, {"x": x})["y"], x + 2.5)


def test_input_to_constant_never_inlines_indexed_reads():
    # A vector constant read as k[i] inside a map depends on the parameter:
    # inlining would freeze one element; the match must not exist.
    g = build_model(
        [
            {
                "op": "Constant",
                "name": "c0",
                "inputs": [],
                "outputs": ["k"],
                "attrs": {"value": {"dtype": "f64", "dims": [4], "data": [1, 2, 3, 4]}},
            },
            {"op": "Add", "name": "a0", "inputs": ["x", "k"], "outputs": ["y"], "attrs": {}},
        ],
        [("x", (4,))],
        ["y"],
    )
    g, _ = transforms.apply(transforms.find_matches(g, "constant_folding")[0], g)
    gl = lowering.lower_all(g)
    assert transforms.find_matches(gl, "input_to_constant") == []


# ---------------------------------------------------------------------------
# einsum_vertical_fusion


def test_einsum_vertical_fusion_composes_permutation():
    g = build_model(
        [
            {"op": "Einsum", "name": "tr", "inputs": ["a"], "outputs": ["at"],
             "attrs": {"equation": "ij->ji"}},
            {"op": "Einsum", "name": "mm", "inputs": ["at", "b"], "outputs": ["c"],
             "attrs": {"equation": "ik,jk->ij"}},
        ],
        [("a", (3, 4)), ("b", (5, 3))],
        ["c"],
    )
    matches = transforms.find_matches(g, "einsum_vertical_fusion")
    assert len(matches) == 1
    g2, _ = transforms.apply(matches[0], g)
    node = next(
        n for st in g2.states for n in st.nodes.values()
        if isinstance(n, ir.LibraryNode)
    )
    assert node.attrs["equation"] == "ki,jk->ij"
    rng = np.random.default_rng(RNG_SEED)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((5, 3))
    out = interp.run_outputs(lowering.lower_all(g2), {"a": a, "b": b})["c"]
    np.testing.assert_allclose(out, np.einsum("ki,jk->ij", a, b), rtol=1e-12)
    run_both(lowering.lower_all(g), lowering.lower_all(g2), {"a": a, "b": b}, rtol=1e-12)


def test_einsum_vertical_fusion_contraction_into_contraction():
    g = build_model(
        [
            {"op": "Einsum", "name": "e1", "inputs": ["a", "b"], "outputs": ["t"],
             "attrs": {"equation": "ij,jk->ik"}},
            {"op": "Einsum", "name": "e2", "inputs": ["t", "c"], "outputs": ["d"],
             "attrs": {"equation": "ik,kl->il"}},
        ],
        [("a", (2, 3)), ("b", (3, 4)), ("c", (4, 5))],
        ["d"],
    )
    matches = transforms.find_matches(g, "einsum_vertical_fusion")
    assert len(matches) == 1
    g2, _ = transforms.apply(matches[0], g)
    node = next(
        n for st in g2.states for n in st.nodes.values()
        if isinstance(n, ir.LibraryNode)
    )
    terms, out = node.attrs["equation"].split("->")
    assert len(terms.split(",")) == 3 and out == "il"
    rng = np.random.default_rng(RNG_SEED)
    arrays = {
        "a": rng.standard_normal((2, 3)),
        "b": rng.standard_normal((3, 4)),
        "c": rng.standard_normal((4, 5)),
    }
    out2 = interp.run_outputs(lowering.lower_all(g2), arrays)["d"]
    np.testing.assert_allclose(
        out2, arrays["a"] @ arrays["b"] @ arrays["c"], rtol=1e-12
    )


def test_einsum_vertical_fusion_requires_single_use():
    g = build_model(
        [
            {"op": "Einsum", "name": "tr", "inputs": ["a"], "outputs": ["at"],
             "attrs": {"equation": "ij->ji"}},
            {"op": "Einsum", "name": "m1", "inputs": ["at", "b"], "outputs": ["c1"],
             "attrs": {"equation": "ik,jk->ij"}},
            {"op": "Einsum", "name": "m2", "inputs": ["at", "b"], "outputs": ["c2"],
             "attrs": {"equation": "ik,jk->ij"}},
        ],
        [("a", (3, 4)), ("b", (5, 3))],
        ["c1", "c2"],
    )
    assert transforms.find_matches(g, "einsum_vertical_fusion") == []


# ---------------------------------------------------------------------------
# lift_layernorm


def ln_chain_model(b=4, n=8, square_via="pow"):
    sq_node = (
        {"op": "Pow", "name": "sq", "inputs": ["d"], "outputs": ["d2"],
         "attrs": {"exponent": 2.0}}
        if square_via == "pow"
        else {"op": "Mul", "name": "sq", "inputs": ["d", "d"], "outputs": ["d2"],
              "attrs": {}}
    )
    return build_model(
        [
            {"op": "ReduceMean", "name": "m1", "inputs": ["x"], "outputs": ["mu"],
             "attrs": {"axes": [-1], "keepdims": 1}},
            {"op": "Sub", "name": "s", "inputs": ["x", "mu"], "outputs": ["d"], "attrs": {}},
            sq_node,
            {"op": "ReduceMean", "name": "m2", "inputs": ["d2"], "outputs": ["var"],
             "attrs": {"axes": [-1], "keepdims": 1}},
            {"op": "Add", "name": "ae", "inputs": ["var", "eps"], "outputs": ["ve"], "attrs": {}},
            {"op": "Sqrt", "name": "sq2", "inputs": ["ve"], "outputs": ["sd"], "attrs": {}},
            {"op": "Div", "name": "dv", "inputs": ["d", "sd"], "outputs": ["nrm"], "attrs": {}},
            {"op": "Mul", "name": "sc", "inputs": ["nrm", "gamma"], "outputs": ["sg"], "attrs": {}},
            {"op": "Add", "name": "sh", "inputs": ["sg", "beta"], "outputs": ["y"], "attrs": {}},
        ],
        [("x", (b, n))],
        ["y"],
        inits=[
            {"name": "gamma", "dtype": "f64", "dims": [n],
             "data": list(np.linspace(0.5, 1.5, n))},
            {"name": "beta", "dtype": "f64", "dims": [n],
             "data": list(np.linspace(-0.2, 0.2, n))},
            {"name": "eps", "dtype": "f64", "dims": [], "data": [1e-5]},
        ],
    )


@pytest.mark.parametrize("square_via", ["pow", "mul"])
def test_lift_layernorm_recognizes_chain(square_via):
    g = ln_chain_model(square_via=square_via)
    matches = transforms.find_matches(g, "lift_layernorm")
    assert len(matches) == 1
    assert "1e-05" in matches[0].certificate or "1e-05" in matches[0].description
    g2, _ = transforms.apply(matches[0], g)
    libs = [
        n for st in g2.states for n in st.nodes.values()
        if isinstance(n, ir.LibraryNode)
    ]
    assert [n.op for n in libs] == ["LayerNormalization"]
    assert libs[0].attrs["epsilon"] == pytest.approx(1e-5)
    rng = np.random.default_rng(RNG_SEED)
    x = rng.standard_normal((4, 8))
    run_both(lowering.lower_all(g), lowering.lower_all(g2), {"x": x}, rtol=1e-6)


def test_lift_layernorm_rejects_wrong_axis():
    g = build_model(
        [
            {"op": "ReduceMean", "name": "m1", "inputs": ["x"], "outputs": ["mu"],
             "attrs": {"axes": [0], "keepdims": 1}},
            {"op": "Sub", "name": "s", "inputs": ["x", "mu"], "outputs": ["y"], "attrs": {}},
        ],
        [("x", (4, 8))],
        ["y"],
    )
    assert transforms.find_matches(g, "lift_layernorm") == []


# ---------------------------------------------------------------------------
# redundant_copy_elimination


def copy_graph(target_storage="Transient"):
    g = ir.Graph("copy")
    g.add_container("x", (5,), "f64", "Global")
    g.add_container("t", (5,), "f64", target_storage)
    g.add_container("y", (5,), "f64", "Global")
    st = g.add_state("main")
    ax, at_, ay = st.add_access("x"), st.add_access("t"), st.add_access("y")
    st.add_edge(
        ax, None, at_, None,
        Memlet("x", Subset.full((5,)), other_subset=Subset.full((5,))),
    )
    en, ex = st.add_map("scale", ["i"], [(0, 5, 1)])
    tl = st.add_node(ir.Tasklet("s", ("v0",), ("o",), {"o": parse("v0 * 2.0")}))
    st.add_edge(at_, None, en, "in_v", Memlet("t", Subset.full((5,))))
    st.add_edge(en, "out_v", tl, "v0", Memlet("t", Subset.index([Sym("i")])))
    st.add_edge(tl, "o", ex, "in_o", Memlet("y", Subset.index([Sym("i")])))
    st.add_edge(ex, "out_o", ay, None, Memlet("y", Subset.full((5,))))
    assert ir.validate(g) == []
    return g


def test_redundant_copy_elimination_collapses_full_copy():
    g = copy_graph()
    matches = transforms.find_matches(g, "redundant_copy_elimination")
    assert len(matches) == 1
    before = ir.intermediate_bytes(g, None)
    g2, _ = transforms.apply(matches[0], g)
    assert not any(d.name == "t" for d in g2.containers)
    assert ir.intermediate_bytes(g2, None) <= before
    x = np.arange(5.0)
    np.testing.assert_allclose(interp.run_outputs(g2, {"x": x})["y"], 2 * x)


def test_redundant_copy_elimination_keeps_visible_copies():
    # Copy target is externally visible output data; removing it would
    # change the graph interface.
    g = copy_graph(target_storage="Global")
    assert transforms.find_matches(g, "redundant_copy_elimination") == []


# ---------------------------------------------------------------------------
# reduce_expansion


@pytest.mark.parametrize("kind,np_fn", [("sum", np.sum), ("max", np.max)])
def test_reduce_expansion_builds_wcr_map(kind, np_fn):
    op = {"sum": "ReduceSum", "max": "ReduceMax"}[kind]
    g = build_model(
        [{"op": op, "name": "r", "inputs": ["x"], "outputs": ["y"],
          "attrs": {"axes": [1], "keepdims": 0}}],
        [("x", (3, 5))],
        ["y"],
    )
    gl = lowering.lower_all(g, keep=("Reduce",))
    matches = transforms.find_matches(gl, "reduce_expansion")
    assert len(matches) == 1 and kind in matches[0].description
    g2, _ = transforms.apply(matches[0], gl)
    assert not any(
        isinstance(n, ir.LibraryNode)
        for st in g2.states for n in st.nodes.values()
    )
    wcr = {
        e.memlet.wcr
        for st in g2.states for e in st.edges
        if e.memlet is not None and e.memlet.wcr is not None
    }
    assert wcr == {kind}
    rng = np.random.default_rng(RNG_SEED)
    x = rng.standard_normal((3, 5))
    np.testing.assert_allclose(
        interp.run_outputs(g2, {"x": x})["y"], np_fn(x, axis=1), rtol=1e-12
    )


# ---------------------------------------------------------------------------
# dead_dataflow_elimination


def test_dead_dataflow_elimination_removes_unused_branch():
    g = build_model(
        [
            {"op": "Relu", "name": "keep", "inputs": ["x"], "outputs": ["y"], "attrs": {}},
            {"op": "Exp", "name": "dead1", "inputs": ["x"], "outputs": ["u1"], "attrs": {}},
            {"op": "Neg", "name": "dead2", "inputs": ["u1"], "outputs": ["u2"], "attrs": {}},
        ],
        [("x", (4,))],
        ["y"],
    )
    matches = transforms.find_matches(g, "dead_dataflow_elimination")
    assert len(matches) == 1
    g2, _ = transforms.apply(matches[0], g)
    assert sorted(d.name for d in g2.containers) == ["x", "y"]
    assert transforms.find_matches(g2, "dead_dataflow_elimination") == []
    x = np.array([-1.0, 2.0, -3.0, 4.0])
    np.testing.assert_allclose(
        interp.run_outputs(lowering.lower_all(g2), {"x": x})["y"], np.maximum(x, 0)
    )


def test_dead_dataflow_elimination_is_confluent():
    # One closure match: applying it reaches the fixpoint in one step, so
    # any application order over sub-matches is equivalent by construction.
    g = build_model(
        [
            {"op": "Relu", "name": "keep", "inputs": ["x"], "outputs": ["y"], "attrs": {}},
            {"op": "Exp", "name": "d1", "inputs": ["x"], "outputs": ["u1"], "attrs": {}},
            {"op": "Sqrt", "name": "d2", "inputs": ["x"], "outputs": ["u2"], "attrs": {}},
        ],
        [("x", (4,))],
        ["y"],
    )
    m = transforms.find_matches(g, "dead_dataflow_elimination")
    assert len(m) == 1
    g2, _ = transforms.apply(m[0], g)
    assert transforms.find_matches(g2, "dead_dataflow_elimination") == []
    assert sum(len(s.nodes) for s in g2.states) == 3


# ---------------------------------------------------------------------------
# trivial_map_elimination


def unit_dim_graph():
    g = ir.Graph("tme")
    g.add_container("x", (1, 7), "f64", "Global")
    g.add_container("y", (1, 7), "f64", "Global")
    st = g.add_state("main")
    ax, ay = st.add_access("x"), st.add_access("y")
    en, ex = st.add_map("m", ["i", "j"], [(0, 1, 1), (0, 7, 1)])
    tl = st.add_node(ir.Tasklet("t", ("v0",), ("o",), {"o": parse("v0 + 1")}))
    st.add_edge(ax, None, en, "in_v", Memlet("x", Subset.full((1, 7))))
    st.add_edge(en, "out_v", tl, "v0", Memlet("x", Subset.index([Sym("i"), Sym("j")])))
    st.add_edge(tl, "o", ex, "in_o", Memlet("y", Subset.index([Sym("i"), Sym("j")])))
    st.add_edge(ex, "out_o", ay, None, Memlet("y", Subset.full((1, 7))))
    assert ir.validate(g) == []
    return g


def test_trivial_map_elimination_drops_unit_dims():
    g = unit_dim_graph()
    matches = transforms.find_matches(g, "trivial_map_elimination")
    assert len(matches) == 1 and "unit" in matches[0].description
    g2, _ = transforms.apply(matches[0], g)
    entry = next(
        n for n in g2.states[0].nodes.values() if isinstance(n, ir.MapEntry)
    )
    assert entry.params == ("j",) and entry.ranges.rank == 1
    x = np.random.default_rng(RNG_SEED).standard_normal((1, 7))
    np.testing.assert_allclose(interp.run_outputs(g2, {"x": x})["y"], x + 1)


def test_trivial_map_elimination_dissolves_all_unit_map():
    g = ir.Graph("tme1")
    g.add_container("x", (1,), "f64", "Global")
    g.add_container("y", (1,), "f64", "Global")
    st = g.add_state("main")
    ax, ay = st.add_access("x"), st.add_access("y")
    en, ex = st.add_map("m", ["i"], [(0, 1, 1)])
    tl = st.add_node(ir.Tasklet("t", ("v0",), ("o",), {"o": parse("v0 * 3.0")}))
    st.add_edge(ax, None, en, "in_v", Memlet("x", Subset.full((1,))))
    st.add_edge(en, "out_v", tl, "v0", Memlet("x", Subset.index([Sym("i")])))
    st.add_edge(tl, "o", ex, "in_o", Memlet("y", Subset.index([Sym("i")])))
    st.add_edge(ex, "out_o", ay, None, Memlet("y", Subset.full((1,))))
    m = transforms.find_matches(g, "trivial_map_elimination")
    assert len(m) == 1 and "dissolve" in m[0].description
    g2, _ = transforms.apply(m[0], g)
    assert not any(
        isinstance(n, ir.MapEntry) for n in g2.states[0].nodes.values()
    )
    np.testing.assert_allclose(
        interp.run_outputs(g2, {"x": np.array([2.0])})["y"], [6.0]
    )


def test_trivial_map_elimination_deletes_empty_map():
    g = ir.Graph("tme0")
    g.add_container("x", (4,), "f64", "Global")
    g.add_container("y", (4,), "f64", "Global")
    g.add_container("u", (4,), "f64", "Transient")
    st = g.add_state("main")
    ax, ay = st.add_access("x"), st.add_access("y")
    en, ex = st.add_map("live", ["i"], [(0, 4, 1)])
    tl = st.add_node(ir.Tasklet("t", ("v0",), ("o",), {"o": parse("v0")}))
    st.add_edge(ax, None, en, "in_v", Memlet("x", Subset.full((4,))))
    st.add_edge(en, "out_v", tl, "v0", Memlet("x", Subset.index([Sym("i")])))
    st.add_edge(tl, "o", ex, "in_o", Memlet("y", Subset.index([Sym("i")])))
    st.add_edge(ex, "out_o", ay, None, Memlet("y", Subset.full((4,))))
    au = st.add_access("u")
    en0, ex0 = st.add_map("empty", ["k"], [(0, 0, 1)])
    t0 = st.add_node(ir.Tasklet("t0", ("v0",), ("o",), {"o": parse("v0")}))
    st.add_edge(ax, None, en0, "in_v", Memlet("x", Subset.of([(0, 0, 1)])))
    st.add_edge(en0, "out_v", t0, "v0", Memlet("x", Subset.index([Sym("k")])))
    st.add_edge(t0, "o", ex0, "in_o", Memlet("u", Subset.index([Sym("k")])))
    st.add_edge(ex0, "out_o", au, None, Memlet("u", Subset.of([(0, 0, 1)])))
    assert ir.validate(g) == []
    matches = transforms.find_matches(g, "trivial_map_elimination")
    empty = [m for m in matches if "empty" in m.description]
    assert len(empty) == 1
    g2, _ = transforms.apply(empty[0], g)
    labels = [
        n.label for n in g2.states[0].nodes.values() if isinstance(n, ir.MapEntry)
    ]
    assert labels == ["live"]
    x = np.arange(4.0)
    np.testing.assert_allclose(interp.run_outputs(g2, {"x": x})["y"], x)


# ---------------------------------------------------------------------------
# transient_reuse


def test_transient_reuse_aliases_disjoint_lifetimes():
    g = build_model(
        [
            {"op": "Exp", "name": "e", "inputs": ["x"], "outputs": ["a"], "attrs": {}},
            {"op": "Neg", "name": "n", "inputs": ["a"], "outputs": ["b"], "attrs": {}},
            {"op": "Relu", "name": "r", "inputs": ["b"], "outputs": ["c"], "attrs": {}},
            {"op": "Sqrt", "name": "s", "inputs": ["c"], "outputs": ["y"], "attrs": {}},
        ],
        [("x", (500,))],
        ["y"],
    )
    gl = lowering.lower_all(g)
    before = ir.intermediate_bytes(gl, None)
    matches = transforms.find_matches(gl, "transient_reuse")
    assert len(matches) == 1, "only a/c lifetimes are disjoint"
    assert matches[0].payload == {"keep": "a", "alias": "c"}
    g2, _ = transforms.apply(matches[0], gl)
    after = ir.intermediate_bytes(g2, None)
    assert before == 3 * 500 * 8 and after == 2 * 500 * 8
    x = np.random.default_rng(RNG_SEED).standard_normal(500)
    np.testing.assert_allclose(
        interp.run_outputs(g2, {"x": x})["y"],
        np.sqrt(np.maximum(-np.exp(x), 0.0)),
    )


def test_transient_reuse_requires_matching_type():
    g = build_model(
        [
            {"op": "Exp", "name": "e", "inputs": ["x"], "outputs": ["a"], "attrs": {}},
            {"op": "ReduceSum", "name": "n", "inputs": ["a"], "outputs": ["b"],
             "attrs": {"axes": [0], "keepdims": 0}},
            {"op": "Relu", "name": "r", "inputs": ["b"], "outputs": ["c"], "attrs": {}},
            {"op": "Sqrt", "name": "s", "inputs": ["c"], "outputs": ["y"], "attrs": {}},
        ],
        [("x", (500,))],
        ["y"],
    )
    gl = lowering.lower_all(g)
    # a: (500,), c: scalar — different shapes, no reuse.
    assert transforms.find_matches(gl, "transient_reuse") == []


# ---------------------------------------------------------------------------
# init_hoisting


def wcr_no_identity_graph():
    g = ir.Graph("ih")
    g.add_container("x", (5,), "f64", "Global")
    g.add_container("s", (), "f64", "Transient")
    g.add_container("y", (), "f64", "Global")
    st = g.add_state("main")
    ax, as_, ay = st.add_access("x"), st.add_access("s"), st.add_access("y")
    en, ex = st.add_map("red", ["i"], [(0, 5, 1)])
    tl = st.add_node(ir.Tasklet("t", ("v0",), ("o",), {"o": parse("v0")}))
    st.add_edge(ax, None, en, "in_v", Memlet("x", Subset.full((5,))))
    st.add_edge(en, "out_v", tl, "v0", Memlet("x", Subset.index([Sym("i")])))
    st.add_edge(tl, "o", ex, "in_o", Memlet("s", Subset.index([]), wcr="sum"))
    st.add_edge(ex, "out_o", as_, None, Memlet("s", Subset.index([]), wcr="sum"))
    en2, ex2 = st.add_map("cp", ["z"], [(0, 1, 1)])
    t2 = st.add_node(ir.Tasklet("c", ("v0",), ("o",), {"o": parse("v0")}))
    st.add_edge(as_, None, en2, "in_v", Memlet("s", Subset.index([])))
    st.add_edge(en2, "out_v", t2, "v0", Memlet("s", Subset.index([])))
    st.add_edge(t2, "o", ex2, "in_o", Memlet("y", Subset.index([])))
    st.add_edge(ex2, "out_o", ay, None, Memlet("y", Subset.index([])))
    assert ir.validate(g) == []
    return g


def test_init_hoisting_front_loads_identity():
    g = wcr_no_identity_graph()
    matches = transforms.find_matches(g, "init_hoisting")
    assert len(matches) == 1
    g2, _ = transforms.apply(matches[0], g)
    idents = {
        e.memlet.wcr_identity
        for st in g2.states for e in st.edges
        if e.memlet is not None and e.memlet.wcr == "sum"
    }
    assert idents == {0.0}
    x = np.arange(5.0)
    assert interp.run_outputs(g2, {"x": x})["y"] == pytest.approx(x.sum())
    assert transforms.find_matches(g2, "init_hoisting") == []


# ---------------------------------------------------------------------------
# map_flattening


def test_map_flattening_delinearizes():
    g = lowering.lower_all(
        build_model(
            [{"op": "Relu", "name": "r", "inputs": ["x"], "outputs": ["y"], "attrs": {}}],
            [("x", (4, 6))],
            ["y"],
        )
    )
    matches = transforms.find_matches(g, "map_flattening")
    assert len(matches) == 1
    g2, _ = transforms.apply(matches[0], g)
    entry = next(
        n for n in g2.states[0].nodes.values() if isinstance(n, ir.MapEntry)
    )
    assert entry.ranges.rank == 1
    assert render(entry.ranges.dim_extent(0)) == "24"
    srl = ir.serialize(g2)
    assert "floordiv" in srl and "mod" in srl
    x = np.random.default_rng(RNG_SEED).standard_normal((4, 6))
    np.testing.assert_allclose(
        interp.run_outputs(g2, {"x": x})["y"], np.maximum(x, 0)
    )
    assert transforms.find_matches(g2, "map_flattening") == []


# ---------------------------------------------------------------------------
# map_tiling


def test_map_tiling_partitions_with_boundary():
    g = lowering.lower_all(
        build_model(
            [{"op": "Relu", "name": "r", "inputs": ["x"], "outputs": ["y"], "attrs": {}}],
            [("x", (10,))],
            ["y"],
        )
    )
    matches = transforms.find_matches(g, "map_tiling")
    assert len(matches) == 1
    g2, _ = transforms.apply(matches[0], g)
    entries = [
        n for n in g2.states[0].nodes.values() if isinstance(n, ir.MapEntry)
    ]
    outer = next(n for n in entries if n.label.endswith("_tiled"))
    inner = next(n for n in entries if not n.label.endswith("_tiled"))
    assert render(outer.ranges.dim_extent(0)) == "2"  # ceil(10 / 8)
    assert "min" in render(inner.ranges.dim_extent(0))
    x = np.random.default_rng(RNG_SEED).standard_normal(10)
    _, counters = interp.execute(g2, {"x": x})
    np.testing.assert_allclose(
        interp.run_outputs(g2, {"x": x})["y"], np.maximum(x, 0)
    )
    outer_iters = [
        v for k, v in counters.scope_iterations.items() if k.endswith("_tiled")
    ]
    assert outer_iters == [2]


# ---------------------------------------------------------------------------
# map_replication


def replication_model():
    return build_model(
        [
            {"op": "Exp", "name": "p", "inputs": ["x"], "outputs": ["t"], "attrs": {}},
            {"op": "Neg", "name": "c1", "inputs": ["t"], "outputs": ["y1"], "attrs": {}},
            {"op": "Sqrt", "name": "c2", "inputs": ["t"], "outputs": ["y2"], "attrs": {}},
        ],
        [("x", (9,))],
        ["y1", "y2"],
    )


def test_map_replication_duplicates_producer():
    gl = lowering.lower_all(replication_model())
    matches = transforms.find_matches(gl, "map_replication")
    assert len(matches) == 1 and "2 copies" in matches[0].description
    peak_before = transforms.peak_transient_bytes(gl)
    g2, _ = transforms.apply(matches[0], gl)
    assert transforms.peak_transient_bytes(g2) <= peak_before
    assert ir.kernel_count(g2.states[0]) == 4
    x = np.random.default_rng(RNG_SEED).standard_normal(9)
    outs = interp.run_outputs(g2, {"x": x})
    np.testing.assert_allclose(outs["y1"], -np.exp(x))
    np.testing.assert_allclose(outs["y2"], np.sqrt(np.exp(x)))


def test_map_replication_unlocks_per_consumer_fusion():
    gl = lowering.lower_all(replication_model())
    assert len(transforms.find_matches(gl, "subgraph_fusion")) == 0
    g2, _ = transforms.apply(transforms.find_matches(gl, "map_replication")[0], gl)
    fusions = transforms.find_matches(g2, "subgraph_fusion")
    assert len(fusions) == 2
    for m in fusions:
        g2_now = transforms.find_matches(g2, "subgraph_fusion")
        g2, _ = transforms.apply(g2_now[0], g2)
    assert ir.kernel_count(g2.states[0]) == 2
    assert ir.intermediate_bytes(g2, None) == 0
    x = np.random.default_rng(RNG_SEED).standard_normal(9)
    outs = interp.run_outputs(g2, {"x": x})
    np.testing.assert_allclose(outs["y1"], -np.exp(x))
    np.testing.assert_allclose(outs["y2"], np.sqrt(np.exp(x)))


# ---------------------------------------------------------------------------
# local_storage


def test_local_storage_stages_inner_footprint():
    g = lowering.lower_all(
        build_model(
            [{"op": "Einsum", "name": "e", "inputs": ["a", "b"], "outputs": ["c"],
              "attrs": {"equation": "ij,jk->ik"}}],
            [("a", (4, 6)), ("b", (6, 5))],
            ["c"],
        )
    )
    matches = transforms.find_matches(g, "local_storage")
    assert {m.payload["container"] for m in matches} == {"a", "b"}
    g2, _ = transforms.apply(matches[0], g)
    scoped = [d for d in g2.containers if d.storage == "Scoped"]
    assert len(scoped) == 1
    rng = np.random.default_rng(RNG_SEED)
    a, b = rng.standard_normal((4, 6)), rng.standard_normal((6, 5))
    np.testing.assert_allclose(
        interp.run_outputs(g2, {"a": a, "b": b})["c"], a @ b, rtol=1e-12
    )
    # Staging the second operand still works on the staged graph.
    m2 = [
        m for m in transforms.find_matches(g2, "local_storage")
        if m.payload["container"] == "b"
    ]
    g3, _ = transforms.apply(m2[0], g2)
    np.testing.assert_allclose(
        interp.run_outputs(g3, {"a": a, "b": b})["c"], a @ b, rtol=1e-12
    )


# ---------------------------------------------------------------------------
# tasklet_fusion


def test_tasklet_fusion_composes_expressions():
    g = lowering.lower_all(
        build_model(
            [
                {"op": "Exp", "name": "e", "inputs": ["x"], "outputs": ["t"], "attrs": {}},
                {"op": "Log", "name": "l", "inputs": ["t"], "outputs": ["y"], "attrs": {}},
            ],
            [("x", (8,))],
            ["y"],
        )
    )
    g, _ = transforms.apply(transforms.find_matches(g, "subgraph_fusion")[0], g)
    matches = transforms.find_matches(g, "tasklet_fusion")
    assert len(matches) == 1
    before = ir.intermediate_bytes(g, None)
    g2, _ = transforms.apply(matches[0], g)
    assert ir.intermediate_bytes(g2, None) <= before
    bodies = [
        render(t.body["o"]) for st in g2.states for t in st.nodes.values()
        if isinstance(t, ir.Tasklet)
    ]
    assert len(bodies) == 1 and "log(exp(" in bodies[0]
    x = np.random.default_rng(RNG_SEED).standard_normal(8)
    np.testing.assert_allclose(interp.run_outputs(g2, {"x": x})["y"], x, rtol=1e-12)


def test_tasklet_fusion_requires_single_consumer():
    g = lowering.lower_all(
        build_model(
            [
                {"op": "Exp", "name": "e", "inputs": ["x"], "outputs": ["t"], "attrs": {}},
                {"op": "Neg", "name": "n1", "inputs": ["t"], "outputs": ["y1"], "attrs": {}},
                {"op": "Sqrt", "name": "n2", "inputs": ["t"], "outputs": ["y2"], "attrs": {}},
            ],
            [("x", (8,))],
            ["y1", "y2"],
        )
    )
    assert transforms.find_matches(g, "tasklet_fusion") == []


# ---------------------------------------------------------------------------
# subgraph_fusion


def test_subgraph_fusion_softmax_collapses_to_one_kernel():
    g = lowering.lower_all(softmax_model(16, 8, 128))
    assert ir.kernel_count(g.states[0]) == 4
    matches = transforms.find_matches(g, "subgraph_fusion")
    full = max(matches, key=lambda m: len(m.payload["scopes"]))
    assert len(full.payload["scopes"]) == 4
    g2, _ = transforms.apply(full, g)
    st = g2.states[0]
    assert ir.kernel_count(st) == 1
    assert ir.intermediate_bytes(g2, None) == 0
    # The fused map spans the whole input domain: reductions accumulate
    # into iteration-local storage instead of shrinking the range.
    top = next(
        n for n, nd in st.nodes.items()
        if isinstance(nd, ir.MapEntry) and st.scopes()[n] is None
    )
    extents = sorted(
        evaluate(st.nodes[top].ranges.dim_extent(d), {})
        for d in range(st.nodes[top].ranges.rank)
    )
    assert extents == [8, 16, 128]
    rng = np.random.default_rng(RNG_SEED)
    x = rng.standard_normal((16, 8, 128))
    got = interp.run_outputs(g2, {"x": x})["y"]
    e = np.exp(x - x.max(-1, keepdims=True))
    np.testing.assert_allclose(got, e / e.sum(-1, keepdims=True), atol=1e-6)


def test_subgraph_fusion_matmul_chain_rowwise():
    g = lowering.lower_all(
        build_model(
            [
                {"op": "Einsum", "name": "e1", "inputs": ["a", "b"], "outputs": ["t"],
                 "attrs": {"equation": "ij,jk->ik"}},
                {"op": "Einsum", "name": "e2", "inputs": ["t", "c"], "outputs": ["d"],
                 "attrs": {"equation": "ik,kl->il"}},
            ],
            [("a", (3, 4)), ("b", (4, 5)), ("c", (5, 6))],
            ["d"],
        )
    )
    matches = transforms.find_matches(g, "subgraph_fusion")
    assert matches, "matmul chain should fuse over the shared row dimension"
    g2, _ = transforms.apply(matches[0], g)
    assert ir.kernel_count(g2.states[0]) == 1
    rng = np.random.default_rng(RNG_SEED)
    arrays = {
        "a": rng.standard_normal((3, 4)),
        "b": rng.standard_normal((4, 5)),
        "c": rng.standard_normal((5, 6)),
    }
    np.testing.assert_allclose(
        interp.run_outputs(g2, arrays)["d"],
        arrays["a"] @ arrays["b"] @ arrays["c"],
        rtol=1e-12,
    )


def test_subgraph_fusion_respects_outside_consumers():
    # t is read by an unfused consumer as well: fusing its producer and one
    # reader must not hide it (it stays a real transient).
    g = lowering.lower_all(
        build_model(
            [
                {"op": "Exp", "name": "p", "inputs": ["x"], "outputs": ["t"], "attrs": {}},
                {"op": "Neg", "name": "c1", "inputs": ["t"], "outputs": ["y1"], "attrs": {}},
                {"op": "Sqrt", "name": "c2", "inputs": ["t"], "outputs": ["y2"], "attrs": {}},
            ],
            [("x", (9,))],
            ["y1", "y2"],
        )
    )
    assert transforms.find_matches(g, "subgraph_fusion") == []


def test_subgraph_fusion_never_creates_outside_cycle():
    # p -> q -> r and p -> r: fusing {p, r} would need q's output, whose
    # input comes from inside the set: contraction would close a cycle.
    g = lowering.lower_all(
        build_model(
            [
                {"op": "Exp", "name": "p", "inputs": ["x"], "outputs": ["t"], "attrs": {}},
                {"op": "ReduceSum", "name": "q", "inputs": ["t"], "outputs": ["s"],
                 "attrs": {"axes": [0], "keepdims": 1}},
                {"op": "Add", "name": "r", "inputs": ["t", "s"], "outputs": ["y"], "attrs": {}},
            ],
            [("x", (6,))],
            ["y"],
        )
    )
    matches = transforms.find_matches(g, "subgraph_fusion")
    for m in matches:
        scopes = set(m.payload["scopes"])
        st = g.states[0]
        labels = {st.nodes[nid].label for nid in scopes}
        assert not (
            any(l.startswith("exp") for l in labels)
            and any(l.startswith("add") for l in labels)
            and not any(l.startswith("reduce") for l in labels)
        ), f"cycle-closing fusion offered: {labels}"
    # Fusing all three (reduction included) is legal: the sum accumulates
    # into iteration-local storage and re-derives exp(x) element-wise.
    full = max(matches, key=lambda m: len(m.payload["scopes"]))
    assert len(full.payload["scopes"]) == 3
    g2, _ = transforms.apply(full, g)
    assert ir.kernel_count(g2.states[0]) == 1
    x = np.random.default_rng(RNG_SEED).standard_normal(6)
    got = interp.run_outputs(g2, {"x": x}, outputs=["y"])["y"]
    np.testing.assert_allclose(got, np.exp(x) + np.exp(x).sum(), rtol=1e-12)


# ---------------------------------------------------------------------------
# Semantic preservation sweep + data-movement invariants


def _sweep_corpus():
    corpus = []

    corpus.append(("softmax", lowering.lower_all(softmax_model(4, 3, 8)), False))

    mish = build_model(
        [
            {"op": "Softplus", "name": "sp", "inputs": ["x"], "outputs": ["t1"], "attrs": {}},
            {"op": "Tanh", "name": "th", "inputs": ["t1"], "outputs": ["t2"], "attrs": {}},
            {"op": "Mul", "name": "mu", "inputs": ["x", "t2"], "outputs": ["y"], "attrs": {}},
        ],
        [("x", (6, 5))],
        ["y"],
    )
    corpus.append(("mish", lowering.lower_all(mish), False))

    mm = build_model(
        [
            {"op": "Einsum", "name": "e1", "inputs": ["a", "b"], "outputs": ["t"],
             "attrs": {"equation": "ij,jk->ik"}},
            {"op": "Einsum", "name": "e2", "inputs": ["t", "c"], "outputs": ["d"],
             "attrs": {"equation": "ik,kl->il"}},
        ],
        [("a", (3, 4)), ("b", (4, 5)), ("c", (5, 4))],
        ["d"],
    )
    corpus.append(("matmul-chain", lowering.lower_all(mm), False))
    corpus.append(("einsum-pair-unlowered", build_model(
        [
            {"op": "Einsum", "name": "tr", "inputs": ["a"], "outputs": ["at"],
             "attrs": {"equation": "ij->ji"}},
            {"op": "Einsum", "name": "mm", "inputs": ["at", "b"], "outputs": ["c"],
             "attrs": {"equation": "ik,jk->ij"}},
        ],
        [("a", (3, 4)), ("b", (5, 3))],
        ["c"],
    ), False))

    corpus.append(("layernorm-chain-unlowered", ln_chain_model(3, 6), False))

    red = build_model(
        [
            {"op": "Exp", "name": "e", "inputs": ["x"], "outputs": ["t"], "attrs": {}},
            {"op": "ReduceMax", "name": "r", "inputs": ["t"], "outputs": ["m"],
             "attrs": {"axes": [1], "keepdims": 1}},
            {"op": "Sub", "name": "s", "inputs": ["t", "m"], "outputs": ["y"], "attrs": {}},
        ],
        [("x", (5, 7))],
        ["y"],
    )
    corpus.append(("reduce-broadcast", lowering.lower_all(red), False))

    corpus.append(("replication", lowering.lower_all(replication_model()), True))
    corpus.append(("copy", copy_graph(), False))
    corpus.append(("wcr-init", wcr_no_identity_graph(), False))
    corpus.append(("unit-dims", unit_dim_graph(), False))
    return corpus


NEVER_MORE_INTERMEDIATE_BYTES = {
    "subgraph_fusion",
    "tasklet_fusion",
    "redundant_copy_elimination",
    "transient_reuse",
}


def test_every_match_preserves_semantics():
    rng = np.random.default_rng(RNG_SEED)
    checked = 0
    for name, g, positive in _sweep_corpus():
        matches = transforms.find_matches(g, "ALL")
        bytes_before = ir.intermediate_bytes(g, None)
        peak_before = transforms.peak_transient_bytes(g)
        for m in matches:
            g2, _ = transforms.apply(m, g)
            assert ir.validate(g2) == []
            outs = sorted(set(graph_outputs(g)) & set(graph_outputs(g2)))
            assert outs, f"{name}: {m.match_id} left no shared outputs"
            for _ in range(3):
                arrays = rand_inputs(g, rng, positive=positive)
                o1 = interp.run_outputs(g, arrays, outputs=outs)
                o2 = interp.run_outputs(g2, arrays, outputs=outs)
                for out in o1:
                    np.testing.assert_allclose(
                        o2[out], o1[out], rtol=1e-6, atol=1e-9,
                        err_msg=f"{name}: {m.match_id}",
                    )
            if m.name in NEVER_MORE_INTERMEDIATE_BYTES:
                assert ir.intermediate_bytes(g2, None) <= bytes_before, (
                    f"{name}: {m.name} increased intermediate bytes"
                )
            if m.name == "map_replication":
                assert transforms.peak_transient_bytes(g2) <= peak_before, (
                    f"{name}: replication increased peak transient bytes"
                )
            checked += 1
    assert checked >= 40, f"sweep too small to be meaningful ({checked})"


def test_movement_volume_reduced_by_softmax_fusion():
    g = lowering.lower_all(softmax_model(4, 3, 8))
    full = max(
        transforms.find_matches(g, "subgraph_fusion"),
        key=lambda m: len(m.payload["scopes"]),
    )
    g2, _ = transforms.apply(full, g)
    before = ir.movement_volume(g).bytes
    after = ir.movement_volume(g2).bytes
    assert before is not None and after is not None
    assert after < before
