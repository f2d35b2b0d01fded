"""Interpreter tests: every graph is executed and checked against a plain
numpy computation of the same thing, and the movement counters are checked
against the analytic per-edge movement."""

import math

import numpy as np
import pytest

from dfir import interp, ir
from dfir.interp import ExecError, compare_outputs, execute, finite_diff_grad
from dfir.ir import Graph, MapExit, Memlet, Subset, Tasklet
from dfir.symexpr import Const, Sym, parse

from test_ir import add_elementwise_map, build_scale, build_two_level_nest


def check_edge_counters(g, counters, bindings=None):
    """The measured per-edge element counts must match the analytic edge
    movement exactly."""
    from dfir.symexpr import evaluate

    for st in g.states:
        for i, e in enumerate(st.edges):
            if e.memlet is None:
                continue
            want = int(evaluate(ir.edge_movement(g, st, e), bindings))
            got = counters.edge_elements.get((st.name, i), 0)
            assert got == want, (
                f"edge {i} in state {st.name}: measured {got}, analytic {want}"
            )


def test_elementwise_scale():
    g = build_scale()
    x = np.linspace(-2, 2, 7)
    out, counters = execute(g, {"x": x}, {"N": 7})
    np.testing.assert_allclose(out["y"], 2 * x, rtol=0, atol=0)
    assert counters.element_reads["x"] == 7
    assert counters.element_writes["y"] == 7
    assert counters.flops == {"mul": 7}
    assert counters.scope_iterations == {"main/scale": 7}
    check_edge_counters(g, counters, {"N": 7})


def test_mish_chain_matches_numpy():
    import test_ir

    g = test_ir.build_mish_chain()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((16, 3, 256, 256), dtype=np.float32)
    out, counters = execute(g, {"x": x})
    want = x * np.tanh(np.log1p(np.exp(x)))
    np.testing.assert_allclose(out["y"], want, rtol=2e-6, atol=2e-6)
    check_edge_counters(g, counters)


def build_sum_reduction(wcr="sum"):
    g = Graph("reduce")
    g.add_symbol("N")
    g.add_container("x", ("N",), "f64", "Global")
    g.add_container("r", (), "f64", "Global")
    st = g.add_state("main")
    x = st.add_access("x")
    r = st.add_access("r")
    en, ex = st.add_map("red", ("i",), [(0, "N", 1)])
    t = st.add_node(Tasklet("pass_through", ("a",), ("o",), {"o": Sym("a")}))
    st.add_edge(x, None, en, "in_x", Memlet("x", Subset.full(["N"])))
    st.add_edge(en, "out_x", t, "a", Memlet("x", Subset.index(["i"])))
    identity = 0.0 if wcr == "sum" else -math.inf
    kw = dict(wcr=wcr, wcr_identity=identity)
    st.add_edge(t, "o", ex, "in_r", Memlet("r", Subset(()), **kw))
    st.add_edge(ex, "out_r", r, None, Memlet("r", Subset(()), **kw))
    return g


def test_wcr_sum_reduction():
    g = build_sum_reduction("sum")
    assert ir.validate(g) == []
    x = np.linspace(0.5, 3.5, 11)
    out, counters = execute(g, {"x": x}, {"N": 11})
    np.testing.assert_allclose(out["r"], x.sum(), rtol=1e-15)
    check_edge_counters(g, counters, {"N": 11})


def test_wcr_max_reduction_with_identity():
    g = build_sum_reduction("max")
    x = np.array([-5.0, -2.0, -9.0])
    out, _ = execute(g, {"x": x}, {"N": 3})
    assert out["r"][()] == -2.0


def test_wcr_accumulates_without_identity():
    g = build_sum_reduction("sum")
    # Drop the identity: accumulation then folds into prior contents.
    for e in g.states[0].edges:
        if e.memlet is not None and e.memlet.wcr:
            e.memlet.wcr_identity = None
    x = np.ones(4)
    out, _ = execute(g, {"x": x, "r": np.array(10.0)}, {"N": 4})
    assert out["r"][()] == 14.0


def test_contraction_nest_fast_path():
    g = build_two_level_nest()
    assert ir.validate(g) == []
    rng = np.random.default_rng(1)
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal((3, 5))
    bind = {"I": 4, "J": 5, "K": 3}
    out, counters = execute(g, {"A": a, "B": b}, bind)
    np.testing.assert_allclose(out["C"], a @ b, rtol=1e-13)
    assert counters.scope_iterations == {"main/outer": 20, "main/inner": 60}
    assert counters.element_reads["A"] == 60
    assert counters.element_reads["B"] == 60
    assert counters.element_writes["C"] == 60
    assert counters.flops == {"mul": 60}
    check_edge_counters(g, counters, bind)


def test_contraction_nest_generic_path_same_counters():
    # A non-product body forces the generic executor; counters and the
    # result must still line up.
    g = build_two_level_nest()
    t = g.states[0].nodes[7]
    t.body["o"] = parse("a * b + 0 * a")
    rng = np.random.default_rng(2)
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal((3, 5))
    bind = {"I": 4, "J": 5, "K": 3}
    out, counters = execute(g, {"A": a, "B": b}, bind)
    np.testing.assert_allclose(out["C"], a @ b, rtol=1e-13)
    assert counters.scope_iterations == {"main/outer": 20, "main/inner": 60}
    assert counters.element_writes["C"] == 60
    check_edge_counters(g, counters, bind)


def test_sum_of_inputs_nest_generic():
    g = build_two_level_nest()
    t = g.states[0].nodes[7]
    t.body["o"] = parse("a + b")
    a = np.arange(6, dtype=np.float64).reshape(2, 3)
    b = np.arange(12, dtype=np.float64).reshape(3, 4)
    out, _ = execute(g, {"A": a, "B": b}, {"I": 2, "J": 4, "K": 3})
    want = a.sum(axis=1)[:, None] + b.sum(axis=0)[None, :]
    np.testing.assert_allclose(out["C"], want, rtol=1e-14)


def test_strided_read():
    g = Graph("stride")
    g.add_container("x", (10,), "f64", "Global")
    g.add_container("y", (5,), "f64", "Global")
    st = g.add_state("main")
    x = st.add_access("x")
    y = st.add_access("y")
    en, ex = st.add_map("gather_even", ("i",), [(0, 5, 1)])
    t = st.add_node(Tasklet("pick", ("a",), ("o",), {"o": Sym("a")}))
    st.add_edge(x, None, en, "in_x", Memlet("x", Subset.of([(0, 10, 2)])))
    st.add_edge(en, "out_x", t, "a", Memlet("x", Subset.index(["2 * i"])))
    st.add_edge(t, "o", ex, "in_y", Memlet("y", Subset.index(["i"])))
    st.add_edge(ex, "out_y", y, None, Memlet("y", Subset.full([5])))
    x_val = np.arange(10.0)
    out, _ = execute(g, {"x": x_val})
    np.testing.assert_array_equal(out["y"], x_val[::2])


def test_offset_scatter_uses_element_order():
    # Two lattice points hit the same cell through floordiv(i, 2); wcr
    # sums them via the element-order scatter.
    g = Graph("collide")
    g.add_container("x", (4,), "f64", "Global")
    g.add_container("y", (2,), "f64", "Global")
    st = g.add_state("main")
    x = st.add_access("x")
    y = st.add_access("y")
    en, ex = st.add_map("fold", ("i",), [(0, 4, 1)])
    t = st.add_node(Tasklet("pass_through", ("a",), ("o",), {"o": Sym("a")}))
    st.add_edge(x, None, en, "in_x", Memlet("x", Subset.full([4])))
    st.add_edge(en, "out_x", t, "a", Memlet("x", Subset.index(["i"])))
    kw = dict(wcr="sum", wcr_identity=0.0)
    st.add_edge(t, "o", ex, "in_y", Memlet("y", Subset.index(["floordiv(i, 2)"]), **kw))
    st.add_edge(ex, "out_y", y, None, Memlet("y", Subset.full([2]), **kw))
    out, _ = execute(g, {"x": np.array([1.0, 2.0, 4.0, 8.0])})
    np.testing.assert_array_equal(out["y"], [3.0, 12.0])


def build_row_mean():
    """y[i] = mean_j x[i,j] via a scoped accumulator and an inner map."""
    g = Graph("row_mean")
    g.add_symbol("I")
    g.add_symbol("J")
    g.add_container("x", ("I", "J"), "f64", "Global")
    g.add_container("acc", (), "f64", "Scoped", lifetime="Scope")
    g.add_container("y", ("I",), "f64", "Global")
    st = g.add_state("main")
    x = st.add_access("x")
    y = st.add_access("y")
    oen, oex = st.add_map("rows", ("i",), [(0, "I", 1)])
    ien, iex = st.add_map("row_sum", ("j",), [(0, "J", 1)])
    acc = st.add_access("acc")
    t_sum = st.add_node(Tasklet("pass_through", ("a",), ("o",), {"o": Sym("a")}))
    t_div = st.add_node(Tasklet("divide", ("s",), ("o",), {"o": parse("s / J")}))
    st.add_edge(x, None, oen, "in_x", Memlet("x", Subset.full(["I", "J"])))
    st.add_edge(oen, "out_x", ien, "in_x", Memlet("x", Subset.of([("i", "i+1", 1), (0, "J", 1)])))
    st.add_edge(ien, "out_x", t_sum, "a", Memlet("x", Subset.index(["i", "j"])))
    kw = dict(wcr="sum", wcr_identity=0.0)
    st.add_edge(t_sum, "o", iex, "in_acc", Memlet("acc", Subset(()), **kw))
    st.add_edge(iex, "out_acc", acc, None, Memlet("acc", Subset(()), **kw))
    st.add_edge(acc, None, t_div, "s", Memlet("acc", Subset(())))
    st.add_edge(t_div, "o", oex, "in_y", Memlet("y", Subset.index(["i"])))
    st.add_edge(oex, "out_y", y, None, Memlet("y", Subset.full(["I"])))
    return g


def test_scoped_accumulator_row_mean():
    g = build_row_mean()
    assert ir.validate(g) == []
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 9))
    bind = {"I": 6, "J": 9}
    out, counters = execute(g, {"x": x}, bind)
    np.testing.assert_allclose(out["y"], x.mean(axis=1), rtol=1e-14)
    assert counters.scope_iterations == {"main/rows": 6, "main/row_sum": 54}
    check_edge_counters(g, counters, bind)
    # One top-level unit even though a reduction runs inside.
    assert ir.kernel_count(g.states[0]) == 1


def test_toplevel_tasklet_and_copy():
    g = Graph("scalar_ops")
    g.add_container("x", (5,), "f64", "Global")
    g.add_container("s", (), "f64", "Global")
    g.add_container("y", (5,), "f64", "Global")
    st = g.add_state("main")
    x = st.add_access("x")
    s = st.add_access("s")
    y = st.add_access("y")
    t = st.add_node(Tasklet("pick2", ("a",), ("o",), {"o": parse("3 * a")}))
    st.add_edge(x, None, t, "a", Memlet("x", Subset.index([2])))
    st.add_edge(t, "o", s, None, Memlet("s", Subset(())))
    st.add_edge(x, None, y, None, Memlet("x", Subset.full([5]), other_subset=Subset.full([5])))
    out, counters = execute(g, {"x": np.arange(5.0)})
    assert out["s"][()] == 6.0
    np.testing.assert_array_equal(out["y"], np.arange(5.0))
    assert counters.element_reads["x"] == 6


def test_copy_reshape():
    g = Graph("reshape_copy")
    g.add_container("x", (2, 3), "f64", "Global")
    g.add_container("y", (3, 2), "f64", "Global")
    st = g.add_state("main")
    x = st.add_access("x")
    y = st.add_access("y")
    st.add_edge(
        x, None, y, None,
        Memlet("x", Subset.full([2, 3]), other_subset=Subset.full([3, 2])),
    )
    x_val = np.arange(6.0).reshape(2, 3)
    out, _ = execute(g, {"x": x_val})
    np.testing.assert_array_equal(out["y"], x_val.reshape(3, 2))


def test_multi_state_execution():
    import test_ir

    g = Graph("two")
    g.add_container("x", (8,), "f64", "Global")
    g.add_container("t", (8,), "f64", "Transient")
    g.add_container("y", (8,), "f64", "Global")
    s1 = g.add_state("a")
    x = s1.add_access("x")
    t1 = s1.add_access("t")
    test_ir.add_elementwise_map(g, s1, "sq", {"a": (x, "x")}, (t1, "t"), "a * a", [8])
    s2 = g.add_state("b")
    t2 = s2.add_access("t")
    y = s2.add_access("y")
    test_ir.add_elementwise_map(g, s2, "inc", {"a": (t2, "t")}, (y, "y"), "a + 1", [8])
    x_val = np.arange(8.0)
    out, _ = execute(g, {"x": x_val})
    np.testing.assert_array_equal(out["y"], x_val**2 + 1)


def test_nested_graph_execution():
    inner = Graph("inner")
    inner.add_container("u", (4,), "f64", "Global")
    inner.add_container("v", (4,), "f64", "Global")
    st_i = inner.add_state("main")
    u = st_i.add_access("u")
    v = st_i.add_access("v")
    add_elementwise_map(inner, st_i, "dbl", {"a": (u, "u")}, (v, "v"), "2 * a", [4])

    g = Graph("outer")
    g.add_container("x", (4,), "f64", "Global")
    g.add_container("y", (4,), "f64", "Global")
    st = g.add_state("main")
    x = st.add_access("x")
    y = st.add_access("y")
    nested = st.add_node(
        ir.NestedGraph("call_dbl", inner, {"in_u": "u"}, {"out_v": "v"})
    )
    st.add_edge(x, None, nested, "in_u", Memlet("x", Subset.full([4])))
    st.add_edge(nested, "out_v", y, None, Memlet("y", Subset.full([4])))
    out, _ = execute(g, {"x": np.arange(4.0)})
    np.testing.assert_array_equal(out["y"], 2 * np.arange(4.0))


def test_domain_error_reported():
    g = Graph("bad_log")
    g.add_container("x", (3,), "f64", "Global")
    g.add_container("y", (3,), "f64", "Global")
    st = g.add_state("main")
    x = st.add_access("x")
    y = st.add_access("y")
    add_elementwise_map(g, st, "lg", {"a": (x, "x")}, (y, "y"), "log(a)", [3])
    with pytest.raises(ExecError):
        execute(g, {"x": np.array([1.0, -1.0, 2.0])})


def test_input_shape_mismatch():
    g = build_scale()
    with pytest.raises(ExecError):
        execute(g, {"x": np.zeros((3, 3))}, {"N": 9})


def test_compare_outputs():
    a = {"y": np.array([1.0, 2.0])}
    b = {"y": np.array([1.0, 2.0 + 1e-9])}
    report = compare_outputs(a, b, rtol=1e-6)
    assert report["y"] < 1e-8
    with pytest.raises(ExecError):
        compare_outputs(a, {"y": np.array([1.0, 3.0])}, rtol=1e-6)


def test_finite_diff_grad_scale():
    g = build_scale()
    x = np.array([0.3, -1.2, 2.0])
    grads = finite_diff_grad(g, {"x": x}, outputs=["y"], wrt=["x"], bindings={"N": 3})
    np.testing.assert_allclose(grads["x"], 2.0 * np.ones(3), rtol=1e-7)


def test_finite_diff_grad_sampled_coords():
    g = build_scale()
    x = np.ones(10)
    grads = finite_diff_grad(
        g, {"x": x}, outputs=["y"], wrt=["x"], bindings={"N": 10},
        coords={"x": [0, 7]},
    )
    assert grads["x"][0] == pytest.approx(2.0, rel=1e-7)
    assert grads["x"][7] == pytest.approx(2.0, rel=1e-7)
    assert grads["x"][3] == 0.0


def test_chunked_execution_matches():
    # Force tiny chunks so the chunked path is exercised, then compare.
    g = build_scale()
    x = np.linspace(-1, 1, 50)
    old = interp._CHUNK_ELEMENTS
    interp._CHUNK_ELEMENTS = 8
    try:
        out, counters = execute(g, {"x": x}, {"N": 50})
    finally:
        interp._CHUNK_ELEMENTS = old
    np.testing.assert_allclose(out["y"], 2 * x)
    assert counters.scope_iterations == {"main/scale": 50}
    check_edge_counters(g, counters, {"N": 50})


def test_f32_wcr_accumulates_in_f64():
    # Sum many small f32 values; accumulation in f64 keeps the error tiny.
    g = build_sum_reduction("sum")
    g.container("x").dtype = "f32"
    g.container("r").dtype = "f32"
    n = 200000
    x = np.full(n, 0.1, dtype=np.float32)
    out, _ = execute(g, {"x": x}, {"N": n})
    got = float(out["r"][()])
    assert abs(got - 0.1 * n) / (0.1 * n) < 1e-6


# ---------------------------------------------------------------------------
# Scoped buffers and sequential nests


def build_fused_softmax(h=16, b=8, n=128):
    """One top-level map over (h, b) whose body chains four inner maps over n
    through Scoped intermediates: the shape a fully fused softmax takes."""
    g = Graph("fused_softmax")
    g.add_container("x", (h, b, n), "f64", "Global")
    g.add_container("y", (h, b, n), "f64", "Global")
    g.add_container("mx", (), "f64", "Scoped")
    g.add_container("t", (n,), "f64", "Scoped")
    g.add_container("sm", (), "f64", "Scoped")
    st = g.add_state("main")
    ax = st.add_access("x")
    ay = st.add_access("y")
    oen, oex = st.add_map("softmax_fused", ["i", "j"], [(0, h, 1), (0, b, 1)])
    a_mx, a_t, a_sm = st.add_access("mx"), st.add_access("t"), st.add_access("sm")

    def hull(name):
        return Memlet(name, Subset.full(g.container(name).shape))

    st.add_edge(ax, None, oen, "in_x", hull("x"))

    # Stage 1: mx = max_k x[i, j, k]
    en1, ex1 = st.add_map("s_max", ["k"], [(0, n, 1)])
    t1 = st.add_node(Tasklet("tmax", ("v0",), ("o",), {"o": parse("v0")}))
    st.add_edge(oen, "out_x", en1, "in_x", hull("x"))
    st.add_edge(en1, "out_x", t1, "v0", Memlet("x", Subset.index(["i", "j", "k"])))
    st.add_edge(t1, "o", ex1, "in_o",
                Memlet("mx", Subset.of(()), wcr="max", wcr_identity=-math.inf))
    st.add_edge(ex1, "out_o", a_mx, None,
                Memlet("mx", Subset.of(()), wcr="max", wcr_identity=-math.inf))

    # Stage 2: t[k] = exp(x[i, j, k] - mx)
    en2, ex2 = st.add_map("s_exp", ["k"], [(0, n, 1)])
    t2 = st.add_node(Tasklet("texp", ("v0", "v1"), ("o",), {"o": parse("exp(v0 - v1)")}))
    st.add_edge(oen, "out_x", en2, "in_x", hull("x"))
    st.add_edge(a_mx, None, en2, "in_m", Memlet("mx", Subset.of(())))
    st.add_edge(en2, "out_x", t2, "v0", Memlet("x", Subset.index(["i", "j", "k"])))
    st.add_edge(en2, "out_m", t2, "v1", Memlet("mx", Subset.of(())))
    st.add_edge(t2, "o", ex2, "in_o", Memlet("t", Subset.index(["k"])))
    st.add_edge(ex2, "out_o", a_t, None, hull("t"))

    # Stage 3: sm = sum_k t[k]
    en3, ex3 = st.add_map("s_sum", ["k"], [(0, n, 1)])
    t3 = st.add_node(Tasklet("tsum", ("v0",), ("o",), {"o": parse("v0")}))
    st.add_edge(a_t, None, en3, "in_t", hull("t"))
    st.add_edge(en3, "out_t", t3, "v0", Memlet("t", Subset.index(["k"])))
    st.add_edge(t3, "o", ex3, "in_o",
                Memlet("sm", Subset.of(()), wcr="sum", wcr_identity=0.0))
    st.add_edge(ex3, "out_o", a_sm, None,
                Memlet("sm", Subset.of(()), wcr="sum", wcr_identity=0.0))

    # Stage 4: y[i, j, k] = t[k] / sm
    en4, ex4 = st.add_map("s_div", ["k"], [(0, n, 1)])
    t4 = st.add_node(Tasklet("tdiv", ("v0", "v1"), ("o",), {"o": parse("v0 / v1")}))
    st.add_edge(a_t, None, en4, "in_t", hull("t"))
    st.add_edge(a_sm, None, en4, "in_s", Memlet("sm", Subset.of(())))
    st.add_edge(en4, "out_t", t4, "v0", Memlet("t", Subset.index(["k"])))
    st.add_edge(en4, "out_s", t4, "v1", Memlet("sm", Subset.of(())))
    st.add_edge(t4, "o", ex4, "in_o", Memlet("y", Subset.index(["i", "j", "k"])))
    st.add_edge(ex4, "out_o", oex, "in_y", hull("y"))
    st.add_edge(oex, "out_y", ay, None, hull("y"))
    return g


def test_fused_softmax_nest_executes():
    g = build_fused_softmax(4, 3, 16)
    assert ir.validate(g) == []
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 3, 16))
    out, counters = execute(g, {"x": x})
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    np.testing.assert_allclose(out["y"], e / e.sum(axis=-1, keepdims=True), rtol=1e-13)
    assert ir.kernel_count(g.states[0]) == 1
    assert counters.scope_iterations["main/softmax_fused"] == 4 * 3


def test_fused_softmax_nest_chunked():
    g = build_fused_softmax(6, 2, 9)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((6, 2, 9))
    old = interp._CHUNK_ELEMENTS
    interp._CHUNK_ELEMENTS = 32
    try:
        out, _ = execute(g, {"x": x})
    finally:
        interp._CHUNK_ELEMENTS = old
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    np.testing.assert_allclose(out["y"], e / e.sum(axis=-1, keepdims=True), rtol=1e-13)


def build_tiled_scale(n=10, tile=4):
    """Tiled elementwise doubling: outer tile map, inner map with a
    min() boundary extent that depends on the tile index."""
    g = Graph("tiled")
    g.add_container("x", (n,), "f64", "Global")
    g.add_container("y", (n,), "f64", "Global")
    st = g.add_state("main")
    ax, ay = st.add_access("x"), st.add_access("y")
    n_tiles = -(-n // tile)
    oen, oex = st.add_map("scale_tiled", ["it"], [(0, n_tiles, 1)])
    ien, iex = st.add_map(
        "scale_tile", ["i"], [(0, parse(f"min({tile}, {n} - it * {tile})"), 1)]
    )
    t = st.add_node(Tasklet("tl", ("v0",), ("o",), {"o": parse("v0 * 2")}))
    st.add_edge(ax, None, oen, "in_x", Memlet("x", Subset.full((n,))))
    st.add_edge(oen, "out_x", ien, "in_x", Memlet("x", Subset.full((n,))))
    st.add_edge(ien, "out_x", t, "v0",
                Memlet("x", Subset.index([parse(f"it * {tile} + i")])))
    st.add_edge(t, "o", iex, "in_o",
                Memlet("y", Subset.index([parse(f"it * {tile} + i")])))
    st.add_edge(iex, "out_o", oex, "in_y", Memlet("y", Subset.full((n,))))
    st.add_edge(oex, "out_y", ay, None, Memlet("y", Subset.full((n,))))
    return g


def test_tiled_map_runs_sequentially():
    g = build_tiled_scale(10, 4)
    assert ir.validate(g) == []
    x = np.arange(10.0)
    out, counters = execute(g, {"x": x})
    np.testing.assert_array_equal(out["y"], 2 * x)
    # 3 tiles; the boundary tile covers only 2 elements.
    assert counters.scope_iterations["main/scale_tiled"] == 3
    assert counters.scope_iterations["main/scale_tile"] == 10
    assert counters.element_writes["y"] == 10


def test_tiled_reduction_sequential_wcr():
    n, tile = 7, 3
    g = Graph("tiled_sum")
    g.add_container("x", (n,), "f64", "Global")
    g.add_container("r", (), "f64", "Global")
    st = g.add_state("main")
    ax, ar = st.add_access("x"), st.add_access("r")
    oen, oex = st.add_map("sum_tiled", ["it"], [(0, -(-n // tile), 1)])
    ien, iex = st.add_map(
        "sum_tile", ["i"], [(0, parse(f"min({tile}, {n} - it * {tile})"), 1)]
    )
    t = st.add_node(Tasklet("tl", ("v0",), ("o",), {"o": parse("v0")}))
    st.add_edge(ax, None, oen, "in_x", Memlet("x", Subset.full((n,))))
    st.add_edge(oen, "out_x", ien, "in_x", Memlet("x", Subset.full((n,))))
    st.add_edge(ien, "out_x", t, "v0",
                Memlet("x", Subset.index([parse(f"it * {tile} + i")])))
    wm = Memlet("r", Subset.of(()), wcr="sum", wcr_identity=0.0)
    st.add_edge(t, "o", iex, "in_o", wm)
    st.add_edge(iex, "out_o", oex, "in_r", wm)
    st.add_edge(oex, "out_r", ar, None, wm)
    x = np.linspace(1, 2, n)
    out, _ = execute(g, {"x": x})
    assert float(out["r"][()]) == pytest.approx(x.sum(), rel=1e-13)
