"""Operator registry, shape inference, reference semantics, model import."""

import base64
import json
import struct

import numpy as np
import pytest

from dfir import dtns, frontend, interp, ir
from dfir.frontend import (
    DuplicateOp,
    ModelError,
    OpSpec,
    ShapeError,
    UnsupportedOp,
    build_graph,
    import_model,
    infer_shapes,
    parse_model_json,
    reference_apply,
)
from dfir.symexpr import Sym, as_expr

RNG = np.random.default_rng(11)


def dims(shape):
    return tuple(as_expr(d) for d in shape)


def got_shapes(op, attrs, in_shapes, dtypes=None):
    dtypes = dtypes or ["f64"] * len(in_shapes)
    out = infer_shapes(op, attrs, [dims(s) for s in in_shapes], dtypes)
    return [tuple(int(d.value) for d in shape) for shape, _ in out]


# ---------------------------------------------------------------------------
# Registry


def test_registry_covers_v1_ops():
    expected = {
        "Add", "Sub", "Mul", "Div", "Pow", "Neg", "Exp", "Log", "Sqrt", "Tanh",
        "Sigmoid", "Relu", "Softplus", "ReduceSum", "ReduceMean", "ReduceMax",
        "MatMul", "Gemm", "Einsum", "Softmax", "LayerNormalization",
        "BatchNormalization", "Conv", "GlobalAveragePool", "Reshape",
        "Transpose", "Flatten", "Identity", "Constant",
    }
    assert expected <= set(frontend.registered_ops())


def test_duplicate_registration_rejected():
    with pytest.raises(DuplicateOp):
        frontend.register_op(
            OpSpec("Add", {}, 2, 2, lambda a, s, d: [(s[0], d[0])],
                   lambda a, x: [x[0] + x[1]])
        )


def test_register_custom_op_visible_everywhere():
    name = "ScaleByThree"
    if name not in frontend.registered_ops():
        frontend.register_op(
            OpSpec(
                name, {}, 1, 1,
                lambda a, s, d: [(s[0], d[0])],
                lambda a, x: [x[0] * 3.0],
            )
        )
    model = {
        "version": "dfm-0.1",
        "inputs": [{"name": "x", "shape": [4], "dtype": "f64"}],
        "outputs": ["y"],
        "nodes": [{"op": name, "inputs": ["x"], "outputs": ["y"]}],
    }
    g = import_model(model)
    x = RNG.standard_normal(4)
    out = interp.run_outputs(g, {"x": x}, outputs=["y"])
    np.testing.assert_allclose(out["y"], x * 3.0)


def test_attr_normalization():
    norm = frontend.normalize_attrs("Gemm", {"transA": 1})
    assert norm == {"alpha": 1.0, "beta": 1.0, "transA": 1, "transB": 0}
    with pytest.raises(ShapeError, match="unknown attribute"):
        frontend.normalize_attrs("Gemm", {"transX": 1})
    with pytest.raises(ShapeError, match="missing required"):
        frontend.normalize_attrs("Einsum", {})


# ---------------------------------------------------------------------------
# Shape inference


def test_broadcast_rules():
    assert got_shapes("Add", {}, [(3, 1, 5), (4, 5)]) == [(3, 4, 5)]
    assert got_shapes("Mul", {}, [(1,), (2, 3)]) == [(2, 3)]
    with pytest.raises(ShapeError, match="broadcast"):
        got_shapes("Add", {}, [(3, 2), (4, 2)])


def test_symbolic_matmul():
    out = infer_shapes(
        "MatMul", {}, [dims(("N", 784)), dims((784, 128))], ["f32", "f32"]
    )
    shape, dtype = out[0]
    assert dtype == "f32"
    assert shape[0] == Sym("N") and int(shape[1].value) == 128


def test_matmul_batched_and_vector():
    assert got_shapes("MatMul", {}, [(7, 1, 4, 5), (3, 5, 2)]) == [(7, 3, 4, 2)]
    assert got_shapes("MatMul", {}, [(5,), (5, 2)]) == [(2,)]
    assert got_shapes("MatMul", {}, [(4, 5), (5,)]) == [(4,)]
    with pytest.raises(ShapeError, match="contracted"):
        got_shapes("MatMul", {}, [(4, 5), (6, 2)])


def test_reduce_shapes():
    assert got_shapes("ReduceSum", {"axes": [1]}, [(2, 3, 4)]) == [(2, 1, 4)]
    assert got_shapes("ReduceSum", {"axes": [1], "keepdims": 0}, [(2, 3, 4)]) == [(2, 4)]
    assert got_shapes("ReduceMax", {}, [(2, 3)]) == [(1, 1)]
    assert got_shapes("ReduceMean", {"axes": [-1], "keepdims": 0}, [(2, 3)]) == [(2,)]
    with pytest.raises(ShapeError, match="out of range"):
        got_shapes("ReduceSum", {"axes": [3]}, [(2, 3)])


def test_gemm_shapes():
    assert got_shapes("Gemm", {"transA": 1}, [(5, 2), (5, 3)]) == [(2, 3)]
    assert got_shapes("Gemm", {"transB": 1}, [(2, 5), (3, 5), (3,)]) == [(2, 3)]
    with pytest.raises(ShapeError):
        got_shapes("Gemm", {}, [(2, 5), (3, 5)])


def test_einsum_shapes():
    assert got_shapes("Einsum", {"equation": "ik,jk->ij"}, [(2, 4), (3, 4)]) == [(2, 3)]
    # Implicit output: indices appearing once, alphabetical.
    assert got_shapes("Einsum", {"equation": "ij,jk"}, [(2, 4), (4, 3)]) == [(2, 3)]
    assert got_shapes("Einsum", {"equation": "ij->ji"}, [(2, 5)]) == [(5, 2)]
    with pytest.raises(ShapeError, match="bound to both"):
        got_shapes("Einsum", {"equation": "ij,jk->ik"}, [(2, 4), (5, 3)])
    with pytest.raises(ShapeError, match="repeated output"):
        got_shapes("Einsum", {"equation": "ij->ii"}, [(2, 2)])
    with pytest.raises(ShapeError, match="ellipsis"):
        got_shapes("Einsum", {"equation": "...i->..."}, [(2, 2)])


def test_conv_shapes():
    assert got_shapes(
        "Conv", {"strides": [2, 2], "pads": [1, 1, 1, 1]},
        [(1, 3, 8, 8), (6, 3, 3, 3)],
    ) == [(1, 6, 4, 4)]
    assert got_shapes("Conv", {"group": 4}, [(2, 4, 5, 5), (4, 1, 3, 3)]) == [(2, 4, 3, 3)]
    with pytest.raises(ShapeError, match="depthwise"):
        got_shapes("Conv", {"group": 2}, [(2, 4, 5, 5), (4, 2, 3, 3)])
    with pytest.raises(ShapeError, match="channel"):
        got_shapes("Conv", {}, [(1, 3, 8, 8), (6, 4, 3, 3)])


def test_layout_shapes():
    assert got_shapes("Reshape", {"shape": [0, -1]}, [(2, 3, 4)]) == [(2, 12)]
    assert got_shapes("Transpose", {}, [(2, 3, 4)]) == [(4, 3, 2)]
    assert got_shapes("Transpose", {"perm": [0, 2, 1]}, [(2, 3, 4)]) == [(2, 4, 3)]
    assert got_shapes("Flatten", {}, [(2, 3, 4)]) == [(2, 12)]
    assert got_shapes("Flatten", {"axis": -1}, [(2, 3, 4)]) == [(6, 4)]
    with pytest.raises(ShapeError, match="element count"):
        got_shapes("Reshape", {"shape": [5, 5]}, [(2, 3)])
    with pytest.raises(ShapeError, match="at most one"):
        got_shapes("Reshape", {"shape": [-1, -1]}, [(4,)])


def test_batchnorm_shapes():
    out = got_shapes(
        "BatchNormalization", {},
        [(4, 3, 2, 2), (3,), (3,), (3,), (3,)],
    )
    assert out == [(4, 3, 2, 2), (3,), (3,)]
    with pytest.raises(ShapeError, match=r"\(C,\)"):
        got_shapes("BatchNormalization", {}, [(4, 3, 2, 2), (4,), (3,), (3,), (3,)])


# ---------------------------------------------------------------------------
# Reference semantics


def test_softmax_symmetry():
    (y,) = reference_apply("Softmax", {}, [np.array([0.0, 0.0])])
    np.testing.assert_allclose(y, [0.5, 0.5])
    x = RNG.standard_normal((3, 5))
    (y,) = reference_apply("Softmax", {"axis": 0}, [x])
    np.testing.assert_allclose(y.sum(axis=0), 1.0)


def test_einsum_identity():
    a = RNG.standard_normal((2, 7))
    (y,) = reference_apply("Einsum", {"equation": "ij,jk->ik"}, [np.eye(2), a])
    np.testing.assert_allclose(y, a)


def test_layernorm_constant_input_gives_bias():
    x = np.full((3, 6), 2.5)
    gamma = RNG.standard_normal(6)
    beta = RNG.standard_normal(6)
    (y,) = reference_apply("LayerNormalization", {}, [x, gamma, beta])
    np.testing.assert_allclose(y, np.broadcast_to(beta, (3, 6)), atol=1e-12)


def test_layernorm_matches_manual():
    x = RNG.standard_normal((4, 5, 8))
    gamma = RNG.standard_normal(8)
    beta = RNG.standard_normal(8)
    (y,) = reference_apply("LayerNormalization", {"epsilon": 1e-3}, [x, gamma, beta])
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    expect = (x - mu) / np.sqrt(var + 1e-3) * gamma + beta
    np.testing.assert_allclose(y, expect, rtol=1e-12)


def test_gemm_variants():
    a, b, c = RNG.standard_normal((5, 2)), RNG.standard_normal((5, 3)), RNG.standard_normal(3)
    (y,) = reference_apply(
        "Gemm", {"alpha": 0.5, "beta": 2.0, "transA": 1}, [a, b, c]
    )
    np.testing.assert_allclose(y, 0.5 * a.T @ b + 2.0 * c, rtol=1e-12)


def test_conv_against_direct_loops():
    x = RNG.standard_normal((2, 3, 6, 7))
    w = RNG.standard_normal((4, 3, 3, 2))
    bias = RNG.standard_normal(4)
    attrs = {"strides": [2, 1], "pads": [1, 0, 1, 0]}
    (y,) = reference_apply("Conv", attrs, [x, w, bias])
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0)))
    oh = (6 + 2 - 3) // 2 + 1
    ow = (7 + 0 - 2) // 1 + 1
    want = np.zeros((2, 4, oh, ow))
    for n in range(2):
        for m in range(4):
            for i in range(oh):
                for j in range(ow):
                    acc = bias[m]
                    for c in range(3):
                        for ki in range(3):
                            for kj in range(2):
                                acc += xp[n, c, i * 2 + ki, j + kj] * w[m, c, ki, kj]
                    want[n, m, i, j] = acc
    np.testing.assert_allclose(y, want, rtol=1e-12)


def test_depthwise_conv():
    x = RNG.standard_normal((1, 3, 5, 5))
    w = RNG.standard_normal((3, 1, 3, 3))
    (y,) = reference_apply("Conv", {"group": 3}, [x, w])
    for c in range(3):
        (want,) = reference_apply("Conv", {}, [x[:, c : c + 1], w[c : c + 1]])
        np.testing.assert_allclose(y[:, c : c + 1], want, rtol=1e-12)


def test_batchnorm_training_stats():
    x = RNG.standard_normal((4, 3, 2, 2))
    scale = RNG.standard_normal(3)
    bias = RNG.standard_normal(3)
    rm = RNG.standard_normal(3)
    rv = RNG.random(3) + 0.5
    y, new_mean, new_var = reference_apply(
        "BatchNormalization", {"momentum": 0.8}, [x, scale, bias, rm, rv]
    )
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))  # biased
    sh = (1, 3, 1, 1)
    want = (x - mu.reshape(sh)) / np.sqrt(var.reshape(sh) + 1e-5)
    want = want * scale.reshape(sh) + bias.reshape(sh)
    np.testing.assert_allclose(y, want, rtol=1e-10)
    np.testing.assert_allclose(new_mean, 0.8 * rm + 0.2 * mu, rtol=1e-12)
    np.testing.assert_allclose(new_var, 0.8 * rv + 0.2 * var, rtol=1e-12)


def test_unary_values():
    x = RNG.standard_normal(64)
    checks = {
        "Sigmoid": 1.0 / (1.0 + np.exp(-x)),
        "Softplus": np.log(1.0 + np.exp(x)),
        "Relu": np.maximum(0.0, x),
        "Tanh": np.tanh(x),
        "Neg": -x,
        "Exp": np.exp(x),
    }
    for op, want in checks.items():
        (y,) = reference_apply(op, {}, [x])
        np.testing.assert_allclose(y, want, rtol=1e-12)


def test_pow_div_attribute_form():
    x = RNG.standard_normal(9) + 3.0
    (y,) = reference_apply("Pow", {"exponent": 3.0}, [x])
    np.testing.assert_allclose(y, x**3, rtol=1e-12)
    (y,) = reference_apply("Div", {"divisor": 4.0}, [x])
    np.testing.assert_allclose(y, x / 4.0, rtol=1e-12)


def test_global_average_pool():
    x = RNG.standard_normal((2, 3, 4, 5))
    (y,) = reference_apply("GlobalAveragePool", {}, [x])
    np.testing.assert_allclose(y, x.mean(axis=(2, 3), keepdims=True), rtol=1e-12)


def test_f32_outputs_keep_dtype():
    x = RNG.standard_normal((3, 3)).astype(np.float32)
    (y,) = reference_apply("Exp", {}, [x])
    assert y.dtype == np.float32


# ---------------------------------------------------------------------------
# Native JSON import


def mlp_model():
    w1 = RNG.standard_normal((4, 8))
    b1 = RNG.standard_normal(8)
    w2 = RNG.standard_normal((8, 3))
    return {
        "version": "dfm-0.1",
        "name": "mlp2",
        "inputs": [{"name": "x", "shape": [2, 4], "dtype": "f64"}],
        "outputs": ["y"],
        "initializers": [
            {"name": "w1", "dtype": "f64", "dims": [4, 8], "data": w1.reshape(-1).tolist()},
            {"name": "b1", "dtype": "f64", "dims": [8], "data": b1.tolist()},
            {"name": "w2", "dtype": "f64", "dims": [8, 3], "data": w2.reshape(-1).tolist()},
        ],
        "nodes": [
            {"op": "Gemm", "name": "fc1", "inputs": ["x", "w1", "b1"], "outputs": ["h"]},
            {"op": "Relu", "name": "act", "inputs": ["h"], "outputs": ["r"]},
            {"op": "Gemm", "name": "fc2", "inputs": ["r", "w2"], "outputs": ["y"]},
        ],
    }, (w1, b1, w2)


def test_import_mlp_structure():
    model, _ = mlp_model()
    g = import_model(model)
    assert len(g.containers) == 7  # x, w1, b1, h, r, w2, y
    libs = [n for n in g.states[0].nodes.values() if isinstance(n, ir.LibraryNode)]
    assert sorted(n.op for n in libs) == ["Gemm", "Gemm", "Relu"]
    assert g.container("y").storage == "Global"
    assert g.container("h").storage == "Transient"
    assert g.container("w1").constant
    assert ir.validate(g) == []


def test_import_mlp_executes():
    model, (w1, b1, w2) = mlp_model()
    g = import_model(model)
    x = RNG.standard_normal((2, 4))
    out = interp.run_outputs(g, {"x": x}, outputs=["y"])
    np.testing.assert_allclose(out["y"], np.maximum(x @ w1 + b1, 0.0) @ w2, rtol=1e-12)


def mish_model(shape=(4, 5)):
    return {
        "version": "dfm-0.1",
        "name": "mish",
        "inputs": [{"name": "x", "shape": list(shape), "dtype": "f64"}],
        "outputs": ["y"],
        "nodes": [
            {"op": "Softplus", "inputs": ["x"], "outputs": ["sp"]},
            {"op": "Tanh", "inputs": ["sp"], "outputs": ["th"]},
            {"op": "Mul", "inputs": ["x", "th"], "outputs": ["y"]},
        ],
    }


def test_import_mish_three_nodes():
    g = import_model(mish_model())
    libs = [n for n in g.states[0].nodes.values() if isinstance(n, ir.LibraryNode)]
    assert len(libs) == 3


def test_unsupported_op():
    model = mish_model()
    model["nodes"][0]["op"] = "FooBar"
    with pytest.raises(UnsupportedOp, match="FooBar"):
        import_model(model)


def test_undefined_input_and_duplicate_output():
    model = mish_model()
    model["nodes"][1]["inputs"] = ["ghost"]
    with pytest.raises(ModelError, match="ghost"):
        import_model(model)
    model = mish_model()
    model["nodes"][1]["outputs"] = ["sp"]
    with pytest.raises(ModelError, match="more than once"):
        import_model(model)


def test_bad_version_and_malformed_json(tmp_path):
    with pytest.raises(ModelError, match="version"):
        parse_model_json({"version": "dfm-9"})
    p = tmp_path / "bad.json"
    p.write_text("{нет")
    with pytest.raises(ModelError, match="malformed"):
        parse_model_json(str(p))


def test_initializer_file_and_base64(tmp_path):
    w = RNG.standard_normal((3, 2)).astype(np.float32)
    dtns.write_tensor(str(tmp_path / "w.dtns"), w)
    model = {
        "version": "dfm-0.1",
        "inputs": [{"name": "x", "shape": [3, 2], "dtype": "f32"}],
        "outputs": ["y"],
        "initializers": [
            {"name": "w", "file": "w.dtns"},
            {"name": "c", "base64": base64.b64encode(dtns.encode(np.float32(2.0))).decode()},
        ],
        "nodes": [
            {"op": "Mul", "inputs": ["x", "w"], "outputs": ["t"]},
            {"op": "Pow", "inputs": ["t", "c"], "outputs": ["y"]},
        ],
    }
    path = tmp_path / "m.json"
    path.write_text(json.dumps(model))
    g = import_model(str(path))
    # The rank-0 constant exponent was folded into the attribute form.
    pow_node = next(
        n for n in g.states[0].nodes.values()
        if isinstance(n, ir.LibraryNode) and n.op == "Pow"
    )
    assert pow_node.attrs["exponent"] == 2.0
    assert len(pow_node.in_conns) == 1
    x = RNG.standard_normal((3, 2)).astype(np.float32)
    out = interp.run_outputs(g, {"x": x}, outputs=["y"])
    np.testing.assert_allclose(out["y"], (x * w) ** 2, rtol=1e-6)


def test_symbolic_batch_dim():
    model = mish_model(shape=("N", 5))
    g = import_model(model)
    assert "N" in g.symbols
    x = RNG.standard_normal((7, 5))
    out = interp.run_outputs(g, {"x": x}, bindings={"N": 7}, outputs=["y"])
    want = x * np.tanh(np.log(1.0 + np.exp(x)))
    np.testing.assert_allclose(out["y"], want, rtol=1e-12)


def test_import_serialize_execute_matches_reference_composition():
    g = import_model(mish_model(shape=(6, 3)))
    g2 = ir.deserialize(ir.serialize(g))
    x = RNG.standard_normal((6, 3))
    out1 = interp.run_outputs(g, {"x": x}, outputs=["y"])
    out2 = interp.run_outputs(g2, {"x": x}, outputs=["y"])
    (sp,) = reference_apply("Softplus", {}, [x])
    (th,) = reference_apply("Tanh", {}, [sp])
    (want,) = reference_apply("Mul", {}, [x, th])
    np.testing.assert_array_equal(out1["y"], out2["y"])
    np.testing.assert_allclose(out1["y"], want, rtol=1e-12)


def test_constant_node_roundtrip():
    model = {
        "version": "dfm-0.1",
        "inputs": [{"name": "x", "shape": [2, 2], "dtype": "f64"}],
        "outputs": ["y"],
        "nodes": [
            {
                "op": "Constant",
                "inputs": [],
                "outputs": ["c"],
                "attrs": {"value": {"dtype": "f64", "dims": [2, 2],
                                    "data": [1.0, 2.0, 3.0, 4.0]}},
            },
            {"op": "Add", "inputs": ["x", "c"], "outputs": ["y"]},
        ],
    }
    g = import_model(model)
    g2 = ir.deserialize(ir.serialize(g))
    x = RNG.standard_normal((2, 2))
    out = interp.run_outputs(g2, {"x": x}, outputs=["y"])
    np.testing.assert_allclose(out["y"], x + np.array([[1.0, 2.0], [3.0, 4.0]]))


# ---------------------------------------------------------------------------
# ONNX wire-format reader


def _vint(n):
    n &= (1 << 64) - 1
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _field(num, wire, payload=b""):
    tag = _vint(num << 3 | wire)
    if wire == 0:
        return tag + payload  # payload already varint bytes
    if wire == 2:
        return tag + _vint(len(payload)) + payload
    if wire == 5:
        return tag + payload
    raise AssertionError


def _ld(num, payload):
    return _field(num, 2, payload)


def _vf(num, value):
    return _field(num, 0, _vint(value))


def _tensor_proto(name, arr):
    body = b""
    for d in arr.shape:
        body += _vf(1, d)
    code = {np.dtype(np.float32): 1, np.dtype(np.int64): 7,
            np.dtype(np.float64): 11}[arr.dtype]
    body += _vf(2, code)
    body += _ld(8, name.encode())
    body += _ld(9, np.ascontiguousarray(arr).tobytes())
    return body


def _value_info(name, dtype_code, shape):
    dims = b""
    for d in shape:
        if isinstance(d, str):
            dims += _ld(1, _ld(2, d.encode()))
        else:
            dims += _ld(1, _vf(1, d))
    tensor = _vf(1, dtype_code) + _ld(2, dims)
    return _ld(1, name.encode()) + _ld(2, _ld(1, tensor))


def _attr_float(name, x):
    return _ld(1, name.encode()) + _field(2, 5, struct.pack("<f", x))


def _attr_int(name, i):
    return _ld(1, name.encode()) + _vf(3, i)


def _node(op, inputs, outputs, name="", attrs=b""):
    body = b""
    for t in inputs:
        body += _ld(1, t.encode())
    for t in outputs:
        body += _ld(2, t.encode())
    body += _ld(3, name.encode()) + _ld(4, op.encode())
    if attrs:
        body += attrs
    return body


def onnx_gemm_relu_bytes():
    w = np.arange(12, dtype=np.float32).reshape(4, 3) * 0.1
    b = np.array([0.5, -0.5, 0.25], dtype=np.float32)
    graph = b""
    graph += _ld(1, _node("Gemm", ["x", "w", "b"], ["h"], "fc",
                          _ld(5, _attr_float("alpha", 2.0)) + _ld(5, _attr_int("transA", 0))))
    graph += _ld(1, _node("Relu", ["h"], ["y"], "act"))
    graph += _ld(2, b"tiny")
    graph += _ld(5, _tensor_proto("w", w))
    graph += _ld(5, _tensor_proto("b", b))
    graph += _ld(11, _value_info("x", 1, ["N", 4]))
    graph += _ld(12, _value_info("y", 1, ["N", 3]))
    return _ld(7, graph), w, b


def test_onnx_import_and_execute(tmp_path):
    blob, w, b = onnx_gemm_relu_bytes()
    g = import_model(blob)
    assert "N" in g.symbols
    x = RNG.standard_normal((5, 4)).astype(np.float32)
    out = interp.run_outputs(g, {"x": x}, bindings={"N": 5}, outputs=["y"])
    want = np.maximum(2.0 * (x @ w) + b, 0.0)
    np.testing.assert_allclose(out["y"], want, rtol=1e-6)
    # File dispatch: not JSON, falls through to the protobuf reader.
    p = tmp_path / "tiny.onnx"
    p.write_bytes(blob)
    g2 = import_model(str(p))
    out2 = interp.run_outputs(g2, {"x": x}, bindings={"N": 5}, outputs=["y"])
    np.testing.assert_array_equal(out["y"], out2["y"])


def test_onnx_reduce_axes_input_folds_to_attribute():
    axes = np.array([1], dtype=np.int64)
    blob = _ld(7, _ld(1, _node("ReduceSum", ["x", "axes"], ["y"]))
               + _ld(5, _tensor_proto("axes", axes))
               + _ld(11, _value_info("x", 11, [2, 3]))
               + _ld(12, _value_info("y", 11, [2, 1])))
    g = import_model(blob)
    node = next(
        n for n in g.states[0].nodes.values() if isinstance(n, ir.LibraryNode)
    )
    assert node.attrs["axes"] == [1]
    x = RNG.standard_normal((2, 3))
    out = interp.run_outputs(g, {"x": x}, outputs=["y"])
    np.testing.assert_allclose(out["y"], x.sum(axis=1, keepdims=True), rtol=1e-12)


def test_onnx_unsupported_dtype():
    body = _vf(1, 2) + _vf(2, 6) + _ld(8, b"t") + _ld(9, np.zeros(2, np.int32).tobytes())
    blob = _ld(7, _ld(5, body) + _ld(12, _value_info("y", 1, [2])))
    with pytest.raises(ModelError, match="data type"):
        import_model(blob)


def test_onnx_not_a_model():
    with pytest.raises(ModelError):
        import_model(b"\x99\x01\x02")
