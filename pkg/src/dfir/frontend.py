"""Model import and the operator registry.

This module owns two things:

* The **operator registry**: one :class:`OpSpec` per supported operator,
  bundling its attribute schema, shape-inference rule, and a pure numpy
  reference evaluator (the numerical oracle every lowering is tested
  against).  Lowering programs and manual gradient builders are attached to
  the same entries by the modules that implement them, so the importer, the
  interpreter, the lowering pass, and autodiff all consult a single table.

* **Model import**: a native JSON model format (``dfm-0.1``) and a minimal
  reader for the ONNX protobuf container covering the same operator subset.
  Both produce a :class:`ModelGraph` which :func:`build_graph` turns into a
  dataflow graph of LibraryNodes with full-tensor memlets.

The registry is populated at import time and is immutable afterwards except
through :func:`register_op`, which refuses duplicates.
"""

from __future__ import annotations

import base64
import json
import os
import string
import struct
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional, Sequence, Union

import numpy as np

from . import dtns, ir
from .symexpr import (
    Binary,
    Const,
    ScalarExpr,
    as_expr,
    expr_equal,
    free_symbols,
    simplify,
)


class ModelError(Exception):
    """Malformed model file or graph-construction failure."""


class UnsupportedOp(ModelError):
    """Model references an operator type the registry does not know."""

    def __init__(self, op: str):
        super().__init__(f"unsupported operator type {op!r}")
        self.op = op


class DuplicateOp(Exception):
    """An operator type was registered twice."""


class ShapeError(ModelError):
    """Shape inference failed or an attribute is out of range."""


#: Sentinel default marking an attribute that must be provided.
REQUIRED = object()

Shape = tuple  # tuple[ScalarExpr, ...]
InferFn = Callable[[dict, list, list], list]
ReferenceFn = Callable[[dict, list], list]


@dataclass
class OpSpec:
    """Registry entry describing one operator type end to end."""

    name: str
    attr_schema: dict
    min_inputs: int
    max_inputs: int
    infer: InferFn
    reference: ReferenceFn
    min_outputs: int = 1
    max_outputs: int = 1
    # Attached by the lowering module: fn(g, state, node_id) -> None,
    # replacing the LibraryNode in place with a native subgraph.
    lowering: Optional[Callable] = None
    # Attached by the autodiff module: manual vector-Jacobian builder.
    backward: Optional[Callable] = None


_REGISTRY: dict[str, OpSpec] = {}


def register_op(spec: OpSpec) -> None:
    if spec.name in _REGISTRY:
        raise DuplicateOp(f"operator {spec.name!r} is already registered")
    _REGISTRY[spec.name] = spec


def get_op(name: str) -> OpSpec:
    spec = _REGISTRY.get(name)
    if spec is None:
        raise UnsupportedOp(name)
    return spec


def registered_ops() -> list[str]:
    return sorted(_REGISTRY)


def normalize_attrs(op: Union[str, OpSpec], attrs: Optional[Mapping]) -> dict:
    """Fill defaults, reject unknown names, require mandatory attributes."""
    spec = get_op(op) if isinstance(op, str) else op
    given = dict(attrs or {})
    out = {}
    for key, default in spec.attr_schema.items():
        if key in given:
            out[key] = given.pop(key)
        elif default is REQUIRED:
            raise ShapeError(f"{spec.name}: missing required attribute {key!r}")
        else:
            out[key] = default
    if given:
        raise ShapeError(
            f"{spec.name}: unknown attribute(s) {sorted(given)}; "
            f"known: {sorted(spec.attr_schema)}"
        )
    return out


def infer_shapes(
    op: str, attrs: Mapping, in_shapes: Sequence[Shape], in_dtypes: Sequence[str]
) -> list[tuple[Shape, str]]:
    """Return [(shape, dtype)] per output; raises ShapeError on mismatch."""
    spec = get_op(op)
    if not (spec.min_inputs <= len(in_shapes) <= spec.max_inputs):
        raise ShapeError(
            f"{op}: takes {spec.min_inputs}..{spec.max_inputs} inputs, "
            f"got {len(in_shapes)}"
        )
    norm = normalize_attrs(spec, attrs)
    return spec.infer(norm, [tuple(s) for s in in_shapes], list(in_dtypes))


def reference_apply(op: str, attrs: Mapping, inputs: Sequence[np.ndarray]) -> list:
    """Evaluate one operator on concrete tensors (f64 accumulation)."""
    spec = get_op(op)
    norm = normalize_attrs(spec, attrs)
    return spec.reference(norm, [np.asarray(x) for x in inputs])


# ---------------------------------------------------------------------------
# Shape helpers


def _shape(seq) -> Shape:
    return tuple(as_expr(s) for s in seq)


def _is_one(e: ScalarExpr) -> bool:
    return isinstance(e, Const) and e.value == 1


def _concrete(shape: Shape) -> Optional[tuple]:
    dims = []
    for e in shape:
        if isinstance(e, Const) and e.value == int(e.value):
            dims.append(int(e.value))
        else:
            return None
    return tuple(dims)


def _broadcast(a: Shape, b: Shape, op: str) -> Shape:
    """ONNX-style multidirectional broadcasting on symbolic shapes."""
    ra, rb = len(a), len(b)
    out = []
    for i in range(max(ra, rb)):
        da = a[ra - 1 - i] if i < ra else Const(1)
        db = b[rb - 1 - i] if i < rb else Const(1)
        if _is_one(da):
            out.append(db)
        elif _is_one(db) or expr_equal(da, db):
            out.append(da)
        else:
            raise ShapeError(f"{op}: cannot broadcast dims {da} and {db}")
    return tuple(reversed(out))


def _norm_axes(axes, rank: int, op: str) -> tuple:
    if isinstance(axes, int):
        axes = [axes]
    if axes is None or len(list(axes)) == 0:
        # Absent and empty both mean "all axes".
        return tuple(range(rank))
    out = []
    for a in axes:
        a = int(a)
        if not -rank <= a < rank:
            raise ShapeError(f"{op}: axis {a} out of range for rank {rank}")
        out.append(a % rank if rank else 0)
    if len(set(out)) != len(out):
        raise ShapeError(f"{op}: repeated axis in {list(axes)}")
    return tuple(sorted(out))


def _floordiv(a: ScalarExpr, b: ScalarExpr) -> ScalarExpr:
    return simplify(Binary("floordiv", as_expr(a), as_expr(b)))


def _out_dtype(in_dtypes: Sequence[str]) -> str:
    return in_dtypes[0]


def _cast_like(value: np.ndarray, dtype: np.dtype) -> np.ndarray:
    return np.asarray(value).astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# Elementwise operators

_UNARY_FNS: dict[str, Callable] = {
    "Neg": lambda x: -x,
    "Exp": np.exp,
    "Log": np.log,
    "Sqrt": np.sqrt,
    "Tanh": np.tanh,
    "Sigmoid": lambda x: 1.0 / (1.0 + np.exp(-x)),
    "Relu": lambda x: np.maximum(0.0, x),
    "Softplus": lambda x: np.log(1.0 + np.exp(x)),
    "Identity": lambda x: x,
}


def _register_unary(name: str, fn: Callable) -> None:
    def infer(attrs, shapes, dtypes):
        return [(shapes[0], _out_dtype(dtypes))]

    def reference(attrs, inputs, fn=fn):
        x = inputs[0]
        return [_cast_like(fn(x.astype(np.float64)), x.dtype)]

    register_op(OpSpec(name, {}, 1, 1, infer, reference))


for _name, _fn in _UNARY_FNS.items():
    if _name == "Identity":
        register_op(
            OpSpec(
                "Identity",
                {},
                1,
                1,
                lambda attrs, shapes, dtypes: [(shapes[0], dtypes[0])],
                lambda attrs, inputs: [inputs[0].copy()],
            )
        )
    else:
        _register_unary(_name, _fn)


def _register_binary(name: str, fn: Callable, scalar_attr: Optional[str]) -> None:
    """Binary elementwise op; *scalar_attr* names the folded-constant form
    (e.g. Pow with attribute ``exponent`` takes a single input)."""

    schema = {scalar_attr: None} if scalar_attr else {}

    def infer(attrs, shapes, dtypes, name=name, scalar_attr=scalar_attr):
        if scalar_attr and attrs.get(scalar_attr) is not None:
            if len(shapes) != 1:
                raise ShapeError(
                    f"{name}: attribute {scalar_attr!r} replaces the second input"
                )
            return [(shapes[0], _out_dtype(dtypes))]
        if len(shapes) != 2:
            raise ShapeError(f"{name}: takes 2 inputs (or 1 with {scalar_attr!r})")
        return [(_broadcast(shapes[0], shapes[1], name), _out_dtype(dtypes))]

    def reference(attrs, inputs, fn=fn, scalar_attr=scalar_attr):
        a = inputs[0].astype(np.float64)
        if scalar_attr and attrs.get(scalar_attr) is not None:
            b = np.float64(attrs[scalar_attr])
        else:
            b = inputs[1].astype(np.float64)
        return [_cast_like(fn(a, b), inputs[0].dtype)]

    register_op(OpSpec(name, schema, 1 if scalar_attr else 2, 2, infer, reference))


_register_binary("Add", np.add, None)
_register_binary("Sub", np.subtract, None)
_register_binary("Mul", np.multiply, None)
_register_binary("Div", np.divide, "divisor")
_register_binary("Pow", np.power, "exponent")


# ---------------------------------------------------------------------------
# Reductions


def _register_reduce(name: str, fn: Callable) -> None:
    def infer(attrs, shapes, dtypes, name=name):
        shape = shapes[0]
        axes = _norm_axes(attrs["axes"], len(shape), name)
        keep = bool(attrs["keepdims"])
        out = []
        for i, d in enumerate(shape):
            if i in axes:
                if keep:
                    out.append(Const(1))
            else:
                out.append(d)
        return [(tuple(out), _out_dtype(dtypes))]

    def reference(attrs, inputs, fn=fn, name=name):
        x = inputs[0]
        axes = _norm_axes(attrs["axes"], x.ndim, name)
        keep = bool(attrs["keepdims"])
        val = fn(x.astype(np.float64), axis=axes or None, keepdims=keep)
        return [_cast_like(val, x.dtype)]

    register_op(OpSpec(name, {"axes": None, "keepdims": 1}, 1, 1, infer, reference))


_register_reduce("ReduceSum", np.sum)
_register_reduce("ReduceMean", np.mean)
_register_reduce("ReduceMax", np.max)


# ---------------------------------------------------------------------------
# Contractions


def _matmul_infer(attrs, shapes, dtypes):
    a, b = shapes
    if len(a) == 0 or len(b) == 0:
        raise ShapeError("MatMul: inputs must have rank >= 1")
    a2 = ((Const(1),) + a) if len(a) == 1 else a
    b2 = (b + (Const(1),)) if len(b) == 1 else b
    if not expr_equal(a2[-1], b2[-2]):
        raise ShapeError(f"MatMul: contracted dims differ: {a2[-1]} vs {b2[-2]}")
    batch = _broadcast(a2[:-2], b2[:-2], "MatMul")
    out = batch + (a2[-2], b2[-1])
    if len(a) == 1:
        out = out[:-2] + (out[-1],)
    if len(b) == 1:
        out = out[:-1]
    return [(out, _out_dtype(dtypes))]


register_op(
    OpSpec(
        "MatMul",
        {},
        2,
        2,
        _matmul_infer,
        lambda attrs, inputs: [
            _cast_like(
                np.matmul(inputs[0].astype(np.float64), inputs[1].astype(np.float64)),
                inputs[0].dtype,
            )
        ],
    )
)


def _gemm_infer(attrs, shapes, dtypes):
    a, b = shapes[0], shapes[1]
    if len(a) != 2 or len(b) != 2:
        raise ShapeError("Gemm: A and B must be rank 2")
    m, ka = (a[1], a[0]) if attrs["transA"] else (a[0], a[1])
    kb, n = (b[1], b[0]) if attrs["transB"] else (b[0], b[1])
    if not expr_equal(ka, kb):
        raise ShapeError(f"Gemm: contracted dims differ: {ka} vs {kb}")
    out = (m, n)
    if len(shapes) == 3:
        _broadcast(shapes[2], out, "Gemm")  # C must broadcast to (M, N)
    return [(out, _out_dtype(dtypes))]


def _gemm_reference(attrs, inputs):
    a = inputs[0].astype(np.float64)
    b = inputs[1].astype(np.float64)
    if attrs["transA"]:
        a = a.T
    if attrs["transB"]:
        b = b.T
    y = attrs["alpha"] * (a @ b)
    if len(inputs) == 3:
        y = y + attrs["beta"] * inputs[2].astype(np.float64)
    return [_cast_like(y, inputs[0].dtype)]


register_op(
    OpSpec(
        "Gemm",
        {"alpha": 1.0, "beta": 1.0, "transA": 0, "transB": 0},
        2,
        3,
        _gemm_infer,
        _gemm_reference,
    )
)


def parse_einsum(equation: str, n_operands: int) -> tuple[list[str], str]:
    """Validate and normalize an einsum equation; returns (operand_terms,
    output_term) with implicit outputs resolved.  Ellipsis is unsupported."""
    eq = equation.replace(" ", "")
    if "." in eq:
        raise ShapeError("Einsum: ellipsis is not supported")
    if "->" in eq:
        lhs, rhs = eq.split("->", 1)
        explicit = True
    else:
        lhs, rhs = eq, ""
        explicit = False
    terms = lhs.split(",")
    if len(terms) != n_operands:
        raise ShapeError(
            f"Einsum: equation {equation!r} names {len(terms)} operands, "
            f"got {n_operands}"
        )
    for t in terms + ([rhs] if explicit else []):
        for c in t:
            if c not in string.ascii_lowercase:
                raise ShapeError(
                    f"Einsum: only lowercase index letters allowed, got {c!r}"
                )
    letters = set("".join(terms))
    if len(letters) > 26:
        raise ShapeError("Einsum: more than 26 distinct indices")
    if not explicit:
        counts: dict[str, int] = {}
        for t in terms:
            for c in t:
                counts[c] = counts.get(c, 0) + 1
        rhs = "".join(sorted(c for c, n in counts.items() if n == 1))
    else:
        seen = set()
        for c in rhs:
            if c in seen:
                raise ShapeError(f"Einsum: repeated output index {c!r}")
            seen.add(c)
            if c not in letters:
                raise ShapeError(f"Einsum: output index {c!r} not in any operand")
    return terms, rhs


def _einsum_infer(attrs, shapes, dtypes):
    terms, out_term = parse_einsum(attrs["equation"], len(shapes))
    extent: dict[str, ScalarExpr] = {}
    for term, shape in zip(terms, shapes):
        if len(term) != len(shape):
            raise ShapeError(
                f"Einsum: term {term!r} has {len(term)} indices for rank "
                f"{len(shape)} operand"
            )
        for c, d in zip(term, shape):
            if c in extent:
                if not expr_equal(extent[c], d):
                    raise ShapeError(
                        f"Einsum: index {c!r} bound to both {extent[c]} and {d}"
                    )
            else:
                extent[c] = d
    return [(tuple(extent[c] for c in out_term), _out_dtype(dtypes))]


def _einsum_reference(attrs, inputs):
    terms, out_term = parse_einsum(attrs["equation"], len(inputs))
    eq = ",".join(terms) + "->" + out_term
    y = np.einsum(eq, *[x.astype(np.float64) for x in inputs], optimize=True)
    return [_cast_like(y, inputs[0].dtype)]


register_op(
    OpSpec("Einsum", {"equation": REQUIRED}, 1, 8, _einsum_infer, _einsum_reference)
)


# ---------------------------------------------------------------------------
# Normalizations


def _softmax_infer(attrs, shapes, dtypes):
    _norm_axes(attrs["axis"], len(shapes[0]), "Softmax")
    return [(shapes[0], _out_dtype(dtypes))]


def _softmax_reference(attrs, inputs):
    x = inputs[0].astype(np.float64)
    (axis,) = _norm_axes(attrs["axis"], x.ndim, "Softmax")
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return [_cast_like(e / np.sum(e, axis=axis, keepdims=True), inputs[0].dtype)]


register_op(OpSpec("Softmax", {"axis": -1}, 1, 1, _softmax_infer, _softmax_reference))


def _layernorm_infer(attrs, shapes, dtypes):
    x = shapes[0]
    axis = _norm_axes(attrs["axis"], len(x), "LayerNormalization")[0]
    norm_shape = x[axis:]
    for extra in shapes[1:]:
        if len(extra) != len(norm_shape) or not all(
            expr_equal(a, b) for a, b in zip(extra, norm_shape)
        ):
            raise ShapeError(
                "LayerNormalization: scale/bias must match the normalized "
                f"shape {tuple(str(d) for d in norm_shape)}"
            )
    return [(x, _out_dtype(dtypes))]


def _layernorm_reference(attrs, inputs):
    x = inputs[0].astype(np.float64)
    axis = _norm_axes(attrs["axis"], x.ndim, "LayerNormalization")[0]
    axes = tuple(range(axis, x.ndim))
    mu = np.mean(x, axis=axes, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=axes, keepdims=True)
    y = (x - mu) / np.sqrt(var + attrs["epsilon"])
    y = y * inputs[1].astype(np.float64)
    if len(inputs) == 3:
        y = y + inputs[2].astype(np.float64)
    return [_cast_like(y, inputs[0].dtype)]


register_op(
    OpSpec(
        "LayerNormalization",
        {"axis": -1, "epsilon": 1e-5},
        2,
        3,
        _layernorm_infer,
        _layernorm_reference,
    )
)


def _batchnorm_infer(attrs, shapes, dtypes):
    x = shapes[0]
    if len(x) < 2:
        raise ShapeError("BatchNormalization: input must have a channel dim")
    c = x[1]
    for i, s in enumerate(shapes[1:], start=1):
        if len(s) != 1 or not expr_equal(s[0], c):
            raise ShapeError(
                f"BatchNormalization: input {i} must have shape (C,) = ({c},)"
            )
    dt = _out_dtype(dtypes)
    return [(x, dt), ((c,), dt), ((c,), dt)]


def _batchnorm_reference(attrs, inputs):
    # Training-mode semantics: normalize with batch statistics and emit
    # updated running statistics as the extra outputs.
    x = inputs[0].astype(np.float64)
    scale, bias, run_mean, run_var = (v.astype(np.float64) for v in inputs[1:5])
    axes = tuple(a for a in range(x.ndim) if a != 1)
    mu = np.mean(x, axis=axes)
    var = np.mean((x - mu.reshape(_bn_shape(x.ndim))) ** 2, axis=axes)
    shape = _bn_shape(x.ndim)
    y = (x - mu.reshape(shape)) / np.sqrt(var.reshape(shape) + attrs["epsilon"])
    y = y * scale.reshape(shape) + bias.reshape(shape)
    m = attrs["momentum"]
    new_mean = run_mean * m + mu * (1.0 - m)
    new_var = run_var * m + var * (1.0 - m)
    dt = inputs[0].dtype
    return [_cast_like(y, dt), _cast_like(new_mean, dt), _cast_like(new_var, dt)]


def _bn_shape(rank: int) -> tuple:
    return (1, -1) + (1,) * (rank - 2)


register_op(
    OpSpec(
        "BatchNormalization",
        {"epsilon": 1e-5, "momentum": 0.9},
        5,
        5,
        _batchnorm_infer,
        _batchnorm_reference,
        min_outputs=1,
        max_outputs=3,
    )
)


# ---------------------------------------------------------------------------
# Convolution and pooling


def _conv_check_attrs(attrs):
    strides = [int(s) for s in (attrs["strides"] or [1, 1])]
    pads = [int(p) for p in (attrs["pads"] or [0, 0, 0, 0])]
    if len(strides) != 2 or any(s < 1 for s in strides):
        raise ShapeError(f"Conv: strides must be two ints >= 1, got {strides}")
    if len(pads) != 4 or any(p < 0 for p in pads):
        raise ShapeError(f"Conv: pads must be four ints >= 0, got {pads}")
    return strides, pads


def _conv_infer(attrs, shapes, dtypes):
    x, w = shapes[0], shapes[1]
    if len(x) != 4 or len(w) != 4:
        raise ShapeError("Conv: X and W must be rank 4 (N, C, H, W)")
    strides, pads = _conv_check_attrs(attrs)
    group = int(attrs["group"])
    n, c, h, w_in = x
    m, cg, kh, kw = w
    if attrs["kernel_shape"] is not None:
        want = [int(k) for k in attrs["kernel_shape"]]
        got = _concrete((kh, kw))
        if got is not None and list(got) != want:
            raise ShapeError(f"Conv: kernel_shape {want} != weight dims {list(got)}")
    if group == 1:
        if not expr_equal(cg, c):
            raise ShapeError(f"Conv: weight channel dim {cg} != input channels {c}")
    else:
        # Depthwise: one group per channel, one output channel per group.
        if not (expr_equal(as_expr(group), c) and expr_equal(m, c) and _is_one(cg)):
            raise ShapeError(
                "Conv: only group=1 or depthwise (group = channels, "
                "weight (C,1,kh,kw)) is supported"
            )
    if len(shapes) == 3 and (len(shapes[2]) != 1 or not expr_equal(shapes[2][0], m)):
        raise ShapeError("Conv: bias must have shape (M,)")
    oh = _conv_dim(h, kh, pads[0] + pads[2], strides[0])
    ow = _conv_dim(w_in, kw, pads[1] + pads[3], strides[1])
    return [((n, m, oh, ow), _out_dtype(dtypes))]


def _conv_dim(d, k, pad_total: int, stride: int) -> ScalarExpr:
    span = simplify(as_expr(d) + Const(pad_total) - as_expr(k))
    if stride == 1:
        return simplify(span + Const(1))
    return simplify(_floordiv(span, Const(stride)) + Const(1))


def _conv_reference(attrs, inputs):
    x = inputs[0].astype(np.float64)
    w = inputs[1].astype(np.float64)
    strides, pads = _conv_check_attrs(attrs)
    group = int(attrs["group"])
    n, c, h, w_in = x.shape
    m, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pads[0], pads[2]), (pads[1], pads[3])))
    oh = (h + pads[0] + pads[2] - kh) // strides[0] + 1
    ow = (w_in + pads[1] + pads[3] - kw) // strides[1] + 1
    out = np.zeros((n, m, oh, ow))
    for i in range(kh):
        for j in range(kw):
            win = xp[:, :, i : i + oh * strides[0] : strides[0],
                     j : j + ow * strides[1] : strides[1]]
            if group == 1:
                out += np.einsum("nchw,mc->nmhw", win, w[:, :, i, j])
            else:
                out += win * w[:, 0, i, j].reshape(1, -1, 1, 1)
    if len(inputs) == 3:
        out += inputs[2].astype(np.float64).reshape(1, -1, 1, 1)
    return [_cast_like(out, inputs[0].dtype)]


register_op(
    OpSpec(
        "Conv",
        {"strides": None, "pads": None, "group": 1, "kernel_shape": None},
        2,
        3,
        _conv_infer,
        _conv_reference,
    )
)


def _gap_infer(attrs, shapes, dtypes):
    x = shapes[0]
    if len(x) < 3:
        raise ShapeError("GlobalAveragePool: input must be (N, C, spatial...)")
    return [(x[:2] + (Const(1),) * (len(x) - 2), _out_dtype(dtypes))]


register_op(
    OpSpec(
        "GlobalAveragePool",
        {},
        1,
        1,
        _gap_infer,
        lambda attrs, inputs: [
            _cast_like(
                np.mean(
                    inputs[0].astype(np.float64),
                    axis=tuple(range(2, inputs[0].ndim)),
                    keepdims=True,
                ),
                inputs[0].dtype,
            )
        ],
    )
)


# ---------------------------------------------------------------------------
# Layout operators


def _reshape_infer(attrs, shapes, dtypes):
    x = shapes[0]
    target = attrs["shape"]
    if target is None:
        raise ShapeError("Reshape: needs a constant target shape")
    target = [int(t) for t in target]
    concrete = _concrete(x)
    out: list[ScalarExpr] = []
    for i, t in enumerate(target):
        if t == 0:
            if i >= len(x):
                raise ShapeError(f"Reshape: dim {i} copies a nonexistent input dim")
            out.append(x[i])
        elif t == -1:
            out.append(None)  # type: ignore[arg-type] # placeholder, filled below
        elif t < -1:
            raise ShapeError(f"Reshape: invalid target dim {t}")
        else:
            out.append(Const(t))
    if out.count(None) > 1:
        raise ShapeError("Reshape: at most one -1 dim")
    if None in out:
        if concrete is None:
            raise ShapeError("Reshape: -1 requires concrete input dims")
        total = int(np.prod(concrete, dtype=np.int64)) if concrete else 1
        known = 1
        for e in out:
            if e is not None:
                known *= int(e.value)  # type: ignore[union-attr]
        if known == 0 or total % known:
            raise ShapeError(
                f"Reshape: cannot infer -1 dim ({total} elements into {known})"
            )
        out[out.index(None)] = Const(total // known)
    got = _concrete(tuple(out))
    if concrete is not None and got is not None:
        if int(np.prod(concrete, dtype=np.int64)) != int(np.prod(got, dtype=np.int64)):
            raise ShapeError(
                f"Reshape: element count changes from {concrete} to {got}"
            )
    return [(tuple(out), _out_dtype(dtypes))]


def _reshape_reference(attrs, inputs):
    x = inputs[0]
    target = [int(t) for t in attrs["shape"]]
    resolved = [x.shape[i] if t == 0 else t for i, t in enumerate(target)]
    return [x.reshape(resolved).copy()]


register_op(
    OpSpec("Reshape", {"shape": None}, 1, 2, _reshape_infer, _reshape_reference)
)


def _transpose_infer(attrs, shapes, dtypes):
    x = shapes[0]
    perm = attrs["perm"]
    perm = list(range(len(x)))[::-1] if perm is None else [int(p) for p in perm]
    if sorted(perm) != list(range(len(x))):
        raise ShapeError(f"Transpose: perm {perm} is not a permutation of rank {len(x)}")
    return [(tuple(x[p] for p in perm), _out_dtype(dtypes))]


def _transpose_reference(attrs, inputs):
    x = inputs[0]
    perm = attrs["perm"]
    perm = list(range(x.ndim))[::-1] if perm is None else [int(p) for p in perm]
    return [np.transpose(x, perm).copy()]


register_op(
    OpSpec("Transpose", {"perm": None}, 1, 1, _transpose_infer, _transpose_reference)
)


def _flatten_axis(axis: int, rank: int) -> int:
    axis = int(axis)
    if not -rank <= axis <= rank:
        raise ShapeError(f"Flatten: axis {axis} out of range for rank {rank}")
    return axis + rank if axis < 0 else axis


def _flatten_infer(attrs, shapes, dtypes):
    x = shapes[0]
    axis = _flatten_axis(attrs["axis"], len(x))
    head = Const(1)
    for d in x[:axis]:
        head = simplify(head * d)
    tail = Const(1)
    for d in x[axis:]:
        tail = simplify(tail * d)
    return [((head, tail), _out_dtype(dtypes))]


register_op(
    OpSpec(
        "Flatten",
        {"axis": 1},
        1,
        1,
        _flatten_infer,
        lambda attrs, inputs: [
            inputs[0]
            .reshape(
                int(
                    np.prod(
                        inputs[0].shape[: _flatten_axis(attrs["axis"], inputs[0].ndim)],
                        dtype=np.int64,
                    )
                ),
                -1,
            )
            .copy()
        ],
    )
)


def _constant_value(attrs) -> np.ndarray:
    v = attrs["value"]
    if isinstance(v, np.ndarray):
        return v
    if not isinstance(v, dict) or not {"dtype", "dims", "data"} <= set(v):
        raise ShapeError(
            "Constant: value must be {dtype, dims, data} or a tensor"
        )
    if v["dtype"] not in ir.NUMPY_DTYPES:
        raise ShapeError(f"Constant: unknown dtype {v['dtype']!r}")
    arr = np.asarray(v["data"], dtype=ir.NUMPY_DTYPES[v["dtype"]])
    return arr.reshape([int(d) for d in v["dims"]])


def _constant_infer(attrs, shapes, dtypes):
    arr = _constant_value(attrs)
    name = {np.dtype(v): k for k, v in ir.NUMPY_DTYPES.items()}[arr.dtype]
    return [(_shape(arr.shape), name)]


register_op(
    OpSpec(
        "Constant",
        {"value": REQUIRED},
        0,
        0,
        _constant_infer,
        lambda attrs, inputs: [_constant_value(attrs).copy()],
    )
)


# ---------------------------------------------------------------------------
# Model graphs


@dataclass
class ModelNode:
    op: str
    name: str
    attrs: dict
    inputs: list
    outputs: list


@dataclass
class ModelGraph:
    name: str
    inputs: list  # (name, shape list[int|str], dtype)
    outputs: list  # names
    initializers: dict  # name -> np.ndarray
    nodes: list = field(default_factory=list)


def parse_model_json(source: Union[str, dict], base_dir: Optional[str] = None) -> ModelGraph:
    """Parse the native JSON model format (``dfm-0.1``)."""
    if isinstance(source, str):
        base_dir = base_dir or os.path.dirname(os.path.abspath(source))
        try:
            with open(source, "r") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelError(f"malformed model JSON: {exc}") from exc
    else:
        doc = source
    if not isinstance(doc, dict) or doc.get("version") != "dfm-0.1":
        raise ModelError(
            f"unsupported model version {doc.get('version') if isinstance(doc, dict) else None!r}; expected 'dfm-0.1'"
        )
    inputs = []
    for entry in doc.get("inputs", []):
        _require_keys(entry, {"name", "shape", "dtype"}, "inputs[]")
        if entry["dtype"] not in ir.DTYPES:
            raise ModelError(f"input {entry['name']}: unknown dtype {entry['dtype']!r}")
        for d in entry["shape"]:
            if not isinstance(d, (int, str)) or (isinstance(d, int) and d < 0):
                raise ModelError(
                    f"input {entry['name']}: dims must be non-negative ints or "
                    f"symbol names, got {d!r}"
                )
        inputs.append((entry["name"], list(entry["shape"]), entry["dtype"]))
    outputs = []
    for entry in doc.get("outputs", []):
        outputs.append(entry["name"] if isinstance(entry, dict) else entry)
        if not isinstance(outputs[-1], str):
            raise ModelError(f"outputs[] entries must be names, got {entry!r}")
    initializers = {}
    for entry in doc.get("initializers", []):
        if "name" not in entry:
            raise ModelError("initializers[] entry missing 'name'")
        name = entry["name"]
        if "file" in entry:
            path = entry["file"]
            if not os.path.isabs(path):
                path = os.path.join(base_dir or ".", path)
            try:
                arr = dtns.read_tensor(path)
            except (OSError, dtns.TensorFormatError) as exc:
                raise ModelError(f"initializer {name}: {exc}") from exc
        elif "base64" in entry:
            try:
                arr = dtns.decode(base64.b64decode(entry["base64"]))
            except (ValueError, dtns.TensorFormatError) as exc:
                raise ModelError(f"initializer {name}: {exc}") from exc
        elif {"dtype", "dims", "data"} <= set(entry):
            if entry["dtype"] not in ir.NUMPY_DTYPES:
                raise ModelError(f"initializer {name}: unknown dtype {entry['dtype']!r}")
            arr = np.asarray(entry["data"], dtype=ir.NUMPY_DTYPES[entry["dtype"]])
            arr = arr.reshape([int(d) for d in entry["dims"]])
        else:
            raise ModelError(
                f"initializer {name}: needs 'file', 'base64', or dtype/dims/data"
            )
        initializers[name] = arr
    nodes = []
    for i, entry in enumerate(doc.get("nodes", [])):
        _require_keys(entry, {"op", "inputs", "outputs"}, f"nodes[{i}]")
        nodes.append(
            ModelNode(
                op=entry["op"],
                name=entry.get("name") or f"{entry['op']}_{i}",
                attrs=dict(entry.get("attrs", {})),
                inputs=list(entry["inputs"]),
                outputs=list(entry["outputs"]),
            )
        )
    return ModelGraph(
        name=doc.get("name", "model"),
        inputs=inputs,
        outputs=outputs,
        initializers=initializers,
        nodes=nodes,
    )


def _require_keys(entry, keys, where):
    if not isinstance(entry, dict) or not keys <= set(entry):
        raise ModelError(f"{where}: missing required keys {sorted(keys)}")


# ---------------------------------------------------------------------------
# Graph construction


def build_graph(model: ModelGraph, name: Optional[str] = None) -> ir.Graph:
    """Turn a ModelGraph into a validated dataflow graph of LibraryNodes."""
    g = ir.Graph(name or model.name)
    state = g.add_state("forward")

    defined: dict[str, str] = {}  # tensor name -> dtype
    shapes: dict[str, Shape] = {}

    def declare(tensor: str, shape: Shape, dtype: str, storage: str, **kw):
        if tensor in defined:
            raise ModelError(f"tensor {tensor!r} defined more than once")
        for d in shape:
            for sym in free_symbols(d):
                if sym not in g.symbols:
                    g.add_symbol(sym)
        g.add_container(tensor, shape, dtype, storage, **kw)
        defined[tensor] = dtype
        shapes[tensor] = tuple(shape)

    output_names = list(dict.fromkeys(model.outputs))
    runtime_inputs = []
    for tensor, dims, dtype in model.inputs:
        if tensor in model.initializers:
            continue  # constants win over a duplicate runtime declaration
        declare(tensor, _shape(dims), dtype, "Global")
        runtime_inputs.append(tensor)
    dtype_names = {np.dtype(v): k for k, v in ir.NUMPY_DTYPES.items()}
    for tensor, arr in model.initializers.items():
        dtype = dtype_names.get(arr.dtype)
        if dtype is None:
            raise ModelError(f"initializer {tensor}: unsupported dtype {arr.dtype}")
        declare(tensor, _shape(arr.shape), dtype, "Global", constant=True)
        g.constants[tensor] = arr

    access: dict[str, int] = {}

    def access_node(tensor: str) -> int:
        if tensor not in access:
            access[tensor] = state.add_node(ir.AccessNode(tensor))
        return access[tensor]

    for node in model.nodes:
        spec = get_op(node.op)  # raises UnsupportedOp
        attrs = dict(node.attrs)
        inputs = list(node.inputs)

        # Tensor-valued attributes must be plain JSON in the graph.
        if node.op == "Constant" and isinstance(attrs.get("value"), np.ndarray):
            arr = attrs["value"]
            dtype = {np.dtype(v): k for k, v in ir.NUMPY_DTYPES.items()}.get(arr.dtype)
            if dtype is None:
                raise ModelError(f"node {node.name}: unsupported constant dtype {arr.dtype}")
            attrs["value"] = {
                "dtype": dtype,
                "dims": [int(d) for d in arr.shape],
                "data": arr.reshape(-1).tolist(),
            }

        # Fold rank-0 constant exponents/divisors into the attribute form.
        if node.op in ("Pow", "Div") and len(inputs) == 2:
            key = "exponent" if node.op == "Pow" else "divisor"
            arr = model.initializers.get(inputs[1])
            if arr is not None and arr.ndim == 0 and key not in attrs:
                attrs[key] = float(arr)
                inputs = inputs[:1]
        # Constant-shape operands that ONNX passes as inputs become attributes.
        if node.op == "Reshape" and len(inputs) == 2:
            arr = model.initializers.get(inputs[1])
            if arr is None:
                raise ModelError(
                    f"node {node.name}: Reshape target shape must be a constant"
                )
            attrs.setdefault("shape", [int(v) for v in arr.reshape(-1)])
            inputs = inputs[:1]
        if node.op == "ReduceSum" and len(inputs) == 2:
            arr = model.initializers.get(inputs[1])
            if arr is None:
                raise ModelError(f"node {node.name}: ReduceSum axes must be constant")
            attrs.setdefault("axes", [int(v) for v in arr.reshape(-1)])
            inputs = inputs[:1]

        for tensor in inputs:
            if tensor not in defined:
                raise ModelError(
                    f"node {node.name}: input {tensor!r} is not a graph input, "
                    "initializer, or earlier node output"
                )
        if not (spec.min_outputs <= len(node.outputs) <= spec.max_outputs):
            raise ModelError(
                f"node {node.name}: {node.op} produces "
                f"{spec.min_outputs}..{spec.max_outputs} outputs, "
                f"model lists {len(node.outputs)}"
            )
        try:
            attrs = normalize_attrs(spec, attrs)
            inferred = spec.infer(
                attrs, [shapes[t] for t in inputs], [defined[t] for t in inputs]
            )
        except ShapeError as exc:
            raise ShapeError(f"node {node.name}: {exc}") from exc

        in_conns = [f"in_{i}" for i in range(len(inputs))]
        out_conns = [f"out_{i}" for i in range(len(node.outputs))]
        nid = state.add_node(
            ir.LibraryNode(node.op, node.name, attrs, in_conns, out_conns)
        )
        for conn, tensor in zip(in_conns, inputs):
            state.add_edge(
                access_node(tensor),
                None,
                nid,
                conn,
                ir.Memlet(tensor, ir.Subset.full(shapes[tensor])),
            )
        for conn, tensor, (shape, dtype) in zip(out_conns, node.outputs, inferred):
            storage = "Global" if tensor in output_names else "Transient"
            declare(tensor, shape, dtype, storage)
            state.add_edge(
                nid,
                conn,
                access_node(tensor),
                None,
                ir.Memlet(tensor, ir.Subset.full(shape)),
            )

    for tensor in output_names:
        if tensor not in defined:
            raise ModelError(f"declared output {tensor!r} is never produced")

    diags = ir.validate(g)
    if diags:
        raise ModelError(
            "imported graph failed validation: "
            + "; ".join(f"{d.rule}: {d.message}" for d in diags)
        )
    return g


# ---------------------------------------------------------------------------
# ONNX protobuf reader (wire format, no generated code)

_ONNX_DTYPES = {1: "f32", 7: "i64", 9: "bool", 11: "f64"}


class _Proto:
    """Iterate (field_number, wire_type, value) over protobuf bytes."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def varint(self) -> int:
        shift = 0
        result = 0
        while True:
            if self.pos >= len(self.data):
                raise ModelError("truncated protobuf varint")
            b = self.data[self.pos]
            self.pos += 1
            result |= (b & 0x7F) << shift
            if not b & 0x80:
                return result
            shift += 7
            if shift > 70:
                raise ModelError("malformed protobuf varint")

    def __iter__(self):
        while self.pos < len(self.data):
            tag = self.varint()
            field, wire = tag >> 3, tag & 7
            if wire == 0:
                yield field, wire, self.varint()
            elif wire == 1:
                if self.pos + 8 > len(self.data):
                    raise ModelError("truncated protobuf fixed64")
                val = struct.unpack_from("<Q", self.data, self.pos)[0]
                self.pos += 8
                yield field, wire, val
            elif wire == 2:
                n = self.varint()
                if self.pos + n > len(self.data):
                    raise ModelError("truncated protobuf field")
                yield field, wire, self.data[self.pos : self.pos + n]
                self.pos += n
            elif wire == 5:
                if self.pos + 4 > len(self.data):
                    raise ModelError("truncated protobuf fixed32")
                val = struct.unpack_from("<I", self.data, self.pos)[0]
                self.pos += 4
                yield field, wire, val
            else:
                raise ModelError(f"unsupported protobuf wire type {wire}")


def _signed(v: int) -> int:
    return v - (1 << 64) if v >= (1 << 63) else v


def _packed_varints(blob: bytes) -> list:
    p = _Proto(blob)
    out = []
    while p.pos < len(blob):
        out.append(_signed(p.varint()))
    return out


def _onnx_tensor(blob: bytes) -> tuple[str, np.ndarray]:
    dims: list = []
    data_type = None
    raw = None
    floats: list = []
    doubles: list = []
    int64s: list = []
    int32s: list = []
    name = ""
    for field_no, wire, val in _Proto(blob):
        if field_no == 1:
            dims.extend(_packed_varints(val) if wire == 2 else [_signed(val)])
        elif field_no == 2:
            data_type = val
        elif field_no == 4:
            floats.extend(np.frombuffer(val, "<f4")) if wire == 2 else floats.append(
                struct.unpack("<f", struct.pack("<I", val))[0]
            )
        elif field_no == 5:
            int32s.extend(_packed_varints(val) if wire == 2 else [_signed(val)])
        elif field_no == 7:
            int64s.extend(_packed_varints(val) if wire == 2 else [_signed(val)])
        elif field_no == 8:
            name = val.decode("utf-8")
        elif field_no == 9:
            raw = val
        elif field_no == 10:
            doubles.extend(np.frombuffer(val, "<f8")) if wire == 2 else doubles.append(
                struct.unpack("<d", struct.pack("<Q", val))[0]
            )
    if data_type not in _ONNX_DTYPES:
        raise ModelError(f"tensor {name!r}: unsupported ONNX data type {data_type}")
    dtype = ir.NUMPY_DTYPES[_ONNX_DTYPES[data_type]]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    if raw is not None:
        arr = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<"), count=count)
        arr = arr.astype(dtype, copy=True)
    elif data_type == 1:
        arr = np.asarray(floats, dtype=dtype)
    elif data_type == 11:
        arr = np.asarray(doubles, dtype=dtype)
    elif data_type == 7:
        arr = np.asarray(int64s, dtype=dtype)
    else:
        arr = np.asarray(int32s, dtype=dtype)
    if arr.size != count:
        raise ModelError(f"tensor {name!r}: payload has {arr.size} of {count} values")
    return name, arr.reshape(dims)


def _onnx_attr(blob: bytes) -> tuple[str, Any]:
    name = ""
    value: Any = None
    floats: list = []
    ints: list = []
    for field_no, wire, val in _Proto(blob):
        if field_no == 1:
            name = val.decode("utf-8")
        elif field_no == 2:
            value = struct.unpack("<f", struct.pack("<I", val))[0]
        elif field_no == 3:
            value = _signed(val)
        elif field_no == 4:
            value = val.decode("utf-8")
        elif field_no == 5:
            value = _onnx_tensor(val)[1]
        elif field_no == 7:
            if wire == 2:
                floats.extend(float(x) for x in np.frombuffer(val, "<f4"))
            else:
                floats.append(struct.unpack("<f", struct.pack("<I", val))[0])
        elif field_no == 8:
            ints.extend(_packed_varints(val) if wire == 2 else [_signed(val)])
    if floats:
        value = floats
    elif ints and value is None:
        value = ints
    return name, value


def _onnx_value_info(blob: bytes) -> tuple[str, Optional[list], Optional[str]]:
    name = ""
    shape = None
    dtype = None
    for field_no, _, val in _Proto(blob):
        if field_no == 1:
            name = val.decode("utf-8")
        elif field_no == 2:
            for f2, _, v2 in _Proto(val):  # TypeProto
                if f2 != 1:
                    continue
                for f3, _, v3 in _Proto(v2):  # TypeProto.Tensor
                    if f3 == 1:
                        dtype = _ONNX_DTYPES.get(v3)
                        if dtype is None:
                            raise ModelError(
                                f"value {name!r}: unsupported ONNX element type {v3}"
                            )
                    elif f3 == 2:
                        shape = []
                        for f4, _, v4 in _Proto(v3):  # TensorShapeProto
                            if f4 != 1:
                                continue
                            dim: Any = None
                            for f5, _, v5 in _Proto(v4):
                                if f5 == 1:
                                    dim = _signed(v5)
                                elif f5 == 2:
                                    dim = v5.decode("utf-8")
                            shape.append(dim if dim is not None else 1)
    return name, shape, dtype


# Attribute names kept as-is; these ops pull trailing constant inputs into
# attributes inside build_graph, matching the native format's conventions.
_ONNX_ATTR_DROP = {
    "Conv": {"dilations", "auto_pad"},
    "Softmax": set(),
}


def parse_model_onnx(data: bytes) -> ModelGraph:
    """Decode an ONNX protobuf model covering the supported operator subset."""
    graph_blob = None
    for field_no, wire, val in _Proto(data):
        if field_no == 7 and wire == 2:
            graph_blob = val
    if graph_blob is None:
        raise ModelError("not an ONNX model: no graph found")
    nodes = []
    initializers: dict[str, np.ndarray] = {}
    inputs = []
    outputs = []
    name = "model"
    for field_no, wire, val in _Proto(graph_blob):
        if field_no == 1:
            n_inputs: list = []
            n_outputs: list = []
            n_name = ""
            op_type = ""
            attrs: dict = {}
            for f2, _, v2 in _Proto(val):
                if f2 == 1:
                    n_inputs.append(v2.decode("utf-8"))
                elif f2 == 2:
                    n_outputs.append(v2.decode("utf-8"))
                elif f2 == 3:
                    n_name = v2.decode("utf-8")
                elif f2 == 4:
                    op_type = v2.decode("utf-8")
                elif f2 == 5:
                    k, v = _onnx_attr(v2)
                    attrs[k] = v
            for drop in _ONNX_ATTR_DROP.get(op_type, ()):
                v = attrs.pop(drop, None)
                if drop == "dilations" and v and any(int(d) != 1 for d in v):
                    raise ModelError(f"node {n_name}: Conv dilations are unsupported")
                if drop == "auto_pad" and v not in (None, "NOTSET"):
                    raise ModelError(f"node {n_name}: Conv auto_pad is unsupported")
            n_inputs = [t for t in n_inputs if t]  # "" marks omitted optionals
            nodes.append(
                ModelNode(op_type, n_name or f"{op_type}_{len(nodes)}", attrs,
                          n_inputs, n_outputs)
            )
        elif field_no == 2:
            name = val.decode("utf-8")
        elif field_no == 5:
            t_name, arr = _onnx_tensor(val)
            initializers[t_name] = arr
        elif field_no == 11:
            v_name, shape, dtype = _onnx_value_info(val)
            inputs.append((v_name, shape, dtype))
        elif field_no == 12:
            v_name, _, _ = _onnx_value_info(val)
            outputs.append(v_name)
    model_inputs = []
    for v_name, shape, dtype in inputs:
        if v_name in initializers:
            continue
        if shape is None or dtype is None:
            raise ModelError(f"graph input {v_name!r} lacks shape or element type")
        model_inputs.append((v_name, shape, dtype))
    return ModelGraph(name, model_inputs, outputs, initializers, nodes)


# ---------------------------------------------------------------------------
# Entry point


def import_model(source: Union[str, bytes, dict]) -> ir.Graph:
    """Import a model file (native JSON or ONNX protobuf) into a Graph."""
    if isinstance(source, dict):
        return build_graph(parse_model_json(source))
    if isinstance(source, (bytes, bytearray)):
        return build_graph(parse_model_onnx(bytes(source)))
    with open(source, "rb") as fh:
        head = fh.read(1)
    if head in (b"{", b""):
        return build_graph(parse_model_json(source))
    with open(source, "rb") as fh:
        return build_graph(parse_model_onnx(fh.read()))
