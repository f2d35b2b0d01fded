"""Progressive lowering of operator nodes into native map/tasklet subgraphs.

Each operator's lowering program replaces a LibraryNode in place with an
equivalent dataflow subgraph, preserving its boundary access nodes.  Lowering
is *progressive*: composite operators first step down to simpler library
nodes (MatMul and Gemm become Einsum; the reductions become a generic
``Reduce`` node — the seam the reduce-expansion transformation operates on)
and reach native maps/tasklets on the next round.  :func:`lower_all` runs the
rounds to a fixpoint; a rank function over operator levels guarantees
termination and catches registry mistakes.

Accumulation note: write-conflict-resolution (WCR) edges emitted here declare
``sum``/``max`` with an explicit identity; the executor accumulates f32
targets in f64 scratch precision, so no materialized scratch container is
needed and scope counts stay stable.
"""

from __future__ import annotations

import string
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import frontend, ir
from .frontend import OpSpec, ShapeError, parse_einsum
from .symexpr import (
    Const,
    ScalarExpr,
    as_expr,
    evaluate,
    expr_equal,
    parse,
    render,
    simplify,
)


class LoweringError(ir.IRError):
    """Lowering failed: missing program, bad implementation name, or the
    produced subgraph did not validate."""


# ---------------------------------------------------------------------------
# Lowering program registry

# op -> (default implementation name, {implementation name: program})
_PROGRAMS: dict[str, tuple[str, dict[str, Callable]]] = {}

# Operator level: expansions must strictly decrease it (termination /
# registry-cycle detection). Native nodes count as level 0.
_BASE_RANK = {"Einsum": 1, "Reduce": 1}


def op_rank(op: str) -> int:
    return _BASE_RANK.get(op, 2)


def register_lowering(op: str, program: Callable, name: str = "native") -> None:
    default, table = _PROGRAMS.get(op, (name, {}))
    table[name] = program
    _PROGRAMS[op] = (default, table)
    try:
        frontend.get_op(op).lowering = table
    except frontend.UnsupportedOp:
        pass


def has_lowering(op: str) -> bool:
    return op in _PROGRAMS


# ---------------------------------------------------------------------------
# Subgraph builders


def _strip_node(state: ir.State, nid: int) -> None:
    for e in list(state.in_edges(nid)) + list(state.out_edges(nid)):
        state.remove_edge(e)
    state.remove_node(nid)


def _io(state: ir.State, nid: int, node: ir.LibraryNode):
    """Positionally ordered (conn, access node id, container name) lists."""
    ins = [None] * len(node.in_conns)
    outs = [None] * len(node.out_conns)
    for e in state.in_edges(nid):
        src = state.nodes[e.src]
        if not isinstance(src, ir.AccessNode):
            raise LoweringError(f"{node.name}: library inputs must be access nodes")
        ins[node.in_conns.index(e.dst_conn)] = (e.dst_conn, e.src, src.data)
    for e in state.out_edges(nid):
        dst = state.nodes[e.dst]
        if not isinstance(dst, ir.AccessNode):
            raise LoweringError(f"{node.name}: library outputs must be access nodes")
        outs[node.out_conns.index(e.src_conn)] = (e.src_conn, e.dst, dst.data)
    if any(v is None for v in ins) or any(v is None for v in outs):
        raise LoweringError(f"{node.name}: unwired library connector")
    return ins, outs


def _label(state: ir.State, base: str) -> str:
    return f"{base}_{len(state.nodes)}"


def build_map(
    g: ir.Graph,
    state: ir.State,
    label: str,
    levels: Sequence[tuple],
    inputs: Sequence[tuple],
    outputs: Sequence[tuple],
    body: dict,
):
    """Build a (possibly nested) parallel map around one tasklet.

    levels:  [(params, ranges)] outermost first; empty -> bare tasklet.
    inputs:  [(tasklet conn, access node id, container, element index exprs)]
    outputs: [(conn, access id, container, index exprs, wcr, wcr_identity)]
    body:    {output conn: expression text}
    Hull memlets on non-innermost edges cover the full container.
    """
    t = state.add_node(
        ir.Tasklet(
            label,
            tuple(c for c, *_ in inputs),
            tuple(c for c, *_ in outputs),
            {conn: simplify(parse(text)) for conn, text in body.items()},
        )
    )
    entries: list[int] = []
    exits: list[int] = []
    for depth, (params, ranges) in enumerate(levels):
        en, ex = state.add_map(
            label if depth == 0 else f"{label}_in{depth}", params, ranges
        )
        entries.append(en)
        exits.append(ex)

    def hull(data: str) -> ir.Memlet:
        return ir.Memlet(data, ir.Subset.full(g.container(data).shape))

    for conn, access, data, idx in inputs:
        if not entries:
            state.add_edge(access, None, t, conn, ir.Memlet(data, ir.Subset.index(idx)))
            continue
        state.add_edge(access, None, entries[0], f"in_{conn}", hull(data))
        for lv in range(len(entries) - 1):
            state.add_edge(
                entries[lv], f"out_{conn}", entries[lv + 1], f"in_{conn}", hull(data)
            )
        state.add_edge(
            entries[-1], f"out_{conn}", t, conn,
            ir.Memlet(data, ir.Subset.index(idx)),
        )
    for conn, access, data, idx, wcr, ident in outputs:
        def mk(subset, data=data, wcr=wcr, ident=ident):
            return ir.Memlet(data, subset, wcr=wcr, wcr_identity=ident)

        if not entries:
            state.add_edge(t, conn, access, None, mk(ir.Subset.index(idx)))
            continue
        state.add_edge(t, conn, exits[-1], f"in_{conn}", mk(ir.Subset.index(idx)))
        for lv in range(len(exits) - 1, 0, -1):
            state.add_edge(
                exits[lv], f"out_{conn}", exits[lv - 1], f"in_{conn}",
                mk(ir.Subset.full(g.container(data).shape)),
            )
        state.add_edge(
            exits[0], f"out_{conn}", access, None,
            mk(ir.Subset.full(g.container(data).shape)),
        )
    return entries, exits, t


def _bcast_index(in_shape: Sequence, params: Sequence[str], out_rank: int) -> list:
    """Right-aligned broadcast indexing of an input within an output-domain map."""
    idx = []
    offset = out_rank - len(in_shape)
    for j, d in enumerate(in_shape):
        if isinstance(d, Const) and d.value == 1:
            idx.append("0")
        else:
            idx.append(params[offset + j])
    return idx


def _elementwise(
    g: ir.Graph,
    state: ir.State,
    label: str,
    inputs: Sequence[tuple],  # (conn, access id, container)
    output: tuple,  # (access id, container)
    body: str,
) -> None:
    """One parallel map over the output domain with broadcast input reads."""
    out_access, out_data = output
    out_shape = g.container(out_data).shape
    params = [f"i{k}" for k in range(len(out_shape))]
    ins = [
        (conn, access, data,
         _bcast_index(g.container(data).shape, params, len(out_shape)))
        for conn, access, data in inputs
    ]
    levels = [(params, [(0, s, 1) for s in out_shape])] if params else []
    build_map(
        g, state, label, levels, ins,
        [("o", out_access, out_data, list(params), None, None)],
        {"o": body},
    )


def _reduce_map(
    g: ir.Graph,
    state: ir.State,
    label: str,
    inputs: Sequence[tuple],  # (conn, access id, container, idx or None=all params)
    output: tuple,  # (access id, container)
    domain_shape: Sequence,  # iteration domain (typically the input shape)
    axes: Sequence[int],
    keepdims: bool,
    body: str,
    wcr: str,
) -> None:
    """Single map over *domain_shape* accumulating into a reduced output."""
    out_access, out_data = output
    params = [f"i{k}" for k in range(len(domain_shape))]
    out_idx = []
    for k in range(len(domain_shape)):
        if k in axes:
            if keepdims:
                out_idx.append("0")
        else:
            out_idx.append(params[k])
    ident = 0.0 if wcr == "sum" else float("-inf")
    ins = [
        (conn, access, data, list(params) if idx is None else idx)
        for conn, access, data, idx in inputs
    ]
    levels = [(params, [(0, s, 1) for s in domain_shape])] if params else []
    build_map(
        g, state, label, levels, ins,
        [("o", out_access, out_data, out_idx, wcr, ident)],
        {"o": body},
    )


def _new_transient(g: ir.Graph, state: ir.State, base: str, shape, dtype: str):
    name = g.fresh_name(base)
    g.add_container(name, shape, dtype, "Transient")
    return state.add_access(name), name


def _replace_with(state: ir.State, nid: int, node: ir.LibraryNode) -> None:
    state.nodes[nid] = node


# ---------------------------------------------------------------------------
# Einsum lowering (the workhorse)


def einsum_to_maps(
    g: ir.Graph,
    state: ir.State,
    equation: str,
    inputs: Sequence[tuple],  # (access id, container)
    output: tuple,  # (access id, container)
    label: str = "einsum",
    coeff: Optional[float] = None,
) -> None:
    """Expand an Einstein sum into an outer map over output indices and an
    inner map over contraction indices with a sum-WCR multiply-accumulate."""
    terms, out_term = parse_einsum(equation, len(inputs))
    extents: dict[str, ScalarExpr] = {}
    for term, (_, data) in zip(terms, inputs):
        shape = g.container(data).shape
        if len(term) != len(shape):
            raise LoweringError(
                f"einsum {equation!r}: term {term!r} does not match rank "
                f"{len(shape)} of {data!r}"
            )
        for c, d in zip(term, shape):
            if c in extents:
                if not expr_equal(extents[c], d):
                    raise LoweringError(
                        f"einsum {equation!r}: index {c!r} has extents "
                        f"{extents[c]} and {d}"
                    )
            else:
                extents[c] = as_expr(d)
    contr = [c for c in sorted(extents) if c not in out_term]
    param_of = {c: f"i{k}" for k, c in enumerate(out_term)}
    param_of.update({c: f"r{k}" for k, c in enumerate(contr)})

    conns = [f"a{k}" for k in range(len(inputs))]
    factors = ([] if coeff is None else [repr(float(coeff))]) + conns
    body = " * ".join(factors) if (len(factors) > 1 or coeff is not None) else conns[0]

    levels = []
    if out_term:
        levels.append(
            ([param_of[c] for c in out_term], [(0, extents[c], 1) for c in out_term])
        )
    if contr:
        levels.append(
            ([param_of[c] for c in contr], [(0, extents[c], 1) for c in contr])
        )
    ins = [
        (conn, access, data, [param_of[c] for c in term])
        for conn, (access, data), term in zip(conns, inputs, terms)
    ]
    out_access, out_data = output
    wcr = "sum" if contr else None
    ident = 0.0 if contr else None
    build_map(
        g, state, _label(state, label), levels, ins,
        [("o", out_access, out_data, [param_of[c] for c in out_term], wcr, ident)],
        {"o": body},
    )


# ---------------------------------------------------------------------------
# BLAS-mappability classifier


def is_blas_mappable(
    equation: str, layouts: Optional[Sequence[Sequence[int]]] = None
) -> Optional[dict]:
    """Classify a two-operand, single-contraction einsum as a BLAS pattern.

    Returns ``{"kind": "GEMM"|"BatchedGEMM"|"GEMV", "transA": bool,
    "transB": bool, "batch": str}`` or None.  *layouts*, when given, lists
    each operand's storage dimension order (outermost to innermost) as a
    permutation of its term positions; a pattern is rejected when neither
    operand is stored contiguously in one of its matrix dimensions.  The
    table is a conservative reconstruction: anything outside it returns None.
    """
    try:
        terms, out_term = parse_einsum(equation, equation.split("->")[0].count(",") + 1)
    except ShapeError:
        return None
    if len(terms) != 2:
        return None
    ta, tb = terms
    set_a, set_b, set_out = set(ta), set(tb), set(out_term)
    if len(set_a) != len(ta) or len(set_b) != len(tb):
        return None  # diagonals are not BLAS calls
    contracted = (set_a & set_b) - set_out
    if len(contracted) != 1:
        return None
    (k,) = contracted
    batch = [c for c in out_term if c in set_a and c in set_b]
    m_letters = [c for c in out_term if c in set_a and c not in set_b]
    n_letters = [c for c in out_term if c in set_b and c not in set_a]
    if set_out != set(batch) | set(m_letters) | set(n_letters):
        return None
    if len(m_letters) > 1 or len(n_letters) > 1:
        return None
    # Batch letters must prefix both terms and the output in the same order.
    for term in (ta, tb, out_term):
        if list(term[: len(batch)]) != batch:
            return None
    if out_term[: len(batch)] + "".join(m_letters) + "".join(n_letters) != out_term:
        return None
    a_rest = [c for c in ta if c not in batch]
    b_rest = [c for c in tb if c not in batch]
    m = m_letters[0] if m_letters else None
    n = n_letters[0] if n_letters else None

    if layouts is not None:
        def contiguous(term, layout, matrix_letters):
            order = [term[p] for p in layout]
            return order[-1] in matrix_letters

        ok_a = contiguous(ta, layouts[0], {m, k} - {None})
        ok_b = contiguous(tb, layouts[1], {n, k} - {None})
        if not (ok_a or ok_b):
            return None

    if m and n:
        if a_rest not in ([m, k], [k, m]) or b_rest not in ([k, n], [n, k]):
            return None
        info = {
            "kind": "BatchedGEMM" if batch else "GEMM",
            "transA": a_rest == [k, m],
            "transB": b_rest == [n, k],
            "batch": "".join(batch),
        }
        return info
    if m and not n and b_rest == [k] and a_rest in ([m, k], [k, m]):
        return {
            "kind": "GEMV",
            "transA": a_rest == [k, m],
            "transB": False,
            "batch": "".join(batch),
        }
    if n and not m and a_rest == [k] and b_rest in ([k, n], [n, k]):
        # vector-matrix product: x^T B is a GEMV on B^T
        return {
            "kind": "GEMV",
            "transA": False,
            "transB": b_rest == [k, n],
            "batch": "".join(batch),
        }
    return None


# ---------------------------------------------------------------------------
# The generic Reduce node (lowering seam for all reductions)


def _reduce_infer(attrs, shapes, dtypes):
    if attrs["op"] not in ("sum", "max"):
        raise ShapeError(f"Reduce: unknown reduction {attrs['op']!r}")
    shape = shapes[0]
    axes = frontend._norm_axes(attrs["axes"], len(shape), "Reduce")
    keep = bool(attrs["keepdims"])
    out = []
    for i, d in enumerate(shape):
        if i in axes:
            if keep:
                out.append(Const(1))
        else:
            out.append(d)
    return [(tuple(out), dtypes[0])]


def _reduce_reference(attrs, inputs):
    x = inputs[0]
    axes = frontend._norm_axes(attrs["axes"], x.ndim, "Reduce")
    fn = np.sum if attrs["op"] == "sum" else np.max
    val = fn(x.astype(np.float64), axis=axes or None, keepdims=bool(attrs["keepdims"]))
    return [np.asarray(val).astype(x.dtype, copy=False)]


frontend.register_op(
    OpSpec(
        "Reduce",
        {"op": frontend.REQUIRED, "axes": None, "keepdims": 1},
        1,
        1,
        _reduce_infer,
        _reduce_reference,
    )
)


# ---------------------------------------------------------------------------
# Per-operator lowering programs

_UNARY_BODIES = {
    "Neg": "-v0",
    "Exp": "exp(v0)",
    "Log": "log(v0)",
    "Sqrt": "sqrt(v0)",
    "Tanh": "tanh(v0)",
    "Sigmoid": "1.0 / (1.0 + exp(-v0))",
    "Relu": "max(0.0, v0)",
    "Softplus": "log(1.0 + exp(v0))",
    "Identity": "v0",
}


def _make_unary_program(body: str):
    def program(g, state, nid, node, ins, outs):
        _elementwise(
            g, state, _label(state, node.op.lower()),
            [("v0", ins[0][1], ins[0][2])],
            (outs[0][1], outs[0][2]),
            body,
        )

    return program


for _op, _body in _UNARY_BODIES.items():
    register_lowering(_op, _make_unary_program(_body))


_BINARY_BODIES = {"Add": "+", "Sub": "-", "Mul": "*", "Div": "/", "Pow": "^"}


def _make_binary_program(op: str, sym: str):
    scalar_attr = {"Pow": "exponent", "Div": "divisor"}.get(op)

    def program(g, state, nid, node, ins, outs):
        if scalar_attr and node.attrs.get(scalar_attr) is not None:
            body = f"v0 {sym} {repr(float(node.attrs[scalar_attr]))}"
            inputs = [("v0", ins[0][1], ins[0][2])]
        else:
            body = f"v0 {sym} v1"
            inputs = [("v0", ins[0][1], ins[0][2]), ("v1", ins[1][1], ins[1][2])]
        _elementwise(
            g, state, _label(state, op.lower()), inputs,
            (outs[0][1], outs[0][2]), body,
        )

    return program


for _op, _sym in _BINARY_BODIES.items():
    register_lowering(_op, _make_binary_program(_op, _sym))


def _program_reduce_entry(kind: str):
    """ReduceSum/Max step down to the generic Reduce node in place."""

    def program(g, state, nid, node, ins, outs):
        axes = frontend._norm_axes(
            node.attrs["axes"], len(g.container(ins[0][2]).shape), node.op
        )
        _replace_with(
            state, nid,
            ir.LibraryNode(
                "Reduce", node.name,
                {"op": kind, "axes": list(axes), "keepdims": node.attrs["keepdims"]},
                node.in_conns, node.out_conns,
            ),
        )

    return program


register_lowering("ReduceSum", _program_reduce_entry("sum"))
register_lowering("ReduceMax", _program_reduce_entry("max"))


def _program_reduce_mean(g, state, nid, node, ins, outs):
    in_data = ins[0][2]
    out_data = outs[0][2]
    shape = g.container(in_data).shape
    axes = frontend._norm_axes(node.attrs["axes"], len(shape), "ReduceMean")
    count = Const(1)
    for a in axes:
        count = simplify(count * shape[a])
    tmp_access, tmp = _new_transient(
        g, state, f"{out_data}_sum", g.container(out_data).shape,
        g.container(out_data).dtype,
    )
    _strip_node(state, nid)
    red = state.add_node(
        ir.LibraryNode(
            "Reduce", node.name,
            {"op": "sum", "axes": list(axes), "keepdims": node.attrs["keepdims"]},
            ("in_0",), ("out_0",),
        )
    )
    state.add_edge(ins[0][1], None, red, "in_0",
                   ir.Memlet(in_data, ir.Subset.full(shape)))
    state.add_edge(red, "out_0", tmp_access, None,
                   ir.Memlet(tmp, ir.Subset.full(g.container(tmp).shape)))
    _elementwise(
        g, state, _label(state, "mean_div"),
        [("v0", tmp_access, tmp)], (outs[0][1], out_data),
        f"v0 / ({render(count)})",
    )
    return True  # handled its own node removal


def _program_reduce_native(g, state, nid, node, ins, outs):
    in_data = ins[0][2]
    shape = g.container(in_data).shape
    axes = frontend._norm_axes(node.attrs["axes"], len(shape), "Reduce")
    keep = bool(node.attrs["keepdims"])
    if not axes:
        _elementwise(
            g, state, _label(state, "copy"),
            [("v0", ins[0][1], in_data)], (outs[0][1], outs[0][2]), "v0",
        )
        return
    _reduce_map(
        g, state, _label(state, f"reduce_{node.attrs['op']}"),
        [("v0", ins[0][1], in_data, None)],
        (outs[0][1], outs[0][2]),
        shape, axes, keep, "v0", node.attrs["op"],
    )


register_lowering("Reduce", _program_reduce_native)
register_lowering("ReduceMean", _program_reduce_mean)


def _program_gap(g, state, nid, node, ins, outs):
    """GlobalAveragePool: sum-reduce the spatial dims, then divide."""
    in_data = ins[0][2]
    shape = g.container(in_data).shape
    axes = list(range(2, len(shape)))
    count = Const(1)
    for a in axes:
        count = simplify(count * shape[a])
    tmp_access, tmp = _new_transient(
        g, state, f"{outs[0][2]}_sum", g.container(outs[0][2]).shape,
        g.container(outs[0][2]).dtype,
    )
    _strip_node(state, nid)
    red = state.add_node(
        ir.LibraryNode(
            "Reduce", node.name, {"op": "sum", "axes": axes, "keepdims": 1},
            ("in_0",), ("out_0",),
        )
    )
    state.add_edge(ins[0][1], None, red, "in_0",
                   ir.Memlet(in_data, ir.Subset.full(shape)))
    state.add_edge(red, "out_0", tmp_access, None,
                   ir.Memlet(tmp, ir.Subset.full(g.container(tmp).shape)))
    _elementwise(
        g, state, _label(state, "gap_div"),
        [("v0", tmp_access, tmp)], (outs[0][1], outs[0][2]),
        f"v0 / ({render(count)})",
    )
    return True


register_lowering("GlobalAveragePool", _program_gap)


def _matmul_equation(shape_a, shape_b) -> str:
    """Equation for numpy-style matmul; broadcast batch dims of extent 1 get
    fresh letters (summed over their single element, which is the identity)."""
    rank_a, rank_b = len(shape_a), len(shape_b)
    m, k, n = "x", "y", "z"  # reserved matrix letters
    pool = [c for c in string.ascii_lowercase if c not in (m, k, n)]
    nbatch = max(rank_a - 2, rank_b - 2, 0)
    batch_out = pool[:nbatch]
    fresh = iter(pool[nbatch:])

    def batch_term(rank, shape):
        nb = rank - 2 if rank > 2 else 0
        term = []
        for j in range(nb):
            d = shape[j]
            if isinstance(d, Const) and d.value == 1:
                term.append(next(fresh))
            else:
                term.append(batch_out[nbatch - nb + j])
        return "".join(term)

    ta = batch_term(rank_a, shape_a)
    tb = batch_term(rank_b, shape_b)
    a_term, out_a = (k, "") if rank_a == 1 else (ta + m + k, m)
    b_term, out_b = (k, "") if rank_b == 1 else (tb + k + n, n)
    return f"{a_term},{b_term}->{''.join(batch_out)}{out_a}{out_b}"


def _program_matmul(g, state, nid, node, ins, outs):
    shape_a = g.container(ins[0][2]).shape
    shape_b = g.container(ins[1][2]).shape
    eq = _matmul_equation(shape_a, shape_b)
    _replace_with(
        state, nid,
        ir.LibraryNode("Einsum", node.name, {"equation": eq},
                       node.in_conns, node.out_conns),
    )


register_lowering("MatMul", _program_matmul, name="einsum")


def _program_gemm(g, state, nid, node, ins, outs):
    a_term = "ki" if node.attrs["transA"] else "ik"
    b_term = "jk" if node.attrs["transB"] else "kj"
    eq = f"{a_term},{b_term}->ij"
    alpha = float(node.attrs["alpha"])
    beta = float(node.attrs["beta"])
    if alpha == 1.0 and len(ins) == 2:
        _replace_with(
            state, nid,
            ir.LibraryNode("Einsum", node.name, {"equation": eq},
                           node.in_conns[:2], node.out_conns),
        )
        return
    out_data = outs[0][2]
    tmp_access, tmp = _new_transient(
        g, state, f"{out_data}_mm", g.container(out_data).shape,
        g.container(out_data).dtype,
    )
    _strip_node(state, nid)
    mm = state.add_node(
        ir.LibraryNode("Einsum", node.name, {"equation": eq},
                       ("in_0", "in_1"), ("out_0",))
    )
    for conn, (c, access, data) in zip(("in_0", "in_1"), ins[:2]):
        state.add_edge(access, None, mm, conn,
                       ir.Memlet(data, ir.Subset.full(g.container(data).shape)))
    state.add_edge(mm, "out_0", tmp_access, None,
                   ir.Memlet(tmp, ir.Subset.full(g.container(tmp).shape)))
    if len(ins) == 3 and beta != 0.0:
        body = f"{alpha!r} * v0 + {beta!r} * v1"
        inputs = [("v0", tmp_access, tmp), ("v1", ins[2][1], ins[2][2])]
    else:
        body = f"{alpha!r} * v0"
        inputs = [("v0", tmp_access, tmp)]
    _elementwise(g, state, _label(state, "gemm_scale"), inputs,
                 (outs[0][1], out_data), body)
    return True


register_lowering("Gemm", _program_gemm, name="einsum")


def _program_einsum(g, state, nid, node, ins, outs):
    einsum_to_maps(
        g, state, node.attrs["equation"],
        [(access, data) for _, access, data in ins],
        (outs[0][1], outs[0][2]),
        label="einsum",
    )


register_lowering("Einsum", _program_einsum)


def _program_transpose(g, state, nid, node, ins, outs):
    rank = len(g.container(ins[0][2]).shape)
    perm = node.attrs["perm"]
    perm = list(range(rank))[::-1] if perm is None else [int(p) for p in perm]
    src = string.ascii_lowercase[:rank]
    out = "".join(src[p] for p in perm)
    _replace_with(
        state, nid,
        ir.LibraryNode("Einsum", node.name, {"equation": f"{src}->{out}"},
                       node.in_conns, node.out_conns),
    )


register_lowering("Transpose", _program_transpose)


def _program_softmax(g, state, nid, node, ins, outs):
    """Four scopes: max-reduce, shifted exp, sum-reduce, divide."""
    x_access, x = ins[0][1], ins[0][2]
    y_access, y = outs[0][1], outs[0][2]
    shape = g.container(x).shape
    dtype = g.container(x).dtype
    (axis,) = frontend._norm_axes(node.attrs["axis"], len(shape), "Softmax")
    red_shape = tuple(d for i, d in enumerate(shape) if i != axis)
    params = [f"i{k}" for k in range(len(shape))]
    outer_idx = [p for i, p in enumerate(params) if i != axis]

    mx_access, mx = _new_transient(g, state, f"{y}_max", red_shape, dtype)
    ex_access, ex = _new_transient(g, state, f"{y}_exp", shape, dtype)
    sm_access, sm = _new_transient(g, state, f"{y}_den", red_shape, dtype)

    _strip_node(state, nid)
    _reduce_map(
        g, state, _label(state, "softmax_max"),
        [("v0", x_access, x, None)], (mx_access, mx),
        shape, (axis,), False, "v0", "max",
    )
    x_access2 = state.add_access(x)
    build_map(
        g, state, _label(state, "softmax_exp"),
        [(params, [(0, s, 1) for s in shape])],
        [("v0", x_access2, x, list(params)), ("v1", mx_access, mx, outer_idx)],
        [("o", ex_access, ex, list(params), None, None)],
        {"o": "exp(v0 - v1)"},
    )
    _reduce_map(
        g, state, _label(state, "softmax_sum"),
        [("v0", ex_access, ex, None)], (sm_access, sm),
        shape, (axis,), False, "v0", "sum",
    )
    ex_access2 = state.add_access(ex)
    build_map(
        g, state, _label(state, "softmax_div"),
        [(params, [(0, s, 1) for s in shape])],
        [("v0", ex_access2, ex, list(params)), ("v1", sm_access, sm, outer_idx)],
        [("o", y_access, y, list(params), None, None)],
        {"o": "v0 / v1"},
    )
    return True


register_lowering("Softmax", _program_softmax)


def _program_layernorm(g, state, nid, node, ins, outs):
    """Primitive chain: mean, center, variance, inverse std, scale-shift."""
    x_access, x = ins[0][1], ins[0][2]
    y_access, y = outs[0][1], outs[0][2]
    shape = g.container(x).shape
    dtype = g.container(x).dtype
    axis = frontend._norm_axes(node.attrs["axis"], len(shape), "LayerNormalization")[0]
    eps = float(node.attrs["epsilon"])
    axes = tuple(range(axis, len(shape)))
    outer_shape = shape[:axis]
    params = [f"i{k}" for k in range(len(shape))]
    outer_idx = params[:axis]
    norm_idx = params[axis:]
    count = Const(1)
    for a in axes:
        count = simplify(count * shape[a])
    n_txt = render(count)

    s_access, s = _new_transient(g, state, f"{y}_sum", outer_shape, dtype)
    mu_access, mu = _new_transient(g, state, f"{y}_mean", outer_shape, dtype)
    xc_access, xc = _new_transient(g, state, f"{y}_center", shape, dtype)
    vs_access, vs = _new_transient(g, state, f"{y}_varsum", outer_shape, dtype)
    istd_access, istd = _new_transient(g, state, f"{y}_istd", outer_shape, dtype)

    _strip_node(state, nid)
    # (1) sum over the normalized dims
    _reduce_map(
        g, state, _label(state, "ln_sum"),
        [("v0", x_access, x, None)], (s_access, s),
        shape, axes, False, "v0", "sum",
    )
    # (2) mean
    _elementwise(g, state, _label(state, "ln_mean"),
                 [("v0", s_access, s)], (mu_access, mu), f"v0 / ({n_txt})")
    # (3) center
    x_access2 = state.add_access(x)
    build_map(
        g, state, _label(state, "ln_center"),
        [(params, [(0, d, 1) for d in shape])],
        [("v0", x_access2, x, list(params)), ("v1", mu_access, mu, list(outer_idx))],
        [("o", xc_access, xc, list(params), None, None)],
        {"o": "v0 - v1"},
    )
    # (4) variance numerator
    _reduce_map(
        g, state, _label(state, "ln_varsum"),
        [("v0", xc_access, xc, None)], (vs_access, vs),
        shape, axes, False, "v0 * v0", "sum",
    )
    # (5) inverse standard deviation
    _elementwise(
        g, state, _label(state, "ln_istd"),
        [("v0", vs_access, vs)], (istd_access, istd),
        f"1.0 / sqrt(v0 / ({n_txt}) + {eps!r})",
    )
    # (6) normalize, scale, shift
    xc_access2 = state.add_access(xc)
    scale_idx = list(norm_idx)
    inputs = [
        ("v0", xc_access2, xc, list(params)),
        ("v1", istd_access, istd, list(outer_idx)),
        ("v2", ins[1][1], ins[1][2], scale_idx),
    ]
    body = "v0 * v1 * v2"
    if len(ins) == 3:
        inputs.append(("v3", ins[2][1], ins[2][2], list(scale_idx)))
        body += " + v3"
    build_map(
        g, state, _label(state, "ln_scale"),
        [(params, [(0, d, 1) for d in shape])],
        inputs,
        [("o", y_access, y, list(params), None, None)],
        {"o": body},
    )
    return True


register_lowering("LayerNormalization", _program_layernorm)


def _program_batchnorm(g, state, nid, node, ins, outs):
    """Training-mode batch normalization over the channel axis."""
    x_access, x = ins[0][1], ins[0][2]
    shape = g.container(x).shape
    dtype = g.container(x).dtype
    rank = len(shape)
    eps = float(node.attrs["epsilon"])
    mom = float(node.attrs["momentum"])
    axes = tuple(a for a in range(rank) if a != 1)
    c_shape = (shape[1],)
    count = Const(1)
    for a in axes:
        count = simplify(count * shape[a])
    n_txt = render(count)
    params = [f"i{k}" for k in range(rank)]
    c_idx = [params[1]]

    s_access, s = _new_transient(g, state, "bn_sum", c_shape, dtype)
    mu_access, mu = _new_transient(g, state, "bn_mean", c_shape, dtype)
    vs_access, vs = _new_transient(g, state, "bn_varsum", c_shape, dtype)
    var_access, var = _new_transient(g, state, "bn_var", c_shape, dtype)

    _strip_node(state, nid)
    _reduce_map(
        g, state, _label(state, "bn_s"),
        [("v0", x_access, x, None)], (s_access, s),
        shape, axes, False, "v0", "sum",
    )
    _elementwise(g, state, _label(state, "bn_mu"),
                 [("v0", s_access, s)], (mu_access, mu), f"v0 / ({n_txt})")
    x_access2 = state.add_access(x)
    build_map(
        g, state, _label(state, "bn_vs"),
        [(params, [(0, d, 1) for d in shape])],
        [("v0", x_access2, x, list(params)), ("v1", mu_access, mu, list(c_idx))],
        [("o", vs_access, vs, list(c_idx), "sum", 0.0)],
        {"o": "(v0 - v1) * (v0 - v1)"},
    )
    _elementwise(g, state, _label(state, "bn_var"),
                 [("v0", vs_access, vs)], (var_access, var), f"v0 / ({n_txt})")
    x_access3 = state.add_access(x)
    build_map(
        g, state, _label(state, "bn_y"),
        [(params, [(0, d, 1) for d in shape])],
        [
            ("v0", x_access3, x, list(params)),
            ("v1", mu_access, mu, list(c_idx)),
            ("v2", var_access, var, list(c_idx)),
            ("v3", ins[1][1], ins[1][2], list(c_idx)),
            ("v4", ins[2][1], ins[2][2], list(c_idx)),
        ],
        [("o", outs[0][1], outs[0][2], list(params), None, None)],
        {"o": f"(v0 - v1) / sqrt(v2 + {eps!r}) * v3 + v4"},
    )
    if len(outs) == 3:
        _elementwise(
            g, state, _label(state, "bn_rmean"),
            [("v0", ins[3][1], ins[3][2]), ("v1", mu_access, mu)],
            (outs[1][1], outs[1][2]),
            f"v0 * {mom!r} + v1 * {1.0 - mom!r}",
        )
        _elementwise(
            g, state, _label(state, "bn_rvar"),
            [("v0", ins[4][1], ins[4][2]), ("v1", var_access, var)],
            (outs[2][1], outs[2][2]),
            f"v0 * {mom!r} + v1 * {1.0 - mom!r}",
        )
    return True


register_lowering("BatchNormalization", _program_batchnorm)


def _program_conv(g, state, nid, node, ins, outs):
    """Direct loop nest: outer (batch, out-channel, spatial), inner
    (in-channel, kernel) with sum-WCR.  Padding is realized with clamped
    reads masked to zero outside the input, keeping the nest a single scope."""
    x_access, x = ins[0][1], ins[0][2]
    w_access, w = ins[1][1], ins[1][2]
    y_access, y = outs[0][1], outs[0][2]
    x_shape = g.container(x).shape
    w_shape = g.container(w).shape
    y_shape = g.container(y).shape
    strides = [int(s) for s in (node.attrs["strides"] or [1, 1])]
    pads = [int(p) for p in (node.attrs["pads"] or [0, 0, 0, 0])]
    group = int(node.attrs["group"])
    depthwise = group != 1

    outer = ["i0", "i1", "i2", "i3"]  # batch, out-channel, spatial rows/cols
    inner = ["r1", "r2"] if depthwise else ["r0", "r1", "r2"]  # in-chan, kernel
    h_in, w_in = x_shape[2], x_shape[3]

    def pos(spatial_param, kern_param, stride, pad):
        base = f"{spatial_param} * {stride} + {kern_param}"
        return f"{base} - {pad}" if pad else base

    hpos = pos("i2", "r1", strides[0], pads[0])
    wpos = pos("i3", "r2", strides[1], pads[1])
    if pads[0] or pads[2]:
        h_idx = f"max(0, min({render(h_in)} - 1, {hpos}))"
    else:
        h_idx = hpos
    if pads[1] or pads[3]:
        w_idx = f"max(0, min({render(w_in)} - 1, {wpos}))"
    else:
        w_idx = wpos
    chan = "i1" if depthwise else "r0"
    x_idx = ["i0", chan, h_idx, w_idx]
    w_idx_l = ["i1", "0" if depthwise else "r0", "r1", "r2"]

    body = "v0 * v1"
    if pads[0] or pads[2]:
        body += f" * ge({hpos}, 0) * ge({render(h_in)} - 1 - ({hpos}), 0)"
    if pads[1] or pads[3]:
        body += f" * ge({wpos}, 0) * ge({render(w_in)} - 1 - ({wpos}), 0)"

    _strip_node(state, nid)
    outer_ranges = [
        (0, y_shape[0], 1), (0, y_shape[1], 1), (0, y_shape[2], 1), (0, y_shape[3], 1),
    ]
    inner_ranges = ([(0, w_shape[2], 1), (0, w_shape[3], 1)] if depthwise
                    else [(0, x_shape[1], 1), (0, w_shape[2], 1), (0, w_shape[3], 1)])
    if len(ins) == 3:
        tmp_access, tmp = _new_transient(g, state, f"{y}_conv", y_shape,
                                         g.container(y).dtype)
        target = (tmp_access, tmp)
    else:
        target = (y_access, y)
    build_map(
        g, state, _label(state, "conv"),
        [(outer, outer_ranges), (inner, inner_ranges)],
        [("v0", x_access, x, x_idx), ("v1", w_access, w, w_idx_l)],
        [("o", target[0], target[1], list(outer), "sum", 0.0)],
        {"o": body},
    )
    if len(ins) == 3:
        build_map(
            g, state, _label(state, "conv_bias"),
            [(outer, outer_ranges)],
            [("v0", target[0], target[1], list(outer)),
             ("v1", ins[2][1], ins[2][2], ["i1"])],
            [("o", y_access, y, list(outer), None, None)],
            {"o": "v0 + v1"},
        )
    return True


register_lowering("Conv", _program_conv)


def _program_reshape_like(g, state, nid, node, ins, outs):
    """Reshape/Flatten: a plain copy edge with reshape semantics."""
    src_data = ins[0][2]
    dst_data = outs[0][2]
    state.add_edge(
        ins[0][1], None, outs[0][1], None,
        ir.Memlet(
            src_data, ir.Subset.full(g.container(src_data).shape),
            other_subset=ir.Subset.full(g.container(dst_data).shape),
        ),
    )
    _strip_node(state, nid)
    return True


register_lowering("Reshape", _program_reshape_like)
register_lowering("Flatten", _program_reshape_like)


def _program_constant(g, state, nid, node, ins, outs):
    """Materialize the value: the output container becomes a Global constant."""
    value = frontend._constant_value(node.attrs)
    out_data = outs[0][2]
    desc = g.container(out_data)
    desc.storage = "Global"
    desc.constant = True
    g.constants[out_data] = np.asarray(value, dtype=ir.NUMPY_DTYPES[desc.dtype])
    _strip_node(state, nid)
    return True


register_lowering("Constant", _program_constant)


# ---------------------------------------------------------------------------
# Driver


def expand(g: ir.Graph, state: ir.State, nid: int, validate: bool = True) -> None:
    """Replace the LibraryNode *nid* with its lowering subgraph, in place."""
    node = state.nodes.get(nid)
    if not isinstance(node, ir.LibraryNode):
        raise LoweringError(f"node {nid} is not a library node")
    impl = node.attrs.get("implementation")
    if impl == "reference-only":
        raise LoweringError(
            f"{node.name}: marked reference-only; remove the marker to lower"
        )
    if node.op not in _PROGRAMS:
        raise LoweringError(f"no lowering registered for operator {node.op!r}")
    default, table = _PROGRAMS[node.op]
    chosen = impl or default
    if chosen not in table:
        raise LoweringError(
            f"{node.name}: unknown implementation {chosen!r} for {node.op}; "
            f"available: {sorted(table)}"
        )
    ins, outs = _io(state, nid, node)
    handled = table[chosen](g, state, nid, node, ins, outs)
    if not handled and nid in state.nodes and state.nodes[nid] is node:
        _strip_node(state, nid)
    if validate:
        diags = ir.validate(g)
        if diags:
            raise LoweringError(
                f"lowering {node.op} produced an invalid graph: "
                + "; ".join(f"{d.rule}: {d.message}" for d in diags)
            )


def _expandable(node: ir.Node, keep: set) -> bool:
    return (
        isinstance(node, ir.LibraryNode)
        and node.op not in keep
        and node.attrs.get("implementation") != "reference-only"
    )


def lower_all(g: ir.Graph, keep: Iterable[str] = ()) -> ir.Graph:
    """Expand library nodes to fixpoint, in place; returns the same graph.

    Operators named in *keep*, marked ``implementation: reference-only``, or
    lacking a registered lowering are left as library nodes.  Termination is
    enforced by the operator rank: every expansion step may only introduce
    strictly lower-level library nodes, so the total rank decreases.
    """
    keep = set(keep)
    budget = 8 * sum(
        1
        for st in g.states
        for n in st.nodes.values()
        if isinstance(n, ir.LibraryNode)
    ) + 32
    progress = True
    while progress:
        progress = False
        for state in g.states:
            for nid in sorted(state.nodes):
                node = state.nodes[nid]
                if isinstance(node, ir.NestedGraph):
                    lower_all(node.graph, keep)
                    continue
                if not _expandable(node, keep):
                    continue
                rank_before = op_rank(node.op)
                before_ids = set(state.nodes)
                expand(g, state, nid, validate=False)
                for new_id in set(state.nodes) - before_ids:
                    new_node = state.nodes[new_id]
                    if isinstance(new_node, ir.LibraryNode):
                        if op_rank(new_node.op) >= rank_before:
                            raise LoweringError(
                                f"lowering cycle: {node.op} expanded to "
                                f"{new_node.op} at the same or higher level"
                            )
                if nid in state.nodes and state.nodes[nid] is not node:
                    replacement = state.nodes[nid]
                    if isinstance(replacement, ir.LibraryNode):
                        if op_rank(replacement.op) >= rank_before:
                            raise LoweringError(
                                f"lowering cycle: {node.op} replaced by "
                                f"{replacement.op} at the same or higher level"
                            )
                progress = True
                budget -= 1
                if budget < 0:
                    raise LoweringError("lowering did not reach a fixpoint")
                break
            if progress:
                break
    diags = ir.validate(g)
    if diags:
        raise LoweringError(
            "lower_all produced an invalid graph: "
            + "; ".join(f"{d.rule}: {d.message}" for d in diags)
        )
    return g
