"""Automatic optimization pipeline.

Runs a fixed five-step recipe over an imported graph:

1. Pre-lowering cleanup to fixpoint: constant folding, einsum
   composition, layer-norm lifting.
2. Lower every library node to its native map/tasklet form.
3. Structural cleanup: inline nested graphs, eliminate redundant
   copies and dead dataflow, then greedily fuse map scopes.
4. Scope cleanup to fixpoint: hoist reduction initializers, drop
   trivial map dimensions, and (when optimizing ahead of
   differentiation) fuse tasklet chains so the backward pass
   recomputes scalars instead of reading stored intermediates.
5. Flatten multi-dimensional maps where the index math stays exact.

Every step is a sequence of named passes; each pass application is
recorded with structural deltas (kernel count, intermediate bytes,
node count) so the whole run can be rendered as a transformation
breakdown via :func:`optimization_report`.

Passes mutate nothing in place: the input graph is cloned up front and
each transformation application goes through the validated
:func:`dfir.transforms.apply` path.
"""

from __future__ import annotations

import copy
import json
from typing import Callable, Iterable, Mapping

from . import ir, lowering, transforms
from .ir import AccessNode, Graph, NestedGraph, State
from .symexpr import expr_equal

__all__ = [
    "PipelineError",
    "run_recipe",
    "greedy_fuse",
    "inline_nested",
    "optimization_report",
    "report_from_json",
]


class PipelineError(Exception):
    """A recipe pass failed.  ``report`` holds the records produced
    before the failure."""

    def __init__(self, message: str, report: list[dict] | None = None):
        super().__init__(message)
        self.report = list(report or [])


# ---------------------------------------------------------------------------
# Structural metrics


def _metrics(g: Graph, bindings) -> tuple[int, int | None, int]:
    kernels = sum(ir.kernel_count(st) for st in g.states)
    nodes = sum(len(st.nodes) for st in g.states)
    try:
        inter = int(ir.intermediate_bytes(g, bindings))
    except Exception:
        inter = None  # symbolic shapes without bindings
    return kernels, inter, nodes


def _record(name: str, applied: int, before, after) -> dict:
    kb, ib, nb = before
    ka, ia, na = after
    return {
        "pass": name,
        "applied_count": applied,
        "d_kernels": ka - kb,
        "d_intermediate_bytes": (ia - ib) if (ia is not None and ib is not None) else None,
        "d_nodes": na - nb,
    }


# ---------------------------------------------------------------------------
# Pass drivers


def _apply_pass(g: Graph, name: str) -> tuple[Graph, int]:
    """Apply one transformation repeatedly until it stops matching."""
    budget = 64 + 8 * sum(len(st.nodes) for st in g.states)
    applied = 0
    while True:
        matches = transforms.find_matches(g, name)
        if not matches:
            return g, applied
        g, _ = transforms.apply(matches[0], g)
        applied += 1
        if applied > budget:
            raise PipelineError(f"pass {name!r} did not reach a fixpoint")


def _fixpoint(
    g: Graph, names: Iterable[str], report: list[dict], bindings
) -> Graph:
    """Run the named passes in order, repeating the whole round until a
    round applies nothing.  Every pass gets a report row in the first
    round (so no-op runs are visible); later rounds add rows only for
    passes that fired."""
    names = list(names)
    first = True
    for _ in range(64):
        round_applied = 0
        for name in names:
            before = _metrics(g, bindings)
            g, applied = _apply_pass(g, name)
            round_applied += applied
            if first or applied:
                report.append(_record(name, applied, before, _metrics(g, bindings)))
        first = False
        if not round_applied:
            return g
    raise PipelineError(f"pass group {names} did not reach a fixpoint", report)


# ---------------------------------------------------------------------------
# Nested graph inlining


def _covers_full(subset: ir.Subset, shape) -> bool:
    full = ir.Subset.full(shape)
    if subset.rank != full.rank:
        return False
    return all(
        expr_equal(b1, b2) and expr_equal(e1, e2) and expr_equal(s1, s2)
        for (b1, e1, s1), (b2, e2, s2) in zip(subset.dims, full.dims)
    )


def _bindable(outer: Graph, state: State, edge, inner_desc) -> str | None:
    """Outer container name an inner container can alias, or None.

    Binding requires the outer edge to cover the full outer container
    with a shape identical to the inner declaration, so the splice can
    reuse the outer access node without any copy or reshape."""
    for nid in (edge.src, edge.dst):
        node = state.nodes[nid]
        if not isinstance(node, AccessNode):
            continue
        desc = outer.container(node.data)
        if len(desc.shape) != len(inner_desc.shape):
            return None
        if edge.memlet is None or not _covers_full(edge.memlet.subset, desc.shape):
            return None
        if not all(
            expr_equal(a, b) for a, b in zip(desc.shape, inner_desc.shape)
        ):
            return None
        return node.data
    return None


def _inline_one(g: Graph, state: State, nid: int) -> bool:
    """Splice a single-state nested graph into its surrounding state.

    Only handles the aliasable case: every boundary edge reads or
    writes a full outer container whose shape matches the inner
    declaration.  Anything else (partial views, multi-state bodies)
    is left as a nested node, which the interpreter executes as-is.
    """
    node = state.nodes[nid]
    assert isinstance(node, NestedGraph)
    inner = node.graph
    if len(inner.states) != 1:
        return False
    istate = inner.states[0]

    in_edges = list(state.in_edges(nid))
    out_edges = list(state.out_edges(nid))

    # Inner containers written anywhere in the body.
    written = {
        istate.nodes[e.dst].data
        for e in istate.edges
        if isinstance(istate.nodes[e.dst], AccessNode)
    }

    # Map inner container names to outer ones.
    cmap: dict[str, str] = {}
    bound_outer: dict[str, str] = {}  # inner name -> outer access container
    for e in in_edges:
        iname = node.input_map.get(e.dst_conn)
        if iname is None:
            return False
        if iname in written or iname in node.output_map.values():
            return False  # would alias a mutated input; keep nested
        outer_name = _bindable(g, state, e, inner.container(iname))
        if outer_name is None:
            return False
        cmap[iname] = outer_name
        bound_outer[iname] = outer_name
    for e in out_edges:
        iname = node.output_map.get(e.src_conn)
        if iname is None or iname in cmap:
            return False
        outer_name = _bindable(g, state, e, inner.container(iname))
        if outer_name is None:
            return False
        cmap[iname] = outer_name
        bound_outer[iname] = outer_name

    # Remaining inner containers become fresh outer transients.
    for desc in inner.containers:
        if desc.name in cmap:
            continue
        fresh = g.fresh_name(desc.name)
        g.add_container(
            fresh,
            desc.shape,
            desc.dtype,
            storage="Transient" if desc.storage == "Global" else desc.storage,
            lifetime="State",
            constant=desc.constant,
            stash=desc.stash,
        )
        if desc.constant and desc.name in inner.constants:
            g.constants[fresh] = inner.constants[desc.name]
        cmap[desc.name] = fresh

    # Splice inner nodes; access nodes of bound containers merge with
    # the outer access node so dataflow ordering stays explicit.
    outer_access: dict[str, int] = {}
    for e in in_edges + out_edges:
        for onid in (e.src, e.dst):
            onode = state.nodes[onid]
            if isinstance(onode, AccessNode):
                outer_access[onode.data] = onid

    idmap: dict[int, int] = {}
    for inid in sorted(istate.nodes):
        innode = istate.nodes[inid]
        if isinstance(innode, AccessNode) and innode.data in bound_outer:
            idmap[inid] = outer_access[bound_outer[innode.data]]
            continue
        clone = copy.deepcopy(innode)
        if isinstance(clone, AccessNode):
            clone.data = cmap[clone.data]
        idmap[inid] = state.add_node(clone)
    # Fix MapExit entry references among spliced nodes.
    for inid, onid in idmap.items():
        innode = istate.nodes[inid]
        if isinstance(innode, ir.MapExit):
            state.nodes[onid].entry = idmap[innode.entry]

    for e in istate.edges:
        memlet = None
        if e.memlet is not None:
            memlet = copy.deepcopy(e.memlet)
            memlet.data = cmap.get(memlet.data, memlet.data)
        state.add_edge(idmap[e.src], e.src_conn, idmap[e.dst], e.dst_conn, memlet)

    state.remove_node(nid)  # drops the boundary edges too
    return True


def inline_nested(g: Graph) -> int:
    """Inline nested graph nodes into their surrounding states, to
    fixpoint.  Returns the number of nodes inlined.  Nested nodes that
    cannot be spliced exactly (multi-state bodies, partial-view or
    mutated inputs) are left in place."""
    count = 0
    progress = True
    while progress:
        progress = False
        for st in g.states:
            for nid in sorted(st.nodes):
                if isinstance(st.nodes[nid], NestedGraph) and _inline_one(g, st, nid):
                    count += 1
                    progress = True
                    break
            if progress:
                break
    if count:
        diags = ir.validate(g)
        if diags:
            raise PipelineError(f"inlining produced an invalid graph: {diags}")
    return count


# ---------------------------------------------------------------------------
# Greedy fusion exploration


def _default_scorer(match: transforms.TransformMatch) -> float:
    """Prefer the fusion covering the most scopes (largest region)."""
    return float(len(match.payload["scopes"]))


def greedy_fuse(
    g: Graph,
    scorer: Callable[[transforms.TransformMatch], float] | None = None,
) -> tuple[Graph, int]:
    """Repeatedly apply the best-scoring legal subgraph fusion.

    Candidates are enumerated fresh after every application (fusing can
    expose larger regions).  Ties keep the earliest candidate, which is
    the lowest topological seed index by construction.  A negative score
    vetoes a candidate; when every candidate is vetoed the loop stops.
    Terminates in at most the initial kernel count of iterations because
    every fusion strictly reduces the number of top-level scopes.
    """
    scorer = scorer or _default_scorer
    limit = max(1, sum(ir.kernel_count(st) for st in g.states))
    applied = 0
    while True:
        matches = [
            m for m in transforms.find_matches(g, "subgraph_fusion")
            if scorer(m) >= 0
        ]
        if not matches:
            return g, applied
        best = max(matches, key=scorer)
        g, _ = transforms.apply(best, g)
        applied += 1
        if applied > limit:
            raise PipelineError("greedy fusion exceeded its termination bound")


# ---------------------------------------------------------------------------
# The recipe


def run_recipe(
    g: Graph,
    pre_ad: bool = True,
    bindings: Mapping[str, int] | None = None,
) -> tuple[Graph, list[dict]]:
    """Run the five-step optimization recipe; returns the optimized
    graph and a report: one row per pass with structural deltas.

    ``pre_ad`` enables the tasklet-fusion round in step 4, which
    collapses scalar chains so a later backward pass recomputes
    element values instead of storing them.  Disable it to keep
    tasklet-level intermediates addressable (e.g. when stashing is
    preferred over recomputation).

    The input graph is never mutated.  On pass failure the error is
    re-raised as :class:`PipelineError` with the partial report
    attached.
    """
    g = g.clone()
    report: list[dict] = []
    try:
        # (1) pre-lowering cleanup
        g = _fixpoint(
            g,
            ("constant_folding", "einsum_vertical_fusion", "lift_layernorm"),
            report,
            bindings,
        )

        # (2) lower to native maps/tasklets
        before = _metrics(g, bindings)
        g = lowering.lower_all(g)
        after = _metrics(g, bindings)
        report.append(_record("lower_all", int(after != before), before, after))

        # (3) structural cleanup and fusion
        before = _metrics(g, bindings)
        inlined = inline_nested(g)
        report.append(_record("inline_nested", inlined, before, _metrics(g, bindings)))
        g = _fixpoint(
            g,
            ("redundant_copy_elimination", "dead_dataflow_elimination"),
            report,
            bindings,
        )
        before = _metrics(g, bindings)
        g, fused = greedy_fuse(g)
        report.append(_record("greedy_fuse", fused, before, _metrics(g, bindings)))

        # (4) scope cleanup; tasklet fusion is the recompute knob
        passes = ["init_hoisting", "trivial_map_elimination"]
        if pre_ad:
            passes.append("tasklet_fusion")
        g = _fixpoint(g, passes, report, bindings)

        # (5) flatten rectangular maps
        g = _fixpoint(g, ("map_flattening",), report, bindings)
    except PipelineError as err:
        raise PipelineError(str(err), report) from err
    except (transforms.TransformError, lowering.LoweringError) as err:
        raise PipelineError(str(err), report) from err

    diags = ir.validate(g)
    if diags:
        raise PipelineError(f"recipe produced an invalid graph: {diags}", report)
    return g, report


# ---------------------------------------------------------------------------
# Reporting


_COLUMNS = ("pass", "applied_count", "d_kernels", "d_intermediate_bytes", "d_nodes")


def optimization_report(history: list[dict], fmt: str = "text") -> str:
    """Render a pass history as an aligned text table or as JSON.

    The JSON form is the history itself and round-trips through
    :func:`report_from_json`."""
    if fmt == "json":
        return json.dumps(history, indent=2, sort_keys=True)
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    header = ("pass", "applied", "Δkernels", "Δbytes", "Δnodes")
    rows = [header]
    totals = {"applied_count": 0, "d_kernels": 0, "d_nodes": 0}
    d_bytes, bytes_known = 0, True
    for rec in history:
        rows.append(
            (
                str(rec["pass"]),
                str(rec["applied_count"]),
                f"{rec['d_kernels']:+d}",
                "?" if rec["d_intermediate_bytes"] is None else f"{rec['d_intermediate_bytes']:+d}",
                f"{rec['d_nodes']:+d}",
            )
        )
        for key in totals:
            totals[key] += rec[key]
        if rec["d_intermediate_bytes"] is None:
            bytes_known = False
        else:
            d_bytes += rec["d_intermediate_bytes"]
    rows.append(
        (
            "total",
            str(totals["applied_count"]),
            f"{totals['d_kernels']:+d}",
            f"{d_bytes:+d}" if bytes_known else "?",
            f"{totals['d_nodes']:+d}",
        )
    )
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[j]) for j, cell in enumerate(row)).rstrip())
        if i == 0 or i == len(rows) - 2:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def report_from_json(text: str) -> list[dict]:
    """Parse a JSON report back into the history list."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PipelineError(f"report is not valid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise PipelineError("report must be a JSON array")
    for rec in data:
        missing = [c for c in _COLUMNS if not isinstance(rec, dict) or c not in rec]
        if missing:
            raise PipelineError(f"report row missing fields {missing}")
    return data
