"""Graph rewrites that reduce or reorganize data movement.

A catalog of transformations shares one framework: `find_matches` pattern-
matches a validated graph and returns TransformMatch records with
deterministic identities; `apply` re-checks legality against the current
graph version, clones the graph, mutates the clone, validates it, and
returns it with a diff record. Matches are pure reads; no caller ever
observes in-place mutation of the source graph.

Determinism contract: match lists are ordered by transformation name, then
by discovery order (topological position, then node id); match ids embed a
content hash of the bindings so equal graphs produce byte-identical lists.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional

import numpy as np

from . import ir, lowering
from .ir import (
    AccessNode,
    Edge,
    Graph,
    LibraryNode,
    MapEntry,
    MapExit,
    Memlet,
    State,
    Subset,
    Tasklet,
)
from .symexpr import (
    Const,
    ScalarExpr,
    Sym,
    evaluate,
    expr_equal,
    free_symbols,
    parse,
    render,
    simplify,
    substitute,
)


class TransformError(ir.IRError):
    pass


class StaleMatchError(TransformError):
    pass


class UnknownTransformError(TransformError):
    pass


# ---------------------------------------------------------------------------
# Match records


@dataclass
class TransformMatch:
    """One legal application site of a transformation.

    `match_id` is stable for a given graph content: it embeds the bindings'
    content hash, so the CLI, the service, and the UI agree on identities.
    `graph_hash` pins the graph version the match was computed against;
    applying after the graph changed is rejected.
    """

    name: str
    match_id: str
    nodes: list  # [[state, node_id], ...] — every node the match touches
    certificate: str
    description: str
    graph_hash: str
    payload: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "match_id": self.match_id,
            "nodes": self.nodes,
            "certificate": self.certificate,
            "description": self.description,
            "graph_hash": self.graph_hash,
            "payload": self.payload,
        }

    @staticmethod
    def from_json(d: Mapping) -> "TransformMatch":
        return TransformMatch(
            d["name"], d["match_id"], [list(x) for x in d["nodes"]],
            d["certificate"], d["description"], d["graph_hash"],
            dict(d.get("payload", {})),
        )


@dataclass
class _Entry:
    name: str
    finder: Callable[[Graph], list[dict]]
    applier: Callable[[Graph, TransformMatch], None]
    doc: str


CATALOG: dict[str, _Entry] = {}


def register_transformation(name: str, finder, applier, doc: str):
    if name in CATALOG:
        raise TransformError(f"transformation {name!r} registered twice")
    CATALOG[name] = _Entry(name, finder, applier, doc)


def catalog() -> list[dict]:
    return [
        {"name": e.name, "doc": e.doc} for e in
        (CATALOG[k] for k in sorted(CATALOG))
    ]


def _hash8(name: str, nodes, payload) -> str:
    blob = json.dumps([name, nodes, payload], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:8]


def find_matches(
    g: Graph,
    name: str = "ALL",
    selection: Optional[Iterable[int]] = None,
) -> list[TransformMatch]:
    """All legal matches, deterministically ordered. `selection`, when
    given, keeps only matches touching at least one of those node ids."""
    if name in ("ALL", "all", None):
        names = sorted(CATALOG)
    elif name in CATALOG:
        names = [name]
    else:
        raise UnknownTransformError(
            f"unknown transformation {name!r}; available: {sorted(CATALOG)}"
        )
    ghash = g.content_hash()
    sel = None if selection is None else {int(s) for s in selection}
    out: list[TransformMatch] = []
    for nm in names:
        raw = CATALOG[nm].finder(g)
        for ordinal, r in enumerate(raw):
            nodes = [[st, int(nid)] for st, nid in r["nodes"]]
            payload = r.get("payload", {})
            mid = f"{nm}-{ordinal}-{_hash8(nm, nodes, payload)}"
            m = TransformMatch(
                nm, mid, nodes, r["certificate"], r["description"], ghash, payload
            )
            if sel is not None and not any(nid in sel for _, nid in nodes):
                continue
            out.append(m)
    return out


def apply(match: TransformMatch, g: Graph) -> tuple[Graph, dict]:
    """Apply a fresh match: returns a new graph version plus a diff record.

    The certificate is re-established by recomputing the match list on the
    current graph — a display-then-apply workflow can hold matches
    indefinitely, but they only apply while the graph is unchanged and the
    legality argument still holds.
    """
    if match.name not in CATALOG:
        raise UnknownTransformError(f"unknown transformation {match.name!r}")
    if match.graph_hash != g.content_hash():
        raise StaleMatchError(
            f"match {match.match_id} was computed against graph version "
            f"{match.graph_hash}, but the graph is now {g.content_hash()}"
        )
    fresh = {m.match_id for m in find_matches(g, match.name)}
    if match.match_id not in fresh:
        raise StaleMatchError(
            f"certificate no longer holds for match {match.match_id}"
        )
    new_g = g.clone()
    before_nodes = {(st.name, nid) for st in new_g.states for nid in st.nodes}
    before_conts = {d.name for d in new_g.containers}
    CATALOG[match.name].applier(new_g, match)
    diags = ir.validate(new_g)
    if diags:
        raise TransformError(
            f"{match.name} produced an invalid graph: "
            + "; ".join(f"{d.rule}: {d.message}" for d in diags)
        )
    after_nodes = {(st.name, nid) for st in new_g.states for nid in st.nodes}
    after_conts = {d.name for d in new_g.containers}
    diff = {
        "transformation": match.name,
        "match_id": match.match_id,
        "added_nodes": sorted([s, n] for s, n in after_nodes - before_nodes),
        "removed_nodes": sorted([s, n] for s, n in before_nodes - after_nodes),
        "added_containers": sorted(after_conts - before_conts),
        "removed_containers": sorted(before_conts - after_conts),
    }
    return new_g, diff


# ---------------------------------------------------------------------------
# Shared analysis helpers


def _lib_inputs(state: State, nid: int) -> list[tuple[str, int]]:
    """(container, access id) per in connector, in connector order."""
    node = state.nodes[nid]
    by_conn = {}
    for e in state.in_edges(nid):
        src = state.nodes[e.src]
        if isinstance(src, AccessNode):
            by_conn[e.dst_conn] = (src.data, e.src)
    return [by_conn[c] for c in node.in_conns if c in by_conn]


def _writer_edges(g: Graph, name: str) -> list[tuple[State, Edge]]:
    out = []
    for st in g.states:
        for e in st.edges:
            dst = st.nodes[e.dst]
            if isinstance(dst, AccessNode) and dst.data == name:
                out.append((st, e))
    return out


def _lib_outputs(state: State, nid: int) -> list[tuple[str, int]]:
    node = state.nodes[nid]
    by_conn = {}
    for e in state.out_edges(nid):
        dst = state.nodes[e.dst]
        if isinstance(dst, AccessNode):
            by_conn[e.src_conn] = (dst.data, e.dst)
    return [by_conn[c] for c in node.out_conns if c in by_conn]


def _unit_of(state: State, nid: int, scope=None) -> int:
    scope = scope or state.scopes()
    chain = state.enclosing_maps(scope[nid])
    if chain:
        return chain[0]
    node = state.nodes[nid]
    if isinstance(node, MapExit):
        return node.entry
    return nid


def _top_scopes(state: State) -> list[int]:
    scope = state.scopes()
    return [
        nid
        for nid in state.topological()
        if isinstance(state.nodes[nid], MapEntry) and scope[nid] is None
    ]


def _subs_memlet(m: Optional[Memlet], mapping: Mapping[str, ScalarExpr],
                 data: Optional[str] = None,
                 subset: Optional[Subset] = None) -> Optional[Memlet]:
    if m is None:
        return None
    new_subset = subset if subset is not None else m.subset.substituted(mapping)
    other = m.other_subset.substituted(mapping) if m.other_subset else None
    return Memlet(
        data or m.data, new_subset, None, m.wcr, m.wcr_identity, m.dynamic, other
    )


def _subs_tasklet_body(t: Tasklet, mapping: Mapping[str, ScalarExpr]):
    t.body = {k: simplify(substitute(v, mapping)) for k, v in t.body.items()}


def _remove_read_chain(state: State, edge: Edge):
    """Remove a read edge and ascend through map entries, dropping connector
    pairs that no longer serve any inner edge."""
    state.remove_edge(edge)
    cur = edge
    while True:
        src = state.nodes.get(cur.src)
        if not isinstance(src, MapEntry):
            if isinstance(src, AccessNode) and state.degree(cur.src) == 0:
                state.remove_node(cur.src)
            return
        token = cur.src_conn
        if any(e.src_conn == token for e in state.out_edges(cur.src)):
            return  # other consumers still use this connector
        feeders = [
            e for e in state.in_edges(cur.src)
            if e.dst_conn == "in_" + token[len("out_"):]
        ]
        if not feeders:
            return
        nxt = feeders[0]
        state.remove_edge(nxt)
        cur = nxt


def _orphan_cleanup(state: State, g: Graph, names: Iterable[str]):
    """Drop degree-0 access nodes of the given containers, then drop the
    container descriptors that no state references any more."""
    for nid in sorted(
        [
            nid
            for nid, n in state.nodes.items()
            if isinstance(n, AccessNode) and n.data in set(names)
            and state.degree(nid) == 0
        ]
    ):
        state.remove_node(nid)
    for name in sorted(set(names)):
        desc = next((d for d in g.containers if d.name == name), None)
        if desc is None or desc.storage == "Global":
            continue
        used = any(
            isinstance(n, AccessNode) and n.data == name
            for st in g.states
            for n in st.nodes.values()
        )
        if not used:
            g.remove_container(name)
            g.constants.pop(name, None)


def _global_unit_order(g: Graph) -> list[tuple[str, int]]:
    """Top-level units across all states in execution order."""
    order = []
    for st in g.states:
        scope = st.scopes()
        seen = set()
        for nid in st.topological():
            u = _unit_of(st, nid, scope)
            if u not in seen and not isinstance(st.nodes[u], AccessNode):
                seen.add(u)
                order.append((st.name, u))
    return order


def _unit_containers(state: State, unit: int, scope) -> tuple[set, set]:
    """(reads, writes) of container names by one top-level unit."""
    node = state.nodes[unit]
    reads, writes = set(), set()
    if isinstance(node, MapEntry):
        members = set(state.scope_subgraph(unit))
        for e in state.in_edges(unit):
            src = state.nodes[e.src]
            if isinstance(src, AccessNode):
                reads.add(src.data)
        for e in state.out_edges(state.exit_of(unit)):
            dst = state.nodes[e.dst]
            if isinstance(dst, AccessNode):
                writes.add(dst.data)
        for nid in members:
            n2 = state.nodes[nid]
            if isinstance(n2, AccessNode):
                for e in state.in_edges(nid):
                    writes.add(n2.data)
                for e in state.out_edges(nid):
                    reads.add(n2.data)
    else:
        for e in state.in_edges(unit):
            src = state.nodes[e.src]
            if isinstance(src, AccessNode):
                reads.add(src.data)
        for e in state.out_edges(unit):
            dst = state.nodes[e.dst]
            if isinstance(dst, AccessNode):
                writes.add(dst.data)
    return reads, writes


def peak_transient_bytes(g: Graph, bindings: Optional[Mapping] = None) -> int:
    """Peak bytes of live Transient containers over the unit schedule
    (states in order, units in topological order)."""
    order = _global_unit_order(g)
    pos = {key: i for i, key in enumerate(order)}
    live: dict[str, tuple[int, int]] = {}
    for st in g.states:
        scope = st.scopes()
        for key_state, unit in order:
            if key_state != st.name:
                continue
            reads, writes = _unit_containers(st, unit, scope)
            i = pos[(st.name, unit)]
            for name in sorted(reads | writes):
                desc = next((d for d in g.containers if d.name == name), None)
                if desc is None or desc.storage != "Transient" or desc.constant:
                    continue
                b, e = live.get(name, (i, i))
                live[name] = (min(b, i), max(e, i))
    peak = 0
    for i in range(len(order)):
        cur = 0
        for name, (b, e) in live.items():
            if b <= i <= e:
                cur += g.container(name).total_bytes(bindings)
        peak = max(peak, cur)
    return peak


# ---------------------------------------------------------------------------
# constant_folding — evaluate subgraphs rooted at embedded constants


def _find_constant_folding(g: Graph) -> list[dict]:
    matches = []
    for st in g.states:
        known: set[str] = set()  # containers whose values fold at build time
        fold: list[int] = []
        names: list[str] = []
        for nid in st.topological():
            node = st.nodes[nid]
            if not isinstance(node, LibraryNode):
                continue
            ins = _lib_inputs(st, nid)
            if node.op == "Constant":
                pass  # no inputs; the value is embedded in the node
            elif not ins or not all(name in known for name, _ in ins):
                continue
            fold.append(nid)
            names.append(f"{node.op}:{node.name}")
            for name, _ in _lib_outputs(st, nid):
                known.add(name)
        if fold:
            matches.append(
                {
                    "nodes": [[st.name, nid] for nid in fold],
                    "certificate": (
                        "every input is produced by embedded constants; "
                        "evaluation at compile time cannot observe runtime data"
                    ),
                    "description": (
                        f"evaluate {len(fold)} constant node(s): "
                        + ", ".join(names)
                    ),
                    "payload": {"ops": names},
                }
            )
    return matches


def _apply_constant_folding(g: Graph, match: TransformMatch):
    from . import frontend

    by_state = {st.name: st for st in g.states}
    touched: list[str] = []
    for sname, nid in match.nodes:
        st = by_state[sname]
        node: LibraryNode = st.nodes[nid]
        ins = _lib_inputs(st, nid)
        arrays = [g.constants[name] for name, _ in ins]
        outs = frontend.reference_apply(node.op, node.attrs, arrays)
        for (name, access), value in zip(_lib_outputs(st, nid), outs):
            desc = g.container(name)
            desc.constant = True
            g.constants[name] = np.asarray(value).astype(
                ir.NUMPY_DTYPES[desc.dtype]
            )
        input_names = [name for name, _ in ins]
        st.remove_node(nid)
        touched.extend(input_names)
    _orphan_cleanup(by_state[match.nodes[0][0]], g, touched)


register_transformation(
    "constant_folding",
    _find_constant_folding,
    _apply_constant_folding,
    "Evaluate the maximal subgraph fed only by embedded constants and "
    "replace it with constant containers.",
)


# ---------------------------------------------------------------------------
# input_to_constant — inline small constants into attributes or bodies


_SCALAR_ATTR = {"Pow": "exponent", "Div": "divisor"}


def _find_input_to_constant(g: Graph) -> list[dict]:
    matches = []
    for st in g.states:
        scope = st.scopes()
        for nid in st.topological():
            node = st.nodes[nid]
            if isinstance(node, LibraryNode) and node.op in _SCALAR_ATTR:
                ins = _lib_inputs(st, nid)
                if len(ins) != 2:
                    continue
                name, access = ins[1]
                if name not in g.constants:
                    continue
                value = g.constants[name]
                if value.size != 1:
                    continue
                matches.append(
                    {
                        "nodes": [[st.name, nid], [st.name, access]],
                        "certificate": (
                            f"{name} is a one-element constant; the operator "
                            "takes it as an attribute"
                        ),
                        "description": (
                            f"fold constant {name} (= {float(value.reshape(-1)[0])!r}) "
                            f"into {node.op} attribute {_SCALAR_ATTR[node.op]!r}"
                        ),
                        "payload": {"mode": "attr"},
                    }
                )
            elif isinstance(node, Tasklet):
                for e in sorted(
                    st.in_edges(nid),
                    key=lambda e: (
                        node.inputs.index(e.dst_conn)
                        if e.dst_conn in node.inputs else len(node.inputs)
                    ),
                ):
                    if e.memlet is None:
                        continue
                    try:
                        cont, inner = _resolve_read_static(st, e)
                    except TransformError:
                        continue
                    if cont not in g.constants:
                        continue
                    value = g.constants[cont]
                    if value.size > 64:
                        continue
                    begins = inner.memlet.subset.begins()
                    if any(free_symbols(b) for b in begins):
                        continue  # element choice depends on map parameters
                    idx = tuple(int(evaluate(b)) for b in begins)
                    lit = float(value[idx]) if value.shape else float(value)
                    matches.append(
                        {
                            "nodes": [[st.name, nid]],
                            "certificate": (
                                f"{cont} is constant with {value.size} <= 64 "
                                "elements and the read element is fixed"
                            ),
                            "description": (
                                f"inline {cont}[{','.join(map(str, idx))}] = {lit!r} "
                                f"into tasklet {node.name!r} input {e.dst_conn!r}"
                            ),
                            "payload": {
                                "mode": "literal",
                                "conn": e.dst_conn,
                                "literal": lit,
                            },
                        }
                    )
    return matches


def _resolve_read_static(state: State, e: Edge):
    """Like the interpreter's read resolution: ascend to the source access
    node; returns (container, innermost edge)."""
    inner = e
    while True:
        src = state.nodes[e.src]
        if isinstance(src, AccessNode):
            return src.data, inner
        if isinstance(src, MapEntry):
            token = e.src_conn[len("out_"):]
            prev = [
                pe for pe in state.in_edges(e.src) if pe.dst_conn == "in_" + token
            ]
            if not prev:
                raise TransformError(f"unwired connector {e.src_conn}")
            e = prev[0]
        else:
            raise TransformError("read does not originate at an access node")


def _apply_input_to_constant(g: Graph, match: TransformMatch):
    st = next(s for s in g.states if s.name == match.nodes[0][0])
    nid = match.nodes[0][1]
    node = st.nodes[nid]
    if match.payload["mode"] == "attr":
        ins = _lib_inputs(st, nid)
        name, access = ins[1]
        value = float(g.constants[name].reshape(-1)[0])
        node.attrs[_SCALAR_ATTR[node.op]] = value
        for e in list(st.in_edges(nid)):
            if e.dst_conn == node.in_conns[1]:
                st.remove_edge(e)
        node.in_conns = node.in_conns[:1]
        _orphan_cleanup(st, g, [name])
        return
    conn = match.payload["conn"]
    lit = Const(match.payload["literal"])
    edge = next(e for e in st.in_edges(nid) if e.dst_conn == conn)
    cont, _ = _resolve_read_static(st, edge)
    node.body = {
        k: simplify(substitute(v, {conn: lit})) for k, v in node.body.items()
    }
    node.inputs = tuple(c for c in node.inputs if c != conn)
    _remove_read_chain(st, edge)
    _orphan_cleanup(st, g, [cont])


register_transformation(
    "input_to_constant",
    _find_input_to_constant,
    _apply_input_to_constant,
    "Inline one-element constants into operator attributes and small fixed "
    "constant reads into tasklet bodies as literals.",
)


# ---------------------------------------------------------------------------
# einsum_vertical_fusion — compose a producer einsum into its consumer


def _compose_einsum(eq_p: str, eq_c: str, pos: int) -> Optional[str]:
    """Splice producer equation eq_p into operand `pos` of consumer eq_c.
    Returns the composed equation, or None when no valid renaming exists."""
    from .frontend import parse_einsum, ShapeError

    try:
        terms_p, out_p = parse_einsum(eq_p, eq_p.split("->")[0].count(",") + 1)
        terms_c, out_c = parse_einsum(eq_c, eq_c.split("->")[0].count(",") + 1)
    except ShapeError:
        return None
    t_c = terms_c[pos]
    if len(t_c) != len(out_p):
        return None
    mapping: dict[str, str] = {}
    for a, b in zip(out_p, t_c):
        if mapping.setdefault(a, b) != b:
            return None  # producer repeats an output letter inconsistently
    used = set("".join(terms_c) + out_c) | set(mapping.values())
    pool = [c for c in "abcdefghijklmnopqrstuvwxyz" if c not in used]
    for letter in sorted({c for t in terms_p for c in t} - set(out_p)):
        if not pool:
            return None  # alphabet exhausted
        mapping[letter] = pool.pop(0)
    new_terms_p = ["".join(mapping[c] for c in t) for t in terms_p]
    new_terms = terms_c[:pos] + new_terms_p + terms_c[pos + 1:]
    composed = ",".join(new_terms) + "->" + out_c
    try:
        parse_einsum(composed, len(new_terms))
    except ShapeError:
        return None
    return composed


def _find_einsum_vertical_fusion(g: Graph) -> list[dict]:
    matches = []
    for st in g.states:
        for nid in st.topological():
            node = st.nodes[nid]
            if not isinstance(node, LibraryNode) or node.op != "Einsum":
                continue
            outs = _lib_outputs(st, nid)
            if len(outs) != 1:
                continue
            t_name, t_access = outs[0]
            desc = g.container(t_name)
            if desc.storage != "Transient" or desc.constant or desc.stash:
                continue
            # T is read exactly once, by another Einsum in this state.
            read_edges = [
                (s2, e)
                for s2 in g.states
                for e in s2.edges
                if e.memlet is not None and e.memlet.data == t_name
                and isinstance(s2.nodes[e.src], AccessNode)
                and s2.nodes[e.src].data == t_name
            ]
            if len(read_edges) != 1 or read_edges[0][0] is not st:
                continue
            consumer_edge = read_edges[0][1]
            cid = consumer_edge.dst
            consumer = st.nodes.get(cid)
            if not isinstance(consumer, LibraryNode) or consumer.op != "Einsum":
                continue
            positions = [
                k for k, (n2, _) in enumerate(_lib_inputs(st, cid)) if n2 == t_name
            ]
            if len(positions) != 1:
                continue
            composed = _compose_einsum(
                node.attrs["equation"], consumer.attrs["equation"], positions[0]
            )
            if composed is None:
                continue
            matches.append(
                {
                    "nodes": [[st.name, nid], [st.name, cid], [st.name, t_access]],
                    "certificate": (
                        f"{t_name} is a transient consumed once; contraction "
                        "sums distribute, so splicing the producer's terms "
                        "into the consumer computes the same tensor"
                    ),
                    "description": (
                        f"compose einsum {node.attrs['equation']!r} into "
                        f"{consumer.attrs['equation']!r} as {composed!r}"
                    ),
                    "payload": {"position": positions[0], "equation": composed},
                }
            )
    return matches


def _apply_einsum_vertical_fusion(g: Graph, match: TransformMatch):
    st = next(s for s in g.states if s.name == match.nodes[0][0])
    pid, cid = match.nodes[0][1], match.nodes[1][1]
    producer: LibraryNode = st.nodes[pid]
    consumer: LibraryNode = st.nodes[cid]
    pos = match.payload["position"]
    p_ins = _lib_inputs(st, pid)
    c_ins = _lib_inputs(st, cid)
    t_name = _lib_outputs(st, pid)[0][0]
    new_inputs = c_ins[:pos] + p_ins + c_ins[pos + 1:]
    for e in list(st.in_edges(cid)):
        st.remove_edge(e)
    consumer.attrs["equation"] = match.payload["equation"]
    consumer.in_conns = tuple(f"in_{k}" for k in range(len(new_inputs)))
    for k, (name, access) in enumerate(new_inputs):
        st.add_edge(
            access, None, cid, f"in_{k}",
            Memlet(name, Subset.full(g.container(name).shape)),
        )
    st.remove_node(pid)
    _orphan_cleanup(st, g, [t_name])


register_transformation(
    "einsum_vertical_fusion",
    _find_einsum_vertical_fusion,
    _apply_einsum_vertical_fusion,
    "Compose a single-use producer einsum (including pure permutations) "
    "into its consuming einsum's subscripts.",
)


# ---------------------------------------------------------------------------
# lift_layernorm — recognize the exported normalization chain


def _single_consumer(g: Graph, st: State, name: str) -> Optional[int]:
    """The unique node consuming container `name`, or None."""
    consumers = []
    for s2 in g.states:
        for e in s2.edges:
            src = s2.nodes[e.src]
            if isinstance(src, AccessNode) and src.data == name:
                if s2 is not st:
                    return None
                consumers.append(e.dst)
    return consumers[0] if len(consumers) == 1 else None


def _consumers(st: State, name: str) -> list[int]:
    out = []
    for e in st.edges:
        src = st.nodes[e.src]
        if isinstance(src, AccessNode) and src.data == name:
            out.append(e.dst)
    return sorted(set(out))


def _is_last_axis_mean(g: Graph, st: State, nid) -> bool:
    node = st.nodes.get(nid)
    if not isinstance(node, LibraryNode) or node.op != "ReduceMean":
        return False
    in_name = _lib_inputs(st, nid)[0][0]
    rank = len(g.container(in_name).shape)
    axes = node.attrs.get("axes")
    if axes is None:
        return rank == 1
    axes = [a % rank for a in (axes if isinstance(axes, list) else [axes])]
    return axes == [rank - 1] and bool(node.attrs.get("keepdims", 1))


def _scalar_const(g: Graph, name: str) -> Optional[float]:
    if name in g.constants and g.constants[name].size == 1:
        return float(g.constants[name].reshape(-1)[0])
    return None


def _find_lift_layernorm(g: Graph) -> list[dict]:
    matches = []
    for st in g.states:
        for nid in st.topological():
            chain = _match_layernorm_chain(g, st, nid)
            if chain is not None:
                matches.append(chain)
    return matches


def _match_layernorm_chain(g: Graph, st: State, m1) -> Optional[dict]:
    if not _is_last_axis_mean(g, st, m1):
        return None
    node_m1: LibraryNode = st.nodes[m1]
    x_name = _lib_inputs(st, m1)[0][0]
    mean_name = _lib_outputs(st, m1)[0][0]
    sub = _single_consumer(g, st, mean_name)
    node_sub = st.nodes.get(sub) if sub is not None else None
    if not isinstance(node_sub, LibraryNode) or node_sub.op != "Sub":
        return None
    sub_ins = [n for n, _ in _lib_inputs(st, sub)]
    if sub_ins != [x_name, mean_name]:
        return None
    d_name = _lib_outputs(st, sub)[0][0]
    d_consumers = _consumers(st, d_name)
    if len(d_consumers) != 2:
        return None
    # One consumer squares d, the other divides it by the std-dev.
    sq = div = None
    for c in d_consumers:
        n = st.nodes[c]
        if not isinstance(n, LibraryNode):
            return None
        ins = [x for x, _ in _lib_inputs(st, c)]
        if n.op == "Pow" and n.attrs.get("exponent") == 2.0 and ins == [d_name]:
            sq = c
        elif n.op == "Mul" and ins == [d_name, d_name]:
            sq = c
        elif n.op == "Div" and ins and ins[0] == d_name:
            div = c
    if sq is None or div is None:
        return None
    sq_name = _lib_outputs(st, sq)[0][0]
    m2 = _single_consumer(g, st, sq_name)
    if m2 is None or not _is_last_axis_mean(g, st, m2):
        return None
    var_name = _lib_outputs(st, m2)[0][0]
    add_eps = _single_consumer(g, st, var_name)
    node_add = st.nodes.get(add_eps) if add_eps is not None else None
    if not isinstance(node_add, LibraryNode) or node_add.op != "Add":
        return None
    add_ins = [n for n, _ in _lib_inputs(st, add_eps)]
    eps = None
    for cand in add_ins:
        if cand != var_name:
            eps = _scalar_const(g, cand)
            eps_name = cand
    if eps is None or var_name not in add_ins:
        return None
    veps_name = _lib_outputs(st, add_eps)[0][0]
    sqrt = _single_consumer(g, st, veps_name)
    node_sqrt = st.nodes.get(sqrt) if sqrt is not None else None
    if not isinstance(node_sqrt, LibraryNode) or node_sqrt.op != "Sqrt":
        return None
    std_name = _lib_outputs(st, sqrt)[0][0]
    if _single_consumer(g, st, std_name) != div:
        return None
    div_ins = [n for n, _ in _lib_inputs(st, div)]
    if div_ins != [d_name, std_name]:
        return None
    norm_name = _lib_outputs(st, div)[0][0]
    mul = _single_consumer(g, st, norm_name)
    node_mul = st.nodes.get(mul) if mul is not None else None
    if not isinstance(node_mul, LibraryNode) or node_mul.op != "Mul":
        return None
    mul_ins = [n for n, _ in _lib_inputs(st, mul)]
    gamma = next((n for n in mul_ins if n != norm_name), None)
    if gamma is None:
        return None
    scaled_name = _lib_outputs(st, mul)[0][0]
    addb = _single_consumer(g, st, scaled_name)
    node_addb = st.nodes.get(addb) if addb is not None else None
    if not isinstance(node_addb, LibraryNode) or node_addb.op != "Add":
        return None
    addb_ins = [n for n, _ in _lib_inputs(st, addb)]
    beta = next((n for n in addb_ins if n != scaled_name), None)
    if beta is None:
        return None
    y_name = _lib_outputs(st, addb)[0][0]
    last = g.container(x_name).shape[-1]
    for p in (gamma, beta):
        shp = g.container(p).shape
        if len(shp) != 1 or not expr_equal(shp[0], last):
            return None
    nodes = [m1, sub, sq, m2, add_eps, sqrt, div, mul, addb]
    return {
        "nodes": [[st.name, n] for n in nodes],
        "certificate": (
            "the chain mean/center/square/mean/add-eps/sqrt/divide/scale/"
            "shift over the last axis is exactly layer normalization with "
            f"epsilon {eps!r}"
        ),
        "description": (
            f"replace the 9-node normalization chain on {x_name!r} with one "
            f"LayerNormalization node (epsilon={eps!r})"
        ),
        "payload": {
            "x": x_name, "gamma": gamma, "beta": beta, "y": y_name,
            "epsilon": eps, "eps_container": eps_name,
            "intermediates": sorted({
                mean_name, d_name, sq_name, var_name, veps_name, std_name,
                norm_name, scaled_name,
            }),
        },
    }


def _apply_lift_layernorm(g: Graph, match: TransformMatch):
    st = next(s for s in g.states if s.name == match.nodes[0][0])
    p = match.payload
    for _, nid in match.nodes:
        st.remove_node(nid)

    def access_for(name: str) -> int:
        for nid, n in sorted(st.nodes.items()):
            if isinstance(n, AccessNode) and n.data == name:
                return nid
        return st.add_access(name)

    ln = st.add_node(
        LibraryNode(
            "LayerNormalization",
            g.fresh_name("layernorm"),
            {"axis": -1, "epsilon": p["epsilon"], "stash_mean": 1},
            ("in_0", "in_1", "in_2"),
            ("out_0",),
        )
    )
    # Re-derive attrs through the registry so defaults stay canonical.
    from . import frontend

    st.nodes[ln].attrs = frontend.normalize_attrs(
        frontend.get_op("LayerNormalization"),
        {"axis": -1, "epsilon": p["epsilon"]},
    )
    for k, name in enumerate((p["x"], p["gamma"], p["beta"])):
        st.add_edge(
            access_for(name), None, ln, f"in_{k}",
            Memlet(name, Subset.full(g.container(name).shape)),
        )
    st.add_edge(
        ln, "out_0", access_for(p["y"]), None,
        Memlet(p["y"], Subset.full(g.container(p["y"]).shape)),
    )
    _orphan_cleanup(st, g, p["intermediates"] + [p["eps_container"]])


register_transformation(
    "lift_layernorm",
    _find_lift_layernorm,
    _apply_lift_layernorm,
    "Detect the exported mean/center/square/mean/epsilon/sqrt/divide/scale/"
    "shift chain over the last axis and replace it with one "
    "LayerNormalization node.",
)


# ---------------------------------------------------------------------------
# redundant_copy_elimination


def _full_copy(g: Graph, e: Edge) -> bool:
    if e.memlet is None or e.memlet.wcr is not None:
        return False
    src_desc = g.container(e.memlet.data)
    full = Subset.full(src_desc.shape)
    if e.memlet.subset.rank != full.rank:
        return False
    for (b1, e1, s1), (b2, e2, s2) in zip(e.memlet.subset.dims, full.dims):
        if not (expr_equal(b1, b2) and expr_equal(e1, e2) and expr_equal(s1, s2)):
            return False
    if e.memlet.other_subset is not None:
        o = e.memlet.other_subset
        if o.rank != full.rank:
            return False
        for (b1, e1, s1), (b2, e2, s2) in zip(o.dims, full.dims):
            if not (expr_equal(b1, b2) and expr_equal(e1, e2) and expr_equal(s1, s2)):
                return False
    return True


def _find_redundant_copy_elimination(g: Graph) -> list[dict]:
    matches = []
    for si, st in enumerate(g.states):
        scope = st.scopes()
        for e in st.edges:
            src, dst = st.nodes[e.src], st.nodes[e.dst]
            if not (isinstance(src, AccessNode) and isinstance(dst, AccessNode)):
                continue
            if scope[e.src] is not None or scope[e.dst] is not None:
                continue
            a_name, b_name = src.data, dst.data
            if a_name == b_name:
                continue
            a_desc, b_desc = g.container(a_name), g.container(b_name)
            if len(a_desc.shape) != len(b_desc.shape) or not all(
                expr_equal(x, y) for x, y in zip(a_desc.shape, b_desc.shape)
            ):
                continue
            if a_desc.dtype != b_desc.dtype or not _full_copy(g, e):
                continue
            if b_desc.storage != "Transient" or b_desc.constant or b_desc.stash:
                continue
            if len(_writer_edges(g, b_name)) != 1:
                continue
            # A must not change between the copy and B's reads: it is never
            # written after this state, and in this state only upstream of
            # the copy's source access node.
            later = any(
                isinstance(s2.nodes[we.dst], AccessNode)
                for s2 in g.states[si + 1:]
                for we in s2.edges
                if we.memlet is not None
                and isinstance(s2.nodes[we.dst], AccessNode)
                and s2.nodes[we.dst].data == a_name
            )
            if later:
                continue
            here = [
                we for s2, we in _writer_edges(g, a_name) if s2 is st
            ]
            order = {nid: k for k, nid in enumerate(st.topological())}
            if any(order[we.dst] > order[e.src] for we in here):
                continue
            matches.append(
                {
                    "nodes": [[st.name, e.src], [st.name, e.dst]],
                    "certificate": (
                        f"{b_name} is a transient written only by this full "
                        f"copy, and {a_name} is not modified afterwards"
                    ),
                    "description": (
                        f"collapse copy {a_name} -> {b_name}; readers of "
                        f"{b_name} read {a_name} directly"
                    ),
                    "payload": {"src": a_name, "dst": b_name},
                }
            )
    return matches


def _apply_redundant_copy_elimination(g: Graph, match: TransformMatch):
    st = next(s for s in g.states if s.name == match.nodes[0][0])
    a_id, b_id = match.nodes[0][1], match.nodes[1][1]
    a_name, b_name = match.payload["src"], match.payload["dst"]
    copy_edge = next(
        e for e in st.out_edges(a_id) if e.dst == b_id and e.memlet is not None
    )
    st.remove_edge(copy_edge)
    # Redirect reads of B (any state) to A.
    for s2 in g.states:
        for nid, n in sorted(s2.nodes.items()):
            if isinstance(n, AccessNode) and n.data == b_name:
                n.data = a_name
        for e in s2.edges:
            if e.memlet is not None and e.memlet.data == b_name:
                e.memlet.data = a_name
    # Merge the duplicate access node in this state.
    for e in list(st.out_edges(b_id)):
        st.add_edge(a_id, e.src_conn, e.dst, e.dst_conn, e.memlet)
        st.remove_edge(e)
    for e in list(st.in_edges(b_id)):
        st.add_edge(e.src, e.src_conn, a_id, e.dst_conn, e.memlet)
        st.remove_edge(e)
    st.remove_node(b_id)
    g.remove_container(b_name)


register_transformation(
    "redundant_copy_elimination",
    _find_redundant_copy_elimination,
    _apply_redundant_copy_elimination,
    "Collapse a full access-to-access copy into one container when the "
    "copy target is a single-writer transient.",
)


# ---------------------------------------------------------------------------
# reduce_expansion


def _find_reduce_expansion(g: Graph) -> list[dict]:
    matches = []
    for st in g.states:
        for nid in st.topological():
            node = st.nodes[nid]
            if isinstance(node, LibraryNode) and node.op == "Reduce":
                if node.attrs.get("implementation") == "reference-only":
                    continue
                matches.append(
                    {
                        "nodes": [[st.name, nid]],
                        "certificate": (
                            "a Reduce library node always expands to a map "
                            "with a write-conflict-resolving memlet"
                        ),
                        "description": (
                            f"expand {node.attrs['op']}-reduction "
                            f"{node.name!r} into a {node.attrs['op']}-WCR map"
                        ),
                        "payload": {"op": node.attrs["op"]},
                    }
                )
    return matches


def _apply_reduce_expansion(g: Graph, match: TransformMatch):
    st = next(s for s in g.states if s.name == match.nodes[0][0])
    lowering.expand(g, st, match.nodes[0][1], validate=False)


register_transformation(
    "reduce_expansion",
    _find_reduce_expansion,
    _apply_reduce_expansion,
    "Expand a Reduce library node into a map whose output memlet carries a "
    "sum/max write-conflict resolution, making it fusible.",
)


# ---------------------------------------------------------------------------
# dead_dataflow_elimination


def _dead_nodes(g: Graph) -> list[tuple[str, int]]:
    dead: list[tuple[str, int]] = []
    live_containers = {
        d.name for d in g.containers if d.storage == "Global" or d.stash
    }
    for st in reversed(g.states):
        # Roots: access nodes that write a live container.
        keep: set[int] = set()
        roots = [
            nid
            for nid, n in st.nodes.items()
            if isinstance(n, AccessNode)
            and n.data in live_containers
            and st.in_edges(nid)
        ]
        stack = list(roots)
        keep.update(roots)
        while stack:
            cur = stack.pop()
            for e in st.in_edges(cur):
                if e.src not in keep:
                    keep.add(e.src)
                    stack.append(e.src)
        # Map entries of kept exits (and vice versa) stay paired.
        changed = True
        while changed:
            changed = False
            for nid, n in st.nodes.items():
                if nid in keep:
                    continue
                if isinstance(n, MapEntry) and st.exit_of(nid) in keep:
                    keep.add(nid)
                    changed = True
                elif isinstance(n, MapExit) and n.entry in keep:
                    keep.add(nid)
                    changed = True
            if changed:
                stack = [n for n in keep]
                while stack:
                    cur = stack.pop()
                    for e in st.in_edges(cur):
                        if e.src not in keep:
                            keep.add(e.src)
                            stack.append(e.src)
        for nid in sorted(st.nodes):
            if nid not in keep:
                dead.append((st.name, nid))
        for nid in keep:
            n = st.nodes[nid]
            if isinstance(n, AccessNode) and st.out_edges(nid):
                live_containers.add(n.data)
    return sorted(dead)


def _find_dead_dataflow_elimination(g: Graph) -> list[dict]:
    dead = _dead_nodes(g)
    if not dead:
        return []
    return [
        {
            "nodes": [[s, n] for s, n in dead],
            "certificate": (
                "no path leads from these nodes to any externally visible "
                "container"
            ),
            "description": f"remove {len(dead)} node(s) with no live output",
            "payload": {},
        }
    ]


def _apply_dead_dataflow_elimination(g: Graph, match: TransformMatch):
    names: set[str] = set()
    for sname, nid in match.nodes:
        st = next(s for s in g.states if s.name == sname)
        node = st.nodes.get(nid)
        if node is None:
            continue
        if isinstance(node, AccessNode):
            names.add(node.data)
        st.remove_node(nid)
    for st in g.states:
        _orphan_cleanup(st, g, names)
    for name in sorted(names):
        desc = next((d for d in g.containers if d.name == name), None)
        if desc is None or desc.storage == "Global" or desc.stash:
            continue
        used = any(
            isinstance(n, AccessNode) and n.data == name
            for st in g.states
            for n in st.nodes.values()
        )
        if not used:
            g.remove_container(name)
            g.constants.pop(name, None)


register_transformation(
    "dead_dataflow_elimination",
    _find_dead_dataflow_elimination,
    _apply_dead_dataflow_elimination,
    "Remove nodes from which no externally visible container is reachable.",
)


# ---------------------------------------------------------------------------
# trivial_map_elimination


def _find_trivial_map_elimination(g: Graph) -> list[dict]:
    matches = []
    for st in g.states:
        scope = st.scopes()
        for nid in st.topological():
            node = st.nodes[nid]
            if not isinstance(node, MapEntry):
                continue
            zero = [
                i for i in range(node.ranges.rank)
                if expr_equal(node.ranges.dim_extent(i), Const(0))
            ]
            unit = [
                i for i in range(node.ranges.rank)
                if expr_equal(node.ranges.dim_extent(i), Const(1))
            ]
            if zero:
                wcr = any(
                    e.memlet is not None and e.memlet.wcr is not None
                    for e in st.out_edges(st.exit_of(nid))
                )
                if wcr or scope[nid] is not None:
                    continue  # deleting would change reduction init effects
                matches.append(
                    {
                        "nodes": [[st.name, nid]],
                        "certificate": (
                            "the iteration domain is empty and all writes "
                            "are plain, so the scope computes nothing"
                        ),
                        "description": (
                            f"delete empty map {node.label!r} "
                            f"(extent 0 in dimension {zero[0]})"
                        ),
                        "payload": {"kind": "zero"},
                    }
                )
            elif unit:
                matches.append(
                    {
                        "nodes": [[st.name, nid]],
                        "certificate": (
                            "dimensions of extent 1 bind their parameter to "
                            "a single value; dropping them preserves every "
                            "access"
                        ),
                        "description": (
                            f"drop {len(unit)} unit dimension(s) from map "
                            f"{node.label!r}"
                            + ("" if len(unit) < node.ranges.rank
                               else " and dissolve it")
                        ),
                        "payload": {"kind": "unit", "dims": unit},
                    }
                )
    return matches


def _dissolve_map(st: State, entry_id: int):
    """Remove a zero-rank map pair, connecting inner edges directly."""
    exit_id = st.exit_of(entry_id)
    for e_out in list(st.out_edges(entry_id)):
        token = e_out.src_conn[len("out_"):] if e_out.src_conn else None
        feeders = [
            fe for fe in st.in_edges(entry_id)
            if fe.dst_conn == (f"in_{token}" if token else None)
        ]
        if feeders:
            fe = feeders[0]
            st.add_edge(fe.src, fe.src_conn, e_out.dst, e_out.dst_conn, e_out.memlet)
    for e_in in list(st.in_edges(exit_id)):
        token = e_in.dst_conn[len("in_"):] if e_in.dst_conn else None
        outs = [
            oe for oe in st.out_edges(exit_id)
            if oe.src_conn == (f"out_{token}" if token else None)
        ]
        if outs:
            oe = outs[0]
            st.add_edge(e_in.src, e_in.src_conn, oe.dst, oe.dst_conn, e_in.memlet)
    st.remove_node(entry_id)
    st.remove_node(exit_id)


def _apply_trivial_map_elimination(g: Graph, match: TransformMatch):
    st = next(s for s in g.states if s.name == match.nodes[0][0])
    entry_id = match.nodes[0][1]
    entry: MapEntry = st.nodes[entry_id]
    if match.payload["kind"] == "zero":
        names = set()
        for nid in st.scope_subgraph(entry_id):
            n = st.nodes[nid]
            if isinstance(n, AccessNode):
                names.add(n.data)
        for e in st.in_edges(entry_id):
            src = st.nodes[e.src]
            if isinstance(src, AccessNode):
                names.add(src.data)
        exit_id = st.exit_of(entry_id)
        for nid in sorted(st.scope_subgraph(entry_id), reverse=True):
            st.remove_node(nid)
        st.remove_node(exit_id)
        st.remove_node(entry_id)
        _orphan_cleanup(st, g, names)
        return
    dims = set(match.payload["dims"])
    mapping = {
        entry.params[i]: simplify(entry.ranges.dims[i][0]) for i in dims
    }
    keep = [i for i in range(entry.ranges.rank) if i not in dims]
    members = set(st.scope_subgraph(entry_id)) | {entry_id}
    for e in st.edges:
        if e.src in members or e.dst in members:
            e.memlet = _subs_memlet(e.memlet, mapping)
    for nid in members:
        n = st.nodes[nid]
        if isinstance(n, Tasklet):
            _subs_tasklet_body(n, mapping)
        elif isinstance(n, MapEntry) and nid != entry_id:
            n.ranges = n.ranges.substituted(mapping)
    if keep:
        entry.params = tuple(entry.params[i] for i in keep)
        entry.ranges = Subset(tuple(entry.ranges.dims[i] for i in keep))
    else:
        _dissolve_map(st, entry_id)


register_transformation(
    "trivial_map_elimination",
    _find_trivial_map_elimination,
    _apply_trivial_map_elimination,
    "Drop unit-extent map dimensions; delete empty maps together with "
    "their dataflow.",
)


# ---------------------------------------------------------------------------
# transient_reuse


def _find_transient_reuse(g: Graph) -> list[dict]:
    order = _global_unit_order(g)
    pos = {key: i for i, key in enumerate(order)}
    spans: dict[str, tuple[int, int]] = {}
    for st in g.states:
        scope = st.scopes()
        units = {u for s, u in order if s == st.name}
        for u in units:
            reads, writes = _unit_containers(st, u, scope)
            i = pos[(st.name, u)]
            for name in reads | writes:
                desc = next((d for d in g.containers if d.name == name), None)
                if (
                    desc is None or desc.storage != "Transient"
                    or desc.constant or desc.stash or desc.lifetime != "State"
                ):
                    continue
                b, e = spans.get(name, (i, i))
                spans[name] = (min(b, i), max(e, i))
    names = sorted(spans)
    matches = []
    for i, n1 in enumerate(names):
        for n2 in names[i + 1:]:
            b1, e1 = spans[n1]
            b2, e2 = spans[n2]
            if e1 < b2 or e2 < b1:
                first, second = (n1, n2) if e1 < b2 else (n2, n1)
                d1, d2 = g.container(first), g.container(second)
                if d1.dtype != d2.dtype or len(d1.shape) != len(d2.shape):
                    continue
                if not all(expr_equal(a, b) for a, b in zip(d1.shape, d2.shape)):
                    continue
                access = [
                    [st.name, nid]
                    for st in g.states
                    for nid in sorted(st.nodes)
                    if isinstance(st.nodes[nid], AccessNode)
                    and st.nodes[nid].data in (first, second)
                ]
                matches.append(
                    {
                        "nodes": access,
                        "certificate": (
                            f"{first} dies before {second} is born (unit "
                            "schedule liveness) and both have identical "
                            "shape and dtype"
                        ),
                        "description": (
                            f"store {second} in {first}'s memory "
                            "(disjoint live ranges)"
                        ),
                        "payload": {"keep": first, "alias": second},
                    }
                )
    return matches


def _apply_transient_reuse(g: Graph, match: TransformMatch):
    keep, alias = match.payload["keep"], match.payload["alias"]
    for st in g.states:
        for n in st.nodes.values():
            if isinstance(n, AccessNode) and n.data == alias:
                n.data = keep
        for e in st.edges:
            if e.memlet is not None and e.memlet.data == alias:
                e.memlet.data = keep
    g.remove_container(alias)


register_transformation(
    "transient_reuse",
    _find_transient_reuse,
    _apply_transient_reuse,
    "Alias two same-shape transients whose live ranges do not overlap to "
    "one container, reducing peak memory.",
)


# ---------------------------------------------------------------------------
# init_hoisting


def _find_init_hoisting(g: Graph) -> list[dict]:
    matches = []
    for st in g.states:
        for nid in st.topological():
            node = st.nodes[nid]
            if not isinstance(node, MapEntry):
                continue
            exit_id = st.exit_of(nid)
            for k, e in enumerate(st.out_edges(exit_id)):
                m = e.memlet
                if m is None or m.wcr != "sum" or m.wcr_identity is not None:
                    continue
                dst = st.nodes[e.dst]
                if not isinstance(dst, AccessNode):
                    continue
                desc = g.container(dst.data)
                if desc.storage != "Transient" or desc.constant:
                    continue
                writers = _writer_edges(g, dst.data)
                others = [
                    (s2, we) for s2, we in writers if we is not e
                ]
                if others:
                    continue  # a prior writer's values would be clobbered
                matches.append(
                    {
                        "nodes": [[st.name, nid], [st.name, e.dst]],
                        "certificate": (
                            f"{dst.data} has no other writer, so front-"
                            "loading a zero initialization into the unit "
                            "matches its allocation semantics"
                        ),
                        "description": (
                            f"front-load the sum-reduction initialization of "
                            f"{dst.data!r} into map {node.label!r}"
                        ),
                        "payload": {"container": dst.data},
                    }
                )
    return matches


def _apply_init_hoisting(g: Graph, match: TransformMatch):
    st = next(s for s in g.states if s.name == match.nodes[0][0])
    entry_id = match.nodes[0][1]
    target = match.payload["container"]
    members = set(st.scope_subgraph(entry_id)) | {entry_id, st.exit_of(entry_id)}
    for e in st.edges:
        m = e.memlet
        if m is None or m.data != target or m.wcr != "sum":
            continue
        if e.src in members or e.dst in members:
            m.wcr_identity = 0.0


register_transformation(
    "init_hoisting",
    _find_init_hoisting,
    _apply_init_hoisting,
    "Attach the reduction identity to sum-WCR write paths so target "
    "initialization is front-loaded into the unit that accumulates.",
)


# ---------------------------------------------------------------------------
# map_flattening


def _find_map_flattening(g: Graph) -> list[dict]:
    matches = []
    for st in g.states:
        for nid in st.topological():
            node = st.nodes[nid]
            if not isinstance(node, MapEntry) or node.ranges.rank < 2:
                continue
            ok = True
            for b, e, s in node.ranges.dims:
                if not (
                    expr_equal(b, Const(0)) and expr_equal(s, Const(1))
                ):
                    ok = False
            if not ok:
                continue
            matches.append(
                {
                    "nodes": [[st.name, nid]],
                    "certificate": (
                        "all dimensions start at 0 with stride 1; row-major "
                        "delinearization via floordiv/mod reconstructs every "
                        "index bijectively"
                    ),
                    "description": (
                        f"flatten the {node.ranges.rank} dimensions of map "
                        f"{node.label!r} into one"
                    ),
                    "payload": {},
                }
            )
    return matches


def _apply_map_flattening(g: Graph, match: TransformMatch):
    st = next(s for s in g.states if s.name == match.nodes[0][0])
    entry_id = match.nodes[0][1]
    entry: MapEntry = st.nodes[entry_id]
    extents = [entry.ranges.dim_extent(i) for i in range(entry.ranges.rank)]
    flat = "fl0"
    taken = set(entry.params)
    while flat in taken:
        flat = "_" + flat
    total: ScalarExpr = Const(1)
    for e in extents:
        total = simplify(total * e)
    mapping: dict[str, ScalarExpr] = {}
    for i, p in enumerate(entry.params):
        expr: ScalarExpr = Sym(flat)
        trailing: ScalarExpr = Const(1)
        for j in range(i + 1, len(extents)):
            trailing = simplify(trailing * extents[j])
        if not expr_equal(trailing, Const(1)):
            expr = parse(f"floordiv({render(expr)}, {render(trailing)})")
        if i > 0:
            expr = parse(f"mod({render(expr)}, {render(extents[i])})")
        mapping[p] = simplify(expr)
    members = set(st.scope_subgraph(entry_id)) | {entry_id}
    for e in st.edges:
        if e.src in members or e.dst in members:
            e.memlet = _subs_memlet(e.memlet, mapping)
    for nid in members:
        n = st.nodes[nid]
        if isinstance(n, Tasklet):
            _subs_tasklet_body(n, mapping)
        elif isinstance(n, MapEntry) and nid != entry_id:
            n.ranges = n.ranges.substituted(mapping)
    entry.params = (flat,)
    entry.ranges = Subset.of([(0, total, 1)])


register_transformation(
    "map_flattening",
    _find_map_flattening,
    _apply_map_flattening,
    "Collapse a multi-dimensional map into one dimension, reconstructing "
    "indices with floordiv/mod, to coalesce accesses.",
)


# ---------------------------------------------------------------------------
# map_tiling


_TILE = 8


def _find_map_tiling(g: Graph) -> list[dict]:
    matches = []
    for st in g.states:
        scope = st.scopes()
        for nid in st.topological():
            node = st.nodes[nid]
            if not isinstance(node, MapEntry) or scope[nid] is not None:
                continue
            ok = all(
                expr_equal(b, Const(0)) and expr_equal(s, Const(1))
                for b, e, s in node.ranges.dims
            )
            if not ok:
                continue
            matches.append(
                {
                    "nodes": [[st.name, nid]],
                    "certificate": (
                        "a tile loop with a min() boundary extent partitions "
                        "each dimension exactly"
                    ),
                    "description": (
                        f"tile map {node.label!r} with tile size {_TILE} "
                        "(boundary handled by min())"
                    ),
                    "payload": {"tile": _TILE},
                }
            )
    return matches


def _apply_map_tiling(g: Graph, match: TransformMatch):
    st = next(s for s in g.states if s.name == match.nodes[0][0])
    entry_id = match.nodes[0][1]
    entry: MapEntry = st.nodes[entry_id]
    exit_id = st.exit_of(entry_id)
    t = int(match.payload["tile"])
    tile_params = tuple(f"{p}_t" for p in entry.params)
    outer_dims = []
    inner_dims = []
    mapping = {}
    for i, p in enumerate(entry.params):
        ext = entry.ranges.dim_extent(i)
        n_t = parse(f"floordiv({render(ext)} + {t - 1}, {t})")
        outer_dims.append((Const(0), simplify(n_t), Const(1)))
        inner_ext = parse(f"min({t}, {render(ext)} - {tile_params[i]} * {t})")
        inner_dims.append((Const(0), simplify(inner_ext), Const(1)))
        mapping[p] = parse(f"{tile_params[i]} * {t} + {p}")
    # Substitute indices inside the scope (hull edges on the entry/exit
    # boundary keep their container-level subsets).
    inner_members = set(st.scope_subgraph(entry_id))
    for e in st.edges:
        if e.src in inner_members or e.dst in inner_members:
            if e.src == exit_id or e.dst == entry_id:
                continue
            e.memlet = _subs_memlet(e.memlet, mapping)
    for nid in inner_members:
        n = st.nodes[nid]
        if isinstance(n, Tasklet):
            _subs_tasklet_body(n, mapping)
        elif isinstance(n, MapEntry):
            n.ranges = n.ranges.substituted(mapping)
    entry.ranges = Subset(tuple(inner_dims))
    oen, oex = st.add_map(entry.label + "_tiled", tile_params, Subset(tuple(outer_dims)))
    for e in list(st.in_edges(entry_id)):
        st.add_edge(e.src, e.src_conn, oen, e.dst_conn, e.memlet)
        st.add_edge(oen, "out_" + e.dst_conn[len("in_"):], entry_id, e.dst_conn,
                    Memlet(e.memlet.data, e.memlet.subset) if e.memlet else None)
        st.remove_edge(e)
    for e in list(st.out_edges(exit_id)):
        st.add_edge(oex, e.src_conn, e.dst, e.dst_conn, e.memlet)
        m2 = None
        if e.memlet is not None:
            m2 = Memlet(
                e.memlet.data, e.memlet.subset, None, e.memlet.wcr,
                e.memlet.wcr_identity, e.memlet.dynamic, e.memlet.other_subset
            )
        st.add_edge(exit_id, e.src_conn, oex, "in_" + e.src_conn[len("out_"):], m2)
        st.remove_edge(e)


register_transformation(
    "map_tiling",
    _find_map_tiling,
    _apply_map_tiling,
    "Partition a map's workload into tiles by nesting it under a tile "
    "loop; boundary tiles use a min() extent.",
)


# ---------------------------------------------------------------------------
# map_replication


def _find_map_replication(g: Graph) -> list[dict]:
    matches = []
    for st in g.states:
        scope = st.scopes()
        for nid in sorted(st.nodes):
            node = st.nodes[nid]
            if not isinstance(node, AccessNode) or scope[nid] is not None:
                continue
            desc = next(
                (d for d in g.containers if d.name == node.data), None
            )
            if (
                desc is None or desc.storage != "Transient"
                or desc.constant or desc.stash
            ):
                continue
            producers = {
                _unit_of(st, e.src, scope) for e in st.in_edges(nid)
            }
            if len(producers) != 1:
                continue
            producer = producers.pop()
            if not isinstance(st.nodes[producer], MapEntry):
                continue
            exit_writes = {
                st.nodes[e.dst].data
                for e in st.out_edges(st.exit_of(producer))
                if isinstance(st.nodes[e.dst], AccessNode)
            }
            if exit_writes != {node.data}:
                continue  # the producer must feed nothing else
            consumers = sorted(
                {_unit_of(st, e.dst, scope) for e in st.out_edges(nid)}
            )
            if len(consumers) < 2:
                continue
            # The container must not be visible elsewhere.
            other = any(
                isinstance(n2, AccessNode) and n2.data == node.data
                and (s2 is not st or nid2 != nid)
                for s2 in g.states
                for nid2, n2 in s2.nodes.items()
            )
            if other or desc.storage == "Global":
                continue
            matches.append(
                {
                    "nodes": [[st.name, nid], [st.name, producer]],
                    "certificate": (
                        f"{node.data} is produced by one map and read by "
                        f"{len(consumers)} units; each replica recomputes "
                        "the same pure dataflow"
                    ),
                    "description": (
                        f"replicate map {st.nodes[producer].label!r} per "
                        f"consumer of {node.data!r} ({len(consumers)} copies)"
                    ),
                    "payload": {"consumers": consumers},
                }
            )
    return matches


def _clone_scope(st: State, entry_id: int, label_suffix: str) -> dict[int, int]:
    """Deep-copy a top-level scope subgraph; returns old->new node ids.
    Boundary edges (outside access nodes) are not copied."""
    import copy as _copy

    members = [entry_id] + st.scope_subgraph(entry_id) + [st.exit_of(entry_id)]
    mapping: dict[int, int] = {}
    for nid in sorted(members):
        node = _copy.deepcopy(st.nodes[nid])
        if isinstance(node, (MapEntry, MapExit)):
            node.label = node.label + label_suffix
        new_id = st.add_node(node)
        mapping[nid] = new_id
    for nid, new_id in mapping.items():
        node = st.nodes[new_id]
        if isinstance(node, MapExit):
            node.entry = mapping[node.entry]
    inside = set(members)
    for e in list(st.edges):
        if e.src in inside and e.dst in inside:
            st.add_edge(
                mapping[e.src], e.src_conn, mapping[e.dst], e.dst_conn,
                _subs_memlet(e.memlet, {}),
            )
    return mapping


def _apply_map_replication(g: Graph, match: TransformMatch):
    st = next(s for s in g.states if s.name == match.nodes[0][0])
    access_id = match.nodes[0][1]
    producer = match.nodes[1][1]
    exit_id = st.exit_of(producer)
    name = st.nodes[access_id].data
    desc = g.container(name)
    consumers = match.payload["consumers"]
    for k, consumer in enumerate(consumers):
        if k == 0:
            continue  # the first consumer keeps the original
        suffix = f"__r{k}"
        new_name = g.fresh_name(name + suffix)
        g.add_container(
            new_name, desc.shape, desc.dtype, "Transient",
            lifetime=desc.lifetime,
        )
        mapping = _clone_scope(st, producer, suffix)
        replica_ids = set(mapping.values())
        new_access = st.add_access(new_name)
        # Replica boundary: inputs reuse the original access nodes.
        for e in st.in_edges(producer):
            st.add_edge(
                e.src, e.src_conn, mapping[producer], e.dst_conn,
                _subs_memlet(e.memlet, {}),
            )
        for e in st.out_edges(exit_id):
            if e.dst == access_id:
                st.add_edge(
                    mapping[exit_id], e.src_conn, new_access, e.dst_conn,
                    _subs_memlet(e.memlet, {}, data=new_name),
                )
        # Rename the replica's internal references to the new container.
        for e in st.edges:
            if (
                e.src in replica_ids or e.dst in replica_ids
            ) and e.memlet is not None and e.memlet.data == name:
                e.memlet.data = new_name
        # Retarget this consumer's reads.
        for e in list(st.out_edges(access_id)):
            if _unit_of(st, e.dst) == consumer:
                st.add_edge(new_access, e.src_conn, e.dst, e.dst_conn,
                            _subs_memlet(e.memlet, {}, data=new_name))
                st.remove_edge(e)
        # Rewrite memlets inside the consumer that referenced the original.
        cons_node = st.nodes[consumer]
        if isinstance(cons_node, MapEntry):
            cmembers = set(st.scope_subgraph(consumer)) | {consumer}
            for e in st.edges:
                if e.src in cmembers and e.dst in cmembers:
                    if e.memlet is not None and e.memlet.data == name:
                        e.memlet.data = new_name


register_transformation(
    "map_replication",
    _find_map_replication,
    _apply_map_replication,
    "Duplicate the map producing a multiply-read transient, one replica "
    "per consumer, so each consumer can fuse independently.",
)


# ---------------------------------------------------------------------------
# local_storage


def _find_local_storage(g: Graph) -> list[dict]:
    matches = []
    for st in g.states:
        scope = st.scopes()
        for outer_id in _top_scopes(st):
            for nid in st.scope_subgraph(outer_id):
                inner = st.nodes[nid]
                if not isinstance(inner, MapEntry) or scope[nid] != outer_id:
                    continue
                inner_params = set(inner.params)
                if any(
                    free_symbols(inner.ranges.dim_extent(i)) & _scope_params(st, outer_id)
                    for i in range(inner.ranges.rank)
                ):
                    continue
                # Containers read inside `inner` with separable indices.
                for conn in sorted(
                    {e.dst_conn for e in st.in_edges(nid) if e.dst_conn}
                ):
                    token = conn[len("in_"):]
                    try:
                        feeder = next(
                            e for e in st.in_edges(nid) if e.dst_conn == conn
                        )
                        cont, _ = _resolve_read_static(st, feeder)
                    except (StopIteration, TransformError):
                        continue
                    desc = g.container(cont)
                    if desc.storage == "Scoped":
                        continue
                    written_inside = any(
                        e.memlet is not None and e.memlet.data == cont
                        for e in st.in_edges(st.exit_of(nid))
                    )
                    if written_inside:
                        continue  # staging must not hide a same-scope write
                    reads = [
                        e for e in st.out_edges(nid)
                        if e.src_conn == f"out_{token}"
                        and e.memlet is not None and e.memlet.data == cont
                    ]
                    if not reads or not all(
                        isinstance(st.nodes[e.dst], Tasklet) for e in reads
                    ):
                        continue
                    sep = _separable_dims(reads[0].memlet.subset, inner_params)
                    if sep is None or not any(p is not None for p in sep):
                        continue
                    if any(
                        not _same_subset(e.memlet.subset, reads[0].memlet.subset)
                        for e in reads[1:]
                    ):
                        continue
                    matches.append(
                        {
                            "nodes": [[st.name, outer_id], [st.name, nid]],
                            "certificate": (
                                f"reads of {cont} inside map {inner.label!r} "
                                "separate into outer-fixed and inner-varying "
                                "dimensions; staging the inner footprint is "
                                "a pure copy"
                            ),
                            "description": (
                                f"stage {cont!r} into scope-local storage "
                                f"for map {inner.label!r}"
                            ),
                            "payload": {"container": cont, "conn": conn},
                        }
                    )
    return matches


def _scope_params(st: State, entry_id: int) -> set:
    return set(st.nodes[entry_id].params)


def _same_subset(a: Subset, b: Subset) -> bool:
    return a.rank == b.rank and all(
        expr_equal(x, y)
        for da, db in zip(a.dims, b.dims)
        for x, y in zip(da, db)
    )


def _separable_dims(subset: Subset, inner_params: set):
    """Per dim: the inner param name if the index is exactly one inner
    param, None if the index is free of inner params; reject mixtures."""
    out = []
    for b in subset.begins():
        syms = free_symbols(b)
        if not (syms & inner_params):
            out.append(None)
        elif isinstance(b, Sym) and b.name in inner_params:
            out.append(b.name)
        else:
            return None
    return out


def _apply_local_storage(g: Graph, match: TransformMatch):
    st = next(s for s in g.states if s.name == match.nodes[0][0])
    outer_id, inner_id = match.nodes[0][1], match.nodes[1][1]
    inner: MapEntry = st.nodes[inner_id]
    cont = match.payload["container"]
    conn = match.payload["conn"]
    token = conn[len("in_"):]
    reads = [
        e for e in st.out_edges(inner_id)
        if e.src_conn == f"out_{token}"
        and e.memlet is not None and e.memlet.data == cont
    ]
    sep = _separable_dims(reads[0].memlet.subset, set(inner.params))
    desc = g.container(cont)
    local_dims = [i for i, p in enumerate(sep) if p is not None]
    extent_of = {
        p: inner.ranges.dim_extent(k) for k, p in enumerate(inner.params)
    }
    local_shape = tuple(extent_of[sep[i]] for i in local_dims)
    local = g.fresh_name(cont + "_loc")
    g.add_container(local, local_shape, desc.dtype, "Scoped")
    a_loc = st.add_access(local)
    # Copy-in map: one fresh param per staged dimension.
    params = [f"c{k}" for k in range(len(local_dims))]
    ranges = [(0, extent_of[sep[i]], 1) for i in local_dims]
    cen, cex = st.add_map(f"stage_{cont}", params, ranges)
    src_idx = []
    for i, b in enumerate(reads[0].memlet.subset.begins()):
        if i in local_dims:
            src_idx.append(Sym(params[local_dims.index(i)]))
        else:
            src_idx.append(b)
    tl = st.add_node(
        Tasklet(f"stage_{cont}_t", ("v0",), ("o",), {"o": parse("v0")})
    )
    feeder = next(e for e in st.in_edges(inner_id) if e.dst_conn == conn)
    st.add_edge(feeder.src, feeder.src_conn, cen, "in_v",
                Memlet(cont, feeder.memlet.subset))
    st.add_edge(cen, "out_v", tl, "v0", Memlet(cont, Subset.index(src_idx)))
    st.add_edge(
        tl, "o", cex, "in_o",
        Memlet(local, Subset.index([Sym(p) for p in params])),
    )
    st.add_edge(cex, "out_o", a_loc, None, Memlet(local, Subset.full(local_shape)))
    # The inner map now reads the staged buffer.
    st.add_edge(a_loc, None, inner_id, conn, Memlet(local, Subset.full(local_shape)))
    st.remove_edge(feeder)
    for e in reads:
        idx = [
            Sym(sep[i]) for i in local_dims
        ]
        e.memlet = Memlet(local, Subset.index(idx))
    # Hull edges between nested inner entries (if any) were element reads
    # only at the innermost level here by construction.


register_transformation(
    "local_storage",
    _find_local_storage,
    _apply_local_storage,
    "Stage the inner-map footprint of an external container into scope-"
    "local storage via an explicit copy map.",
)


# ---------------------------------------------------------------------------
# tasklet_fusion


def _find_tasklet_fusion(g: Graph) -> list[dict]:
    matches = []
    for st in g.states:
        scope = st.scopes()
        for nid in st.topological():
            node = st.nodes[nid]
            if not isinstance(node, Tasklet) or len(node.outputs) != 1:
                continue
            outs = st.out_edges(nid)
            if len(outs) != 1:
                continue
            e1 = outs[0]
            mid = st.nodes[e1.dst]
            if isinstance(mid, Tasklet):
                if scope[nid] != scope[e1.dst]:
                    continue
                matches.append(_tasklet_fusion_match(st, nid, e1.dst, None))
                continue
            if not isinstance(mid, AccessNode):
                continue
            desc = g.container(mid.data)
            if desc.storage not in ("Transient", "Scoped") or desc.constant:
                continue
            if e1.memlet is None or e1.memlet.wcr is not None:
                continue
            mid_out = st.out_edges(e1.dst)
            if len(st.in_edges(e1.dst)) != 1 or len(mid_out) != 1:
                continue
            e2 = mid_out[0]
            consumer = st.nodes[e2.dst]
            if not isinstance(consumer, Tasklet):
                continue
            if scope[nid] != scope[e2.dst] or scope[nid] != scope[e1.dst]:
                continue
            if not _same_subset(e1.memlet.subset, e2.memlet.subset):
                continue
            others = any(
                isinstance(n2, AccessNode) and n2.data == mid.data and nid2 != e1.dst
                for s2 in g.states
                for nid2, n2 in s2.nodes.items()
            )
            if others:
                continue
            matches.append(_tasklet_fusion_match(st, nid, e2.dst, e1.dst))
    return [m for m in matches if m is not None]


def _tasklet_fusion_match(st: State, pid: int, cid: int, mid: Optional[int]):
    p: Tasklet = st.nodes[pid]
    c: Tasklet = st.nodes[cid]
    nodes = [[st.name, pid], [st.name, cid]]
    if mid is not None:
        nodes.append([st.name, mid])
    return {
        "nodes": nodes,
        "certificate": (
            f"tasklet {p.name!r} feeds only {c.name!r} at the same scope; "
            "substituting its expression is exact"
        ),
        "description": f"fuse tasklet {p.name!r} into {c.name!r}",
        "payload": {"via_access": mid is not None},
    }


def _apply_tasklet_fusion(g: Graph, match: TransformMatch):
    st = next(s for s in g.states if s.name == match.nodes[0][0])
    pid, cid = match.nodes[0][1], match.nodes[1][1]
    p: Tasklet = st.nodes[pid]
    c: Tasklet = st.nodes[cid]
    e1 = st.out_edges(pid)[0]
    removed_container = None
    if match.payload["via_access"]:
        mid = e1.dst
        e2 = st.out_edges(mid)[0]
        consumer_conn = e2.dst_conn
        removed_container = st.nodes[mid].data
        st.remove_node(mid)
    else:
        consumer_conn = e1.dst_conn
        st.remove_edge(e1)
    expr = p.body[p.outputs[0]]
    rename = {}
    for k, conn in enumerate(p.inputs):
        fresh = f"f{k}_{conn}"
        while fresh in c.inputs:
            fresh = "_" + fresh
        rename[conn] = fresh
    expr = substitute(expr, {old: Sym(new) for old, new in rename.items()})
    c.body = {
        k: simplify(substitute(v, {consumer_conn: expr}))
        for k, v in c.body.items()
    }
    c.inputs = tuple(x for x in c.inputs if x != consumer_conn) + tuple(
        rename[conn] for conn in p.inputs
    )
    for e in list(st.in_edges(pid)):
        st.add_edge(e.src, e.src_conn, cid, rename[e.dst_conn], e.memlet)
        st.remove_edge(e)
    st.remove_node(pid)
    if removed_container is not None:
        _orphan_cleanup(st, g, [removed_container])


register_transformation(
    "tasklet_fusion",
    _find_tasklet_fusion,
    _apply_tasklet_fusion,
    "Substitute a single-consumer tasklet's expression into its consumer, "
    "removing the intermediate value.",
)


# ---------------------------------------------------------------------------
# subgraph_fusion


@dataclass
class _FusionPlan:
    state: str
    scopes: list[int]  # entry ids, topological
    slots: list[ScalarExpr]  # extents per aligned slot
    slot_of: dict[int, dict[str, int]]  # entry -> param -> slot
    common: list[int]  # slot indices in every scope, visibility-legal
    intermediates: list[str]  # fully internalized containers
    inputs: list[str]
    outputs: list[str]
    # Reduction scopes that run as per-iteration inner maps of the fused
    # map (their accumulators become iteration-local scalars, and their
    # reads of fused-away intermediates are recomputed in place).
    localized: list[int]


def _innermost_write_index(st: State, entry_id: int, container: str):
    """Innermost write subsets for `container` inside a top scope."""
    out = []
    for e in st.edges:
        if e.memlet is None or e.memlet.data != container:
            continue
        src = st.nodes[e.src]
        if isinstance(src, (Tasklet, MapEntry)) or (
            isinstance(src, MapExit)
        ):
            dst = st.nodes[e.dst]
            if isinstance(dst, (MapExit,)) or isinstance(dst, AccessNode):
                if isinstance(src, Tasklet):
                    out.append(e.memlet)
    return out


def _scope_container_memlets(st: State, entry_id: int):
    """(reads, writes): innermost memlets per container inside the scope."""
    members = set(st.scope_subgraph(entry_id)) | {entry_id, st.exit_of(entry_id)}
    reads: dict[str, list[Memlet]] = {}
    writes: dict[str, list[Memlet]] = {}
    for e in st.edges:
        if e.src in members and e.dst in members:
            src, dst = st.nodes[e.src], st.nodes[e.dst]
            m = e.memlet
            if m is None:
                continue
            if isinstance(dst, Tasklet):
                reads.setdefault(m.data, []).append(m)
            if isinstance(src, Tasklet):
                writes.setdefault(m.data, []).append(m)
    return reads, writes


def _localizable_scope(
    g: Graph, st: State, nid: int, writes: set, intermediates: list,
    mems: dict, slot_of: dict, common_set: set,
) -> bool:
    """A reducing scope can run as a per-iteration inner map when its only
    effect is one WCR accumulation (with an identity) into a set-internal
    transient whose written dimensions are all fused dimensions."""
    if len(writes) != 1 or not writes <= set(intermediates):
        return False
    name = next(iter(writes))
    exit_id = st.exit_of(nid)
    out_ms = [
        e.memlet for e in st.out_edges(exit_id)
        if e.memlet is not None and e.memlet.data == name
    ]
    if not out_ms:
        return False
    if any(m.wcr is None or m.wcr_identity is None for m in out_ms):
        return False
    for m in mems[nid][1].get(name, []):
        for b in m.subset.begins():
            if isinstance(b, Sym):
                if (
                    b.name not in slot_of[nid]
                    or slot_of[nid][b.name] not in common_set
                ):
                    return False
            elif free_symbols(b):
                # A constant index (keepdims-style collapsed dim) simply
                # stays a dimension of the local accumulator.
                return False
    return True


def _read_edges_of(st: State, entry_id: int, name: str) -> list[Edge]:
    """Read edges for `name` leaving the scope's entry node."""
    return [
        e for e in st.out_edges(entry_id)
        if e.memlet is not None and e.memlet.data == name
    ]


def _replicable_producer(
    g: Graph, st: State, nid: int, mapped_inter: set, loc_inter: set,
    all_writes: dict, slot_of: dict, common_set: set, depth: int = 0,
) -> bool:
    """A mapped scope whose value can be recomputed at an arbitrary
    iteration index: a pure tasklet body (plus scope-local scratch), one
    non-WCR write indexed by exactly its parameters, every parameter
    bound to a fused dimension, and reads that are themselves external,
    iteration-local, or transitively replicable."""
    if depth > 8:
        return False
    if any(s not in common_set for s in slot_of[nid].values()):
        return False
    members = st.scope_subgraph(nid)
    for m in members:
        node = st.nodes[m]
        if isinstance(node, Tasklet):
            continue
        if (
            isinstance(node, AccessNode)
            and g.container(node.data).storage == "Scoped"
        ):
            continue
        return False
    exit_id = st.exit_of(nid)
    out_ms = [e.memlet for e in st.out_edges(exit_id) if e.memlet is not None]
    if len({m.data for m in out_ms}) != 1 or any(m.wcr for m in out_ms):
        return False
    wname = out_ms[0].data
    inner_w = [
        e.memlet for e in st.edges
        if e.src in members and e.memlet is not None
        and e.memlet.data == wname
        and isinstance(st.nodes[e.src], Tasklet)
    ]
    if len(inner_w) != 1:
        return False
    begins = inner_w[0].subset.begins()
    names = [b.name for b in begins if isinstance(b, Sym)]
    if len(names) != len(begins) or set(names) != set(
        st.nodes[nid].params
    ) or len(names) != len(st.nodes[nid].params):
        return False
    # Boundary reads.
    for e in st.out_edges(nid):
        if e.memlet is None:
            continue
        data = e.memlet.data
        if data in loc_inter:
            continue
        if data in mapped_inter:
            producer = all_writes[data][0]
            if not _replicable_producer(
                g, st, producer, mapped_inter, loc_inter, all_writes,
                slot_of, common_set, depth + 1,
            ):
                return False
    return True


def _replication_ok(
    g: Graph, st: State, nid: int, unit_reads: dict, mems: dict,
    mapped_inter: set, loc_inter: set, all_writes: dict, slot_of: dict,
    common_set: set,
) -> bool:
    """Every read of a mapped intermediate by the localized scope `nid`
    must be a direct entry->tasklet edge with a replicable producer."""
    for name in sorted(unit_reads[nid]):
        if name not in mapped_inter:
            continue
        edges = _read_edges_of(st, nid, name)
        inner = [
            e for e in st.edges
            if e.memlet is not None and e.memlet.data == name
            and e.src in set(st.scope_subgraph(nid)) | {nid}
        ]
        if len(edges) != len(inner):
            return False  # reads nested deeper than the entry
        if any(not isinstance(st.nodes[e.dst], Tasklet) for e in edges):
            return False
        producer = all_writes[name][0]
        if not _replicable_producer(
            g, st, producer, mapped_inter, loc_inter, all_writes,
            slot_of, common_set,
        ):
            return False
        # The producer's write index determines the substitution; reads
        # must have one index expression per written dimension.
        wm = mems[producer][1].get(name, [])
        if not wm:
            return False
        rank = wm[0].subset.rank
        if any(e.memlet.subset.rank != rank for e in edges):
            return False
    return True


def _snapshot_scope(st: State, entry_id: int) -> dict:
    """Immutable copy of a scope's contents, taken before fusion rewires
    anything: member nodes in topological order, boundary-in edges
    (member, connector, memlet), internal edges, and edges into the exit."""
    members = set(st.scope_subgraph(entry_id))
    exit_id = st.exit_of(entry_id)
    order = [n for n in st.topological() if n in members]
    nodes = {n: copy.deepcopy(st.nodes[n]) for n in members}
    inb, internal, out = [], [], []
    for e in st.edges:
        if e.src == entry_id and e.dst in members:
            inb.append((e.dst, e.dst_conn, copy.deepcopy(e.memlet)))
        elif e.src in members and e.dst in members:
            internal.append(
                (e.src, e.src_conn, e.dst, e.dst_conn, copy.deepcopy(e.memlet))
            )
        elif e.src in members and e.dst == exit_id:
            out.append((e.src, e.src_conn, copy.deepcopy(e.memlet)))
    return {"order": order, "nodes": nodes, "in": inb, "internal": internal,
            "out": out}


def _replicate_reads(
    g: Graph, st: State, entry_id: int, snaps: dict, producer_of: dict,
    mapped_inter: set, local_of: dict, local_dims: dict,
    inter_access: dict, repl_hull: set,
):
    """Replace a localized scope's entry-level reads of fused-away
    intermediates with in-scope recomputation: clone each producing tasklet
    chain (from its pre-fusion snapshot), substitute the producer's write
    index with the read index, and land each recomputed value in a fresh
    iteration-local scalar."""
    counter = [0]
    cache: dict = {}     # (producer, rendered site index) -> rep container
    rep_access: dict = {}  # rep container -> access node id

    def fresh_conn(data: str) -> str:
        counter[0] += 1
        return f"rp{counter[0]}_{data}"

    def build(name: str, begins: list) -> str:
        pnid = producer_of[name]
        s = snaps[pnid]
        key = (pnid, tuple(render(simplify(b)) for b in begins))
        if key in cache:
            return cache[key]
        write = next(
            ((src, conn, m) for (src, conn, m) in s["out"]
             if m is not None and m.data == name
             and isinstance(s["nodes"][src], Tasklet)),
            None,
        )
        if write is None:
            raise TransformError(
                f"replication: producer of {name} has no direct write"
            )
        wsrc, wconn, wmem = write
        sigma = {
            wb.name: begins[d]
            for d, wb in enumerate(wmem.subset.begins())
        }
        # Clone the producer's members; scope-local scratch containers get
        # fresh names so sites never share storage.
        ren: dict[str, str] = {}
        idmap: dict[int, int] = {}
        for mid in s["order"]:
            node = copy.deepcopy(s["nodes"][mid])
            if isinstance(node, Tasklet):
                _subs_tasklet_body(node, sigma)
            elif isinstance(node, AccessNode):
                oldc = node.data
                newc = ren.get(oldc)
                if newc is None:
                    dsc = g.container(oldc)
                    newc = g.fresh_name(oldc + "_rep")
                    g.add_container(newc, dsc.shape, dsc.dtype, "Scoped")
                    ren[oldc] = newc
                node.data = newc
            idmap[mid] = st.add_node(node)
        for (a, ac, b, bc, m) in s["internal"]:
            st.add_edge(
                idmap[a], ac, idmap[b], bc,
                _subs_memlet(m, sigma, data=ren.get(m.data) if m else None),
            )
        # Boundary reads: external data comes through this scope's entry,
        # localized accumulators read the iteration-local value, and other
        # fused-away intermediates recurse.
        for (mid, conn, m) in s["in"]:
            if m is None:
                continue
            data = m.data
            sub = m.subset.substituted(sigma)
            if data in mapped_inter:
                rep2 = build(data, list(sub.begins()))
                st.add_edge(
                    rep_access[rep2], None, idmap[mid], conn,
                    Memlet(rep2, Subset(())),
                )
            elif data in local_of:
                lname = local_of[data]
                lsub = Subset(tuple(sub.dims[d] for d in local_dims[data]))
                acc = inter_access.setdefault(data, st.add_access(lname))
                c = fresh_conn(lname)
                he = st.add_edge(
                    acc, None, entry_id, f"in_{c}",
                    Memlet(lname, Subset.full(g.container(lname).shape)),
                )
                repl_hull.add(id(he))
                st.add_edge(
                    entry_id, f"out_{c}", idmap[mid], conn,
                    Memlet(lname, lsub),
                )
            else:
                c = fresh_conn(data)
                acc = st.add_access(data)
                st.add_edge(
                    acc, None, entry_id, f"in_{c}",
                    Memlet(data, Subset.full(g.container(data).shape)),
                )
                st.add_edge(
                    entry_id, f"out_{c}", idmap[mid], conn,
                    Memlet(data, sub, None, None, None, m.dynamic, None),
                )
        rep = g.fresh_name(name + "_rep")
        g.add_container(rep, (), g.container(name).dtype, "Scoped")
        acc = st.add_access(rep)
        rep_access[rep] = acc
        st.add_edge(idmap[wsrc], wconn, acc, None, Memlet(rep, Subset(())))
        cache[key] = rep
        return rep

    for er in list(st.out_edges(entry_id)):
        if er.memlet is None or er.memlet.data not in mapped_inter:
            continue
        rep = build(er.memlet.data, list(er.memlet.subset.begins()))
        st.add_edge(
            rep_access[rep], None, er.dst, er.dst_conn,
            Memlet(rep, Subset(())),
        )
        _remove_read_chain(st, er)


def _analyze_fusion(g: Graph, st: State, entries: list[int]):
    """Alignment and legality for fusing the given top-level scopes.
    Returns a _FusionPlan or a string describing why fusion is illegal."""
    scope = st.scopes()
    order = {nid: k for k, nid in enumerate(st.topological())}
    entries = sorted(entries, key=lambda nid: (order[nid], nid))
    if len(entries) < 2:
        return "need at least two scopes"
    for nid in entries:
        node = st.nodes.get(nid)
        if not isinstance(node, MapEntry) or scope[nid] is not None:
            return f"node {nid} is not a top-level map"
        for b, e, s in node.ranges.dims:
            if not (expr_equal(b, Const(0)) and expr_equal(s, Const(1))):
                return "non-normalized map range"

    # Dataflow between member scopes, and the external cycle check.
    unit_reads: dict[int, set] = {}
    unit_writes: dict[int, set] = {}
    for nid in entries:
        r, w = _unit_containers(st, nid, scope)
        unit_reads[nid], unit_writes[nid] = r, w

    # Path constraint: contracting the set must not create a cycle through
    # outside units.
    units = sorted(
        {
            _unit_of(st, nid, scope)
            for nid in st.nodes
            if not isinstance(st.nodes[nid], AccessNode)
        }
    )
    uedges = set()
    producers: dict[str, list[int]] = {}
    for u in units:
        _, w = _unit_containers(st, u, scope)
        for name in w:
            producers.setdefault(name, []).append(u)
    for u in units:
        r, _ = _unit_containers(st, u, scope)
        for name in r:
            for p in producers.get(name, []):
                if p != u:
                    uedges.add((p, u))
    member = set(entries)
    # Outside descendants of the set that are also ancestors of the set.
    adj: dict[int, set] = {}
    for a, b in uedges:
        adj.setdefault(a, set()).add(b)

    def reach(srcs: set) -> set:
        seen = set(srcs)
        stack = list(srcs)
        while stack:
            cur = stack.pop()
            for nxt in adj.get(cur, ()):
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return seen

    downstream = reach(member) - member
    for out_unit in downstream:
        if reach({out_unit}) & member:
            return "fusing would close a cycle through an outside unit"

    # Intermediates: written by one member, read by another.
    all_writes = {}
    for nid in entries:
        for name in unit_writes[nid]:
            all_writes.setdefault(name, []).append(nid)
    intermediates = []
    for name, writers in sorted(all_writes.items()):
        read_by = [
            nid for nid in entries
            if name in unit_reads[nid] and nid not in writers
        ]
        if not read_by:
            continue  # private to its writer (e.g. scope-local storage)
        if len(writers) != 1:
            return f"{name} written by several member scopes"
        desc = g.container(name)
        if desc.storage != "Transient" or desc.constant or desc.stash:
            return f"intermediate {name} is externally visible"
        # No outside references anywhere.
        for s2 in g.states:
            sc2 = s2.scopes()
            for nid2, n2 in s2.nodes.items():
                if isinstance(n2, AccessNode) and n2.data == name:
                    if s2 is not st:
                        return f"{name} used in another state"
                    units2 = {
                        _unit_of(s2, e.dst, sc2) for e in s2.out_edges(nid2)
                    } | {
                        _unit_of(s2, e.src, sc2) for e in s2.in_edges(nid2)
                    }
                    if units2 - set(entries):
                        return f"{name} is read or written outside the set"
        intermediates.append(name)

    # Per-scope innermost memlets.
    mems = {nid: _scope_container_memlets(st, nid) for nid in entries}

    # Slot alignment, seeded by the first scope.
    slots: list[ScalarExpr] = []
    slot_of: dict[int, dict[str, int]] = {}
    seed = entries[0]
    seed_node: MapEntry = st.nodes[seed]
    for i, p in enumerate(seed_node.params):
        slots.append(seed_node.ranges.dim_extent(i))
    slot_of[seed] = {p: i for i, p in enumerate(seed_node.params)}

    for nid in entries[1:]:
        node: MapEntry = st.nodes[nid]
        assign: dict[str, int] = {}
        # Constraints from intermediates produced by already-aligned scopes.
        for name in intermediates:
            producer = all_writes[name][0]
            if producer not in slot_of or producer == nid:
                continue
            if name not in unit_reads[nid]:
                continue
            wm = mems[producer][1].get(name, [])
            rm = mems[nid][0].get(name, [])
            if not wm or not rm:
                continue
            for d in range(wm[0].subset.rank):
                wb = wm[0].subset.begins()[d]
                rb = rm[0].subset.begins()[d]
                if (
                    isinstance(wb, Sym) and wb.name in slot_of[producer]
                    and isinstance(rb, Sym) and rb.name in node.params
                ):
                    s = slot_of[producer][wb.name]
                    if assign.setdefault(rb.name, s) != s:
                        return f"conflicting alignment for {name}"
        # Constraints from shared *consumers*: scopes reading the same
        # intermediate written by this one are handled when they come up.
        used = set(assign.values())
        for i, p in enumerate(node.params):
            if p in assign:
                continue
            ext = node.ranges.dim_extent(i)
            found = None
            for s, sext in enumerate(slots):
                if s in used:
                    continue
                if expr_equal(sext, ext):
                    found = s
                    break
            if found is None:
                slots.append(ext)
                found = len(slots) - 1
            assign[p] = found
            used.add(found)
        slot_of[nid] = assign

    # Common slots: present in every scope.
    common = [
        s
        for s in range(len(slots))
        if all(s in set(slot_of[nid].values()) for nid in entries)
    ]

    # Visibility rule per intermediate: a common slot must drive the write
    # and the read of each intermediate symmetrically; a producer param on a
    # common slot that does not drive the write (a reduced dimension) kills
    # the slot.
    def write_slots(nid, name):
        wm = mems[nid][1].get(name, [])
        out = set()
        for m in wm:
            for b in m.subset.begins():
                if isinstance(b, Sym) and b.name in slot_of[nid]:
                    out.add(slot_of[nid][b.name])
        return out

    def read_slots(nid, name):
        rm = mems[nid][0].get(name, [])
        out = set()
        for m in rm:
            for b in m.subset.begins():
                if isinstance(b, Sym) and b.name in slot_of[nid]:
                    out.add(slot_of[nid][b.name])
        return out

    common_set = set(common)
    killed_plain: set[int] = set()
    killed_red: dict[int, set[int]] = {}  # slot -> reducing producers
    for name in intermediates:
        producer = all_writes[name][0]
        wslots = write_slots(producer, name)
        pslots = set(slot_of[producer].values())
        for s in pslots - wslots:
            # Reduced (or unused) producer dimension: kills the slot
            # unless the producer can be localized instead.
            if s in common_set:
                killed_red.setdefault(s, set()).add(producer)
        for nid in entries:
            if nid == producer or name not in unit_reads[nid]:
                continue
            rslots = read_slots(nid, name)
            # Slots the read depends on but the write does not (or the
            # other way around) cannot be common.
            for s in (rslots ^ wslots):
                killed_plain.add(s)

    # Rescue: keep the full common domain by turning every reducing
    # producer into a per-iteration inner map.  Legal when each one only
    # writes a set-internal WCR accumulator (with identity), and its
    # reads of mapped intermediates can be recomputed in place.
    localized: list[int] = []
    if killed_red and not (killed_plain & common_set):
        cand = sorted({p for ps in killed_red.values() for p in ps})
        ok = all(
            _localizable_scope(
                g, st, p, unit_writes[p], intermediates, mems, slot_of, common_set
            )
            for p in cand
        )
        if ok:
            mapped_inter = {
                n for n in intermediates if all_writes[n][0] not in cand
            }
            loc_inter = set(intermediates) - mapped_inter
            ok = all(
                _replication_ok(
                    g, st, r, unit_reads, mems, mapped_inter, loc_inter,
                    all_writes, slot_of, common_set,
                )
                for r in cand
            )
        if ok:
            localized = cand
    if not localized:
        killed = killed_plain | set(killed_red)
        common = [s for s in common if s not in killed]
    if not common:
        return "no common iteration domain"

    inputs = sorted(
        set().union(*(unit_reads[nid] for nid in entries)) - set(intermediates)
    )
    outputs = sorted(
        set().union(*(unit_writes[nid] for nid in entries)) - set(intermediates)
    )
    return _FusionPlan(
        st.name, entries, slots, slot_of, common, intermediates, inputs,
        outputs, localized,
    )


def _fusion_candidates(g: Graph, st: State) -> list[list[int]]:
    """Maximal legal fusible sets, grown greedily in topological order."""
    tops = _top_scopes(st)
    if len(tops) < 2:
        return []
    scope = st.scopes()
    connected: dict[int, set] = {nid: set() for nid in tops}
    rw = {nid: _unit_containers(st, nid, scope) for nid in tops}
    for a in tops:
        for b in tops:
            if a == b:
                continue
            if rw[a][1] & rw[b][0] or rw[b][1] & rw[a][0]:
                connected[a].add(b)
                connected[b].add(a)
    found: list[list[int]] = []
    seen: set = set()
    for seed in tops:
        members = [seed]
        grown = True
        while grown:
            grown = False
            for cand in tops:
                if cand in members:
                    continue
                if not any(cand in connected[m] for m in members):
                    continue
                plan = _analyze_fusion(g, st, members + [cand])
                if isinstance(plan, _FusionPlan):
                    members = plan.scopes
                    grown = True
        if len(members) >= 2:
            key = frozenset(members)
            if key not in seen:
                seen.add(key)
                found.append(sorted(members))
    return found


def _find_subgraph_fusion(g: Graph) -> list[dict]:
    matches = []
    for st in g.states:
        for entries in _fusion_candidates(g, st):
            plan = _analyze_fusion(g, st, entries)
            if not isinstance(plan, _FusionPlan):
                continue
            labels = [st.nodes[nid].label for nid in entries]
            dims = ", ".join(render(plan.slots[s]) for s in plan.common)
            cert = (
                "scopes share a common iteration domain of extents "
                f"[{dims}]; intermediates are transients fully "
                "covered inside the set; contracting the set keeps "
                "the unit graph acyclic"
            )
            if plan.localized:
                cert += (
                    "; reductions keep the full domain by accumulating "
                    "into iteration-local storage, recomputing fused-away "
                    "inputs in place"
                )
            matches.append(
                {
                    "nodes": [[st.name, nid] for nid in entries],
                    "certificate": cert,
                    "description": (
                        f"fuse {len(entries)} map scopes ("
                        + ", ".join(repr(l) for l in labels)
                        + ") into one over the common domain"
                    ),
                    "payload": {"scopes": entries},
                }
            )
    return matches


def _apply_subgraph_fusion(g: Graph, match: TransformMatch):
    st = next(s for s in g.states if s.name == match.nodes[0][0])
    entries = match.payload["scopes"]
    plan = _analyze_fusion(g, st, entries)
    if not isinstance(plan, _FusionPlan):
        raise TransformError(f"fusion no longer legal: {plan}")
    scope = st.scopes()

    fused_params = [g.fresh_name(f"fp{k}") for k in range(len(plan.common))]
    slot_param = {s: fused_params[k] for k, s in enumerate(plan.common)}
    fen, fex = st.add_map(
        "fused", fused_params,
        [(0, plan.slots[s], 1) for s in plan.common],
    )

    loc_set = set(plan.localized)
    producer_of = {
        name: next(
            nid for nid in entries
            if name in _unit_containers(st, nid, scope)[1]
        )
        for name in plan.intermediates
    }
    # Intermediates whose producer dissolves into the fused map; localized
    # scopes recompute these in place instead of reading stored values.
    mapped_inter = {
        n for n in plan.intermediates if producer_of[n] not in loc_set
    }
    snaps = {nid: _snapshot_scope(st, nid) for nid in entries} if loc_set else {}
    repl_hull: set[int] = set()

    # Scoped replacements for internal intermediates. Local shape keeps the
    # container dims not driven by a common slot.
    local_of: dict[str, str] = {}
    local_dims: dict[str, list[int]] = {}
    inter_access: dict[str, int] = {}
    for name in plan.intermediates:
        producer = producer_of[name]
        wm = _scope_container_memlets(st, producer)[1].get(name)
        begins = wm[0].subset.begins()
        keep = []
        for d, b in enumerate(begins):
            if (
                isinstance(b, Sym)
                and b.name in plan.slot_of[producer]
                and plan.slot_of[producer][b.name] in plan.common
            ):
                continue
            keep.append(d)
        local_dims[name] = keep
        desc = g.container(name)
        lname = g.fresh_name(name + "_loc")
        g.add_container(
            lname, tuple(desc.shape[d] for d in keep), desc.dtype, "Scoped"
        )
        local_of[name] = lname

    ext_in_access: dict[str, int] = {}
    ext_out_access: dict[str, int] = {}

    for nid in entries:
        node: MapEntry = st.nodes[nid]
        exit_id = st.exit_of(nid)
        loc_scope = nid in loc_set
        # Parameter substitution: common params -> fused params; local
        # params keep their names unless they collide. A localized scope
        # binds only the params driving its accumulator write; its reduced
        # dims survive as an inner map.
        wparams: set[str] = set()
        if loc_scope:
            out_names = {
                e.memlet.data for e in st.out_edges(exit_id)
                if e.memlet is not None
            }
            wmems = _scope_container_memlets(st, nid)[1]
            for wn in out_names:
                for m in wmems.get(wn, []):
                    for b in m.subset.begins():
                        if isinstance(b, Sym):
                            wparams.add(b.name)
        subs: dict[str, ScalarExpr] = {}
        local_params: list[int] = []
        for i, p in enumerate(node.params):
            s = plan.slot_of[nid][p]
            if s in slot_param and (not loc_scope or p in wparams):
                subs[p] = Sym(slot_param[s])
            else:
                local_params.append(i)
        if loc_scope:
            _replicate_reads(
                g, st, nid, snaps, producer_of, mapped_inter,
                local_of, local_dims, inter_access, repl_hull,
            )
        members = set(st.scope_subgraph(nid))
        # Record external boundary containers before rewiring.
        for e in list(st.in_edges(nid)):
            src = st.nodes[e.src]
            if isinstance(src, AccessNode) and src.data not in plan.intermediates:
                ext_in_access.setdefault(src.data, e.src)
        for e in list(st.out_edges(exit_id)):
            dst = st.nodes[e.dst]
            if isinstance(dst, AccessNode) and dst.data not in plan.intermediates:
                ext_out_access.setdefault(dst.data, e.dst)

        # Rewrite inner memlets and bodies.
        for e in st.edges:
            if e.src in members or e.dst in members:
                if e.memlet is None:
                    continue
                data = e.memlet.data
                if data in local_of:
                    sub2 = e.memlet.subset.substituted(subs)
                    keep = local_dims[data]
                    new_sub = Subset(tuple(sub2.dims[d] for d in keep))
                    e.memlet = Memlet(
                        local_of[data], new_sub, None, e.memlet.wcr,
                        e.memlet.wcr_identity, e.memlet.dynamic, None
                    )
                else:
                    e.memlet = _subs_memlet(e.memlet, subs)
        for mnid in members:
            mnode = st.nodes[mnid]
            if isinstance(mnode, Tasklet):
                _subs_tasklet_body(mnode, subs)
            elif isinstance(mnode, MapEntry):
                mnode.ranges = mnode.ranges.substituted(subs)

        # Rebuild this scope's own map with only the local dims (or
        # dissolve it when every dim is common).
        if local_params:
            node.params = tuple(node.params[i] for i in local_params)
            node.ranges = Subset(
                tuple(node.ranges.dims[i] for i in local_params)
            ).substituted(subs)
        # Boundary rewiring: inputs.
        for e in list(st.in_edges(nid)):
            if id(e) in repl_hull:
                continue  # already reads the iteration-local value
            src = st.nodes[e.src]
            if not isinstance(src, AccessNode):
                continue
            data = src.data
            st.remove_edge(e)
            if data in local_of:
                a = inter_access.setdefault(
                    data, st.add_access(local_of[data])
                )
                lshape = g.container(local_of[data]).shape
                st.add_edge(a, None, nid, e.dst_conn,
                            Memlet(local_of[data], Subset.full(lshape)))
            else:
                conn = f"fin_{data}"
                if not any(
                    e2.dst_conn == f"in_{conn}" for e2 in st.in_edges(fen)
                ):
                    st.add_edge(
                        e.src, e.src_conn, fen, f"in_{conn}",
                        Memlet(data, Subset.full(g.container(data).shape)),
                    )
                st.add_edge(
                    fen, f"out_{conn}", nid, e.dst_conn,
                    Memlet(data, Subset.full(g.container(data).shape)),
                )
        # Boundary rewiring: outputs.
        for e in list(st.out_edges(exit_id)):
            dst = st.nodes[e.dst]
            if not isinstance(dst, AccessNode):
                continue
            data = dst.data
            st.remove_edge(e)
            if data in local_of:
                a = inter_access.setdefault(
                    data, st.add_access(local_of[data])
                )
                lshape = g.container(local_of[data]).shape
                st.add_edge(
                    exit_id, e.src_conn, a, None,
                    Memlet(
                        local_of[data],
                        Subset.full(lshape),
                        None, e.memlet.wcr, e.memlet.wcr_identity,
                    ),
                )
            else:
                conn = f"fout_{data}"
                st.add_edge(
                    exit_id, e.src_conn, fex, f"in_{conn}",
                    Memlet(
                        data, Subset.full(g.container(data).shape), None,
                        e.memlet.wcr, e.memlet.wcr_identity,
                    ),
                )
                if not any(
                    e2.src_conn == f"out_{conn}" for e2 in st.out_edges(fex)
                ):
                    st.add_edge(
                        fex, f"out_{conn}", e.dst, None,
                        Memlet(
                            data, Subset.full(g.container(data).shape), None,
                            e.memlet.wcr, e.memlet.wcr_identity,
                        ),
                    )
        if not local_params:
            _dissolve_map(st, nid)

    # Old intermediate access nodes and containers disappear, as do input
    # access nodes left unconnected by the rewiring.
    for name in plan.intermediates:
        for nid2 in [
            n for n, nd in list(st.nodes.items())
            if isinstance(nd, AccessNode) and nd.data == name
        ]:
            st.remove_node(nid2)
        g.remove_container(name)
    scope2 = st.scopes()
    for nid2 in [
        n for n, nd in list(st.nodes.items())
        if isinstance(nd, AccessNode) and st.degree(n) == 0
        and scope2.get(n) is None
    ]:
        st.remove_node(nid2)


register_transformation(
    "subgraph_fusion",
    _find_subgraph_fusion,
    _apply_subgraph_fusion,
    "Combine several top-level map scopes into one over their greatest "
    "common iteration domain; non-common dimensions stay as inner maps and "
    "fully covered intermediates become scope-local.",
)
