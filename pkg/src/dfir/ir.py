"""Dataflow IR.

A Graph is a sequence of states executed in order. Each state is an acyclic
multigraph whose nodes compute and whose edges move data; every edge carries
a memlet naming the container, the subset touched, and the element volume.
Map entry/exit pairs bracket parametric scopes. All sizes and indices are
symbolic expressions, so data movement is computable without running
anything.

Conventions used throughout:

* Map connectors pair up as ``in_X`` outside and ``out_X`` inside, for an
  arbitrary token X (usually the container name).
* Subsets are half-open per dimension with stride >= 1. An element access
  at index i is the subset [i, i+1, 1].
* Write-conflict resolution is ``sum`` or ``max``. A memlet may carry a
  ``wcr_identity``; the target region is set to it before the enclosing map
  runs, which keeps an expanded reduction a single schedulable unit.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, Mapping

import numpy as np

from .symexpr import (
    Const,
    ScalarExpr,
    Sym,
    as_expr,
    evaluate,
    expr_equal,
    free_symbols,
    parse,
    render,
    simplify,
    substitute,
)

SCHEMA_VERSION = "dfir-0.1"

DTYPES = {"f32": 4, "f64": 8, "i64": 8, "bool": 1}

NUMPY_DTYPES = {
    "f32": np.float32,
    "f64": np.float64,
    "i64": np.int64,
    "bool": np.bool_,
}

STORAGES = ("Global", "Transient", "Scoped")
LIFETIMES = ("Scope", "State", "Persistent")
SCHEDULES = ("Sequential", "Parallel")


class IRError(Exception):
    pass


class ValidationError(IRError):
    def __init__(self, diagnostics: list[Diagnostic]):
        super().__init__("; ".join(str(d) for d in diagnostics))
        self.diagnostics = diagnostics


class SchemaError(IRError):
    def __init__(self, message: str, pointer: str):
        super().__init__(f"{message} (at {pointer})")
        self.pointer = pointer


@dataclass(frozen=True)
class Diagnostic:
    rule: str
    message: str
    state: str | None = None
    node: int | None = None

    def __str__(self):
        where = ""
        if self.state is not None:
            where = f" [state {self.state}" + (
                f", node {self.node}]" if self.node is not None else "]"
            )
        return f"{self.rule}: {self.message}{where}"


# ---------------------------------------------------------------------------
# Subsets and memlets


@dataclass(frozen=True)
class Subset:
    """Per-dimension (begin, end, stride) triples, half-open."""

    dims: tuple[tuple[ScalarExpr, ScalarExpr, ScalarExpr], ...]

    @staticmethod
    def full(shape: Iterable[ScalarExpr | int | str]) -> Subset:
        return Subset(
            tuple((Const(0), as_expr(s), Const(1)) for s in shape)
        )

    @staticmethod
    def index(indices: Iterable[ScalarExpr | int | str]) -> Subset:
        dims = []
        for idx in indices:
            e = as_expr(idx)
            dims.append((e, simplify(e + 1), Const(1)))
        return Subset(tuple(dims))

    @staticmethod
    def of(dims: Iterable[tuple]) -> Subset:
        out = []
        for dim in dims:
            b, e, s = dim
            out.append((as_expr(b), as_expr(e), as_expr(s)))
        return Subset(tuple(out))

    @property
    def rank(self) -> int:
        return len(self.dims)

    def dim_extent(self, i: int) -> ScalarExpr:
        b, e, s = self.dims[i]
        if isinstance(s, Const) and s.value == 1:
            return simplify(e - b)
        from .symexpr import Binary

        return simplify(Binary("floordiv", e - b + s - 1, s))

    def volume(self) -> ScalarExpr:
        vol: ScalarExpr = Const(1)
        for i in range(self.rank):
            vol = vol * self.dim_extent(i)
        return simplify(vol)

    def begins(self) -> tuple[ScalarExpr, ...]:
        return tuple(b for b, _, _ in self.dims)

    def substituted(self, mapping: Mapping[str, ScalarExpr]) -> Subset:
        return Subset(
            tuple(
                (
                    simplify(substitute(b, mapping)),
                    simplify(substitute(e, mapping)),
                    simplify(substitute(s, mapping)),
                )
                for b, e, s in self.dims
            )
        )

    def free_symbols(self) -> set[str]:
        out: set[str] = set()
        for b, e, s in self.dims:
            out |= free_symbols(b) | free_symbols(e) | free_symbols(s)
        return out

    def __str__(self):
        parts = []
        for b, e, s in self.dims:
            text = f"{render(b)}:{render(e)}"
            if not (isinstance(s, Const) and s.value == 1):
                text += f":{render(s)}"
            parts.append(text)
        return ", ".join(parts)


@dataclass
class Memlet:
    data: str
    subset: Subset
    volume: ScalarExpr | None = None
    wcr: str | None = None  # None, "sum", or "max"
    wcr_identity: float | None = None
    dynamic: bool = False
    other_subset: Subset | None = None  # destination range on copy edges

    def __post_init__(self):
        if self.volume is None:
            self.volume = self.subset.volume()
        if self.wcr not in (None, "sum", "max"):
            raise IRError(f"unsupported wcr: {self.wcr}")

    @staticmethod
    def simple(data: str, subset: Subset, **kw) -> Memlet:
        return Memlet(data=data, subset=subset, **kw)


# ---------------------------------------------------------------------------
# Nodes


@dataclass
class AccessNode:
    data: str


@dataclass
class Tasklet:
    name: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    body: dict[str, ScalarExpr]  # one assignment per output

    def __post_init__(self):
        self.inputs = tuple(self.inputs)
        self.outputs = tuple(self.outputs)
        for out in self.outputs:
            if out not in self.body:
                raise IRError(f"tasklet {self.name}: no assignment for output {out}")


@dataclass
class MapEntry:
    label: str
    params: tuple[str, ...]
    ranges: Subset
    schedule: str = "Parallel"

    def __post_init__(self):
        self.params = tuple(self.params)
        if len(self.params) != self.ranges.rank:
            raise IRError(f"map {self.label}: params/ranges rank mismatch")
        if self.schedule not in SCHEDULES:
            raise IRError(f"map {self.label}: bad schedule {self.schedule}")


@dataclass
class MapExit:
    label: str
    entry: int  # node id of the matching MapEntry


@dataclass
class LibraryNode:
    op: str
    name: str
    attrs: dict
    in_conns: tuple[str, ...]
    out_conns: tuple[str, ...]

    def __post_init__(self):
        self.in_conns = tuple(self.in_conns)
        self.out_conns = tuple(self.out_conns)


@dataclass
class NestedGraph:
    name: str
    graph: "Graph"
    input_map: dict[str, str]  # connector -> inner container
    output_map: dict[str, str]


Node = AccessNode | Tasklet | MapEntry | MapExit | LibraryNode | NestedGraph


@dataclass
class Edge:
    src: int
    src_conn: str | None
    dst: int
    dst_conn: str | None
    memlet: Memlet | None


# ---------------------------------------------------------------------------
# Containers


@dataclass
class DataDescriptor:
    name: str
    shape: tuple[ScalarExpr, ...]
    dtype: str
    storage: str = "Transient"
    lifetime: str = "State"
    constant: bool = False
    stash: bool = False  # set when autodiff forwards this value to backward

    def __post_init__(self):
        self.shape = tuple(as_expr(s) for s in self.shape)
        if self.dtype not in DTYPES:
            raise IRError(f"container {self.name}: unknown dtype {self.dtype}")
        if self.storage not in STORAGES:
            raise IRError(f"container {self.name}: unknown storage {self.storage}")
        if self.lifetime not in LIFETIMES:
            raise IRError(f"container {self.name}: unknown lifetime {self.lifetime}")

    def total_elements(self, bindings: Mapping[str, float] | None = None) -> int:
        n = 1
        for s in self.shape:
            n *= int(evaluate(s, bindings))
        return n

    def total_bytes(self, bindings: Mapping[str, float] | None = None) -> int:
        return self.total_elements(bindings) * DTYPES[self.dtype]


# ---------------------------------------------------------------------------
# State


class State:
    def __init__(self, name: str):
        self.name = name
        self.nodes: dict[int, Node] = {}
        self.edges: list[Edge] = []
        self._next_id = 0

    def add_node(self, node: Node, node_id: int | None = None) -> int:
        if node_id is None:
            node_id = self._next_id
        if node_id in self.nodes:
            raise IRError(f"duplicate node id {node_id} in state {self.name}")
        self.nodes[node_id] = node
        self._next_id = max(self._next_id, node_id + 1)
        return node_id

    def add_access(self, data: str) -> int:
        return self.add_node(AccessNode(data))

    def add_map(
        self,
        label: str,
        params: Iterable[str],
        ranges: Subset | Iterable[tuple],
        schedule: str = "Parallel",
    ) -> tuple[int, int]:
        if not isinstance(ranges, Subset):
            ranges = Subset.of(ranges)
        entry = self.add_node(MapEntry(label, tuple(params), ranges, schedule))
        exit_ = self.add_node(MapExit(label, entry))
        return entry, exit_

    def add_edge(
        self,
        src: int,
        src_conn: str | None,
        dst: int,
        dst_conn: str | None,
        memlet: Memlet | None,
    ) -> Edge:
        edge = Edge(src, src_conn, dst, dst_conn, memlet)
        self.edges.append(edge)
        return edge

    def remove_node(self, node_id: int):
        self.nodes.pop(node_id)
        self.edges = [e for e in self.edges if e.src != node_id and e.dst != node_id]

    def remove_edge(self, edge: Edge):
        self.edges.remove(edge)

    def in_edges(self, node_id: int) -> list[Edge]:
        return [e for e in self.edges if e.dst == node_id]

    def out_edges(self, node_id: int) -> list[Edge]:
        return [e for e in self.edges if e.src == node_id]

    def degree(self, node_id: int) -> int:
        return len(self.in_edges(node_id)) + len(self.out_edges(node_id))

    def topological(self) -> list[int]:
        """Deterministic topological order: ready nodes by ascending id."""
        indeg = {nid: 0 for nid in self.nodes}
        for e in self.edges:
            indeg[e.dst] += 1
        import heapq

        ready = [nid for nid, d in sorted(indeg.items()) if d == 0]
        heapq.heapify(ready)
        out: list[int] = []
        succs: dict[int, list[int]] = {nid: [] for nid in self.nodes}
        for e in self.edges:
            succs[e.src].append(e.dst)
        while ready:
            nid = heapq.heappop(ready)
            out.append(nid)
            for succ in succs[nid]:
                indeg[succ] -= 1
                if indeg[succ] == 0:
                    heapq.heappush(ready, succ)
        if len(out) != len(self.nodes):
            raise IRError(f"state {self.name} has a cycle")
        return out

    def has_cycle(self) -> bool:
        try:
            self.topological()
            return False
        except IRError:
            return True

    # -- scopes ------------------------------------------------------------

    def scopes(self) -> dict[int, int | None]:
        """Map from node id to enclosing MapEntry id (None at top level).

        A MapExit shares the scope of its MapEntry; both bracket the scope
        they define rather than living inside it.
        """
        scope: dict[int, int | None] = {}

        def assign(nid: int, value: int | None) -> bool:
            if nid in scope:
                if scope[nid] != value:
                    raise IRError(
                        f"inconsistent scope for node {nid} in state {self.name}"
                    )
                return False
            scope[nid] = value
            return True

        changed = True
        guard = 0
        while changed:
            changed = False
            guard += 1
            if guard > len(self.nodes) + len(self.edges) + 8:
                break
            for e in self.edges:
                src, dst = self.nodes[e.src], self.nodes[e.dst]
                inside_src = isinstance(src, MapEntry) and (e.src_conn or "").startswith(
                    "out_"
                )
                inside_dst = isinstance(dst, MapExit) and (e.dst_conn or "").startswith(
                    "in_"
                )
                if inside_src:
                    if isinstance(dst, MapExit) and dst.entry == e.src:
                        if e.src in scope:
                            changed |= assign(e.dst, scope[e.src])
                    else:
                        changed |= assign(e.dst, e.src)
                if inside_dst:
                    entry = self.nodes[e.dst].entry
                    if not inside_src:
                        changed |= assign(e.src, entry)
                if not inside_src and not inside_dst:
                    # Same-scope edge; exits expose their entry's scope.
                    a, b = e.src, e.dst
                    if a in scope and b not in scope:
                        changed |= assign(b, scope[a])
                    elif b in scope and a not in scope:
                        changed |= assign(a, scope[b])
            # Exits mirror their entries.
            for nid, node in self.nodes.items():
                if isinstance(node, MapExit) and node.entry in scope:
                    changed |= assign(nid, scope[node.entry])
                if isinstance(node, MapExit) and nid in scope:
                    if node.entry not in scope:
                        changed |= assign(node.entry, scope[nid])
        for nid in self.nodes:
            scope.setdefault(nid, None)
        return scope

    def scope_children(self) -> dict[int | None, list[int]]:
        out: dict[int | None, list[int]] = {None: []}
        scope = self.scopes()
        for nid in sorted(self.nodes):
            out.setdefault(scope[nid], []).append(nid)
        return out

    def exit_of(self, entry_id: int) -> int:
        for nid, node in self.nodes.items():
            if isinstance(node, MapExit) and node.entry == entry_id:
                return nid
        raise IRError(f"no exit for map entry {entry_id} in state {self.name}")

    def scope_subgraph(self, entry_id: int) -> list[int]:
        """All node ids strictly inside the given map scope, including
        nested entry/exit pairs, excluding the bracketing pair itself."""
        scope = self.scopes()
        inside: list[int] = []
        frontier = {entry_id}
        while frontier:
            new: set[int] = set()
            for nid in sorted(self.nodes):
                if nid in inside or nid in frontier:
                    continue
                if scope[nid] in frontier:
                    inside.append(nid)
                    node = self.nodes[nid]
                    if isinstance(node, MapEntry):
                        new.add(nid)
            frontier = new
        return sorted(inside)

    def enclosing_maps(self, scope_id: int | None) -> list[int]:
        """Chain of map entry ids from outermost to the given scope."""
        scope = self.scopes()
        chain: list[int] = []
        cur = scope_id
        while cur is not None:
            chain.append(cur)
            cur = scope[cur]
        return list(reversed(chain))


# ---------------------------------------------------------------------------
# Graph


class Graph:
    def __init__(self, name: str):
        self.name = name
        self.symbols: dict[str, str] = {}
        self.containers: list[DataDescriptor] = []
        self.states: list[State] = []
        self.constants: dict[str, np.ndarray] = {}

    # -- construction --------------------------------------------------

    def add_symbol(self, name: str, domain: str = "int"):
        self.symbols[name] = domain

    def add_container(
        self,
        name: str,
        shape: Iterable,
        dtype: str,
        storage: str = "Transient",
        lifetime: str = "State",
        constant: bool = False,
        stash: bool = False,
    ) -> DataDescriptor:
        desc = DataDescriptor(
            name, tuple(as_expr(s) for s in shape), dtype, storage, lifetime, constant, stash
        )
        self.containers.append(desc)
        return desc

    def add_state(self, name: str) -> State:
        state = State(name)
        self.states.append(state)
        return state

    # -- lookup ----------------------------------------------------------

    def container(self, name: str) -> DataDescriptor:
        for desc in self.containers:
            if desc.name == name:
                return desc
        raise KeyError(name)

    def has_container(self, name: str) -> bool:
        return any(d.name == name for d in self.containers)

    def remove_container(self, name: str):
        self.containers = [d for d in self.containers if d.name != name]
        self.constants.pop(name, None)

    def state(self, name: str) -> State:
        for s in self.states:
            if s.name == name:
                return s
        raise KeyError(name)

    def fresh_name(self, base: str) -> str:
        if not self.has_container(base):
            return base
        i = 0
        while self.has_container(f"{base}_{i}"):
            i += 1
        return f"{base}_{i}"

    # -- value semantics ---------------------------------------------------

    def clone(self) -> Graph:
        return copy.deepcopy(self)

    def content_hash(self) -> str:
        payload = serialize(self).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Validation


def validate(g: Graph) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    seen: set[str] = set()
    for desc in g.containers:
        if desc.name in seen:
            diags.append(
                Diagnostic("DuplicateContainer", f"two descriptors named {desc.name!r}")
            )
        seen.add(desc.name)
        for s in desc.shape:
            for sym in free_symbols(s):
                if sym not in g.symbols:
                    diags.append(
                        Diagnostic(
                            "UnknownSymbol",
                            f"container {desc.name} shape uses undeclared symbol {sym}",
                        )
                    )

    for state in g.states:
        diags.extend(_validate_state(g, state))
    return diags


def _conn_token(conn: str | None) -> str | None:
    if conn is None:
        return None
    if conn.startswith("in_"):
        return conn[3:]
    if conn.startswith("out_"):
        return conn[4:]
    return conn


def _validate_state(g: Graph, state: State) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    name = state.name

    def diag(rule, msg, node=None):
        diags.append(Diagnostic(rule, msg, state=name, node=node))

    for e in state.edges:
        if e.src not in state.nodes or e.dst not in state.nodes:
            diag("DanglingEdge", f"edge references missing node {e.src}->{e.dst}")
            return diags

    if state.has_cycle():
        diag("Acyclicity", "state dataflow has a cycle")
        return diags

    try:
        scope = state.scopes()
    except IRError as err:
        diag("ScopeError", str(err))
        return diags

    params_in_scope: dict[int | None, set[str]] = {None: set()}

    def scope_params(sid: int | None) -> set[str]:
        if sid in params_in_scope:
            return params_in_scope[sid]
        entry = state.nodes[sid]
        out = set(entry.params) | scope_params(scope[sid])
        params_in_scope[sid] = out
        return out

    # Entry/exit pairing.
    entries = {nid for nid, n in state.nodes.items() if isinstance(n, MapEntry)}
    exits = {nid: n.entry for nid, n in state.nodes.items() if isinstance(n, MapExit)}
    matched = set(exits.values())
    for nid in sorted(entries - matched):
        diag("ScopeError", "map entry without matching exit", node=nid)
    for nid, entry in sorted(exits.items()):
        if entry not in entries:
            diag("ScopeError", "map exit references missing entry", node=nid)
    if len(matched) != len(exits):
        diag("ScopeError", "multiple exits share one entry")

    for nid in sorted(state.nodes):
        node = state.nodes[nid]
        if isinstance(node, AccessNode):
            if not g.has_container(node.data):
                diag("UnknownContainer", f"access node references {node.data!r}", node=nid)
                continue
            desc = g.container(node.data)
            if desc.storage == "Scoped" and scope[nid] is None:
                diag(
                    "DomainError",
                    f"scoped container {node.data} accessed at top level",
                    node=nid,
                )
            if desc.storage != "Scoped" and scope[nid] is not None:
                # Global/Transient access inside a map is legal only for
                # reads/writes threaded through the scope connectors, which
                # means the access node itself sits outside. Flag it.
                diag(
                    "DomainError",
                    f"container {node.data} accessed inside a map scope "
                    "but is not Scoped",
                    node=nid,
                )
        elif isinstance(node, Tasklet):
            wired_in = {e.dst_conn for e in state.in_edges(nid)}
            wired_out = {e.src_conn for e in state.out_edges(nid)}
            for conn in node.inputs:
                if conn not in wired_in:
                    diag("UnwiredConnector", f"tasklet input {conn} has no edge", node=nid)
            for conn in node.outputs:
                if conn not in wired_out:
                    diag("UnwiredConnector", f"tasklet output {conn} has no edge", node=nid)
            allowed = set(node.inputs) | scope_params(scope[nid]) | set(g.symbols)
            for out, body in node.body.items():
                for sym in free_symbols(body):
                    if sym not in allowed:
                        diag(
                            "UnwiredConnector",
                            f"tasklet body for {out} references unknown name {sym}",
                            node=nid,
                        )
        elif isinstance(node, NestedGraph):
            inner = validate(node.graph)
            for d in inner:
                diag("NestedError", f"{node.name}: {d}", node=nid)

    # Memlets.
    for i, e in enumerate(state.edges):
        m = e.memlet
        src, dst = state.nodes[e.src], state.nodes[e.dst]
        if m is None:
            continue
        if not g.has_container(m.data):
            diag("UnknownContainer", f"memlet references {m.data!r}")
            continue
        desc = g.container(m.data)
        if m.subset.rank != len(desc.shape):
            diag(
                "MemletRankMismatch",
                f"memlet on {m.data} has rank {m.subset.rank}, container rank "
                f"{len(desc.shape)}",
            )
        if m.other_subset is not None:
            if not (isinstance(src, AccessNode) and isinstance(dst, AccessNode)):
                diag("MemletError", "other_subset is only valid on copy edges")
        if not m.dynamic:
            if not expr_equal(m.volume, m.subset.volume()):
                diag(
                    "VolumeMismatch",
                    f"memlet on {m.data}: volume {render(m.volume)} does not match "
                    f"subset volume {render(m.subset.volume())}",
                )
        if m.wcr is not None:
            terminal = isinstance(dst, AccessNode) or isinstance(dst, MapExit)
            if not terminal:
                diag("WcrError", f"wcr memlet on {m.data} does not write an access node")

    return diags


def assert_valid(g: Graph):
    diags = validate(g)
    if diags:
        raise ValidationError(diags)


# ---------------------------------------------------------------------------
# Movement accounting


def _edge_scope(state: State, e: Edge, scope: dict[int, int | None]) -> int | None:
    src, dst = state.nodes[e.src], state.nodes[e.dst]
    if isinstance(src, MapEntry) and (e.src_conn or "").startswith("out_"):
        return e.src
    if isinstance(dst, MapExit) and (e.dst_conn or "").startswith("in_"):
        return dst.entry
    if isinstance(dst, MapEntry):
        return scope[e.dst]
    if isinstance(src, MapExit):
        return scope[e.src]
    return scope[e.src]


def edge_movement(g: Graph, state: State, e: Edge) -> ScalarExpr:
    """Symbolic element count moved across an edge over a state execution."""
    if e.memlet is None:
        return Const(0)
    scope = state.scopes()
    total: ScalarExpr = e.memlet.volume
    for entry_id in state.enclosing_maps(_edge_scope(state, e, scope)):
        entry = state.nodes[entry_id]
        for i in range(entry.ranges.rank):
            total = total * entry.ranges.dim_extent(i)
    return simplify(total)


@dataclass
class MovementReport:
    symbolic: ScalarExpr
    bytes: int | None


def movement_volume(
    g: Graph,
    bindings: Mapping[str, float] | None = None,
    state: State | None = None,
) -> MovementReport:
    """Bytes moved to and from memory-backed containers.

    Sums, over every edge incident to a top-level Global or Transient
    access node, the memlet volume times the enclosing map sizes times the
    element size. With no state given, sums over all states.
    """
    states = [state] if state is not None else g.states
    total: ScalarExpr = Const(0)
    for st in states:
        scope = st.scopes()
        for e in st.edges:
            if e.memlet is None:
                continue
            counted = False
            for nid in (e.src, e.dst):
                node = st.nodes[nid]
                if (
                    isinstance(node, AccessNode)
                    and scope[nid] is None
                    and g.container(node.data).storage in ("Global", "Transient")
                ):
                    counted = True
            if not counted:
                continue
            elems = edge_movement(g, st, e)
            names = {
                st.nodes[n].data
                for n in (e.src, e.dst)
                if isinstance(st.nodes[n], AccessNode)
            }
            # Copy edges touch two containers; charge the larger element
            # size once per side.
            size = max(DTYPES[g.container(n).dtype] for n in names)
            total = simplify(total + elems * size)
    nbytes = None
    if not free_symbols(total) or bindings is not None:
        try:
            nbytes = int(evaluate(total, bindings))
        except Exception:
            nbytes = None
    return MovementReport(symbolic=total, bytes=nbytes)


def kernel_count(state: State) -> int:
    """Top-level schedulable units: map scopes, library nodes, tasklets,
    nested graphs. Copies between access nodes do not count."""
    scope = state.scopes()
    count = 0
    for nid in sorted(state.nodes):
        if scope[nid] is not None:
            continue
        node = state.nodes[nid]
        if isinstance(node, (MapEntry, LibraryNode, Tasklet, NestedGraph)):
            count += 1
    return count


def _top_level_unit(state: State, nid: int, scope: dict[int, int | None]) -> int | None:
    """The top-level unit a node belongs to (outermost map entry id or the
    node id itself)."""
    chain = state.enclosing_maps(scope[nid])
    if chain:
        return chain[0]
    node = state.nodes[nid]
    if isinstance(node, MapExit):
        return node.entry
    return nid


def intermediate_bytes(g: Graph, bindings: Mapping[str, float] | None = None) -> int:
    """Bytes of materialized intermediate values.

    Counts each container once if it is (a) forwarded by autodiff to the
    backward state, (b) a Transient written in one state and read in a
    later one, or (c) a Transient produced by one top-level unit and
    consumed by a different one within a state.
    """
    counted: set[str] = set()

    for desc in g.containers:
        if desc.stash:
            counted.add(desc.name)

    writes: dict[str, int] = {}
    reads: dict[str, int] = {}
    for i, st in enumerate(g.states):
        for e in st.edges:
            dst = st.nodes[e.dst]
            src = st.nodes[e.src]
            if isinstance(dst, AccessNode):
                writes.setdefault(dst.data, i)
            if isinstance(src, AccessNode):
                if src.data not in reads or i > reads[src.data]:
                    reads[src.data] = i
    for name, first_write in writes.items():
        if not g.has_container(name):
            continue
        if g.container(name).storage != "Transient":
            continue
        if name in reads and reads[name] > first_write:
            counted.add(name)

    for st in g.states:
        scope = st.scopes()
        producers: dict[str, set[int]] = {}
        consumers: dict[str, set[int]] = {}
        for e in st.edges:
            src, dst = st.nodes[e.src], st.nodes[e.dst]
            if isinstance(dst, AccessNode) and scope[e.dst] is None:
                unit = _top_level_unit(st, e.src, scope)
                producers.setdefault(dst.data, set()).add(unit)
            if isinstance(src, AccessNode) and scope[e.src] is None:
                unit = _top_level_unit(st, e.dst, scope)
                consumers.setdefault(src.data, set()).add(unit)
        for name, prods in producers.items():
            if not g.has_container(name) or g.container(name).storage != "Transient":
                continue
            cons = consumers.get(name, set())
            if cons - prods:
                counted.add(name)

    total = 0
    for name in counted:
        total += g.container(name).total_bytes(bindings)
    return total


# ---------------------------------------------------------------------------
# Serialization


def _subset_json(s: Subset | None):
    if s is None:
        return None
    return [[render(b), render(e), render(st)] for b, e, st in s.dims]


def _subset_from_json(data, ptr: str) -> Subset:
    if not isinstance(data, list):
        raise SchemaError("subset must be a list", ptr)
    dims = []
    for i, dim in enumerate(data):
        if not (isinstance(dim, list) and len(dim) == 3):
            raise SchemaError("subset dim must be [begin, end, stride]", f"{ptr}/{i}")
        dims.append(tuple(parse(part) for part in dim))
    return Subset(tuple(dims))


def _memlet_json(m: Memlet | None):
    if m is None:
        return None
    out = {
        "data": m.data,
        "subset": _subset_json(m.subset),
        "volume": render(m.volume),
    }
    if m.wcr:
        out["wcr"] = m.wcr
    if m.wcr_identity is not None:
        out["wcr_identity"] = (
            "-inf" if math.isinf(m.wcr_identity) else m.wcr_identity
        )
    if m.dynamic:
        out["dynamic"] = True
    if m.other_subset is not None:
        out["other_subset"] = _subset_json(m.other_subset)
    return out


def _memlet_from_json(data, ptr: str) -> Memlet | None:
    if data is None:
        return None
    if not isinstance(data, dict):
        raise SchemaError("memlet must be an object", ptr)
    for key in ("data", "subset", "volume"):
        if key not in data:
            raise SchemaError(f"memlet missing {key!r}", ptr)
    identity = data.get("wcr_identity")
    if identity == "-inf":
        identity = -math.inf
    return Memlet(
        data=data["data"],
        subset=_subset_from_json(data["subset"], f"{ptr}/subset"),
        volume=parse(data["volume"]),
        wcr=data.get("wcr"),
        wcr_identity=identity,
        dynamic=bool(data.get("dynamic", False)),
        other_subset=(
            _subset_from_json(data["other_subset"], f"{ptr}/other_subset")
            if data.get("other_subset") is not None
            else None
        ),
    )


def _node_json(node: Node):
    if isinstance(node, AccessNode):
        return {"kind": "access", "data": node.data}
    if isinstance(node, Tasklet):
        return {
            "kind": "tasklet",
            "name": node.name,
            "inputs": list(node.inputs),
            "outputs": list(node.outputs),
            "body": {out: render(node.body[out]) for out in node.outputs},
        }
    if isinstance(node, MapEntry):
        return {
            "kind": "map_entry",
            "label": node.label,
            "params": list(node.params),
            "ranges": _subset_json(node.ranges),
            "schedule": node.schedule,
        }
    if isinstance(node, MapExit):
        return {"kind": "map_exit", "label": node.label, "entry": node.entry}
    if isinstance(node, LibraryNode):
        return {
            "kind": "library",
            "op": node.op,
            "name": node.name,
            "attrs": node.attrs,
            "in_conns": list(node.in_conns),
            "out_conns": list(node.out_conns),
        }
    assert isinstance(node, NestedGraph)
    return {
        "kind": "nested",
        "name": node.name,
        "graph": _graph_json(node.graph),
        "input_map": node.input_map,
        "output_map": node.output_map,
    }


def _node_from_json(data, ptr: str) -> Node:
    if not isinstance(data, dict) or "kind" not in data:
        raise SchemaError("node must be an object with 'kind'", ptr)
    kind = data["kind"]
    try:
        if kind == "access":
            return AccessNode(data["data"])
        if kind == "tasklet":
            return Tasklet(
                name=data["name"],
                inputs=tuple(data["inputs"]),
                outputs=tuple(data["outputs"]),
                body={k: parse(v) for k, v in data["body"].items()},
            )
        if kind == "map_entry":
            return MapEntry(
                label=data["label"],
                params=tuple(data["params"]),
                ranges=_subset_from_json(data["ranges"], f"{ptr}/ranges"),
                schedule=data.get("schedule", "Parallel"),
            )
        if kind == "map_exit":
            return MapExit(label=data["label"], entry=int(data["entry"]))
        if kind == "library":
            return LibraryNode(
                op=data["op"],
                name=data["name"],
                attrs=dict(data["attrs"]),
                in_conns=tuple(data["in_conns"]),
                out_conns=tuple(data["out_conns"]),
            )
        if kind == "nested":
            return NestedGraph(
                name=data["name"],
                graph=_graph_from_json(data["graph"], f"{ptr}/graph"),
                input_map=dict(data["input_map"]),
                output_map=dict(data["output_map"]),
            )
    except KeyError as err:
        raise SchemaError(f"node missing field {err}", ptr)
    raise SchemaError(f"unknown node kind {kind!r}", f"{ptr}/kind")


def _container_json(g: Graph, desc: DataDescriptor):
    out = {
        "name": desc.name,
        "shape": [render(s) for s in desc.shape],
        "dtype": desc.dtype,
        "storage": desc.storage,
        "lifetime": desc.lifetime,
        "constant": desc.constant,
    }
    if desc.stash:
        out["stash"] = True
    if desc.name in g.constants:
        data = g.constants[desc.name]
        out["data"] = data.ravel().tolist()
    return out


def _graph_json(g: Graph) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "name": g.name,
        "symbols": [{"name": n, "domain": d} for n, d in sorted(g.symbols.items())],
        "containers": [_container_json(g, d) for d in g.containers],
        "states": [
            {
                "name": st.name,
                "nodes": [
                    dict(id=nid, **_node_json(st.nodes[nid])) for nid in sorted(st.nodes)
                ],
                "edges": [
                    {
                        "src": e.src,
                        "src_conn": e.src_conn,
                        "dst": e.dst,
                        "dst_conn": e.dst_conn,
                        "memlet": _memlet_json(e.memlet),
                    }
                    for e in st.edges
                ],
            }
            for st in g.states
        ],
        "state_order": [st.name for st in g.states],
    }


def serialize(g: Graph) -> str:
    return json.dumps(_graph_json(g), indent=1)


def _graph_from_json(data, ptr: str) -> Graph:
    if not isinstance(data, dict):
        raise SchemaError("graph must be an object", ptr)
    version = data.get("version")
    if version != SCHEMA_VERSION:
        raise SchemaError(
            f"unsupported version {version!r}, expected {SCHEMA_VERSION!r}",
            f"{ptr}/version",
        )
    for key in ("symbols", "containers", "states", "state_order"):
        if key not in data:
            raise SchemaError(f"graph missing {key!r}", ptr)
    g = Graph(data.get("name", "graph"))
    for i, sym in enumerate(data["symbols"]):
        if not isinstance(sym, dict) or "name" not in sym:
            raise SchemaError("symbol must have a name", f"{ptr}/symbols/{i}")
        g.add_symbol(sym["name"], sym.get("domain", "int"))
    for i, c in enumerate(data["containers"]):
        cptr = f"{ptr}/containers/{i}"
        if not isinstance(c, dict):
            raise SchemaError("container must be an object", cptr)
        for key in ("name", "shape", "dtype"):
            if key not in c:
                raise SchemaError(f"container missing {key!r}", cptr)
        if c["dtype"] not in DTYPES:
            raise SchemaError(f"unknown dtype {c['dtype']!r}", f"{cptr}/dtype")
        desc = DataDescriptor(
            name=c["name"],
            shape=tuple(parse(s) for s in c["shape"]),
            dtype=c["dtype"],
            storage=c.get("storage", "Transient"),
            lifetime=c.get("lifetime", "State"),
            constant=bool(c.get("constant", False)),
            stash=bool(c.get("stash", False)),
        )
        g.containers.append(desc)
        if "data" in c:
            shape = tuple(int(evaluate(s)) for s in desc.shape)
            g.constants[desc.name] = np.array(
                c["data"], dtype=NUMPY_DTYPES[desc.dtype]
            ).reshape(shape)
    order = data["state_order"]
    by_name = {}
    for i, st in enumerate(data["states"]):
        sptr = f"{ptr}/states/{i}"
        if not isinstance(st, dict) or "name" not in st:
            raise SchemaError("state must be an object with a name", sptr)
        state = State(st["name"])
        for j, nd in enumerate(st.get("nodes", [])):
            nptr = f"{sptr}/nodes/{j}"
            if "id" not in nd:
                raise SchemaError("node missing id", nptr)
            state.add_node(_node_from_json(nd, nptr), node_id=int(nd["id"]))
        for j, ed in enumerate(st.get("edges", [])):
            eptr = f"{sptr}/edges/{j}"
            if not isinstance(ed, dict) or "src" not in ed or "dst" not in ed:
                raise SchemaError("edge must have src and dst", eptr)
            state.add_edge(
                int(ed["src"]),
                ed.get("src_conn"),
                int(ed["dst"]),
                ed.get("dst_conn"),
                _memlet_from_json(ed.get("memlet"), f"{eptr}/memlet"),
            )
        by_name[state.name] = state
    for name in order:
        if name not in by_name:
            raise SchemaError(f"state_order references unknown state {name!r}", ptr)
        g.states.append(by_name[name])
    return g


def deserialize(text: str) -> Graph:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise SchemaError(f"invalid JSON: {err}", "/")
    return _graph_from_json(data, "")


# ---------------------------------------------------------------------------
# DOT export


def _dot_escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def to_dot(g: Graph) -> str:
    lines = [f'digraph "{_dot_escape(g.name)}" {{']
    lines.append(" rankdir=TB;")
    lines.append(' node [fontname="sans-serif", fontsize=10];')
    for si, state in enumerate(g.states):
        lines.append(f" subgraph cluster_{si} {{")
        lines.append(f'  label="{_dot_escape(state.name)}"; style=rounded;')
        for nid in sorted(state.nodes):
            node = state.nodes[nid]
            ident = f"s{si}_{nid}"
            if isinstance(node, AccessNode):
                storage = (
                    g.container(node.data).storage if g.has_container(node.data) else "?"
                )
                pen = ", penwidth=2" if storage == "Global" else ""
                style = ', style=dashed' if storage == "Scoped" else ""
                lines.append(
                    f'  {ident} [shape=ellipse, label="{_dot_escape(node.data)}"{pen}{style}];'
                )
            elif isinstance(node, Tasklet):
                lines.append(
                    f'  {ident} [shape=octagon, label="{_dot_escape(node.name)}"];'
                )
            elif isinstance(node, MapEntry):
                label = f"{node.label}[{', '.join(node.params)}={node.ranges}]"
                lines.append(
                    f'  {ident} [shape=trapezium, label="{_dot_escape(label)}"];'
                )
            elif isinstance(node, MapExit):
                lines.append(
                    f'  {ident} [shape=invtrapezium, label="{_dot_escape(node.label)}"];'
                )
            elif isinstance(node, LibraryNode):
                lines.append(
                    f'  {ident} [shape=box3d, label="{_dot_escape(node.op)}"];'
                )
            else:
                lines.append(
                    f'  {ident} [shape=doubleoctagon, label="{_dot_escape(node.name)}"];'
                )
        for e in state.edges:
            attrs = []
            if e.memlet is not None:
                m = e.memlet
                label = f"{m.data}[{m.subset}]"
                if m.wcr:
                    label += f" ({m.wcr})"
                attrs.append(f'label="{_dot_escape(label)}"')
                if m.wcr:
                    attrs.append("style=dashed")
            suffix = f" [{', '.join(attrs)}]" if attrs else ""
            lines.append(f"  s{si}_{e.src} -> s{si}_{e.dst}{suffix};")
        lines.append(" }")
    for si in range(len(g.states) - 1):
        a = sorted(g.states[si].nodes)
        b = sorted(g.states[si + 1].nodes)
        if a and b:
            lines.append(
                f" s{si}_{a[-1]} -> s{si + 1}_{b[0]} [style=bold, color=gray, "
                "ltail=cluster_%d, lhead=cluster_%d];" % (si, si + 1)
            )
    lines.append("}")
    return "\n".join(lines) + "\n"
