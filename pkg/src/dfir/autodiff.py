"""Reverse-mode differentiation of dataflow graphs.

Appends a backward state that computes vector-Jacobian products. The
forward state is walked in reverse topological order: access nodes flip
from being written to being read (and vice versa) on freshly allocated
adjoint containers, map entries and exits swap roles, and every tasklet
is replaced by a tasklet computing the VJP of its body. Library nodes
with a registered manual backward builder are reversed directly; any
other library node on the differentiation path is first expanded to its
native form and the native elements are differentiated.

Forward values that the VJPs need are either forwarded — the transient
is promoted to a stashed global — or recomputed inside the backward
state, controlled by the request policy. Values that live only inside a
map scope are always recomputed in place, scope-locally, so a fused
forward kernel differentiates into a fused backward kernel without any
intermediate storage.

Multiple adjoint contributions accumulate through sum-WCR memlets. Every
adjoint container is zero-initialized (or seed-initialized) by dedicated
units emitted at the head of the backward state; contributions carry no
identity of their own, so partial sums are never clobbered. Contribution
order is fixed by construction — units are emitted in reverse forward
order and executed by ascending node id — which makes gradient values
bit-reproducible across runs.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import frontend, ir, lowering
from .ir import (
    AccessNode,
    Edge,
    Graph,
    LibraryNode,
    MapEntry,
    MapExit,
    Memlet,
    NestedGraph,
    State,
    Subset,
    Tasklet,
)
from .symexpr import (
    Binary,
    Const,
    ScalarExpr,
    Sym,
    UnsupportedDerivativeError,
    differentiate,
    free_symbols,
    simplify,
)

FLOAT_DTYPES = ("f32", "f64")


class ADError(ir.IRError):
    """Raised when a graph cannot be differentiated as requested."""


# ---------------------------------------------------------------------------
# Request / result types


@dataclass
class GradientRequest:
    """What to differentiate: d(seed · outputs) / d(wrt).

    ``seed`` selects how output adjoints are provided: ``"ones"`` writes a
    constant 1 seed inside the backward state (the gradient of the plain
    sum of each output); ``"input"`` declares the output adjoints as
    global inputs the caller supplies at run time.
    """

    outputs: tuple[str, ...]
    wrt: tuple[str, ...]
    policy: str = "StashAll"  # or "PreferRecompute"
    seed: str = "ones"  # or "input"

    def __post_init__(self):
        self.outputs = tuple(dict.fromkeys(self.outputs))
        self.wrt = tuple(dict.fromkeys(self.wrt))
        if not self.outputs:
            raise ADError("gradient request names no outputs")
        if not self.wrt:
            raise ADError("gradient request names no wrt containers")
        if self.policy not in ("StashAll", "PreferRecompute"):
            raise ADError(f"unknown forwarding policy {self.policy!r}")
        if self.seed not in ("ones", "input"):
            raise ADError(f"unknown seed mode {self.seed!r}")


@dataclass
class AdjointMap:
    """Forward container name → gradient container name, plus markers for
    which gradient containers the backward state zero-initializes and
    which ones carry the seed."""

    grads: dict[str, str] = field(default_factory=dict)
    zero_init: set[str] = field(default_factory=set)
    seeded: dict[str, str] = field(default_factory=dict)

    def of(self, name: str) -> str:
        return self.grads[name]


@dataclass
class ADResult:
    """Differentiated graph plus the bookkeeping reports."""

    graph: Graph
    adjoints: AdjointMap
    # Transients promoted to stashed globals because a VJP reads them:
    # [{"name": ..., "bytes": int | str | None, "reason": "needed-by-VJP"}]
    forwarded: list[dict]
    # Library ops expanded to their native form for differentiation, in
    # expansion order (the recursion path, observable by callers).
    lowered_for_ad: list[str]

    def gradient_of(self, name: str) -> str:
        return self.adjoints.grads[name]


# ---------------------------------------------------------------------------
# Tasklet reversal


def _is_zero(e: ScalarExpr) -> bool:
    return isinstance(e, Const) and e.value == 0


def _vjp_tasklet(
    t: Tasklet,
    kinds: Mapping[str, Optional[str]],
    wanted: Optional[set] = None,
) -> tuple[Tasklet, list, dict, dict, dict]:
    """Build the VJP tasklet of ``t``.

    ``kinds`` maps each output connector to how its value was combined
    into its target: ``"plain"``/``"sum"`` pass the adjoint straight
    through, ``"max"`` gates it by an arg-max test against the final
    accumulated value (ties pass the full adjoint to every maximizer),
    and ``None`` means the output has no adjoint, dropping its terms.

    Returns ``(vjp, needed_inputs, grad_in_conns, final_conns,
    grad_out_conns)`` where ``needed_inputs`` lists the forward input
    connectors the derivative expressions read, ``grad_in_conns`` maps
    each output to its adjoint connector (or None when unused),
    ``final_conns`` maps max-combined outputs to the connector carrying
    the final accumulated value, and ``grad_out_conns`` maps each forward
    input to the connector emitting its gradient.
    """
    taken = set(t.inputs) | set(t.outputs)

    def fresh(base: str) -> str:
        name = base
        while name in taken:
            name += "_"
        taken.add(name)
        return name

    grad_in: dict[str, Optional[str]] = {}
    final: dict[str, str] = {}
    geff: dict[str, ScalarExpr] = {}
    for o in t.outputs:
        kind = kinds.get(o)
        if kind is None:
            grad_in[o] = None
            continue
        gc = fresh("grad_" + o)
        grad_in[o] = gc
        expr: ScalarExpr = Sym(gc)
        if kind == "max":
            fc = fresh("fin_" + o)
            final[o] = fc
            expr = Binary("mul", Binary("ge", t.body[o], Sym(fc)), expr)
        geff[o] = expr

    bodies: dict[str, ScalarExpr] = {}
    grad_out: dict[str, str] = {}
    for i in t.inputs:
        if wanted is not None and i not in wanted:
            continue
        total: Optional[ScalarExpr] = None
        for o in t.outputs:
            if o not in geff:
                continue
            try:
                d = differentiate(t.body[o], i)
            except UnsupportedDerivativeError as err:
                raise ADError(f"tasklet {t.name!r}: {err}") from err
            if _is_zero(d):
                continue
            term = Binary("mul", d, geff[o])
            total = term if total is None else Binary("add", total, term)
        if total is None:
            continue
        expr = simplify(total)
        if _is_zero(expr):
            continue
        oc = fresh("grad_" + i)
        bodies[oc] = expr
        grad_out[i] = oc

    used_syms: set[str] = set()
    for expr in bodies.values():
        used_syms |= free_symbols(expr)
    needed = [i for i in t.inputs if i in used_syms]
    g_used = {o: (c if c is not None and c in used_syms else None) for o, c in grad_in.items()}
    f_used = {o: c for o, c in final.items() if c in used_syms}

    vjp_inputs = tuple(needed) + tuple(
        c for o in t.outputs for c in (g_used.get(o),) if c
    ) + tuple(f_used[o] for o in t.outputs if o in f_used)
    vjp = Tasklet(t.name + "_vjp", vjp_inputs, tuple(bodies), dict(bodies))
    return vjp, needed, g_used, f_used, grad_out


def reverse_tasklet(t: Tasklet) -> Tasklet:
    """VJP tasklet of a forward tasklet: for each input ``i`` it emits
    ``grad_i = Σ_j d(out_j)/d(i) · grad_out_j``, simplified. Inputs are
    the forward inputs the derivatives need plus one ``grad_<out>``
    connector per output; outputs are ``grad_<in>`` connectors for every
    input with a nonzero derivative."""
    vjp, *_ = _vjp_tasklet(t, {o: "plain" for o in t.outputs})
    return vjp


# ---------------------------------------------------------------------------
# Unit schedule and activity analysis


@dataclass
class _Item:
    """One top-level execution unit of a state: a node unit (tasklet,
    library node, nested graph, or map scope) or an access-to-access
    copy edge."""

    state: State
    kind: str  # "node" | "copy"
    nid: int = -1
    edge: Optional[Edge] = None
    reads: set = field(default_factory=set)
    writes: set = field(default_factory=set)

    @property
    def key(self):
        if self.kind == "node":
            return (self.state.name, "node", self.nid)
        e = self.edge
        return (self.state.name, "copy", e.src, e.dst, e.dst_conn, id(e))


def _state_items(g: Graph, st: State) -> list[_Item]:
    scope = st.scopes()
    order = st.topological()
    pos = {n: k for k, n in enumerate(order)}
    items: list[tuple[tuple, _Item]] = []
    for nid in order:
        if scope.get(nid) is not None:
            continue
        node = st.nodes[nid]
        if isinstance(node, (Tasklet, LibraryNode, NestedGraph, MapEntry)):
            item = _Item(st, "node", nid=nid)
            item.reads, item.writes = _node_rw(g, st, nid, scope)
            items.append(((pos[nid], 0, nid), item))
    for k, e in enumerate(st.edges):
        src = st.nodes.get(e.src)
        dst = st.nodes.get(e.dst)
        if (
            isinstance(src, AccessNode)
            and isinstance(dst, AccessNode)
            and scope.get(e.src) is None
            and scope.get(e.dst) is None
        ):
            item = _Item(st, "copy", edge=e)
            item.reads = {src.data}
            item.writes = {dst.data}
            items.append(((pos[e.dst], 1, k), item))
    items.sort(key=lambda pair: pair[0])
    return [item for _, item in items]


def _node_rw(g: Graph, st: State, nid: int, scope) -> tuple[set, set]:
    """Top-level containers a unit reads and writes (scope-local scratch
    is excluded: it is neither visible nor recoverable outside)."""
    node = st.nodes[nid]
    reads: set = set()
    writes: set = set()
    if isinstance(node, MapEntry):
        for e in st.in_edges(nid):
            src = st.nodes[e.src]
            if isinstance(src, AccessNode):
                reads.add(src.data)
        for e in st.out_edges(st.exit_of(nid)):
            dst = st.nodes[e.dst]
            if isinstance(dst, AccessNode):
                writes.add(dst.data)
    else:
        for e in st.in_edges(nid):
            src = st.nodes[e.src]
            if isinstance(src, AccessNode):
                reads.add(src.data)
        for e in st.out_edges(nid):
            dst = st.nodes[e.dst]
            if isinstance(dst, AccessNode):
                writes.add(dst.data)
    return reads, writes


def _all_items(g: Graph) -> list[_Item]:
    out: list[_Item] = []
    for st in g.states:
        out.extend(_state_items(g, st))
    return out


@dataclass
class _Activity:
    items: list[_Item]
    flags: list[bool]
    active: set
    coactive: set
    adjointed: set


def _activity(g: Graph, req: GradientRequest) -> _Activity:
    """Forward/backward reachability over the unit schedule.

    ``flags[k]`` marks units that both depend on a wrt container and
    influence a requested output; ``adjointed`` is the set of containers
    that need gradient storage. Non-float containers block gradient flow
    (any value derived through an integer or boolean is piecewise
    constant in the inputs, so its derivative contributes nothing)."""
    floats = {d.name for d in g.containers if d.dtype in FLOAT_DTYPES}
    items = _all_items(g)
    active = set(req.wrt)
    for item in items:
        if item.reads & active:
            active |= item.writes & floats
    coactive = set(req.outputs)
    for item in reversed(items):
        if item.writes & coactive:
            coactive |= item.reads & floats
    flags = [bool(item.reads & active and item.writes & coactive) for item in items]
    adjointed: set = set()
    for item, flag in zip(items, flags):
        if flag:
            adjointed |= (item.reads | item.writes) & active & coactive
    adjointed |= set(req.wrt) | set(req.outputs)
    return _Activity(items, flags, active, coactive, adjointed)


# ---------------------------------------------------------------------------
# Backward-state emission context


def _container_bytes(g: Graph, name: str):
    desc = g.container(name)
    size = np.dtype(ir.NUMPY_DTYPES[desc.dtype]).itemsize
    total: ScalarExpr = Const(size)
    for d in desc.shape:
        total = Binary("mul", total, d)
    total = simplify(total)
    if isinstance(total, Const):
        return int(total.value)
    from .symexpr import render

    return render(total)


class _Ctx:
    """State-level bookkeeping while emitting the backward state."""

    def __init__(self, g: Graph, bst: State, req: GradientRequest, items: list[_Item]):
        self.g = g
        self.bst = bst
        self.req = req
        self.adj: dict[str, str] = {}  # forward container -> grad container
        self._adj_nodes: dict[str, int] = {}  # grad container -> access nid
        self._val_nodes: dict[str, int] = {}  # forward container -> access nid
        self.materialized: set[str] = set()  # values readable in the backward state
        self.forwarded: list[dict] = []
        self._cloned: set = set()  # item keys already recomputed
        self.writers: dict[str, list[_Item]] = {}
        self.item_of_node: dict[tuple, _Item] = {}
        for item in items:
            for w in item.writes:
                self.writers.setdefault(w, []).append(item)

    # -- adjoint containers -------------------------------------------

    def adj_node(self, grad_name: str) -> int:
        if grad_name not in self._adj_nodes:
            self._adj_nodes[grad_name] = self.bst.add_access(grad_name)
        return self._adj_nodes[grad_name]

    # -- forward values -----------------------------------------------

    def ensure_value(self, name: str) -> None:
        """Make the forward value of ``name`` readable in the backward
        state, by stashing or by recomputation depending on policy."""
        desc = self.g.container(name)
        if desc.storage == "Global" or name in self.materialized:
            return
        if desc.storage == "Scoped":
            raise ADError(
                f"internal: scope-local container {name!r} reached state-level "
                "value resolution"
            )
        if self.req.policy == "StashAll":
            desc.storage = "Global"
            desc.stash = True
            self.materialized.add(name)
            self.forwarded.append(
                {
                    "name": name,
                    "bytes": _container_bytes(self.g, name),
                    "reason": "needed-by-VJP",
                }
            )
        else:
            self._recompute(name)

    def val_node(self, name: str) -> int:
        self.ensure_value(name)
        if name not in self._val_nodes:
            self._val_nodes[name] = self.bst.add_access(name)
        return self._val_nodes[name]

    def _val_target(self, name: str) -> int:
        """Access node recomputed values are written into (and later read
        from, so recompute-before-read ordering is a dataflow edge)."""
        if name not in self._val_nodes:
            self._val_nodes[name] = self.bst.add_access(name)
        return self._val_nodes[name]

    def _recompute(self, name: str) -> None:
        self.materialized.add(name)
        writers = self.writers.get(name, [])
        if not writers:
            raise ADError(f"cannot recompute {name!r}: nothing writes it")
        for item in writers:
            if item.key in self._cloned:
                continue
            self._cloned.add(item.key)
            for r in sorted(item.reads):
                if self.g.container(r).storage == "Transient":
                    if r not in self.materialized:
                        self._recompute(r)
                # Globals and constants are readable as-is.
            for w in sorted(item.writes):
                self.materialized.add(w)
            self._clone_item(item)

    def _clone_item(self, item: _Item) -> None:
        """Re-emit one forward unit into the backward state, reusing the
        same container names (the recomputed values are identical)."""
        st = item.state
        if item.kind == "copy":
            e = item.edge
            src = st.nodes[e.src].data
            dst = st.nodes[e.dst].data
            self.bst.add_edge(
                self.val_node(src), None, self._val_target(dst), None,
                copy.deepcopy(e.memlet),
            )
            return
        nid = item.nid
        node = st.nodes[nid]
        member_ids = [nid]
        if isinstance(node, MapEntry):
            member_ids += st.scope_subgraph(nid) + [st.exit_of(nid)]
        members = set(member_ids)
        idmap: dict[int, int] = {}
        rename: dict[str, str] = {}
        for mid in sorted(members):
            clone = copy.deepcopy(st.nodes[mid])
            if isinstance(clone, AccessNode):
                desc = self.g.container(clone.data)
                if desc.storage == "Scoped":
                    if clone.data not in rename:
                        fresh = self.g.fresh_name(clone.data + "_r")
                        self.g.add_container(
                            fresh, desc.shape, desc.dtype, storage="Scoped",
                            lifetime=desc.lifetime,
                        )
                        rename[clone.data] = fresh
                    clone.data = rename[clone.data]
            idmap[mid] = self.bst.add_node(clone)
        for mid in sorted(members):
            clone = self.bst.nodes[idmap[mid]]
            if isinstance(clone, MapExit):
                clone.entry = idmap[clone.entry]
        for e in st.edges:
            s_in, d_in = e.src in members, e.dst in members
            if not (s_in or d_in):
                continue
            m = copy.deepcopy(e.memlet)
            if m is not None and m.data in rename:
                m = Memlet(
                    rename[m.data], m.subset, None, m.wcr, m.wcr_identity,
                    m.dynamic, m.other_subset,
                )
            if s_in and d_in:
                self.bst.add_edge(idmap[e.src], e.src_conn, idmap[e.dst], e.dst_conn, m)
            elif d_in:
                src = st.nodes[e.src]
                if not isinstance(src, AccessNode):
                    raise ADError(
                        f"cannot recompute unit {nid}: non-access boundary input"
                    )
                self.bst.add_edge(
                    self.val_node(src.data), None, idmap[e.dst], e.dst_conn, m
                )
            else:
                dst = st.nodes[e.dst]
                if not isinstance(dst, AccessNode):
                    raise ADError(
                        f"cannot recompute unit {nid}: non-access boundary output"
                    )
                self.bst.add_edge(
                    idmap[e.src], e.src_conn, self._val_target(dst.data), None, m
                )

    # -- helpers for emitting backward compute -------------------------

    def read_node(self, name: str) -> int:
        """Access node providing ``name`` for reads in the backward state:
        a gradient/partial produced here, or a forward value."""
        if name in self._adj_nodes:
            return self._adj_nodes[name]
        return self.val_node(name)

    def fresh_transient(self, base: str, shape, dtype: str) -> str:
        name = self.g.fresh_name(base)
        self.g.add_container(name, shape, dtype, storage="Transient")
        return name

    def lib(
        self,
        op: str,
        attrs: dict,
        in_names: Sequence[str],
        label: Optional[str] = None,
    ) -> list[str]:
        """Emit a library node reading ``in_names``; returns the names of
        fresh transient outputs (full-subset wiring on both sides)."""
        merged = frontend.normalize_attrs(op, attrs)
        shapes = [tuple(self.g.container(n).shape) for n in in_names]
        dtypes = [self.g.container(n).dtype for n in in_names]
        inferred = frontend.infer_shapes(op, merged, shapes, dtypes)
        base = label or op.lower()
        outs = []
        for k, (shape, dtype) in enumerate(inferred):
            outs.append(self.fresh_transient(f"{base}_o{k}", shape, dtype))
        node = LibraryNode(
            op,
            self.g.fresh_name(base + "_bwd"),
            merged,
            tuple(f"in_{k}" for k in range(len(in_names))),
            tuple(f"out_{k}" for k in range(len(outs))),
        )
        nid = self.bst.add_node(node)
        for k, name in enumerate(in_names):
            self.bst.add_edge(
                self.read_node(name), None, nid, f"in_{k}",
                Memlet(name, Subset.full(self.g.container(name).shape)),
            )
        for k, name in enumerate(outs):
            self.bst.add_edge(
                nid, f"out_{k}", self._val_target(name), None,
                Memlet(name, Subset.full(self.g.container(name).shape)),
            )
        return outs

    def map_custom(
        self,
        label: str,
        domain: Sequence[tuple],
        body: dict,
        ins: Sequence[tuple],
        outs: Sequence[tuple],
    ) -> None:
        """Emit one parallel map.  domain: [(param, extent)], ins:
        [(conn, container, index list)], outs: [(conn, container, index
        list, wcr)] — gradient containers resolve to their shared access
        node so accumulation stays ordered."""
        params = [p for p, _ in domain]
        levels = [(params, [(0, ext, 1) for _, ext in domain])] if domain else []
        b_ins = [
            (conn, self.read_node(name), name, list(idx)) for conn, name, idx in ins
        ]
        b_outs = []
        for conn, name, idx, wcr in outs:
            if name in self._adj_nodes:
                acc = self._adj_nodes[name]
            else:
                acc = self._val_target(name)
            b_outs.append((conn, acc, name, list(idx), wcr, None))
        lowering.build_map(self.g, self.bst, label, levels, b_ins, b_outs, body)

    def ew(
        self,
        label: str,
        body: str,
        in_names: Sequence[str],
        out_shape=None,
        out_dtype: Optional[str] = None,
    ) -> str:
        """Elementwise map with right-aligned broadcasting; body refers to
        inputs as v0, v1, ... and writes connector ``o``. Returns the
        fresh output container."""
        shapes = [tuple(self.g.container(n).shape) for n in in_names]
        if out_shape is None:
            out_shape = shapes[0]
            for s in shapes[1:]:
                out_shape = frontend._broadcast(out_shape, s, label)
        dtype = out_dtype or next(
            (self.g.container(n).dtype for n in in_names
             if self.g.container(n).dtype in FLOAT_DTYPES),
            "f64",
        )
        out = self.fresh_transient(label, out_shape, dtype)
        rank = len(out_shape)
        params = [f"i{k}" for k in range(rank)]
        ins = [
            (f"v{k}", name, lowering._bcast_index(shapes[k], params, rank))
            for k, name in enumerate(in_names)
        ]
        self.map_custom(
            label,
            [(p, out_shape[k]) for k, p in enumerate(params)],
            {"o": body},
            ins,
            [("o", out, params, None)],
        )
        return out

    def scale(self, name: str, factor: float, label: str = "scaled") -> str:
        if float(factor) == 1.0:
            return name
        return self.ew(label, f"v0 * {float(factor)!r}", [name])

    def unbroadcast(self, name: str, target_shape) -> str:
        """Reduce a broadcast gradient back to the target shape by summing
        the broadcast axes (right-aligned rules)."""
        from .symexpr import expr_equal

        src_shape = tuple(self.g.container(name).shape)
        target = tuple(ir.as_expr(s) for s in target_shape)
        if len(src_shape) == len(target) and all(
            expr_equal(a, b) for a, b in zip(src_shape, target)
        ):
            return name
        pad = len(src_shape) - len(target)
        padded = (Const(1),) * pad + target
        inner_axes = [
            k
            for k in range(len(src_shape))
            if not expr_equal(padded[k], src_shape[k])
        ]
        cur = name
        if inner_axes:
            cur = self.lib(
                "ReduceSum", {"axes": inner_axes, "keepdims": 1}, [cur], "unbcast"
            )[0]
        if pad:
            cur = self.lib(
                "ReduceSum", {"axes": list(range(pad)), "keepdims": 0}, [cur], "unpad"
            )[0]
        return cur

    def accumulate(self, src: str, fwd_target: str) -> None:
        """Add ``src`` into the adjoint of ``fwd_target`` (skipped when the
        target has no adjoint)."""
        grad = self.adj.get(fwd_target)
        if grad is None:
            return
        shape = tuple(self.g.container(src).shape)
        params = [f"i{k}" for k in range(len(shape))]
        self.map_custom(
            f"acc_{fwd_target}",
            [(p, shape[k]) for k, p in enumerate(params)],
            {"o": "v0"},
            [("v0", src, params)],
            [("o", grad, params, "sum")],
        )

    def fill(self, grad_name: str, value: float) -> None:
        desc = self.g.container(grad_name)
        acc = self.adj_node(grad_name)
        shape = desc.shape
        params = [f"i{k}" for k in range(len(shape))]
        levels = [(params, [(0, d, 1) for d in shape])] if shape else []
        lowering.build_map(
            self.g,
            self.bst,
            f"seed_{grad_name}" if value else f"zero_{grad_name}",
            levels,
            [],
            [("o", acc, grad_name, params, None, None)],
            {"o": repr(float(value))},
        )


# ---------------------------------------------------------------------------
# Scope reversal


class _SCtx:
    """Wiring context for one reversed map scope (possibly nested)."""

    def __init__(self, ctx: _Ctx, st: State, fwd_entry: int, parent: Optional["_SCtx"]):
        self.ctx = ctx
        self.st = st
        self.g = ctx.g
        self.bst = ctx.bst
        self.parent = parent
        self.fwd_entry = fwd_entry
        fe = st.nodes[fwd_entry]
        self.bwd_entry, self.bwd_exit = ctx.bst.add_map(
            fe.label + "_bwd", fe.params, copy.deepcopy(fe.ranges)
        )
        self.scope = st.scopes()
        # Scope-local containers whose access nodes sit directly at this
        # level (written by member tasklets or through inner map exits)
        self.owned: dict[str, list[int]] = {}
        for nid in st.scope_subgraph(fwd_entry):
            node = st.nodes[nid]
            if (
                isinstance(node, AccessNode)
                and self.scope[nid] == fwd_entry
                and self.g.container(node.data).storage == "Scoped"
            ):
                self.owned.setdefault(node.data, []).append(nid)
        self.feeds: dict[tuple, tuple] = {}  # (kind, name) -> (nid, conn, data)
        self.sinks: dict[str, tuple] = {}  # name -> (nid, conn, data, ident)
        self.gv: dict[str, tuple] = {}  # scoped name -> (grad container, access nid)
        self.rec: dict[str, tuple] = {}  # scoped name -> (value container, access nid)
        self.rec_units: set[int] = set()  # forward producer ids already cloned
        self._clone_cache: dict[int, int] = {}  # fwd tasklet id -> bwd id
        self.emitted = 0

    # -- ownership ------------------------------------------------------

    def _owner(self, name: str) -> Optional["_SCtx"]:
        sx: Optional[_SCtx] = self
        while sx is not None:
            if name in sx.owned:
                return sx
            sx = sx.parent
        return None

    # -- adjoint presence / sinkability ----------------------------------

    def has_adjoint(self, name: str) -> bool:
        owner = self._owner(name)
        if owner is not None:
            return name in owner.gv
        return name in self.ctx.adj

    def sinkable(self, name: str) -> bool:
        if self._owner(name) is not None:
            return True
        return name in self.ctx.adj

    # -- value / gradient feeds (reads inside this scope) ----------------

    def source_in(self, kind: str, name: str) -> tuple[int, Optional[str], str]:
        """(node, connector, data) providing ``name`` inside this scope;
        kind "v" resolves the forward value, "g" the accumulated
        adjoint."""
        if name in self.owned:
            if kind == "v":
                nid = self.recompute(name)
                return nid, None, self.rec[name][0]
            gname, nid = self.gv[name]  # caller checked has_adjoint
            return nid, None, gname
        key = (kind, name)
        if key in self.feeds:
            return self.feeds[key]
        if self.parent is not None:
            onid, oconn, data = self.parent.source_in(kind, name)
        elif kind == "v":
            data = name
            onid, oconn = self.ctx.val_node(name), None
        else:
            data = self.ctx.adj[name]
            onid, oconn = self.ctx.adj_node(data), None
        token = f"{'v' if kind == 'v' else 'g'}_{data}"
        self.bst.add_edge(
            onid, oconn, self.bwd_entry, f"in_{token}",
            Memlet(data, Subset.full(self.g.container(data).shape)),
        )
        out = (self.bwd_entry, f"out_{token}", data)
        self.feeds[key] = out
        return out

    # -- gradient sinks (contributions leaving this scope) ---------------

    def gv_access(self, name: str) -> tuple[str, int]:
        if name not in self.gv:
            desc = self.g.container(name)
            gname = self.g.fresh_name("grad_" + name)
            self.g.add_container(gname, desc.shape, desc.dtype, storage="Scoped")
            self.gv[name] = (gname, self.bst.add_access(gname))
        return self.gv[name]

    def sink(self, name: str) -> tuple[int, Optional[str], str, Optional[float]]:
        """(node, connector, data, wcr identity) to write a gradient
        contribution for container ``name`` from inside this scope."""
        if name in self.owned:
            gname, nid = self.gv_access(name)
            return nid, None, gname, 0.0
        if name in self.sinks:
            return self.sinks[name]
        if self.parent is not None:
            onid, oconn, data, ident = self.parent.sink(name)
        else:
            data = self.ctx.adj[name]
            onid, oconn, ident = self.ctx.adj_node(data), None, None
        token = f"d_{data}"
        self.bst.add_edge(
            self.bwd_exit, f"out_{token}", onid, oconn,
            Memlet(
                data, Subset.full(self.g.container(data).shape),
                wcr="sum", wcr_identity=ident,
            ),
        )
        out = (self.bwd_exit, f"in_{token}", data, ident)
        self.sinks[name] = out
        return out

    # -- scope-local recomputation ---------------------------------------

    def recompute(self, name: str) -> int:
        """Access node holding the recomputed value of forward scope-local
        container ``name`` (renamed; producers are cloned on demand)."""
        if name in self.rec:
            return self.rec[name][1]
        desc = self.g.container(name)
        fresh = self.g.fresh_name(name + "_val")
        self.g.add_container(fresh, desc.shape, desc.dtype, storage="Scoped")
        acc = self.bst.add_access(fresh)
        self.rec[name] = (fresh, acc)
        for anid in self.owned[name]:
            for e in self.st.in_edges(anid):
                src = self.st.nodes[e.src]
                if isinstance(src, Tasklet):
                    self._clone_tasklet(e.src)
                elif isinstance(src, MapExit):
                    self._clone_inner_scope(src.entry)
                else:
                    raise ADError(
                        f"cannot recompute scope value {name!r}: unsupported "
                        "producer"
                    )
        return acc

    def _discard_target(self, ext: str) -> tuple[str, int]:
        """Scoped write-only stand-in for a value that leaves the forward
        unit some other way; recomputation keeps the connector wired but
        nothing reads the result."""
        desc = self.g.container(ext)
        scratch = self.g.fresh_name(ext + "_dis")
        self.g.add_container(scratch, desc.shape, desc.dtype, storage="Scoped")
        return scratch, self.bst.add_access(scratch)

    def _resolve_member_read(self, e: Edge) -> tuple[int, Optional[str], Memlet]:
        """Backward-side (src node, src conn, memlet) for a forward read
        edge of a member node."""
        src = self.st.nodes[e.src]
        m = e.memlet
        if isinstance(src, MapEntry) and e.src == self.fwd_entry:
            snid, sconn, data = self.source_in("v", m.data)
            return snid, sconn, Memlet(data, copy.deepcopy(m.subset))
        if isinstance(src, AccessNode):
            desc = self.g.container(src.data)
            if desc.storage == "Scoped":
                acc = self.recompute(src.data)
                return acc, None, Memlet(self.rec[src.data][0], copy.deepcopy(m.subset))
        raise ADError(
            f"unsupported read source inside map scope (node {e.src})"
        )

    def _clone_tasklet(self, tid: int) -> int:
        if tid in self._clone_cache:
            return self._clone_cache[tid]
        clone = copy.deepcopy(self.st.nodes[tid])
        nid = self.bst.add_node(clone)
        self._clone_cache[tid] = nid
        for e in self.st.in_edges(tid):
            snid, sconn, m = self._resolve_member_read(e)
            self.bst.add_edge(snid, sconn, nid, e.dst_conn, m)
        for e in self.st.out_edges(tid):
            dst = self.st.nodes[e.dst]
            m = e.memlet
            if isinstance(dst, ir.AccessNode) and dst.data in self.owned:
                acc = self.recompute(dst.data)
                m2 = Memlet(
                    self.rec[dst.data][0],
                    copy.deepcopy(m.subset),
                    None,
                    m.wcr,
                    m.wcr_identity if m.wcr is None or m.wcr_identity is not None else 0.0,
                    m.dynamic,
                )
                self.bst.add_edge(nid, e.src_conn, acc, None, m2)
            else:
                scratch, acc = self._discard_target(m.data)
                m2 = Memlet(scratch, copy.deepcopy(m.subset))
                self.bst.add_edge(nid, e.src_conn, acc, None, m2)
        return nid

    def _clone_inner_scope(self, ientry: int) -> None:
        """Clone a whole inner map unit (recomputing its scoped outputs);
        all scope-local containers inside are renamed fresh, and hull
        memlets for values resolved outside the subtree are rewritten to
        their backward-side stand-ins."""
        if ientry in self.rec_units:
            return
        self.rec_units.add(ientry)
        st = self.st
        iexit = st.exit_of(ientry)
        members = [ientry] + st.scope_subgraph(ientry) + [iexit]
        mset = set(members)
        # Resolve boundary connections first: they fix how every container
        # crossing the subtree boundary is named on the backward side.
        in_rewire: dict[int, tuple] = {}
        out_rewire: dict[int, int] = {}
        data_map: dict[str, str] = {}
        dis_data: set[str] = set()

        def _ident(m: Memlet) -> object:
            # Scoped targets need an explicit reduction identity; discard
            # buffers get one filled in since their forward edge (resolving
            # to a top-level container) could omit it.
            if m.wcr is not None and m.wcr_identity is None:
                return float("-inf") if m.wcr == "max" else 0.0
            return m.wcr_identity
        for e in st.edges:
            s_in, d_in = e.src in mset, e.dst in mset
            if d_in and not s_in:
                snid, sconn, m2 = self._resolve_member_read(e)
                in_rewire[id(e)] = (snid, sconn, m2)
                data_map[e.memlet.data] = m2.data
            elif s_in and not d_in:
                dst = st.nodes[e.dst]
                if isinstance(dst, AccessNode) and dst.data in self.owned:
                    out_rewire[id(e)] = self.recompute(dst.data)
                    data_map[dst.data] = self.rec[dst.data][0]
                else:
                    # Value leaves the unit some other way (e.g. through the
                    # enclosing exit); only the scoped outputs matter here,
                    # so the extra write lands in a discard buffer.
                    scratch, acc = self._discard_target(e.memlet.data)
                    out_rewire[id(e)] = acc
                    data_map[e.memlet.data] = scratch
                    dis_data.add(scratch)
        idmap: dict[int, int] = {}
        for mid in sorted(mset):
            clone = copy.deepcopy(st.nodes[mid])
            if isinstance(clone, AccessNode):
                desc = self.g.container(clone.data)
                if desc.storage == "Scoped":
                    if clone.data not in data_map:
                        fresh = self.g.fresh_name(clone.data + "_r")
                        self.g.add_container(fresh, desc.shape, desc.dtype, storage="Scoped")
                        data_map[clone.data] = fresh
                    clone.data = data_map[clone.data]
            idmap[mid] = self.bst.add_node(clone)
        for mid in sorted(mset):
            clone = self.bst.nodes[idmap[mid]]
            if isinstance(clone, MapExit):
                clone.entry = idmap[clone.entry]
        for e in st.edges:
            s_in, d_in = e.src in mset, e.dst in mset
            if not (s_in or d_in):
                continue
            if s_in and d_in:
                m = copy.deepcopy(e.memlet)
                if m is not None and m.data in data_map:
                    new = data_map[m.data]
                    ident = _ident(m) if new in dis_data else m.wcr_identity
                    m = Memlet(new, m.subset, None, m.wcr, ident, m.dynamic)
                self.bst.add_edge(idmap[e.src], e.src_conn, idmap[e.dst], e.dst_conn, m)
            elif d_in:
                snid, sconn, m2 = in_rewire[id(e)]
                self.bst.add_edge(snid, sconn, idmap[e.dst], e.dst_conn, m2)
            else:
                m = e.memlet
                new = data_map[m.data]
                ident = _ident(m) if new in dis_data else m.wcr_identity
                m3 = Memlet(
                    new, copy.deepcopy(m.subset), None, m.wcr, ident, m.dynamic,
                )
                self.bst.add_edge(idmap[e.src], e.src_conn, out_rewire[id(e)], None, m3)


def _member_units(st: State, entry_id: int) -> list[int]:
    scope = st.scopes()
    return [
        nid
        for nid in st.topological()
        if scope.get(nid) == entry_id
        and isinstance(st.nodes[nid], (Tasklet, MapEntry))
    ]


def _reverse_scope(ctx: _Ctx, st: State, entry_id: int, parent: Optional[_SCtx]) -> None:
    scope = st.scopes()
    for nid in st.scope_subgraph(entry_id):
        if scope.get(nid) == entry_id and isinstance(
            st.nodes[nid], (LibraryNode, NestedGraph)
        ):
            raise ADError(
                "library and nested-graph nodes inside map scopes cannot be "
                "differentiated; expand them first"
            )
    sx = _SCtx(ctx, st, entry_id, parent)
    for nid in reversed(_member_units(st, entry_id)):
        node = st.nodes[nid]
        if isinstance(node, MapEntry):
            _reverse_scope(ctx, st, nid, sx)
        else:
            _reverse_member_tasklet(sx, nid)
    if sx.emitted == 0 and ctx.bst.degree(sx.bwd_entry) == 0 and ctx.bst.degree(sx.bwd_exit) == 0:
        ctx.bst.remove_node(sx.bwd_entry)
        ctx.bst.remove_node(sx.bwd_exit)
    elif parent is not None and sx.emitted:
        parent.emitted += 1


def _reverse_member_tasklet(sx: _SCtx, tid: int) -> None:
    st, ctx = sx.st, sx.ctx
    t: Tasklet = st.nodes[tid]
    ins: dict[str, tuple] = {}  # conn -> (kind, data, subset)
    for e in st.in_edges(tid):
        src = st.nodes[e.src]
        if isinstance(src, MapEntry):
            ins[e.dst_conn] = ("ext", e.memlet.data, e.memlet.subset)
        elif isinstance(src, AccessNode):
            ins[e.dst_conn] = ("scoped", src.data, e.memlet.subset)
        else:
            raise ADError(f"unsupported input edge into scope tasklet {t.name!r}")
    outs: dict[str, tuple] = {}  # conn -> (kind, data, subset, wcr)
    for e in st.out_edges(tid):
        if e.src_conn in outs:
            raise ADError(
                f"tasklet {t.name!r}: one output connector writes several "
                "containers; differentiation does not support this"
            )
        dst = st.nodes[e.dst]
        if isinstance(dst, MapExit):
            outs[e.src_conn] = ("ext", e.memlet.data, e.memlet.subset, e.memlet.wcr)
        elif isinstance(dst, AccessNode):
            outs[e.src_conn] = ("scoped", dst.data, e.memlet.subset, e.memlet.wcr)
        else:
            raise ADError(f"unsupported output edge from scope tasklet {t.name!r}")

    kinds: dict[str, Optional[str]] = {}
    for conn in t.outputs:
        if conn not in outs:
            kinds[conn] = None
            continue
        kind, data, _sub, wcr = outs[conn]
        present = (data in sx.gv) if kind == "scoped" else sx.has_adjoint(data)
        if not present:
            kinds[conn] = None
        elif wcr == "max":
            kinds[conn] = "max"
        else:
            kinds[conn] = "plain"
    if all(v is None for v in kinds.values()):
        return
    wanted = set()
    for conn, (kind, data, _sub) in ins.items():
        if kind == "scoped" or sx.sinkable(data):
            wanted.add(conn)
    vjp, needed, g_used, f_used, grad_out = _vjp_tasklet(t, kinds, wanted)
    if not grad_out:
        return
    nid2 = sx.bst.add_node(vjp)

    for conn in needed:
        kind, data, subset = ins[conn]
        if kind == "scoped":
            acc = sx.recompute(data)
            m = Memlet(sx.rec[data][0], copy.deepcopy(subset))
            sx.bst.add_edge(acc, None, nid2, conn, m)
        else:
            snid, sconn, dname = sx.source_in("v", data)
            sx.bst.add_edge(snid, sconn, nid2, conn, Memlet(dname, copy.deepcopy(subset)))
    for oconn, fconn in f_used.items():
        kind, data, subset, _w = outs[oconn]
        if kind == "scoped":
            acc = sx.recompute(data)
            m = Memlet(sx.rec[data][0], copy.deepcopy(subset))
            sx.bst.add_edge(acc, None, nid2, fconn, m)
        else:
            snid, sconn, dname = sx.source_in("v", data)
            sx.bst.add_edge(snid, sconn, nid2, fconn, Memlet(dname, copy.deepcopy(subset)))
    for oconn, gcn in g_used.items():
        if gcn is None:
            continue
        kind, data, subset, _w = outs[oconn]
        if kind == "scoped":
            gname, acc = sx.gv[data]
            sx.bst.add_edge(acc, None, nid2, gcn, Memlet(gname, copy.deepcopy(subset)))
        else:
            snid, sconn, gdata = sx.source_in("g", data)
            sx.bst.add_edge(snid, sconn, nid2, gcn, Memlet(gdata, copy.deepcopy(subset)))
    for iconn, oc in grad_out.items():
        kind, data, subset = ins[iconn]
        if kind == "scoped":
            gname, acc = sx.gv_access(data)
            m = Memlet(gname, copy.deepcopy(subset), wcr="sum", wcr_identity=0.0)
            sx.bst.add_edge(nid2, oc, acc, None, m)
        else:
            dnid, dconn, gdata, ident = sx.sink(data)
            m = Memlet(gdata, copy.deepcopy(subset), wcr="sum", wcr_identity=ident)
            sx.bst.add_edge(nid2, oc, dnid, dconn, m)
    sx.emitted += 1


# ---------------------------------------------------------------------------
# Top-level unit reversal


def _reverse_copy(ctx: _Ctx, item: _Item) -> None:
    st = item.state
    e = item.edge
    src_data = st.nodes[e.src].data
    dst_data = st.nodes[e.dst].data
    g_dst = ctx.adj.get(dst_data)
    g_src = ctx.adj.get(src_data)
    if g_dst is None or g_src is None:
        return
    m = e.memlet
    if m.wcr == "max":
        raise ADError("max-combining copies cannot be differentiated")
    src_sub = copy.deepcopy(m.subset)
    dst_sub = copy.deepcopy(m.other_subset) if m.other_subset is not None else copy.deepcopy(m.subset)
    ctx.bst.add_edge(
        ctx.adj_node(g_dst), None, ctx.adj_node(g_src), None,
        Memlet(g_dst, dst_sub, wcr="sum", other_subset=src_sub),
    )


def _reverse_top_tasklet(ctx: _Ctx, item: _Item) -> None:
    st = item.state
    nid = item.nid
    t: Tasklet = st.nodes[nid]
    ins: dict[str, tuple] = {}
    for e in st.in_edges(nid):
        src = st.nodes[e.src]
        if not isinstance(src, AccessNode):
            raise ADError(f"unsupported input edge into tasklet {t.name!r}")
        ins[e.dst_conn] = (src.data, e.memlet.subset)
    outs: dict[str, tuple] = {}
    for e in st.out_edges(nid):
        if e.src_conn in outs:
            raise ADError(
                f"tasklet {t.name!r}: one output connector writes several "
                "containers; differentiation does not support this"
            )
        dst = st.nodes[e.dst]
        if not isinstance(dst, AccessNode):
            raise ADError(f"unsupported output edge from tasklet {t.name!r}")
        outs[e.src_conn] = (dst.data, e.memlet.subset, e.memlet.wcr)

    kinds: dict[str, Optional[str]] = {}
    for conn in t.outputs:
        if conn not in outs or ctx.adj.get(outs[conn][0]) is None:
            kinds[conn] = None
        elif outs[conn][2] == "max":
            kinds[conn] = "max"
        else:
            kinds[conn] = "plain"
    if all(v is None for v in kinds.values()):
        return
    wanted = {conn for conn, (data, _s) in ins.items() if ctx.adj.get(data)}
    vjp, needed, g_used, f_used, grad_out = _vjp_tasklet(t, kinds, wanted)
    if not grad_out:
        return
    nid2 = ctx.bst.add_node(vjp)
    for conn in needed:
        data, subset = ins[conn]
        ctx.bst.add_edge(
            ctx.val_node(data), None, nid2, conn, Memlet(data, copy.deepcopy(subset))
        )
    for oconn, fconn in f_used.items():
        data, subset, _w = outs[oconn]
        ctx.bst.add_edge(
            ctx.val_node(data), None, nid2, fconn, Memlet(data, copy.deepcopy(subset))
        )
    for oconn, gcn in g_used.items():
        if gcn is None:
            continue
        data, subset, _w = outs[oconn]
        grad = ctx.adj[data]
        ctx.bst.add_edge(
            ctx.adj_node(grad), None, nid2, gcn, Memlet(grad, copy.deepcopy(subset))
        )
    for iconn, oc in grad_out.items():
        data, subset = ins[iconn]
        grad = ctx.adj[data]
        ctx.bst.add_edge(
            nid2, oc, ctx.adj_node(grad), None,
            Memlet(grad, copy.deepcopy(subset), wcr="sum"),
        )


def _reverse_nested(ctx: _Ctx, item: _Item) -> None:
    st = item.state
    nid = item.nid
    node: NestedGraph = st.nodes[nid]
    in_data: dict[str, str] = {}
    for e in st.in_edges(nid):
        src = st.nodes[e.src]
        if not isinstance(src, AccessNode):
            raise ADError("unsupported input edge into nested graph")
        in_data[e.dst_conn] = src.data
    out_data: dict[str, str] = {}
    for e in st.out_edges(nid):
        dst = st.nodes[e.dst]
        if not isinstance(dst, AccessNode):
            raise ADError("unsupported output edge from nested graph")
        out_data[e.src_conn] = dst.data

    inner_outputs = [
        node.output_map[c]
        for c in sorted(out_data)
        if ctx.adj.get(out_data[c]) is not None
    ]
    inner_wrt = [
        node.input_map[c]
        for c in sorted(in_data)
        if ctx.adj.get(in_data[c]) is not None
    ]
    if not inner_outputs or not inner_wrt:
        return
    inner_req = GradientRequest(
        outputs=tuple(inner_outputs),
        wrt=tuple(inner_wrt),
        policy="StashAll",
        seed="input",
    )
    res = differentiate_graph(node.graph, inner_req)

    input_map = dict(node.input_map)
    output_map: dict[str, str] = {}

    def fresh_conn(base: str) -> str:
        name = base
        while name in input_map or name in output_map:
            name += "_"
        return name

    seed_conns: dict[str, str] = {}
    for c in sorted(out_data):
        if ctx.adj.get(out_data[c]) is None:
            continue
        conn = fresh_conn(f"grad_{c}")
        input_map[conn] = res.adjoints.grads[node.output_map[c]]
        seed_conns[c] = conn
    grad_conns: dict[str, str] = {}
    for c in sorted(in_data):
        if ctx.adj.get(in_data[c]) is None:
            continue
        conn = fresh_conn(f"grad_{c}")
        output_map[conn] = res.adjoints.grads[node.input_map[c]]
        grad_conns[c] = conn

    bwd = NestedGraph(node.name + "_bwd", res.graph, input_map, output_map)
    nid2 = ctx.bst.add_node(bwd)
    for c in sorted(in_data):
        data = in_data[c]
        ctx.bst.add_edge(
            ctx.val_node(data), None, nid2, c,
            Memlet(data, Subset.full(ctx.g.container(data).shape)),
        )
    for c, conn in seed_conns.items():
        data = out_data[c]
        grad = ctx.adj[data]
        ctx.bst.add_edge(
            ctx.adj_node(grad), None, nid2, conn,
            Memlet(grad, Subset.full(ctx.g.container(grad).shape)),
        )
    for c, conn in grad_conns.items():
        data = in_data[c]
        desc = ctx.g.container(data)
        partial = ctx.fresh_transient(f"grad_{data}_part", desc.shape, desc.dtype)
        ctx.bst.add_edge(
            nid2, conn, ctx._val_target(partial), None,
            Memlet(partial, Subset.full(desc.shape)),
        )
        ctx.accumulate(partial, data)


def _reverse_library(ctx: _Ctx, item: _Item) -> None:
    st = item.state
    nid = item.nid
    node: LibraryNode = st.nodes[nid]
    in_names: list[str] = []
    for conn in node.in_conns:
        e = next(e for e in st.in_edges(nid) if e.dst_conn == conn)
        in_names.append(st.nodes[e.src].data)
    out_names: list[str] = []
    for conn in node.out_conns:
        e = next(e for e in st.out_edges(nid) if e.src_conn == conn)
        out_names.append(st.nodes[e.dst].data)
    manual = _MANUAL.get(node.op)
    if manual is None:
        raise ADError(
            f"internal: library node {node.op} survived pre-differentiation "
            "lowering without a manual backward"
        )
    wanted = [ctx.adj.get(n) is not None for n in in_names]
    manual.build(ctx, node, in_names, out_names, wanted)


# ---------------------------------------------------------------------------
# Manual backward registry


@dataclass
class _ManualVJP:
    build: Callable
    decline: Callable  # (g, node, in_names, out_names, outs_adjointed) -> str | None


_MANUAL: dict[str, _ManualVJP] = {}


def _register_manual(op: str, build: Callable, decline: Optional[Callable] = None):
    _MANUAL[op] = _ManualVJP(build, decline or (lambda *a: None))
    frontend.get_op(op).backward = build


def manual_backward(op: str) -> Optional[Callable]:
    """The registered manual VJP builder for an operator, or None (meaning
    the operator is differentiated by lowering it and recursing)."""
    entry = _MANUAL.get(op)
    return entry.build if entry else None


def _gout_name(ctx: _Ctx, out_names: Sequence[str], k: int = 0) -> Optional[str]:
    return ctx.adj.get(out_names[k])


# -- Einsum ------------------------------------------------------------------


def _einsum_vjp_terms(terms: list[str], out_term: str, k: int):
    """Equation computing the gradient of operand k: contract the output
    adjoint with every other operand, producing operand k's index set."""
    others = [t for j, t in enumerate(terms) if j != k]
    lhs = ",".join([out_term] + others)
    return f"{lhs}->{terms[k]}", others


def _decline_einsum(g, node, in_names, out_names, outs_adjointed):
    try:
        terms, out_term = frontend.parse_einsum(
            node.attrs["equation"], len(in_names)
        )
    except Exception as err:  # malformed equations fall back to lowering
        return str(err)
    for term in terms + [out_term]:
        if len(set(term)) != len(term):
            return "repeated index within one operand"
    for k, term in enumerate(terms):
        bound = set(out_term)
        for j, other in enumerate(terms):
            if j != k:
                bound |= set(other)
        if not set(term) <= bound:
            return f"operand {k} has indices summed away in every other term"
    return None


def _bwd_einsum(ctx: _Ctx, node, in_names, out_names, wanted):
    terms, out_term = frontend.parse_einsum(node.attrs["equation"], len(in_names))
    gout = _gout_name(ctx, out_names)
    if gout is None:
        return
    _emit_einsum_grads(ctx, terms, out_term, in_names, gout, wanted, in_names)


def _emit_einsum_grads(ctx, terms, out_term, operand_names, gout, wanted, targets,
                       scale: float = 1.0):
    gsrc = ctx.scale(gout, scale, "grad_scaled")
    for k, term in enumerate(terms):
        if not wanted[k]:
            continue
        eq, others = _einsum_vjp_terms(terms, out_term, k)
        operands = [gsrc] + [
            operand_names[j] for j in range(len(terms)) if j != k
        ]
        for name in operands[1:]:
            ctx.ensure_value(name)
        part = ctx.lib("Einsum", {"equation": eq}, operands, "grad_contract")[0]
        ctx.accumulate(part, targets[k])


_register_manual("Einsum", _bwd_einsum, _decline_einsum)


# -- MatMul / Gemm -----------------------------------------------------------


def _decline_matmul(g, node, in_names, out_names, outs_adjointed):
    a = g.container(in_names[0]).shape
    b = g.container(in_names[1]).shape
    if len(a) != 2 or len(b) != 2:
        return "only the rank-2 case is reversed directly"
    return None


def _bwd_matmul(ctx: _Ctx, node, in_names, out_names, wanted):
    gout = _gout_name(ctx, out_names)
    if gout is None:
        return
    _emit_einsum_grads(
        ctx, ["ij", "jk"], "ik", in_names, gout, wanted, in_names
    )


_register_manual("MatMul", _bwd_matmul, _decline_matmul)


def _bwd_gemm(ctx: _Ctx, node, in_names, out_names, wanted):
    gout = _gout_name(ctx, out_names)
    if gout is None:
        return
    term_a = "ki" if node.attrs.get("transA") else "ik"
    term_b = "jk" if node.attrs.get("transB") else "kj"
    alpha = float(node.attrs.get("alpha", 1.0))
    beta = float(node.attrs.get("beta", 1.0))
    _emit_einsum_grads(
        ctx, [term_a, term_b], "ij", in_names[:2], gout, wanted[:2],
        in_names[:2], scale=alpha,
    )
    if len(in_names) == 3 and wanted[2]:
        scaled = ctx.scale(gout, beta, "grad_bias_scaled")
        part = ctx.unbroadcast(scaled, ctx.g.container(in_names[2]).shape)
        ctx.accumulate(part, in_names[2])


_register_manual("Gemm", _bwd_gemm)


# -- Softmax -----------------------------------------------------------------


def _bwd_softmax(ctx: _Ctx, node, in_names, out_names, wanted):
    if not wanted[0]:
        return
    gout = _gout_name(ctx, out_names)
    if gout is None:
        return
    y = out_names[0]
    ctx.ensure_value(y)
    rank = len(ctx.g.container(y).shape)
    axis = int(node.attrs.get("axis", -1)) % rank
    prod = ctx.lib("Mul", {}, [gout, y], "sm_gy")[0]
    total = ctx.lib(
        "ReduceSum", {"axes": [axis], "keepdims": 1}, [prod], "sm_total"
    )[0]
    centered = ctx.lib("Sub", {}, [gout, total], "sm_centered")[0]
    part = ctx.lib("Mul", {}, [centered, y], "sm_grad")[0]
    ctx.accumulate(part, in_names[0])


_register_manual("Softmax", _bwd_softmax)


# -- LayerNormalization --------------------------------------------------------


def _bwd_layernorm(ctx: _Ctx, node, in_names, out_names, wanted):
    gout = _gout_name(ctx, out_names)
    if gout is None:
        return
    x, scale = in_names[0], in_names[1]
    ctx.ensure_value(x)
    ctx.ensure_value(scale)
    shape = tuple(ctx.g.container(x).shape)
    rank = len(shape)
    axis = int(node.attrs.get("axis", -1)) % rank
    eps = float(node.attrs.get("epsilon", 1e-5))
    norm_axes = list(range(axis, rank))
    lead_axes = list(range(axis))

    mu = ctx.lib("ReduceMean", {"axes": norm_axes, "keepdims": 1}, [x], "ln_mu")[0]
    xc = ctx.lib("Sub", {}, [x, mu], "ln_xc")[0]
    sq = ctx.lib("Mul", {}, [xc, xc], "ln_sq")[0]
    var = ctx.lib("ReduceMean", {"axes": norm_axes, "keepdims": 1}, [sq], "ln_var")[0]
    rstd = ctx.ew("ln_rstd", f"1.0 / sqrt(v0 + {eps!r})", [var])
    xhat = ctx.lib("Mul", {}, [xc, rstd], "ln_xhat")[0]

    if wanted[0]:
        dyg = ctx.lib("Mul", {}, [gout, scale], "ln_dyg")[0]
        m1 = ctx.lib("ReduceMean", {"axes": norm_axes, "keepdims": 1}, [dyg], "ln_m1")[0]
        dyg_xhat = ctx.lib("Mul", {}, [dyg, xhat], "ln_dyg_xhat")[0]
        m2 = ctx.lib(
            "ReduceMean", {"axes": norm_axes, "keepdims": 1}, [dyg_xhat], "ln_m2"
        )[0]
        # dx = rstd * (dyg - mean(dyg) - xhat * mean(dyg*xhat))
        dx = ctx.ew(
            "ln_dx",
            "v0 * (v1 - v2 - v3 * v4)",
            [rstd, dyg, m1, xhat, m2],
            out_shape=shape,
        )
        ctx.accumulate(dx, x)
    if wanted[1]:
        gy_xhat = ctx.lib("Mul", {}, [gout, xhat], "ln_gy_xhat")[0]
        dscale = (
            ctx.lib(
                "ReduceSum", {"axes": lead_axes, "keepdims": 0}, [gy_xhat], "ln_dscale"
            )[0]
            if lead_axes
            else gy_xhat
        )
        ctx.accumulate(dscale, scale)
    if len(in_names) == 3 and wanted[2]:
        dbias = (
            ctx.lib("ReduceSum", {"axes": lead_axes, "keepdims": 0}, [gout], "ln_dbias")[0]
            if lead_axes
            else gout
        )
        ctx.accumulate(dbias, in_names[2])


_register_manual("LayerNormalization", _bwd_layernorm)


# -- BatchNormalization --------------------------------------------------------


def _decline_batchnorm(g, node, in_names, out_names, outs_adjointed):
    if any(outs_adjointed[1:]):
        return "adjoints of the running-statistic outputs require lowering"
    return None


def _bwd_batchnorm(ctx: _Ctx, node, in_names, out_names, wanted):
    gout = _gout_name(ctx, out_names)
    if gout is None:
        return
    x, scale = in_names[0], in_names[1]
    ctx.ensure_value(x)
    ctx.ensure_value(scale)
    shape = tuple(ctx.g.container(x).shape)
    rank = len(shape)
    eps = float(node.attrs.get("epsilon", 1e-5))
    axes = [a for a in range(rank) if a != 1]

    mu = ctx.lib("ReduceMean", {"axes": axes, "keepdims": 1}, [x], "bn_mu")[0]
    xc = ctx.lib("Sub", {}, [x, mu], "bn_xc")[0]
    sq = ctx.lib("Mul", {}, [xc, xc], "bn_sq")[0]
    var = ctx.lib("ReduceMean", {"axes": axes, "keepdims": 1}, [sq], "bn_var")[0]
    rstd = ctx.ew("bn_rstd", f"1.0 / sqrt(v0 + {eps!r})", [var])
    xhat = ctx.lib("Mul", {}, [xc, rstd], "bn_xhat")[0]

    s1 = ctx.lib("ReduceMean", {"axes": axes, "keepdims": 1}, [gout], "bn_m1")[0]
    gy_xhat = ctx.lib("Mul", {}, [gout, xhat], "bn_gy_xhat")[0]
    s2 = ctx.lib("ReduceMean", {"axes": axes, "keepdims": 1}, [gy_xhat], "bn_m2")[0]

    if wanted[0]:
        # dx = scale * rstd * (dy - mean(dy) - xhat * mean(dy*xhat)),
        # with the channel vector indexed along dim 1.
        params = [f"i{k}" for k in range(rank)]
        keep_idx = ["0"] * rank
        keep_idx[1] = params[1]
        dx = ctx.fresh_transient("bn_dx", shape, ctx.g.container(x).dtype)
        ctx.map_custom(
            "bn_dx",
            [(p, shape[k]) for k, p in enumerate(params)],
            {"o": "v_s * v_r * (v_dy - v_m1 - v_xh * v_m2)"},
            [
                ("v_s", scale, [params[1]]),
                ("v_r", rstd, keep_idx),
                ("v_dy", gout, params),
                ("v_m1", s1, keep_idx),
                ("v_xh", xhat, params),
                ("v_m2", s2, keep_idx),
            ],
            [("o", dx, params, None)],
        )
        ctx.accumulate(dx, x)
    if wanted[1]:
        dscale = ctx.lib(
            "ReduceSum", {"axes": axes, "keepdims": 0}, [gy_xhat], "bn_dscale"
        )[0]
        ctx.accumulate(dscale, scale)
    if wanted[2]:
        dbias = ctx.lib(
            "ReduceSum", {"axes": axes, "keepdims": 0}, [gout], "bn_dbias"
        )[0]
        ctx.accumulate(dbias, in_names[2])
    # Running-statistic inputs receive no gradient from the normalized
    # output (they only feed the updated statistics, whose adjoints were
    # checked to be absent by the decline rule).


_register_manual("BatchNormalization", _bwd_batchnorm, _decline_batchnorm)


# -- Conv ----------------------------------------------------------------------


def _decline_conv(g, node, in_names, out_names, outs_adjointed):
    strides = [int(s) for s in (node.attrs.get("strides") or [1, 1])]
    pads = [int(p) for p in (node.attrs.get("pads") or [0, 0, 0, 0])]
    group = int(node.attrs.get("group", 1))
    if strides != [1, 1] or any(pads) or group != 1:
        return "strided/padded/grouped convolutions are reversed by lowering"
    return None


def _bwd_conv(ctx: _Ctx, node, in_names, out_names, wanted):
    gout = _gout_name(ctx, out_names)
    if gout is None:
        return
    x, w = in_names[0], in_names[1]
    n, c, _h, _w = ctx.g.container(x).shape
    m, _cg, kh, kw = ctx.g.container(w).shape
    _n, _m, oh, ow = ctx.g.container(out_names[0]).shape
    if wanted[0]:
        ctx.ensure_value(w)
        # grad_x[nb, ci, oy+ky, ox+kx] += dy[nb, co, oy, ox] * w[co, ci, ky, kx]
        ctx.map_custom(
            "conv_dx",
            [("nb", n), ("co", m), ("oy", oh), ("ox", ow), ("ci", c),
             ("ky", kh), ("kx", kw)],
            {"o": "v_dy * v_w"},
            [
                ("v_dy", gout, ["nb", "co", "oy", "ox"]),
                ("v_w", w, ["co", "ci", "ky", "kx"]),
            ],
            [("o", ctx.adj[x], ["nb", "ci", "oy + ky", "ox + kx"], "sum")],
        )
    if wanted[1]:
        ctx.ensure_value(x)
        ctx.map_custom(
            "conv_dw",
            [("nb", n), ("co", m), ("oy", oh), ("ox", ow), ("ci", c),
             ("ky", kh), ("kx", kw)],
            {"o": "v_dy * v_x"},
            [
                ("v_dy", gout, ["nb", "co", "oy", "ox"]),
                ("v_x", x, ["nb", "ci", "oy + ky", "ox + kx"]),
            ],
            [("o", ctx.adj[w], ["co", "ci", "ky", "kx"], "sum")],
        )
    if len(in_names) == 3 and wanted[2]:
        dbias = ctx.lib(
            "ReduceSum", {"axes": [0, 2, 3], "keepdims": 0}, [gout], "conv_dbias"
        )[0]
        ctx.accumulate(dbias, in_names[2])


_register_manual("Conv", _bwd_conv, _decline_conv)


# ---------------------------------------------------------------------------
# Driver


def _validate_request(g: Graph, req: GradientRequest) -> None:
    for name in req.outputs + req.wrt:
        if not g.has_container(name):
            raise ADError(f"gradient request names unknown container {name!r}")
    for name in req.wrt:
        desc = g.container(name)
        if desc.storage != "Global":
            raise ADError(f"wrt container {name!r} is not Global")
        if desc.constant:
            raise ADError(f"wrt container {name!r} is constant")
        if desc.dtype not in FLOAT_DTYPES:
            raise ADError(
                f"gradients of non-float container {name!r} "
                f"(dtype {desc.dtype}) are rejected"
            )
    for name in req.outputs:
        if g.container(name).dtype not in FLOAT_DTYPES:
            raise ADError(f"output {name!r} is not a float container")


def _lower_for_ad(g: Graph, req: GradientRequest) -> list[str]:
    """Expand every library node on the differentiation path that has no
    usable manual backward; returns the expanded op names in order."""
    lowered: list[str] = []
    budget = 64 + 8 * sum(
        1 for st in g.states for n in st.nodes.values() if isinstance(n, LibraryNode)
    )
    while True:
        act = _activity(g, req)
        target = None
        for item, flag in zip(act.items, act.flags):
            if not flag or item.kind != "node":
                continue
            node = item.state.nodes[item.nid]
            if not isinstance(node, LibraryNode):
                continue
            manual = _MANUAL.get(node.op)
            if manual is not None:
                in_names = _conn_data(item.state, item.nid, node.in_conns, True)
                out_names = _conn_data(item.state, item.nid, node.out_conns, False)
                outs_adjointed = [
                    (n in act.active and n in act.coactive) or n in req.outputs
                    for n in out_names
                ]
                reason = manual.decline(
                    g, node, in_names, out_names, outs_adjointed
                )
                if reason is None:
                    continue
            target = item
            break
        if target is None:
            return lowered
        node = target.state.nodes[target.nid]
        try:
            lowering.expand(g, target.state, target.nid, validate=False)
        except lowering.LoweringError as err:
            raise ADError(
                f"operator {node.op} on the differentiation path has neither "
                f"a usable lowering nor a manual backward: {err}"
            ) from err
        lowered.append(node.op)
        budget -= 1
        if budget <= 0:
            raise ADError("lowering for differentiation did not terminate")


def _conn_data(st: State, nid: int, conns, inputs: bool) -> list[str]:
    names = []
    for conn in conns:
        if inputs:
            e = next(e for e in st.in_edges(nid) if e.dst_conn == conn)
            names.append(st.nodes[e.src].data)
        else:
            e = next(e for e in st.out_edges(nid) if e.src_conn == conn)
            names.append(st.nodes[e.dst].data)
    return names


def differentiate_graph(g: Graph, req: GradientRequest) -> ADResult:
    """Append a backward state computing d(seed · outputs)/d(wrt).

    The input graph is never mutated. Returns the differentiated graph,
    the adjoint name map, the forwarded-container report, and the list
    of ops that were lowered to native form for differentiation."""
    ir.assert_valid(g)
    g = g.clone()
    _validate_request(g, req)

    lowered_ops = _lower_for_ad(g, req)
    if lowered_ops:
        diags = ir.validate(g)
        if diags:
            raise ADError(
                "lowering for differentiation produced an invalid graph: "
                + "; ".join(f"{d.rule}: {d.message}" for d in diags)
            )

    act = _activity(g, req)
    items, flags, adjointed = act.items, act.flags, act.adjointed
    for name in sorted(adjointed):
        desc = g.container(name)
        if desc.dtype not in FLOAT_DTYPES:
            raise ADError(
                f"container {name!r} on the differentiation path has "
                f"non-float dtype {desc.dtype}; integer gradients are rejected"
            )

    bname = "backward"
    k = 0
    while any(st.name == bname for st in g.states):
        bname = f"backward_{k}"
        k += 1
    bst = g.add_state(bname)

    ctx = _Ctx(g, bst, req, items)
    amap = AdjointMap()
    order = [d.name for d in g.containers if d.name in adjointed]
    for name in order:
        desc = g.container(name)
        grad = g.fresh_name("grad_" + name)
        storage = (
            "Global"
            if name in req.wrt or (name in req.outputs and req.seed == "input")
            else "Transient"
        )
        g.add_container(grad, desc.shape, desc.dtype, storage=storage)
        ctx.adj[name] = grad
        amap.grads[name] = grad

    # Initialization units come first: seeds for requested outputs, zeros
    # for every other adjoint. They run before all contributions because
    # units execute in ascending node-id order.
    for name in order:
        grad = ctx.adj[name]
        if name in req.outputs:
            amap.seeded[name] = grad
            if req.seed == "ones":
                ctx.fill(grad, 1.0)
        else:
            ctx.fill(grad, 0.0)
            amap.zero_init.add(grad)

    for item, flag in zip(reversed(items), reversed(flags)):
        if not flag:
            continue
        if item.kind == "copy":
            _reverse_copy(ctx, item)
            continue
        node = item.state.nodes[item.nid]
        if isinstance(node, Tasklet):
            _reverse_top_tasklet(ctx, item)
        elif isinstance(node, MapEntry):
            _reverse_scope(ctx, item.state, item.nid, None)
        elif isinstance(node, LibraryNode):
            _reverse_library(ctx, item)
        elif isinstance(node, NestedGraph):
            _reverse_nested(ctx, item)

    ir.assert_valid(g)
    return ADResult(g, amap, ctx.forwarded, lowered_ops)
