"""Reference interpreter.

Executes a graph directly: states in order, top-level units of each state
in deterministic topological order, map scopes over their full iteration
lattice. Execution is vectorized with numpy over the lattice; scoped
scalars become lattice-shaped arrays. Results are deterministic across
runs. Write-conflict accumulation uses element-order scatter except where
the scatter is a regular block reduction, in which case numpy's pairwise
reduction applies (deterministic, differs from strictly sequential order
by rounding only).

The interpreter doubles as the measurement tool: it counts the elements
moved across every edge, per-container reads and writes, map iterations,
and arithmetic operations by class.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import ir
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
    ExprDomainError,
    ScalarExpr,
    Sym,
    Unary,
    evaluate,
    free_symbols,
)

# np.ndarray plays the tensor value role everywhere: dtype, shape, and a
# row-major buffer.
TensorValue = np.ndarray

_CHUNK_ELEMENTS = 1 << 22


class ExecError(Exception):
    def __init__(self, message: str, state: str | None = None, node: int | None = None):
        where = f" [state {state}, node {node}]" if state is not None else ""
        super().__init__(message + where)
        self.state = state
        self.node = node


@dataclass
class ExecCounters:
    element_reads: dict[str, int] = field(default_factory=dict)
    element_writes: dict[str, int] = field(default_factory=dict)
    scope_iterations: dict[str, int] = field(default_factory=dict)
    flops: dict[str, int] = field(default_factory=dict)
    edge_elements: dict[tuple[str, int], int] = field(default_factory=dict)

    def add_read(self, container: str, n: int):
        self.element_reads[container] = self.element_reads.get(container, 0) + n

    def add_write(self, container: str, n: int):
        self.element_writes[container] = self.element_writes.get(container, 0) + n

    def add_iterations(self, key: str, n: int):
        self.scope_iterations[key] = self.scope_iterations.get(key, 0) + n

    def add_flops(self, op: str, n: int):
        self.flops[op] = self.flops.get(op, 0) + n

    def add_edge(self, state: str, index: int, n: int):
        key = (state, index)
        self.edge_elements[key] = self.edge_elements.get(key, 0) + n

    def total_flops(self) -> int:
        return sum(self.flops.values())


def _count_expr_ops(e: ScalarExpr, out: dict[str, int]):
    if isinstance(e, Unary):
        out[e.op] = out.get(e.op, 0) + 1
        _count_expr_ops(e.a, out)
    elif isinstance(e, Binary):
        out[e.op] = out.get(e.op, 0) + 1
        _count_expr_ops(e.a, out)
        _count_expr_ops(e.b, out)


def eval_expr_numpy(e: ScalarExpr, env: Mapping[str, object]):
    """Evaluate an expression over numpy values (arrays broadcast)."""
    if isinstance(e, Const):
        return float(e.value)
    if isinstance(e, Sym):
        if e.name not in env:
            raise ExecError(f"unbound name {e.name!r} in expression")
        return env[e.name]
    if isinstance(e, Unary):
        a = eval_expr_numpy(e.a, env)
        if e.op == "neg":
            return np.negative(a)
        if e.op == "exp":
            return np.exp(a)
        if e.op == "log":
            return np.log(a)
        if e.op == "tanh":
            return np.tanh(a)
        if e.op == "sqrt":
            return np.sqrt(a)
    assert isinstance(e, Binary)
    a = eval_expr_numpy(e.a, env)
    b = eval_expr_numpy(e.b, env)
    op = e.op
    if op == "add":
        return np.add(a, b)
    if op == "sub":
        return np.subtract(a, b)
    if op == "mul":
        return np.multiply(a, b)
    if op == "div":
        return np.divide(a, b)
    if op == "pow":
        return np.power(a, b)
    if op == "min":
        return np.minimum(a, b)
    if op == "max":
        return np.maximum(a, b)
    if op == "ge":
        return np.greater_equal(a, b).astype(np.float64)
    if op == "floordiv":
        return np.floor_divide(a, b)
    if op == "mod":
        return np.mod(a, b)
    raise AssertionError(op)


def eval_index(e: ScalarExpr, env: Mapping[str, object]):
    """Evaluate an index expression to int64 (scalar or array)."""
    value = eval_expr_numpy(e, env)
    if isinstance(value, np.ndarray):
        if value.dtype != np.int64:
            value = value.astype(np.int64)
        return value
    return int(value)


def _conn_token(conn: str | None) -> str:
    if conn is None:
        return ""
    if conn.startswith("in_"):
        return conn[3:]
    if conn.startswith("out_"):
        return conn[4:]
    return conn


# ---------------------------------------------------------------------------


class _Execution:
    def __init__(
        self,
        g: Graph,
        inputs: Mapping[str, np.ndarray],
        bindings: Mapping[str, int] | None,
        counters: ExecCounters,
        library_eval: Callable | None,
    ):
        self.g = g
        self.bindings = {k: int(v) for k, v in (bindings or {}).items()}
        self.counters = counters
        self.library_eval = library_eval
        self.memory: dict[str, np.ndarray] = {}
        for name, value in inputs.items():
            desc = g.container(name)
            arr = np.asarray(value, dtype=ir.NUMPY_DTYPES[desc.dtype])
            want = self.shape_of(desc)
            if tuple(arr.shape) != want:
                raise ExecError(
                    f"input {name}: shape {tuple(arr.shape)} does not match {want}"
                )
            self.memory[name] = arr.copy()
        for name, value in g.constants.items():
            if name not in self.memory:
                self.memory[name] = np.asarray(
                    value, dtype=ir.NUMPY_DTYPES[g.container(name).dtype]
                ).copy()

    # -- memory ----------------------------------------------------------

    def shape_of(self, desc: ir.DataDescriptor) -> tuple[int, ...]:
        return tuple(int(evaluate(s, self.bindings)) for s in desc.shape)

    def storage(self, name: str) -> np.ndarray:
        if name not in self.memory:
            desc = self.g.container(name)
            self.memory[name] = np.zeros(
                self.shape_of(desc), dtype=ir.NUMPY_DTYPES[desc.dtype]
            )
        return self.memory[name]

    def int_value(self, e: ScalarExpr) -> int:
        return int(evaluate(e, self.bindings))

    # -- driver ----------------------------------------------------------

    def run(self):
        for state in self.g.states:
            self.run_state(state)

    def run_state(self, state: State):
        scope = state.scopes()
        order = state.topological()
        edge_index = {id(e): i for i, e in enumerate(state.edges)}
        self._edge_index = edge_index
        self._state = state
        self._scope = scope
        handled: set[int] = set()
        for nid in order:
            if scope[nid] is not None or nid in handled:
                continue
            node = state.nodes[nid]
            if isinstance(node, AccessNode):
                self.storage(node.data)
                for e in state.out_edges(nid):
                    if isinstance(state.nodes[e.dst], AccessNode):
                        self.run_copy(state, e)
            elif isinstance(node, Tasklet):
                self.run_toplevel_tasklet(state, nid, node)
            elif isinstance(node, LibraryNode):
                self.run_library(state, nid, node)
            elif isinstance(node, NestedGraph):
                self.run_nested(state, nid, node)
            elif isinstance(node, MapEntry):
                _ScopeRun(self, state, nid).run()
                handled.add(state.exit_of(nid))

    # -- simple units ------------------------------------------------------

    def _subset_slices(self, subset: Subset, env=None) -> tuple[slice, ...]:
        env = env or self.bindings
        out = []
        for b, e, s in subset.dims:
            out.append(
                slice(
                    int(evaluate(b, env)), int(evaluate(e, env)), int(evaluate(s, env))
                )
            )
        return tuple(out)

    def run_copy(self, state: State, e: Edge):
        m = e.memlet
        if m is None:
            return
        src_name = state.nodes[e.src].data
        dst_name = state.nodes[e.dst].data
        src = self.storage(src_name)[self._subset_slices(m.subset)]
        dst = self.storage(dst_name)
        if m.other_subset is not None:
            target = self._subset_slices(m.other_subset)
        else:
            target = tuple(slice(None) for _ in dst.shape)
        view_shape = dst[target].shape
        data = src.reshape(view_shape)
        if m.wcr == "sum":
            dst[target] = dst[target] + data
        elif m.wcr == "max":
            dst[target] = np.maximum(dst[target], data)
        else:
            dst[target] = data
        n = int(np.prod(data.shape, dtype=np.int64)) if data.shape else 1
        self.counters.add_read(src_name, n)
        self.counters.add_write(dst_name, n)
        self.counters.add_edge(state.name, self._edge_index[id(e)], n)

    def run_toplevel_tasklet(self, state: State, nid: int, node: Tasklet):
        env: dict[str, object] = dict(self.bindings)
        for e in state.in_edges(nid):
            m = e.memlet
            src = state.nodes[e.src]
            if not isinstance(src, AccessNode):
                raise ExecError(
                    "top-level tasklet inputs must come from access nodes",
                    state.name,
                    nid,
                )
            idx = tuple(int(evaluate(b, self.bindings)) for b in m.subset.begins())
            env[e.dst_conn] = float(self.storage(src.data)[idx]) if idx else float(
                self.storage(src.data)[()]
            )
            self.counters.add_read(src.data, 1)
            self.counters.add_edge(state.name, self._edge_index[id(e)], 1)
        opcount: dict[str, int] = {}
        for out, body in node.body.items():
            _count_expr_ops(body, opcount)
        for op, n in opcount.items():
            self.counters.add_flops(op, n)
        results = {}
        try:
            for out, body in node.body.items():
                results[out] = evaluate(body, env)
        except ExprDomainError as err:
            raise ExecError(f"domain error: {err}", state.name, nid)
        for e in state.out_edges(nid):
            m = e.memlet
            dst = state.nodes[e.dst]
            if not isinstance(dst, AccessNode):
                raise ExecError(
                    "top-level tasklet outputs must go to access nodes",
                    state.name,
                    nid,
                )
            idx = tuple(int(evaluate(b, self.bindings)) for b in m.subset.begins())
            arr = self.storage(dst.data)
            value = results[e.src_conn]
            if m.wcr == "sum":
                arr[idx] = arr[idx] + value
            elif m.wcr == "max":
                arr[idx] = max(arr[idx], value)
            else:
                arr[idx] = value
            self.counters.add_write(dst.data, 1)
            self.counters.add_edge(state.name, self._edge_index[id(e)], 1)

    def run_library(self, state: State, nid: int, node: LibraryNode):
        if self.library_eval is None:
            from .frontend import reference_apply

            self.library_eval = reference_apply
        inputs: list[np.ndarray | None] = [None] * len(node.in_conns)
        for e in state.in_edges(nid):
            src = state.nodes[e.src]
            if not isinstance(src, AccessNode):
                raise ExecError("library inputs must be access nodes", state.name, nid)
            pos = node.in_conns.index(e.dst_conn)
            view = self.storage(src.data)[self._subset_slices(e.memlet.subset)]
            inputs[pos] = view
            n = int(np.prod(view.shape, dtype=np.int64)) if view.ndim else 1
            self.counters.add_read(src.data, n)
            self.counters.add_edge(state.name, self._edge_index[id(e)], n)
        outputs = self.library_eval(node.op, node.attrs, inputs)
        for e in state.out_edges(nid):
            dst = state.nodes[e.dst]
            if not isinstance(dst, AccessNode):
                raise ExecError("library outputs must be access nodes", state.name, nid)
            pos = node.out_conns.index(e.src_conn)
            arr = self.storage(dst.data)
            target = self._subset_slices(e.memlet.subset)
            value = np.asarray(outputs[pos], dtype=arr.dtype).reshape(arr[target].shape)
            if e.memlet.wcr == "sum":
                arr[target] = arr[target] + value
            else:
                arr[target] = value
            n = int(np.prod(value.shape, dtype=np.int64)) if value.ndim else 1
            self.counters.add_write(dst.data, n)
            self.counters.add_edge(state.name, self._edge_index[id(e)], n)

    def run_nested(self, state: State, nid: int, node: NestedGraph):
        inner_inputs: dict[str, np.ndarray] = {}
        for e in state.in_edges(nid):
            src = state.nodes[e.src]
            inner_name = node.input_map[e.dst_conn]
            view = self.storage(src.data)[self._subset_slices(e.memlet.subset)]
            inner_desc = node.graph.container(inner_name)
            inner_inputs[inner_name] = view.reshape(
                tuple(int(evaluate(s, self.bindings)) for s in inner_desc.shape)
            )
            n = int(np.prod(view.shape, dtype=np.int64)) if view.ndim else 1
            self.counters.add_read(src.data, n)
            self.counters.add_edge(state.name, self._edge_index[id(e)], n)
        sub = _Execution(
            node.graph, inner_inputs, self.bindings, self.counters, self.library_eval
        )
        sub.run()
        for e in state.out_edges(nid):
            dst = state.nodes[e.dst]
            inner_name = node.output_map[e.src_conn]
            arr = self.storage(dst.data)
            target = self._subset_slices(e.memlet.subset)
            arr[target] = sub.storage(inner_name).reshape(arr[target].shape)
            n = arr[target].size
            self.counters.add_write(dst.data, n)
            self.counters.add_edge(state.name, self._edge_index[id(e)], n)


# ---------------------------------------------------------------------------
# Map scope execution


class _ScopedStore:
    """Values of Scoped containers during one top-level scope run, plus
    the lattice depth at which each one lives."""

    def __init__(self):
        self.vals: dict[str, np.ndarray] = {}
        self.depth: dict[str, int] = {}


class _ScopeRun:
    """Vectorized execution of one top-level map nest.

    Values are numpy arrays spanning a prefix of the lattice axes; depth
    tracks how many axes a value spans. Scoped scalar containers become
    lattice arrays. Rectangular nests vectorize; a nest whose inner extent
    depends on outer params falls back to per-iteration execution.
    """

    def __init__(self, ex: _Execution, state: State, entry_id: int):
        self.ex = ex
        self.state = state
        self.entry_id = entry_id
        self.scope = ex._scope
        self.g = ex.g

    def run(self):
        state, entry_id = self.state, self.entry_id
        entry: MapEntry = state.nodes[entry_id]
        exit_id = state.exit_of(entry_id)
        # Boundary edges count once per state execution.
        for e in state.in_edges(entry_id) + state.out_edges(exit_id):
            if e.memlet is None:
                continue
            n = self.ex.int_value(e.memlet.volume)
            self.ex.counters.add_edge(state.name, self.ex._edge_index[id(e)], n)
        # A wcr edge carrying an identity initializes its target region
        # before the lattice runs; accumulation then folds into it.
        for e in state.out_edges(exit_id):
            m = e.memlet
            if m is not None and m.wcr is not None and m.wcr_identity is not None:
                dst = state.nodes[e.dst]
                if isinstance(dst, AccessNode):
                    arr = self.ex.storage(dst.data)
                    arr[self.ex._subset_slices(m.subset)] = m.wcr_identity
        # A nest whose inner range depends on outer params (e.g. tiled maps
        # with min() boundary extents) cannot vectorize; run it point by
        # point instead.
        for nid in state.scope_subgraph(entry_id):
            node = state.nodes[nid]
            if isinstance(node, MapEntry) and nid != entry_id:
                for b, e2, s in node.ranges.dims:
                    syms = free_symbols(b) | free_symbols(e2) | free_symbols(s)
                    if syms - set(self.ex.bindings):
                        self._run_sequential(entry_id, entry)
                        return
        extents = []
        for i in range(entry.ranges.rank):
            extents.append(self.ex.int_value(entry.ranges.dim_extent(i)))
        total = 1
        for n in extents:
            total *= n
        if total == 0:
            return
        if self._try_contraction_fast(entry_id, entry, extents):
            return
        # Chunk along the first axis when the lattice is large. Inner maps
        # deepen the lattice, so their extents weigh into the chunk size.
        inner_blow = 1
        for nid in state.scope_subgraph(entry_id):
            node = state.nodes[nid]
            if isinstance(node, MapEntry):
                for i in range(node.ranges.rank):
                    ext = node.ranges.dim_extent(i)
                    if not (free_symbols(ext) - set(self.ex.bindings)):
                        inner_blow *= max(1, self.ex.int_value(ext))
        rest = (total // extents[0]) * inner_blow if extents[0] else 0
        chunk = extents[0]
        if rest and extents[0] > 1:
            chunk = max(1, min(extents[0], _CHUNK_ELEMENTS // max(rest, 1)))
        offset = 0
        while offset < extents[0]:
            step = min(chunk, extents[0] - offset)
            self._run_block(entry_id, entry, extents, offset, step)
            offset += step

    # -- sequential fallback --------------------------------------------------
    # Nests with parameter-dependent inner ranges (tiled maps with min()
    # boundaries) iterate point by point with scalar environments.

    def _run_sequential(self, entry_id: int, entry: MapEntry):
        env = {k: float(v) for k, v in self.ex.bindings.items()}
        self._seq_map(entry_id, entry, env, {}, {})

    def _seq_map(self, entry_id: int, entry: MapEntry, env, values, scoped_vals):
        state = self.state
        spans = []
        for i, p in enumerate(entry.params):
            b, e, s = entry.ranges.dims[i]
            try:
                begin = int(evaluate(b, env))
                end = int(evaluate(e, env))
                step = int(evaluate(s, env))
            except ExprDomainError as err:
                raise ExecError(f"map range: {err}", state.name, entry_id)
            spans.append((p, range(begin, end, step)))
        points = 1
        for _, r in spans:
            points *= len(r)
        self.ex.counters.add_iterations(f"{state.name}/{entry.label}", points)

        def rec(level, point_env):
            if level == len(spans):
                self._seq_body(entry_id, point_env, values, scoped_vals)
                return
            p, r = spans[level]
            for v in r:
                point_env[p] = float(v)
                rec(level + 1, point_env)
            point_env.pop(p, None)

        rec(0, env)

    def _seq_body(self, scope_entry: int, env, values, scoped_vals):
        state = self.state
        exit_id = state.exit_of(scope_entry)
        order = [nid for nid in state.topological() if self.scope.get(nid) == scope_entry]
        # Scoped containers declared at this level get fresh storage per
        # iteration of the enclosing map.
        for nid in order:
            node = state.nodes[nid]
            if isinstance(node, AccessNode):
                if self.g.container(node.data).storage == "Scoped":
                    scoped_vals.pop(node.data, None)
        for nid in order:
            if nid == exit_id:
                continue
            node = state.nodes[nid]
            if isinstance(node, (AccessNode, MapExit)):
                continue
            if isinstance(node, Tasklet):
                self._seq_tasklet(nid, node, env, values, scoped_vals)
            elif isinstance(node, MapEntry):
                for e in state.in_edges(nid) + state.out_edges(state.exit_of(nid)):
                    if e.memlet is not None:
                        self.ex.counters.add_edge(
                            state.name,
                            self.ex._edge_index[id(e)],
                            int(evaluate(e.memlet.volume, env)),
                        )
                self._seq_map(nid, node, env, values, scoped_vals)
            else:
                raise ExecError(
                    f"unsupported node inside map: {type(node).__name__}",
                    state.name,
                    nid,
                )

    def _seq_tasklet(self, nid: int, node: Tasklet, env, values, scoped_vals):
        state = self.state
        local = dict(env)
        for e in state.in_edges(nid):
            local[e.dst_conn] = self._seq_read(e, env, values, scoped_vals)
            if e.memlet is not None:
                self.ex.counters.add_edge(state.name, self.ex._edge_index[id(e)], 1)
        opcount: dict[str, int] = {}
        for _, body in node.body.items():
            _count_expr_ops(body, opcount)
        for op, n in opcount.items():
            self.ex.counters.add_flops(op, n)
        results = {}
        for out, body in node.body.items():
            try:
                results[out] = evaluate(body, local)
            except ExprDomainError as err:
                raise ExecError(f"domain error: {err}", state.name, nid)
        for e in state.out_edges(nid):
            self.ex.counters.add_edge(state.name, self.ex._edge_index[id(e)], 1)
            self._seq_write(e, results[e.src_conn], env, values, scoped_vals)

    def _seq_read(self, e: Edge, env, values, scoped_vals) -> float:
        state = self.state
        src = state.nodes[e.src]
        if isinstance(src, Tasklet):
            if (e.src, e.src_conn) not in values:
                raise ExecError("tasklet output read before compute", state.name, e.src)
            return values[(e.src, e.src_conn)]
        container, inner = self._resolve_read(e)
        desc = self.g.container(container)
        idx = tuple(int(evaluate(b, env)) for b in inner.memlet.subset.begins())
        if desc.storage == "Scoped":
            if container not in scoped_vals:
                raise ExecError(
                    f"scoped container {container} read before write", state.name
                )
            return float(scoped_vals[container][idx]) if desc.shape else float(
                scoped_vals[container]
            )
        self.ex.counters.add_read(container, 1)
        arr = self.ex.storage(container)
        try:
            return float(arr[idx])
        except IndexError as err:
            raise ExecError(f"out-of-range read on {container}: {err}", state.name)

    def _seq_write(self, e: Edge, value: float, env, values, scoped_vals):
        state = self.state
        dst = state.nodes[e.dst]
        if isinstance(dst, Tasklet):
            values[(e.src, e.src_conn)] = value
            return
        container, inner, _ = self._resolve_write(e)
        desc = self.g.container(container)
        m = inner.memlet
        idx = tuple(int(evaluate(b, env)) for b in m.subset.begins())
        if desc.storage == "Scoped":
            store = scoped_vals.get(container)
            if store is None:
                init = np.nan
                if m.wcr is not None:
                    if m.wcr_identity is None:
                        raise ExecError(
                            f"wcr into scoped {container} without initialization",
                            state.name,
                        )
                    init = m.wcr_identity
                cshape = tuple(self.ex.int_value(d) for d in desc.shape)
                store = np.full(cshape, float(init)) if cshape else np.float64(init)
                scoped_vals[container] = store
            if desc.shape:
                if m.wcr == "sum":
                    store[idx] += value
                elif m.wcr == "max":
                    store[idx] = max(store[idx], value)
                else:
                    store[idx] = value
            else:
                if m.wcr == "sum":
                    scoped_vals[container] = np.float64(store + value)
                elif m.wcr == "max":
                    scoped_vals[container] = np.float64(max(float(store), value))
                else:
                    scoped_vals[container] = np.float64(value)
            return
        self.ex.counters.add_write(container, 1)
        arr = self.ex.storage(container)
        if m.wcr == "sum":
            arr[idx] = arr[idx] + value
        elif m.wcr == "max":
            arr[idx] = max(float(arr[idx]), value)
        else:
            arr[idx] = value

    # -- multiply-accumulate nests ------------------------------------------

    def _try_contraction_fast(self, entry_id, entry, extents) -> bool:
        """Execute a map nest whose body is a single product tasklet writing
        through plain-parameter indices as one tensor contraction. Counters
        come out identical to the generic path."""
        state = self.state
        chain: list[tuple[int, MapEntry]] = [(entry_id, entry)]
        tasklet_id = None
        cur = entry_id
        order = state.topological()
        while tasklet_id is None:
            kids = [
                nid
                for nid in order
                if self.scope[nid] == cur
                and nid != state.exit_of(cur)
                and not isinstance(state.nodes[nid], MapExit)
            ]
            if len(kids) != 1:
                return False
            node = state.nodes[kids[0]]
            if isinstance(node, MapEntry):
                chain.append((kids[0], node))
                cur = kids[0]
            elif isinstance(node, Tasklet):
                tasklet_id = kids[0]
            else:
                return False
        tnode: Tasklet = state.nodes[tasklet_id]
        if len(tnode.body) != 1:
            return False
        # Parameter table: name -> (begin, extent) in nest order.
        param_info: dict[str, tuple[int, int]] = {}
        for eid, en in chain:
            for i, p in enumerate(en.params):
                b, _, s = en.ranges.dims[i]
                if free_symbols(b) - set(self.ex.bindings):
                    return False
                ext = en.ranges.dim_extent(i)
                if free_symbols(ext) - set(self.ex.bindings):
                    return False
                if self.ex.int_value(s) != 1:
                    return False
                param_info[p] = (self.ex.int_value(b), self.ex.int_value(ext))
        # Body must be a product of connector names times an optional
        # constant, each connector used exactly once.
        out_conn, body = next(iter(tnode.body.items()))
        coeff = 1.0
        factors: list[str] = []
        stack = [body]
        while stack:
            t = stack.pop()
            if isinstance(t, Binary) and t.op == "mul":
                stack.append(t.a)
                stack.append(t.b)
            elif isinstance(t, Sym) and t.name in tnode.inputs:
                factors.append(t.name)
            elif isinstance(t, Const):
                coeff *= float(t.value)
            else:
                return False
        if sorted(factors) != sorted(tnode.inputs) or len(set(factors)) != len(factors):
            return False

        def subscripts(subset: Subset, shape):
            used = []
            slices = []
            for d, (b, e2, s) in enumerate(subset.dims):
                if free_symbols(s) - set(self.ex.bindings):
                    return None
                if self.ex.int_value(s) != 1:
                    return None
                ext_expr = subset.dim_extent(d)
                if isinstance(b, Sym) and b.name in param_info:
                    if free_symbols(ext_expr) - set(self.ex.bindings):
                        return None
                    if self.ex.int_value(ext_expr) != 1:
                        return None
                    begin, ext = param_info[b.name]
                    used.append(b.name)
                    slices.append(slice(begin, begin + ext))
                elif not free_symbols(b) - set(self.ex.bindings):
                    if free_symbols(ext_expr) - set(self.ex.bindings):
                        return None
                    c = self.ex.int_value(b)
                    if self.ex.int_value(ext_expr) != 1:
                        return None
                    used.append(None)
                    slices.append(slice(c, c + 1))
                else:
                    return None
            return used, slices

        operands = {}
        for e in state.in_edges(tasklet_id):
            container, inner = self._resolve_read(e)
            if self.g.container(container).storage == "Scoped":
                return False
            info = subscripts(inner.memlet.subset, None)
            if info is None:
                return False
            used, slices = info
            if len([u for u in used if u]) != len(set(u for u in used if u)):
                return False
            operands[e.dst_conn] = (container, used, slices)
        outs = state.out_edges(tasklet_id)
        if len(outs) != 1:
            return False
        container, inner, _ = self._resolve_write(outs[0])
        desc = self.g.container(container)
        if desc.storage == "Scoped":
            return False
        m = inner.memlet
        if m.wcr not in (None, "sum"):
            return False
        info = subscripts(m.subset, None)
        if info is None:
            return False
        out_used, out_slices = info
        out_params = [u for u in out_used if u]
        if len(out_params) != len(set(out_params)):
            return False
        # Letters per parameter.
        letters = {}
        for p in param_info:
            letters[p] = chr(ord("a") + len(letters))
            if len(letters) > 26:
                return False
        op_arrays = []
        op_subs = []
        for name in factors:
            cont, used, slices = operands[name]
            arr = self.ex.storage(cont)[tuple(slices)]
            # Constant-index dims are squeezed out of the subscript.
            keep = [d for d, u in enumerate(used) if u is not None]
            arr = arr.reshape(tuple(arr.shape[d] for d in keep))
            op_arrays.append(arr.astype(np.float64, copy=False))
            op_subs.append("".join(letters[used[d]] for d in keep))
        out_sub = "".join(letters[u] for u in out_used if u is not None)
        covered = set("".join(op_subs))
        if not set(out_sub) <= covered:
            # An output axis no operand covers would broadcast; handled by
            # the generic path instead.
            return False
        if m.wcr is None and covered - set(out_sub):
            # Plain writes overwrite rather than accumulate; a contracted
            # axis only makes sense under wcr.
            return False
        # A contraction axis absent from every operand multiplies the sum.
        multiplier = 1.0
        for p, (_, ext) in param_info.items():
            if letters[p] not in covered and letters[p] not in out_sub:
                if m.wcr == "sum":
                    multiplier *= ext
        eq = ",".join(op_subs) + "->" + out_sub
        try:
            result = np.einsum(eq, *op_arrays, optimize=True)
        except ValueError:
            return False
        result = result * (coeff * multiplier)
        arr = self.ex.storage(container)
        keep = [d for d, u in enumerate(out_used) if u is not None]
        region = arr[tuple(out_slices)]
        shaped = np.asarray(result).reshape(region.shape)
        if m.wcr == "sum":
            arr[tuple(out_slices)] = region + shaped
        else:
            arr[tuple(out_slices)] = shaped
        self._count_nest_analytic(chain, tasklet_id, tnode, param_info)
        return True

    def _count_nest_analytic(self, chain, tasklet_id, tnode: Tasklet, param_info):
        state = self.state
        lattice = 1
        for depth, (eid, en) in enumerate(chain):
            if depth > 0:
                for e in state.in_edges(eid) + state.out_edges(state.exit_of(eid)):
                    if e.memlet is None:
                        continue
                    n = lattice * self.ex.int_value(e.memlet.volume)
                    self.ex.counters.add_edge(
                        state.name, self.ex._edge_index[id(e)], n
                    )
            for p in en.params:
                lattice *= param_info[p][1]
            self.ex.counters.add_iterations(f"{state.name}/{en.label}", lattice)
        for e in state.in_edges(tasklet_id):
            vol = self.ex.int_value(e.memlet.volume)
            self.ex.counters.add_edge(state.name, self.ex._edge_index[id(e)], lattice * vol)
            cont, _ = self._resolve_read(e)
            self.ex.counters.add_read(cont, lattice * vol)
        for e in state.out_edges(tasklet_id):
            vol = self.ex.int_value(e.memlet.volume)
            self.ex.counters.add_edge(state.name, self.ex._edge_index[id(e)], lattice * vol)
            cont, _, _ = self._resolve_write(e)
            self.ex.counters.add_write(cont, lattice * vol)
        opcount: dict[str, int] = {}
        for _, body in tnode.body.items():
            _count_expr_ops(body, opcount)
        for op, n in opcount.items():
            self.ex.counters.add_flops(op, n * lattice)

    def _param_arrays(
        self, entry: MapEntry, extents, depth0, shape, offset=0
    ) -> dict[str, np.ndarray]:
        out = {}
        for i, param in enumerate(entry.params):
            b, _, s = entry.ranges.dims[i]
            begin = self.ex.int_value(b)
            stride = self.ex.int_value(s)
            n = shape[depth0 + i]
            start = begin + (offset if i == 0 else 0) * stride
            idx = np.arange(start, start + n * stride, stride, dtype=np.int64)
            view = idx.reshape((1,) * (depth0 + i) + (n,) + (1,) * (len(shape) - depth0 - i - 1))
            out[param] = np.broadcast_to(view, shape)
        return out

    def _run_block(self, entry_id, entry, extents, offset, step):
        shape = (step,) + tuple(extents[1:])
        env: dict[str, object] = dict(self.ex.bindings)
        params = self._param_arrays(entry, extents, 0, shape, offset)
        env.update(params)
        values: dict[tuple[int, str], np.ndarray] = {}
        scoped = _ScopedStore()
        self._exec_scope_body(entry_id, env, values, scoped, shape)
        self.ex.counters.add_iterations(
            f"{self.state.name}/{entry.label}", int(np.prod(shape, dtype=np.int64))
        )

    # -- helpers -----------------------------------------------------------

    def _expand(self, arr, shape):
        if not isinstance(arr, np.ndarray):
            return arr
        if arr.shape == tuple(shape):
            return arr
        pad = len(shape) - arr.ndim
        view = arr.reshape(arr.shape + (1,) * pad)
        return np.broadcast_to(view, shape)

    def _gather(self, container: str, subset: Subset, env, shape):
        arr = self.ex.storage(container)
        if subset.rank == 0:
            return np.broadcast_to(arr[()], shape) if shape else arr[()]
        idx = []
        scalar = True
        for b in subset.begins():
            v = eval_index(b, env)
            if isinstance(v, np.ndarray):
                scalar = False
            idx.append(v)
        if scalar:
            return np.broadcast_to(arr[tuple(idx)], shape)
        idx = [self._expand(v, shape) if isinstance(v, np.ndarray) else v for v in idx]
        try:
            return arr[tuple(idx)]
        except IndexError as err:
            raise ExecError(f"out-of-range read on {container}: {err}", self.state.name)

    def _resolve_read(self, e: Edge):
        state = self.state
        inner = e
        while True:
            src = state.nodes[e.src]
            if isinstance(src, AccessNode):
                return src.data, inner
            if isinstance(src, MapEntry):
                token = _conn_token(e.src_conn)
                prev = [
                    pe
                    for pe in state.in_edges(e.src)
                    if _conn_token(pe.dst_conn) == token
                ]
                if not prev:
                    raise ExecError(
                        f"unwired map connector {e.src_conn}", state.name, e.src
                    )
                e = prev[0]
            else:
                raise ExecError("cannot resolve read source", state.name, e.src)

    def _resolve_write(self, e: Edge):
        state = self.state
        inner = e
        while True:
            dst = state.nodes[e.dst]
            if isinstance(dst, AccessNode):
                return dst.data, inner, e
            if isinstance(dst, MapExit):
                token = _conn_token(e.dst_conn)
                nxt = [
                    oe
                    for oe in state.out_edges(e.dst)
                    if _conn_token(oe.src_conn) == token
                ]
                if not nxt:
                    raise ExecError(
                        f"unwired map connector {e.dst_conn}", state.name, e.dst
                    )
                e = nxt[0]
            else:
                raise ExecError("cannot resolve write target", state.name, e.dst)

    # -- body execution ------------------------------------------------------

    def _exec_scope_body(self, entry_id, env, values, scoped, shape):
        state = self.state
        exit_id = state.exit_of(entry_id)
        children = [
            nid
            for nid in state.topological()
            if self.scope[nid] == entry_id and nid != exit_id
        ]
        # A scoped container lives at the lattice depth of the scope that
        # declares its access node; register before anything writes to it.
        for nid in children:
            node = state.nodes[nid]
            if isinstance(node, AccessNode):
                scoped.depth.setdefault(node.data, len(shape))
        for nid in children:
            node = state.nodes[nid]
            if isinstance(node, AccessNode):
                continue
            if isinstance(node, Tasklet):
                self._exec_tasklet(nid, node, env, values, scoped, shape)
            elif isinstance(node, MapEntry):
                self._exec_inner_map(nid, node, env, values, scoped, shape)
            elif isinstance(node, MapExit):
                continue
            else:
                raise ExecError(
                    f"unsupported node inside map: {type(node).__name__}",
                    state.name,
                    nid,
                )

    def _read_value(self, e: Edge, env, values, scoped, shape):
        state = self.state
        src = state.nodes[e.src]
        if isinstance(src, Tasklet):
            value = values.get((e.src, e.src_conn))
            if value is None:
                raise ExecError("tasklet output read before compute", state.name, e.src)
            return self._expand(value, shape), None
        container, inner = self._resolve_read(e)
        desc = self.g.container(container)
        if desc.storage == "Scoped":
            if container not in scoped.vals:
                raise ExecError(
                    f"scoped container {container} read before write", state.name
                )
            if not desc.shape:
                return self._expand(scoped.vals[container], shape), None
            # Rank > 0 scoped buffer: element indices select within the
            # per-iteration view; leading axes follow the declaring lattice.
            val = scoped.vals[container]
            depth = scoped.depth.get(container, len(shape))
            idx = [eval_index(b, env) for b in inner.memlet.subset.begins()]
            idx = [
                self._expand(v, shape) if isinstance(v, np.ndarray) else int(v)
                for v in idx
            ]
            return val[self._lead_index(depth, shape) + tuple(idx)], None
        value = self._gather(container, inner.memlet.subset, env, shape)
        n = int(np.prod(shape, dtype=np.int64)) * self.ex.int_value(
            inner.memlet.volume
        )
        self.ex.counters.add_read(container, n)
        return value, container

    def _count_body_edges(self, nid: int, shape):
        state = self.state
        n = int(np.prod(shape, dtype=np.int64))
        for e in state.in_edges(nid) + state.out_edges(nid):
            if e.memlet is None:
                continue
            vol = self.ex.int_value(e.memlet.volume)
            self.ex.counters.add_edge(state.name, self.ex._edge_index[id(e)], n * vol)

    def _exec_tasklet(self, nid, node: Tasklet, env, values, scoped, shape):
        state = self.state
        local = dict(env)
        for e in state.in_edges(nid):
            value, _ = self._read_value(e, env, values, scoped, shape)
            local[e.dst_conn] = value
        opcount: dict[str, int] = {}
        for out, body in node.body.items():
            _count_expr_ops(body, opcount)
        lattice = int(np.prod(shape, dtype=np.int64))
        for op, n in opcount.items():
            self.ex.counters.add_flops(op, n * lattice)
        self._count_body_edges(nid, shape)
        results = {}
        with np.errstate(divide="raise", invalid="raise", over="ignore"):
            try:
                for out, body in node.body.items():
                    value = eval_expr_numpy(body, local)
                    if not isinstance(value, np.ndarray):
                        value = np.broadcast_to(np.float64(value), shape)
                    else:
                        value = self._expand(value, shape)
                    results[out] = value
            except FloatingPointError as err:
                raise ExecError(f"domain error: {err}", state.name, nid)
        for e in state.out_edges(nid):
            self._write_value(e, results[e.src_conn], env, values, scoped, shape)

    def _write_value(self, e: Edge, value, env, values, scoped, shape):
        state = self.state
        dst = state.nodes[e.dst]
        if isinstance(dst, Tasklet):
            values[(e.src, e.src_conn)] = value
            return
        container, inner, _ = self._resolve_write(e)
        desc = self.g.container(container)
        if desc.storage == "Scoped":
            self._write_scoped(container, inner.memlet, value, env, scoped, shape)
            return
        self._scatter(container, inner.memlet, value, env, shape)

    def _lead_index(self, depth: int, shape) -> tuple:
        """Index arrays enumerating the first `depth` lattice axes, shaped to
        broadcast against element-index arrays spanning all of `shape`."""
        out = []
        for t in range(depth):
            view = (1,) * t + (-1,) + (1,) * (len(shape) - 1 - t)
            out.append(np.arange(shape[t], dtype=np.int64).reshape(view))
        return tuple(out)

    def _write_scoped(self, name, memlet, value, env, scoped, shape):
        desc = self.g.container(name)
        if desc.shape:
            self._write_scoped_array(name, desc, memlet, value, env, scoped, shape)
            return
        # Scoped scalars span the lattice of their declaring scope. Writes
        # from deeper lattices reduce over the extra axes.
        base = scoped.vals.get(name)
        target_depth = scoped.depth.get(name, len(shape))
        if memlet is not None and memlet.wcr is not None:
            if base is None:
                if memlet.wcr_identity is None:
                    raise ExecError(
                        f"wcr into scoped {name} without initialization",
                        self.state.name,
                    )
                base = np.full(shape[:target_depth], memlet.wcr_identity, dtype=np.float64)
            contrib = value
            if contrib.ndim > target_depth:
                axes = tuple(range(target_depth, contrib.ndim))
                if memlet.wcr == "sum":
                    contrib = contrib.sum(axis=axes)
                else:
                    contrib = contrib.max(axis=axes)
            if memlet.wcr == "sum":
                scoped.vals[name] = base + contrib
            else:
                scoped.vals[name] = np.maximum(base, contrib)
        else:
            contrib = value
            if isinstance(contrib, np.ndarray) and contrib.ndim > target_depth:
                sel = (slice(None),) * target_depth + (0,) * (contrib.ndim - target_depth)
                contrib = contrib[sel]
            scoped.vals[name] = contrib

    def _write_scoped_array(self, name, desc, memlet, value, env, scoped, shape):
        """Rank > 0 scoped buffer: one view per iteration of the declaring
        lattice, element indices evaluated against the current params."""
        depth = scoped.depth.get(name, len(shape))
        cshape = tuple(self.ex.int_value(d) for d in desc.shape)
        base = scoped.vals.get(name)
        if base is None:
            init = np.nan
            if memlet is not None and memlet.wcr is not None:
                if memlet.wcr_identity is None:
                    raise ExecError(
                        f"wcr into scoped {name} without initialization",
                        self.state.name,
                    )
                init = memlet.wcr_identity
            base = np.full(tuple(shape[:depth]) + cshape, float(init))
            scoped.vals[name] = base
        idx = [eval_index(b, env) for b in memlet.subset.begins()]
        idx = [
            self._expand(v, shape) if isinstance(v, np.ndarray) else int(v)
            for v in idx
        ]
        index = tuple(
            np.broadcast_to(np.asarray(v, dtype=np.int64), tuple(shape))
            for v in self._lead_index(depth, shape) + tuple(idx)
        )
        value = self._expand(value, shape) if isinstance(value, np.ndarray) else value
        if memlet.wcr == "sum":
            np.add.at(base, index, value)
        elif memlet.wcr == "max":
            np.maximum.at(base, index, value)
        else:
            base[index] = value

    def _scatter(self, container: str, memlet: Memlet, value, env, shape):
        arr = self.ex.storage(container)
        n = int(np.prod(shape, dtype=np.int64)) * self.ex.int_value(memlet.volume)
        self.ex.counters.add_write(container, n)
        out_dtype = arr.dtype
        idx_exprs = memlet.subset.begins()
        idx = [eval_index(b, env) for b in idx_exprs]
        array_axes = [isinstance(v, np.ndarray) for v in idx]
        if not any(array_axes):
            # Same element for every lattice point: a reduction into one cell.
            if memlet.wcr == "sum":
                arr[tuple(idx)] = arr[tuple(idx)] + value.sum()
            elif memlet.wcr == "max":
                arr[tuple(idx)] = max(arr[tuple(idx)], value.max())
            else:
                flat = value.reshape(-1)
                arr[tuple(idx)] = flat[-1] if flat.size else value
            return
        idx = [self._expand(v, shape) if isinstance(v, np.ndarray) else v for v in idx]
        if memlet.wcr is None:
            arr[tuple(idx)] = value
            return
        # Block-reduction fast path: when every index expression is a plain
        # lattice axis, the scatter groups contributions along the unused
        # axes and numpy reduces them directly.
        plain_axes = self._plain_axes(idx_exprs, env, shape)
        if plain_axes is not None:
            used = [a for a in plain_axes if a is not None]
            unused = tuple(a for a in range(len(shape)) if a not in used)
            perm = used + list(unused)
            moved = np.transpose(value, perm)
            if unused:
                if memlet.wcr == "sum":
                    moved = moved.sum(axis=tuple(range(len(used), len(shape))), dtype=np.float64)
                else:
                    moved = moved.max(axis=tuple(range(len(used), len(shape))))
            # Axis k of `moved` now enumerates lattice axis used[k]; map to
            # container positions via the per-axis index vectors.
            vecs = []
            for d, axis in enumerate(plain_axes):
                if axis is None:
                    vecs.append(idx[d] if not isinstance(idx[d], np.ndarray) else idx[d].flat[0])
                else:
                    sel = [0] * len(shape)
                    sel[axis] = slice(None)
                    vecs.append(idx[d][tuple(sel)])
            full = all(
                isinstance(v, np.ndarray)
                and v.size == arr.shape[d]
                and np.array_equal(v, np.arange(arr.shape[d]))
                for d, v in enumerate(vecs)
            ) and len(vecs) == arr.ndim
            if full:
                if memlet.wcr == "sum":
                    arr += moved.astype(out_dtype) if out_dtype != moved.dtype else moved
                else:
                    np.maximum(arr, moved, out=arr)
                return
            grid = np.ix_(*[np.atleast_1d(v) for v in vecs]) if vecs else ()
            target = arr[grid]
            moved = moved.reshape(target.shape)
            if memlet.wcr == "sum":
                arr[grid] = target + moved
            else:
                arr[grid] = np.maximum(target, moved)
            return
        # General scatter in element order.
        if memlet.wcr == "sum":
            if arr.dtype == np.float32:
                tmp = arr.astype(np.float64)
                np.add.at(tmp, tuple(idx), value)
                arr[...] = tmp.astype(np.float32)
            else:
                np.add.at(arr, tuple(idx), value)
        else:
            np.maximum.at(arr, tuple(idx), value)

    def _plain_axes(self, idx_exprs, env, shape):
        """For each subset dim, the lattice axis it enumerates when the index
        expression is exactly one map parameter; None entries are scalar
        dims. Returns None if any dim is a compound expression."""
        axes: list[int | None] = []
        seen: set[int] = set()
        for e in idx_exprs:
            if isinstance(e, Sym) and isinstance(env.get(e.name), np.ndarray):
                param = env[e.name]
                # Which lattice axis does this parameter enumerate? Params
                # are broadcast views: stride 0 everywhere except their own
                # axis.
                cand = [
                    a
                    for a in range(param.ndim)
                    if param.shape[a] > 1 and param.strides[a] != 0
                ]
                if not cand:
                    axes.append(None)
                    continue
                if len(cand) > 1:
                    return None
                axis = cand[0]
                if axis in seen:
                    return None
                seen.add(axis)
                axes.append(axis)
            elif isinstance(e, Const):
                axes.append(None)
            else:
                return None
        return axes

    def _exec_inner_map(self, entry_id, entry: MapEntry, env, values, scoped, shape):
        state = self.state
        # Identity-init for wcr memlets leaving this inner map into scoped
        # accumulators happens inside _write_scoped. Extents may reference
        # outer params; only constant extents vectorize.
        extents = []
        for i in range(entry.ranges.rank):
            ext = entry.ranges.dim_extent(i)
            if free_symbols(ext) - set(self.ex.bindings):
                raise ExecError(
                    f"inner map {entry.label} has data-dependent extent; "
                    "only rectangular nests execute vectorized",
                    state.name,
                    entry_id,
                )
            extents.append(self.ex.int_value(ext))
        inner_shape = tuple(shape) + tuple(extents)
        inner_env = dict(env)
        for k, v in env.items():
            if isinstance(v, np.ndarray):
                inner_env[k] = self._expand(v, inner_shape)
        offset_params = self._param_arrays(entry, extents, len(shape), inner_shape)
        inner_env.update(offset_params)
        self.ex.counters.add_iterations(
            f"{state.name}/{entry.label}", int(np.prod(inner_shape, dtype=np.int64))
        )
        for e in state.in_edges(entry_id) + state.out_edges(state.exit_of(entry_id)):
            if e.memlet is None:
                continue
            n = int(np.prod(shape, dtype=np.int64)) * self.ex.int_value(e.memlet.volume)
            self.ex.counters.add_edge(state.name, self.ex._edge_index[id(e)], n)
        self._exec_scope_body(entry_id, inner_env, values, scoped, inner_shape)


# ---------------------------------------------------------------------------
# Public API


def execute(
    g: Graph,
    inputs: Mapping[str, np.ndarray] | None = None,
    bindings: Mapping[str, int] | None = None,
    library_eval: Callable | None = None,
) -> tuple[dict[str, np.ndarray], ExecCounters]:
    """Run a graph. Returns all Global and Transient containers by name,
    plus the execution counters."""
    counters = ExecCounters()
    ex = _Execution(g, inputs or {}, bindings, counters, library_eval)
    ex.run()
    out = {
        desc.name: ex.memory[desc.name]
        for desc in g.containers
        if desc.storage in ("Global", "Transient") and desc.name in ex.memory
    }
    return out, counters


def run_outputs(
    g: Graph,
    inputs: Mapping[str, np.ndarray] | None = None,
    bindings: Mapping[str, int] | None = None,
    outputs: list[str] | None = None,
) -> dict[str, np.ndarray]:
    memory, _ = execute(g, inputs, bindings)
    if outputs is None:
        return memory
    return {name: memory[name] for name in outputs}


def compare_outputs(
    got: Mapping[str, np.ndarray],
    want: Mapping[str, np.ndarray],
    rtol: float = 1e-6,
    atol: float = 0.0,
) -> dict[str, float]:
    """Max relative error per shared container; raises on tolerance breach."""
    report: dict[str, float] = {}
    for name in want:
        if name not in got:
            raise ExecError(f"missing output {name!r}")
        a = np.asarray(got[name], dtype=np.float64)
        b = np.asarray(want[name], dtype=np.float64)
        if a.shape != b.shape:
            raise ExecError(f"shape mismatch on {name!r}: {a.shape} vs {b.shape}")
        denom = np.maximum(np.abs(b), 1.0)
        err = float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
        report[name] = err
        if err > rtol + atol:
            raise ExecError(f"output {name!r} differs: max rel err {err:.3e}")
    return report


def finite_diff_grad(
    g: Graph,
    inputs: Mapping[str, np.ndarray],
    outputs: list[str],
    wrt: list[str],
    bindings: Mapping[str, int] | None = None,
    coords: Mapping[str, list[int]] | None = None,
) -> dict[str, np.ndarray]:
    """Central finite differences of sum(outputs) with respect to each wrt
    container. Step size is 1e-6 * max(1, |x_i|) per coordinate. When
    ``coords`` lists flat indices for a container, only those coordinates
    are probed; the rest stay zero."""

    def loss(current: Mapping[str, np.ndarray]) -> float:
        memory, _ = execute(g, current, bindings)
        return float(sum(np.sum(memory[name], dtype=np.float64) for name in outputs))

    grads: dict[str, np.ndarray] = {}
    base = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    for name in wrt:
        x = base[name]
        grad = np.zeros(x.size, dtype=np.float64)
        indices = coords.get(name) if coords else range(x.size)
        for i in indices:
            h = 1e-6 * max(1.0, abs(float(x.flat[i])))
            up = dict(base)
            down = dict(base)
            xu = x.copy()
            xu.flat[i] += h
            xd = x.copy()
            xd.flat[i] -= h
            up[name] = xu
            down[name] = xd
            grad[i] = (loss(up) - loss(down)) / (2 * h)
        grads[name] = grad.reshape(x.shape)
    return grads
