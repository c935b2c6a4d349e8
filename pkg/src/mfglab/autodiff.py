"""Reverse-mode autodiff on an explicit computation graph.

The graph is an append-only list of nodes. Each node stores an op kind, the
ids of its inputs, and a cached float64 numpy value. Values may be scalars
(shape ()) or arrays; an array value means the same scalar expression
evaluated over a batch of independent samples (particles, collocation
points), so the semantics stay elementwise. On top of the elementwise op set
there is a small fixed set of structural primitives (matmul, transpose,
column stack/extract, reshape, sum, mean) so that one dense network layer is
a handful of nodes backed by BLAS instead of thousands of scalar nodes.
Broadcasting is deliberately restricted: same shape, scalar against array,
and the bias pattern (N,w)+(w,). Nothing more general is supported.

Four mechanisms, one derivative rule table:

  backward(out, wrt)         numeric reverse sweep, O(#nodes), returns values
  compile_backward(out, wrt) the same sweep precompiled with reusable
                             buffers, for loops that re-run a static graph
  grad_nodes(out, wrt)       reverse sweep recorded as new graph nodes, so
                             the gradient itself stays differentiable
  tangent_nodes(seeds, outs) forward-mode tangent sweep recorded as nodes

Second derivatives are forward-over-reverse: propagate a tangent through the
recorded reverse sweep (spatial_hessian_diag does exactly this and reads the
values off). relu is given second derivative 0 everywhere; max/relu ties at
the kink resolve to the flat side so numeric and graph sweeps agree.

Graphs are deterministic: the same graph with the same leaf values yields
bit-identical values and gradients (fixed evaluation order, no threading in
the sweeps themselves). recompute() re-executes the whole graph in place
after leaves have been overwritten with set_value(); value and adjoint
buffers are allocated once, so a training loop does no steady-state
allocation on the hot path.
"""

import numpy as np

_f8 = np.float64


def _as_value(x):
    return np.asarray(x, dtype=_f8)


def _unb(delta, shape):
    """Reduce a contribution back to the target shape (numeric path)."""
    if delta.shape == shape:
        return delta
    if shape == ():
        return delta.sum()
    if delta.ndim == 2 and shape == (delta.shape[1],):
        return delta.sum(axis=0)
    raise ValueError(f"cannot reduce {delta.shape} to {shape}")


class Node:
    """Lightweight handle (graph, index). Hash/eq are identity-based."""

    __slots__ = ("g", "i")

    def __init__(self, g, i):
        self.g = g
        self.i = i

    @property
    def value(self):
        return self.g.val[self.i]

    @property
    def shape(self):
        return self.g.val[self.i].shape

    def item(self):
        return float(self.g.val[self.i])

    def set_value(self, x):
        if self.g.kind[self.i] != "var":
            raise ValueError("set_value only works on var leaves")
        np.copyto(self.g.val[self.i], _as_value(x))

    def _lift(self, other):
        return other if isinstance(other, Node) else self.g.const(other)

    def __add__(self, o):
        return self.g._op("add", (self, self._lift(o)))

    def __radd__(self, o):
        return self.g._op("add", (self._lift(o), self))

    def __sub__(self, o):
        return self.g._op("sub", (self, self._lift(o)))

    def __rsub__(self, o):
        return self.g._op("sub", (self._lift(o), self))

    def __mul__(self, o):
        return self.g._op("mul", (self, self._lift(o)))

    def __rmul__(self, o):
        return self.g._op("mul", (self._lift(o), self))

    def __truediv__(self, o):
        return self.g._op("div", (self, self._lift(o)))

    def __rtruediv__(self, o):
        return self.g._op("div", (self._lift(o), self))

    def __neg__(self):
        return self.g._op("neg", (self,))

    def sum(self):
        return self.g._op("sum", (self,))

    def mean(self):
        return self.g._op("mean", (self,))


class GradientResult:
    """Scalar value plus partials aligned with the requested leaves."""

    __slots__ = ("value", "partials", "wrt")

    def __init__(self, value, partials, wrt):
        self.value = value
        self.partials = partials
        self.wrt = wrt


class Graph:
    def __init__(self):
        self.kind = []   # op name per node
        self.args = []   # tuple of input ids
        self.aux = []    # op-specific extras (column index, shape, ...)
        self.val = []    # cached float64 ndarray per node, identity-stable
        self.roots = []  # ids of var leaves, creation order
        self.version = 0
        self._eval_plan = None

    def __len__(self):
        return len(self.kind)

    def _push(self, kind, args, aux, value):
        self.kind.append(kind)
        self.args.append(args)
        self.aux.append(aux)
        self.val.append(value)
        self.version += 1
        return Node(self, len(self.kind) - 1)

    def var(self, x):
        n = self._push("var", (), None, _as_value(x).copy())
        self.roots.append(n.i)
        return n

    def const(self, x):
        return self._push("const", (), None, _as_value(x).copy())

    def _op(self, kind, inputs, aux=None):
        ids = tuple(n.i for n in inputs)
        vals = [self.val[i] for i in ids]
        # asarray: numpy collapses 0-d results to scalars, buffers must stay
        # ndarrays so replay can write into them
        value = np.asarray(_EVAL[kind](vals, aux))
        if value.dtype != _f8:
            value = value.astype(_f8)
        return self._push(kind, ids, aux, value)

    def evaluate(self, feed=None, outputs=None):
        """Overwrite leaves from feed (Node -> value), recompute the whole
        graph, return copies of the requested outputs. Bit-exact on replay."""
        if feed:
            for n, x in feed.items():
                n.set_value(x)
        self.recompute()
        if outputs is None:
            return None
        return [np.array(self.val[n.i], copy=True) for n in outputs]

    def _compile_eval(self):
        plan = []
        val = self.val
        for i in range(len(self.kind)):
            k = self.kind[i]
            if k == "var" or k == "const":
                continue
            fn = _EVAL_OUT[k]
            vs = tuple(val[j] for j in self.args[i])
            plan.append((fn, val[i], vs, self.aux[i]))
        self._eval_plan = (self.version, plan)

    def recompute(self):
        """Re-execute every op in creation order, writing into the cached
        buffers. Identical leaf values reproduce identical node values."""
        if self._eval_plan is None or self._eval_plan[0] != self.version:
            self._compile_eval()
        for fn, out, vs, aux in self._eval_plan[1]:
            fn(out, vs, aux)


# ---------------------------------------------------------------------------
# op table: fresh eval (build time) and eval into preallocated out (replay)
# ---------------------------------------------------------------------------

def _ev_stack(vals, aux):
    out = np.empty((aux, len(vals)))
    _evo_stack(out, vals, aux)
    return out


def _evo_stack(out, vals, aux):
    for k, v in enumerate(vals):
        out[:, k] = v


def _ev_scatter(vals, aux):
    j, w = aux
    out = np.zeros((vals[0].shape[0], w))
    out[:, j] = vals[0]
    return out


def _evo_scatter(out, vals, aux):
    out.fill(0.0)
    out[:, aux[0]] = vals[0]


def _ev_sigmoid(vals, aux):
    return 1.0 / (1.0 + np.exp(-vals[0]))


def _evo_sigmoid(out, v, a):
    np.negative(v[0], out=out)
    np.exp(out, out=out)
    out += 1.0
    np.divide(1.0, out, out=out)


_EVAL = {
    "add": lambda v, a: v[0] + v[1],
    "sub": lambda v, a: v[0] - v[1],
    "mul": lambda v, a: v[0] * v[1],
    "div": lambda v, a: v[0] / v[1],
    "neg": lambda v, a: -v[0],
    "exp": lambda v, a: np.exp(v[0]),
    "log": lambda v, a: np.log(v[0]),
    "tanh": lambda v, a: np.tanh(v[0]),
    "relu": lambda v, a: np.maximum(v[0], 0.0),
    "sigmoid": _ev_sigmoid,
    "square": lambda v, a: v[0] * v[0],
    "sqrt": lambda v, a: np.sqrt(v[0]),
    "maximum": lambda v, a: np.maximum(v[0], v[1]),
    "gtz": lambda v, a: (v[0] > 0.0).astype(_f8),
    "matmul": lambda v, a: v[0] @ v[1],
    "transpose": lambda v, a: v[0].T.copy(),
    "stack": _ev_stack,
    "col": lambda v, a: v[0][:, a].copy(),
    "scatter_col": _ev_scatter,
    "reshape": lambda v, a: v[0].reshape(a).copy(),
    "sum": lambda v, a: np.asarray(v[0].sum()),
    "mean": lambda v, a: np.asarray(v[0].mean()),
    "sum0": lambda v, a: v[0].sum(axis=0),
    "bcast": lambda v, a: np.broadcast_to(v[0], a).copy(),
}

_EVAL_OUT = {
    "add": lambda o, v, a: np.add(v[0], v[1], out=o),
    "sub": lambda o, v, a: np.subtract(v[0], v[1], out=o),
    "mul": lambda o, v, a: np.multiply(v[0], v[1], out=o),
    "div": lambda o, v, a: np.divide(v[0], v[1], out=o),
    "neg": lambda o, v, a: np.negative(v[0], out=o),
    "exp": lambda o, v, a: np.exp(v[0], out=o),
    "log": lambda o, v, a: np.log(v[0], out=o),
    "tanh": lambda o, v, a: np.tanh(v[0], out=o),
    "relu": lambda o, v, a: np.maximum(v[0], 0.0, out=o),
    "sigmoid": _evo_sigmoid,
    "square": lambda o, v, a: np.multiply(v[0], v[0], out=o),
    "sqrt": lambda o, v, a: np.sqrt(v[0], out=o),
    "maximum": lambda o, v, a: np.maximum(v[0], v[1], out=o),
    "gtz": lambda o, v, a: np.copyto(o, v[0] > 0.0),
    "matmul": lambda o, v, a: np.matmul(v[0], v[1], out=o),
    "transpose": lambda o, v, a: np.copyto(o, v[0].T),
    "stack": _evo_stack,
    "col": lambda o, v, a: np.copyto(o, v[0][:, a]),
    "scatter_col": _evo_scatter,
    "reshape": lambda o, v, a: np.copyto(o, v[0].reshape(a)),
    "sum": lambda o, v, a: np.sum(v[0], out=o),
    "mean": lambda o, v, a: np.mean(v[0], out=o),
    "sum0": lambda o, v, a: np.sum(v[0], axis=0, out=o),
    "bcast": lambda o, v, a: np.copyto(o, v[0]),
}


# ---------------------------------------------------------------------------
# functional front end; every function accepts Nodes or plain numpy so model
# code can run on either (arrays fall straight through to numpy)
# ---------------------------------------------------------------------------

def _is_node(x):
    return isinstance(x, Node)


def exp(x):
    return x.g._op("exp", (x,)) if _is_node(x) else np.exp(x)


def log(x):
    return x.g._op("log", (x,)) if _is_node(x) else np.log(x)


def tanh(x):
    return x.g._op("tanh", (x,)) if _is_node(x) else np.tanh(x)


def relu(x):
    return x.g._op("relu", (x,)) if _is_node(x) else np.maximum(x, 0.0)


def sigmoid(x):
    return x.g._op("sigmoid", (x,)) if _is_node(x) else 1.0 / (1.0 + np.exp(-x))


def square(x):
    return x.g._op("square", (x,)) if _is_node(x) else x * x


def sqrt(x):
    return x.g._op("sqrt", (x,)) if _is_node(x) else np.sqrt(x)


def maximum(x, y):
    if _is_node(x) or _is_node(y):
        g = x.g if _is_node(x) else y.g
        x = x if _is_node(x) else g.const(x)
        y = y if _is_node(y) else g.const(y)
        return g._op("maximum", (x, y))
    return np.maximum(x, y)


def mean(x):
    return x.mean() if _is_node(x) else np.asarray(np.mean(x))


def total(x):
    return x.sum() if _is_node(x) else np.asarray(np.sum(x))


def matmul(a, b):
    return a.g._op("matmul", (a, b)) if _is_node(a) else a @ b


def transpose(a):
    return a.g._op("transpose", (a,)) if _is_node(a) else a.T


def stack_cols(cols, rows=None):
    """Stack 1-d nodes (or scalar nodes/numbers) into an (N, k) matrix node."""
    g = next(c.g for c in cols if _is_node(c))
    lifted = [c if _is_node(c) else g.const(c) for c in cols]
    if rows is None:
        rows = next((c.value.shape[0] for c in lifted if c.value.ndim == 1), None)
        if rows is None:
            raise ValueError("stack_cols of scalars needs an explicit row count")
    return g._op("stack", tuple(lifted), aux=rows)


def col(a, j):
    return a.g._op("col", (a,), aux=j) if _is_node(a) else a[:, j]


def reshape(a, shape):
    return a.g._op("reshape", (a,), aux=tuple(shape)) if _is_node(a) else a.reshape(shape)


def _gtz(x):
    return x.g._op("gtz", (x,))


def _scatter_col(x, j, w):
    return x.g._op("scatter_col", (x,), aux=(j, w))


def _sum0(x):
    return x.g._op("sum0", (x,))


def _bcast(x, shape):
    return x.g._op("bcast", (x,), aux=tuple(shape))


# ---------------------------------------------------------------------------
# reachability
# ---------------------------------------------------------------------------

def _active_set(g, out_i, wrt_ids):
    """Mask of nodes on some path from a wrt leaf to out."""
    n = out_i + 1
    from_wrt = np.zeros(n, dtype=bool)
    for i in wrt_ids:
        if i <= out_i:
            from_wrt[i] = True
    args = g.args
    for i in range(n):
        if not from_wrt[i]:
            for j in args[i]:
                if from_wrt[j]:
                    from_wrt[i] = True
                    break
    to_out = np.zeros(n, dtype=bool)
    to_out[out_i] = True
    for i in range(out_i, -1, -1):
        if to_out[i]:
            for j in args[i]:
                to_out[j] = True
    return from_wrt & to_out


# ---------------------------------------------------------------------------
# numeric reverse sweep, precompiled against a static graph
# ---------------------------------------------------------------------------

class BackwardPlan:
    """Precompiled reverse sweep.

    run() re-reads current node values, so call it right after recompute().
    The returned gradient arrays are owned by the plan and overwritten by
    the next run; copy them if they must outlive it.
    """

    def __init__(self, g, out, wrt):
        if np.size(g.val[out.i]) != 1:
            raise ValueError("backward needs a scalar output node")
        self.g = g
        self.out = out
        self.wrt = list(wrt)
        self.built_at = g.version
        self._build()

    def _build(self):
        g, out = self.g, self.out
        wrt_ids = [n.i for n in self.wrt]
        active = _active_set(g, out.i, wrt_ids)
        adj = {}
        for i in range(out.i + 1):
            if active[i]:
                adj[i] = np.zeros_like(g.val[i])
        for n in self.wrt:
            # leaves the output does not depend on keep an all-zero buffer
            if n.i not in adj:
                adj[n.i] = np.zeros_like(g.val[n.i])
        self.adj = adj
        written = set()
        contributed = {out.i}
        steps = []
        scratch = {}

        def scr(shape):
            if shape not in scratch:
                scratch[shape] = np.empty(shape)
            return scratch[shape]

        val = g.val
        for i in range(out.i, -1, -1):
            if not active[i] or i not in contributed:
                continue
            k = g.kind[i]
            if k in ("var", "const"):
                continue
            ain = g.args[i]
            for slot, j in enumerate(ain):
                if not active[j]:
                    continue
                fn = _make_acc(k, slot, adj[i], adj[j], val, ain, i, g.aux[i],
                               scr, j not in written)
                if fn is None:
                    continue
                written.add(j)
                contributed.add(j)
                steps.append(fn)
        self.steps = steps

    def run(self):
        if self.g.version != self.built_at:
            raise RuntimeError("graph changed since this plan was compiled")
        self.adj[self.out.i].fill(1.0)
        for fn in self.steps:
            fn()
        return [self.adj[n.i] for n in self.wrt]


def _make_acc(kind, slot, d, t, val, ain, i, aux, scr, first):
    """One accumulation step: t (+)= d(out_i)/d(input_slot) contracted with d.

    Returns a closure, None for zero-derivative ops, or _NEEDS_ZERO when the
    op has no write-initializing variant (caller zeroes the buffer instead).
    """
    a = val[ain[0]] if ain else None
    b = val[ain[1]] if len(ain) > 1 else None
    o = val[i]

    def finish(cs, compute_into):
        # compute_into(dst) writes the unreduced contribution (shape cs)
        same = cs == t.shape
        if same and first:
            return lambda: compute_into(t)
        if same:
            s = scr(cs)

            def fn():
                compute_into(s)
                np.add(t, s, out=t)
            return fn
        s = scr(cs)
        if t.shape == ():
            if first:
                def fn():
                    compute_into(s)
                    t[...] = s.sum()
            else:
                def fn():
                    compute_into(s)
                    np.add(t, s.sum(), out=t)
            return fn
        if first:
            def fn():
                compute_into(s)
                np.sum(s, axis=0, out=t)
        else:
            def fn():
                compute_into(s)
                np.add(t, s.sum(axis=0), out=t)
        return fn

    if kind == "add":
        return finish(d.shape, lambda dst: np.copyto(dst, d))
    if kind == "sub":
        if slot == 0:
            return finish(d.shape, lambda dst: np.copyto(dst, d))
        return finish(d.shape, lambda dst: np.negative(d, out=dst))
    if kind == "mul":
        other = b if slot == 0 else a
        cs = np.broadcast_shapes(d.shape, other.shape)
        return finish(cs, lambda dst: np.multiply(d, other, out=dst))
    if kind == "div":
        if slot == 0:
            cs = np.broadcast_shapes(d.shape, b.shape)
            return finish(cs, lambda dst: np.divide(d, b, out=dst))
        cs = np.broadcast_shapes(d.shape, o.shape, b.shape)

        def ci(dst):
            np.multiply(d, o, out=dst)
            np.divide(dst, b, out=dst)
            np.negative(dst, out=dst)
        return finish(cs, ci)
    if kind == "neg":
        return finish(d.shape, lambda dst: np.negative(d, out=dst))
    if kind == "exp":
        return finish(o.shape, lambda dst: np.multiply(d, o, out=dst))
    if kind == "log":
        return finish(o.shape, lambda dst: np.divide(d, a, out=dst))
    if kind == "tanh":
        def ci(dst):
            np.multiply(o, o, out=dst)
            np.subtract(1.0, dst, out=dst)
            np.multiply(dst, d, out=dst)
        return finish(o.shape, ci)
    if kind == "relu":
        return finish(o.shape, lambda dst: np.multiply(d, a > 0.0, out=dst))
    if kind == "sigmoid":
        def ci(dst):
            np.subtract(1.0, o, out=dst)
            np.multiply(dst, o, out=dst)
            np.multiply(dst, d, out=dst)
        return finish(o.shape, ci)
    if kind == "square":
        cs = np.broadcast_shapes(d.shape, a.shape)

        def ci(dst):
            np.multiply(d, a, out=dst)
            np.multiply(dst, 2.0, out=dst)
        return finish(cs, ci)
    if kind == "sqrt":
        def ci(dst):
            np.divide(d, o, out=dst)
            np.multiply(dst, 0.5, out=dst)
        return finish(o.shape, ci)
    if kind == "maximum":
        if slot == 0:
            return finish(o.shape, lambda dst: np.multiply(d, a > b, out=dst))
        return finish(o.shape, lambda dst: np.multiply(d, np.logical_not(a > b), out=dst))
    if kind == "gtz":
        return None  # derivative defined as 0 (kink resolves to the flat side)
    if kind == "matmul":
        if slot == 0:
            if first:
                return lambda: np.matmul(d, b.T, out=t)
            s = scr(t.shape)

            def fn():
                np.matmul(d, b.T, out=s)
                np.add(t, s, out=t)
            return fn
        if first:
            return lambda: np.matmul(a.T, d, out=t)
        s = scr(t.shape)

        def fn():
            np.matmul(a.T, d, out=s)
            np.add(t, s, out=t)
        return fn
    if kind == "transpose":
        if first:
            return lambda: np.copyto(t, d.T)
        return lambda: np.add(t, d.T, out=t)
    if kind == "stack":
        if val[ain[slot]].shape == ():
            if first:
                def fn():
                    t[...] = d[:, slot].sum()
                return fn

            def fn():
                np.add(t, d[:, slot].sum(), out=t)
            return fn
        if first:
            return lambda: np.copyto(t, d[:, slot])

        def fn():
            np.add(t, d[:, slot], out=t)
        return fn
    if kind == "col":
        j = aux
        if first:
            def fn():
                t.fill(0.0)
                t[:, j] = d
            return fn

        def fn():
            t[:, j] += d
        return fn
    if kind == "scatter_col":
        j = aux[0]
        if first:
            return lambda: np.copyto(t, d[:, j])

        def fn():
            np.add(t, d[:, j], out=t)
        return fn
    if kind == "reshape":
        if first:
            return lambda: np.copyto(t, d.reshape(t.shape))

        def fn():
            np.add(t, d.reshape(t.shape), out=t)
        return fn
    if kind == "sum":
        if first:
            return lambda: np.copyto(t, d)  # 0-d broadcasts over t

        def fn():
            np.add(t, d, out=t)
        return fn
    if kind == "mean":
        inv = 1.0 / max(np.size(a), 1)
        if first:
            def fn():
                t[...] = d * inv
            return fn

        def fn():
            np.add(t, d * inv, out=t)
        return fn
    if kind == "sum0":
        if first:
            return lambda: np.copyto(t, d)  # rows broadcast

        def fn():
            np.add(t, d, out=t)
        return fn
    if kind == "bcast":
        if d.shape == t.shape:
            if first:
                return lambda: np.copyto(t, d)
            return lambda: np.add(t, d, out=t)
        if t.shape == ():
            if first:
                def fn():
                    t[...] = d.sum()
                return fn

            def fn():
                np.add(t, d.sum(), out=t)
            return fn
        if first:
            return lambda: np.sum(d, axis=0, out=t)

        def fn():
            np.add(t, d.sum(axis=0), out=t)
        return fn
    raise NotImplementedError(kind)


def compile_backward(out, wrt):
    """Build a reusable BackwardPlan for a static graph."""
    return BackwardPlan(out.g, out, wrt)


def backward(out, wrt=None):
    """Single reverse sweep from a scalar node. Returns GradientResult with
    partials aligned with wrt (default: every var leaf of the graph, in
    creation order). Cost is one pass over the recorded nodes."""
    g = out.g
    if wrt is None:
        wrt = [Node(g, i) for i in g.roots]
    plan = BackwardPlan(g, out, wrt)
    grads = plan.run()
    parts = [np.array(p, copy=True) for p in grads]
    return GradientResult(float(out.value), parts, list(wrt))


# ---------------------------------------------------------------------------
# graph-building reverse sweep (gradients as nodes)
# ---------------------------------------------------------------------------

def grad_nodes(out, wrt):
    """Record the reverse sweep as graph nodes: returns nodes for d out/d w.

    The results are ordinary graph values, so they can enter further
    expressions (PDE residuals) and be differentiated again. For batched
    leaves whose samples do not interact, the entry for sample n is the
    per-sample derivative, which is how the residual trainer extracts
    du/dt and du/dx pointwise from a summed output.
    """
    g = out.g
    if np.size(g.val[out.i]) != 1:
        raise ValueError("grad_nodes needs a scalar output node")
    wrt_ids = [n.i for n in wrt]
    active = _active_set(g, out.i, wrt_ids)
    adj = {out.i: g.const(1.0)}

    def unb_node(c, shape):
        if c.shape == shape:
            return c
        if shape == ():
            return c.sum()
        if len(c.shape) == 2 and shape == (c.shape[1],):
            return _sum0(c)
        raise ValueError(f"cannot reduce node of shape {c.shape} to {shape}")

    def add_to(j, contrib):
        contrib = unb_node(contrib, g.val[j].shape)
        adj[j] = contrib if j not in adj else adj[j] + contrib

    for i in range(out.i, -1, -1):
        if not active[i] or i not in adj:
            continue
        k = g.kind[i]
        if k in ("var", "const"):
            continue
        d = adj[i]
        ain = g.args[i]
        aux = g.aux[i]
        nin = [Node(g, j) for j in ain]
        if k == "add":
            for j in ain:
                if active[j]:
                    add_to(j, d)
        elif k == "sub":
            if active[ain[0]]:
                add_to(ain[0], d)
            if active[ain[1]]:
                add_to(ain[1], -d)
        elif k == "mul":
            if active[ain[0]]:
                add_to(ain[0], d * nin[1])
            if active[ain[1]]:
                add_to(ain[1], d * nin[0])
        elif k == "div":
            if active[ain[0]]:
                add_to(ain[0], d / nin[1])
            if active[ain[1]]:
                add_to(ain[1], -(d * Node(g, i)) / nin[1])
        elif k == "neg":
            add_to(ain[0], -d)
        elif k == "exp":
            add_to(ain[0], d * Node(g, i))
        elif k == "log":
            add_to(ain[0], d / nin[0])
        elif k == "tanh":
            add_to(ain[0], d * (1.0 - square(Node(g, i))))
        elif k == "relu":
            add_to(ain[0], d * _gtz(nin[0]))
        elif k == "sigmoid":
            o = Node(g, i)
            add_to(ain[0], d * o * (1.0 - o))
        elif k == "square":
            add_to(ain[0], d * nin[0] * 2.0)
        elif k == "sqrt":
            add_to(ain[0], d / (Node(g, i) * 2.0))
        elif k == "maximum":
            mask = _gtz(nin[0] - nin[1])
            if active[ain[0]]:
                add_to(ain[0], d * mask)
            if active[ain[1]]:
                add_to(ain[1], d * (1.0 - mask))
        elif k == "gtz":
            pass
        elif k == "matmul":
            if active[ain[0]]:
                add_to(ain[0], matmul(d, transpose(nin[1])))
            if active[ain[1]]:
                add_to(ain[1], matmul(transpose(nin[0]), d))
        elif k == "transpose":
            add_to(ain[0], transpose(d))
        elif k == "stack":
            for slot, j in enumerate(ain):
                if active[j]:
                    add_to(j, col(d, slot))
        elif k == "col":
            add_to(ain[0], _scatter_col(d, aux, g.val[ain[0]].shape[1]))
        elif k == "scatter_col":
            add_to(ain[0], col(d, aux[0]))
        elif k == "reshape":
            add_to(ain[0], reshape(d, g.val[ain[0]].shape))
        elif k == "sum":
            add_to(ain[0], _bcast(d, g.val[ain[0]].shape))
        elif k == "mean":
            inv = 1.0 / max(np.size(g.val[ain[0]]), 1)
            add_to(ain[0], _bcast(d * inv, g.val[ain[0]].shape))
        elif k == "sum0":
            add_to(ain[0], _bcast(d, g.val[ain[0]].shape))
        elif k == "bcast":
            add_to(ain[0], unb_node(d, g.val[ain[0]].shape))
        else:
            raise NotImplementedError(k)

    zero = None
    outs = []
    for j in wrt_ids:
        if j in adj:
            outs.append(adj[j])
        else:
            if zero is None:
                zero = g.const(np.zeros(()))
            shape = g.val[j].shape
            outs.append(_bcast(zero, shape) if shape != () else zero)
    return outs


# ---------------------------------------------------------------------------
# forward tangent sweep (tangents as nodes)
# ---------------------------------------------------------------------------

def tangent_nodes(seeds, outputs):
    """Forward-mode sweep recorded as nodes.

    seeds maps leaf Node -> tangent value (scalar or array broadcastable to
    the leaf shape); outputs is a list of nodes whose tangents are wanted.
    An identically-zero tangent comes back as a const-zero node.
    """
    g = next(iter(seeds)).g
    top = max(n.i for n in outputs)
    tang = {}
    for n, s in seeds.items():
        sv = np.broadcast_to(_as_value(s), g.val[n.i].shape)
        tang[n.i] = g.const(sv)

    reach = np.zeros(top + 1, dtype=bool)
    for n in seeds:
        if n.i <= top:
            reach[n.i] = True
    for i in range(top + 1):
        if not reach[i]:
            for j in g.args[i]:
                if j <= top and reach[j]:
                    reach[i] = True
                    break

    for i in range(top + 1):
        k = g.kind[i]
        if k in ("var", "const") or not reach[i] or i in tang:
            continue
        ain = g.args[i]
        aux = g.aux[i]
        tin = [tang.get(j) for j in ain]
        if all(t is None for t in tin):
            continue
        nin = [Node(g, j) for j in ain]
        o = Node(g, i)
        if k == "add":
            t = _tsum(tin)
        elif k == "sub":
            t = -tin[1] if tin[0] is None else (tin[0] if tin[1] is None else tin[0] - tin[1])
        elif k == "mul":
            terms = []
            if tin[0] is not None:
                terms.append(tin[0] * nin[1])
            if tin[1] is not None:
                terms.append(nin[0] * tin[1])
            t = _tsum(terms)
        elif k == "div":
            if tin[1] is None:
                t = tin[0] / nin[1]
            else:
                num = tin[0] - o * tin[1] if tin[0] is not None else -(o * tin[1])
                t = num / nin[1]
        elif k == "neg":
            t = -tin[0]
        elif k == "exp":
            t = o * tin[0]
        elif k == "log":
            t = tin[0] / nin[0]
        elif k == "tanh":
            t = (1.0 - square(o)) * tin[0]
        elif k == "relu":
            t = _gtz(nin[0]) * tin[0]
        elif k == "sigmoid":
            t = o * (1.0 - o) * tin[0]
        elif k == "square":
            t = 2.0 * nin[0] * tin[0]
        elif k == "sqrt":
            t = tin[0] / (2.0 * o)
        elif k == "maximum":
            mask = _gtz(nin[0] - nin[1])
            terms = []
            if tin[0] is not None:
                terms.append(mask * tin[0])
            if tin[1] is not None:
                terms.append((1.0 - mask) * tin[1])
            t = _tsum(terms)
        elif k == "gtz":
            t = None
        elif k == "matmul":
            terms = []
            if tin[0] is not None:
                terms.append(matmul(tin[0], nin[1]))
            if tin[1] is not None:
                terms.append(matmul(nin[0], tin[1]))
            t = _tsum(terms)
        elif k == "transpose":
            t = transpose(tin[0])
        elif k == "stack":
            cols_t = [tj if tj is not None else g.const(0.0) for tj in tin]
            t = g._op("stack", tuple(c if isinstance(c, Node) else c for c in cols_t), aux=aux)
        elif k == "col":
            t = col(tin[0], aux)
        elif k == "scatter_col":
            t = _scatter_col(tin[0], aux[0], aux[1])
        elif k == "reshape":
            t = reshape(tin[0], aux)
        elif k == "sum":
            t = tin[0].sum()
        elif k == "mean":
            t = tin[0].mean()
        elif k == "sum0":
            t = _sum0(tin[0])
        elif k == "bcast":
            t = _bcast(tin[0], aux)
        else:
            raise NotImplementedError(k)
        if t is not None:
            tang[i] = t

    outs = []
    zero = None
    for n in outputs:
        if n.i in tang:
            outs.append(tang[n.i])
        else:
            if zero is None:
                zero = g.const(np.zeros(()))
            shape = g.val[n.i].shape
            outs.append(_bcast(zero, shape) if shape != () else zero)
    return outs


def _tsum(terms):
    terms = [t for t in terms if t is not None]
    t = terms[0]
    for u in terms[1:]:
        t = t + u
    return t


def spatial_hessian_diag(out, wrt):
    """Diagonal second derivatives of a scalar node, forward-over-reverse.

    Records the reverse sweep as nodes, then runs one tangent sweep per
    requested leaf (seed 1 in that coordinate) through the forward and
    reverse parts together. For batched leaves the result is the per-sample
    second derivative array. Returns numpy values aligned with wrt.
    """
    gn = grad_nodes(out, wrt)
    res = []
    for leaf, gnode in zip(wrt, gn):
        (t,) = tangent_nodes({leaf: 1.0}, [gnode])
        res.append(np.array(t.value, copy=True))
    return res
