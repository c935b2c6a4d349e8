"""Feedforward nets over the autodiff graph, with a flat parameter vector.

A network is (architecture, theta). The architecture lists layer sizes
[d_in, w_1, ..., w_L, d_out], hidden activation is tanh, output head is
identity or exp (exp for densities, it keeps the net positive by
construction). theta is one flat float64 vector; per layer the layout is
[bias (d_out), weights row-major (d_out, d_in)], layers in order. Everything
that touches parameters goes through this vector, so optimizers and
checkpoints never see the layer structure.

Two forward paths that agree bitwise: a graph path (NetOnGraph) used inside
training losses, and a plain numpy path (forward_np) for rollout fast paths
and snapshot grids. Both multiply by the same contiguous transposed weight
buffers, in the same order, so the same BLAS call produces the same floats.
"""

import json

import numpy as np

from . import autodiff as ad


class Architecture:
    """Layer sizes plus output head. layers includes input and output dims."""

    def __init__(self, layers, out="identity"):
        layers = [int(d) for d in layers]
        if len(layers) < 2 or min(layers) < 1:
            raise ValueError(f"bad layer list {layers}")
        if out not in ("identity", "exp"):
            raise ValueError(f"unknown output head {out!r}")
        self.layers = tuple(layers)
        self.out = out

    @property
    def din(self):
        return self.layers[0]

    @property
    def dout(self):
        return self.layers[-1]

    def param_count(self):
        n = 0
        for d_in, d_out in zip(self.layers[:-1], self.layers[1:]):
            n += d_out + d_out * d_in
        return n

    def __eq__(self, other):
        return (isinstance(other, Architecture)
                and self.layers == other.layers and self.out == other.out)

    def __repr__(self):
        return f"Architecture({list(self.layers)}, out={self.out!r})"


def init_params(arch, seed):
    """Glorot-uniform weights (+-sqrt(6/(d_in+d_out))), zero biases."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(arch.param_count())
    pos = 0
    for d_in, d_out in zip(arch.layers[:-1], arch.layers[1:]):
        pos += d_out  # bias stays zero
        lim = np.sqrt(6.0 / (d_in + d_out))
        w = rng.uniform(-lim, lim, size=(d_out, d_in))
        theta[pos:pos + d_out * d_in] = w.ravel()
        pos += d_out * d_in
    return theta


def unpack(arch, theta):
    """Split flat theta into per-layer (W, b), W shaped (d_out, d_in)."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (arch.param_count(),):
        raise ValueError(f"theta has {theta.shape}, arch wants ({arch.param_count()},)")
    out = []
    pos = 0
    for d_in, d_out in zip(arch.layers[:-1], arch.layers[1:]):
        b = theta[pos:pos + d_out]
        pos += d_out
        W = theta[pos:pos + d_out * d_in].reshape(d_out, d_in)
        pos += d_out * d_in
        out.append((W, b))
    return out


def pack(arch, layers):
    theta = np.empty(arch.param_count())
    pos = 0
    for W, b in layers:
        d_out = b.size
        theta[pos:pos + d_out] = b
        pos += d_out
        theta[pos:pos + W.size] = np.asarray(W).ravel()
        pos += W.size
    return theta


class NetOnGraph:
    """The net's parameters as var leaves of a graph.

    Weight leaves hold W.T (shape (d_in, d_out)) so the batched forward is
    X @ Wt + b without transposes on the hot path. set_theta pushes a new
    flat vector into the leaves; flatten_grads maps leaf gradients back to
    the flat layout.
    """

    def __init__(self, g, arch, theta):
        self.g = g
        self.arch = arch
        self.wt_nodes = []
        self.b_nodes = []
        for W, b in unpack(arch, theta):
            self.wt_nodes.append(g.var(np.ascontiguousarray(W.T)))
            self.b_nodes.append(g.var(b))

    @property
    def leaves(self):
        out = []
        for wt, b in zip(self.wt_nodes, self.b_nodes):
            out.append(wt)
            out.append(b)
        return out

    def set_theta(self, theta):
        for (W, b), wt_n, b_n in zip(unpack(self.arch, theta),
                                     self.wt_nodes, self.b_nodes):
            wt_n.set_value(np.ascontiguousarray(W.T))
            b_n.set_value(b)

    def flatten_grads(self, grads):
        """grads aligned with .leaves -> flat array in theta layout."""
        layers = []
        for k in range(len(self.wt_nodes)):
            g_wt = grads[2 * k]
            g_b = grads[2 * k + 1]
            layers.append((g_wt.T, g_b))
        return pack(self.arch, layers)

    def forward(self, X):
        """X: (N, d_in) node. Returns (N, d_out) node."""
        h = X
        last = len(self.wt_nodes) - 1
        for k, (wt, b) in enumerate(zip(self.wt_nodes, self.b_nodes)):
            h = ad.matmul(h, wt) + b
            if k < last:
                h = ad.tanh(h)
        if self.arch.out == "exp":
            h = ad.exp(h)
        return h

    def forward_cols(self, cols, rows=None):
        """Convenience: stack 1-d feature nodes into the input matrix first."""
        return self.forward(ad.stack_cols(cols, rows=rows))


class NetNumpy:
    """Plain numpy twin of NetOnGraph with identical arithmetic."""

    def __init__(self, arch, theta):
        self.arch = arch
        self.wts = []
        self.bs = []
        for W, b in unpack(arch, theta):
            self.wts.append(np.ascontiguousarray(W.T))
            self.bs.append(b.copy())

    def forward(self, X):
        h = np.asarray(X, dtype=np.float64)
        last = len(self.wts) - 1
        for k, (wt, b) in enumerate(zip(self.wts, self.bs)):
            h = np.matmul(h, wt) + b
            if k < last:
                h = np.tanh(h)
        if self.arch.out == "exp":
            h = np.exp(h)
        return h


def forward_np(arch, theta, X):
    return NetNumpy(arch, theta).forward(X)


def save_checkpoint(path, arch, theta, extra=None):
    """One JSON header line, then raw little-endian float64 theta."""
    theta = np.asarray(theta, dtype=np.float64)
    head = {"layers": list(arch.layers), "out": arch.out, "count": int(theta.size)}
    if extra:
        head.update(extra)
    with open(path, "wb") as f:
        f.write(json.dumps(head, sort_keys=True).encode() + b"\n")
        f.write(theta.astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns (arch, theta, header_dict); bit-exact inverse of save."""
    with open(path, "rb") as f:
        head = json.loads(f.readline().decode())
        raw = f.read()
    arch = Architecture(head["layers"], out=head["out"])
    theta = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if theta.size != head["count"] or theta.size != arch.param_count():
        raise ValueError(f"checkpoint size mismatch in {path}")
    return arch, theta, head
