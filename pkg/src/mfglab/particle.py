"""Interacting-particle simulation with empirical-measure coupling.

The population of N particles advances by explicit Euler steps; at every
step the empirical summary (state mean, control mean, and for common-noise
models the ensemble mean standing in for the conditional mean) is computed
from the current states BEFORE the step and fed to the drift.

Two rollout paths share one increment layout and one op ordering:
`rollout` is plain numpy, used for oracle-policy evaluation and Monte Carlo
checks; `rollout_graph` builds the same recursion as autodiff nodes so a
training loss can differentiate through all steps. With the numpy twin of
a network policy the two produce bit-identical trajectories, which the
tests pin down.

Noise is counter-based (Philox keyed by the caller's seed), so a sample is
a pure function of its seed, and particle i's stream is row i of the
sample: permuting rows permutes trajectories.
"""

import numpy as np

from . import autodiff as ad
from .models import MeasureSummary
from .net import forward_np


class ParticleBlowUpError(RuntimeError):
    def __init__(self, step, t):
        super().__init__(f"non-finite particle states at step {step} (t={t:.6g})")
        self.step = step
        self.t = t


def philox_rng(seed):
    """Generator on a Philox key built from an int or a tuple of ints.

    Tuples let callers derive independent per-iteration streams as
    (seed, iteration) without coupling draws across iterations.
    """
    parts = seed if isinstance(seed, (tuple, list)) else (seed,)
    if len(parts) > 2:
        raise ValueError("seed tuple too long for a Philox key")
    key = np.zeros(2, dtype=np.uint64)
    for i, s in enumerate(parts):
        s = int(s)
        if s < 0:
            raise ValueError(f"seed components must be nonnegative, got {s}")
        key[i] = np.uint64(s & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


class NoiseSample:
    """Frozen randomness for one rollout: initial states plus increments.

    dW has shape (N, N_T) with N(0, dt) entries; dW0, present only for
    common-noise models, is the shared path of shape (N_T,).
    """

    def __init__(self, x0, dW, dW0, dt, seed=None):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.dW = np.asarray(dW, dtype=np.float64)
        self.dW0 = None if dW0 is None else np.asarray(dW0, dtype=np.float64)
        self.dt = float(dt)
        self.seed = seed
        if self.dW.shape[0] != self.x0.shape[0]:
            raise ValueError("dW rows must match the number of particles")

    @property
    def n_particles(self):
        return self.x0.shape[0]

    @property
    def n_steps(self):
        return self.dW.shape[1]

    def permuted(self, perm):
        """Same noise with particle rows reordered; dW0 is shared so it
        stays put."""
        return NoiseSample(self.x0[perm], self.dW[perm], self.dW0, self.dt,
                           seed=None)


def sample_noise(model, n_particles, n_steps, seed):
    """Draw (X_0, (dW_n)_n [, (dW0_n)_n]) for `model`, deterministically in
    seed. Draw order is fixed: initial states, idiosyncratic block, common
    path."""
    if n_particles < 1 or n_steps < 1:
        raise ValueError("need at least one particle and one step")
    dt = model.T / n_steps
    rng = philox_rng(seed)
    x0 = model.m0.sample(rng, n_particles)
    dW = np.sqrt(dt) * rng.standard_normal((n_particles, n_steps))
    dW0 = np.sqrt(dt) * rng.standard_normal(n_steps) if model.common_noise else None
    return NoiseSample(x0, dW, dW0, dt, seed=seed)


def effective_increments(model, noise):
    """sigma-scaled per-particle increments, with the common path mixed in
    by rho when the model has one. Shared by both rollout paths so they see
    identical numbers."""
    if model.common_noise:
        rho = model.rho
        mix = rho * noise.dW0[None, :] + np.sqrt(1.0 - rho ** 2) * noise.dW
        return model.sigma * mix
    return model.sigma * noise.dW


class Ensemble:
    """Rollout output: trajectories, controls used, per-step summaries.

    x is (N, N_T+1), alpha (N, N_T); summaries has N_T+1 entries, the last
    one terminal (state statistics only). mbar is the ensemble-mean path
    for common-noise models, else None. Particle i's noise stream is row i
    of the originating sample.
    """

    def __init__(self, t, x, alpha, summaries, mbar=None):
        self.t = t
        self.x = x
        self.alpha = alpha
        self.summaries = summaries
        self.mbar = mbar

    @property
    def n_particles(self):
        return self.x.shape[0]

    @property
    def n_steps(self):
        return self.alpha.shape[1]


def rollout(model, policy, noise):
    """Euler rollout under `policy`, a callable (t, x_vec) -> alpha_vec, or
    (t, x_vec, mbar) -> alpha_vec when the model carries common noise.
    Raises ParticleBlowUpError at the first non-finite state."""
    n, steps = noise.n_particles, noise.n_steps
    dt = noise.dt
    inc = effective_increments(model, noise)
    t = dt * np.arange(steps + 1)
    x = np.empty((n, steps + 1))
    a = np.empty((n, steps))
    x[:, 0] = noise.x0
    summaries = []
    mbar = np.empty(steps + 1) if model.common_noise else None
    for k in range(steps):
        xk = x[:, k]
        if not np.all(np.isfinite(xk)):
            raise ParticleBlowUpError(k, t[k])
        m = xk.mean()
        if model.common_noise:
            mbar[k] = m
            a[:, k] = policy(t[k], xk, m)
        else:
            a[:, k] = policy(t[k], xk)
        s = MeasureSummary(state_mean=m, control_mean=a[:, k].mean(),
                           state_sample=xk)
        summaries.append(s)
        b = model.drift(xk, s, a[:, k])
        x[:, k + 1] = xk + b * dt + inc[:, k]
    xT = x[:, steps]
    if not np.all(np.isfinite(xT)):
        raise ParticleBlowUpError(steps, t[steps])
    if model.common_noise:
        mbar[steps] = xT.mean()
    summaries.append(MeasureSummary(state_mean=xT.mean(), state_sample=xT))
    return Ensemble(t, x, a, summaries, mbar)


def policy_from_net(arch, theta):
    """Numpy twin of the graph-path network policy: features are columns
    (t, x) or (t, x, mbar), exactly as rollout_graph stacks them."""
    def policy(t, x, mbar=None):
        cols = [np.broadcast_to(t, x.shape), x]
        if mbar is not None:
            cols.append(np.broadcast_to(mbar, x.shape))
        feats = np.empty((x.shape[0], len(cols)))
        for j, c in enumerate(cols):
            feats[:, j] = c
        return forward_np(arch, theta, feats)[:, 0]
    return policy


class GraphRollout:
    """The particle recursion as autodiff nodes on a shared graph.

    x_nodes[k] is the (N,) state at step k, alpha_nodes[k] the control fed
    into step k, summaries[k] the node-valued measure summary. x0_node and
    inc_nodes are the noise constants; set_noise swaps a fresh sample into
    the static graph for the next recompute.
    """

    def __init__(self, g, model, x_nodes, alpha_nodes, summaries, mbar_nodes,
                 x0_node, inc_nodes):
        self.g = g
        self.model = model
        self.x_nodes = x_nodes
        self.alpha_nodes = alpha_nodes
        self.summaries = summaries
        self.mbar_nodes = mbar_nodes
        self.x0_node = x0_node
        self.inc_nodes = inc_nodes

    def set_noise(self, noise):
        inc = effective_increments(self.model, noise)
        self.x0_node.set_value(noise.x0)
        for k, node in enumerate(self.inc_nodes):
            node.set_value(inc[:, k])


def rollout_graph(g, model, net, noise):
    """Build the Euler recursion on graph `g` with `net` (a NetOnGraph) as
    the feedback control. Mirrors `rollout` op for op: same increments,
    same stacking order, same mean reductions."""
    n, steps = noise.n_particles, noise.n_steps
    dt = noise.dt
    inc = effective_increments(model, noise)
    dt_node = g.const(dt)
    t_cols = [g.const(np.full(n, dt * k)) for k in range(steps)]
    x0_node = g.var(noise.x0)
    inc_nodes = [g.var(inc[:, k]) for k in range(steps)]

    x_nodes = [x0_node]
    alpha_nodes = []
    summaries = []
    mbar_nodes = [] if model.common_noise else None
    xk = x0_node
    for k in range(steps):
        cols = [t_cols[k], xk]
        mean_k = ad.mean(xk)
        if model.common_noise:
            mbar_nodes.append(mean_k)
            cols.append(ad._bcast(mean_k, (n,)))
        feats = ad.stack_cols(cols, rows=n)
        alpha = ad.col(net.forward(feats), 0)
        alpha_nodes.append(alpha)
        s = MeasureSummary(state_mean=mean_k, control_mean=ad.mean(alpha),
                           state_sample=xk)
        summaries.append(s)
        b = model.drift(xk, s, alpha)
        xk = xk + b * dt_node + inc_nodes[k]
        x_nodes.append(xk)
    mean_T = ad.mean(xk)
    if model.common_noise:
        mbar_nodes.append(mean_T)
    summaries.append(MeasureSummary(state_mean=mean_T, state_sample=xk))
    return GraphRollout(g, model, x_nodes, alpha_nodes, summaries, mbar_nodes,
                        x0_node, inc_nodes)


def save_trajectory_csv(path, ens, particles=None):
    """Dump trajectories as rows (particle, step, t, x, alpha); alpha is
    empty on the terminal row. `particles` restricts to a subset of rows."""
    idx = range(ens.n_particles) if particles is None else particles
    steps = ens.alpha.shape[1]
    with open(path, "w") as fh:
        fh.write("particle,step,t,x,alpha\n")
        for i in idx:
            for k in range(steps + 1):
                a = f"{ens.alpha[i, k]:.17g}" if k < steps else ""
                fh.write(f"{i},{k},{ens.t[k]:.17g},{ens.x[i, k]:.17g},{a}\n")
