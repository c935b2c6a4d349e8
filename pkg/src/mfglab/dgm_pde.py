"""Residual-minimization solver for the coupled forward-backward PDE pair.

The equilibrium of a mean field game in one space dimension solves

    value:    du/dt + nu d2u/dq2 + H*(q, mubar, du/dq) = 0,    u(T) = g
    density:  dm/dt - nu d2m/dq2 + d/dq( m a*(q, du/dq) ) = 0, m(0) = m0

with a* the Hamiltonian minimizer and, for models that couple through the
mean control, mubar(t) = int a*(t,q) m(t,dq). Two nets (u identity-output,
m exponential-output so the density is positive by construction) are
scored on random collocation points: the two interior residuals and the
two boundary mismatches, each reduced as sqrt(mean of squares), weighted
and summed. Interior derivatives come from the autodiff graph itself
(reverse sweep recorded as nodes for first derivatives, one forward
tangent pass through those for second derivatives and the transport
divergence).

The nonlocal coupling is a self-normalized Monte-Carlo integral: fresh
uniform quadrature points q_j each iteration, mubar(t_i) estimated as
sum_j m(t_i,q_j) a(t_i,q_j) / sum_j m(t_i,q_j). Normalizing by the net's
own mass keeps the estimate meaningful while the density is unnormalized
between penalty updates. The estimate is refreshed from the current nets
every iteration and then enters the residuals as a constant column, so
backprop never reaches the nets through the coupling. Differentiating
through the ratio instead hands the density net a shortcut: the value
residual is easiest to lower by collapsing the mass into a spike parked
wherever the preferred mean control lives, and the interior transport
residual, which scales with m, goes blind once the mass has leaked away.

Boundary mass is anchored only through the initial-condition penalty; on
the truncated box no spatial boundary terms are imposed, relying on the
density decaying before the walls.
"""

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import particle as pt
from .net import NetOnGraph, forward_np, init_params, save_checkpoint
from .optim import Adam
from .mfc_direct import TrainConfig, _EVAL_STREAM


class ZeroNormalizerError(RuntimeError):
    """Self-normalized quadrature hit a vanishing mass estimate."""


class PdeProblem:
    """One-dimensional system on a truncated box [x_lo, x_hi] x [0, T].

    hamiltonian(q, p, mubar) and alpha_from_grad(q, p) must accept graph
    nodes or numpy arrays; terminal(q) likewise. mubar is passed as None
    for problems without nonlocal coupling. m0 supplies density() and
    sample-free moments for snapshots.
    """

    def __init__(self, x_lo, x_hi, T, nu, hamiltonian, alpha_from_grad,
                 terminal, m0, nonlocal_coupling=False, name="pde"):
        if not x_hi > x_lo:
            raise ValueError(f"empty domain [{x_lo}, {x_hi}]")
        if nu <= 0:
            raise ValueError(f"nu must be positive, got {nu}")
        if T <= 0:
            raise ValueError(f"T must be positive, got {T}")
        self.x_lo = float(x_lo)
        self.x_hi = float(x_hi)
        self.T = float(T)
        self.nu = float(nu)
        self.hamiltonian = hamiltonian
        self.alpha_from_grad = alpha_from_grad
        self.terminal = terminal
        self.m0 = m0
        self.nonlocal_coupling = bool(nonlocal_coupling)
        self.name = name
        # affine input map to [0,1] x [-1,1]; raw q over a wide box parks
        # the first tanh layer in saturation and the value net stops moving
        self.q_mid = 0.5 * (self.x_lo + self.x_hi)
        self.q_half = 0.5 * (self.x_hi - self.x_lo)

    def net_inputs(self, t, q):
        """Normalized (t, q) features; works on nodes and arrays."""
        return (t * (1.0 / self.T), (q - self.q_mid) * (1.0 / self.q_half))


def crowded_trade_pde(params=None, T=1.0, m0=None, x_lo=-2.0, x_hi=8.0):
    """Trade-crowding system in the cost convention (u = -profit value).

    H*(q, mubar, p) = phi q^2 - gamma mubar q - p^2/(4 kappa) with
    minimizer a* = -p/(2 kappa); terminal u = A q^2. nu = sigma^2/2.
    The box covers m0 = N(4, 0.3) and the drift toward zero inventory.
    """
    from .models import CrowdedTradeParams, GaussianInit
    p = params or CrowdedTradeParams()

    def hamiltonian(q, pgrad, mubar):
        return (p.phi * ad.square(q) - p.gamma * mubar * q
                - ad.square(pgrad) / (4.0 * p.kappa))

    def alpha_from_grad(q, pgrad):
        return -pgrad / (2.0 * p.kappa)

    def terminal(q):
        return p.big_a * ad.square(q)

    return PdeProblem(x_lo, x_hi, T, nu=p.sigma ** 2 / 2.0,
                      hamiltonian=hamiltonian, alpha_from_grad=alpha_from_grad,
                      terminal=terminal, m0=m0 or GaussianInit(4.0, 0.3),
                      nonlocal_coupling=True, name="crowded_trade_pde")


@dataclass
class LossWeights:
    """Multipliers for the four loss pieces. Zero is allowed (the trivial-
    solution regression test needs the boundary weights off); negative is
    not."""

    kfp: float = 1.0
    kfp0: float = 10.0
    hjb: float = 1.0
    hjb_t: float = 10.0

    def __post_init__(self):
        for name in ("kfp", "kfp0", "hjb", "hjb_t"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} weight must be nonnegative")


@dataclass
class SampleBatch:
    t: np.ndarray      # interior times
    q: np.ndarray      # interior positions
    q0: np.ndarray     # initial-slice positions
    qT: np.ndarray     # terminal-slice positions


def sample_batch(problem, sizes, seed):
    """Uniform i.i.d. collocation points; sizes = (interior, initial,
    terminal); deterministic in seed."""
    ns, n0, nt = sizes
    if min(ns, n0, nt) < 1:
        raise ValueError(f"batch sizes must be >= 1, got {sizes}")
    rng = pt.philox_rng(seed)
    return SampleBatch(
        t=rng.uniform(0.0, problem.T, ns),
        q=rng.uniform(problem.x_lo, problem.x_hi, ns),
        q0=rng.uniform(problem.x_lo, problem.x_hi, n0),
        qT=rng.uniform(problem.x_lo, problem.x_hi, nt))


def nonlocal_mean(problem, u_grad, m_fn, t, qpoints):
    """Self-normalized quadrature of the mean control at one time.

    u_grad(t, q) -> du/dq values; m_fn(t, q) -> unnormalized density.
    Raises if the mass estimate vanishes (the estimate would be 0/0).
    """
    q = np.asarray(qpoints, dtype=np.float64)
    w = np.asarray(m_fn(t, q), dtype=np.float64)
    den = w.sum()
    if den == 0.0:
        raise ZeroNormalizerError(
            f"density mass estimate is zero at t={t} over {q.size} points")
    a = problem.alpha_from_grad(q, np.asarray(u_grad(t, q), dtype=np.float64))
    return float((w * a).sum() / den)


def net_q_gradient(problem, arch, theta, t, qpoints):
    """(values, d/dq values) of a (t,q)-net along one time slice; the
    problem's input normalization is part of the graph, so the reported
    derivative is with respect to raw q."""
    g = ad.Graph()
    net = NetOnGraph(g, arch, theta)
    q = g.var(np.asarray(qpoints, dtype=np.float64))
    tc = g.const(np.full(q.value.shape[0], float(t)))
    tn, qn = problem.net_inputs(tc, q)
    out = ad.col(net.forward(ad.stack_cols([tn, qn])), 0)
    (dq,) = ad.grad_nodes(ad.total(out), [q])
    return np.array(out.value, copy=True), np.array(dq.value, copy=True)


class MubarEstimator:
    """Static pair graph producing mubar(t_i) for a column of interior
    times from shared quadrature points, as plain numbers.

    Kept outside the training graph on purpose: the coupling is re-read
    from the current nets once per iteration, so the residual gradients
    treat mubar as a constant (see the module docstring for the failure
    mode this closes).
    """

    def __init__(self, problem, u_arch, m_arch, ns, nq):
        self.problem = problem
        self.ns = ns
        self.nq = nq
        g = ad.Graph()
        self.g = g
        self.u_net = NetOnGraph(g, u_arch, np.zeros(u_arch.param_count()))
        self.m_net = NetOnGraph(g, m_arch, np.zeros(m_arch.param_count()))
        # pair grid (interior time i) x (quadrature point j), i-major
        self.t_pairs = g.var(np.zeros(ns * nq))
        self.q_pairs = g.var(np.zeros(ns * nq))
        pf = ad.stack_cols(list(problem.net_inputs(self.t_pairs,
                                                   self.q_pairs)))
        u_p = ad.col(self.u_net.forward(pf), 0)
        m_p = ad.col(self.m_net.forward(pf), 0)
        (du_p,) = ad.grad_nodes(ad.total(u_p), [self.q_pairs])
        a_p = problem.alpha_from_grad(self.q_pairs, du_p)
        ones = g.const(np.ones((nq, 1)))
        self.num = ad.col(ad.matmul(ad.reshape(m_p * a_p, (ns, nq)), ones), 0)
        self.den = ad.col(ad.matmul(ad.reshape(m_p, (ns, nq)), ones), 0)

    def estimate(self, u_theta, m_theta, t_int, quad):
        self.u_net.set_theta(u_theta)
        self.m_net.set_theta(m_theta)
        self.t_pairs.set_value(np.repeat(t_int, self.nq))
        self.q_pairs.set_value(np.tile(quad, self.ns))
        self.g.recompute()
        den = np.asarray(self.den.value)
        if np.any(den == 0.0):
            raise ZeroNormalizerError(
                "density mass estimate is zero on an interior time slice")
        return np.asarray(self.num.value) / den


class ResidualGraph:
    """Static collocation graph; leaves are swapped between iterations.

    Exposes the four component nodes (already weighted sums are formed in
    .total) plus every leaf needed to install a fresh batch. The mubar
    column is one of those leaves: set_batch refreshes it from the nets'
    current parameters through the side estimator.
    """

    def __init__(self, g, problem, u_net, m_net, weights, sizes, n_quad,
                 batch, quad):
        ns, n0, nT = sizes
        self.g = g
        self.problem = problem
        self.u_net = u_net
        self.m_net = m_net
        self.sizes = sizes
        self.n_quad = n_quad

        self.t_int = g.var(batch.t)
        self.q_int = g.var(batch.q)
        self.q0 = g.var(batch.q0)
        self.qT = g.var(batch.qT)
        self.target0 = g.var(problem.m0.density(batch.q0))
        self.targetT = g.var(_values(problem.terminal, batch.qT))

        feats = ad.stack_cols(list(problem.net_inputs(self.t_int, self.q_int)))
        u = ad.col(u_net.forward(feats), 0)
        m = ad.col(m_net.forward(feats), 0)
        du_dt, du_dq = ad.grad_nodes(ad.total(u), [self.t_int, self.q_int])
        dm_dt, dm_dq = ad.grad_nodes(ad.total(m), [self.t_int, self.q_int])

        if problem.nonlocal_coupling:
            self.estimator = MubarEstimator(problem, u_net.arch, m_net.arch,
                                            ns, n_quad)
            self.mubar = g.var(self.estimator.estimate(
                _theta_of(u_net), _theta_of(m_net), batch.t, quad))
            hstar = problem.hamiltonian(self.q_int, du_dq, self.mubar)
        else:
            self.estimator = self.mubar = None
            hstar = problem.hamiltonian(self.q_int, du_dq, None)

        alpha = problem.alpha_from_grad(self.q_int, du_dq)
        d2u, d2m, div_ma = ad.tangent_nodes(
            {self.q_int: 1.0}, [du_dq, dm_dq, m * alpha])

        r_kfp = dm_dt - problem.nu * d2m + div_ma
        r_hjb = du_dt + problem.nu * d2u + hstar
        self.kfp = ad.sqrt(ad.mean(ad.square(r_kfp)))
        self.hjb = ad.sqrt(ad.mean(ad.square(r_hjb)))

        t0c = g.const(np.zeros(n0))
        m_at_0 = ad.col(m_net.forward(
            ad.stack_cols(list(problem.net_inputs(t0c, self.q0)))), 0)
        self.kfp0 = ad.sqrt(ad.mean(ad.square(m_at_0 - self.target0)))
        tTc = g.const(np.full(nT, problem.T))
        u_at_T = ad.col(u_net.forward(
            ad.stack_cols(list(problem.net_inputs(tTc, self.qT)))), 0)
        self.hjb_t = ad.sqrt(ad.mean(ad.square(u_at_T - self.targetT)))

        self.total = (weights.kfp * self.kfp + weights.kfp0 * self.kfp0
                      + weights.hjb * self.hjb + weights.hjb_t * self.hjb_t)

    def set_batch(self, batch, quad):
        self.t_int.set_value(batch.t)
        self.q_int.set_value(batch.q)
        self.q0.set_value(batch.q0)
        self.qT.set_value(batch.qT)
        self.target0.set_value(self.problem.m0.density(batch.q0))
        self.targetT.set_value(_values(self.problem.terminal, batch.qT))
        if self.mubar is not None:
            self.mubar.set_value(self.estimator.estimate(
                _theta_of(self.u_net), _theta_of(self.m_net), batch.t, quad))

    def components(self):
        return {"kfp": self.kfp.item(), "kfp0": self.kfp0.item(),
                "hjb": self.hjb.item(), "hjb_t": self.hjb_t.item()}


def _theta_of(net):
    """Current flat parameter vector read back out of the graph leaves."""
    return net.flatten_grads([leaf.value for leaf in net.leaves])


def _values(fn, x):
    return np.asarray(fn(np.asarray(x, dtype=np.float64)), dtype=np.float64)


def residual_losses(problem, u_arch, u_theta, m_arch, m_theta, batch,
                    weights, quad=None):
    """One-shot loss graph for a given batch; returns the ResidualGraph
    whose .total is the weighted scalar node."""
    if problem.nonlocal_coupling and quad is None:
        raise ValueError("nonlocal problem needs quadrature points")
    g = ad.Graph()
    u_net = NetOnGraph(g, u_arch, u_theta)
    m_net = NetOnGraph(g, m_arch, m_theta)
    sizes = (batch.t.size, batch.q0.size, batch.qT.size)
    nq = 0 if quad is None else np.asarray(quad).size
    return ResidualGraph(g, problem, u_net, m_net, weights, sizes, nq,
                         batch, quad)


@dataclass
class DgmConfig(TrainConfig):
    n_particles: int = 256     # interior collocation points per iteration
    n_boundary: int = 128
    n_quad: int = 256
    n_iters: int = 10000
    lr: object = 3e-3


@dataclass
class GridSnapshot:
    iteration: int
    t: np.ndarray
    q: np.ndarray
    m: np.ndarray              # (len(t), len(q))
    u: np.ndarray
    alpha: np.ndarray
    mubar: np.ndarray          # per snapshot time, or None


@dataclass
class DgmReport:
    loss: np.ndarray
    parts: dict                # name -> (K,) arrays
    grad_norm: np.ndarray
    lr_used: np.ndarray
    u_theta: np.ndarray
    m_theta: np.ndarray
    u_arch: object
    m_arch: object
    snapshots: list = field(default_factory=list)
    diverged: bool = False
    stopped_at: int = None
    diverged_loss: float = None
    wall_time: float = 0.0

    def save(self, outdir, extra_summary=None):
        os.makedirs(outdir, exist_ok=True)
        names = ("kfp", "kfp0", "hjb", "hjb_t")
        with open(os.path.join(outdir, "loss_history.csv"), "w") as fh:
            fh.write("iteration,loss," + ",".join(names) + ",grad_norm,lr\n")
            for k in range(self.loss.size):
                row = [str(k), f"{self.loss[k]:.17g}"]
                row += [f"{self.parts[n][k]:.17g}" for n in names]
                row += [f"{self.grad_norm[k]:.17g}", f"{self.lr_used[k]:.17g}"]
                fh.write(",".join(row) + "\n")
        if self.snapshots:
            snap = self.snapshots[-1]
            for fname, arr in (("density_grid.csv", snap.m),
                               ("value_grid.csv", snap.u),
                               ("control_grid.csv", snap.alpha)):
                col = fname.split("_")[0]
                with open(os.path.join(outdir, fname), "w") as fh:
                    fh.write(f"t,x,{col}\n")
                    for i, tv in enumerate(snap.t):
                        for j, qv in enumerate(snap.q):
                            fh.write(f"{tv:.17g},{qv:.17g},{arr[i, j]:.17g}\n")
        save_checkpoint(os.path.join(outdir, "u_net.npz"), self.u_arch, self.u_theta)
        save_checkpoint(os.path.join(outdir, "m_net.npz"), self.m_arch, self.m_theta)
        summary = {
            "iterations_run": int(self.loss.size),
            "final_loss": float(self.loss[-1]) if self.loss.size else None,
            "diverged": bool(self.diverged),
            "stopped_at": self.stopped_at,
            "wall_time_s": float(self.wall_time),
        }
        summary.update(extra_summary or {})
        with open(os.path.join(outdir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True, default=float)
            fh.write("\n")


def _draw_batch(problem, cfg, key):
    rng = pt.philox_rng(key)
    ns, nb = cfg.n_particles, cfg.n_boundary
    batch = SampleBatch(
        t=rng.uniform(0.0, problem.T, ns),
        q=rng.uniform(problem.x_lo, problem.x_hi, ns),
        q0=rng.uniform(problem.x_lo, problem.x_hi, nb),
        qT=rng.uniform(problem.x_lo, problem.x_hi, nb))
    quad = (rng.uniform(problem.x_lo, problem.x_hi, cfg.n_quad)
            if problem.nonlocal_coupling else None)
    return batch, quad


def evaluate_nets(problem, u_arch, u_theta, m_arch, m_theta, seed,
                  iteration=0, nt=11, nx=101, n_quad=4096):
    """Snapshot of m, u, the decoded control and (if coupled) mubar on a
    fixed grid."""
    t_grid = np.linspace(0.0, problem.T, nt)
    q_grid = np.linspace(problem.x_lo, problem.x_hi, nx)
    m = np.empty((nt, nx))
    u = np.empty((nt, nx))
    alpha = np.empty((nt, nx))
    mubar = np.empty(nt) if problem.nonlocal_coupling else None
    quad = (pt.philox_rng(seed).uniform(problem.x_lo, problem.x_hi, n_quad)
            if problem.nonlocal_coupling else None)
    for i, tv in enumerate(t_grid):
        uv, du = net_q_gradient(problem, u_arch, u_theta, tv, q_grid)
        u[i] = uv
        alpha[i] = problem.alpha_from_grad(q_grid, du)
        m[i] = _net_slice(problem, m_arch, m_theta, tv, q_grid)
        if mubar is not None:
            mubar[i] = nonlocal_mean(
                problem,
                lambda t, q: net_q_gradient(problem, u_arch, u_theta, t, q)[1],
                lambda t, q: _net_slice(problem, m_arch, m_theta, t, q),
                tv, quad)
    return GridSnapshot(iteration=iteration, t=t_grid, q=q_grid, m=m, u=u,
                        alpha=alpha, mubar=mubar)


def _net_slice(problem, arch, theta, t, q):
    tn, qn = problem.net_inputs(np.full(q.size, float(t)), np.asarray(q))
    feats = np.column_stack([tn, qn])
    return forward_np(arch, theta, feats)[:, 0]


def train(problem, u_arch, m_arch, weights, config):
    """SGD on both nets against the weighted residual loss."""
    cfg = config
    u_theta = init_params(u_arch, cfg.seed)
    m_theta = init_params(m_arch, cfg.seed + 1)
    g = ad.Graph()
    u_net = NetOnGraph(g, u_arch, u_theta)
    m_net = NetOnGraph(g, m_arch, m_theta)
    batch, quad = _draw_batch(problem, cfg, (cfg.seed, 0))
    rg = ResidualGraph(g, problem, u_net, m_net, weights,
                       (cfg.n_particles, cfg.n_boundary, cfg.n_boundary),
                       cfg.n_quad if problem.nonlocal_coupling else 0,
                       batch, quad)
    leaves = u_net.leaves + m_net.leaves
    plan = ad.compile_backward(rg.total, leaves)
    n_u = u_theta.size
    theta = np.concatenate([u_theta, m_theta])
    opt = Adam(lr=cfg.lr, clip_norm=cfg.clip_norm)

    loss = np.empty(cfg.n_iters)
    parts = {n: np.empty(cfg.n_iters) for n in ("kfp", "kfp0", "hjb", "hjb_t")}
    gnorm = np.empty(cfg.n_iters)
    lr_used = np.empty(cfg.n_iters)
    report = DgmReport(loss=loss, parts=parts, grad_norm=gnorm,
                       lr_used=lr_used, u_theta=u_theta, m_theta=m_theta,
                       u_arch=u_arch, m_arch=m_arch)
    t_start = time.perf_counter()
    for k in range(cfg.n_iters):
        if k:
            batch, quad = _draw_batch(problem, cfg, (cfg.seed, k))
            rg.set_batch(batch, quad)
            g.recompute()
        lk = rg.total.item()
        if not np.isfinite(lk) or lk > cfg.divergence_cap:
            report.loss = loss[:k]
            report.parts = {n: v[:k] for n, v in parts.items()}
            report.grad_norm = gnorm[:k]
            report.lr_used = lr_used[:k]
            report.diverged = True
            report.stopped_at = k
            report.diverged_loss = float(lk)
            break
        comp = rg.components()
        grads = plan.run()
        flat = np.concatenate([
            u_net.flatten_grads(grads[:len(u_net.leaves)]),
            m_net.flatten_grads(grads[len(u_net.leaves):])])
        theta = opt.step(theta, flat)
        u_theta = theta[:n_u]
        m_theta = theta[n_u:]
        u_net.set_theta(u_theta)
        m_net.set_theta(m_theta)
        loss[k] = lk
        for n in parts:
            parts[n][k] = comp[n]
        gnorm[k] = opt.last_grad_norm
        lr_used[k] = opt.last_lr
        if cfg.log_every and k % cfg.log_every == 0:
            print(f"iter {k:6d}  loss {lk:.6g}  kfp {comp['kfp']:.3g}  "
                  f"hjb {comp['hjb']:.3g}", flush=True)
        if (k + 1) % cfg.eval_every == 0:
            report.snapshots.append(evaluate_nets(
                problem, u_arch, u_theta, m_arch, m_theta,
                (cfg.seed, _EVAL_STREAM + k + 1), iteration=k + 1))
    report.u_theta = u_theta
    report.m_theta = m_theta
    report.wall_time = time.perf_counter() - t_start
    return report
