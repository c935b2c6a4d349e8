"""Deep shooting for forward-backward SDE systems with mean-field coupling.

The pair

    dX_t = B(t, X, mu, Y) dt + sigma (rho dW0 + sqrt(1-rho^2) dW)
    dY_t = -F(t, X, mu, Y, Z) dt + Z dW (+ Z0 dW0)
    Y_T  = G(X_T, mu_T)

is turned into two forward equations by guessing the missing pieces of the
backward one: a net y0(x[, mbar]) for the initial condition and a net
z(t, x[, mbar]) for the volatility (two outputs under common noise, one per
Brownian driver). Both equations are then Euler-stepped forward with the
law replaced by the empirical measure of the particle cloud, and the guess
is scored by how badly the terminal condition is violated,

    J(y0, z) = E |Y_T - G(X_T, mu_T)|^2.

Minimizing J over both nets jointly is ordinary SGD; at the optimum the
simulated Y is the backward solution and, for systems that encode an
optimality condition, the feedback control can be decoded from (X, Y).

The mean fed to the nets and coefficients is the current-step ensemble
mean. Comparisons against reference solutions must replay the identical
noise sample; fresh-noise comparisons confound method error with Monte
Carlo error.
"""

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import particle as pt
from .models import MeasureSummary, SystemicRiskParams
from .net import Architecture, NetOnGraph, forward_np, init_params, save_checkpoint
from .optim import Adam
from .mfc_direct import TrainConfig, _EVAL_STREAM


class FbsdeSystem:
    """Coefficient record: callables B, F, G plus diffusion constants.

    B(t, x, summary, y); F(t, x, summary, y, z); G(x, summary). All must
    accept numpy arrays or graph nodes. sigma may be zero (degenerate
    forward equation, used by decoupled-BSDE checks); rho only matters when
    common_noise is set. `control` optionally decodes the feedback
    alpha(x, summary, y) for systems born from an optimality condition.
    """

    def __init__(self, B, F, G, T, sigma, m0, rho=0.0, common_noise=False,
                 control=None, name="fbsde"):
        if sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {sigma}")
        if not 0.0 <= rho <= 1.0:
            raise ValueError(f"rho must lie in [0,1], got {rho}")
        self.B = B
        self.F = F
        self.G = G
        self.T = float(T)
        self.sigma = float(sigma)
        self.m0 = m0
        self.rho = float(rho)
        self.common_noise = bool(common_noise)
        self.control = control
        self.name = name


def systemic_risk_fbsde(params=None, T=0.5, m0=None):
    """Optimality system of the inter-bank borrowing game.

    With running cost a^2/2 - q a (mbar-x) + eps/2 (mbar-x)^2, terminal
    cost c/2 (mbar-x)^2 and drift a(mbar-x) + alpha, the minimizer of the
    Hamiltonian is alpha = q(mbar-x) - y, which gives

        B = (a+q)(mbar-x) - y
        F = (q^2-eps)(mbar-x) - (a+q)y     (x-gradient of the Hamiltonian,
                                            envelope form, sign folded into
                                            the dY = -F dt convention)
        G = -c(mbar_T - x)

    The exact solution is y = eta(t)(x - mbar) with the same eta Riccati
    the control oracle integrates, z = eta sigma sqrt(1-rho^2), z0 = 0.
    """
    from .models import GaussianInit
    p = params or SystemicRiskParams()

    def B(t, x, summary, y):
        return (p.a + p.q) * (summary.require("state_mean") - x) - y

    def F(t, x, summary, y, z):
        gap = summary.require("state_mean") - x
        return (p.q ** 2 - p.eps) * gap - (p.a + p.q) * y

    def G(x, summary):
        return -p.c * (summary.require("state_mean") - x)

    def control(x, summary, y):
        return p.q * (summary.require("state_mean") - x) - y

    return FbsdeSystem(B, F, G, T=T, sigma=p.sigma,
                       m0=m0 or GaussianInit(0.0, 0.25),
                       rho=p.rho, common_noise=True, control=control,
                       name="systemic_risk_fbsde")


class ShootingControls:
    """The two trainable maps as (architecture, flat theta) pairs.

    y0-net input is x, or (x, mbar) under common noise: it is an
    initial-condition map, so time is not an argument. z-net input is
    (t, x) or (t, x, mbar); under common noise it has two outputs, the
    loadings on dW and dW0.
    """

    def __init__(self, system, y0_arch, z_arch, y0_theta=None, z_theta=None,
                 seed=0):
        want_y0_in = 2 if system.common_noise else 1
        want_z_in = 3 if system.common_noise else 2
        want_z_out = 2 if system.common_noise else 1
        if y0_arch.din != want_y0_in or y0_arch.dout != 1:
            raise ValueError(
                f"y0 net must map {want_y0_in} -> 1, got {y0_arch.din} -> {y0_arch.dout}")
        if z_arch.din != want_z_in or z_arch.dout != want_z_out:
            raise ValueError(
                f"z net must map {want_z_in} -> {want_z_out}, got {z_arch.din} -> {z_arch.dout}")
        self.y0_arch = y0_arch
        self.z_arch = z_arch
        self.y0_theta = (init_params(y0_arch, seed) if y0_theta is None
                         else np.asarray(y0_theta, dtype=np.float64))
        self.z_theta = (init_params(z_arch, seed + 1) if z_theta is None
                        else np.asarray(z_theta, dtype=np.float64))
        self.common_noise = system.common_noise

    def y0_values(self, x, mbar=None):
        n = x.shape[0]
        feats = np.empty((n, 2 if mbar is not None else 1))
        feats[:, 0] = x
        if mbar is not None:
            feats[:, 1] = mbar
        return forward_np(self.y0_arch, self.y0_theta, feats)[:, 0]

    def z_values(self, t, x, mbar=None):
        n = x.shape[0]
        feats = np.empty((n, 3 if mbar is not None else 2))
        feats[:, 0] = t
        feats[:, 1] = x
        if mbar is not None:
            feats[:, 2] = mbar
        out = forward_np(self.z_arch, self.z_theta, feats)
        if self.common_noise:
            return out[:, 0], out[:, 1]
        return out[:, 0], None


class CallableControls:
    """Fixed (non-trainable) shooting maps, e.g. a reference solution.

    y0(x[, mbar]) -> array; z(t, x[, mbar]) -> array; z0 likewise or None.
    """

    def __init__(self, y0, z, z0=None):
        self._y0 = y0
        self._z = z
        self._z0 = z0

    def y0_values(self, x, mbar=None):
        return self._y0(x) if mbar is None else self._y0(x, mbar)

    def z_values(self, t, x, mbar=None):
        z = self._z(t, x) if mbar is None else self._z(t, x, mbar)
        z = np.broadcast_to(np.asarray(z, dtype=np.float64), x.shape)
        if self._z0 is None:
            return z, None
        z0 = self._z0(t, x) if mbar is None else self._z0(t, x, mbar)
        return z, np.broadcast_to(np.asarray(z0, dtype=np.float64), x.shape)


class FbsdePaths:
    """Simulated pair: x, y are (N, N_T+1); z, z0 are (N, N_T); mismatch is
    Y_T - G per particle."""

    def __init__(self, t, x, y, z, z0, mismatch, mbar=None):
        self.t = t
        self.x = x
        self.y = y
        self.z = z
        self.z0 = z0
        self.mismatch = mismatch
        self.mbar = mbar

    @property
    def penalty(self):
        return float(np.mean(self.mismatch ** 2))


def simulate_fbsde(system, controls, noise):
    """Euler-step both equations forward under the given shooting maps.

    Per step: ensemble mean, z from its net, coefficients B and F at the
    current (x, y), then the two state updates. The graph builder mirrors
    this order operation for operation.
    """
    n, steps = noise.n_particles, noise.n_steps
    dt = noise.dt
    inc = pt.effective_increments(system, noise)
    t = dt * np.arange(steps + 1)
    x = np.empty((n, steps + 1))
    y = np.empty((n, steps + 1))
    z = np.empty((n, steps))
    z0 = np.empty((n, steps)) if system.common_noise else None
    mbar = np.empty(steps + 1) if system.common_noise else None
    x[:, 0] = noise.x0
    m0 = x[:, 0].mean()
    if system.common_noise:
        y[:, 0] = controls.y0_values(x[:, 0], m0)
    else:
        y[:, 0] = controls.y0_values(x[:, 0])
    for k in range(steps):
        xk, yk = x[:, k], y[:, k]
        if not (np.all(np.isfinite(xk)) and np.all(np.isfinite(yk))):
            raise pt.ParticleBlowUpError(k, t[k])
        m = xk.mean()
        s = MeasureSummary(state_mean=m, state_sample=xk)
        if system.common_noise:
            mbar[k] = m
            zk, z0k = controls.z_values(t[k], xk, m)
        else:
            zk, z0k = controls.z_values(t[k], xk)
        z[:, k] = zk
        bk = system.B(t[k], xk, s, yk)
        fk = system.F(t[k], xk, s, yk, zk)
        x[:, k + 1] = xk + bk * dt + inc[:, k]
        ynext = yk - fk * dt + zk * noise.dW[:, k]
        if system.common_noise:
            z0[:, k] = z0k
            ynext = ynext + z0k * noise.dW0[k]
        y[:, k + 1] = ynext
    xT, yT = x[:, steps], y[:, steps]
    if not (np.all(np.isfinite(xT)) and np.all(np.isfinite(yT))):
        raise pt.ParticleBlowUpError(steps, t[steps])
    mT = xT.mean()
    if system.common_noise:
        mbar[steps] = mT
    sT = MeasureSummary(state_mean=mT, state_sample=xT)
    mismatch = yT - system.G(xT, sT)
    return FbsdePaths(t, x, y, z, z0, mismatch, mbar)


class FbsdeGraph:
    """Static simulation graph: swap the noise leaves, recompute, backprop."""

    def __init__(self, g, system, y0_net, z_net, x_nodes, y_nodes,
                 mismatch, loss, x0_node, inc_nodes, dw_nodes, dw0_nodes):
        self.g = g
        self.system = system
        self.y0_net = y0_net
        self.z_net = z_net
        self.x_nodes = x_nodes
        self.y_nodes = y_nodes
        self.mismatch = mismatch
        self.loss = loss
        self.x0_node = x0_node
        self.inc_nodes = inc_nodes
        self.dw_nodes = dw_nodes
        self.dw0_nodes = dw0_nodes

    def set_noise(self, noise):
        inc = pt.effective_increments(self.system, noise)
        self.x0_node.set_value(noise.x0)
        for k, node in enumerate(self.inc_nodes):
            node.set_value(inc[:, k])
        for k, node in enumerate(self.dw_nodes):
            node.set_value(noise.dW[:, k])
        if self.dw0_nodes is not None:
            for k, node in enumerate(self.dw0_nodes):
                node.set_value(np.full(noise.n_particles, noise.dW0[k]))


def build_fbsde_graph(g, system, y0_net, z_net, noise):
    """Graph twin of simulate_fbsde with the penalty as its root."""
    n, steps = noise.n_particles, noise.n_steps
    dt = noise.dt
    inc = pt.effective_increments(system, noise)
    dt_node = g.const(dt)
    x0_node = g.var(noise.x0)
    inc_nodes = [g.var(inc[:, k]) for k in range(steps)]
    dw_nodes = [g.var(noise.dW[:, k]) for k in range(steps)]
    dw0_nodes = ([g.var(np.full(n, noise.dW0[k])) for k in range(steps)]
                 if system.common_noise else None)

    xk = x0_node
    m0 = ad.mean(xk)
    if system.common_noise:
        y0_feats = ad.stack_cols([xk, ad._bcast(m0, (n,))], rows=n)
    else:
        y0_feats = ad.stack_cols([xk], rows=n)
    yk = ad.col(y0_net.forward(y0_feats), 0)
    x_nodes, y_nodes = [xk], [yk]
    for k in range(steps):
        tk = g.const(np.full(n, dt * k))
        mean_k = ad.mean(xk)
        s = MeasureSummary(state_mean=mean_k, state_sample=xk)
        if system.common_noise:
            z_feats = ad.stack_cols([tk, xk, ad._bcast(mean_k, (n,))], rows=n)
        else:
            z_feats = ad.stack_cols([tk, xk], rows=n)
        z_out = z_net.forward(z_feats)
        zk = ad.col(z_out, 0)
        bk = system.B(dt * k, xk, s, yk)
        fk = system.F(dt * k, xk, s, yk, zk)
        xk = xk + bk * dt_node + inc_nodes[k]
        ynext = yk - fk * dt_node + zk * dw_nodes[k]
        if system.common_noise:
            ynext = ynext + ad.col(z_out, 1) * dw0_nodes[k]
        yk = ynext
        x_nodes.append(xk)
        y_nodes.append(yk)
    mean_T = ad.mean(xk)
    sT = MeasureSummary(state_mean=mean_T, state_sample=xk)
    mismatch = yk - system.G(xk, sT)
    loss = ad.mean(ad.square(mismatch))
    return FbsdeGraph(g, system, y0_net, z_net, x_nodes, y_nodes, mismatch,
                      loss, x0_node, inc_nodes, dw_nodes, dw0_nodes)


def penalty_loss(system, controls, noise):
    """E|Y_T - G|^2 for net controls, as a differentiable graph node."""
    g = ad.Graph()
    y0_net = NetOnGraph(g, controls.y0_arch, controls.y0_theta)
    z_net = NetOnGraph(g, controls.z_arch, controls.z_theta)
    return build_fbsde_graph(g, system, y0_net, z_net, noise).loss


@dataclass
class ShootConfig(TrainConfig):
    n_particles: int = 1000


@dataclass
class PathSnapshot:
    """Tracked sample paths at a training checkpoint."""

    iteration: int
    t: np.ndarray
    tracked: tuple
    x: np.ndarray              # (len(tracked), N_T+1)
    y: np.ndarray
    alpha: np.ndarray          # decoded control, or None
    mbar: np.ndarray
    penalty: float


@dataclass
class FbsdeReport:
    loss: np.ndarray
    grad_norm: np.ndarray
    lr_used: np.ndarray
    controls: ShootingControls
    snapshots: list = field(default_factory=list)
    diverged: bool = False
    stopped_at: int = None
    diverged_loss: float = None
    wall_time: float = 0.0

    def save(self, outdir, extra_summary=None):
        os.makedirs(outdir, exist_ok=True)
        with open(os.path.join(outdir, "loss_history.csv"), "w") as fh:
            fh.write("iteration,loss,grad_norm,lr\n")
            for k in range(self.loss.size):
                fh.write(f"{k},{self.loss[k]:.17g},{self.grad_norm[k]:.17g},"
                         f"{self.lr_used[k]:.17g}\n")
        if self.snapshots:
            snap = self.snapshots[-1]
            for fname, arr in (("trajX.csv", snap.x), ("trajY.csv", snap.y)):
                with open(os.path.join(outdir, fname), "w") as fh:
                    fh.write("t,particle,value\n")
                    for r, pidx in enumerate(snap.tracked):
                        for i, tv in enumerate(snap.t):
                            fh.write(f"{tv:.17g},{pidx},{arr[r, i]:.17g}\n")
        save_checkpoint(os.path.join(outdir, "y0_net.npz"),
                        self.controls.y0_arch, self.controls.y0_theta)
        save_checkpoint(os.path.join(outdir, "z_net.npz"),
                        self.controls.z_arch, self.controls.z_theta)
        summary = {
            "iterations_run": int(self.loss.size),
            "final_loss": float(self.loss[-1]) if self.loss.size else None,
            "final_penalty": float(self.snapshots[-1].penalty) if self.snapshots else None,
            "diverged": bool(self.diverged),
            "stopped_at": self.stopped_at,
            "wall_time_s": float(self.wall_time),
        }
        summary.update(extra_summary or {})
        with open(os.path.join(outdir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True, default=float)
            fh.write("\n")


def evaluate_controls(system, controls, n_particles, n_steps, seed,
                      iteration=0, tracked=(0, 1, 2)):
    """One evaluation simulation; tracked paths plus realized penalty."""
    noise = pt.sample_noise(system, n_particles, n_steps, seed)
    paths = simulate_fbsde(system, controls, noise)
    idx = list(tracked)
    alpha = None
    if system.control is not None:
        alpha = np.empty((len(idx), paths.t.size))
        for i in range(paths.t.size):
            s = MeasureSummary(state_mean=paths.x[:, i].mean(),
                               state_sample=paths.x[:, i])
            alpha[:, i] = system.control(paths.x[idx, i], s, paths.y[idx, i])
    return PathSnapshot(iteration=iteration, t=paths.t, tracked=tuple(idx),
                        x=paths.x[idx].copy(), y=paths.y[idx].copy(),
                        alpha=alpha, mbar=paths.mbar,
                        penalty=paths.penalty)


def train(system, controls, config):
    """Joint SGD over the y0 and z nets against the terminal penalty."""
    cfg = config
    g = ad.Graph()
    y0_net = NetOnGraph(g, controls.y0_arch, controls.y0_theta)
    z_net = NetOnGraph(g, controls.z_arch, controls.z_theta)
    fg = build_fbsde_graph(
        g, system, y0_net, z_net,
        pt.sample_noise(system, cfg.n_particles, cfg.n_steps, (cfg.seed, 0)))
    leaves = y0_net.leaves + z_net.leaves
    plan = ad.compile_backward(fg.loss, leaves)
    n_y0 = controls.y0_theta.size
    theta = np.concatenate([controls.y0_theta, controls.z_theta])
    opt = Adam(lr=cfg.lr, clip_norm=cfg.clip_norm)

    loss = np.empty(cfg.n_iters)
    gnorm = np.empty(cfg.n_iters)
    lr_used = np.empty(cfg.n_iters)
    report = FbsdeReport(loss=loss, grad_norm=gnorm, lr_used=lr_used,
                         controls=controls)
    t_start = time.perf_counter()
    for k in range(cfg.n_iters):
        if k:
            fg.set_noise(pt.sample_noise(system, cfg.n_particles, cfg.n_steps,
                                         (cfg.seed, k)))
            g.recompute()
        lk = fg.loss.item()
        if not np.isfinite(lk) or lk > cfg.divergence_cap:
            report.loss = loss[:k]
            report.grad_norm = gnorm[:k]
            report.lr_used = lr_used[:k]
            report.diverged = True
            report.stopped_at = k
            report.diverged_loss = float(lk)
            break
        grads = plan.run()
        flat = np.concatenate([
            y0_net.flatten_grads(grads[:len(y0_net.leaves)]),
            z_net.flatten_grads(grads[len(y0_net.leaves):])])
        theta = opt.step(theta, flat)
        controls.y0_theta = theta[:n_y0]
        controls.z_theta = theta[n_y0:]
        y0_net.set_theta(controls.y0_theta)
        z_net.set_theta(controls.z_theta)
        loss[k] = lk
        gnorm[k] = opt.last_grad_norm
        lr_used[k] = opt.last_lr
        if cfg.log_every and k % cfg.log_every == 0:
            print(f"iter {k:6d}  loss {lk:.6g}  |grad| {gnorm[k]:.3g}",
                  flush=True)
        if (k + 1) % cfg.eval_every == 0:
            report.snapshots.append(evaluate_controls(
                system, controls, cfg.n_particles, cfg.n_steps,
                (cfg.seed, _EVAL_STREAM + k + 1), iteration=k + 1))
    report.wall_time = time.perf_counter() - t_start
    return report
