"""Direct policy search for mean field control through the particle rollout.

The control is a feedback net alpha_theta(t, x) (plus the running ensemble
mean as a third input under common noise). For one noise draw the empirical
social cost

    J(theta) = (1/N) sum_i [ sum_k f(x^i_k, mu_k, a^i_k) dt + g(x^i_T, mu_T) ]

is a deterministic differentiable function of theta because the population
summaries mu_k are themselves nodes of the rollout graph. The gradient
therefore sees how theta moves the population statistics, not just each
private state, which is exactly what makes the minimizer the cooperative
optimum: in the price impact model the -gamma*x*mean(alpha) rebate feeds
back through mean(alpha), so nobody is holding the crowd fixed.

Training is plain Monte-Carlo SGD. A fresh noise sample every iteration
(no dataset), one reverse sweep over a static graph whose only changing
leaves are theta and the noise, Adam on the flat parameter vector. Noise
streams are keyed (seed, iteration), so a run is reproducible bit for bit;
evaluation rollouts live in a disjoint key range.
"""

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import particle as pt
from .net import NetOnGraph, init_params, save_checkpoint
from .optim import Adam

# evaluation noise keys start here; far above any plausible iteration count
_EVAL_STREAM = 2 ** 31


@dataclass
class TrainConfig:
    n_particles: int = 2000
    n_steps: int = 50
    n_iters: int = 20000
    lr: object = 1e-2          # float or callable k -> lr
    clip_norm: float = 10.0
    seed: int = 0
    eval_every: int = 0        # 0 -> one evaluation at the end
    log_every: int = 0         # 0 -> silent
    divergence_cap: float = 1e8

    def __post_init__(self):
        if self.n_iters < 1:
            raise ValueError(f"n_iters must be >= 1, got {self.n_iters}")
        if self.eval_every == 0:
            self.eval_every = self.n_iters
        if self.eval_every < 1 or self.n_iters % self.eval_every:
            raise ValueError(
                f"eval_every must divide n_iters, got {self.eval_every} vs {self.n_iters}")


@dataclass
class Snapshot:
    """Policy evaluated at a training checkpoint: control surface on a fixed
    (t, x) grid spanning the visited bulk, plus the terminal ensemble."""

    iteration: int
    t: np.ndarray
    x_grid: np.ndarray
    alpha: np.ndarray          # (len(t), len(x_grid))
    terminal_states: np.ndarray
    cost: float


@dataclass
class TrainReport:
    loss: np.ndarray
    grad_norm: np.ndarray
    lr_used: np.ndarray
    theta: np.ndarray
    arch: object
    snapshots: list = field(default_factory=list)
    diverged: bool = False
    stopped_at: int = None
    diverged_loss: float = None
    wall_time: float = 0.0
    final_states: np.ndarray = None   # (N, N_T+1) of the last evaluation rollout
    final_t: np.ndarray = None

    def save(self, outdir, extra_summary=None):
        """loss_history.csv, control_grid.csv (last snapshot), ensemble
        slices, policy checkpoint, summary.json."""
        os.makedirs(outdir, exist_ok=True)
        with open(os.path.join(outdir, "loss_history.csv"), "w") as fh:
            fh.write("iteration,loss,grad_norm,lr\n")
            for k in range(self.loss.size):
                fh.write(f"{k},{self.loss[k]:.17g},{self.grad_norm[k]:.17g},"
                         f"{self.lr_used[k]:.17g}\n")
        if self.snapshots:
            snap = self.snapshots[-1]
            with open(os.path.join(outdir, "control_grid.csv"), "w") as fh:
                fh.write("t,x,control\n")
                for i, tv in enumerate(snap.t):
                    for j, xv in enumerate(snap.x_grid):
                        fh.write(f"{tv:.17g},{xv:.17g},{snap.alpha[i, j]:.17g}\n")
        if self.final_states is not None:
            nt = self.final_states.shape[1] - 1
            for idx in sorted({0, nt // 4, nt // 2, (3 * nt) // 4, nt}):
                tv = self.final_t[idx]
                path = os.path.join(outdir, f"ensemble_t{tv:.4g}.csv")
                with open(path, "w") as fh:
                    fh.write("t,particle,x\n")
                    for i, xv in enumerate(self.final_states[:, idx]):
                        fh.write(f"{tv:.17g},{i},{xv:.17g}\n")
        save_checkpoint(os.path.join(outdir, "policy.npz"), self.arch, self.theta)
        summary = {
            "iterations_run": int(self.loss.size),
            "final_loss": float(self.loss[-1]) if self.loss.size else None,
            "final_cost": float(self.snapshots[-1].cost) if self.snapshots else None,
            "diverged": bool(self.diverged),
            "stopped_at": self.stopped_at,
            "wall_time_s": float(self.wall_time),
        }
        summary.update(extra_summary or {})
        with open(os.path.join(outdir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True, default=float)
            fh.write("\n")


def rollout_cost(gr):
    """Scalar social-cost node over an existing graph rollout. Accumulation
    order matches ensemble_cost step for step so the two are bitwise twins."""
    model = gr.model
    dt = model.T / len(gr.alpha_nodes)
    total = None
    for k in range(len(gr.alpha_nodes)):
        fk = model.running_cost(gr.x_nodes[k], gr.summaries[k], gr.alpha_nodes[k])
        contrib = fk * dt
        total = contrib if total is None else total + contrib
    total = total + model.terminal_cost(gr.x_nodes[-1], gr.summaries[-1])
    return ad.mean(total)


def empirical_cost(model, arch, theta, noise):
    """Cost of the policy encoded by (arch, theta) on one noise draw, as a
    graph node (differentiable in theta through its net leaves)."""
    g = ad.Graph()
    net = NetOnGraph(g, arch, theta)
    gr = pt.rollout_graph(g, model, net, noise)
    return rollout_cost(gr)


def ensemble_cost(model, ens):
    """Realized social cost of a numpy rollout (any policy, no graph)."""
    dt = model.T / ens.n_steps
    total = None
    for k in range(ens.n_steps):
        fk = model.running_cost(ens.x[:, k], ens.summaries[k], ens.alpha[:, k])
        contrib = fk * dt
        total = contrib if total is None else total + contrib
    total = total + model.terminal_cost(ens.x[:, -1], ens.summaries[-1])
    return float(np.mean(total))


def evaluate_policy(model, arch, theta, n_particles, n_steps, seed,
                    iteration=0, x_points=101):
    """One evaluation rollout; returns (Snapshot, Ensemble).

    The control surface is tabulated on x points spanning the 1st-99th
    percentile of states visited in this rollout: outside the explored
    region the net is extrapolating and its values mean little.
    """
    noise = pt.sample_noise(model, n_particles, n_steps, seed)
    policy = pt.policy_from_net(arch, theta)
    ens = pt.rollout(model, policy, noise)
    lo, hi = np.percentile(ens.x, (1.0, 99.0))
    xg = np.linspace(lo, hi, x_points)
    alpha = np.empty((ens.t.size, x_points))
    for i, tv in enumerate(ens.t):
        if model.common_noise:
            alpha[i] = policy(tv, xg, ens.mbar[i])
        else:
            alpha[i] = policy(tv, xg)
    snap = Snapshot(iteration=iteration, t=ens.t.copy(), x_grid=xg,
                    alpha=alpha, terminal_states=ens.x[:, -1].copy(),
                    cost=ensemble_cost(model, ens))
    return snap, ens


def train(model, arch, config, theta0=None):
    """Minimize the empirical cost over theta; returns a TrainReport.

    Static graph: the rollout and cost are built once, each iteration swaps
    the noise leaves, recomputes forward, runs the precompiled reverse plan
    and takes one Adam step. Loss at iteration k is measured before the
    k-th update. A non-finite or capped loss aborts with the finite history
    collected so far.
    """
    cfg = config
    theta = (init_params(arch, cfg.seed) if theta0 is None
             else np.array(theta0, dtype=np.float64))
    g = ad.Graph()
    net = NetOnGraph(g, arch, theta)
    gr = pt.rollout_graph(
        g, model, net,
        pt.sample_noise(model, cfg.n_particles, cfg.n_steps, (cfg.seed, 0)))
    loss_node = rollout_cost(gr)
    plan = ad.compile_backward(loss_node, net.leaves)
    opt = Adam(lr=cfg.lr, clip_norm=cfg.clip_norm)

    loss = np.empty(cfg.n_iters)
    gnorm = np.empty(cfg.n_iters)
    lr_used = np.empty(cfg.n_iters)
    report = TrainReport(loss=loss, grad_norm=gnorm, lr_used=lr_used,
                         theta=theta, arch=arch)
    t_start = time.perf_counter()
    for k in range(cfg.n_iters):
        if k:
            gr.set_noise(pt.sample_noise(model, cfg.n_particles, cfg.n_steps,
                                         (cfg.seed, k)))
            g.recompute()
        lk = loss_node.item()
        if not np.isfinite(lk) or lk > cfg.divergence_cap:
            report.loss = loss[:k]
            report.grad_norm = gnorm[:k]
            report.lr_used = lr_used[:k]
            report.diverged = True
            report.stopped_at = k
            report.diverged_loss = float(lk)
            break
        theta = opt.step(theta, net.flatten_grads(plan.run()))
        net.set_theta(theta)
        loss[k] = lk
        gnorm[k] = opt.last_grad_norm
        lr_used[k] = opt.last_lr
        if cfg.log_every and k % cfg.log_every == 0:
            print(f"iter {k:6d}  loss {lk:.6g}  |grad| {gnorm[k]:.3g}",
                  flush=True)
        if (k + 1) % cfg.eval_every == 0:
            snap, ens = evaluate_policy(
                model, arch, theta, cfg.n_particles, cfg.n_steps,
                (cfg.seed, _EVAL_STREAM + k + 1), iteration=k + 1)
            report.snapshots.append(snap)
            report.final_states = ens.x
            report.final_t = ens.t
    report.theta = theta
    report.wall_time = time.perf_counter() - t_start
    return report
