"""Experiment runner.

Subcommands map one-to-one onto the solver modules: run-mfc (particle
rollout descent), run-fbsde (two-net shooting), run-dgm (PDE residual
minimization), run-oracle (ODE / grid ground truth), and compare (grid
error report between two artifact directories). Every run writes a
resolved_config.json next to its CSVs, so the output directory alone is
enough to reproduce the run bit for bit.

Exit codes: 0 success, 1 runtime failure (divergence, disjoint compare
domains), 2 bad configuration.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import config as cfgmod
from .config import ConfigError
from .models import build_model
from .net import Architecture


def _hidden(net_table):
    width = int(net_table.get("width", 20))
    depth = int(net_table.get("depth", 2))
    if width < 1 or depth < 1:
        raise ConfigError("[net] width and depth must be >= 1")
    return [width] * depth


def _train_kwargs(cfg, defaults):
    tr = cfg["train"]
    kw = {"seed": cfg["seed"]}
    for key in ("n_particles", "n_steps", "n_iters", "eval_every",
                "log_every"):
        if key in tr:
            kw[key] = int(tr[key])
    for key in ("clip_norm", "divergence_cap"):
        if key in tr:
            kw[key] = float(tr[key])
    kw["lr"] = cfgmod.lr_schedule(tr, defaults["lr"])
    return kw


def _save_common(cfg, outdir, extra=None):
    os.makedirs(outdir, exist_ok=True)
    cfgmod.write_resolved(cfg, os.path.join(outdir, "resolved_config.json"),
                          extra)


def _outdir(cfg):
    if not cfg.get("outdir"):
        raise ConfigError("no output directory (set outdir or pass --outdir)")
    return cfg["outdir"]


def _build_model(cfg):
    try:
        return build_model(cfg["model"], cfg["model_overrides"])
    except TypeError as e:
        raise ConfigError(f"[params] {e}") from None


def run_mfc(cfg):
    from .mfc_direct import TrainConfig, train
    model = _build_model(cfg)
    din = 3 if model.common_noise else 2
    arch = Architecture([din] + _hidden(cfg["net"]) + [1])
    tc = TrainConfig(**_train_kwargs(cfg, {"lr": TrainConfig.lr}))
    outdir = _outdir(cfg)
    _save_common(cfg, outdir, {"arch": repr(arch)})
    report = train(model, arch, tc)
    report.save(outdir, extra_summary={"method": "mfc-direct",
                                       "model": cfg["model"],
                                       "seed": cfg["seed"]})
    if report.diverged:
        print(f"diverged at iteration {report.stopped_at}; "
              f"partial artifacts in {outdir}", file=sys.stderr)
        return 1
    print(f"final loss {report.loss[-1]:.6g} "
          f"({report.loss.size} iterations, {report.wall_time:.1f}s) "
          f"-> {outdir}")
    return 0


def run_fbsde(cfg):
    from .fbsde_shoot import (ShootConfig, ShootingControls,
                              systemic_risk_fbsde, train)
    if cfg["model"] != "systemic_risk":
        raise ConfigError(
            f"no stochastic two-point system wired for model {cfg['model']!r} "
            "(systemic_risk only)")
    model = _build_model(cfg)
    system = systemic_risk_fbsde(params=model.p, T=model.T, m0=model.m0)
    hid = _hidden(cfg["net"])
    if system.common_noise:
        y0_arch = Architecture([2] + hid + [1])
        z_arch = Architecture([3] + hid + [2])
    else:
        y0_arch = Architecture([1] + hid + [1])
        z_arch = Architecture([2] + hid + [1])
    sc = ShootConfig(**_train_kwargs(cfg, {"lr": ShootConfig.lr}))
    controls = ShootingControls(system, y0_arch, z_arch, seed=cfg["seed"])
    outdir = _outdir(cfg)
    _save_common(cfg, outdir, {"y0_arch": repr(y0_arch),
                               "z_arch": repr(z_arch)})
    report = train(system, controls, sc)
    report.save(outdir, extra_summary={"method": "fbsde-shoot",
                                       "model": cfg["model"],
                                       "seed": cfg["seed"]})
    if report.diverged:
        print(f"diverged at iteration {report.stopped_at}; "
              f"partial artifacts in {outdir}", file=sys.stderr)
        return 1
    print(f"final penalty {report.loss[-1]:.6g} "
          f"({report.loss.size} iterations, {report.wall_time:.1f}s) "
          f"-> {outdir}")
    return 0


def run_dgm(cfg):
    from .dgm_pde import DgmConfig, LossWeights, crowded_trade_pde, train
    if cfg["model"] != "crowded_trade":
        raise ConfigError(
            f"no PDE system wired for model {cfg['model']!r} "
            "(crowded_trade only)")
    model = _build_model(cfg)
    dg = cfg["dgm"]
    problem = crowded_trade_pde(
        params=model.p, T=model.T, m0=model.m0,
        x_lo=float(dg.get("x_lo", -2.0)), x_hi=float(dg.get("x_hi", 8.0)))
    weights = LossWeights(kfp=float(dg.get("w_kfp", 1.0)),
                          kfp0=float(dg.get("w_kfp0", 10.0)),
                          hjb=float(dg.get("w_hjb", 1.0)),
                          hjb_t=float(dg.get("w_hjb_t", 10.0)))
    hid = _hidden(cfg["net"])
    u_arch = Architecture([2] + hid + [1])
    m_arch = Architecture([2] + hid + [1], out="exp")
    kw = _train_kwargs(cfg, {"lr": DgmConfig.lr})
    for key in ("n_boundary", "n_quad"):
        if key in dg:
            kw[key] = int(dg[key])
    dc = DgmConfig(**kw)
    outdir = _outdir(cfg)
    _save_common(cfg, outdir, {"u_arch": repr(u_arch),
                               "m_arch": repr(m_arch)})
    report = train(problem, u_arch, m_arch, weights, dc)
    report.save(outdir, extra_summary={"method": "dgm",
                                       "model": cfg["model"],
                                       "seed": cfg["seed"]})
    if report.diverged:
        print(f"diverged at iteration {report.stopped_at}; "
              f"partial artifacts in {outdir}", file=sys.stderr)
        return 1
    print(f"final loss {report.loss[-1]:.6g} "
          f"({report.loss.size} iterations, {report.wall_time:.1f}s) "
          f"-> {outdir}")
    return 0


def run_oracle(cfg):
    from . import oracle as orc
    model = _build_model(cfg)
    oc = cfg["oracle"]
    outdir = _outdir(cfg)
    _save_common(cfg, outdir)
    use_grid = bool(oc.get("grid", 0))
    if use_grid:
        mean, var = model.m0.moments()
        sd = float(np.sqrt(var))
        xlo = float(oc.get("x_lo", mean - 6.0 * sd))
        xhi = float(oc.get("x_hi", mean + 6.0 * sd))
        sol = orc.grid_fixed_point(
            model, xlo, xhi, nx=int(oc.get("nx", 201)),
            nt=int(oc.get("nt", 100)), damping=float(oc.get("damping", 0.5)),
            tol=float(oc.get("tol", 1e-7)))
        sol.require_converged()
        sol.save(outdir)
        print(f"grid oracle residual {sol.meta.get('residual'):.3g} "
              f"-> {outdir}")
        return 0
    n_steps = int(oc.get("n_steps", 2000))
    if cfg["model"] in ("price_impact", "price_impact_coop"):
        sol = orc.price_impact_ode_oracle(params=model.p, T=model.T,
                                          m0=model.m0, n_steps=n_steps)
        feedback = lambda t, x: orc.price_impact_feedback(sol, t, x)
    elif cfg["model"] == "systemic_risk":
        sol = orc.lq_systemic_risk_oracle(params=model.p, T=model.T,
                                          m0=model.m0, n_steps=n_steps)
        mbar = model.m0.moments()[0]
        feedback = lambda t, x: orc.systemic_risk_feedback(sol, t, x, mbar)
    else:
        sol = orc.crowded_trade_ode_oracle(params=model.p, T=model.T,
                                           m0=model.m0, n_steps=n_steps)
        feedback = lambda t, x: orc.crowded_trade_feedback(sol, t, x)
    _tabulate_control(sol, feedback, model, oc, outdir)
    sol.save(outdir)
    print(f"oracle coefficients on {sol.t.size} nodes -> {outdir}")
    return 0


def _tabulate_control(sol, feedback, model, oc, outdir):
    """ODE oracles carry coefficient paths; materialize the feedback on a
    (t,x) grid so compare can line it up against learned control grids."""
    mean, var = model.m0.moments()
    sd = float(np.sqrt(var))
    xlo = float(oc.get("x_lo", mean - 6.0 * sd))
    xhi = float(oc.get("x_hi", mean + 6.0 * sd))
    t = np.linspace(0.0, model.T, int(oc.get("nt", 11)))
    x = np.linspace(xlo, xhi, int(oc.get("nx", 101)))
    with open(os.path.join(outdir, "control_grid.csv"), "w") as fh:
        fh.write("t,x,control\n")
        for tv in t:
            av = np.asarray(feedback(tv, x), dtype=np.float64)
            av = np.broadcast_to(av, x.shape)
            for xv, al in zip(x, av):
                fh.write(f"{tv:.17g},{xv:.17g},{al:.17g}\n")


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def read_grid_csv(path):
    """Long-format (t,x,value) -> dict: sorted times, per-time x and v."""
    data = np.genfromtxt(path, delimiter=",", names=True)
    cols = data.dtype.names
    t, x, v = (np.asarray(data[c], dtype=np.float64) for c in cols[:3])
    times = np.unique(t)
    per = []
    for tv in times:
        sel = t == tv
        order = np.argsort(x[sel])
        per.append((x[sel][order], v[sel][order]))
    return times, per


def _field_at(times, per, tq, xq):
    """Linear interpolation in t then x; tq is clipped to the time range."""
    tq = min(max(tq, times[0]), times[-1])
    j = int(np.searchsorted(times, tq))
    if j < times.size and abs(times[j] - tq) <= 1e-12 * max(1.0, abs(tq)):
        xa, va = per[j]
        return np.interp(xq, xa, va)
    x0, v0 = per[j - 1]
    x1, v1 = per[j]
    w = (tq - times[j - 1]) / (times[j] - times[j - 1])
    return (1.0 - w) * np.interp(xq, x0, v0) + w * np.interp(xq, x1, v1)


def _linfit(x, v):
    slope, icpt = np.polyfit(x, v, 1)
    pred = slope * x + icpt
    ss = float(np.sum((v - v.mean()) ** 2))
    r2 = 1.0 if ss == 0.0 else 1.0 - float(np.sum((v - pred) ** 2)) / ss
    return float(slope), float(icpt), r2


def compare_grids(dir_a, dir_b, field="control", out=None):
    """Per-snapshot-time error stats for one field, A against B.

    B is interpolated onto A's points over the common (t,x) range; sup and
    root-mean-square gaps plus linear-fit slopes and R^2 per side. Writes
    compare_<field>.csv and compare_summary.json when out is given.
    """
    fa = os.path.join(dir_a, f"{field}_grid.csv")
    fb = os.path.join(dir_b, f"{field}_grid.csv")
    for f in (fa, fb):
        if not os.path.exists(f):
            raise FileNotFoundError(f)
    ta, pa = read_grid_csv(fa)
    tb, pb = read_grid_csv(fb)
    t_lo, t_hi = max(ta[0], tb[0]), min(ta[-1], tb[-1])
    if t_lo > t_hi + 1e-12:
        raise ValueError(f"disjoint time ranges: [{ta[0]},{ta[-1]}] vs "
                         f"[{tb[0]},{tb[-1]}]")
    xb_lo = max(x[0] for x, _ in pb)
    xb_hi = min(x[-1] for x, _ in pb)
    rows = []
    for i, tv in enumerate(ta):
        if tv < t_lo - 1e-12 or tv > t_hi + 1e-12:
            continue
        xa, va = pa[i]
        if max(xa[0], xb_lo) > min(xa[-1], xb_hi):
            raise ValueError("disjoint spatial domains")
        keep = (xa >= xb_lo - 1e-12) & (xa <= xb_hi + 1e-12)
        xq = xa[keep]
        if xq.size < 2:
            raise ValueError("fewer than 2 overlapping grid points")
        v_a = va[keep]
        v_b = _field_at(tb, pb, tv, xq)
        diff = v_a - v_b
        sa, ia_, ra = _linfit(xq, v_a)
        sb, ib_, rb = _linfit(xq, v_b)
        rows.append({
            "t": float(tv),
            "sup": float(np.max(np.abs(diff))),
            "l2": float(np.sqrt(np.mean(diff ** 2))),
            "slope_a": sa, "slope_b": sb,
            "slope_rel_err": abs(sa - sb) / max(abs(sb), 1e-300),
            "r2_a": ra, "r2_b": rb,
        })
    if not rows:
        raise ValueError("no comparable snapshot times")
    summary = {
        "field": field, "run_a": dir_a, "run_b": dir_b,
        "n_times": len(rows),
        "max_sup": max(r["sup"] for r in rows),
        "max_l2": max(r["l2"] for r in rows),
        "max_slope_rel_err": max(r["slope_rel_err"] for r in rows),
        "min_r2_a": min(r["r2_a"] for r in rows),
    }
    if out:
        os.makedirs(out, exist_ok=True)
        names = list(rows[0])
        with open(os.path.join(out, f"compare_{field}.csv"), "w") as fh:
            fh.write(",".join(names) + "\n")
            for r in rows:
                fh.write(",".join(f"{r[n]:.17g}" for n in names) + "\n")
        with open(os.path.join(out, "compare_summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return rows, summary


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

_RUNNERS = {"run-mfc": ("mfc-direct", run_mfc),
            "run-fbsde": ("fbsde-shoot", run_fbsde),
            "run-dgm": ("dgm", run_dgm),
            "run-oracle": ("oracle", run_oracle)}


def build_parser():
    p = argparse.ArgumentParser(
        prog="mfglab",
        description="mean field game / control solvers and oracles")
    sub = p.add_subparsers(dest="command", required=True)
    for name in _RUNNERS:
        sp = sub.add_parser(name, help=f"{_RUNNERS[name][0]} run from a "
                            "config file")
        sp.add_argument("config", help="TOML config file")
        sp.add_argument("--seed", type=int, default=None,
                        help="rng seed (required for train runs unless the "
                        "config sets one)")
        sp.add_argument("--outdir", default=None, help="artifact directory")
    cp = sub.add_parser("compare", help="error report between two artifact "
                        "directories")
    cp.add_argument("run_a")
    cp.add_argument("run_b")
    cp.add_argument("--field", default="control",
                    choices=("control", "density", "value"))
    cp.add_argument("--out", default=None, help="report directory")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "compare":
            rows, summary = compare_grids(args.run_a, args.run_b,
                                          field=args.field, out=args.out)
            print(f"{summary['n_times']} times: sup {summary['max_sup']:.6g} "
                  f"l2 {summary['max_l2']:.6g} slope err "
                  f"{summary['max_slope_rel_err']:.6g}")
            return 0
        method, runner = _RUNNERS[args.command]
        cfg = cfgmod.load_config(
            args.config,
            overrides={"seed": args.seed, "outdir": args.outdir},
            fallback_method=method)
        if cfg["method"] != method:
            raise ConfigError(
                f"config says method {cfg['method']!r} but the subcommand "
                f"is {args.command}")
        cfg["model_overrides"] = {k: float(v)
                                  for k, v in cfg["model_params"].items()}
        return runner(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
