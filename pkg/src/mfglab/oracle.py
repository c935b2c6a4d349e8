"""Ground-truth solvers the learned solutions are judged against.

Two independent families:

  * ODE reductions. The linear-quadratic benchmarks admit value-function
    ansatz reductions to scalar ODEs (Riccati equations for the quadratic
    coefficients, linear equations for the rest). These are integrated with
    a plain RK4 and give feedback slopes, intercepts, state statistics and
    optimal costs to near machine accuracy. The full derivations live in
    docs/derivations.md; nothing here is fitted to the learned output.

  * A brute-force grid solver for the 1-D mean field system: backward
    implicit finite differences for the value function, forward explicit
    conservative upwind for the density, damped Picard iteration on the
    coupling. It knows nothing about the LQ structure, which is what makes
    the cross-check between the two families meaningful.

Every ODE oracle is validated against the grid solver (or a closed form)
before its output is trusted; cross_check=True (default) runs that
validation at construction and refuses to return an unvalidated solution.
"""

import json
import os

import numpy as np
from scipy.linalg import solve_banded

from .models import (CooperativePriceImpact, GaussianInit, MeasureSummary,
                     PriceImpactParams, SystemicRisk, SystemicRiskParams)


class OdeBlowUpError(RuntimeError):
    def __init__(self, t, bound):
        super().__init__(f"ODE solution exceeded {bound:g} at t={t:.6g}")
        self.t = t


class OracleCrossCheckError(RuntimeError):
    """An ODE-reduction oracle disagreed with its independent validator."""


def solve_ode_rk4(rhs, cond, t_grid, side="initial"):
    """Classical RK4 on a fixed grid.

    rhs(t, y) -> dy/dt with y a float or 1-d array. side="initial" starts
    from cond at t_grid[0]; side="terminal" integrates backward from cond at
    t_grid[-1]. Returns ys aligned with t_grid (ascending) either way.
    """
    t = np.asarray(t_grid, dtype=np.float64)
    y0 = np.atleast_1d(np.asarray(cond, dtype=np.float64))
    ys = np.empty((t.size, y0.size))
    if side == "initial":
        order = range(t.size - 1)
        ys[0] = y0
    elif side == "terminal":
        order = range(t.size - 1, 0, -1)
        ys[-1] = y0
    else:
        raise ValueError(f"side must be 'initial' or 'terminal', got {side!r}")

    def f(tt, yy):
        return np.atleast_1d(np.asarray(rhs(tt, yy), dtype=np.float64))

    for i in order:
        if side == "initial":
            t0, y = t[i], ys[i]
            h = t[i + 1] - t[i]
            dst = i + 1
        else:
            t0, y = t[i], ys[i]
            h = t[i - 1] - t[i]
            dst = i - 1
        k1 = f(t0, y)
        k2 = f(t0 + h / 2, y + h / 2 * k1)
        k3 = f(t0 + h / 2, y + h / 2 * k2)
        k4 = f(t0 + h, y + h * k3)
        ys[dst] = y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(ys[dst])) or np.max(np.abs(ys[dst])) > 1e12:
            raise OdeBlowUpError(t[dst], 1e12)
    return ys if y0.size > 1 else ys[:, 0]


class OracleSolution:
    """Oracle output: coefficient paths and/or (t,x) grid fields.

    coeffs maps names to paths on self.t. Grid solutions carry x, u, m and
    the feedback control as (nt+1, nx) arrays. meta records scheme,
    resolution, fixed-point residual and the converged flag; an oracle that
    did not converge refuses to be used via require_converged().
    """

    def __init__(self, t, coeffs=None, x=None, u=None, m=None, control=None,
                 summaries=None, meta=None):
        self.t = np.asarray(t, dtype=np.float64)
        self.coeffs = dict(coeffs or {})
        self.x = None if x is None else np.asarray(x, dtype=np.float64)
        self.u = u
        self.m = m
        self.control = control
        self.summaries = dict(summaries or {})
        self.meta = dict(meta or {})

    @property
    def converged(self):
        return bool(self.meta.get("converged", True))

    def require_converged(self):
        if not self.converged:
            raise OracleCrossCheckError(
                f"oracle did not converge: residual {self.meta.get('residual')}")
        return self

    def coeff(self, name, t=None):
        path = self.coeffs[name]
        if t is None:
            return path
        return np.interp(t, self.t, path)

    def save(self, outdir):
        os.makedirs(outdir, exist_ok=True)
        if self.coeffs or self.summaries:
            cols = {**self.coeffs, **self.summaries}
            names = sorted(cols)
            with open(os.path.join(outdir, "coeffs.csv"), "w") as fh:
                fh.write("t," + ",".join(names) + "\n")
                for i, tv in enumerate(self.t):
                    row = [f"{tv:.17g}"] + [f"{cols[n][i]:.17g}" for n in names]
                    fh.write(",".join(row) + "\n")
        for name, field in (("value", self.u), ("density", self.m),
                            ("control", self.control)):
            if field is None:
                continue
            with open(os.path.join(outdir, f"{name}_grid.csv"), "w") as fh:
                fh.write("t,x,%s\n" % name)
                for i, tv in enumerate(self.t):
                    for j, xv in enumerate(self.x):
                        fh.write(f"{tv:.17g},{xv:.17g},{field[i, j]:.17g}\n")
        with open(os.path.join(outdir, "meta.json"), "w") as fh:
            json.dump(self.meta, fh, indent=2, sort_keys=True, default=float)
            fh.write("\n")


# ---------------------------------------------------------------------------
# systemic risk: eta Riccati
# ---------------------------------------------------------------------------

def systemic_risk_riccati_rhs(params):
    """d eta/dt = 2(a+q) eta + eta^2 - (eps - q^2). Exposed so the
    zero-forcing structural check (eps = q^2, c = 0 gives eta == 0) can be
    run against the same equation the oracle integrates."""
    p = params

    def rhs(_, eta):
        return 2.0 * (p.a + p.q) * eta + eta ** 2 - (p.eps - p.q ** 2)

    return rhs


def lq_systemic_risk_oracle(params=None, T=0.5, m0=None, n_steps=2000,
                            cross_check=True):
    """Riccati-reduction oracle for the interbank lending model.

    Value ansatz eta(t)(mbar-x)^2/2 + offset gives the scalar Riccati
    equation deta/dt = 2(a+q) eta + eta^2 - (eps - q^2), eta(T) = c, and the
    feedback alpha(t,x) = (q + eta(t))(mbar - x). The cooperative (jointly
    optimized) problem reduces to the same equation, so both cost routes
    below apply to either reading; see docs/derivations.md.

    Costs are computed two independent ways and both stored:
      value route      eta(0) v0/2 + (sigma^2 (1-rho^2)/2) * int eta dt
      quadrature route int (eta^2 + eps - q^2) v_t/2 dt + c v_T/2,
                       with dv/dt = -2(a+q+eta) v + sigma^2 (1-rho^2)
    their gap is recorded as meta["cost_gap"].
    """
    p = params or SystemicRiskParams()
    m0 = m0 or GaussianInit(0.0, 0.25)
    t = np.linspace(0.0, T, n_steps + 1)
    eta = solve_ode_rk4(systemic_risk_riccati_rhs(p), p.c, t, side="terminal")
    sig2 = p.sigma ** 2 * (1.0 - p.rho ** 2)
    _, v0 = m0.moments()

    def var_rhs(tt, v):
        return -2.0 * (p.a + p.q + np.interp(tt, t, eta)) * v + sig2

    v = solve_ode_rk4(var_rhs, v0, t, side="initial")
    cost_value = 0.5 * eta[0] * v0 + 0.5 * sig2 * np.trapezoid(eta, t)
    rate = 0.5 * (eta ** 2 + p.eps - p.q ** 2) * v
    cost_quad = np.trapezoid(rate, t) + 0.5 * p.c * v[-1]

    sol = OracleSolution(
        t,
        coeffs={
            "eta": eta,
            "slope": -(p.q + eta),      # d alpha / dx at fixed mbar
            "variance": v,
            "y_slope": eta,             # Y(t,x) = eta (x - mbar), slope in x
            "z_idio": eta * p.sigma * np.sqrt(1.0 - p.rho ** 2),
            "z_common": np.zeros_like(eta),
        },
        meta={
            "model": "systemic_risk",
            "scheme": "rk4-riccati",
            "n_steps": n_steps,
            "cost": float(0.5 * (cost_value + cost_quad)),
            "cost_value_route": float(cost_value),
            "cost_quadrature_route": float(cost_quad),
            "cost_gap": float(abs(cost_value - cost_quad)),
            "converged": True,
        })
    if cross_check:
        _cross_check_systemic_risk(sol, p, T, m0)
    return sol


def systemic_risk_feedback(sol, t, x, mbar):
    """alpha(t, x) = (q + eta(t)) (mbar - x); eta interpolated on sol.t."""
    return -sol.coeff("slope", t) * (mbar - np.asarray(x))


def systemic_risk_cost_of_feedback(slope_path, t, params=None, v0=0.25):
    """Cost of playing alpha = lambda(t)(mbar - x) for everyone.

    Used to probe optimality: any perturbation of the optimal slope should
    raise this. lambda enters the gap variance through
    dv/dt = -2(a + lambda) v + sigma^2(1-rho^2) and the cost through
    int (lambda^2 - 2 q lambda + eps) v/2 dt + c v_T/2.
    """
    p = params or SystemicRiskParams()
    lam = np.asarray(slope_path, dtype=np.float64)
    sig2 = p.sigma ** 2 * (1.0 - p.rho ** 2)

    def var_rhs(tt, v):
        return -2.0 * (p.a + np.interp(tt, t, lam)) * v + sig2

    v = solve_ode_rk4(var_rhs, v0, t, side="initial")
    rate = 0.5 * (lam ** 2 - 2.0 * p.q * lam + p.eps) * v
    return float(np.trapezoid(rate, t) + 0.5 * p.c * v[-1])


def _cross_check_systemic_risk(sol, p, T, m0):
    # the feedback map is rho-independent, so validate against a grid run
    # of the rho=0 system where no common noise machinery is needed
    p0 = SystemicRiskParams(a=p.a, q=p.q, eps=p.eps, c=p.c, sigma=p.sigma, rho=0.0)
    model = SystemicRisk(p0, T=T, m0=m0)
    mean, var = m0.moments()
    half = 5.0 * np.sqrt(var)
    grid = grid_fixed_point(model, mean - half, mean + half, nx=101, nt=60,
                            tol=1e-9, max_iter=80)
    grid.require_converged()
    gap = compare_controls_on_bulk(
        grid, lambda tt, xx: _sr_alpha(sol, p, grid, tt, xx))
    sol.meta["grid_cross_check_gap"] = float(gap)
    if gap > 0.05:
        raise OracleCrossCheckError(
            f"systemic risk Riccati vs coarse grid: relative sup gap {gap:.3g}")


def _sr_alpha(sol, p, grid, tt, xx):
    mbar = np.interp(tt, grid.t, grid.summaries["state_mean"])
    return (p.q + sol.coeff("eta", tt)) * (mbar - xx)


# ---------------------------------------------------------------------------
# price impact: mean/fluctuation ODE system
# ---------------------------------------------------------------------------

def price_impact_ode_oracle(params=None, T=1.0, m0=None, n_steps=2000,
                            cross_check=True):
    """ODE-reduction oracle for the cooperative trading model.

    Splitting the state into mean and fluctuation decouples the problem:

      mean:        da/dt = (gamma - a)^2/c_alpha - c_X, a(T) = c_g,
                   mean trading rate abar = s_m(t) xbar with
                   s_m = (gamma - a)/c_alpha
      fluctuation: deta/dt = 2 eta^2/c_alpha - c_X/2, eta(T) = c_g/2,
                   alpha slope phi = -2 eta/c_alpha

    Optimal feedback alpha(t,x) = phi(t) x + (s_m(t) - phi(t)) xbar(t), and
    the optimal cost a(0) xbar0^2/2 + eta(0) v0 + sigma^2 int eta dt. The
    gamma = 0 case collapses to a = 2 eta, a single Riccati equation in the
    slope, which is asserted in tests.
    """
    p = params or PriceImpactParams()
    m0 = m0 or GaussianInit(1.0, 0.25)
    t = np.linspace(0.0, T, n_steps + 1)

    a = solve_ode_rk4(lambda _, y: (p.gamma - y) ** 2 / p.c_alpha - p.c_x,
                      p.c_g, t, side="terminal")
    eta = solve_ode_rk4(lambda _, y: 2.0 * y ** 2 / p.c_alpha - 0.5 * p.c_x,
                        0.5 * p.c_g, t, side="terminal")
    s_m = (p.gamma - a) / p.c_alpha
    phi = -2.0 * eta / p.c_alpha

    xbar0, v0 = m0.moments()
    xbar = solve_ode_rk4(lambda tt, y: np.interp(tt, t, s_m) * y,
                         xbar0, t, side="initial")
    # fluctuation variance: dxi = phi xi dt + sigma dW
    v = solve_ode_rk4(lambda tt, y: 2.0 * np.interp(tt, t, phi) * y + p.sigma ** 2,
                      v0, t, side="initial")
    cost = (0.5 * a[0] * xbar0 ** 2 + eta[0] * v0
            + p.sigma ** 2 * np.trapezoid(eta, t))

    sol = OracleSolution(
        t,
        coeffs={
            "a_mean": a,
            "eta": eta,
            "slope": phi,
            "mean_slope": s_m,
            "xbar": xbar,
            "intercept": (s_m - phi) * xbar,
            "variance": v,
            "mean_control": s_m * xbar,
        },
        meta={
            "model": "price_impact",
            "scheme": "rk4-mean-fluctuation",
            "n_steps": n_steps,
            "gamma": p.gamma,
            "cost": float(cost),
            "converged": True,
        })
    if cross_check:
        _cross_check_price_impact(sol, p, T, m0)
    return sol


def price_impact_feedback(sol, t, x):
    return sol.coeff("slope", t) * np.asarray(x) + sol.coeff("intercept", t)


def _cross_check_price_impact(sol, p, T, m0):
    model = CooperativePriceImpact(p, T=T, m0=m0)
    mean, var = m0.moments()
    sd = np.sqrt(var)
    grid = grid_fixed_point(model, mean - 5.0 * sd - 1.0, mean + 4.0 * sd,
                            nx=121, nt=60, tol=1e-9, max_iter=120)
    grid.require_converged()
    gap = compare_controls_on_bulk(
        grid, lambda tt, xx: price_impact_feedback(sol, tt, xx))
    sol.meta["grid_cross_check_gap"] = float(gap)
    if gap > 0.06:
        raise OracleCrossCheckError(
            f"price impact ODE oracle vs coarse grid: relative sup gap {gap:.3g}")


# ---------------------------------------------------------------------------
# crowded trade: quadratic-ansatz reduction
# ---------------------------------------------------------------------------

def crowded_trade_ode_oracle(params=None, T=1.0, m0=None, n_steps=2000):
    """Quadratic-ansatz reduction of the broker PDE system.

    u(t,q) = P q^2 + r q + s with dP/dt = P^2/kappa - phi, P(T) = A. The
    linear coefficient couples to the density mean mu through the aggregate
    trading rate mubar = -(2 P mu + r)/(2 kappa):

        dr/dt  = gamma mubar + P r / kappa,   r(T) = 0
        dmu/dt = mubar,                       mu(0) = mean of m0

    a linear two-point boundary value problem solved by superposition of two
    initial value runs. Feedback a(t,q) = -(2 P q + r)/(2 kappa); slope
    -P/kappa. The diffusion nu only enters the constant s and the density
    variance dv/dt = -(2P/kappa) v + 2 nu, so the feedback itself is
    nu-independent. Used as an extra internal check on the grid solver.
    """
    from .models import CrowdedTradeParams
    p = params or CrowdedTradeParams()
    m0 = m0 or GaussianInit(4.0, 0.3)
    t = np.linspace(0.0, T, n_steps + 1)
    P = solve_ode_rk4(lambda _, y: y ** 2 / p.kappa - p.phi, p.big_a, t,
                      side="terminal")
    mu0, v0 = m0.moments()

    def pair_rhs(tt, y):
        # y = (mu, r)
        Pt = np.interp(tt, t, P)
        mubar = -(2.0 * Pt * y[0] + y[1]) / (2.0 * p.kappa)
        return np.array([mubar, p.gamma * mubar + Pt * y[1] / p.kappa])

    # linear shooting on r(0): the map r0 -> r(T) is affine
    sol_a = solve_ode_rk4(pair_rhs, np.array([mu0, 0.0]), t, side="initial")
    sol_b = solve_ode_rk4(pair_rhs, np.array([mu0, 1.0]), t, side="initial")
    rta, rtb = sol_a[-1, 1], sol_b[-1, 1]
    w = rta / (rta - rtb) if rta != rtb else 0.0
    y = solve_ode_rk4(pair_rhs, np.array([mu0, w]), t, side="initial")
    mu, r = y[:, 0], y[:, 1]
    mubar = -(2.0 * P * mu + r) / (2.0 * p.kappa)

    nu = 0.5 * p.sigma ** 2
    v = solve_ode_rk4(lambda tt, vv: -2.0 * np.interp(tt, t, P) / p.kappa * vv
                      + 2.0 * nu, v0, t, side="initial")
    return OracleSolution(
        t,
        coeffs={
            "P": P,
            "r": r,
            "mu": mu,
            "mubar": mubar,
            "slope": -P / p.kappa,
            "intercept": -r / (2.0 * p.kappa),
            "variance": v,
        },
        meta={
            "model": "crowded_trade",
            "scheme": "rk4-quadratic-ansatz",
            "n_steps": n_steps,
            "shoot_residual": float(abs(y[-1, 1])),
            "converged": bool(abs(y[-1, 1]) < 1e-9),
        })


def crowded_trade_feedback(sol, t, x):
    return sol.coeff("slope", t) * np.asarray(x) + sol.coeff("intercept", t)


# ---------------------------------------------------------------------------
# grid fixed point
# ---------------------------------------------------------------------------

def grid_fixed_point(model, xlo, xhi, nx=201, nt=100, damping=0.5, tol=1e-7,
                     max_iter=200):
    """Damped Picard iteration on the coupled value/density system.

    Per sweep: (i) backward implicit finite-difference pass for u, with the
    control frozen at the minimizer computed from the next time level's
    gradient (semi-implicit linearization, unconditionally stable), one
    banded solve per step; (ii) forward explicit pass for m in conservative
    flux form, upwind transport plus centered diffusion, CFL-substepped,
    no-flux walls; (iii) m <- (1-damping) m + damping m_new. Ghost values at
    the walls come from quadratic extrapolation, which is exact on the LQ
    solutions this validates. Mass is renormalized every sweep and the
    pre-renormalization drift recorded.

    Measure summaries (state mean, control mean) are recomputed from the
    current (m, control) fields at the top of each sweep, which is where
    the mean field coupling closes.
    """
    x = np.linspace(xlo, xhi, nx)
    dx = x[1] - x[0]
    t = np.linspace(0.0, model.T, nt + 1)
    dt = t[1] - t[0]
    nu = 0.5 * model.sigma ** 2

    m0 = model.m0.density(x)
    m0 = m0 / (m0.sum() * dx)
    M = np.tile(m0, (nt + 1, 1))    # damped Picard state
    U = np.zeros((nt + 1, nx))
    A = np.zeros((nt + 1, nx))
    Mprev = None                    # previous sweep output, for the residual

    residuals = []
    mass_drift = 0.0
    converged = False
    for it in range(max_iter):
        state_mean = (M * x).sum(axis=1) * dx
        control_mean = (M * A).sum(axis=1) * dx
        summaries = [MeasureSummary(state_mean=state_mean[n],
                                    control_mean=control_mean[n])
                     for n in range(nt + 1)]

        # backward value sweep
        U[nt] = model.terminal_cost(x, summaries[nt])
        for n in range(nt - 1, -1, -1):
            p = _grad_centered(U[n + 1], dx)
            _, a_star = model.optimized_hamiltonian(x, summaries[n], p)
            b = model.drift(x, summaries[n], a_star)
            f = model.running_cost(x, summaries[n], a_star)
            U[n] = _implicit_step(U[n + 1] + dt * f, b, nu, dt, dx)

        # controls from the fresh value function
        for n in range(nt + 1):
            p = _grad_centered(U[n], dx)
            _, A[n] = model.optimized_hamiltonian(x, summaries[n], p)

        # forward density sweep; transport coefficient averaged over the
        # step endpoints so the mean path is second order in dt
        Mnew = np.empty_like(M)
        Mnew[0] = m0
        drift_acc = 0.0
        b_at = [model.drift(x, summaries[n], A[n]) for n in range(nt + 1)]
        for n in range(nt):
            b = 0.5 * (b_at[n] + b_at[n + 1])
            mn = _kfp_substep(Mnew[n], b, nu, dt, dx)
            total = mn.sum() * dx
            drift_acc = max(drift_acc, abs(total - 1.0))
            Mnew[n + 1] = mn / total
        mass_drift = max(mass_drift, drift_acc)

        # successive sweep outputs; a decoupled model repeats its first
        # sweep bitwise, so sweep two detects convergence with residual 0
        res = float(np.max(np.abs(Mnew - (M if Mprev is None else Mprev))) * dx)
        residuals.append(res)
        Mprev = Mnew
        M = (1.0 - damping) * M + damping * Mnew
        if res < tol:
            converged = True
            break

    M = Mprev if Mprev is not None else M   # undamped output of the last sweep
    state_mean = (M * x).sum(axis=1) * dx
    control_mean = (M * A).sum(axis=1) * dx
    return OracleSolution(
        t, x=x, u=U, m=M, control=A,
        summaries={"state_mean": state_mean, "control_mean": control_mean},
        meta={
            "model": model.name,
            "scheme": "grid-implicit-hjb-upwind-kfp",
            "nx": nx, "nt": nt, "damping": damping,
            "iterations": len(residuals),
            "residual": residuals[-1] if residuals else None,
            "residual_history": residuals,
            "mass_drift_prerenorm": mass_drift,
            "converged": converged,
        })


def _grad_centered(u, dx):
    g = np.empty_like(u)
    g[1:-1] = (u[2:] - u[:-2]) / (2.0 * dx)
    g[0] = (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * dx)
    g[-1] = (3.0 * u[-1] - 4.0 * u[-2] + u[-3]) / (2.0 * dx)
    return g


def _implicit_step(rhs, b, nu, dt, dx):
    """Solve (I - dt (nu D2 + b D1)) u = rhs with extrapolated ghosts."""
    n = rhs.size
    r = nu * dt / dx ** 2
    s = b * dt / (2.0 * dx)
    ab = np.zeros((5, n))
    # interior rows
    ab[2, :] = 1.0 + 2.0 * r
    ab[1, 1:] = -r - s[:-1]      # super-diagonal, row i col i+1
    ab[3, :-1] = -r + s[1:]      # sub-diagonal, row i col i-1
    # first row: one-sided second-order stencils on cols 0,1,2
    ab[2, 0] = 1.0 - r + 3.0 * s[0]
    ab[1, 1] = 2.0 * r - 4.0 * s[0]
    ab[0, 2] = -r + s[0]
    # last row: mirror on cols n-3, n-2, n-1
    ab[2, -1] = 1.0 - r - 3.0 * s[-1]
    ab[3, -2] = 2.0 * r + 4.0 * s[-1]
    ab[4, -3] = -r - s[-1]
    return solve_banded((2, 2), ab, rhs)


def _kfp_substep(m, b, nu, dt, dx):
    """Advance the density one macro step with CFL-limited substeps.

    Transport is upwind with linear reconstruction of the donor cell plus
    the Lax-Wendroff face correction (h/2)(b^2 m' + b b' m). Plain
    first-order upwind biases the mean flux at O(dx), forward Euler alone
    carries an anti-diffusive O(h) error that visibly shrinks the variance,
    and dropping the b b' m part of the correction leaves an O(h) mean
    bias; all three show up in the oracle consistency checks. Diffusion is
    centered, walls are flux-free.
    """
    bmax = float(np.max(np.abs(b)))
    stable = 0.8 * dx ** 2 / (2.0 * nu + bmax * dx + 1e-300)
    k = max(1, int(np.ceil(dt / stable)))
    h = dt / k
    bh = 0.5 * (b[1:] + b[:-1])  # face velocities
    bslope = np.diff(b) / dx     # face-centered db/dx
    up_pos = bh >= 0.0
    for _ in range(k):
        dl = np.diff(m)
        s = np.zeros_like(m)     # centered cell slopes, flat at the walls
        s[1:-1] = 0.5 * (m[2:] - m[:-2])
        donor_lo = m[:-1] + 0.5 * s[:-1]
        donor_hi = m[1:] - 0.5 * s[1:]
        flux = np.where(up_pos, bh * donor_lo, bh * donor_hi) \
            - (nu + 0.5 * h * bh ** 2) * dl / dx \
            - 0.25 * h * bh * bslope * (m[:-1] + m[1:])
        dm = np.zeros_like(m)    # dm_i = F_{i-1/2} - F_{i+1/2}, walls flux-free
        dm[:-1] -= flux
        dm[1:] += flux
        m = m + (h / dx) * dm
    return m


def compare_controls_on_bulk(grid_sol, feedback, mass=0.98):
    """Relative sup gap between the grid control and a feedback callable.

    The comparison runs over the bulk: per time slice, the x-range holding
    the central `mass` fraction of the grid density. Normalization is the
    sup of the reference control over the same region.
    """
    worst = 0.0
    ref_scale = 0.0
    t, x, dx = grid_sol.t, grid_sol.x, grid_sol.x[1] - grid_sol.x[0]
    lo_q, hi_q = (1.0 - mass) / 2.0, 1.0 - (1.0 - mass) / 2.0
    for i, tv in enumerate(t):
        cdf = np.cumsum(grid_sol.m[i]) * dx
        sel = (cdf >= lo_q) & (cdf <= hi_q)
        if not sel.any():
            continue
        ref = np.asarray(feedback(tv, x[sel]), dtype=np.float64)
        gap = np.max(np.abs(grid_sol.control[i, sel] - ref))
        worst = max(worst, float(gap))
        ref_scale = max(ref_scale, float(np.max(np.abs(ref))))
    return worst / max(ref_scale, 1e-300)


def fit_control_slope(grid_sol, ti):
    """Least-squares slope/intercept of the control in x over the bulk at
    time index ti, weighted by the density."""
    x = grid_sol.x
    w = grid_sol.m[ti]
    a = grid_sol.control[ti]
    W = w / w.sum()
    xm = (W * x).sum()
    am = (W * a).sum()
    cov = (W * (x - xm) * (a - am)).sum()
    var = (W * (x - xm) ** 2).sum()
    slope = cov / var
    return slope, am - slope * xm
