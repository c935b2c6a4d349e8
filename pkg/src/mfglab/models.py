"""Benchmark mean field models: coefficients, costs, Hamiltonians.

Three one-dimensional models, each with drift b(x, summary, alpha), running
cost f(x, summary, alpha), terminal cost g(x, summary) and a closed-form
minimizer of the Hamiltonian f + p*b over alpha:

  price_impact    inventory dX = alpha dt + sigma dW; quadratic trading and
                  holding costs with a -gamma*x*mean(alpha) rebate from the
                  permanent impact of the aggregate trading rate. The
                  coupling is through the control mean.
  systemic_risk   log-reserves mean-revert to the population mean and are
                  steered by lending/borrowing alpha; costs penalize
                  departures from the mean (q <= eps^2 keeps f jointly
                  convex). Optional common noise with correlation rho.
  crowded_trade   reduced broker problem in the inventory q only; running
                  cost kappa*a^2 + phi*q^2 - gamma*mubar*q under the sign
                  convention where the value function is a cost (the
                  profit-maximization form is its negative, so there
                  alpha* = +grad/(2 kappa) while here alpha* = -p/(2 kappa)).

Model functions accept plain numpy values or autodiff nodes; all arithmetic
goes through operators both support. Mean-field quantities come in through a
MeasureSummary record rather than an abstract measure: every model here
needs only the state mean, the control mean, or the raw particle sample.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class MissingSummaryError(RuntimeError):
    """A model asked the summary for a statistic it does not carry."""


class UnsupportedModelError(RuntimeError):
    """Hamiltonian not strictly convex in the control; no closed minimizer."""


class MeasureSummary:
    """Measure interaction record: state mean, control mean, raw sample.

    Fields are filled by whoever owns the population (particle rollout, grid
    solver, oracle); models pull what they need with require(), which fails
    loudly naming the missing statistic.
    """

    __slots__ = ("state_mean", "control_mean", "state_sample")

    def __init__(self, state_mean=None, control_mean=None, state_sample=None):
        self.state_mean = state_mean
        self.control_mean = control_mean
        self.state_sample = state_sample

    def require(self, name):
        v = getattr(self, name)
        if v is None:
            raise MissingSummaryError(
                f"model needs measure statistic {name!r} but the summary does not carry it")
        return v


@dataclass(frozen=True)
class PriceImpactParams:
    c_alpha: float = 1.0
    c_x: float = 2.0
    c_g: float = 0.3
    gamma: float = 0.2
    sigma: float = 0.5

    def __post_init__(self):
        for name in ("c_alpha", "c_x", "c_g", "sigma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.gamma < 0:  # gamma = 0 is the decoupled no-impact case
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")


@dataclass(frozen=True)
class SystemicRiskParams:
    a: float = 1.0
    q: float = 0.5
    eps: float = 0.75
    c: float = 1.0
    sigma: float = 0.5
    rho: float = 0.5

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.q > self.eps ** 2:
            raise ValueError(
                f"need q <= eps^2 for joint convexity, got q={self.q}, eps^2={self.eps ** 2}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0,1], got {self.rho}")


@dataclass(frozen=True)
class CrowdedTradeParams:
    kappa: float = 1.0
    phi: float = 1.0
    big_a: float = 1.0
    gamma: float = 1.0
    sigma: float = 0.3

    def __post_init__(self):
        for name in ("kappa", "phi", "big_a", "sigma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.gamma < 0:  # gamma = 0 decouples the herd term
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")


class GaussianInit:
    """Initial law N(mean, var): sampler, density, moments in one place."""

    def __init__(self, mean, var):
        if var <= 0:
            raise ValueError(f"variance must be positive, got {var}")
        self.mean = float(mean)
        self.var = float(var)

    def sample(self, rng, n):
        return self.mean + np.sqrt(self.var) * rng.standard_normal(n)

    def density(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.exp(-((x - self.mean) ** 2) / (2.0 * self.var)) / np.sqrt(2.0 * np.pi * self.var)

    def moments(self):
        return self.mean, self.var


class ModelSpec:
    """Shared coefficient interface. Subclasses fill the model functions.

    interaction is "state-distribution" or "control-distribution" and says
    which mean the costs read; common_noise marks models whose dynamics
    carry a W^0 term (correlation rho).
    """

    name = "?"
    d = 1
    k = 1
    interaction = "state-distribution"
    common_noise = False
    rho = 0.0

    def __init__(self, T, sigma, m0):
        if sigma <= 0:
            raise ValueError("sigma must be positive (nondegenerate diffusion)")
        self.T = float(T)
        self.sigma = float(sigma)
        self.m0 = m0

    # control-quadratic decomposition of f + p*b: returns (c2, c1, c0) with
    # f + p*b = c2*alpha^2 + c1*alpha + c0; c2 > 0 gives the closed minimizer
    def control_quadratic(self, x, summary, p):
        raise NotImplementedError

    def drift(self, x, summary, alpha):
        raise NotImplementedError

    def running_cost(self, x, summary, alpha):
        raise NotImplementedError

    def terminal_cost(self, x, summary):
        raise NotImplementedError

    def optimized_hamiltonian(self, x, summary, p):
        """(H*, alpha*) with H* = min over alpha of f + p*b."""
        c2, c1, c0 = self.control_quadratic(x, summary, p)
        c2v = float(np.min(c2.value if isinstance(c2, ad.Node) else c2))
        if c2v <= 0.0:
            raise UnsupportedModelError(
                f"{self.name}: cost not strictly convex in alpha (quadratic coef {c2v})")
        alpha = -c1 / (2.0 * c2)
        hstar = c0 - ad.square(c1) / (4.0 * c2)
        return hstar, alpha


class PriceImpact(ModelSpec):
    name = "price_impact"
    interaction = "control-distribution"

    def __init__(self, params=None, T=1.0, m0=None):
        p = params or PriceImpactParams()
        super().__init__(T, p.sigma, m0 or GaussianInit(1.0, 0.25))
        self.p = p

    def drift(self, x, summary, alpha):
        return alpha

    def running_cost(self, x, summary, alpha):
        p = self.p
        abar = summary.require("control_mean")
        return (0.5 * p.c_alpha * ad.square(alpha)
                + 0.5 * p.c_x * ad.square(x) - p.gamma * x * abar)

    def terminal_cost(self, x, summary):
        return 0.5 * self.p.c_g * ad.square(x)

    def control_quadratic(self, x, summary, p):
        m = self.p
        abar = summary.require("control_mean")
        return (0.5 * m.c_alpha, p, 0.5 * m.c_x * ad.square(x) - m.gamma * x * abar)


class CooperativePriceImpact(PriceImpact):
    """Price impact with the aggregate-trading effect internalized.

    Each unit of own trading moves the price for everyone, which at the
    social optimum is worth gamma*state_mean per unit of alpha. Adding
    -gamma*state_mean*alpha to the running cost turns the cooperative
    problem into a standard fixed-point problem with minimizer
    alpha* = (gamma*state_mean - p)/c_alpha, which is how the grid oracle
    solves the cooperative version. Costs reported to the user should use
    the parent's running_cost (the physical cost), not this one.
    """

    name = "price_impact_coop"

    def running_cost(self, x, summary, alpha):
        xbar = summary.require("state_mean")
        return (super().running_cost(x, summary, alpha)
                - self.p.gamma * xbar * alpha)

    def control_quadratic(self, x, summary, p):
        xbar = summary.require("state_mean")
        c2, c1, c0 = super().control_quadratic(x, summary, p)
        return (c2, c1 - self.p.gamma * xbar, c0)


class SystemicRisk(ModelSpec):
    name = "systemic_risk"
    interaction = "state-distribution"
    common_noise = True

    def __init__(self, params=None, T=0.5, m0=None):
        p = params or SystemicRiskParams()
        super().__init__(T, p.sigma, m0 or GaussianInit(0.0, 0.25))
        self.p = p
        self.rho = p.rho

    def drift(self, x, summary, alpha):
        mbar = summary.require("state_mean")
        return self.p.a * (mbar - x) + alpha

    def running_cost(self, x, summary, alpha):
        p = self.p
        mbar = summary.require("state_mean")
        gap = mbar - x
        return 0.5 * ad.square(alpha) - p.q * alpha * gap + 0.5 * p.eps * ad.square(gap)

    def terminal_cost(self, x, summary):
        mbar = summary.require("state_mean")
        return 0.5 * self.p.c * ad.square(mbar - x)

    def control_quadratic(self, x, summary, p):
        m = self.p
        mbar = summary.require("state_mean")
        gap = mbar - x
        return (0.5,
                p - m.q * gap,
                m.a * gap * p + 0.5 * m.eps * ad.square(gap))


class CrowdedTrade(ModelSpec):
    name = "crowded_trade"
    interaction = "control-distribution"

    def __init__(self, params=None, T=1.0, m0=None):
        p = params or CrowdedTradeParams()
        super().__init__(T, p.sigma, m0 or GaussianInit(4.0, 0.3))
        self.p = p

    def drift(self, x, summary, alpha):
        return alpha

    def running_cost(self, x, summary, alpha):
        p = self.p
        mubar = summary.require("control_mean")
        return p.kappa * ad.square(alpha) + p.phi * ad.square(x) - p.gamma * mubar * x

    def terminal_cost(self, x, summary):
        return self.p.big_a * ad.square(x)

    def control_quadratic(self, x, summary, p):
        m = self.p
        mubar = summary.require("control_mean")
        return (m.kappa, p, m.phi * ad.square(x) - m.gamma * mubar * x)


def evaluate_running_cost(model, x, summary, alpha):
    return model.running_cost(x, summary, alpha)


def evaluate_drift(model, x, summary, alpha):
    return model.drift(x, summary, alpha)


def optimized_hamiltonian(model, x, summary, p):
    return model.optimized_hamiltonian(x, summary, p)


def build_model(name, overrides=None):
    """Registry entry point; overrides patch params / T / m0 moments."""
    ov = dict(overrides or {})
    m0_mean = ov.pop("m0_mean", None)
    m0_var = ov.pop("m0_var", None)
    T = ov.pop("T", None)
    if name == "price_impact":
        params, cls, m0_def = PriceImpactParams, PriceImpact, (1.0, 0.25)
    elif name == "price_impact_coop":
        params, cls, m0_def = PriceImpactParams, CooperativePriceImpact, (1.0, 0.25)
    elif name == "systemic_risk":
        params, cls, m0_def = SystemicRiskParams, SystemicRisk, (0.0, 0.25)
    elif name == "crowded_trade":
        params, cls, m0_def = CrowdedTradeParams, CrowdedTrade, (4.0, 0.3)
    else:
        raise KeyError(f"unknown model {name!r}")
    p = params(**ov)
    m0 = GaussianInit(m0_mean if m0_mean is not None else m0_def[0],
                      m0_var if m0_var is not None else m0_def[1])
    return cls(p, **({"T": T} if T is not None else {}), m0=m0)


MODEL_NAMES = ("price_impact", "price_impact_coop", "systemic_risk", "crowded_trade")
