import numpy as np
import pytest

import mfglab.autodiff as ad
from mfglab import particle as pt
from mfglab.models import GaussianInit, ModelSpec, build_model
from mfglab.net import Architecture, NetOnGraph, init_params


class _Ou(ModelSpec):
    """Mean-reverting test model: drift -x + alpha, no costs."""

    name = "ou_test"

    def __init__(self, T=0.5, sigma=0.5, m0=None):
        super().__init__(T=T, sigma=sigma, m0=m0 or GaussianInit(1.0, 0.09))

    def control_quadratic(self, x, summary, p):
        z = np.zeros_like(np.asarray(x, dtype=np.float64))
        return 1.0, z, z

    def drift(self, x, summary, alpha):
        return -np.asarray(x, dtype=np.float64) + alpha

    def running_cost(self, x, summary, alpha):
        return np.zeros_like(np.asarray(x, dtype=np.float64))

    def terminal_cost(self, x, summary):
        return np.zeros_like(np.asarray(x, dtype=np.float64))


def _zero_policy(t, x, mbar=None):
    return np.zeros_like(x)


def test_sample_noise_deterministic_in_seed():
    m = build_model("price_impact")
    a = pt.sample_noise(m, 100, 50, 7)
    b = pt.sample_noise(m, 100, 50, 7)
    assert np.array_equal(a.x0, b.x0)
    assert np.array_equal(a.dW, b.dW)
    c = pt.sample_noise(m, 100, 50, 8)
    assert not np.array_equal(a.dW, c.dW)


def test_sample_noise_tuple_seed_independent_streams():
    m = build_model("price_impact")
    a = pt.sample_noise(m, 50, 20, (7, 0))
    b = pt.sample_noise(m, 50, 20, (7, 1))
    assert not np.array_equal(a.dW, b.dW)
    with pytest.raises(ValueError):
        pt.philox_rng((1, 2, 3))
    with pytest.raises(ValueError):
        pt.philox_rng(-1)


def test_sample_noise_step_size_and_variance():
    # T=1 over 50 steps: dt = 0.02; increment variance within 3 SE of dt
    m = build_model("price_impact")
    s = pt.sample_noise(m, 2000, 50, 11)
    assert s.dt == 0.02
    n = s.dW.size
    assert abs(s.dW.var() - 0.02) < 3 * 0.02 * np.sqrt(2.0 / n)
    assert abs(s.dW.mean()) < 5 * np.sqrt(0.02 / n)


def test_sample_noise_common_path_present_only_with_common_noise():
    assert pt.sample_noise(build_model("price_impact"), 10, 10, 0).dW0 is None
    s = pt.sample_noise(build_model("systemic_risk"), 10, 10, 0)
    assert s.dW0 is not None and s.dW0.shape == (10,)


def test_rollout_no_drift_no_noise_constant():
    m = _Ou()
    noise = pt.NoiseSample(np.full(5, 2.0), np.zeros((5, 10)), None, 0.1)
    ens = pt.rollout(m, lambda t, x: np.asarray(x, float),  # alpha = x cancels -x
                     noise)
    assert np.all(ens.x == 2.0)


def test_rollout_constant_drift_exact_line():
    class Pushed(_Ou):
        def drift(self, x, summary, alpha):
            return np.full_like(np.asarray(x, dtype=np.float64), 0.7)
    noise = pt.NoiseSample(np.zeros(3), np.zeros((3, 20)), None, 0.05)
    ens = pt.rollout(Pushed(), _zero_policy, noise)
    assert np.allclose(ens.x, 0.7 * ens.t[None, :], atol=1e-14)


def test_rollout_ou_moments_match_closed_form():
    m = _Ou()
    noise = pt.sample_noise(m, 10_000, 200, 5)
    ens = pt.rollout(m, _zero_policy, noise)
    xT = ens.x[:, -1]
    n = xT.size
    mean_th = np.exp(-0.5) * 1.0
    var_th = 0.25 * (1 - np.exp(-1.0)) / 2.0 + 0.09 * np.exp(-1.0)
    assert abs(xT.mean() - mean_th) < 3 * xT.std() / np.sqrt(n)
    assert abs(xT.var() - var_th) < 3 * xT.var() * np.sqrt(2.0 / n)


def test_rollout_weak_error_monotone_in_steps():
    # noise-free reduction: a single deterministic particle, Euler error
    # against e^{-T} strictly decreasing as steps double
    m = _Ou()
    errs = []
    for n_steps in (25, 50, 100, 200):
        noise = pt.NoiseSample(np.array([1.0]), np.zeros((1, n_steps)), None,
                               0.5 / n_steps)
        ens = pt.rollout(m, _zero_policy, noise)
        errs.append(abs(ens.x[0, -1] - np.exp(-0.5)))
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_rollout_exchangeability():
    m = build_model("systemic_risk")
    arch = Architecture([3, 8, 1])
    theta = init_params(arch, 0)
    noise = pt.sample_noise(m, 64, 20, 42)
    base = pt.rollout(m, pt.policy_from_net(arch, theta), noise)
    perm = np.random.default_rng(1).permutation(64)
    permed = pt.rollout(m, pt.policy_from_net(arch, theta), noise.permuted(perm))
    assert np.max(np.abs(permed.x - base.x[perm])) < 1e-12


def test_rollout_common_noise_mbar_is_ensemble_mean():
    m = build_model("systemic_risk")
    noise = pt.sample_noise(m, 200, 30, 9)
    ens = pt.rollout(m, _zero_policy, noise)
    # per-step mean of the strided column, bitwise (x.mean(axis=0) sums in a
    # different order and can drift by an ulp)
    recomputed = np.array([ens.x[:, k].mean() for k in range(31)])
    assert np.array_equal(ens.mbar, recomputed)
    # summaries computed before the step: entry k describes state at t_k
    assert ens.summaries[0].state_mean == ens.x[:, 0].mean()


def test_rollout_full_common_noise_variance_recursion():
    # rho=1: the shared shock cancels in the gaps, so the cross-sectional
    # variance contracts deterministically by (1 - a dt)^2 each step
    m = build_model("systemic_risk", {"rho": 1.0})
    noise = pt.sample_noise(m, 500, 40, 3)
    ens = pt.rollout(m, _zero_policy, noise)
    v = ens.x.var(axis=0)
    pred = v[0] * (1.0 - m.p.a * noise.dt) ** (2 * np.arange(41))
    assert np.max(np.abs(v - pred) / pred) < 1e-12


def test_rollout_nan_aborts_with_step_index():
    class Explode(_Ou):
        def drift(self, x, summary, alpha):
            return np.asarray(x, dtype=np.float64) ** 3 * 1e4
    m = Explode(m0=GaussianInit(1.0, 0.01))
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(pt.ParticleBlowUpError) as exc:
            pt.rollout(m, _zero_policy, pt.sample_noise(m, 10, 50, 1))
    assert 0 < exc.value.step <= 50
    assert "step" in str(exc.value)


def test_graph_rollout_matches_numpy_bitwise():
    m = build_model("systemic_risk")
    arch = Architecture([3, 8, 8, 1])
    theta = init_params(arch, 0)
    noise = pt.sample_noise(m, 64, 20, 42)
    ens = pt.rollout(m, pt.policy_from_net(arch, theta), noise)
    g = ad.Graph()
    gr = pt.rollout_graph(g, m, NetOnGraph(g, arch, theta), noise)
    assert np.array_equal(np.stack([nd.value for nd in gr.x_nodes], axis=1), ens.x)
    assert np.array_equal(np.stack([nd.value for nd in gr.alpha_nodes], axis=1),
                          ens.alpha)
    assert gr.mbar_nodes[0].item() == ens.mbar[0]


def test_graph_rollout_no_common_noise_two_features():
    m = build_model("price_impact")
    arch = Architecture([2, 6, 1])
    theta = init_params(arch, 3)
    noise = pt.sample_noise(m, 32, 10, 2)
    ens = pt.rollout(m, pt.policy_from_net(arch, theta), noise)
    g = ad.Graph()
    gr = pt.rollout_graph(g, m, NetOnGraph(g, arch, theta), noise)
    assert gr.mbar_nodes is None
    assert np.array_equal(gr.x_nodes[-1].value, ens.x[:, -1])


def test_graph_rollout_set_noise_replays_fresh_sample():
    m = build_model("systemic_risk")
    arch = Architecture([3, 8, 1])
    theta = init_params(arch, 0)
    g = ad.Graph()
    net = NetOnGraph(g, arch, theta)
    gr = pt.rollout_graph(g, m, net, pt.sample_noise(m, 64, 20, 42))
    fresh = pt.sample_noise(m, 64, 20, 99)
    gr.set_noise(fresh)
    g.recompute()
    ens = pt.rollout(m, pt.policy_from_net(arch, theta), fresh)
    assert np.array_equal(np.stack([nd.value for nd in gr.x_nodes], axis=1), ens.x)


def test_rollout_differentiable_end_to_end():
    # gradient of mean terminal state w.r.t. a first-layer weight matches
    # a central finite difference through the whole rollout
    m = build_model("price_impact")
    arch = Architecture([2, 6, 1])
    theta = init_params(arch, 1)
    noise = pt.sample_noise(m, 40, 12, 4)

    def terminal_mean(th):
        ens = pt.rollout(m, pt.policy_from_net(arch, th), noise)
        return ens.x[:, -1].mean()

    g = ad.Graph()
    net = NetOnGraph(g, arch, theta)
    gr = pt.rollout_graph(g, m, net, noise)
    loss = ad.mean(gr.x_nodes[-1])
    flat = net.flatten_grads(ad.backward(loss, net.leaves).partials)

    h = 1e-6
    for j in (0, 7, 11):
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        fd = (terminal_mean(tp) - terminal_mean(tm)) / (2 * h)
        assert flat[j] == pytest.approx(fd, rel=2e-5, abs=1e-10)


def test_trajectory_csv_dump(tmp_path):
    m = build_model("price_impact")
    noise = pt.sample_noise(m, 6, 4, 0)
    ens = pt.rollout(m, _zero_policy, noise)
    path = tmp_path / "traj.csv"
    pt.save_trajectory_csv(str(path), ens, particles=[0, 3])
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "particle,step,t,x,alpha"
    assert len(lines) == 1 + 2 * 5
    first = lines[1].split(",")
    assert first[0] == "0" and float(first[3]) == ens.x[0, 0]
    # terminal rows carry no control
    assert lines[5].split(",")[4] == ""
