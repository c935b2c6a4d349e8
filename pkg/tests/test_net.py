import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import mfglab.autodiff as ad
from mfglab import net


def test_param_count_2_64_64_1():
    arch = net.Architecture([2, 64, 64, 1])
    assert arch.param_count() == 4417


def test_init_deterministic_and_bounded():
    arch = net.Architecture([3, 10, 5, 1])
    t1 = net.init_params(arch, seed=42)
    t2 = net.init_params(arch, seed=42)
    assert np.array_equal(t1, t2)
    assert not np.array_equal(t1, net.init_params(arch, seed=43))
    for (W, b), (d_in, d_out) in zip(net.unpack(arch, t1),
                                     zip(arch.layers[:-1], arch.layers[1:])):
        lim = np.sqrt(6.0 / (d_in + d_out))
        assert np.all(np.abs(W) <= lim)
        assert np.all(b == 0.0)


def test_pack_unpack_roundtrip():
    arch = net.Architecture([2, 7, 3])
    theta = net.init_params(arch, seed=0) + 0.1
    assert np.array_equal(net.pack(arch, net.unpack(arch, theta)), theta)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    arch = net.Architecture([2, 16, 16, 1], out="exp")
    theta = net.init_params(arch, seed=5)
    theta[3] = np.pi  # something with a messy mantissa
    p = tmp_path / "net.ckpt"
    net.save_checkpoint(p, arch, theta, extra={"note": "test"})
    arch2, theta2, head = net.load_checkpoint(p)
    assert arch2 == arch
    assert np.array_equal(theta2, theta)
    assert head["note"] == "test"


def test_graph_and_numpy_forward_agree_bitwise():
    arch = net.Architecture([2, 12, 12, 1])
    theta = net.init_params(arch, seed=1)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 2))
    g = ad.Graph()
    nog = net.NetOnGraph(g, arch, theta)
    out = nog.forward(g.var(X))
    ref = net.forward_np(arch, theta, X)
    assert np.array_equal(out.value, ref)


def test_exp_head_positive_and_consistent():
    arch_id = net.Architecture([1, 8, 1])
    arch_exp = net.Architecture([1, 8, 1], out="exp")
    theta = net.init_params(arch_id, seed=3)
    X = np.linspace(-2, 2, 31).reshape(-1, 1)
    raw = net.forward_np(arch_id, theta, X)
    pos = net.forward_np(arch_exp, theta, X)
    assert np.all(pos > 0)
    assert np.allclose(pos, np.exp(raw), rtol=0, atol=0)


def test_flat_gradient_layout_matches_finite_differences():
    # differentiate through the flat vector interface end to end
    arch = net.Architecture([2, 6, 4, 1])
    theta = net.init_params(arch, seed=7)
    rng = np.random.default_rng(1)
    X = rng.normal(size=(25, 2))

    g = ad.Graph()
    nog = net.NetOnGraph(g, arch, theta)
    Xn = g.var(X)
    loss = ad.mean(ad.square(nog.forward(Xn)))
    r = ad.backward(loss, nog.leaves)
    flat = nog.flatten_grads(r.partials)
    assert flat.shape == (arch.param_count(),)

    def loss_np(th):
        return float(np.mean(net.forward_np(arch, th, X) ** 2))

    h = 1e-6
    idxs = rng.choice(arch.param_count(), size=12, replace=False)
    for i in idxs:
        tp = theta.copy()
        tp[i] += h
        up = loss_np(tp)
        tp[i] -= 2 * h
        dn = loss_np(tp)
        num = (up - dn) / (2 * h)
        assert flat[i] == pytest.approx(num, rel=2e-5, abs=1e-9)


def test_set_theta_updates_static_graph():
    arch = net.Architecture([1, 5, 1])
    t0 = net.init_params(arch, seed=0)
    t1 = net.init_params(arch, seed=9)
    X = np.linspace(-1, 1, 9).reshape(-1, 1)
    g = ad.Graph()
    nog = net.NetOnGraph(g, arch, t0)
    out = nog.forward(g.var(X))
    nog.set_theta(t1)
    g.recompute()
    assert np.array_equal(out.value, net.forward_np(arch, t1, X))


@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_hidden_unit_permutation_symmetry(seed, permseed):
    # permuting hidden units of one layer leaves the function unchanged
    arch = net.Architecture([1, 6, 6, 1])
    theta = net.init_params(arch, seed=seed)
    layers = net.unpack(arch, theta)
    perm = np.random.default_rng(permseed).permutation(6)
    (W1, b1), (W2, b2), (W3, b3) = [(w.copy(), b.copy()) for w, b in layers]
    W1p, b1p = W1[perm, :], b1[perm]
    W2p = W2[:, perm]
    theta_p = net.pack(arch, [(W1p, b1p), (W2p, b2), (W3, b3)])
    X = np.linspace(-2, 2, 17).reshape(-1, 1)
    a = net.forward_np(arch, theta, X)
    b = net.forward_np(arch, theta_p, X)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


def test_bad_shapes_rejected():
    with pytest.raises(ValueError):
        net.Architecture([2])
    with pytest.raises(ValueError):
        net.Architecture([2, 4, 1], out="softplus")
    arch = net.Architecture([2, 4, 1])
    with pytest.raises(ValueError):
        net.unpack(arch, np.zeros(3))
