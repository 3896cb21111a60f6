import math

import numpy as np
import pytest

from lol.convnet import (
    ConvNetwork,
    conv_forward,
    conv_forward_batch,
    conv_g_component,
    conv_gradient,
    conv_r_component,
    init_conv_network,
    validate_conv_shape,
)
from lol.distribution import generate_dataset, make_params
from lol.network import Network, forward_pattern, logistic_loss
from lol.trainer import TrainerConfig, run, run_s, stream


def conv_setup(seed=0, d=12, k=4, n=60, m=32):
    params = make_params(
        d=d, kappa=0.5, q0=0.25,
        overrides={"p0": 0.25, "r": 0.2, "q_support": d // k},
        seed=seed,
    )
    ds = generate_dataset(params, n, stream(seed, 0))
    return params, ds


def test_conv_k1_single_patch_equals_pattern_forward():
    rng = np.random.default_rng(0)
    m, d = 16, 6
    net = init_conv_network(m, d, 1, tau0=0.4, rng=rng)
    assert net.F.shape == (m, 2 * d)
    host = Network(
        m=m, d=d, u=net.u, W=np.zeros((m // 2, d)), V=np.zeros((m // 2, d))
    )
    for _ in range(20):
        x = rng.standard_normal(2 * d)
        assert conv_forward(net, x) == pytest.approx(
            forward_pattern(host, net.F, net.F, x), rel=1e-12, abs=1e-15
        )


def test_conv_patch_zeroing_removes_exactly_that_term():
    rng = np.random.default_rng(1)
    m, d, k = 24, 12, 4
    net = init_conv_network(m, d, k, tau0=0.3, rng=rng)
    w = net.patch_width
    x = rng.standard_normal(2 * d)
    full = conv_forward(net, x)
    for j in range(k):
        xz = x.copy()
        xz[j * w : (j + 1) * w] = 0.0
        patch_term = float(
            net.u2[j] @ np.maximum(net.F @ x[j * w : (j + 1) * w], 0.0)
        )
        assert conv_forward(net, xz) == pytest.approx(
            full - patch_term, rel=1e-12, abs=1e-14
        )


def test_conv_component_additivity_on_supported_data():
    params, ds = conv_setup(seed=2)
    rng = np.random.default_rng(3)
    net = init_conv_network(32, params.d, 4, tau0=0.3, rng=rng)
    f = conv_forward_batch(net, ds.X)
    for i in range(ds.n):
        parts = conv_r_component(net, ds.X1[i]) + conv_g_component(net, ds.X2[i])
        assert abs(f[i] - parts) <= 1e-12 * (abs(parts) + 1)


def test_conv_g_homogeneity():
    params, ds = conv_setup(seed=4)
    rng = np.random.default_rng(5)
    net = init_conv_network(32, params.d, 4, tau0=0.3, rng=rng)
    x2 = ds.X2[ds.m2[0]]
    for c in (0.3, 1.7):
        assert conv_g_component(net, c * x2) == pytest.approx(
            c * conv_g_component(net, x2), rel=1e-12
        )


def test_conv_gradient_matches_finite_differences():
    params, ds = conv_setup(seed=6, d=8, k=2, n=30)
    rng = np.random.default_rng(7)
    net = init_conv_network(16, params.d, 2, tau0=0.5, rng=rng)
    G = conv_gradient(net, ds)
    Xnk = ds.X.reshape(ds.n * net.k, net.patch_width)
    pre = Xnk @ net.F.T  # (n*k, channels)

    def full_loss():
        f = conv_forward_batch(net, ds.X)
        return float(np.mean(logistic_loss(f, ds.y)))

    h = 1e-6
    checked = 0
    for _ in range(200):
        ch = int(rng.integers(0, net.channels))
        col = int(rng.integers(0, net.patch_width))
        live = np.abs(pre[:, ch]) > 1e-4
        dead = ~live & (np.abs(pre[:, ch]) > 0)
        if dead.any():
            continue  # near a kink on some patch with nonzero input
        orig = net.F[ch, col]
        net.F[ch, col] = orig + h
        up = full_loss()
        net.F[ch, col] = orig - h
        dn = full_loss()
        net.F[ch, col] = orig
        fd = (up - dn) / (2 * h)
        an = G[ch, col]
        if abs(fd) < 1e-12 and abs(an) < 1e-12:
            checked += 1
        else:
            assert abs(fd - an) / max(abs(fd), abs(an)) < 1e-5
            checked += 1
        if checked >= 20:
            break
    assert checked >= 20


def test_conv_shape_validation():
    with pytest.raises(ValueError):
        validate_conv_shape(32, 10, 3)
    with pytest.raises(ValueError):
        validate_conv_shape(30, 12, 4)
    validate_conv_shape(32, 12, 4)


def test_conv_trainer_requires_narrow_ray_support():
    params = make_params(
        d=12, kappa=0.5, q0=0.25, overrides={"p0": 0.25, "r": 0.2}, seed=8
    )
    ds = generate_dataset(params, 40, stream(8, 0))
    cfg = TrainerConfig(
        m=16, eta1=0.5, eta2=0.05, lam=1e-3, tau0=0.05,
        algorithm="s", model="conv", conv_k=4, max_iters=10, seed=8,
    )
    with pytest.raises(ValueError, match="q_support"):
        run_s(cfg, ds)


def test_conv_k1_run_dispatches_to_dense_bitwise():
    params, ds = conv_setup(seed=9, k=1)
    test = generate_dataset(params, 100, stream(9, 1))
    base = dict(
        m=16, eta1=0.5, eta2=0.05, lam=1e-3, tau0=0.05,
        algorithm="s", max_iters=60, eval_every=20, seed=9,
    )
    s_dense, t_dense = run(TrainerConfig(model="block_dense", **base), ds, test)
    s_conv, t_conv = run(
        TrainerConfig(model="conv", conv_k=1, **base), ds, test
    )
    assert isinstance(s_conv.net, Network)
    assert np.array_equal(s_dense.net.W, s_conv.net.W)
    assert np.array_equal(s_dense.net.V, s_conv.net.V)
    assert [r.__dict__ for r in t_dense] == [r.__dict__ for r in t_conv]


def test_conv_run_decomposition_and_determinism():
    params, ds = conv_setup(seed=10)
    test = generate_dataset(params, 80, stream(10, 1))
    cfg = TrainerConfig(
        m=32, eta1=0.5, eta2=0.05, lam=1e-3, tau0=0.05,
        algorithm="s", model="conv", conv_k=4,
        max_iters=120, eval_every=30, seed=10,
    )
    s1, t1 = run(cfg, ds, test)
    s2, t2 = run(cfg, ds, test)
    assert isinstance(s1.net, ConvNetwork)
    assert np.array_equal(s1.net.F, s2.net.F)
    assert [r.__dict__ for r in t1] == [r.__dict__ for r in t2]
    drift = np.max(np.abs(s1.net.F - s1.net_bar.F - s1.net_tilde.F))
    assert drift < 1e-9
    assert t1[-1].w_bar_fro == t1[-1].v_bar_fro  # shared filters convention


def test_conv_mitigation_runs():
    from lol.trainer import MitigationConfig, run_mitigation

    params, ds = conv_setup(seed=11)
    cfg = TrainerConfig(
        m=32, eta1=0.5, eta2=0.05, lam=1e-3, tau0=0.05,
        algorithm="mitigation", model="conv", conv_k=4,
        mitigation=MitigationConfig(tau_act_init=0.1, anneal_at={"iteration": 20}),
        max_iters=50, eval_every=25, seed=11,
    )
    state, trace = run_mitigation(cfg, ds)
    assert state.t0 == 20
    assert all(np.isfinite(r.train_loss) for r in trace)
