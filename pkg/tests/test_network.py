import json
import math

import numpy as np
import pytest

from lol.distribution import generate_dataset, make_params
from lol.network import (
    Network,
    batch_loss,
    forward,
    forward_batch,
    forward_pattern,
    forward_pattern_batch,
    g_component,
    gradient,
    init_network,
    logistic_loss,
    loss_derivative,
    network_from_json,
    network_to_json,
    r_component,
    regularized_loss,
    zero_network,
)


def small_dataset(seed=0, d=10, n=40, r=0.1):
    p = make_params(
        d=d, kappa=0.5, q0=0.25, overrides={"p0": 0.25, "r": r}, seed=seed
    )
    return p, generate_dataset(p, n, np.random.default_rng(seed + 1000))


def test_init_network_statistics():
    rng = np.random.default_rng(0)
    net = init_network(m=256, d=64, tau0=0.07, rng=rng)
    entries = np.concatenate([net.W.ravel(), net.V.ravel()])
    assert np.var(entries) == pytest.approx(0.07**2, rel=0.05)
    assert abs(np.linalg.norm(net.u) - 1.0) < 1e-15
    assert set(np.unique(np.abs(net.u))) == {1 / math.sqrt(256)}
    U = net.U
    assert not U[:128, 64:].any()
    assert not U[128:, :64].any()


def test_init_network_rejects_bad_args():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        init_network(m=3, d=4, tau0=0.1, rng=rng)
    with pytest.raises(ValueError):
        init_network(m=4, d=4, tau0=0.0, rng=rng)
    with pytest.raises(ValueError):
        init_network(m=4, d=4, tau0=-1.0, rng=rng)


def test_forward_two_neuron_hand_example():
    d = 3
    net = Network(
        m=2,
        d=d,
        u=np.array([1 / math.sqrt(2), -1 / math.sqrt(2)]),
        W=np.array([[1.0, 0.0, 0.0]]),
        V=np.array([[1.0, 0.0, 0.0]]),
    )
    x = np.array([2.0, 0, 0, 3.0, 0, 0])
    assert forward(net, x) == pytest.approx(-1 / math.sqrt(2), rel=1e-15)
    assert forward(net, x) == pytest.approx(-0.70711, abs=5e-6)
    assert forward_pattern(net, net.U, net.U, x) == forward(net, x)


def test_forward_pattern_zero_weights():
    rng = np.random.default_rng(1)
    net = init_network(m=16, d=5, tau0=0.3, rng=rng)
    x = rng.standard_normal(10)
    assert forward_pattern(net, net.U, 0.0, x) == 0.0


def test_forward_pattern_linear_in_weights():
    rng = np.random.default_rng(2)
    net = init_network(m=32, d=6, tau0=0.2, rng=rng)
    A = rng.standard_normal((32, 12))
    B1 = rng.standard_normal((32, 12))
    B2 = rng.standard_normal((32, 12))
    for _ in range(20):
        x = rng.standard_normal(12)
        lhs = forward_pattern(net, A, B1 + B2, x)
        rhs = forward_pattern(net, A, B1, x) + forward_pattern(net, A, B2, x)
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_forward_pattern_shape_mismatch():
    rng = np.random.default_rng(3)
    net = init_network(m=8, d=4, tau0=0.1, rng=rng)
    with pytest.raises(ValueError):
        forward_pattern(net, net.U, net.U, np.zeros(5))


def test_pattern_coupling_shrinks_with_width():
    # patterns from noise weights approximate patterns from noise + signal
    # weights better as the width grows, at fixed signal norm
    d2 = 32
    tau0 = 0.5
    sig = np.random.default_rng(4).standard_normal((1, d2))
    meds = []
    for m in (2**8, 2**10, 2**12):
        rng = np.random.default_rng(5)
        tilde = tau0 * rng.standard_normal((m, d2))
        u = (2 * rng.integers(0, 2, size=m) - 1) / math.sqrt(m)
        bar = np.tile(sig, (m, 1))
        bar *= 3.0 / np.linalg.norm(bar)
        net = Network(m=m, d=d2 // 2, u=u, W=np.zeros((m // 2, 1)), V=np.zeros((m // 2, 1)))
        gaps = []
        xr = np.random.default_rng(6)
        for _ in range(100):
            x = xr.standard_normal(d2)
            gaps.append(
                abs(
                    forward_pattern(net, tilde + bar, bar, x)
                    - forward_pattern(net, tilde, bar, x)
                )
            )
        meds.append(np.median(gaps))
    assert meds[0] > meds[1] > meds[2]


def test_component_additivity_and_homogeneity():
    rng = np.random.default_rng(7)
    net = init_network(m=64, d=9, tau0=0.4, rng=rng)
    for _ in range(50):
        x = rng.standard_normal(18)
        f = forward(net, x)
        parts = g_component(net, x[9:]) + r_component(net, x[:9])
        assert abs(f - parts) <= 1e-12 * (abs(parts) + 1)
        c = rng.random() * 5
        assert g_component(net, c * x[9:]) == pytest.approx(
            c * g_component(net, x[9:]), rel=1e-12, abs=1e-15
        )
        assert r_component(net, c * x[:9]) == pytest.approx(
            c * r_component(net, x[:9]), rel=1e-12, abs=1e-15
        )
    assert g_component(net, np.zeros(9)) == 0.0


def test_logistic_loss_anchors():
    assert logistic_loss(0.0, 1) == pytest.approx(math.log(2), rel=1e-15)
    assert logistic_loss(0.0, -1) == pytest.approx(math.log(2), rel=1e-15)
    assert loss_derivative(0.0, 1) == -0.5
    assert loss_derivative(0.0, -1) == 0.5
    assert logistic_loss(50.0, 1) < 1e-20
    assert logistic_loss(-50.0, 1) == pytest.approx(50.0, abs=1e-9)
    assert logistic_loss(-1000.0, 1) == 1000.0  # no overflow
    s = loss_derivative(np.array([-3.0, 0.0, 3.0]), np.array([1, 1, 1]))
    assert np.all(np.abs(s) < 1.0) and np.all(np.abs(s) > 0.0)


def test_batch_loss_zero_network():
    _, ds = small_dataset(seed=10)
    net = zero_network(m=8, d=10)
    assert batch_loss(net, ds) == pytest.approx(math.log(2), abs=1e-12)
    assert regularized_loss(net, ds, lam=0.5) == pytest.approx(math.log(2), abs=1e-12)


def test_batch_loss_subset_equals_component_loss():
    p, ds = small_dataset(seed=11)
    rng = np.random.default_rng(12)
    net = init_network(m=32, d=10, tau0=0.3, rng=rng)
    # on examples with x1 = 0 the full forward equals the block-2 component
    from lol.network import g_component_batch

    idx = ds.m1_bar
    f = forward_batch(net, ds.X1[idx], ds.X2[idx])
    g = g_component_batch(net, ds.X2[idx])
    assert np.allclose(f, g, rtol=1e-12, atol=1e-15)
    full = batch_loss(net, ds, subset=idx)
    gl = float(np.mean(logistic_loss(g, ds.y[idx])))
    assert full == pytest.approx(gl, rel=1e-12)


def test_batch_loss_empty_subset_rejected():
    _, ds = small_dataset(seed=13)
    net = zero_network(m=4, d=10)
    with pytest.raises(ValueError):
        batch_loss(net, ds, subset=np.array([], dtype=int))


def finite_difference_check(net, ds, rng, n_coords=20, h=1e-6, kink_tol=1e-4):
    """Central finite differences on random in-block coordinates.

    Skips rows whose pre-activation sits within kink_tol of zero on any
    example carrying that block, where the loss is not differentiable.
    Zero-block examples contribute a constant zero to both sides and are
    ignored by the filter.
    """

    def loss_of(netx):
        return batch_loss(netx, ds)

    G = gradient(net, ds)
    checked = 0
    attempts = 0
    S1 = net.W @ ds.X1[ds.m1].T
    S2 = net.V @ ds.X2[ds.m2].T
    while checked < n_coords and attempts < 50 * n_coords:
        attempts += 1
        i = int(rng.integers(0, net.m))
        j = int(rng.integers(0, net.d))
        if i < net.n_w:
            if np.min(np.abs(S1[i])) < kink_tol:
                continue
            block, row, col = net.W, i, j
        else:
            if np.min(np.abs(S2[i - net.n_w])) < kink_tol:
                continue
            block, row, col = net.V, i - net.n_w, j
        orig = block[row, col]
        block[row, col] = orig + h
        up = loss_of(net)
        block[row, col] = orig - h
        dn = loss_of(net)
        block[row, col] = orig
        fd = (up - dn) / (2 * h)
        col_full = j if i < net.n_w else net.d + j
        an = G[i, col_full]
        if abs(fd) < 1e-12 and abs(an) < 1e-12:
            checked += 1
            continue
        assert abs(fd - an) / max(abs(fd), abs(an)) < 1e-5
        checked += 1
    assert checked == n_coords


def test_gradient_matches_finite_differences():
    p, ds = small_dataset(seed=14, d=8, n=25)
    rng = np.random.default_rng(15)
    net = init_network(m=16, d=8, tau0=0.5, rng=rng)
    finite_difference_check(net, ds, rng)


def test_gradient_p_only_dataset_leaves_v_rows_zero():
    p = make_params(
        d=10, kappa=0.5, q0=0.01, overrides={"p0": 1 - 0.01 - 1e-12}, seed=16
    )
    ds = generate_dataset(p, 60, np.random.default_rng(17))
    keep = [i for i in range(ds.n) if not ds.X2[i].any()]
    net = init_network(m=24, d=10, tau0=0.3, rng=np.random.default_rng(18))
    G = gradient(net, ds, subset=np.array(keep))
    assert not G[net.n_w :, :].any()


def test_gradient_row_norm_bound():
    rng = np.random.default_rng(19)
    for trial in range(100):
        p, ds = small_dataset(seed=100 + trial, d=6, n=15)
        net = init_network(m=8, d=6, tau0=float(rng.random() + 0.05), rng=rng)
        G = gradient(net, ds)
        max_x = np.max(np.linalg.norm(np.hstack([ds.X1, ds.X2]), axis=1))
        row_norms = np.linalg.norm(G, axis=1)
        assert np.all(row_norms <= max_x / math.sqrt(net.m) + 1e-15)


def test_forward_pattern_batch_matches_scalar():
    rng = np.random.default_rng(20)
    net = init_network(m=12, d=5, tau0=0.4, rng=rng)
    A = rng.standard_normal((12, 10))
    B = rng.standard_normal((12, 10))
    X = rng.standard_normal((7, 10))
    batch = forward_pattern_batch(net, A, B, X)
    singles = [forward_pattern(net, A, B, x) for x in X]
    assert np.allclose(batch, singles, rtol=1e-12)


def test_checkpoint_round_trip_bitwise():
    rng = np.random.default_rng(21)
    net = init_network(m=20, d=7, tau0=0.2, rng=rng)
    text = network_to_json(net)
    back = network_from_json(text)
    assert back.m == net.m and back.d == net.d and back.n_w == net.n_w
    assert np.array_equal(back.u, net.u)
    assert np.array_equal(back.W, net.W)
    assert np.array_equal(back.V, net.V)
    assert network_to_json(back) == text
