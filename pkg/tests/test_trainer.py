import math

import numpy as np
import pytest

from lol.distribution import Dataset, Example, Kind, QDirection, generate_dataset, make_params
from lol.network import Network, batch_loss
from lol.trainer import (
    MitigationConfig,
    TrainerConfig,
    init_state,
    load_checkpoint,
    resume,
    run,
    run_ls,
    run_mitigation,
    run_s,
    save_checkpoint,
    solve_noise_std,
    step,
    stream,
)


def tiny_setup(seed=0, d=12, n=60, m=32, **cfg_kw):
    params = make_params(
        d=d, kappa=0.5, q0=0.2, overrides={"p0": 0.2, "r": 0.15}, seed=seed
    )
    ds = generate_dataset(params, n, stream(seed, 0))
    test = generate_dataset(params, 200, stream(seed, 1))
    defaults = dict(
        m=m, eta1=0.5, eta2=0.05, lam=1e-3, tau0=0.05,
        epsilon1=0.05, epsilon2_prime=0.05, max_iters=200, eval_every=20,
        seed=seed,
    )
    defaults.update(cfg_kw)
    return params, ds, test, TrainerConfig(**defaults)


def test_solve_noise_std_closed_form():
    tau = solve_noise_std(0.01, 0.1, 1e-3)
    assert tau == pytest.approx(1.41418e-3, rel=1e-4)
    # substituting back satisfies the stationarity equation
    residual = abs((1 - 0.1 * 1e-3) ** 2 * 0.01**2 + 0.1**2 * tau**2 - 0.01**2)
    assert residual < 1e-15 * 0.01**2


def test_solve_noise_std_small_decay_limit():
    eta1 = 0.1
    lam = 1e-5  # eta1 * lam = 1e-6
    tau = solve_noise_std(0.02, eta1, lam)
    assert tau == pytest.approx(0.02 * math.sqrt(2 * lam / eta1), rel=0.01)


def test_solve_noise_std_rejects_boundary():
    with pytest.raises(ValueError):
        solve_noise_std(0.01, 1.0, 1.0)
    with pytest.raises(ValueError):
        solve_noise_std(0.01, 2.0, 0.5)
    with pytest.raises(ValueError):
        solve_noise_std(0.01, 0.1, 0.0)


def test_plain_gd_descends_on_convex_probe():
    # tau_xi = 0, lam = 0: one example, one always-active neuron, so the loss
    # is convex in the weights and small-step GD is monotone
    params = make_params(d=4, kappa=0.5, q0=0.2, seed=1)
    x1 = np.array([0.5, 0.2, 0.1, 0.05])
    ex = Example(x1, np.zeros(4), 1, Kind.P_ONLY, QDirection.NONE, 0.0)
    ds = Dataset(params, [ex])
    cfg = TrainerConfig(
        m=2, eta1=1.0, eta2=0.5, lam=0.0, tau0=0.1, tau_xi=0.0, seed=5
    )
    net = Network(
        m=2, d=4,
        u=np.array([1 / math.sqrt(2), -1 / math.sqrt(2)]),
        W=np.array([[1.0, 0.0, 0.0, 0.0]]),
        V=np.zeros((1, 4)),
    )
    state = init_state(cfg, ds)
    state.net = net
    state.net_tilde = net.copy()
    from lol.trainer import _zeros_like_net

    state.net_bar = _zeros_like_net(net)
    losses = [batch_loss(state.net, ds)]
    for _ in range(50):
        step(state, cfg, ds, gamma=0.1)
        losses.append(batch_loss(state.net, ds))
    assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))


def test_noise_process_stationary_and_decomposed():
    # with tau_xi from the stationarity equation, the entrywise variance of
    # the accumulated-noise iterate stays at tau0^2
    params = make_params(d=64, kappa=0.5, q0=0.3, overrides={"r": 0.1}, seed=2)
    ds = generate_dataset(params, 24, stream(2, 0))
    cfg = TrainerConfig(
        m=512, eta1=0.5, eta2=0.05, lam=1e-3, tau0=0.05, seed=7, max_iters=10**9
    )
    state = init_state(cfg, ds)
    for _ in range(2000):
        step(state, cfg, ds, gamma=cfg.eta1)
    tilde = np.concatenate(
        [state.net_tilde.W.ravel(), state.net_tilde.V.ravel()]
    )
    assert tilde.size >= 3e4
    assert np.var(tilde) == pytest.approx(cfg.tau0**2, rel=0.02)
    drift = max(
        np.max(np.abs(state.net.W - state.net_bar.W - state.net_tilde.W)),
        np.max(np.abs(state.net.V - state.net_bar.V - state.net_tilde.V)),
    )
    assert drift < 1e-9


def test_run_s_deterministic_and_trace_shape():
    _, ds, test, cfg = tiny_setup(seed=3, algorithm="s")
    s1, t1 = run_s(cfg, ds, test)
    s2, t2 = run_s(cfg, ds, test)
    assert s1.t == s2.t
    assert np.array_equal(s1.net.W, s2.net.W)
    assert np.array_equal(s1.net.V, s2.net.V)
    assert [r.__dict__ for r in t1] == [r.__dict__ for r in t2]
    # capped run: ceil(max_iters / eval_every) + 1 records
    assert not s1.converged
    assert len(t1) == math.ceil(cfg.max_iters / cfg.eval_every) + 1
    assert t1[-1].t == cfg.max_iters
    assert all(r.lr == cfg.eta2 for r in t1)


def test_run_s_stops_immediately_when_threshold_trivial():
    _, ds, test, cfg = tiny_setup(
        seed=4, algorithm="s", epsilon2_prime=math.log(2) + 1
    )
    state, trace = run_s(cfg, ds, test)
    assert state.converged
    assert state.t == 0
    assert len(trace) == 1
    assert state.t0 is None


def test_run_ls_initial_loss_near_log2_and_phase_entered():
    _, ds, test, cfg = tiny_setup(seed=5, algorithm="ls", max_iters=50)
    state, trace = run_ls(cfg, ds, test)
    assert abs(trace[0].train_loss - math.log(2)) < 0.15
    # threshold eps1 + q*log2 < log2 here, so phase I is not skipped
    assert state.t0 is None or state.t0 >= 1


def test_run_ls_all_q_dataset_anneals_at_one():
    params = make_params(
        d=10, kappa=0.5, q0=1 - 2e-12, overrides={"p0": 1e-12, "r": 0.15}, seed=6
    )
    ds = generate_dataset(params, 50, stream(6, 0))
    assert ds.q_emp == 1.0
    cfg = TrainerConfig(
        m=16, eta1=0.5, eta2=0.05, lam=1e-3, tau0=0.05,
        epsilon1=0.05, epsilon2=2.0, algorithm="ls", seed=6, max_iters=100,
    )
    state, trace = run_ls(cfg, ds)
    assert state.t0 == 1
    assert state.converged
    assert state.t == 1


def test_run_ls_phase_bookkeeping():
    _, ds, test, cfg = tiny_setup(
        seed=7, algorithm="ls", eta1=0.8, eta2=0.05, max_iters=4000,
        epsilon1=0.2, epsilon2=0.18, eval_every=25,
    )
    state, trace = run_ls(cfg, ds, test)
    assert state.t0 is not None and state.t0 >= 1
    # learning rate never increases along the trace
    lrs = [r.lr for r in trace]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    for r in trace:
        if r.t < state.t0:
            assert r.lr == cfg.eta1
        else:
            assert r.lr == cfg.eta2


def test_mitigation_zero_noise_bitwise_equals_run_s():
    _, ds, test, cfg_s = tiny_setup(seed=8, algorithm="s", max_iters=150)
    _, _, _, cfg_m = tiny_setup(
        seed=8, algorithm="mitigation", max_iters=150,
    )
    cfg_m.mitigation = MitigationConfig(
        tau_act_init=0.0, tau_act_final=0.0, anneal_at={"iteration": 0}
    )
    ss, ts = run_s(cfg_s, ds, test)
    sm, tm = run_mitigation(cfg_m, ds, test)
    assert ss.t == sm.t
    assert np.array_equal(ss.net.W, sm.net.W)
    assert np.array_equal(ss.net.V, sm.net.V)
    assert np.array_equal(ss.net_tilde.W, sm.net_tilde.W)
    assert [r.__dict__ for r in ts] == [r.__dict__ for r in tm]


def test_mitigation_noisy_forward_mean_is_stable():
    _, ds, test, cfg = tiny_setup(seed=9, algorithm="mitigation", max_iters=5)
    cfg.mitigation = MitigationConfig(tau_act_init=0.3)
    state, _ = run_mitigation(cfg, ds, test)
    engine = state._engine
    draws = np.empty(1000)
    for i in range(1000):
        state.last_loss = engine.forward_loss(state, 0.3)
        f = engine._cache[3]
        draws[i] = f[0]
        engine._cache = None
    se = np.std(draws) / math.sqrt(len(draws))
    assert se < 0.05 * np.std(draws)
    a, b = draws[:500], draws[500:]
    gap = abs(a.mean() - b.mean())
    assert gap < 4 * np.std(draws) * math.sqrt(2 / 500)


def test_mitigation_records_noise_anneal_iteration():
    _, ds, test, cfg = tiny_setup(seed=10, algorithm="mitigation", max_iters=80)
    cfg.mitigation = MitigationConfig(tau_act_init=0.2, anneal_at={"iteration": 30})
    state, trace = run_mitigation(cfg, ds, test)
    assert state.t0 == 30
    assert state.phase in ("annealed", "done")


def test_checkpoint_resume_bitwise_equivalent():
    for algo, extra in (
        ("s", {}),
        ("mitigation", {"mitigation": MitigationConfig(tau_act_init=0.1,
                                                       anneal_at={"iteration": 25})}),
    ):
        _, ds, test, cfg_short = tiny_setup(
            seed=11, algorithm=algo, max_iters=40, **extra
        )
        _, _, _, cfg_long = tiny_setup(
            seed=11, algorithm=algo, max_iters=90, **extra
        )
        short_state, _ = run(cfg_short, ds, test)
        blob = save_checkpoint(short_state)
        restored = load_checkpoint(blob, cfg_long, ds, test)
        resumed_state, resumed_trace = resume(cfg_long, ds, restored, test)
        straight_state, straight_trace = run(cfg_long, ds, test)
        assert np.array_equal(resumed_state.net.W, straight_state.net.W)
        assert np.array_equal(resumed_state.net.V, straight_state.net.V)
        assert np.array_equal(resumed_state.net_bar.W, straight_state.net_bar.W)
        assert np.array_equal(
            resumed_state.net_tilde.V, straight_state.net_tilde.V
        )
        # the resumed trace must reproduce the tail of the straight trace
        tail = [r for r in straight_trace if r.t >= 40]
        assert [r.__dict__ for r in resumed_trace] == [r.__dict__ for r in tail]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainerConfig(eta1=0.1, eta2=0.2).validate()
    with pytest.raises(ValueError):
        TrainerConfig(epsilon1=0.0).validate()
    with pytest.raises(ValueError):
        TrainerConfig(eta1=10.0, lam=0.2).validate()
    with pytest.raises(ValueError):
        TrainerConfig(algorithm="bogus").validate()
    cfg = TrainerConfig(algorithm="LargeThenAnneal", model="BlockDense")
    assert cfg.algorithm == "ls" and cfg.model == "block_dense"
    cfg2 = TrainerConfig.from_dict(
        {"algorithm": "SmallConstant", "lambda": 2e-4, "eta2": 1e-3}
    )
    assert cfg2.algorithm == "s" and cfg2.lam == 2e-4
    assert cfg2.to_dict()["lambda"] == 2e-4


def test_run_loss_checks_use_unregularized_loss():
    # stopping compares the plain mean loss, not the ridge-augmented one
    _, ds, test, cfg = tiny_setup(
        seed=12, algorithm="s", lam=0.5, eta1=1.0, eta2=0.05,
        epsilon2_prime=math.log(2) + 0.5, max_iters=50, tau_xi=0.01,
    )
    state, trace = run_s(cfg, ds, test)
    assert state.t == 0  # initial unregularized loss is already below
    assert trace[0].reg_loss > trace[0].train_loss
