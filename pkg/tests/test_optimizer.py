import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import deepstorm.problems as problems_mod
from deepstorm.errors import CheckpointError, ConfigError, DivergenceError
from deepstorm.optimizer import (
    EstimatorConfig,
    RunConfig,
    Schedule,
    checkpoint_dict,
    estimate_vtilde,
    init,
    initial_lyapunov,
    k0_threshold,
    load_checkpoint,
    recommended_m0,
    run,
    run_dsgt,
    save_checkpoint,
    schedule_values,
    select_output_index,
    selection_weights,
    state_from_checkpoint,
    step,
)
from deepstorm.problems import agent_streams, full_gradient, make_quadratic, quadratic_from_samples
from deepstorm.topology import ChebyshevOperator, Graph, MixingMatrix, build_graph, laplacian_mixing, make_mixing


def operator(kind="ring", n=8, rounds=1, seed=0):
    return ChebyshevOperator(make_mixing(build_graph(kind, n, seed=seed)), rounds)


def dim_schedule(p, op, alpha=None, **kw):
    k0 = k0_threshold(op.rho_tilde)
    if alpha is None:
        alpha = min(k0 ** (1 / 3) / (32 * p.smoothness_L), (1 - op.rho_tilde) ** 2 * k0 ** (1 / 3) / (64 * p.smoothness_L))
    return Schedule("diminishing", alpha, L=p.smoothness_L, N=p.n_agents, rho_tilde=op.rho_tilde, k0=k0, **kw)


@pytest.fixture(scope="module")
def quad8():
    return make_quadratic(8, 3, seed=0, heterogeneity=1.0, samples_per_agent=20, lam=0.05)


# ---------------------------------------------------------------------------
# schedules


def test_constant_schedule_example():
    K = 1000
    # the first cap alone is not admissible: the second cap is at most half of it
    with pytest.raises(ConfigError, match=r"\(1-rho_tilde\)\^2 K\^\(1/3\)/\(64L\)"):
        Schedule("constant", K ** (1 / 3) / 32, L=1.0, N=4, horizon=K)
    alpha = K ** (1 / 3) / 64
    s = Schedule("constant", alpha, L=1.0, N=4, horizon=K)
    a, b = schedule_values(s, 0)
    assert a == pytest.approx(1 / 64, rel=1e-12)
    assert b == pytest.approx(144 * alpha**2 / (4 * K ** (2 / 3)), rel=1e-12)
    assert b == pytest.approx(144 / (64**2 * 4), rel=1e-12)
    assert 0 < b < 1
    assert schedule_values(s, 999) == (a, b)


def test_diminishing_sweep_k0_2():
    alpha = min(2 ** (1 / 3) / 32, 2 ** (1 / 3) / 64)
    s = Schedule("diminishing", alpha, L=1.0, N=4, rho_tilde=0.0, k0=2)
    prev = math.inf
    for k in list(range(0, 2000)) + list(range(2000, 100_001, 997)):
        a, b = schedule_values(s, k)
        a1 = alpha / (k + 3) ** (1 / 3)
        assert b == pytest.approx(1 - (k + 2) ** (1 / 3) / (k + 3) ** (1 / 3) + 48 * a1**2, rel=1e-9)
        assert 0 < b < 1
        assert a < prev
        prev = a
    assert schedule_values(s, 10**9)[1] < 1e-6


@pytest.mark.parametrize(
    "kwargs,match",
    [
        (dict(family="constant", alpha=1.0, L=1.0, N=4, horizon=1000), r"K\^\(1/3\)/\(32L\)"),
        (dict(family="constant", alpha=0.2, L=1.0, N=4, rho_tilde=0.5, horizon=1000), r"\(1-rho_tilde\)\^2 K"),
        (dict(family="diminishing", alpha=0.03, L=1.0, N=4, rho_tilde=0.5, k0=3), r"\(1-rho_tilde\)\^2 k0"),
        (dict(family="diminishing", alpha=0.001, L=1.0, N=4, rho_tilde=0.9, k0=3), r"k0 >= ceil"),
        (dict(family="diminishing", alpha=1.0, rho_tilde=0.0, k0=2, rule="practical", beta_coef=10.0), "practical"),
        (dict(family="constant", alpha=1.0, rule="manual", beta_coef=1.5), "manual"),
        (dict(family="weird", alpha=1.0), "family"),
        (dict(family="constant", alpha=-1.0, horizon=10), "alpha"),
    ],
)
def test_schedule_rejections(kwargs, match):
    with pytest.raises(ConfigError, match=match):
        Schedule(**kwargs)


def test_practical_rule_is_admissible_at_cap_minus():
    alpha, k0 = 300.0, 5
    cap = (k0 * (k0 + 1)) ** (1 / 3) / alpha**2
    s = Schedule("diminishing", alpha, k0=k0, rule="practical", beta_coef=0.999 * cap)
    assert 0 < schedule_values(s, 0)[1] < 1


@settings(max_examples=200, deadline=None)
@given(
    L=st.floats(1e-3, 1e3),
    N=st.integers(1, 64),
    K=st.integers(1, 10**6),
    rt=st.floats(0, 0.99),
    frac=st.floats(1e-3, 1.0),
    extra=st.integers(0, 50),
)
def test_valid_schedules_emit_valid_beta(L, N, K, rt, frac, extra):
    caps = [K ** (1 / 3) / (32 * L), (1 - rt) ** 2 * K ** (1 / 3) / (64 * L)]
    s = Schedule("constant", frac * min(caps), L=L, N=N, rho_tilde=rt, horizon=K)
    assert 0 < schedule_values(s, 0)[1] < 1
    k0 = k0_threshold(rt) + extra
    caps = [k0 ** (1 / 3) / (32 * L), (1 - rt) ** 2 * k0 ** (1 / 3) / (64 * L)]
    d = Schedule("diminishing", frac * min(caps), L=L, N=N, rho_tilde=rt, k0=k0)
    for k in (0, 1, 7, 1000, K):
        assert 0 < schedule_values(d, k)[1] < 1


def test_recommended_m0():
    assert recommended_m0(8, 1000) == 20
    assert recommended_m0(1, 1) == 1


# ---------------------------------------------------------------------------
# output selection


def test_single_iteration_selects_zero():
    s = Schedule("constant", 0.01, horizon=1)
    assert select_output_index(s, 1, "auto", np.random.default_rng(0)) == 0


def test_selection_weights():
    s = Schedule("diminishing", 0.01, rho_tilde=0.0, k0=5)
    w = selection_weights(s, 20)
    ref = np.array([(k + 5) ** (-1 / 3) for k in range(20)])
    np.testing.assert_allclose(w, ref / ref.sum(), rtol=1e-12)
    np.testing.assert_allclose(selection_weights(s, 20, "uniform"), np.full(20, 0.05))
    with pytest.raises(ConfigError):
        selection_weights(s, 20, "best")


# ---------------------------------------------------------------------------
# estimator config


def test_sigma_hat_sq():
    assert EstimatorConfig("v2", m=4).sigma_hat_sq(2.0, 100) == 1.0
    assert EstimatorConfig("v1_sg", m=8).sigma_hat_sq(2.0, 100) == 0.5
    assert EstimatorConfig("v1_svrg", m=3, snapshot_batch=6).sigma_hat_sq(1.0, 100) == pytest.approx(2.0)
    assert EstimatorConfig("v1_svrg", m=3).sigma_hat_sq(1.0, 60) == pytest.approx(1.1)


@pytest.mark.parametrize("kw", [dict(variant="v3"), dict(m=0), dict(m0="half"), dict(snapshot_period=0)])
def test_estimator_config_rejects(kw):
    with pytest.raises(ConfigError):
        EstimatorConfig(**kw)


def test_run_config_checks(quad8):
    op = operator()
    s = dim_schedule(quad8, op)
    with pytest.raises(ConfigError):
        RunConfig(operator("ring", 4), quad8, EstimatorConfig(), s, 10)
    with pytest.raises(ConfigError):
        RunConfig(op, quad8, EstimatorConfig(), s, 0)
    const = Schedule("constant", 1e-3, L=1.0, N=8, rho_tilde=op.rho_tilde, horizon=50)
    with pytest.raises(ConfigError, match="horizon"):
        RunConfig(op, quad8, EstimatorConfig(), const, 40)


# ---------------------------------------------------------------------------
# init and step


def test_init_full_batch_gives_full_gradient(quad8):
    op = operator()
    cfg = RunConfig(op, quad8, EstimatorConfig(m0="full"), dim_schedule(quad8, op), 5, init_scale=1.0)
    st_ = init(cfg)
    assert np.all(st_.X == st_.X[0])
    for i in range(8):
        np.testing.assert_array_equal(st_.D[i], full_gradient(quad8, i, st_.X[i]))
    np.testing.assert_allclose(st_.Y.mean(axis=0), st_.D.mean(axis=0), atol=1e-12)


def test_init_complete_graph_averages(quad8):
    op = ChebyshevOperator(laplacian_mixing(build_graph("complete", 8)), 1)
    cfg = RunConfig(op, quad8, EstimatorConfig(m0=3), dim_schedule(quad8, op), 5, initial_rounds=2)
    st_ = init(cfg)
    np.testing.assert_allclose(st_.Y, np.tile(st_.D.mean(axis=0), (8, 1)), atol=1e-14)
    assert st_.comm == 2


def test_one_step_by_hand():
    p = quadratic_from_samples([[[1.0], [3.0]], [[-2.0], [0.0]]])
    w = np.array([[0.75, 0.25], [0.25, 0.75]])
    op = ChebyshevOperator(MixingMatrix(Graph.from_pairs(2, [(0, 1)]), w), 1)
    alpha, beta = 0.1, 0.3
    s = Schedule("constant", alpha, rule="manual", beta_coef=beta)
    cfg = RunConfig(op, p, EstimatorConfig("v2", m=1, m0=1), s, 3, seed=4, x0=np.array([0.5]))
    st1 = step(init(cfg), cfg)

    rngs = agent_streams(4, 2)
    shard = [[1.0, 3.0], [-2.0, 0.0]]
    first = [shard[i][int(rngs[i].integers(0, 2))] for i in range(2)]
    second = [shard[i][int(rngs[i].integers(0, 2))] for i in range(2)]
    x0 = 0.5
    d = [x0 - first[0], x0 - first[1]]
    y = [0.75 * d[0] + 0.25 * d[1], 0.25 * d[0] + 0.75 * d[1]]
    xp = [x0 - alpha * y[0], x0 - alpha * y[1]]  # z = x0 since rows agree
    v = [xp[i] - second[i] for i in range(2)]
    u = [x0 - second[i] for i in range(2)]
    dp = [(1 - beta) * (d[i] + v[i] - u[i]) + beta * v[i] for i in range(2)]
    t = [y[i] + dp[i] - d[i] for i in range(2)]
    yp = [0.75 * t[0] + 0.25 * t[1], 0.25 * t[0] + 0.75 * t[1]]
    np.testing.assert_allclose(st1.X[:, 0], xp, rtol=1e-14)
    np.testing.assert_allclose(st1.D[:, 0], dp, rtol=1e-14)
    np.testing.assert_allclose(st1.Y[:, 0], yp, rtol=1e-14)
    assert st1.comm == 1 + 2


@pytest.mark.parametrize("variant", ["v2", "v1_sg", "v1_svrg"])
def test_identical_agents_stay_identical(variant):
    shard = np.random.default_rng(0).standard_normal((1, 4))
    p = quadratic_from_samples([shard] * 4, lam=0.1)  # one sample per shard: every draw is identical
    op = ChebyshevOperator(laplacian_mixing(build_graph("complete", 4)), 1)
    cfg = RunConfig(op, p, EstimatorConfig(variant, m=2, m0=2, snapshot_period=3), dim_schedule(p, op), 30, init_scale=1.0)

    def same(state):
        assert np.all(state.X == state.X[0]) and np.all(state.D == state.D[0]) and np.all(state.Y == state.Y[0])

    run(cfg, callback=same)


def test_vtilde_v2_alias_and_svrg_coincidence(quad8):
    op = operator()
    cfg = RunConfig(op, quad8, EstimatorConfig("v1_svrg", m=2, m0=2), dim_schedule(quad8, op), 5, init_scale=1.0)
    st_ = init(cfg)
    v = np.random.default_rng(0).standard_normal(st_.X.shape)
    vt, ns, ne = estimate_vtilde("v2", st_.X, v, cfg, st_)
    assert vt is v and not ns.any() and not ne.any()
    vt, ns, ne = estimate_vtilde("v1_svrg", st_.snapshot_x.copy(), v, cfg, st_)
    np.testing.assert_array_equal(vt, st_.snapshot_grad)
    assert (ns == 2).all() and (ne == 4).all()


def test_svrg_without_snapshot_fails(quad8):
    op = operator()
    cfg = RunConfig(op, quad8, EstimatorConfig("v2"), dim_schedule(quad8, op), 5)
    st_ = init(cfg)
    with pytest.raises(RuntimeError, match="snapshot"):
        estimate_vtilde("v1_svrg", st_.X, st_.X, cfg, st_)


@pytest.mark.parametrize(
    "variant,m,q,snap",
    [("v2", 3, 1, "full"), ("v1_sg", 2, 1, "full"), ("v1_svrg", 2, 4, "full"), ("v1_svrg", 3, 5, 7)],
)
def test_sample_accounting_against_call_hook(quad8, monkeypatch, variant, m, q, snap):
    calls = np.zeros(8, dtype=np.int64)
    real = problems_mod.batch_gradients

    def hooked(p, batches, points):
        for b in batches:
            calls[b.agent] += b.size * points.shape[1]
        return real(p, batches, points)

    monkeypatch.setattr(problems_mod, "batch_gradients", hooked)
    op = operator(rounds=2)
    K, m0 = 23, 5
    est = EstimatorConfig(variant, m=m, m0=m0, snapshot_period=q, snapshot_batch=snap)
    cfg = RunConfig(op, quad8, est, dim_schedule(quad8, op), K, initial_rounds=3)
    res = run(cfg, stop_at=K)
    shard = quad8.shard_sizes[0]
    snap_n = shard if snap == "full" else snap
    per_iter = {"v2": 2 * m, "v1_sg": 3 * m, "v1_svrg": 4 * m}[variant]
    snaps = (1 + len(range(q, K, q))) if variant == "v1_svrg" else 0
    expected = m0 + K * per_iter + snaps * snap_n
    np.testing.assert_array_equal(res.state.evals, calls)
    assert (res.state.evals == expected).all()
    samples = m0 + K * {"v2": m, "v1_sg": 2 * m, "v1_svrg": 2 * m}[variant] + snaps * snap_n
    assert (res.state.samples == samples).all()
    assert res.state.comm == 3 + 2 * 2 * K
    assert res.trace[-1].comm_rounds == 3 + 4 * K


def test_consensus_contraction_noiseless():
    p = make_quadratic(8, 4, seed=2, heterogeneity=2.0, noise=0.0, lam=0.05)
    op = operator("ring")
    cfg = RunConfig(op, p, EstimatorConfig("v2", m="full", m0="full"), dim_schedule(p, op), 3000,
                    initial_rounds=8, init_scale=1.0, record_every=1)
    cons = [r.consensus for r in run(cfg).trace]
    tail = np.array(cons[10:])
    assert np.all(np.diff(tail) <= 1e-15 + 1e-9 * tail[:-1])
    assert cons[-1] <= 1e-8


def test_divergence_raises_with_partial_trace(quad8):
    op = operator()
    s = Schedule("diminishing", 1e6, rho_tilde=op.rho_tilde, k0=k0_threshold(op.rho_tilde), rule="practical",
                 beta_coef=1e-14)
    cfg = RunConfig(op, quad8, EstimatorConfig(), s, 50, init_scale=1.0)
    with pytest.raises(DivergenceError) as info:
        run(cfg)
    assert info.value.partial.trace[0].k == 0


def test_step_past_horizon(quad8):
    op = operator()
    cfg = RunConfig(op, quad8, EstimatorConfig(), dim_schedule(quad8, op), 1)
    st_ = step(init(cfg), cfg)
    with pytest.raises(ConfigError):
        step(st_, cfg)


def test_trace_records_and_output(quad8):
    op = operator()
    cfg = RunConfig(op, quad8, EstimatorConfig(), dim_schedule(quad8, op), 25, record_every=10)
    res = run(cfg)
    assert [r.k for r in res.trace] == [0, 10, 20, 25]
    assert res.output_iterate is not None and res.output_iterate.shape == (8, 3)


def test_initial_lyapunov_is_finite(quad8):
    op = operator()
    for s in (dim_schedule(quad8, op), Schedule("constant", 1e-3, L=1.0, N=8, rho_tilde=op.rho_tilde, horizon=10)):
        cfg = RunConfig(op, quad8, EstimatorConfig(m0=2), s, 10, init_scale=1.0)
        val = initial_lyapunov(init(cfg), cfg)
        assert np.isfinite(val) and val > 0


# ---------------------------------------------------------------------------
# baseline


def test_dsgt_complete_graph_converges():
    p = make_quadratic(4, 3, seed=5, heterogeneity=1.0)
    op = ChebyshevOperator(laplacian_mixing(build_graph("complete", 4)), 1)
    s = Schedule("constant", 0.9, rule="manual", beta_coef=1.0)
    cfg = RunConfig(op, p, EstimatorConfig(m="full", m0="full"), s, 500, init_scale=3.0)
    res = run_dsgt(cfg)
    centre = np.mean([a.mean(axis=0) for a in p.features], axis=0)
    assert np.max(np.abs(res.output_iterate - centre)) <= 1e-8


@pytest.mark.parametrize("kind", ["ring", "ladder", "random_connected"])
def test_dsgt_tracking_invariant(quad8, kind):
    op = operator(kind)
    s = Schedule("constant", 0.1, rule="manual", beta_coef=1.0)
    cfg = RunConfig(op, quad8, EstimatorConfig(m=2, m0=2), s, 200)

    def check(state):
        gap = np.linalg.norm(state.Y.mean(axis=0) - state.D.mean(axis=0))
        assert gap <= 1e-10 * (1 + np.linalg.norm(state.D))

    res = run_dsgt(cfg, callback=check)
    assert res.state.comm == 2 * 200


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bit_exact(quad8, tmp_path):
    op = operator()
    cfg = RunConfig(op, quad8, EstimatorConfig("v1_svrg", m=2, m0=2, snapshot_period=3), dim_schedule(quad8, op), 40)
    mid = run(cfg, stop_at=17).state
    save_checkpoint(tmp_path / "c.json", mid, quad8, {"note": 1})
    back = state_from_checkpoint(load_checkpoint(tmp_path / "c.json"), quad8)
    for name in ("X", "D", "Y", "snapshot_x", "snapshot_grad", "samples", "evals"):
        np.testing.assert_array_equal(getattr(back, name), getattr(mid, name))
    assert (back.k, back.tau, back.comm) == (mid.k, mid.tau, mid.comm)
    a = run(cfg, state=mid).state
    b = run(cfg, state=back).state
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.Y, b.Y)


def test_checkpoint_guards(quad8, tmp_path):
    op = operator()
    cfg = RunConfig(op, quad8, EstimatorConfig(), dim_schedule(quad8, op), 5)
    doc = checkpoint_dict(init(cfg), quad8)
    other = make_quadratic(8, 3, seed=1)
    with pytest.raises(CheckpointError, match="different problem"):
        state_from_checkpoint(doc, other)
    (tmp_path / "v.json").write_text(json.dumps(doc | {"version": 99}))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.json")
    broken = dict(doc)
    del broken["Y"]
    with pytest.raises(CheckpointError, match="corrupted"):
        state_from_checkpoint(broken, quad8)
    broken = dict(doc, X=[[0.0]])
    with pytest.raises(CheckpointError, match="corrupted"):
        state_from_checkpoint(broken, quad8)
