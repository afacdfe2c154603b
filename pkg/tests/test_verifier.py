import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coppo.env import TabularDecPomdp, make_fixture, random_fixture
from coppo.policy import softmax
from coppo.verifier import (
    bound_check,
    decomposition_identity_check,
    evaluate,
    exact_performance,
    first_order_check,
    joint_policy,
    perf_difference_check,
    perturb,
    pinsker_gap,
    random_tables,
    run_checks,
    surrogate,
    surrogate_gradient,
    performance_fd_gradient,
    theorem1_bound,
    variance_inequality_check,
)


def _single_state(reward, gamma=0.9):
    return TabularDecPomdp(1, 2, np.ones((1, 2, 1)), np.full((1, 2), reward), gamma, np.ones(1),
                           np.zeros((1, 1), dtype=int), 1)


def test_exact_performance_closed_forms():
    uniform = np.full((1, 1, 2), 0.5)
    assert exact_performance(_single_state(1.0), uniform) == pytest.approx(10.0)
    assert exact_performance(_single_state(0.0), uniform) == 0.0


def test_truncated_evaluation_agrees_with_solve():
    mdp = make_fixture("grid4")
    tables = random_tables(mdp, np.random.default_rng(0))
    a = evaluate(mdp, tables)
    b = evaluate(mdp, tables, method="truncate", tail_tol=1e-11)
    assert b.tail_bound < 1e-10
    assert abs(a.J - b.J) < 1e-10
    assert np.allclose(a.rho, b.rho, atol=1e-9)
    assert a.bellman_residual < 1e-10
    assert a.rho.sum() == pytest.approx(1 / (1 - mdp.gamma))


def test_exact_performance_matches_monte_carlo():
    mdp = random_fixture(2, 2, 2, seed=21, gamma=0.9)
    tables = random_tables(mdp, np.random.default_rng(1))
    pi = joint_policy(mdp, tables)
    rng = np.random.default_rng(2)
    n, horizon = 1_000_000, 150
    s = (rng.random(n) > mdp.initial[0]).astype(int)
    ret = np.zeros(n)
    disc = 1.0
    cpi = np.cumsum(pi, axis=1)
    for _ in range(horizon):
        j = np.minimum((rng.random(n)[:, None] >= cpi[s]).sum(1), mdp.n_joint - 1)
        ret += disc * mdp.rewards[s, j]
        s = (rng.random(n) >= mdp.transitions[s, j, 0]).astype(int)
        disc *= mdp.gamma
    se = ret.std() / np.sqrt(n)
    assert abs(ret.mean() - exact_performance(mdp, tables)) < 3 * se


def test_perf_difference_examples():
    mdp = make_fixture("chain")
    rng = np.random.default_rng(3)
    tables = random_tables(mdp, rng)
    assert perf_difference_check(mdp, tables, tables) < 1e-12
    for _ in range(20):
        assert perf_difference_check(mdp, tables, random_tables(mdp, rng)) < 1e-9

    # greedy improvement in one state towards its best action under the old policy
    ev = evaluate(mdp, tables)
    s = 0
    ja = mdp.joint_actions()
    best = ja[np.argmax(ev.A[s])]
    better = tables.copy()
    for i in range(mdp.n_agents):
        better[i, s] = np.eye(mdp.n_actions)[best[i]] * 0.98 + 0.01
    assert perf_difference_check(mdp, tables, better) < 1e-9


def test_surrogate_examples():
    mdp = make_fixture("ring3")
    rng = np.random.default_rng(4)
    tables = random_tables(mdp, rng)
    ev = evaluate(mdp, tables)
    assert surrogate(mdp, tables, tables) == pytest.approx(ev.J, abs=1e-12)
    other = random_tables(mdp, rng)
    eps = np.max(np.abs(ev.A))
    assert abs(surrogate(mdp, tables, other) - ev.J) <= eps * ev.rho.sum() + 1e-12


def test_first_order_examples():
    for fid in ("chain", "ring3", "grid4"):
        mdp = make_fixture(fid)
        logits = np.random.default_rng(5).normal(size=(mdp.n_agents, mdp.n_obs, mdp.n_actions))
        assert first_order_check(mdp, logits) < 1e-4

    zero = random_fixture(2, 2, 2, seed=1)
    zero = TabularDecPomdp(2, 2, zero.transitions, np.zeros_like(zero.rewards), 0.9, zero.initial,
                           zero.observations, zero.n_obs)
    logits = np.zeros((2, 2, 2))
    assert np.allclose(surrogate_gradient(zero, logits), 0)
    assert np.allclose(performance_fd_gradient(zero, logits), 0)


def test_first_order_symmetry():
    # two agents with identical roles: reward depends on the joint action symmetrically
    P = np.ones((1, 4, 1))
    R = np.array([[1.0, 0.2, 0.2, -1.0]])
    mdp = TabularDecPomdp(2, 2, P, R, 0.9, np.ones(1), np.zeros((1, 2), dtype=int), 1)
    g = surrogate_gradient(mdp, np.zeros((2, 1, 2)))
    assert np.allclose(g[0], g[1])
    assert np.allclose(performance_fd_gradient(mdp, np.zeros((2, 1, 2))), g, atol=1e-8)


def test_theorem1_bound_examples():
    assert theorem1_bound(1.0, [0.0, 0.0], 0.9) == 0.0
    assert theorem1_bound(1.0, [0.1], 0.9) == pytest.approx(3.6)
    with pytest.raises(ValueError):
        theorem1_bound(1.0, [1.5], 0.9)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=4), st.integers(0, 3), st.floats(0, 0.99))
@settings(max_examples=60, deadline=None)
def test_theorem1_bound_monotone_in_alpha(alphas, which, gamma):
    which = which % len(alphas)
    bumped = list(alphas)
    bumped[which] = min(1.0, bumped[which] + 0.1)
    assert theorem1_bound(1.0, bumped, gamma) >= theorem1_bound(1.0, alphas, gamma) - 1e-12


def test_bound_check_examples():
    mdp = make_fixture("chain")
    rng = np.random.default_rng(6)
    tables = random_tables(mdp, rng)
    same = bound_check(mdp, tables, tables)
    assert same.error < 1e-12 and same.bound == 0.0 and same.holds
    opposite = np.stack([np.stack([[1 - 1e-6, 1e-6]] * mdp.n_obs)] * mdp.n_agents)
    rep = bound_check(mdp, opposite, opposite[..., ::-1].copy())
    assert rep.holds and rep.bound > rep.error
    for _ in range(100):
        assert bound_check(mdp, tables, perturb(tables, rng, 1.0)).holds


def test_variance_inequality_examples():
    rng = np.random.default_rng(7)
    p = [rng.dirichlet(np.ones(3)) for _ in range(3)]
    assert variance_inequality_check(p, p) == pytest.approx((0.0, 0.0), abs=1e-15)
    q = [rng.dirichlet(np.ones(3))]
    lhs, rhs = variance_inequality_check(p[:1], q)
    assert lhs == pytest.approx(rhs, abs=1e-12)
    for _ in range(200):
        m = int(rng.integers(2, 4))
        old = [rng.dirichlet(np.ones(3)) for _ in range(m)]
        new = [rng.dirichlet(np.ones(3)) for _ in range(m)]
        lhs, rhs = variance_inequality_check(old, new)
        assert lhs >= rhs - 1e-12


def test_decomposition_identity_examples():
    rng = np.random.default_rng(8)
    r = rng.uniform(0.97, 1.03, size=(10, 4))
    adv = rng.normal(size=(10, 4))
    assert decomposition_identity_check(r, adv, np.zeros(4)) == 0.0
    assert decomposition_identity_check(r, adv, rng.uniform(0, 2, 4)) < 1e-12
    with pytest.raises(ValueError):
        decomposition_identity_check(np.full((1, 4), 1.2), adv[:1], np.ones(4))
    with pytest.raises(ValueError):
        decomposition_identity_check(r, adv, -np.ones(4))


def test_pinsker_gap_non_positive():
    rng = np.random.default_rng(9)
    for _ in range(1000):
        assert pinsker_gap(rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))) <= 1e-15


def test_run_checks_reports_no_violations():
    reports = run_checks(trials=20, seed=1, first_order_trials=1)
    assert {r["check"] for r in reports} >= {"bellman", "perf_difference", "theorem1", "first_order",
                                              "proposition1", "decomposition", "pinsker"}
    assert all(r["violations"] == 0 for r in reports)
    assert all(set(r) == {"check", "fixture", "trials", "max_residual", "violations"} for r in reports)


def test_joint_policy_rows_normalized():
    mdp = make_fixture("ring3")
    tables = softmax(np.random.default_rng(10).normal(size=(mdp.n_agents, mdp.n_obs, mdp.n_actions)))
    assert np.allclose(joint_policy(mdp, tables).sum(1), 1.0)
    with pytest.raises(ValueError):
        joint_policy(mdp, tables[:1])
