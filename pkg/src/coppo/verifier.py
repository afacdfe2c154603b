"""Exact policy evaluation on enumerable Dec-POMDPs and numerical checks of the theory.

Joint policies are given as per-agent tables ``(N, n_obs, A)`` of action
probabilities. Agent ``i`` acts on its own observation ``O(s, i)``; the
joint policy is the product of the agents' factors. All quantities are
computed by dense linear algebra, so every check is exact up to rounding.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from coppo.env import TabularDecPomdp, make_fixture
from coppo.policy import AgentPolicy, kl_divergence, softmax, tv_divergence

BELLMAN_TOL = 1e-10
DEFAULT_FIXTURES = ("chain", "ring3", "grid4")


def joint_policy(mdp: TabularDecPomdp, tables) -> np.ndarray:
    """``pi(a | s)`` for every state and flat joint action, shape ``(S, J)``."""
    tables = np.asarray(tables, dtype=float)
    if tables.shape != (mdp.n_agents, mdp.n_obs, mdp.n_actions):
        raise ValueError(f"policy tables must have shape {(mdp.n_agents, mdp.n_obs, mdp.n_actions)}")
    ja = mdp.joint_actions()
    out = np.ones((mdp.n_states, mdp.n_joint))
    for i in range(mdp.n_agents):
        per_state = tables[i][mdp.observations[:, i]]          # (S, A)
        out *= per_state[:, ja[:, i]]
    return out


def random_tables(mdp: TabularDecPomdp, rng: np.random.Generator, concentration: float = 1.0) -> np.ndarray:
    """Dirichlet-distributed per-agent action tables."""
    return rng.dirichlet(np.full(mdp.n_actions, concentration), size=(mdp.n_agents, mdp.n_obs))


def perturb(tables: np.ndarray, rng: np.random.Generator, scale: float) -> np.ndarray:
    """Move each row in logit space by Gaussian noise of the given scale."""
    logits = np.log(tables) + rng.normal(0.0, scale, tables.shape)
    return softmax(logits)


@dataclass
class ExactEval:
    V: np.ndarray
    Q: np.ndarray
    A: np.ndarray
    rho: np.ndarray          # unnormalized discounted visitation, sums to 1 / (1 - gamma)
    J: float
    pi: np.ndarray           # (S, J) joint action probabilities
    bellman_residual: float
    t_max: int | None = None
    tail_bound: float = 0.0


def _policy_dynamics(mdp: TabularDecPomdp, pi: np.ndarray):
    P_pi = np.einsum("sj,sjt->st", pi, mdp.transitions)
    R_pi = (pi * mdp.rewards).sum(axis=1)
    return P_pi, R_pi


def evaluate(mdp: TabularDecPomdp, tables, method: str = "solve", tail_tol: float = 1e-12) -> ExactEval:
    """V, Q, A, visitation and performance of a joint policy.

    ``method="solve"`` uses linear solves of ``(I - gamma P_pi)``.
    ``method="truncate"`` iterates the Bellman operator until the certified
    tail ``gamma^T R_max / (1 - gamma)`` falls below ``tail_tol``.
    """
    pi = joint_policy(mdp, tables)
    P_pi, R_pi = _policy_dynamics(mdp, pi)
    g = mdp.gamma
    S = mdp.n_states
    t_max, tail = None, 0.0
    if method == "solve":
        M = np.eye(S) - g * P_pi
        try:
            V = np.linalg.solve(M, R_pi)
            rho = np.linalg.solve(M.T, mdp.initial)
        except np.linalg.LinAlgError as exc:
            raise ValueError("policy evaluation system is singular") from exc
    elif method == "truncate":
        r_max = float(np.max(np.abs(mdp.rewards)))
        t_max = 0 if r_max == 0 or g == 0 else max(0, math.ceil(math.log(tail_tol * (1 - g) / r_max) / math.log(g)))
        V = np.zeros(S)
        rho = np.zeros(S)
        d = mdp.initial.copy()
        for t in range(t_max + 1):
            V = R_pi + g * P_pi @ V
            rho += (g ** t) * d
            d = d @ P_pi
        tail = (g ** (t_max + 1)) * r_max / (1 - g)
    else:
        raise ValueError(f"unknown evaluation method {method!r}")
    Q = mdp.rewards + g * np.einsum("sjt,t->sj", mdp.transitions, V)
    A = Q - V[:, None]
    resid = float(np.max(np.abs(R_pi + g * P_pi @ V - V)))
    return ExactEval(V, Q, A, rho, float(mdp.initial @ V), pi, resid, t_max, tail)


def exact_performance(mdp: TabularDecPomdp, tables) -> float:
    return evaluate(mdp, tables).J


def perf_difference_check(mdp: TabularDecPomdp, tables, tables_new) -> float:
    """``|J(new) - J(old) - E_{s ~ rho^new, a ~ new}[A^old(s, a)]|``."""
    old = evaluate(mdp, tables)
    new = evaluate(mdp, tables_new)
    rhs = float(new.rho @ (new.pi * old.A).sum(axis=1))
    return abs((new.J - old.J) - rhs)


def surrogate(mdp: TabularDecPomdp, tables, tables_new, old: ExactEval | None = None) -> float:
    """Local approximation of the new policy's performance using the old visitation."""
    old = evaluate(mdp, tables) if old is None else old
    pi_new = joint_policy(mdp, tables_new)
    return old.J + float(old.rho @ (pi_new * old.A).sum(axis=1))


def surrogate_gradient(mdp: TabularDecPomdp, logits: np.ndarray) -> np.ndarray:
    """Gradient of the surrogate w.r.t. the new policy's logits, evaluated at the old policy."""
    tables = softmax(logits)
    ev = evaluate(mdp, tables)
    ja = mdp.joint_actions()
    weighted = ev.rho[:, None] * ev.pi * ev.A                     # (S, J)
    grad = np.zeros_like(logits)
    for i in range(mdp.n_agents):
        obs = mdp.observations[:, i]
        by_action = np.zeros((mdp.n_states, mdp.n_actions))
        np.add.at(by_action, (slice(None), ja[:, i]), weighted)   # sum over a with a^i = b
        # the pi^i(b) * sum_a pi A term vanishes because sum_a pi(a|s) A(s, a) = 0
        per_state = by_action - tables[i][obs] * weighted.sum(axis=1, keepdims=True)
        np.add.at(grad[i], obs, per_state)
    return grad


def performance_fd_gradient(mdp: TabularDecPomdp, logits: np.ndarray, step: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += step
        down[idx] -= step
        grad[idx] = (exact_performance(mdp, softmax(up)) - exact_performance(mdp, softmax(down))) / (2 * step)
    return grad


def first_order_check(mdp: TabularDecPomdp, logits: np.ndarray, step: float = 1e-5, floor: float = 1e-6) -> float:
    """Max componentwise relative gap between the surrogate gradient and FD of exact performance.

    The relative gap uses ``max(|fd|, floor)`` as denominator so components
    whose true gradient is numerically zero are compared absolutely.
    """
    analytic = surrogate_gradient(mdp, logits)
    fd = performance_fd_gradient(mdp, logits, step)
    return float(np.max(np.abs(analytic - fd) / np.maximum(np.abs(fd), floor)))


def theorem1_bound(eps: float, alphas: Sequence[float], gamma: float) -> float:
    """``4 eps [(1 - gamma prod(1 - alpha_i)) / (1 - gamma) - 1]``."""
    alphas = np.asarray(alphas, dtype=float)
    if np.any(alphas < 0) or np.any(alphas > 1):
        raise ValueError("each alpha must lie in [0, 1]")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    return 4.0 * eps * ((1.0 - gamma * np.prod(1.0 - alphas)) / (1.0 - gamma) - 1.0)


@dataclass
class BoundReport:
    eps: float
    alphas: list
    bound: float
    error: float
    slack: float

    @property
    def holds(self) -> bool:
        return self.slack >= -1e-9


def max_tv(table_a: np.ndarray, table_b: np.ndarray) -> float:
    """Maximum over observations of the total variation between two action tables."""
    return max(tv_divergence(p, q) for p, q in zip(table_a, table_b))


def bound_check(mdp: TabularDecPomdp, tables, tables_new) -> BoundReport:
    old = evaluate(mdp, tables)
    J_new = exact_performance(mdp, tables_new)
    approx = surrogate(mdp, tables, tables_new, old)
    eps = float(np.max(np.abs(old.A)))
    alphas = [math.sqrt(0.5 * max_tv(tables[i], tables_new[i])) for i in range(mdp.n_agents)]
    bound = theorem1_bound(eps, alphas, mdp.gamma)
    error = abs(J_new - approx)
    return BoundReport(eps, alphas, bound, error, bound - error)


def _as_probs(policy, obs) -> np.ndarray:
    if isinstance(policy, AgentPolicy):
        return policy.probs([obs])[0]
    return np.asarray(policy, dtype=float)


def variance_inequality_check(policies_old, policies_new, obs: int = 0) -> tuple[float, float]:
    """Variance of the ratio product versus the product of ratio variances.

    Actions are drawn independently from each old policy. Both sides are
    computed by enumerating every joint action of the given agents.
    Returns ``(Var[prod r^j], prod Var[r^j])``.
    """
    old = [_as_probs(p, obs) for p in policies_old]
    new = [_as_probs(p, obs) for p in policies_new]
    if len(old) != len(new) or not old:
        raise ValueError("need matching, non-empty lists of old and new policies")
    ratios = [n / o for o, n in zip(old, new)]
    m1 = m2 = 0.0
    for joint in itertools.product(*(range(len(o)) for o in old)):
        w = math.prod(o[a] for o, a in zip(old, joint))
        x = math.prod(r[a] for r, a in zip(ratios, joint))
        m1 += w * x
        m2 += w * x * x
    lhs = m2 - m1 * m1
    rhs = 1.0
    for o, r in zip(old, ratios):
        mean = float(o @ r)
        rhs *= float(o @ (r * r)) - mean * mean
    return lhs, rhs


def decomposition_identity_check(ratios, advantages, weights, eps1: float = 0.2) -> float:
    """Residual of ``(prod r) sum_i c^i A^i`` against ``sum_i c^i (prod r) A^i`` in the unclipped regime."""
    ratios = np.atleast_2d(np.asarray(ratios, dtype=float))
    adv = np.atleast_2d(np.asarray(advantages, dtype=float))
    c = np.asarray(weights, dtype=float)
    if np.any(c < 0):
        raise ValueError("mixing weights must be non-negative")
    prod = ratios.prod(axis=1)
    if np.any(prod <= 1.0 - eps1) or np.any(prod >= 1.0 + eps1):
        raise ValueError("ratio products must lie strictly inside the clip band")
    joint = prod * (c * adv).sum(axis=1)
    split = (c * prod[:, None] * adv).sum(axis=1)
    return float(np.max(np.abs(joint - split))) if len(prod) else 0.0


def pinsker_gap(p, q) -> float:
    """``TV(p, q)^2 - KL(p || q) / 2``; non-positive whenever the inequality holds."""
    return tv_divergence(p, q) ** 2 - 0.5 * kl_divergence(p, q)


# --- batch runners used by the CLI and the test suite ----------------------

def _report(check, fixture, trials, residuals, violations):
    return {"check": check, "fixture": fixture, "trials": int(trials),
            "max_residual": float(np.max(residuals)) if len(residuals) else 0.0,
            "violations": int(violations)}


def _random_pair(mdp, rng):
    tables = random_tables(mdp, rng, concentration=float(rng.choice([0.3, 1.0, 3.0])))
    scale = float(10 ** rng.uniform(-3, 1))
    return tables, perturb(tables, rng, scale)


def check_bellman(mdp, trials, rng):
    res = [evaluate(mdp, random_tables(mdp, rng)).bellman_residual for _ in range(trials)]
    return _report("bellman", mdp.name, trials, res, sum(r >= BELLMAN_TOL for r in res))


def check_perf_difference(mdp, trials, rng, tol=1e-9):
    res = [perf_difference_check(mdp, *_random_pair(mdp, rng)) for _ in range(trials)]
    return _report("perf_difference", mdp.name, trials, res, sum(r >= tol for r in res))


def check_theorem1(mdp, trials, rng, tol=1e-9):
    slacks = [bound_check(mdp, *_random_pair(mdp, rng)).slack for _ in range(trials)]
    # the residual reported is the worst-case excess of the error over the bound (<= 0 when it holds)
    return _report("theorem1", mdp.name, trials, [-s for s in slacks], sum(s < -tol for s in slacks))


def check_first_order(mdp, trials, rng, tol=1e-4, step=1e-5):
    gaps = []
    for _ in range(trials):
        logits = rng.normal(0.0, 1.0, (mdp.n_agents, mdp.n_obs, mdp.n_actions))
        gaps.append(first_order_check(mdp, logits, step))
    return _report("first_order", mdp.name, trials, gaps, sum(g >= tol for g in gaps))


def check_proposition1(trials, rng, tol=1e-12, n_actions=3):
    gaps = []
    violations = 0
    for t in range(trials):
        others = 1 + t % 3                                    # N - 1 in {1, 2, 3}
        old = rng.dirichlet(np.ones(n_actions), size=others)
        new = perturb(old, rng, float(10 ** rng.uniform(-2, 0.5)))
        lhs, rhs = variance_inequality_check(old, new)
        gaps.append(rhs - lhs)
        violations += lhs < rhs - tol
    return _report("proposition1", "enumerated", trials, gaps, violations)


def check_decomposition(trials, rng, tol=1e-12):
    res = []
    for _ in range(trials):
        B, N = int(rng.integers(1, 16)), int(rng.integers(1, 6))
        ratios = np.exp(rng.uniform(-0.15 / N, 0.15 / N, (B, N)))
        res.append(decomposition_identity_check(ratios, rng.normal(0, 1, (B, N)), rng.uniform(0, 2, N)))
    return _report("decomposition", "random", trials, res, sum(r >= tol for r in res))


def check_pinsker(trials, rng, tol=1e-12):
    gaps = []
    for _ in range(trials):
        k = int(rng.integers(2, 10))
        gaps.append(pinsker_gap(rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))))
    return _report("pinsker", "random", trials, gaps, sum(g > tol for g in gaps))


def run_checks(fixtures: Sequence[str] = DEFAULT_FIXTURES, trials: int = 100, seed: int = 0,
               first_order_trials: int = 5) -> list[dict]:
    """Every theory check, one JSON-ready report per (check, fixture)."""
    rng = np.random.default_rng(seed)
    reports = []
    for fid in fixtures:
        mdp = make_fixture(fid)
        reports.append(check_bellman(mdp, trials, rng))
        reports.append(check_perf_difference(mdp, trials, rng))
        reports.append(check_theorem1(mdp, trials, rng))
        reports.append(check_first_order(mdp, first_order_trials, rng))
    reports.append(check_proposition1(trials, rng))
    reports.append(check_decomposition(trials, rng))
    reports.append(check_pinsker(trials, rng))
    return reports

