"""Action values, counterfactual advantages and advantage mixing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from coppo.env import MatrixGameSpec


def exact_q(game: MatrixGameSpec) -> np.ndarray:
    """For a one-step game the joint action value is the reward itself."""
    return np.array(game.rewards, dtype=float)


def counterfactual_advantage(q: np.ndarray, policies, joint_action, agent: int) -> float:
    """Q at the taken joint action minus its expectation over agent ``agent``'s own policy.

    ``policies`` holds one probability vector per agent; only the entry for
    ``agent`` is used.
    """
    idx = list(joint_action)
    row = []
    for b in range(q.shape[agent]):
        idx[agent] = b
        row.append(q[tuple(idx)])
    row = np.asarray(row)
    pi = np.asarray(policies[agent], dtype=float)
    return float(row[joint_action[agent]] - pi @ row)


def counterfactual_advantages(q: np.ndarray, probs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Batched counterfactual advantages.

    q: joint-action value table of shape ``(A,) * N``.
    probs: ``(B, N, A)`` each agent's action distribution per sample.
    actions: ``(B, N)`` taken joint actions.
    Returns ``(B, N)``.
    """
    B, N = actions.shape
    A = q.shape[0]
    out = np.empty((B, N))
    for i in range(N):
        idx = [np.repeat(actions[:, j:j + 1], A, axis=1) for j in range(N)]
        idx[i] = np.broadcast_to(np.arange(A), (B, A))
        row = q[tuple(idx)]  # (B, A): Q with agent i swept over its actions
        taken = row[np.arange(B), actions[:, i]]
        out[:, i] = taken - np.einsum("ba,ba->b", probs[:, i], row)
    return out


def mix_asum(advantages) -> np.ndarray:
    """Unit-weight sum over agents (last axis)."""
    return np.asarray(advantages, dtype=float).sum(axis=-1)


@dataclass
class MixerParams:
    """State-conditioned mixer ``w(s) = |W s + w0|``, ``b(s) = V s + b0``."""

    W: np.ndarray
    w0: np.ndarray
    V: np.ndarray
    b0: float = 0.0

    @classmethod
    def init(cls, state_dim: int, n_agents: int, rng: np.random.Generator, scale: float = 0.5) -> "MixerParams":
        return cls(rng.normal(0, scale, (n_agents, state_dim)), rng.normal(0, scale, n_agents),
                   rng.normal(0, scale, state_dim), 0.0)

    @classmethod
    def unit(cls, state_dim: int, n_agents: int) -> "MixerParams":
        return cls(np.zeros((n_agents, state_dim)), np.ones(n_agents), np.zeros(state_dim), 0.0)

    def weights(self, state) -> np.ndarray:
        state = np.atleast_2d(np.asarray(state, dtype=float))
        return np.abs(state @ self.W.T + self.w0)

    def bias(self, state) -> np.ndarray:
        state = np.atleast_2d(np.asarray(state, dtype=float))
        return state @ self.V + self.b0


def mix_amix(advantages, state, params: MixerParams) -> np.ndarray:
    """Non-negative state-conditioned weighted sum of per-agent advantages plus a bias."""
    adv = np.atleast_2d(np.asarray(advantages, dtype=float))
    return (params.weights(state) * adv).sum(axis=-1) + params.bias(state)


@dataclass
class AdvantageBundle:
    per_agent: np.ndarray            # (B, N) counterfactual advantages A^i
    joint: np.ndarray                # (B,) mixed joint advantage
    weights: np.ndarray              # (N,) or (B, N) non-negative mixing weights

    def tilde(self, log_ratios: np.ndarray) -> np.ndarray:
        """Advantages reweighted by the other agents' ratio product, ``(prod_{j!=i} r^j) A^i``."""
        others = log_ratios.sum(axis=1, keepdims=True) - log_ratios
        return np.exp(others) * self.per_agent


def make_bundle(per_agent: np.ndarray, mixer: str = "asum", state=None, mixer_params: MixerParams | None = None,
                normalize: bool = False) -> AdvantageBundle:
    per_agent = np.asarray(per_agent, dtype=float)
    if normalize and per_agent.shape[0] > 1:
        per_agent = (per_agent - per_agent.mean(0)) / (per_agent.std(0) + 1e-8)
    N = per_agent.shape[1]
    if mixer == "asum":
        return AdvantageBundle(per_agent, mix_asum(per_agent), np.ones(N))
    if mixer == "amix":
        if mixer_params is None or state is None:
            raise ValueError("amix needs mixer parameters and state features")
        w = mixer_params.weights(state)
        return AdvantageBundle(per_agent, mix_amix(per_agent, state, mixer_params), w)
    raise ValueError(f"unknown mixer {mixer!r}")


def gae(rewards, values, gamma: float, lam: float, dones=None) -> np.ndarray:
    """Generalized advantage estimates.

    ``values`` has one more entry than ``rewards`` (bootstrap). ``dones[t]``
    marks that the episode ended after step t, cutting the bootstrap.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    T = len(rewards)
    if values.shape != (T + 1,):
        raise ValueError("values must have length len(rewards) + 1")
    if not (0.0 <= lam <= 1.0 and 0.0 <= gamma <= 1.0):
        raise ValueError("gamma and lambda must lie in [0, 1]")
    notdone = np.ones(T) if dones is None else 1.0 - np.asarray(dones, dtype=float)
    adv = np.zeros(T)
    running = 0.0
    for t in reversed(range(T)):
        delta = rewards[t] + gamma * values[t + 1] * notdone[t] - values[t]
        running = delta + gamma * lam * notdone[t] * running
        adv[t] = running
    return adv


@dataclass
class GaeConfig:
    lam: float = 0.9
    gamma: float = 0.99

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0 and 0.0 <= self.gamma < 1.0):
            raise ValueError("lambda must lie in [0, 1] and gamma in [0, 1)")


class RMSProp:
    """RMSProp without momentum or weight decay. ``step`` ascends by default."""

    def __init__(self, shape, lr: float = 5e-4, alpha: float = 0.99, eps: float = 1e-5):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr, self.alpha, self.eps = lr, alpha, eps
        self.sq = np.zeros(shape)

    def direction(self, grad: np.ndarray) -> np.ndarray:
        self.sq = self.alpha * self.sq + (1.0 - self.alpha) * grad * grad
        return self.lr * grad / (np.sqrt(self.sq) + self.eps)

    def direction_row(self, grad: np.ndarray, row: int) -> np.ndarray:
        """Step for one row of a stacked parameter array, leaving other rows' state untouched."""
        self.sq[row] = self.alpha * self.sq[row] + (1.0 - self.alpha) * grad * grad
        return self.lr * grad / (np.sqrt(self.sq[row]) + self.eps)


@dataclass
class TabularCritic:
    """Lookup-table value estimate trained by squared error to Monte Carlo returns.

    Indexed by a flat joint action (Q critic for matrix games) or a state id
    (V critic for multi-step fixtures).
    """

    size: int
    lr: float = 5e-4
    alpha: float = 0.99
    table: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.table is None:
            self.table = np.zeros(self.size)
        self._opt = RMSProp(self.size, self.lr, self.alpha)

    def values(self, idx) -> np.ndarray:
        return self.table[np.asarray(idx, dtype=int)]


def fit_critic(critic: TabularCritic, idx, targets) -> float:
    """One optimizer step on the mean squared error; returns the pre-step loss."""
    idx = np.asarray(idx, dtype=int)
    targets = np.asarray(targets, dtype=float)
    if idx.size == 0:
        raise ValueError("empty batch")
    err = critic.table[idx] - targets
    loss = float(np.mean(err ** 2))
    grad = np.zeros(critic.size)
    np.add.at(grad, idx, 2.0 * err / idx.size)
    critic.table -= critic._opt.direction(grad)
    return loss


class ExactCritic:
    """Oracle critic: returns the game's reward table, nothing to learn."""

    def __init__(self, game: MatrixGameSpec):
        self.q = exact_q(game)

    def q_table(self) -> np.ndarray:
        return self.q

    def fit(self, idx, targets) -> float:
        idx = np.asarray(idx, dtype=int)
        return float(np.mean((self.q.ravel()[idx] - np.asarray(targets, dtype=float)) ** 2))


class LearnedQCritic:
    """Tabular joint-action Q critic for matrix games."""

    def __init__(self, game: MatrixGameSpec, lr: float = 5e-4, alpha: float = 0.99):
        self.shape = game.rewards.shape
        self.critic = TabularCritic(int(np.prod(self.shape)), lr, alpha)

    def q_table(self) -> np.ndarray:
        return self.critic.table.reshape(self.shape)

    def fit(self, idx, targets) -> float:
        return fit_critic(self.critic, idx, targets)
