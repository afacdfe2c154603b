"""Per-agent softmax policies, probability ratios and divergences.

Observations are integer ids. The tabular policy keeps one logit row per id;
the MLP policy feeds a one-hot encoding of the id through a single tanh
hidden layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from coppo import autodiff as ad

ARCHITECTURES = ("tabular", "mlp")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class AgentPolicy:
    params: np.ndarray
    arch: str
    obs_dim: int
    action_dim: int
    hidden: int = 18

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        self.params = np.asarray(self.params, dtype=float)
        if self.params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {self.params.shape}")

    @classmethod
    def init(cls, arch: str, obs_dim: int, action_dim: int, rng: np.random.Generator,
             hidden: int = 18, scale: float = 0.05) -> "AgentPolicy":
        n = cls._count(arch, obs_dim, action_dim, hidden)
        return cls(rng.uniform(-scale, scale, size=n), arch, obs_dim, action_dim, hidden)

    @staticmethod
    def _count(arch, obs_dim, action_dim, hidden):
        if arch == "tabular":
            return obs_dim * action_dim
        return obs_dim * hidden + hidden + hidden * action_dim + action_dim

    @property
    def n_params(self) -> int:
        return self._count(self.arch, self.obs_dim, self.action_dim, self.hidden)

    def copy(self) -> "AgentPolicy":
        return AgentPolicy(self.params.copy(), self.arch, self.obs_dim, self.action_dim, self.hidden)

    def with_params(self, params: np.ndarray) -> "AgentPolicy":
        return AgentPolicy(np.array(params, dtype=float), self.arch, self.obs_dim, self.action_dim, self.hidden)

    # layout ---------------------------------------------------------------
    def _unpack(self, theta):
        D, H, A = self.obs_dim, self.hidden, self.action_dim
        i = 0
        W1 = theta[i:i + D * H].reshape(D, H); i += D * H
        b1 = theta[i:i + H]; i += H
        W2 = theta[i:i + H * A].reshape(H, A); i += H * A
        b2 = theta[i:i + A]
        return W1, b1, W2, b2

    # forward --------------------------------------------------------------
    def logits(self, obs) -> np.ndarray:
        obs = np.atleast_1d(np.asarray(obs, dtype=int))
        if self.arch == "tabular":
            return self.params.reshape(self.obs_dim, self.action_dim)[obs]
        W1, b1, W2, b2 = self._unpack(self.params)
        # one-hot input: x @ W1 is a row lookup
        h = np.tanh(W1[obs] + b1)
        return h @ W2 + b2

    def probs(self, obs) -> np.ndarray:
        return softmax(self.logits(obs))

    def log_prob(self, obs, actions) -> np.ndarray:
        actions = np.asarray(actions, dtype=int)
        logp = log_softmax(self.logits(obs))
        return logp[np.arange(len(actions)), actions]

    def log_prob_vjp(self, obs, actions, weights) -> np.ndarray:
        """``sum_n weights[n] * grad_theta log pi(actions[n] | obs[n])``."""
        obs = np.asarray(obs, dtype=int)
        actions = np.asarray(actions, dtype=int)
        w = np.asarray(weights, dtype=float)
        rows = np.arange(len(actions))
        if self.arch == "tabular":
            d_logits = -self.probs(obs) * w[:, None]
            d_logits[rows, actions] += w
            grad = np.zeros((self.obs_dim, self.action_dim))
            np.add.at(grad, obs, d_logits)
            return grad.ravel()
        W1, b1, W2, b2 = self._unpack(self.params)
        h = np.tanh(W1[obs] + b1)
        probs = softmax(h @ W2 + b2)
        d_logits = -probs * w[:, None]
        d_logits[rows, actions] += w
        gW2 = h.T @ d_logits
        gb2 = d_logits.sum(0)
        d_pre = (d_logits @ W2.T) * (1.0 - h ** 2)
        gW1 = np.zeros_like(W1)
        np.add.at(gW1, obs, d_pre)
        gb1 = d_pre.sum(0)
        return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])

    def log_prob_tensor(self, theta: ad.Tensor, obs, actions) -> ad.Tensor:
        """Differentiable log-probabilities as a function of ``theta``."""
        obs = np.asarray(obs, dtype=int)
        if self.arch == "tabular":
            table = theta.reshape(self.obs_dim, self.action_dim)
            return ad.log_softmax_pick(table[obs], actions)
        D, H, A = self.obs_dim, self.hidden, self.action_dim
        W1 = theta[0:D * H].reshape(D, H)
        b1 = theta[D * H:D * H + H]
        off = D * H + H
        W2 = theta[off:off + H * A].reshape(H, A)
        b2 = theta[off + H * A:off + H * A + A]
        x = np.eye(D)[obs]
        h = (x @ W1 + b1).tanh()
        return ad.log_softmax_pick(h @ W2 + b2, actions)

    # serialization --------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "obs_dim": self.obs_dim,
            "action_dim": self.action_dim,
            "hidden": self.hidden,
            "params": self.params.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AgentPolicy":
        return cls(np.asarray(doc["params"], dtype=float), doc["arch"], int(doc["obs_dim"]),
                   int(doc["action_dim"]), int(doc.get("hidden", 18)))

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "AgentPolicy":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class PolicySnapshot:
    """Read-only copy of every agent's parameters taken at update start."""

    policies: tuple[AgentPolicy, ...]

    @classmethod
    def take(cls, policies: Sequence[AgentPolicy]) -> "PolicySnapshot":
        frozen = []
        for p in policies:
            q = p.copy()
            q.params.setflags(write=False)
            frozen.append(q)
        return cls(tuple(frozen))

    def __len__(self):
        return len(self.policies)

    def __getitem__(self, i) -> AgentPolicy:
        return self.policies[i]

    def log_probs(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Log-probabilities, shape ``(B, N)``, for per-agent obs/actions of shape ``(B, N)``."""
        return np.stack([p.log_prob(obs[:, i], actions[:, i]) for i, p in enumerate(self.policies)], axis=1)


class PolicyGroup:
    """Vectorized evaluation of agents that share one architecture.

    Parameters are stacked into an ``(N, P)`` array; observations and
    actions are ``(B, N)``.
    """

    def __init__(self, template: AgentPolicy, n_agents: int):
        self.arch = template.arch
        self.D, self.H, self.A = template.obs_dim, template.hidden, template.action_dim
        self.N = n_agents
        self.P = template.n_params
        self._agents = np.arange(n_agents)

    @classmethod
    def of(cls, policies: Sequence[AgentPolicy]) -> "PolicyGroup":
        first = policies[0]
        for p in policies[1:]:
            if (p.arch, p.obs_dim, p.action_dim, p.hidden) != (first.arch, first.obs_dim, first.action_dim, first.hidden):
                raise ValueError("all agents in a group must share one architecture")
        return cls(first, len(policies))

    @staticmethod
    def stack(policies: Sequence[AgentPolicy]) -> np.ndarray:
        return np.stack([p.params for p in policies])

    def _split(self, theta):
        N, D, H, A = self.N, self.D, self.H, self.A
        W1 = theta[:, :D * H].reshape(N, D, H)
        b1 = theta[:, D * H:D * H + H]
        off = D * H + H
        W2 = theta[:, off:off + H * A].reshape(N, H, A)
        b2 = theta[:, off + H * A:]
        return W1, b1, W2, b2

    def logits(self, theta: np.ndarray, obs: np.ndarray) -> np.ndarray:
        if self.arch == "tabular":
            return theta.reshape(self.N, self.D, self.A)[self._agents, obs]
        W1, b1, W2, b2 = self._split(theta)
        h = np.tanh(W1[self._agents, obs] + b1)
        return np.matmul(h.transpose(1, 0, 2), W2).transpose(1, 0, 2) + b2

    def log_probs(self, theta: np.ndarray, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        logp = log_softmax(self.logits(theta, obs))
        return np.take_along_axis(logp, actions[..., None], axis=-1)[..., 0]

    def evaluate(self, theta: np.ndarray, obs: np.ndarray, actions: np.ndarray):
        """Log-probs of the taken actions plus a cache for :meth:`vjp` at the same parameters."""
        B = actions.shape[0]
        if self.arch == "tabular":
            h = None
            logits = theta.reshape(self.N, self.D, self.A)[self._agents, obs].transpose(1, 0, 2)  # (N, B, A)
        else:
            W1, b1, W2, b2 = self._split(theta)
            h = np.tanh(W1[self._agents, obs] + b1).transpose(1, 0, 2)                   # (N, B, H)
            logits = np.matmul(h, W2) + b2[:, None, :]
        logp_all = log_softmax(logits)
        picked = logp_all[self._agents[:, None], np.arange(B)[None, :], actions.T].T        # (B, N)
        return picked, (theta, obs, actions, h, np.exp(logp_all))

    def vjp(self, cache, weights: np.ndarray) -> np.ndarray:
        """Row i is ``sum_n weights[n, i] * grad_{theta_i} log pi_i(actions[n, i] | obs[n, i])``."""
        theta, obs, actions, h, probs = cache
        B = actions.shape[0]
        d_logits = -probs * weights.T[..., None]                                           # (N, B, A)
        d_logits[self._agents[:, None], np.arange(B)[None, :], actions.T] += weights.T
        if self.arch == "tabular":
            grad = np.zeros((self.N, self.D, self.A))
            np.add.at(grad, (self._agents, obs), d_logits.transpose(1, 0, 2))
            return grad.reshape(self.N, self.P)
        _, _, W2, _ = self._split(theta)
        gW2 = np.matmul(h.transpose(0, 2, 1), d_logits)                                    # (N, H, A)
        gb2 = d_logits.sum(1)
        d_pre = np.matmul(d_logits, W2.transpose(0, 2, 1)) * (1.0 - h ** 2)                # (N, B, H)
        gW1 = np.zeros((self.N, self.D, self.H))
        np.add.at(gW1, (self._agents, obs), d_pre.transpose(1, 0, 2))
        gb1 = d_pre.sum(1)
        return np.concatenate([gW1.reshape(self.N, -1), gb1, gW2.reshape(self.N, -1), gb2], axis=1)

    def log_prob_vjp(self, theta: np.ndarray, obs: np.ndarray, actions: np.ndarray,
                     weights: np.ndarray) -> np.ndarray:
        return self.vjp(self.evaluate(theta, obs, actions)[1], weights)


def action_probs(policy: AgentPolicy, observation: int) -> np.ndarray:
    return policy.probs([observation])[0]


def sample_action(policy: AgentPolicy, observation: int, rng: np.random.Generator,
                  epsilon_greedy: float = 0.0) -> int:
    """Sample from the softmax policy, replaced by a uniform draw with probability epsilon."""
    if epsilon_greedy > 0.0 and rng.random() < epsilon_greedy:
        return int(rng.integers(policy.action_dim))
    p = action_probs(policy, observation)
    return min(int(np.searchsorted(np.cumsum(p), rng.random(), side="right")), len(p) - 1)


def ratio(policies: Sequence[AgentPolicy], snapshot: PolicySnapshot, obs, actions) -> np.ndarray:
    """Per-agent probability ratios against the snapshot.

    ``obs`` and ``actions`` hold one entry per agent for a single sample, or
    have shape ``(B, N)`` for a batch.
    """
    obs = np.asarray(obs, dtype=int)
    actions = np.asarray(actions, dtype=int)
    single = obs.ndim == 1
    obs, actions = np.atleast_2d(obs), np.atleast_2d(actions)
    now = np.stack([p.log_prob(obs[:, i], actions[:, i]) for i, p in enumerate(policies)], axis=1)
    r = np.exp(now - snapshot.log_probs(obs, actions))
    return r[0] if single else r


def tv_divergence(p, q) -> float:
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    return 0.5 * float(np.abs(p - q).sum())


def kl_divergence(p, q) -> float:
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if np.any(q <= 0):
        raise ValueError("KL divergence needs a strictly positive reference distribution")
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def gradient(objective: Callable[[ad.Tensor], ad.Tensor], policy: AgentPolicy) -> np.ndarray:
    """Reverse-mode gradient of a scalar objective of the policy's parameters."""
    theta = ad.variable(policy.params)
    out = objective(theta)
    if out.value.shape != () or not np.isfinite(out.value):
        raise FloatingPointError(f"objective must be a finite scalar, got {out.value!r}")
    out.backward()
    if theta.grad is None:
        return np.zeros_like(policy.params)
    return theta.grad


def finite_difference(objective: Callable[[np.ndarray], float], params: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of a plain-numpy objective."""
    params = np.asarray(params, dtype=float)
    grad = np.empty_like(params)
    for k in range(params.size):
        e = np.zeros_like(params)
        e[k] = step
        grad[k] = (objective(params + e) - objective(params - e)) / (2.0 * step)
    return grad
