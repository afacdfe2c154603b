"""Clipped surrogate objectives for one agent's parameters.

Every variant is written per sample in terms of that agent's log-probability
``logp`` (a :class:`~coppo.autodiff.Tensor`); other agents' ratios enter
only as constants, so no gradient reaches their parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from coppo import autodiff as ad

COPPO = "coppo"
JOINT_CLIP = "joint-clip"
NO_INNER_CLIP = "no-inner-clip"
INDEPENDENT = "independent-ratio"
CLIP_SEPARATELY = "clip-separately"
VANILLA_PG = "vanilla-pg"

VARIANTS = (COPPO, JOINT_CLIP, NO_INNER_CLIP, INDEPENDENT, CLIP_SEPARATELY, VANILLA_PG)
# Variants whose per-agent term is scaled by the other agents' ratio product.
WEIGHTED_VARIANTS = (COPPO, JOINT_CLIP, NO_INNER_CLIP, CLIP_SEPARATELY)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ClipConfig:
    eps1: float = 0.2
    eps2: float = 0.1
    epochs: int = 8

    def __post_init__(self):
        if not 0.0 < self.eps2 < self.eps1 < 1.0:
            raise ConfigError(f"need 0 < eps2 < eps1 < 1, got eps1={self.eps1}, eps2={self.eps2}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")

    def ratio_headroom(self) -> tuple[float, float]:
        """Range r^i can still reach once the other-agent weight sits on a clip boundary."""
        return (1.0 - self.eps1) / (1.0 - self.eps2), (1.0 + self.eps1) / (1.0 + self.eps2)


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown objective variant {variant!r}; known: {', '.join(VARIANTS)}")
    return variant


def inner_clip_weight(ratios: Sequence[float], agent: int, eps2: float):
    """``clip(prod_{j != agent} r^j, 1 - eps2, 1 + eps2)``; the empty product is 1."""
    r = np.asarray(ratios, dtype=float)
    others = np.prod(np.delete(r, agent, axis=-1), axis=-1)
    return np.clip(others, 1.0 - eps2, 1.0 + eps2)


def per_sample(variant: str, logp, logp_old, other_log_ratio, adv, joint_adv, clip: ClipConfig,
               other_log_clipped=None) -> ad.Tensor:
    """Per-sample surrogate for one agent (or column-wise for all agents).

    other_log_ratio: ``sum_{j != i} log r^j`` (constant).
    other_log_clipped: ``sum_{j != i} log clip(r^j, 1-eps1, 1+eps1)``, needed
    only by ``clip-separately``.
    """
    logp = ad.as_tensor(logp)
    lo, hi = 1.0 - clip.eps1, 1.0 + clip.eps1
    if variant == VANILLA_PG:
        return logp * adv
    r = (logp - logp_old).exp()
    if variant == COPPO:
        g = np.clip(np.exp(other_log_ratio), 1.0 - clip.eps2, 1.0 + clip.eps2)
        x = r * g
        return ad.minimum(x * adv, x.clip(lo, hi) * adv)
    if variant == NO_INNER_CLIP:
        x = r * np.exp(other_log_ratio)
        return ad.minimum(x * adv, x.clip(lo, hi) * adv)
    if variant == INDEPENDENT:
        return ad.minimum(r * adv, r.clip(lo, hi) * adv)
    if variant == JOINT_CLIP:
        x = r * np.exp(other_log_ratio)
        return ad.minimum(x * joint_adv, x.clip(lo, hi) * joint_adv)
    if variant == CLIP_SEPARATELY:
        if other_log_clipped is None:
            raise ValueError("clip-separately needs the other agents' clipped ratios")
        unclipped = r * np.exp(other_log_ratio) * adv
        clipped = r.clip(lo, hi) * np.exp(other_log_clipped) * adv
        return ad.minimum(unclipped, clipped)
    raise ConfigError(f"unknown objective variant {variant!r}")


def other_agent_terms(log_ratios: np.ndarray, clip: ClipConfig) -> tuple[np.ndarray, np.ndarray]:
    """Leave-one-out sums of log ratios and of log clipped ratios, both ``(B, N)``."""
    log_clipped = np.log(np.clip(np.exp(log_ratios), 1.0 - clip.eps1, 1.0 + clip.eps1))
    others = log_ratios.sum(axis=1, keepdims=True) - log_ratios
    others_clipped = log_clipped.sum(axis=1, keepdims=True) - log_clipped
    return others, others_clipped


def batch_objectives(variant: str, logp_now: np.ndarray, logp_old: np.ndarray, per_agent_adv: np.ndarray,
                     joint_adv: np.ndarray, clip: ClipConfig) -> tuple[np.ndarray, np.ndarray]:
    """Objective value of every agent and its derivative w.r.t. that agent's log-probs.

    Returns ``(values (N,), dL_i/dlogp_i (B, N))``. Agents are independent
    given the constants, so a single backward pass over the column-wise sum
    recovers each agent's derivative.
    """
    others, others_clipped = other_agent_terms(logp_now - logp_old, clip)
    logp = ad.variable(logp_now)
    terms = per_sample(variant, logp, logp_old, others, per_agent_adv, joint_adv[:, None], clip, others_clipped)
    values = terms.mean(axis=0)
    values.sum().backward()
    return values.value, logp.grad


def fast_objectives(variant: str, logp_now: np.ndarray, logp_old: np.ndarray, per_agent_adv: np.ndarray,
                    joint_adv: np.ndarray, clip: ClipConfig) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form equivalent of :func:`batch_objectives`, same subgradient conventions."""
    B = logp_now.shape[0]
    lo, hi = 1.0 - clip.eps1, 1.0 + clip.eps1
    adv = per_agent_adv
    if variant == VANILLA_PG:
        return (logp_now * adv).mean(axis=0), adv / B
    log_r = logp_now - logp_old
    r = np.exp(log_r)
    others, others_clipped = other_agent_terms(log_r, clip)
    if variant == CLIP_SEPARATELY:
        a = r * np.exp(others) * adv
        b = np.clip(r, lo, hi) * np.exp(others_clipped) * adv
        take_a = a <= b
        d = np.where(take_a, a, np.where((r >= lo) & (r <= hi), b, 0.0))
        return np.where(take_a, a, b).mean(axis=0), d / B
    if variant == COPPO:
        x = r * np.clip(np.exp(others), 1.0 - clip.eps2, 1.0 + clip.eps2)
    elif variant in (NO_INNER_CLIP, JOINT_CLIP):
        x = r * np.exp(others)
    elif variant == INDEPENDENT:
        x = r
    else:
        raise ConfigError(f"unknown objective variant {variant!r}")
    if variant == JOINT_CLIP:
        adv = np.broadcast_to(joint_adv[:, None], r.shape)
    a = x * adv
    b = np.clip(x, lo, hi) * adv
    take_a = a <= b
    d = np.where(take_a, a, np.where((x >= lo) & (x <= hi), a, 0.0))
    return np.where(take_a, a, b).mean(axis=0), d / B


def agent_objective(variant: str, policies, snapshot, obs: np.ndarray, actions: np.ndarray, bundle,
                    clip: ClipConfig, agent: int):
    """Agent ``agent``'s objective as a differentiable function of its own parameters.

    The other agents' ratios are evaluated at their current parameters.
    """
    logp_old = snapshot.log_probs(obs, actions)
    logp_now = np.stack([p.log_prob(obs[:, j], actions[:, j]) for j, p in enumerate(policies)], axis=1)
    others, others_clipped = other_agent_terms(logp_now - logp_old, clip)
    policy = policies[agent]

    def objective(theta: ad.Tensor) -> ad.Tensor:
        logp = policy.log_prob_tensor(theta, obs[:, agent], actions[:, agent])
        terms = per_sample(variant, logp, logp_old[:, agent], others[:, agent], bundle.per_agent[:, agent],
                           bundle.joint, clip, others_clipped[:, agent])
        return terms.mean()

    return objective
