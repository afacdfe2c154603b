"""Rollout collection and the multi-epoch clipped policy update."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from coppo.advantage import (
    AdvantageBundle,
    ExactCritic,
    LearnedQCritic,
    RMSProp,
    TabularCritic,
    counterfactual_advantages,
    fit_critic,
    gae,
    make_bundle,
)
from coppo.env import DecPomdpEnv, MatrixGameEnv, MatrixGameSpec, TabularDecPomdp, match_pattern
from coppo.objectives import (
    VANILLA_PG,
    ClipConfig,
    ConfigError,
    fast_objectives,
    check_variant,
)
from coppo.policy import AgentPolicy, PolicyGroup, PolicySnapshot, log_softmax, softmax

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    variant: str = "coppo"
    lr: float = 5e-4
    rmsprop_alpha: float = 0.99
    rmsprop_eps: float = 1e-5
    workers: int = 8
    steps_per_rollout: int = 1
    total_timesteps: int = 10_000
    gamma: float = 0.99
    seed: int = 0
    eps1: float = 0.2
    eps2: float = 0.1
    epochs: int = 8
    epsilon_start: float = 0.9
    epsilon_end: float = 0.02
    epsilon_anneal: int = 6000
    architecture: str = "tabular"
    hidden: int = 18
    init_scale: float = 0.05
    critic: str = "exact"
    critic_lr: float = 5e-4
    mixer: str = "asum"
    normalize_advantages: bool = False
    update_mode: str = "simultaneous"
    gae_lambda: float = 0.9
    horizon: int | None = None

    def __post_init__(self):
        check_variant(self.variant)
        if min(self.workers, self.steps_per_rollout, self.total_timesteps, self.epochs) < 1:
            raise ConfigError("workers, steps_per_rollout, total_timesteps and epochs must be positive")
        if self.lr <= 0 or self.critic_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if not (0.0 <= self.epsilon_end <= 1.0 and 0.0 <= self.epsilon_start <= 1.0):
            raise ConfigError("exploration rates must lie in [0, 1]")
        if self.architecture not in ("tabular", "mlp"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.critic not in ("exact", "learned"):
            raise ConfigError(f"unknown critic {self.critic!r}")
        if self.mixer != "asum":
            raise ConfigError("only the 'asum' mixer is available inside the training loop")
        if self.update_mode not in ("simultaneous", "sequential"):
            raise ConfigError(f"unknown update mode {self.update_mode!r}")
        self.clip  # validates eps1/eps2

    @property
    def clip(self) -> ClipConfig:
        return ClipConfig(self.eps1, self.eps2, 1 if self.variant == VANILLA_PG else self.epochs)

    def epsilon(self, t: int) -> float:
        frac = min(1.0, t / self.epsilon_anneal) if self.epsilon_anneal > 0 else 1.0
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrajectoryBatch:
    obs: np.ndarray          # (B, N) observation ids
    actions: np.ndarray      # (B, N)
    rewards: np.ndarray      # (B,)
    next_obs: np.ndarray     # (B, N)
    terminal: np.ndarray     # (B,) bool
    states: np.ndarray       # (B,)
    next_states: np.ndarray  # (B,)
    logp_old: np.ndarray     # (B, N) snapshot log-probs of the taken actions
    epsilon: np.ndarray      # (B,)
    worker: np.ndarray       # (B,)
    step: np.ndarray         # (B,)

    def __len__(self):
        return len(self.rewards)


def collect(envs: Sequence, snapshot: PolicySnapshot, T: int, rngs: Sequence[np.random.Generator],
            epsilon: Callable[[int], float] | float = 0.0, t0: int = 0) -> TrajectoryBatch:
    """Run the snapshot policies for ``T`` steps in each worker's environment.

    Samples are ordered by (worker, step). Step ``t`` of every worker uses the
    exploration rate at global timestep ``t0 + t * len(envs)``. Each worker
    draws only from its own rng, so the batch does not depend on scheduling.
    """
    if len(envs) != len(rngs):
        raise ValueError("one rng per worker is required")
    eps_fn = epsilon if callable(epsilon) else (lambda _t: float(epsilon))
    group = PolicyGroup.of(snapshot.policies)
    theta = PolicyGroup.stack(snapshot.policies)
    R, N, A = len(envs), group.N, group.A
    rows = []
    for w, (env, rng) in enumerate(zip(envs, rngs)):
        for t in range(T):
            if env.done:
                env.reset()
            eps = eps_fn(t0 + t * R)
            obs = env.observe()
            logp = log_softmax(group.logits(theta, np.asarray(obs)[None, :]))[0]   # (N, A)
            explore = rng.random(N) < eps
            uniform = rng.integers(A, size=N)
            u = rng.random(N)
            sampled = np.minimum((u[:, None] >= np.cumsum(np.exp(logp), axis=1)).sum(axis=1), A - 1)
            acts = np.where(explore, uniform, sampled)
            tr = env.step(acts.tolist())
            rows.append((tr.observations, tr.joint_action, tr.reward, tr.next_observations, tr.terminal,
                         tr.state, env.state(), logp[np.arange(N), acts], eps, w, t))
    cols = list(zip(*rows))
    return TrajectoryBatch(
        obs=np.array(cols[0], dtype=int),
        actions=np.array(cols[1], dtype=int),
        rewards=np.array(cols[2], dtype=float),
        next_obs=np.array(cols[3], dtype=int),
        terminal=np.array(cols[4], dtype=bool),
        states=np.array(cols[5], dtype=int),
        next_states=np.array(cols[6], dtype=int),
        logp_old=np.array(cols[7], dtype=float),
        epsilon=np.array(cols[8], dtype=float),
        worker=np.array(cols[9], dtype=int),
        step=np.array(cols[10], dtype=int),
    )


@dataclass
class UpdateReport:
    update_idx: int
    timestep: int
    objective: list           # (K, N) per-epoch objective values
    grad_norm: list           # (N,) mean over epochs of the gradient norm
    adv_tilde_norm: list      # (N, K) L2 norm over the batch of A~^i_k, k = 1..K
    ratio_product: dict       # stats of prod_j r^j after the last epoch
    grads: np.ndarray = field(repr=False, default=None)          # (N, P) mean gradient over epochs
    log_ratios: np.ndarray = field(repr=False, default=None)     # (K + 1, B, N)

    def to_json(self) -> dict:
        return {
            "update_idx": self.update_idx,
            "timestep": self.timestep,
            "objective": self.objective,
            "grad_norm": self.grad_norm,
            "adv_tilde_norm": self.adv_tilde_norm,
            "ratio_product": self.ratio_product,
        }


def update(policies: list[AgentPolicy], snapshot: PolicySnapshot, batch: TrajectoryBatch,
           bundle: AdvantageBundle, config: TrainConfig, optimizer: RMSProp,
           update_idx: int = 0, timestep: int = 0) -> UpdateReport:
    """K epochs of per-agent ascent on the configured objective.

    Advantages stay fixed; only the ratios move between epochs. In
    simultaneous mode every agent's gradient is taken at the epoch-start
    parameters and then all steps are applied together. ``optimizer`` holds
    the RMSProp state for the stacked ``(N, P)`` parameters.
    """
    clip = config.clip
    obs, actions = batch.obs, batch.actions
    group = PolicyGroup.of(policies)
    N = group.N
    theta = PolicyGroup.stack(policies)
    logp_old = group.log_probs(PolicyGroup.stack(snapshot.policies), obs, actions)
    if np.max(np.abs(logp_old - batch.logp_old)) > 1e-9:
        raise ValueError("batch was not collected under this snapshot")

    logp_now, cache = group.evaluate(theta, obs, actions)
    trace = [logp_now - logp_old]
    objective = []
    grad_sum = np.zeros_like(theta)
    norm_sum = np.zeros(N)

    for k in range(clip.epochs):
        if config.update_mode == "simultaneous":
            values, dlogp = fast_objectives(config.variant, logp_now, logp_old, bundle.per_agent,
                                            bundle.joint, clip)
            grads = group.vjp(cache, dlogp)
            _check_finite(grads, update_idx, k)
            theta = theta + optimizer.direction(grads)
        else:
            values = np.empty(N)
            grads = np.zeros_like(theta)
            for i in range(N):
                vals, dlogp = fast_objectives(config.variant, logp_now, logp_old, bundle.per_agent,
                                              bundle.joint, clip)
                values[i] = vals[i]
                mask = np.zeros(N)
                mask[i] = 1.0
                grads[i] = group.vjp(cache, dlogp * mask)[i]
                _check_finite(grads[i:i + 1], update_idx, k)
                theta = theta.copy()
                theta[i] += optimizer.direction_row(grads[i], i)
                logp_now, cache = group.evaluate(theta, obs, actions)
        grad_sum += grads
        norm_sum += np.linalg.norm(grads, axis=1)
        objective.append(values.tolist())
        logp_now, cache = group.evaluate(theta, obs, actions)
        trace.append(logp_now - logp_old)

    for i, p in enumerate(policies):
        p.params = theta[i].copy()
    K = clip.epochs
    log_ratios = np.stack(trace)
    tilde = np.stack([bundle.tilde(log_ratios[k]) for k in range(1, K + 1)])  # (K, B, N)
    prod = np.exp(log_ratios[-1].sum(axis=1))
    return UpdateReport(
        update_idx=update_idx,
        timestep=timestep,
        objective=objective,
        grad_norm=(norm_sum / K).tolist(),
        adv_tilde_norm=np.linalg.norm(tilde, axis=1).T.tolist(),
        ratio_product={"mean": float(prod.mean()), "min": float(prod.min()), "max": float(prod.max())},
        grads=grad_sum / K,
        log_ratios=log_ratios,
    )


def _check_finite(grads, update_idx, epoch):
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"non-finite gradient for agent {i} at update {update_idx}, epoch {epoch}: {g}")


def penalty_events(batch: TrajectoryBatch, bundle: AdvantageBundle, log_ratios: np.ndarray) -> list[dict]:
    """Miscoordination samples (exactly one of four agents deviates) with their advantage traces."""
    if batch.actions.shape[1] != 4:
        return []
    events = []
    K = log_ratios.shape[0] - 1
    tilde = np.stack([bundle.tilde(log_ratios[k]) for k in range(1, K + 1)], axis=1)   # (B, K, N)
    for n, joint in enumerate(batch.actions):
        kind, _, odd = match_pattern(joint)
        if kind != "three":
            continue
        matchers = [j for j in range(4) if j != odd]
        events.append({
            "sample": n,
            "odd_agent": odd,
            "matchers": matchers,
            "adv": [float(bundle.per_agent[n, j]) for j in matchers],
            "adv_tilde": [tilde[n, :, j].tolist() for j in matchers],
        })
    return events


@dataclass
class RunResult:
    config: TrainConfig
    reports: list[UpdateReport]
    events: list[list[dict]]     # penalty events per update
    rewards: np.ndarray          # team reward per environment step, in collection order
    policies: list[AgentPolicy]
    params_trace: list = field(default_factory=list)


def _seeds(seed: int, workers: int):
    root = np.random.SeedSequence(seed)
    init_ss, env_ss, act_ss = root.spawn(3)
    return (np.random.default_rng(init_ss),
            [np.random.default_rng(s) for s in env_ss.spawn(workers)],
            [np.random.default_rng(s) for s in act_ss.spawn(workers)])


def train(task: MatrixGameSpec | TabularDecPomdp, config: TrainConfig, record_params: bool = False,
          on_update: Callable[[UpdateReport], None] | None = None) -> RunResult:
    """Collect/update loop until ``config.total_timesteps`` environment steps are consumed."""
    init_rng, env_rngs, act_rngs = _seeds(config.seed, config.workers)
    if isinstance(task, MatrixGameSpec):
        envs = [MatrixGameEnv(task, rng) for rng in env_rngs]
        critic = ExactCritic(task) if config.critic == "exact" else LearnedQCritic(
            task, config.critic_lr, config.rmsprop_alpha)
        v_critic = None
    else:
        envs = [DecPomdpEnv(task, rng, horizon=config.horizon) for rng in env_rngs]
        critic = None
        v_critic = TabularCritic(task.n_states, config.critic_lr, config.rmsprop_alpha)
    N, A, n_obs = envs[0].n_agents, envs[0].n_actions, envs[0].n_obs
    policies = [AgentPolicy.init(config.architecture, n_obs, A, init_rng, config.hidden, config.init_scale)
                for _ in range(N)]
    optimizer = RMSProp((N, policies[0].n_params), config.lr, config.rmsprop_alpha, config.rmsprop_eps)

    reports, events, rewards = [], [], []
    params_trace = [[p.params.copy() for p in policies]] if record_params else []
    t = 0
    u = 0
    while t < config.total_timesteps:
        snapshot = PolicySnapshot.take(policies)
        batch = collect(envs, snapshot, config.steps_per_rollout, act_rngs, config.epsilon, t)
        if critic is not None:
            joint_idx = np.ravel_multi_index(tuple(batch.actions.T), (A,) * N)
            critic.fit(joint_idx, batch.rewards)
            group = PolicyGroup.of(snapshot.policies)
            probs = softmax(group.logits(PolicyGroup.stack(snapshot.policies), batch.obs))
            per_agent = counterfactual_advantages(critic.q_table(), probs, batch.actions)
        else:
            per_agent = _gae_advantages(batch, v_critic, config)
        bundle = make_bundle(per_agent, config.mixer, normalize=config.normalize_advantages)
        report = update(policies, snapshot, batch, bundle, config, optimizer, u, t + len(batch))
        events.append(penalty_events(batch, bundle, report.log_ratios))
        rewards.extend(batch.rewards.tolist())
        t += len(batch)
        reports.append(report)
        if record_params:
            params_trace.append([p.params.copy() for p in policies])
        if on_update is not None:
            on_update(report)
        u += 1
    return RunResult(config, reports, events, np.asarray(rewards), policies, params_trace)


def _gae_advantages(batch: TrajectoryBatch, critic: TabularCritic, config: TrainConfig) -> np.ndarray:
    """Shared GAE advantage per sample, broadcast to every agent; also fits the state-value critic."""
    N = batch.actions.shape[1]
    adv = np.empty(len(batch))
    for w in np.unique(batch.worker):
        idx = np.flatnonzero(batch.worker == w)
        values = critic.values(batch.states[idx])
        last = 0.0 if batch.terminal[idx[-1]] else float(critic.values([batch.next_states[idx[-1]]])[0])
        adv[idx] = gae(batch.rewards[idx], np.append(values, last), config.gamma, config.gae_lambda,
                       batch.terminal[idx])
    returns = adv + critic.values(batch.states)
    fit_critic(critic, batch.states, returns)
    return np.repeat(adv[:, None], N, axis=1)
