"""Cooperative matrix games and small enumerable Dec-POMDPs.

Joint actions are flattened in row-major order with agent 0 as the most
significant digit, the same convention used by the JSON game format.
"""

from __future__ import annotations

import itertools
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

ROW_SUM_TOL = 1e-12


@dataclass(frozen=True)
class MatrixGameSpec:
    """A one-step cooperative game with a shared team reward.

    ``rewards`` is a dense array of shape ``(n_actions,) * n_agents``.
    """

    n_agents: int
    n_actions: int
    rewards: np.ndarray
    name: str = "custom"
    episode_length: int = 1

    def __post_init__(self):
        if self.n_agents < 1 or self.n_actions < 1:
            raise ValueError("n_agents and n_actions must be positive")
        rewards = np.asarray(self.rewards, dtype=float)
        shape = (self.n_actions,) * self.n_agents
        if rewards.size != self.n_actions ** self.n_agents:
            raise ValueError(f"reward table must have {self.n_actions ** self.n_agents} entries")
        rewards = rewards.reshape(shape)
        if not np.all(np.isfinite(rewards)):
            raise ValueError("rewards must be finite")
        if self.episode_length != 1:
            raise ValueError("matrix games last exactly one step")
        rewards.setflags(write=False)
        object.__setattr__(self, "rewards", rewards)

    def reward(self, joint_action: Sequence[int]) -> float:
        return float(self.rewards[tuple(joint_action)])

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_agents": self.n_agents,
            "n_actions": self.n_actions,
            "rewards": self.rewards.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MatrixGameSpec":
        return cls(
            n_agents=int(doc["n_agents"]),
            n_actions=int(doc["n_actions"]),
            rewards=np.asarray(doc["rewards"], dtype=float),
            name=doc.get("name", "custom"),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "MatrixGameSpec":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "MatrixGameSpec":
        return cls.loads(Path(path).read_text())


def match_pattern(joint_action: Sequence[int]) -> tuple[str, int | None, int | None]:
    """Classify a 4-agent joint action.

    Returns ``(kind, common_action, odd_agent)`` where kind is ``"all"`` when
    every agent agrees, ``"three"`` when exactly one agent deviates from the
    common action of the other three, and ``"other"`` otherwise.
    """
    acts = [int(a) for a in joint_action]
    counts = Counter(acts)
    if len(counts) == 1:
        return "all", acts[0], None
    if len(acts) == 4 and len(counts) == 2:
        common, n = counts.most_common(1)[0]
        if n == 3:
            return "three", common, next(i for i, a in enumerate(acts) if a != common)
    return "other", None, None


def _tabulate(n_agents: int, n_actions: int, rule: Callable[[tuple], float]) -> np.ndarray:
    table = np.empty((n_actions,) * n_agents)
    for joint in itertools.product(range(n_actions), repeat=n_agents):
        table[joint] = rule(joint)
    return table


def _match_game(name, match, three, other, n_agents=4, n_actions=9):
    # match/three may be callables of the common action index
    def rule(joint):
        kind, common, _ = match_pattern(joint)
        if kind == "all":
            return match(common) if callable(match) else match
        if kind == "three":
            return three(common) if callable(three) else three
        return other

    return MatrixGameSpec(n_agents, n_actions, _tabulate(n_agents, n_actions, rule), name=name)


def penalty_game(n_agents: int = 4, n_actions: int = 9) -> MatrixGameSpec:
    """Unanimity pays 50, a single deviator costs -50, anything else -40."""
    if n_agents != 4:
        raise ValueError("the penalty game is defined for four agents")
    return _match_game("penalty", 50.0, -50.0, -40.0, n_agents, n_actions)


# Action index k stands for the 1-based action k + 1 of the verbal rules.
def penalty_free_game() -> MatrixGameSpec:
    return _match_game("penalty-free", 50.0, -40.0, -40.0)


def high_reward_game() -> MatrixGameSpec:
    return _match_game("high-reward", 100.0, -50.0, -40.0)


def one_optimal_game() -> MatrixGameSpec:
    target = (0, 1, 2, 3)
    table = _tabulate(4, 9, lambda joint: 50.0 if joint == target else -50.0)
    return MatrixGameSpec(4, 9, table, name="one-optimal")


def climbing_game() -> MatrixGameSpec:
    return _match_game("climbing", lambda k: 10.0 * (k + 1), -40.0, -40.0)


def climbing_penalty_game() -> MatrixGameSpec:
    return _match_game("climbing-penalty", lambda k: 10.0 * (k + 1), -50.0, -40.0)


def climbing_escalating_game() -> MatrixGameSpec:
    return _match_game(
        "climbing-escalating", lambda k: 10.0 * (k + 1), lambda k: -10.0 * (k + 1), -40.0
    )


def appendix_d_games() -> list[MatrixGameSpec]:
    """The six 4-agent, 9-action variants of the penalty and climbing games."""
    return [
        penalty_free_game(),
        high_reward_game(),
        one_optimal_game(),
        climbing_game(),
        climbing_penalty_game(),
        climbing_escalating_game(),
    ]


GAMES: dict[str, Callable[[], MatrixGameSpec]] = {
    "penalty": penalty_game,
    "penalty-free": penalty_free_game,
    "high-reward": high_reward_game,
    "one-optimal": one_optimal_game,
    "climbing": climbing_game,
    "climbing-penalty": climbing_penalty_game,
    "climbing-escalating": climbing_escalating_game,
}


def make_game(game_id: str) -> MatrixGameSpec:
    try:
        return GAMES[game_id]()
    except KeyError:
        raise ValueError(f"unknown game {game_id!r}; known: {sorted(GAMES)}") from None


@dataclass(frozen=True)
class TabularDecPomdp:
    """Enumerable Dec-POMDP.

    transitions: ``(S, J, S)`` with J the number of joint actions.
    rewards: ``(S, J)``.
    observations: ``(S, N)`` integer observation id of each agent per state.
    """

    n_agents: int
    n_actions: int
    transitions: np.ndarray
    rewards: np.ndarray
    gamma: float
    initial: np.ndarray
    observations: np.ndarray
    n_obs: int
    name: str = "custom"

    def __post_init__(self):
        P = np.asarray(self.transitions, dtype=float)
        R = np.asarray(self.rewards, dtype=float)
        mu = np.asarray(self.initial, dtype=float)
        O = np.asarray(self.observations, dtype=int)
        S, J = R.shape
        if J != self.n_actions ** self.n_agents:
            raise ValueError("reward columns must enumerate every joint action")
        if P.shape != (S, J, S):
            raise ValueError(f"transition tensor must have shape {(S, J, S)}")
        if np.any(P < 0) or np.max(np.abs(P.sum(-1) - 1.0)) > ROW_SUM_TOL:
            raise ValueError("every transition row must be a distribution")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if mu.shape != (S,) or np.any(mu < 0) or abs(mu.sum() - 1.0) > ROW_SUM_TOL:
            raise ValueError("initial distribution must be a distribution over states")
        if O.shape != (S, self.n_agents) or O.min() < 0 or O.max() >= self.n_obs:
            raise ValueError("observation map must give an id in [0, n_obs) per state and agent")
        for arr in (P, R, mu, O):
            arr.setflags(write=False)
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "rewards", R)
        object.__setattr__(self, "initial", mu)
        object.__setattr__(self, "observations", O)

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_joint(self) -> int:
        return self.rewards.shape[1]

    def joint_index(self, joint_action: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(joint_action), (self.n_actions,) * self.n_agents))

    def joint_actions(self) -> np.ndarray:
        """All joint actions, shape ``(J, N)``, in flat-index order."""
        return np.array(list(itertools.product(range(self.n_actions), repeat=self.n_agents)))


def random_fixture(
    n_states: int, n_agents: int, n_actions: int, seed: int, gamma: float = 0.9, name: str = "custom"
) -> TabularDecPomdp:
    """Fully observable fixture with random stochastic dynamics and rewards in [-1, 1]."""
    rng = np.random.default_rng(seed)
    J = n_actions ** n_agents
    P = rng.dirichlet(np.ones(n_states), size=(n_states, J))
    P /= P.sum(-1, keepdims=True)
    R = rng.uniform(-1.0, 1.0, size=(n_states, J))
    mu = rng.dirichlet(np.ones(n_states))
    mu /= mu.sum()
    O = np.repeat(np.arange(n_states)[:, None], n_agents, axis=1)
    return TabularDecPomdp(n_agents, n_actions, P, R, gamma, mu, O, n_states, name=name)


FIXTURES: dict[str, Callable[[], TabularDecPomdp]] = {
    "chain": lambda: random_fixture(2, 2, 2, seed=7, name="chain"),
    "ring3": lambda: random_fixture(3, 3, 2, seed=11, name="ring3"),
    "grid4": lambda: random_fixture(4, 2, 3, seed=13, gamma=0.95, name="grid4"),
}


def make_fixture(fixture_id: str) -> TabularDecPomdp:
    try:
        return FIXTURES[fixture_id]()
    except KeyError:
        raise ValueError(f"unknown fixture {fixture_id!r}; known: {sorted(FIXTURES)}") from None


@dataclass(frozen=True)
class Transition:
    observations: tuple[int, ...]
    joint_action: tuple[int, ...]
    reward: float
    next_observations: tuple[int, ...]
    terminal: bool
    state: int = 0


class MatrixGameEnv:
    """Repeated one-shot play of a matrix game; every step is terminal."""

    n_obs = 1

    def __init__(self, game: MatrixGameSpec, rng: np.random.Generator | None = None):
        self.game = game
        self.rng = rng if rng is not None else np.random.default_rng()
        self.done = False

    @property
    def n_agents(self) -> int:
        return self.game.n_agents

    @property
    def n_actions(self) -> int:
        return self.game.n_actions

    def reset(self) -> tuple[int, ...]:
        self.done = False
        return self.observe()

    def observe(self) -> tuple[int, ...]:
        return (0,) * self.game.n_agents

    def state(self) -> int:
        return 0

    def step(self, joint_action: Sequence[int]) -> Transition:
        if self.done:
            raise RuntimeError("episode is over; call reset()")
        _check_actions(joint_action, self.n_agents, self.n_actions)
        obs = self.observe()
        self.done = True
        return Transition(obs, tuple(int(a) for a in joint_action), self.game.reward(joint_action), obs, True)


class DecPomdpEnv:
    """Sampling wrapper around a :class:`TabularDecPomdp`.

    ``horizon`` truncates episodes; ``None`` means the process never terminates.
    """

    def __init__(self, pomdp: TabularDecPomdp, rng: np.random.Generator | None = None, horizon: int | None = None):
        self.pomdp = pomdp
        self.rng = rng if rng is not None else np.random.default_rng()
        self.horizon = horizon
        self.n_obs = pomdp.n_obs
        self._state = 0
        self._t = 0
        self.done = False
        self.reset()

    @property
    def n_agents(self) -> int:
        return self.pomdp.n_agents

    @property
    def n_actions(self) -> int:
        return self.pomdp.n_actions

    def reset(self) -> tuple[int, ...]:
        self._state = int(_draw(self.pomdp.initial, self.rng))
        self._t = 0
        self.done = False
        return self.observe()

    def state(self) -> int:
        return self._state

    def observe(self) -> tuple[int, ...]:
        return tuple(int(o) for o in self.pomdp.observations[self._state])

    def step(self, joint_action: Sequence[int]) -> Transition:
        if self.done:
            raise RuntimeError("episode is over; call reset()")
        _check_actions(joint_action, self.n_agents, self.n_actions)
        s = self._state
        obs = self.observe()
        j = self.pomdp.joint_index(joint_action)
        reward = float(self.pomdp.rewards[s, j])
        self._state = int(_draw(self.pomdp.transitions[s, j], self.rng))
        self._t += 1
        self.done = self.horizon is not None and self._t >= self.horizon
        return Transition(obs, tuple(int(a) for a in joint_action), reward, self.observe(), self.done, state=s)


def _draw(p: np.ndarray, rng: np.random.Generator) -> int:
    idx = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
    return min(idx, len(p) - 1)


def _check_actions(joint_action, n_agents, n_actions):
    if len(joint_action) != n_agents:
        raise ValueError(f"expected {n_agents} actions, got {len(joint_action)}")
    for a in joint_action:
        if not 0 <= int(a) < n_actions:
            raise ValueError(f"action {a} outside [0, {n_actions})")


def step(env, joint_action: Sequence[int]) -> Transition:
    return env.step(joint_action)
