"""Observation delays: schedules, the extended-state MDP, delayed rollouts and
shift-back replay storage.

Extended states ``x = (s, a^1, ..., a^d)`` pair the last observed state with
the ``d`` actions taken since (oldest first).  They are indexed by a
mixed-radix code, state-major then queue slots oldest-first::

    index(s, q) = s * A**d + q[0] * A**(d-1) + ... + q[d-1]

so that serialized extended-state policies are portable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from itertools import product
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .core import PolicyTable, Process, TabularMdp, TabularPomdp, as_pomdp
from .errors import EnumerationLimitError

MAX_EXTENDED_STATES = 10**6


class DelayKind(Enum):
    CONSTANT = "constant"
    # reserved: padding of extended states under variable delays is not specified
    STOCHASTIC = "stochastic"


@dataclass(frozen=True)
class DelaySchedule:
    d: int
    kind: DelayKind = DelayKind.CONSTANT

    def __post_init__(self):
        if self.kind is not DelayKind.CONSTANT:
            raise NotImplementedError("only constant delays are implemented")
        if int(self.d) != self.d or self.d < 0:
            raise ValueError(f"delay must be a nonnegative integer, got {self.d}")

    def delay_at(self, t: int) -> int:
        return self.d


class _Dummy:
    """Out-of-band marker for a step whose observation has not arrived yet."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "DUMMY"

    def __reduce__(self):
        return (_Dummy, ())


DUMMY = _Dummy()


def is_dummy(x) -> bool:
    return x is DUMMY


@dataclass(frozen=True)
class ExtendedState:
    base: int
    queue: tuple[int, ...]


def encode_extended(s: int, queue: Sequence[int], n_actions: int) -> int:
    idx = int(s)
    for a in queue:
        idx = idx * n_actions + int(a)
    return idx


def decode_extended(index: int, n_actions: int, d: int) -> ExtendedState:
    queue = []
    for _ in range(d):
        index, a = divmod(index, n_actions)
        queue.append(a)
    return ExtendedState(int(index), tuple(reversed(queue)))


def extend_mdp(
    mdp: TabularMdp,
    d: int,
    warmup: Optional[Sequence[int]] = None,
    max_states: int = MAX_EXTENDED_STATES,
) -> TabularMdp:
    """Extended MDP over S x A^d.

    From ``x = (s, a^1..a^d)`` action ``a`` draws ``(s', r) ~ T(. | s, a^1)``
    and moves to ``(s', a^2..a^d, a)``.  The initial extended state is
    ``(s0, warmup)``; ``warmup`` defaults to ``d`` copies of action 0.
    """
    if d < 0:
        raise ValueError("delay must be nonnegative")
    A = mdp.n_actions
    n_ext = mdp.n_states * A**d
    if n_ext > max_states:
        raise EnumerationLimitError(f"{n_ext} extended states exceed the cap of {max_states}")
    if d == 0:
        return TabularMdp(mdp.n_states, A, mdp.kernel, mdp.gamma, mdp.initial_state)
    warmup = tuple(warmup) if warmup is not None else (0,) * d
    if len(warmup) != d or not all(0 <= a < A for a in warmup):
        raise ValueError(f"warmup must be {d} valid actions, got {warmup}")
    rows = []
    for x in range(n_ext):
        ext = decode_extended(x, A, d)
        oldest, rest = ext.queue[0], ext.queue[1:]
        row = []
        for a in range(A):
            shifted = rest + (a,)
            row.append(
                tuple(
                    (encode_extended(nxt, shifted, A), r, p)
                    for nxt, r, p in mdp.kernel[ext.base][oldest]
                )
            )
        rows.append(tuple(row))
    start = encode_extended(mdp.initial_state, warmup, A)
    return TabularMdp(n_ext, A, tuple(rows), mdp.gamma, start)


def warmup_starts(mdp: TabularMdp, d: int) -> list[tuple[int, float]]:
    """Extended start states reached by ``d`` uniformly random warm-up actions."""
    A = mdp.n_actions
    p = 1.0 / A**d
    return [
        (encode_extended(mdp.initial_state, q, A), p) for q in product(range(A), repeat=d)
    ]


def lift_memoryless(policy: PolicyTable, n_actions: int, d: int) -> PolicyTable:
    """Extended-state policy that reads only the observed base state."""
    n_ext = policy.n_states * n_actions**d
    rows = np.repeat(policy.probs, n_actions**d, axis=0)
    assert rows.shape[0] == n_ext
    return PolicyTable(rows)


# ---------------------------------------------------------------------------
# delayed rollouts


@dataclass(frozen=True)
class StepRecord:
    t: int
    action: int
    obs: object  # observation index, or DUMMY
    reward: float
    hidden_s: int
    # diagnostics only: undelayed observation and reward generated at step t
    hidden_obs: Optional[int] = None
    hidden_reward: Optional[float] = None

    def to_json(self) -> dict:
        rec: dict = {"t": self.t, "a": self.action}
        if is_dummy(self.obs):
            rec["dummy"] = True
        else:
            rec["obs"] = self.obs
        rec["r"] = self.reward
        rec["hidden_s"] = self.hidden_s
        return rec

    @classmethod
    def from_json(cls, rec: dict) -> "StepRecord":
        obs = DUMMY if rec.get("dummy") else int(rec["obs"])
        return cls(int(rec["t"]), int(rec["a"]), obs, float(rec["r"]), int(rec["hidden_s"]))


@dataclass(frozen=True)
class DelayedTrajectory:
    d: int
    records: tuple[StepRecord, ...]
    seed: Optional[int] = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def actions(self) -> tuple[int, ...]:
        return tuple(r.action for r in self.records)

    def delayed_rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.records])

    def discounted_return(self, gamma: float) -> float:
        """Return in reward time: the reward arriving at step t is discounted by gamma**(t - d)."""
        return float(sum(rec.reward * gamma ** (rec.t - self.d) for rec in self.records if rec.t >= self.d))

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_json()) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str, d: int) -> "DelayedTrajectory":
        recs = tuple(StepRecord.from_json(json.loads(line)) for line in text.splitlines() if line.strip())
        return cls(d, recs)


# agent(t, obs, reward, actions, rng) -> action.  ``obs`` is o_{t-d} (or DUMMY),
# ``reward`` is the delayed reward r_{t-d-1} that arrived with it (0 when
# absent) and ``actions`` holds every action executed so far.
Agent = Callable[[int, object, float, tuple, np.random.Generator], int]
Warmup = Union[str, Sequence[int]]


def _sample_index(cum: np.ndarray, n_valid: int, u: float) -> int:
    return min(int(np.searchsorted(cum, u, side="right")), n_valid - 1)


def rollout_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent (environment, warm-up, agent) generators for one episode seed."""
    env, warm, agent = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(env), np.random.default_rng(warm), np.random.default_rng(agent)


def delayed_rollout(
    process: Process,
    schedule: DelaySchedule,
    agent: Agent,
    horizon: int,
    seed: int,
    warmup: Warmup = "random",
) -> DelayedTrajectory:
    """Run ``agent`` for ``horizon`` steps against the delayed process.

    The process advances undelayed internally.  Before the first observation
    arrives (t < d) actions come from a uniform random stream by default;
    ``warmup="agent"`` lets the agent choose them (it receives DUMMY), and a
    sequence of ``d`` actions fixes them.  Environment, warm-up and agent
    randomness use separate streams derived from ``seed``, so equal seeds give
    equal warm-up actions across agents.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    pomdp = as_pomdp(process)
    mdp = pomdp.mdp
    d = schedule.d
    A = mdp.n_actions
    if not isinstance(warmup, str):
        warmup = tuple(int(a) for a in warmup)
        if len(warmup) != d:
            raise ValueError(f"fixed warm-up needs {d} actions")
    elif warmup not in ("random", "agent"):
        raise ValueError(f"unknown warm-up mode {warmup!r}")

    env_rng, warm_rng, agent_rng = rollout_streams(seed)
    nxt, rew, prob = mdp.outcome_arrays
    cum_kernel = np.cumsum(prob, axis=2)
    n_out = (prob > 0).sum(axis=2)
    cum_obs = np.cumsum(pomdp.obs_matrix, axis=1)
    if hasattr(agent, "reset"):
        agent.reset()

    s = mdp.initial_state
    obs_hist: list[int] = []
    rew_hist: list[float] = []
    actions: list[int] = []
    records = []
    for t in range(horizon):
        o = min(int(np.searchsorted(cum_obs[s], env_rng.random(), side="right")), pomdp.n_obs - 1)
        obs_hist.append(o)
        if t >= d:
            seen, arrived_r = obs_hist[t - d], (rew_hist[t - d - 1] if t > d else 0.0)
        else:
            seen, arrived_r = DUMMY, 0.0
        if t < d and warmup == "random":
            a = int(warm_rng.integers(A))
        elif t < d and not isinstance(warmup, str):
            a = warmup[t]
        else:
            a = agent(t, seen, arrived_r, tuple(actions), agent_rng)
            if not (isinstance(a, (int, np.integer)) and 0 <= a < A):
                raise ValueError(f"agent returned invalid action {a!r} at t={t}")
            a = int(a)
        k = _sample_index(cum_kernel[s, a], int(n_out[s, a]), env_rng.random())
        s_next, r = int(nxt[s, a, k]), float(rew[s, a, k])
        rew_hist.append(r)
        delivered = rew_hist[t - d] if t >= d else 0.0
        records.append(StepRecord(t, a, seen, delivered, s, o, r))
        actions.append(a)
        s = s_next
    return DelayedTrajectory(d, tuple(records), seed)


def delayed_expected_return(
    mdp: TabularMdp,
    policy: Callable[[int, tuple], np.ndarray],
    d: int,
    horizon: int,
    max_support: int = 10**6,
) -> float:
    """Exact expected reward-time return of the first ``horizon`` rewards of a delayed rollout.

    ``policy(s_observed, queue)`` gives action probabilities from the last
    observed state and the ``d`` actions taken since.  Warm-up actions are
    uniform.  The joint law of the hidden state window ``(s_{t-d}..s_t)`` and
    the action queue is propagated forward exactly, without reference to the
    extended-MDP kernel.
    """
    A = mdp.n_actions
    dist: dict = {((mdp.initial_state,), ()): 1.0}
    total = 0.0
    uniform = np.full(A, 1.0 / A)
    for t in range(horizon):
        new: dict = {}
        for (window, queue), p in dist.items():
            pa = uniform if t < d else np.asarray(policy(window[0], queue))
            s_t = window[-1]
            for a in range(A):
                if pa[a] == 0.0:
                    continue
                q_next = (queue + (a,))[-d:] if d else ()
                for s_next, r, q in mdp.kernel[s_t][a]:
                    w = p * pa[a] * q
                    total += w * (mdp.gamma**t) * r
                    key = ((window + (s_next,))[-(d + 1):], q_next)
                    new[key] = new.get(key, 0.0) + w
        if len(new) > max_support:
            raise EnumerationLimitError("delayed rollout support too large")
        dist = new
    return total


# ---------------------------------------------------------------------------
# replay storage


@dataclass(frozen=True)
class Episode:
    """Undelayed transitions ``(o_k, a_k, r_k)`` recovered from a delayed episode.

    ``actions`` extends ``d`` steps past the last stored transition so every
    index has its subsequent-action window ``actions[k:k+d]``.  ``states``
    carries the diagnostic hidden-state labels when available.
    """

    obs: tuple[int, ...]
    actions: tuple[int, ...]
    rewards: tuple[float, ...]
    d: int = 0
    states: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        n = len(self.obs)
        if len(self.rewards) != n:
            raise ValueError("obs and rewards must have equal length")
        if len(self.actions) < n:
            raise ValueError("every stored transition needs its action")
        if self.states is not None and len(self.states) < n:
            raise ValueError("state labels must cover every transition")

    def __len__(self) -> int:
        return len(self.obs)

    def window(self, k: int) -> tuple[int, ...]:
        """Actions ``(a_k, ..., a_{k+d-1})`` taken after observation ``o_k``."""
        w = self.actions[k:k + self.d]
        if len(w) != self.d:
            raise IndexError(f"no complete action window at index {k}")
        return tuple(w)

    def to_records(self) -> list[dict]:
        out = []
        for k in range(len(self)):
            rec = {"t": k, "a": self.actions[k], "obs": self.obs[k], "r": self.rewards[k]}
            rec["hidden_s"] = None if self.states is None else self.states[k]
            out.append(rec)
        return out


@dataclass
class ReplayBuffer:
    d: int = 0
    episodes: list[Episode] = field(default_factory=list)

    def add(self, episode: Episode) -> None:
        if episode.d != self.d:
            raise ValueError(f"episode delay {episode.d} != buffer delay {self.d}")
        if len(episode):
            self.episodes.append(episode)

    def __len__(self) -> int:
        return sum(len(e) for e in self.episodes)

    def index(self) -> list[tuple[int, int]]:
        """Every (episode, step) pair that has a complete action window."""
        return [
            (i, k)
            for i, e in enumerate(self.episodes)
            for k in range(len(e))
            if k + self.d <= len(e.actions)
        ]

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(rec) + "\n" for e in self.episodes for rec in e.to_records()
        )

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_jsonl())


def shift_back(traj: DelayedTrajectory, d: int) -> Episode:
    """Realign a delayed trajectory into undelayed transitions.

    Transition ``k`` is stored once ``o_k`` and ``r_k`` have arrived (at step
    ``k + d``); the last ``d`` steps of the episode never complete.
    """
    if traj.d != d:
        raise ValueError(f"trajectory was produced with d={traj.d}, not d={d}")
    recs = traj.records
    n = max(len(recs) - d, 0)
    obs = tuple(int(recs[k + d].obs) for k in range(n))
    rewards = tuple(float(recs[k + d].reward) for k in range(n))
    actions = tuple(r.action for r in recs)
    states = tuple(r.hidden_s for r in recs)
    return Episode(obs, actions, rewards, d, states)


def collect_buffer(
    process: Process,
    d: int,
    episodes: int,
    horizon: int,
    seed: int,
    agent: Optional[Agent] = None,
) -> ReplayBuffer:
    """Delayed rollouts (uniform random actions unless ``agent`` is given), shifted back."""
    n_actions = as_pomdp(process).n_actions

    def random_agent(t, obs, r, actions, rng):
        return int(rng.integers(n_actions))

    act = agent or random_agent
    buf = ReplayBuffer(d)
    seeds = np.random.SeedSequence(seed).generate_state(episodes)
    for s in seeds:
        traj = delayed_rollout(process, DelaySchedule(d), act, horizon + d, int(s))
        buf.add(shift_back(traj, d))
    return buf


@dataclass(frozen=True, eq=False)
class DelayedPomdp:
    """The d-step delayed variant of a POMDP (observations and rewards arrive d steps late)."""

    pomdp: TabularPomdp
    d: int

    def __post_init__(self):
        if self.d < 0:
            raise ValueError("delay must be nonnegative")
