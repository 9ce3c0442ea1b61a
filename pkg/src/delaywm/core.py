"""Finite MDPs and POMDPs, exact dynamic programming and enumeration oracles.

Transition kernels are stored jointly over (next state, reward) as sparse
outcome lists ``kernel[s][a] = ((s', r, p), ...)``.  Dense views (marginal
transition matrix, expected reward, padded outcome arrays) are derived lazily
and cached on the instance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import ConvergenceError, EnumerationLimitError

PROB_TOL = 1e-12
DEFAULT_TOL = 1e-9
MAX_SWEEPS = 10**6
MAX_LEAVES = 10**7

Outcome = tuple[int, float, float]


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite MDP with a joint kernel T(s', r | s, a) and discount gamma < 1."""

    n_states: int
    n_actions: int
    kernel: tuple[tuple[tuple[Outcome, ...], ...], ...]
    gamma: float
    initial_state: int = 0

    def __post_init__(self):
        if self.n_states < 1 or self.n_actions < 1:
            raise ValueError("an MDP needs at least one state and one action")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0 <= self.initial_state < self.n_states:
            raise ValueError(f"initial_state {self.initial_state} out of range")
        if len(self.kernel) != self.n_states:
            raise ValueError("kernel must have one entry per state")
        for s, row in enumerate(self.kernel):
            if len(row) != self.n_actions:
                raise ValueError(f"kernel[{s}] must have one entry per action")
            for a, outcomes in enumerate(row):
                if not outcomes:
                    raise ValueError(f"no outcomes for (s={s}, a={a})")
                total = 0.0
                for nxt, r, p in outcomes:
                    if not 0 <= nxt < self.n_states:
                        raise ValueError(f"next state {nxt} out of range at (s={s}, a={a})")
                    if not np.isfinite(r):
                        raise ValueError(f"non-finite reward at (s={s}, a={a})")
                    if not 0.0 <= p <= 1.0:
                        raise ValueError(f"probability {p} outside [0, 1] at (s={s}, a={a})")
                    total += p
                if abs(total - 1.0) > PROB_TOL:
                    raise ValueError(f"outcomes of (s={s}, a={a}) sum to {total!r}, not 1")

    @classmethod
    def from_entries(
        cls,
        n_states: int,
        n_actions: int,
        entries: Iterable[Sequence],
        gamma: float,
        initial_state: int = 0,
    ) -> "TabularMdp":
        """Build from flat ``(s, a, s', r, p)`` rows; zero-probability rows are dropped."""
        rows: list[list[list[Outcome]]] = [[[] for _ in range(n_actions)] for _ in range(n_states)]
        for s, a, nxt, r, p in entries:
            if not (0 <= int(s) < n_states and 0 <= int(a) < n_actions):
                raise ValueError(f"entry ({s}, {a}, ...) out of range")
            if float(p) < 0.0:
                raise ValueError(f"negative probability {p} for (s={s}, a={a})")
            if float(p) > 0.0:
                rows[int(s)][int(a)].append((int(nxt), float(r), float(p)))
        kernel = tuple(tuple(tuple(o) for o in row) for row in rows)
        return cls(n_states, n_actions, kernel, float(gamma), int(initial_state))

    def entries(self) -> list[list]:
        return [
            [s, a, nxt, r, p]
            for s, row in enumerate(self.kernel)
            for a, outcomes in enumerate(row)
            for nxt, r, p in outcomes
        ]

    @cached_property
    def transition(self) -> np.ndarray:
        """Marginal transition tensor P[s, a, s']."""
        P = np.zeros((self.n_states, self.n_actions, self.n_states))
        for s, row in enumerate(self.kernel):
            for a, outcomes in enumerate(row):
                for nxt, _, p in outcomes:
                    P[s, a, nxt] += p
        return _readonly(P)

    @cached_property
    def expected_reward(self) -> np.ndarray:
        """R[s, a] = E[r | s, a]."""
        R = np.zeros((self.n_states, self.n_actions))
        for s, row in enumerate(self.kernel):
            for a, outcomes in enumerate(row):
                R[s, a] = sum(r * p for _, r, p in outcomes)
        return _readonly(R)

    @cached_property
    def reward_bound(self) -> float:
        return max(abs(r) for row in self.kernel for outs in row for _, r, _ in outs)

    @cached_property
    def outcome_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Padded ``(next, reward, prob)`` arrays of shape (S, A, K); padding has prob 0."""
        K = max(len(outs) for row in self.kernel for outs in row)
        nxt = np.zeros((self.n_states, self.n_actions, K), dtype=np.int64)
        rew = np.zeros((self.n_states, self.n_actions, K))
        prob = np.zeros((self.n_states, self.n_actions, K))
        for s, row in enumerate(self.kernel):
            for a, outcomes in enumerate(row):
                for k, (n, r, p) in enumerate(outcomes):
                    nxt[s, a, k], rew[s, a, k], prob[s, a, k] = n, r, p
        return _readonly(nxt), _readonly(rew), _readonly(prob)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "kernel": self.entries(),
            "initial_state": self.initial_state,
        }


@dataclass(frozen=True, eq=False)
class TabularPomdp:
    """A TabularMdp observed through O(o | s)."""

    mdp: TabularMdp
    obs_matrix: np.ndarray

    def __post_init__(self):
        O = np.array(self.obs_matrix, dtype=float)
        if O.ndim != 2 or O.shape[0] != self.mdp.n_states or O.shape[1] < 1:
            raise ValueError(f"obs_matrix must have shape (n_states, n_obs), got {O.shape}")
        if (O < 0).any():
            raise ValueError("obs_matrix has negative entries")
        bad = np.abs(O.sum(axis=1) - 1.0) > PROB_TOL
        if bad.any():
            raise ValueError(f"obs_matrix rows {np.flatnonzero(bad).tolist()} do not sum to 1")
        object.__setattr__(self, "obs_matrix", _readonly(O))

    @classmethod
    def fully_observed(cls, mdp: TabularMdp) -> "TabularPomdp":
        return cls(mdp, np.eye(mdp.n_states))

    @property
    def observes_state(self) -> bool:
        """True when every observation identifies the hidden state exactly."""
        O = self.obs_matrix
        if not np.isin(O, (0.0, 1.0)).all():
            return False
        return len(set(O.argmax(axis=1).tolist())) == self.n_states

    @property
    def n_states(self) -> int:
        return self.mdp.n_states

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    @property
    def n_obs(self) -> int:
        return self.obs_matrix.shape[1]

    @property
    def gamma(self) -> float:
        return self.mdp.gamma

    def to_dict(self) -> dict:
        d = self.mdp.to_dict()
        d["obs_matrix"] = [
            [s, o, float(self.obs_matrix[s, o])]
            for s in range(self.n_states)
            for o in range(self.n_obs)
            if self.obs_matrix[s, o] > 0.0
        ]
        d["n_obs"] = self.n_obs
        return d


Process = Union[TabularMdp, TabularPomdp]


def as_pomdp(process: Process) -> TabularPomdp:
    """View an MDP as a POMDP whose observation is the state itself."""
    if isinstance(process, TabularPomdp):
        return process
    return TabularPomdp.fully_observed(process)


def base_mdp(process: Process) -> TabularMdp:
    return process.mdp if isinstance(process, TabularPomdp) else process


def process_from_dict(d: dict) -> Process:
    mdp = TabularMdp.from_entries(
        int(d["n_states"]), int(d["n_actions"]), d["kernel"], d["gamma"], int(d.get("initial_state", 0))
    )
    if d.get("obs_matrix") is None:
        return mdp
    n_obs = int(d.get("n_obs", 1 + max(int(o) for _, o, _ in d["obs_matrix"])))
    O = np.zeros((mdp.n_states, n_obs))
    for s, o, p in d["obs_matrix"]:
        O[int(s), int(o)] += float(p)
    return TabularPomdp(mdp, O)


def save_json(process: Process, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(process.to_dict()))


def load_json(path: Union[str, Path]) -> Process:
    return process_from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class ValueFunction:
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _readonly(np.asarray(self.values, dtype=float)))

    def __getitem__(self, s):
        return self.values[s]

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True, eq=False)
class PolicyTable:
    """Per-state action distributions, ``probs[s, a]``."""

    probs: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.probs, dtype=float)
        if P.ndim != 2:
            raise ValueError("policy table must be 2-D (states x actions)")
        if (P < 0).any() or (np.abs(P.sum(axis=1) - 1.0) > PROB_TOL).any():
            raise ValueError("policy rows must be distributions")
        object.__setattr__(self, "probs", _readonly(P))

    @classmethod
    def from_actions(cls, actions: Sequence[int], n_actions: int) -> "PolicyTable":
        P = np.zeros((len(actions), n_actions))
        P[np.arange(len(actions)), np.asarray(actions, dtype=int)] = 1.0
        return cls(P)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "PolicyTable":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    @property
    def deterministic(self) -> bool:
        return bool(np.all((self.probs == 0.0) | (self.probs == 1.0)))

    def action(self, s: int) -> int:
        return int(np.argmax(self.probs[s]))


def _q_values(mdp: TabularMdp, V: np.ndarray) -> np.ndarray:
    return mdp.expected_reward + mdp.gamma * (mdp.transition @ V)


def value_iteration(
    mdp: TabularMdp, tol: float = DEFAULT_TOL, max_sweeps: int = MAX_SWEEPS
) -> tuple[ValueFunction, PolicyTable]:
    """Optimal values and the greedy policy (ties go to the lowest action index).

    The returned values have Bellman sup-norm residual at most ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    V = np.zeros(mdp.n_states)
    for _ in range(max_sweeps):
        V_new = _q_values(mdp, V).max(axis=1)
        delta = np.max(np.abs(V_new - V))
        V = V_new
        if delta <= tol:
            break
    else:
        raise ConvergenceError(f"value iteration did not reach tol={tol} in {max_sweeps} sweeps")
    greedy = np.argmax(_q_values(mdp, V), axis=1)
    return ValueFunction(V), PolicyTable.from_actions(greedy, mdp.n_actions)


def _check_policy(mdp: TabularMdp, policy: PolicyTable) -> None:
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"policy shape {policy.probs.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})"
        )


def policy_evaluation(
    mdp: TabularMdp, policy: PolicyTable, tol: float = DEFAULT_TOL, max_sweeps: int = MAX_SWEEPS
) -> ValueFunction:
    """Fixed point of the policy Bellman operator, to sup-norm residual ``tol``."""
    _check_policy(mdp, policy)
    if tol <= 0:
        raise ValueError("tol must be positive")
    pi = policy.probs
    R_pi = np.einsum("sa,sa->s", pi, mdp.expected_reward)
    P_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    V = np.zeros(mdp.n_states)
    for _ in range(max_sweeps):
        V_new = R_pi + mdp.gamma * (P_pi @ V)
        delta = np.max(np.abs(V_new - V))
        V = V_new
        if delta <= tol:
            return ValueFunction(V)
    raise ConvergenceError(f"policy evaluation did not reach tol={tol} in {max_sweeps} sweeps")


def finite_horizon_value(mdp: TabularMdp, policy: PolicyTable, horizon: int) -> ValueFunction:
    """Exact expected discounted return of the first ``horizon`` rewards."""
    _check_policy(mdp, policy)
    pi = policy.probs
    R_pi = np.einsum("sa,sa->s", pi, mdp.expected_reward)
    P_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    V = np.zeros(mdp.n_states)
    for _ in range(horizon):
        V = R_pi + mdp.gamma * (P_pi @ V)
    return ValueFunction(V)


def brute_force_return(
    mdp: TabularMdp,
    policy: PolicyTable,
    horizon: int,
    start: int,
    max_leaves: int = MAX_LEAVES,
) -> float:
    """Expected discounted return over ``horizon`` steps by listing every trajectory.

    Each leaf of the trajectory tree (every action with positive policy mass
    followed by every kernel outcome) is materialised; nothing is merged.
    """
    _check_policy(mdp, policy)
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    nxt, rew, prob = mdp.outcome_arrays
    pi = policy.probs
    states = np.array([start], dtype=np.int64)
    probs = np.array([1.0])
    returns = np.array([0.0])
    discount = 1.0
    for _ in range(horizon):
        # (leaf, action, outcome) weights; zero entries are not trajectories
        w = probs[:, None, None] * pi[states][:, :, None] * prob[states]
        keep = w > 0.0
        n_new = int(keep.sum())
        if n_new > max_leaves:
            raise EnumerationLimitError(f"trajectory tree exceeds {max_leaves} leaves")
        leaf_idx = np.nonzero(keep)[0]
        probs = w[keep]
        returns = returns[leaf_idx] + discount * rew[states][keep]
        states = nxt[states][keep]
        discount *= mdp.gamma
    return float(np.dot(probs, returns))
