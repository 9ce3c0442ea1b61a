"""Benchmark processes: the three-state hardness MDP, factored tracks with
masked velocity observations, and seeded random instances."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Sequence

import numpy as np

from .core import TabularMdp, TabularPomdp

S1, S2, S3 = 0, 1, 2
A1, A2 = 0, 1


@dataclass(frozen=True)
class Fig2Params:
    delta: float = 0.5
    gamma: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.delta <= 0.5:
            raise ValueError(f"delta must lie in [0, 1/2], got {self.delta}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")


def fig2_mdp(p: Fig2Params = Fig2Params()) -> TabularMdp:
    """Three-state MDP where staying in s1 requires knowing the current state.

    a1 in s1 pays +1 and stays w.p. 1-delta (else slips to s2); a2 in s2 pays 0
    and returns to s1 w.p. 1-delta.  The wrong action in either state leads to
    the absorbing zero-reward s3.
    """
    d = p.delta
    entries = [
        (S1, A1, S1, 1.0, 1.0 - d),
        (S1, A1, S2, 1.0, d),
        (S1, A2, S3, 0.0, 1.0),
        (S2, A2, S1, 0.0, 1.0 - d),
        (S2, A2, S2, 0.0, d),
        (S2, A1, S3, 0.0, 1.0),
        (S3, A1, S3, 0.0, 1.0),
        (S3, A2, S3, 0.0, 1.0),
    ]
    return TabularMdp.from_entries(3, 2, entries, p.gamma, initial_state=S1)


def fig2_closed_forms(p: Fig2Params = Fig2Params()) -> tuple[float, float, float]:
    """(undelayed optimum, one-step-delayed optimum, their ratio) at s1."""
    g, d = p.gamma, p.delta
    v_undelayed = (1.0 - g * d) / (1.0 - g)
    v_delayed = 1.0 / (1.0 - g * (1.0 - d))
    ratio = (1.0 - g) / ((1.0 - g * d) * (1.0 - g * (1.0 - d)))
    return v_undelayed, v_delayed, ratio


@dataclass(frozen=True)
class MaskedObsConfig:
    rho: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")


@dataclass(frozen=True, eq=False)
class FactoredMdp:
    """An MDP whose states carry (position, velocity) factor labels."""

    mdp: TabularMdp
    labels: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.labels) != self.mdp.n_states:
            raise ValueError("one (position, velocity) label per state is required")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("state labels must be distinct")

    @property
    def positions(self) -> list[int]:
        return sorted({p for p, _ in self.labels})


def masked_pomdp(base: FactoredMdp, cfg: MaskedObsConfig) -> TabularPomdp:
    """Observe position always and velocity with probability 1 - rho.

    Observation ``s`` is the full label of state ``s``; observation
    ``n_states + i`` is the velocity-masked label of the i-th position.  With
    rho = 0 the masked observations are dropped and the matrix is the identity.
    """
    if not isinstance(base, FactoredMdp):
        raise TypeError("masked_pomdp needs a FactoredMdp with (position, velocity) labels")
    n = base.mdp.n_states
    positions = base.positions
    if cfg.rho == 0.0:
        return TabularPomdp(base.mdp, np.eye(n))
    O = np.zeros((n, n + len(positions)))
    for s, (pos, _) in enumerate(base.labels):
        O[s, s] = 1.0 - cfg.rho
        O[s, n + positions.index(pos)] += cfg.rho
    return TabularPomdp(base.mdp, O)


def factored_chain(n_positions: int = 2, n_velocities: int = 2, slip: float = 0.1, gamma: float = 0.9) -> FactoredMdp:
    """Ring of positions with a velocity factor the actions accelerate.

    Action 0 decrements velocity, action 1 increments it (clipped); the
    position then advances by the velocity modulo the ring size, except with
    probability ``slip`` where it stays put.  Reward 1 for being at position 0.
    """
    labels = tuple(product(range(n_positions), range(n_velocities)))
    index = {lab: i for i, lab in enumerate(labels)}
    entries = []
    for s, (pos, vel) in enumerate(labels):
        for a in range(2):
            new_vel = min(max(vel + (1 if a == 1 else -1), 0), n_velocities - 1)
            moved = (pos + new_vel) % n_positions
            r = 1.0 if pos == 0 else 0.0
            if moved == pos:
                entries.append((s, a, index[(pos, new_vel)], r, 1.0))
            else:
                entries.append((s, a, index[(moved, new_vel)], r, 1.0 - slip))
                entries.append((s, a, index[(pos, new_vel)], r, slip))
    return FactoredMdp(TabularMdp.from_entries(len(labels), 2, entries, gamma), labels)


def switching_track(
    flip: float = 0.1,
    safe_reward: float = 0.2,
    wrong_penalty: float = 2.0,
    gamma: float = 0.9,
) -> FactoredMdp:
    """Two-cell track whose hidden velocity decides whether the agent's cell switches.

    State (position, velocity): the position toggles when velocity is 1, then
    velocity flips with probability ``flip``.  Actions 0 and 1 bet on the
    current position (+1 if right, ``-wrong_penalty`` if wrong); action 2 is a
    safe ``safe_reward``.  Dynamics ignore actions, so only the prediction of the
    current position matters, and it decays with delay.
    """
    labels = tuple(product(range(2), range(2)))
    index = {lab: i for i, lab in enumerate(labels)}
    entries = []
    for s, (pos, vel) in enumerate(labels):
        new_pos = (pos + vel) % 2
        for a in range(3):
            r = safe_reward if a == 2 else (1.0 if a == pos else -wrong_penalty)
            entries.append((s, a, index[(new_pos, vel)], r, 1.0 - flip))
            entries.append((s, a, index[(new_pos, 1 - vel)], r, flip))
    return FactoredMdp(TabularMdp.from_entries(4, 3, entries, gamma, initial_state=0), labels)


def random_instance(
    seed: int,
    n_states: int,
    n_actions: int,
    n_obs: int,
    sparsity: float = 0.0,
    gamma: float = 0.9,
    reward_levels: Sequence[float] = (0.0, 0.5, 1.0),
) -> TabularPomdp:
    """Seeded random POMDP.

    Each transition row draws a Dirichlet(1) distribution over a random subset
    of successors keeping a fraction ``1 - sparsity`` of them (at least one).
    Rewards are a deterministic function of (s, a, s') drawn from
    ``reward_levels``.  Observation rows are Dirichlet(1) with the same sparsity.
    """
    if min(n_states, n_actions, n_obs) < 1:
        raise ValueError("sizes must be >= 1")
    if not 0.0 <= sparsity < 1.0:
        raise ValueError("sparsity must lie in [0, 1)")
    rng = np.random.default_rng(seed)

    def sparse_row(n: int) -> np.ndarray:
        k = max(1, int(round(n * (1.0 - sparsity))))
        support = rng.choice(n, size=k, replace=False)
        row = np.zeros(n)
        row[support] = rng.dirichlet(np.ones(k))
        return row / row.sum()

    entries = []
    for s in range(n_states):
        for a in range(n_actions):
            row = sparse_row(n_states)
            levels = rng.choice(np.asarray(reward_levels, dtype=float), size=n_states)
            for nxt in np.flatnonzero(row):
                entries.append((s, a, int(nxt), float(levels[nxt]), float(row[nxt])))
    mdp = TabularMdp.from_entries(n_states, n_actions, _renormalize(entries), gamma, initial_state=0)
    O = np.vstack([sparse_row(n_obs) for _ in range(n_states)])
    return TabularPomdp(mdp, O)


def _renormalize(entries: list) -> list:
    # Dirichlet rows can miss 1 by a few ulps after the support scatter
    totals: dict = {}
    for s, a, _, _, p in entries:
        totals[(s, a)] = totals.get((s, a), 0.0) + p
    return [(s, a, n, r, p / totals[(s, a)]) for s, a, n, r, p in entries]
