"""Exact belief-state world models.

The latent state of a tabular world model is the posterior over hidden states.
In interaction mode it is grounded in real observations by Bayesian filtering;
in imagination mode the model samples its own observations and rewards and
filters on them.  Filtering conditions on the reward as well as the
observation whenever a reward is available, since rewards carry state
information; this makes the two modes agree in law when the model is exact.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence, Union

import numpy as np

from .core import PROB_TOL, Process, TabularMdp, TabularPomdp, as_pomdp
from .delay import DUMMY, DelayedPomdp, ReplayBuffer, is_dummy
from .errors import EnumerationLimitError, ModelMismatchError

KEY_DECIMALS = 12


def belief_key(b: np.ndarray, decimals: int = KEY_DECIMALS) -> tuple:
    """Hashable key of a belief, components rounded to ``decimals`` digits."""
    return tuple((np.round(b, decimals) + 0.0).tolist())


@dataclass(frozen=True, eq=False)
class WorldModelState:
    """A belief vector over hidden states."""

    belief: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.belief, dtype=float)
        if b.ndim != 1 or (b < 0).any() or abs(b.sum() - 1.0) > PROB_TOL:
            raise ValueError("belief must be a probability vector")
        b = b.copy()
        b.setflags(write=False)
        object.__setattr__(self, "belief", b)

    @cached_property
    def key(self) -> tuple:
        return belief_key(self.belief)

    def __eq__(self, other) -> bool:
        return isinstance(other, WorldModelState) and self.key == other.key

    def __hash__(self) -> int:
        return hash(self.key)

    def __repr__(self) -> str:
        return f"WorldModelState({np.round(self.belief, 4).tolist()})"


def one_hot(n: int, i: int) -> WorldModelState:
    b = np.zeros(n)
    b[i] = 1.0
    return WorldModelState(b)


@dataclass(frozen=True, eq=False)
class TabularWorldModel:
    """Transition, reward and observation estimates of a POMDP.

    ``exact`` models wrap the source process itself; fitted ones carry the
    smoothing pseudo-count and the counts they were estimated from.
    """

    pomdp: TabularPomdp
    fitted: bool = False
    alpha: float = 0.0
    counts: Optional[dict] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def exact(cls, process: Process) -> "TabularWorldModel":
        return cls(as_pomdp(process))

    @property
    def n_states(self) -> int:
        return self.pomdp.n_states

    @property
    def n_actions(self) -> int:
        return self.pomdp.n_actions

    @property
    def n_obs(self) -> int:
        return self.pomdp.n_obs

    @property
    def mdp(self) -> TabularMdp:
        return self.pomdp.mdp

    @cached_property
    def reward_values(self) -> tuple[float, ...]:
        return tuple(sorted({r for row in self.mdp.kernel for outs in row for _, r, _ in outs}))

    @cached_property
    def _reward_index(self) -> dict:
        return {r: i for i, r in enumerate(self.reward_values)}

    @cached_property
    def joint(self) -> np.ndarray:
        """J[a, r_index, s, s'] = T(s', r | s, a)."""
        S, A = self.n_states, self.n_actions
        J = np.zeros((A, len(self.reward_values), S, S))
        for s, row in enumerate(self.mdp.kernel):
            for a, outs in enumerate(row):
                for nxt, r, p in outs:
                    J[a, self._reward_index[r], s, nxt] += p
        J.setflags(write=False)
        return J

    @cached_property
    def marginal(self) -> np.ndarray:
        """M[a, s, s'] = T(s' | s, a)."""
        M = np.ascontiguousarray(self.mdp.transition.transpose(1, 0, 2))
        M.setflags(write=False)
        return M

    def reward_index(self, r: float) -> int:
        try:
            return self._reward_index[float(r)]
        except KeyError:
            raise ModelMismatchError(f"reward {r} is outside the model's reward support") from None

    def to_dict(self) -> dict:
        d = self.pomdp.to_dict()
        d["fitted"] = self.fitted
        d["alpha"] = self.alpha
        d["counts"] = self.counts
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "TabularWorldModel":
        from .core import process_from_dict

        return cls(as_pomdp(process_from_dict(d)), bool(d.get("fitted", False)), float(d.get("alpha", 0.0)), d.get("counts"))


Model = TabularWorldModel


def prior(model: Model) -> WorldModelState:
    """Belief before the first observation: a point mass at the initial state."""
    return one_hot(model.n_states, model.mdp.initial_state)


def _normalize(unnorm: np.ndarray, what: str) -> WorldModelState:
    z = unnorm.sum()
    if not z > 0.0:
        raise ModelMismatchError(f"{what} has zero predictive probability under the model")
    return WorldModelState(unnorm / z)


def observe(model: Model, b: WorldModelState, o: int) -> WorldModelState:
    """Condition ``b`` on an observation of the current state (no transition)."""
    return _normalize(b.belief * model.pomdp.obs_matrix[:, o], f"observation {o}")


def predict_belief(model: Model, b: WorldModelState, a: int) -> WorldModelState:
    """Push ``b`` through the marginal dynamics of action ``a``."""
    out = b.belief @ model.marginal[a]
    return WorldModelState(out / out.sum())


def belief_update(
    model: Model, b: WorldModelState, a: int, o: int, r: Optional[float] = None
) -> WorldModelState:
    """Posterior after taking ``a`` in ``b`` and observing ``o`` (and reward ``r`` if given).

    b'(s') is proportional to O(o|s') * sum_s T(s'|s,a) b(s); with a reward the
    joint T(s', r|s, a) replaces the marginal.
    """
    ck = (b.key, a, o, r)
    hit = model._cache.get(ck)
    if hit is not None:
        return hit
    if r is None:
        push = b.belief @ model.marginal[a]
    else:
        push = b.belief @ model.joint[a, model.reward_index(r)]
    out = _normalize(push * model.pomdp.obs_matrix[:, o], f"observation {o} after action {a}")
    model._cache[ck] = out
    return out


def observation_probs(model: Model, b: WorldModelState, a: int) -> np.ndarray:
    """Pr(o | b, a) for every observation."""
    return (b.belief @ model.marginal[a]) @ model.pomdp.obs_matrix


def start_branches(model: Model) -> list[tuple[float, WorldModelState]]:
    """Law of the initial imagined latent: the prior conditioned on a sampled first observation."""
    b0 = prior(model)
    po = b0.belief @ model.pomdp.obs_matrix
    return [(float(po[o]), observe(model, b0, o)) for o in range(model.n_obs) if po[o] > 0.0]


def imagine_start(model: Model, rng: np.random.Generator) -> WorldModelState:
    b0 = prior(model)
    po = b0.belief @ model.pomdp.obs_matrix
    o = _draw(po, rng)
    return observe(model, b0, o)


def _draw(p: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(p)
    return min(int(np.searchsorted(c, rng.random() * c[-1], side="right")), len(p) - 1)


def imagine_step(
    model: Model, b: WorldModelState, a: int, rng: np.random.Generator
) -> tuple[WorldModelState, float]:
    """Sampled imagination: s ~ b, (s', r) ~ T(. | s, a), o' ~ O(. | s'), then filter."""
    s = _draw(b.belief, rng)
    outs = model.mdp.kernel[s][a]
    k = _draw(np.array([p for _, _, p in outs]), rng)
    s_next, r, _ = outs[k]
    o = _draw(model.pomdp.obs_matrix[s_next], rng)
    return belief_update(model, b, a, o, r), r


def imagine_branches(model: Model, b: WorldModelState, a: int) -> list[tuple[float, WorldModelState, float]]:
    """Every ``(probability, next latent, reward)`` that ``imagine_step`` can return."""
    ck = ("branches", b.key, a)
    hit = model._cache.get(ck)
    if hit is not None:
        return hit
    out = []
    O = model.pomdp.obs_matrix
    for ri, r in enumerate(model.reward_values):
        push = b.belief @ model.joint[a, ri]
        if not push.sum() > 0.0:
            continue
        po = push @ O
        for o in np.flatnonzero(po > 0.0):
            out.append((float(po[o]), belief_update(model, b, a, int(o), r), r))
    model._cache[ck] = out
    return out


def expected_reward(model: Model, b: WorldModelState, a: int) -> float:
    return float(b.belief @ model.mdp.expected_reward[:, a])


# ---------------------------------------------------------------------------
# fitting from replay


def fit_tabular_model(
    buffer: ReplayBuffer,
    n_states: int,
    n_actions: int,
    n_obs: int,
    alpha: float = 1.0,
    gamma: float = 0.9,
    initial_state: int = 0,
) -> TabularWorldModel:
    """Count-based maximum-likelihood model with Laplace smoothing ``alpha``.

    Hidden-state labels come from the episodes' state channel; without it the
    observation is used as the state label, which needs ``n_obs == n_states``.
    Rewards follow the empirical distribution over the values seen for each
    ``(s, a, s')``.  Rows with no counts (and ``alpha == 0``) fall back to uniform.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    if not buffer.episodes:
        raise ValueError("cannot fit a model from an empty buffer")
    S, A, O = n_states, n_actions, n_obs
    c_trans = np.zeros((S, A, S))
    c_obs = np.zeros((S, O))
    c_rew: dict = {}
    for ep in buffer.episodes:
        if ep.states is not None:
            labels = ep.states
        elif S == O:
            labels = ep.obs
        else:
            raise ValueError("episodes carry no state labels and observations are not states")
        for k in range(len(ep)):
            s, a, o, r = labels[k], ep.actions[k], ep.obs[k], ep.rewards[k]
            if not (0 <= s < S and 0 <= a < A and 0 <= o < O):
                raise ValueError(f"transition {(s, a, o)} outside the declared dimensions")
            c_obs[s, o] += 1
            if k + 1 < len(labels) and (ep.states is not None or k + 1 < len(ep)):
                s2 = labels[k + 1]
                if not 0 <= s2 < S:
                    raise ValueError(f"state {s2} outside the declared dimensions")
                c_trans[s, a, s2] += 1
                bucket = c_rew.setdefault((s, a, s2), {})
                bucket[r] = bucket.get(r, 0) + 1

    entries = []
    for s in range(S):
        for a in range(A):
            row = c_trans[s, a] + alpha
            row = row / row.sum() if row.sum() > 0 else np.full(S, 1.0 / S)
            seen_sa: dict = {}
            for s2 in range(S):
                for r, c in c_rew.get((s, a, s2), {}).items():
                    seen_sa[r] = seen_sa.get(r, 0) + c
            for s2 in range(S):
                if row[s2] == 0.0:
                    continue
                rdist = c_rew.get((s, a, s2)) or seen_sa or {0.0: 1}
                total = sum(rdist.values())
                for r, c in sorted(rdist.items()):
                    entries.append((s, a, s2, r, row[s2] * c / total))
    mdp = TabularMdp.from_entries(S, A, entries, gamma, initial_state)
    # renormalization guards the summed products against ulp drift
    mdp = _renormalized(mdp)
    obs = c_obs + alpha
    sums = obs.sum(axis=1, keepdims=True)
    obs = np.where(sums > 0, obs / np.where(sums > 0, sums, 1.0), 1.0 / O)
    counts = {"transitions": c_trans.tolist(), "observations": c_obs.tolist()}
    return TabularWorldModel(TabularPomdp(mdp, obs), fitted=True, alpha=float(alpha), counts=counts)


def _renormalized(mdp: TabularMdp) -> TabularMdp:
    kernel = tuple(
        tuple(tuple((n, r, p / sum(q for _, _, q in outs)) for n, r, p in outs) for outs in row)
        for row in mdp.kernel
    )
    return TabularMdp(mdp.n_states, mdp.n_actions, kernel, mdp.gamma, mdp.initial_state)


def perturb_model(model: TabularWorldModel, s: int, a: int, amount: float = 0.2, target: Optional[int] = None) -> TabularWorldModel:
    """Move ``amount`` of the transition mass of ``(s, a)`` onto successor ``target``.

    The new row is ``(1 - amount) * row + amount * e_target``, so its total
    variation from the original is at most ``amount`` and no support is lost.
    ``target`` defaults to the least likely successor.
    """
    mdp = model.mdp
    P = mdp.transition[s, a]
    if target is None:
        target = int(np.argmin(P))
    outs = mdp.kernel[s][a]
    new = [(n, r, p * (1.0 - amount)) for n, r, p in outs]
    existing = [i for i, (n, _, _) in enumerate(new) if n == target]
    if existing:
        i = existing[0]
        n, r, p = new[i]
        new[i] = (n, r, p + amount)
    else:
        new.append((target, 0.0, amount))
    rows = [list(row) for row in mdp.kernel]
    rows[s][a] = tuple(new)
    kernel = tuple(tuple(row) for row in rows)
    bad = TabularMdp(mdp.n_states, mdp.n_actions, kernel, mdp.gamma, mdp.initial_state)
    return TabularWorldModel(TabularPomdp(bad, model.pomdp.obs_matrix), fitted=True, alpha=model.alpha)


# ---------------------------------------------------------------------------
# delayed world model


class DelayedWorldModel:
    """The d-step delayed view of a world model.

    Imagination: at step t the latent from d steps ago is exposed (DUMMY for
    t < d), the action advances the inner model, and the reward from d steps
    ago is returned (0 for t < d).  Interaction: the first d steps are
    dummies; from t = d on, the delayed observation o_{t-d} is fed in and the
    inner model is advanced by a_{t-d}, the action taken d steps earlier.

    State is held in immutable tuples so ``copy.copy`` branches a model.
    """

    def __init__(self, inner: TabularWorldModel, d: int):
        if d < 0:
            raise ValueError("delay must be nonnegative")
        self.inner = inner
        self.d = d
        self._mode: Optional[str] = None
        self.t = 0
        self._latents: tuple = ()
        self._rewards: tuple = ()
        self._actions: tuple = ()
        self._current = None

    # imagination -------------------------------------------------------

    def reset_imagination(self, rng: Optional[np.random.Generator] = None, start: Optional[WorldModelState] = None):
        if start is None:
            if rng is None:
                raise ValueError("need an rng or an explicit start latent")
            start = imagine_start(self.inner, rng)
        self._mode = "imagination"
        self.t = 0
        self._latents = (start,)
        self._rewards = ()
        return self.exposed

    @property
    def exposed(self):
        """The latent currently readable from the delayed model."""
        if self._mode is None:
            raise RuntimeError("world model state read before reset")
        if self._mode == "imagination":
            return self._latents[0] if self.t >= self.d else DUMMY
        return self._current

    def _advance(self, nxt: WorldModelState, r: float):
        self._latents = (self._latents + (nxt,))[-(self.d + 1):]
        self._rewards = (self._rewards + (r,))[-(self.d + 1):]
        out = self._rewards[0] if self.t >= self.d else 0.0
        self.t += 1
        return out

    def _require(self, mode: str) -> None:
        if self._mode != mode:
            raise RuntimeError(f"model is not in {mode} mode; call reset_{mode}() first")

    def imagine(self, a: int, rng: np.random.Generator) -> tuple[object, float]:
        """One imagination step; returns (exposed latent before the step, delayed reward)."""
        self._require("imagination")
        shown = self.exposed
        nxt, r = imagine_step(self.inner, self._latents[-1], a, rng)
        return shown, self._advance(nxt, r)

    def imagine_outcomes(self, a: int) -> list[tuple[float, "DelayedWorldModel", object, float]]:
        """All (probability, advanced copy, exposed latent, delayed reward) of ``imagine``."""
        self._require("imagination")
        shown = self.exposed
        out = []
        for p, nxt, r in imagine_branches(self.inner, self._latents[-1], a):
            child = copy.copy(self)
            out.append((p, child, shown, child._advance(nxt, r)))
        return out

    # interaction -------------------------------------------------------

    def reset_interaction(self):
        self._mode = "interaction"
        self.t = 0
        self._actions = ()
        self._current = DUMMY
        return self._current

    def feed(self, obs, arrived_reward: float = 0.0):
        """Feed the delayed observation of step t and read the delayed latent."""
        self._require("interaction")
        t, d = self.t, self.d
        if t < d:
            if not is_dummy(obs):
                raise ValueError(f"step {t} < d={d} must carry the dummy observation")
            self._current = DUMMY
        elif t == d:
            self._current = observe(self.inner, prior(self.inner), int(obs))
        else:
            back = self._actions[0]  # a_{t-d-1}
            self._current = belief_update(self.inner, self._current, back, int(obs), arrived_reward)
        return self._current

    def take(self, a: int) -> None:
        """Record the action executed in the environment at step t."""
        self._require("interaction")
        self._actions = (self._actions + (int(a),))[-(self.d + 1):]
        self.t += 1

    def state_key(self) -> tuple:
        if self._mode == "imagination":
            return ("im", self.t, tuple(m.key for m in self._latents), self._rewards)
        cur = None if is_dummy(self._current) else self._current.key
        return ("in", self.t, cur, self._actions)


def make_delayed(model: TabularWorldModel, d: int) -> DelayedWorldModel:
    return DelayedWorldModel(model, d)


# ---------------------------------------------------------------------------
# congruence


@dataclass(frozen=True)
class CongruenceReport:
    tv_distance: float
    horizon: int
    d: int
    passed: bool
    tol: float

    def to_json(self) -> dict:
        return {"tv_distance": self.tv_distance, "horizon": self.horizon, "d": self.d, "pass": self.passed}


def _atom(state) -> object:
    return "dummy" if is_dummy(state) else state.key


def _push(dist: dict, key, p: float, payload, limit: int) -> None:
    entry = dist.get(key)
    if entry is None:
        if len(dist) >= limit:
            raise EnumerationLimitError(f"enumeration exceeds {limit} branches")
        dist[key] = [p, payload]
    else:
        entry[0] += p


def interaction_law(
    model: DelayedWorldModel, env: TabularPomdp, d: int, actions: Sequence[int], horizon: int, limit: int = 10**6
) -> dict:
    """Law of (latent, delayed reward) sequences when the model filters the delayed environment."""
    mdp, O = env.mdp, env.obs_matrix
    done: dict = {}
    m0 = copy.copy(model)
    m0.reset_interaction()
    # key: (hidden s_t, undelivered observations, rewards r_{t-d-1}..r_{t-1}, atoms)
    dist: dict = {(mdp.initial_state, (), (), ()): [1.0, m0]}
    for t in range(horizon):
        a = actions[t]
        new: dict = {}
        for (s, obs_q, rew_q, atoms), (p, m) in dist.items():
            for o in np.flatnonzero(O[s] > 0.0):
                po = p * O[s, o]
                oq = obs_q + (int(o),)
                if t >= d:
                    seen, oq = oq[0], oq[1:]
                    arrived = rew_q[0] if t > d else 0.0
                else:
                    seen, arrived = DUMMY, 0.0
                child = copy.copy(m)
                try:
                    shown = child.feed(seen, arrived)
                except ModelMismatchError:
                    key = atoms + ("mismatch",)
                    done[key] = done.get(key, 0.0) + po
                    continue
                child.take(a)
                for s2, r, q in mdp.kernel[s][a]:
                    rq = rew_q + (r,)
                    delivered = rq[-(d + 1)] if t >= d else 0.0
                    key = (s2, oq, rq[-(d + 1):], atoms + ((_atom(shown), delivered),))
                    _push(new, key, po * q, child, limit)
        dist = new
    law = dict(done)
    for (_, _, _, atoms), (p, _) in dist.items():
        law[atoms] = law.get(atoms, 0.0) + p
    return law


def imagination_law(model: DelayedWorldModel, actions: Sequence[int], horizon: int, limit: int = 10**6) -> dict:
    """Law of (exposed latent, delayed reward) sequences in the model's imagination."""
    dist: dict = {}
    for p, m0 in start_branches(model.inner):
        dm = copy.copy(model)
        dm.reset_imagination(start=m0)
        _push(dist, (dm.state_key(), ()), p, dm, limit)
    for t in range(horizon):
        new: dict = {}
        for (_, atoms), (p, dm) in dist.items():
            for q, child, shown, r in dm.imagine_outcomes(actions[t]):
                _push(new, (child.state_key(), atoms + ((_atom(shown), r),)), p * q, child, limit)
        dist = new
    law: dict = {}
    for (_, atoms), (p, _) in dist.items():
        law[atoms] = law.get(atoms, 0.0) + p
    return law


def total_variation(p: dict, q: dict) -> float:
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in set(p) | set(q))


def congruence_check(
    model: Union[TabularWorldModel, DelayedWorldModel],
    env: Union[Process, DelayedPomdp],
    action_seq: Sequence[int],
    horizon: int,
    tol: float = 1e-9,
    max_branches: int = 10**6,
) -> CongruenceReport:
    """Compare interaction and imagination laws of (latent, reward) sequences by enumeration.

    Latents are compared as belief values keyed to 12 decimals.
    """
    if isinstance(model, TabularWorldModel):
        model = DelayedWorldModel(model, 0)
    if isinstance(env, DelayedPomdp):
        pomdp, d = env.pomdp, env.d
    else:
        pomdp, d = as_pomdp(env), 0
    if model.d != d:
        raise ValueError(f"model delay {model.d} does not match environment delay {d}")
    if len(action_seq) < horizon:
        raise ValueError("action sequence shorter than the horizon")
    real = interaction_law(model, pomdp, d, action_seq, horizon, max_branches)
    imagined = imagination_law(model, action_seq, horizon, max_branches)
    tv = total_variation(real, imagined)
    return CongruenceReport(float(tv), horizon, d, bool(tv <= tol), tol)
