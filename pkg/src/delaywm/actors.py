"""Delay-handling actors.

Four strategies condition the action at time t on different summaries of the
delayed information ``(m_{t-d}, a_{t-d}, ..., a_{t-1})``:

* ``extended``: the whole extended state (latent plus action queue);
* ``memoryless``: the delayed latent ``m_{t-d}`` alone;
* ``latent_deterministic`` / ``latent_sampled``: the current latent predicted
  by rolling ``m_{t-d}`` through the queue, marginally or by sampling;
* ``agnostic``: an actor trained without delay, deployed under delay with
  deterministic (default) or sampled latent prediction.

Each can be solved exactly on small MDPs where its policy class is finite,
or trained by actor-critic in the imagination of a tabular world model.
"""

from __future__ import annotations

import json
from bisect import bisect_right
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from itertools import product
from typing import Optional, Sequence

import numpy as np

from .core import (
    DEFAULT_TOL,
    PolicyTable,
    Process,
    TabularMdp,
    ValueFunction,
    as_pomdp,
    base_mdp,
    policy_evaluation,
    value_iteration,
)
from .delay import (
    DUMMY,
    DelaySchedule,
    ReplayBuffer,
    collect_buffer,
    decode_extended,
    delayed_rollout,
    extend_mdp,
    is_dummy,
    lift_memoryless,
)
from .errors import EnumerationLimitError
from .worldmodel import (
    DelayedWorldModel,
    TabularWorldModel,
    WorldModelState,
    belief_key,
    belief_update,
    imagine_branches,
    imagine_step,
    observe,
    one_hot,
    predict_belief,
    prior,
)

MAX_MEMORYLESS_POLICIES = 10**5


class Strategy(str, Enum):
    EXTENDED = "extended"
    MEMORYLESS = "memoryless"
    LATENT_DETERMINISTIC = "latent_deterministic"
    LATENT_SAMPLED = "latent_sampled"
    AGNOSTIC = "agnostic"
    RANDOM = "random"  # uniform reference policy


LATENT_STRATEGIES = (Strategy.LATENT_DETERMINISTIC, Strategy.LATENT_SAMPLED, Strategy.AGNOSTIC)


@dataclass(frozen=True)
class TrainConfig:
    """Imagination actor-critic settings.

    ``collect_episodes`` x ``collect_horizon`` random-action transitions seed
    the replay buffer when a pipeline gathers its own data.  Policy and critic
    tables key beliefs rounded to ``key_decimals`` digits.
    """

    horizon: int = 16
    lam: float = 0.95
    actor_lr: float = 0.1
    critic_lr: float = 0.1
    entropy_coeff: float = 0.01
    updates: int = 1000
    batch: int = 16
    seed: int = 0
    key_decimals: int = 3
    collect_episodes: int = 20
    collect_horizon: int = 50

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("imagination horizon must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.actor_lr <= 0 or self.critic_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.updates < 0 or self.batch < 1:
            raise ValueError("updates must be >= 0 and batch >= 1")


@dataclass(frozen=True, eq=False)
class ActorSpec:
    """A delay-handling actor: strategy, delay, policy table and critic table.

    With the ``table`` parameterization ``policy`` maps keys to action
    distributions; keys never seen fall back to the nearest stored key (L1 on
    the belief part plus Hamming distance on the queue), or to uniform when the
    table is empty.  The ``additive`` parameterization (extended actors only)
    stores logit blocks ``("belief", b)`` and ``("slot", i, a)`` whose sum over
    the belief and the queued actions gives the logits, so that what is learned
    about a belief is shared across queues.  ``warmup`` holds the actions an
    extended or memoryless actor plays before its first observation when a
    rollout lets it choose them.
    """

    strategy: Strategy
    d: int
    n_actions: int
    policy: dict = field(default_factory=dict)
    critic: dict = field(default_factory=dict)
    mode: str = "deterministic"
    warmup: Optional[tuple] = None
    key_decimals: int = 3
    config: Optional[TrainConfig] = None
    parameterization: str = "table"
    _nearest: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.d < 0:
            raise ValueError("delay must be nonnegative")
        if self.mode not in ("deterministic", "sampled"):
            raise ValueError(f"unknown imagination mode {self.mode!r}")
        if self.strategy is Strategy.LATENT_SAMPLED and self.mode != "sampled":
            object.__setattr__(self, "mode", "sampled")
        if self.warmup is not None and len(self.warmup) != self.d:
            raise ValueError(f"warmup must hold {self.d} actions")
        if self.parameterization not in ("table", "additive"):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        if self.parameterization == "additive" and self.strategy is not Strategy.EXTENDED:
            raise ValueError("the additive parameterization applies to extended actors only")

    def probs(self, key) -> np.ndarray:
        if self.parameterization == "additive":
            return _softmax(self.logits(key))
        hit = self.policy.get(key)
        if hit is not None:
            return hit
        if not self.policy:
            return np.full(self.n_actions, 1.0 / self.n_actions)
        near = self._nearest.get(key)
        if near is None:
            near = min(self.policy, key=lambda k: _key_distance(k, key))
            self._nearest[key] = near
        return self.policy[near]

    def logits(self, key) -> np.ndarray:
        """Additive logits for an extended key ``(belief, queue)``."""
        b, queue = key
        z = self.policy.get(("belief", b))
        if z is None:
            near = self._nearest.get(b)
            if near is None:
                beliefs = [k[1] for k in self.policy if k[0] == "belief"]
                near = min(beliefs, key=lambda k: _key_distance(k, b)) if beliefs else ()
                self._nearest[b] = near
            z = self.policy.get(("belief", near), np.zeros(self.n_actions))
        for i, a in enumerate(queue):
            block = self.policy.get(("slot", i, a))
            if block is not None:
                z = z + block
        return z

    def value(self, key) -> float:
        return float(self.critic.get(key, 0.0))

    def with_delay(self, d: int) -> "ActorSpec":
        warm = None if self.warmup is None else (tuple(self.warmup) + (0,) * d)[:d]
        return replace(self, d=d, warmup=warm, _nearest={})

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "d": self.d,
            "n_actions": self.n_actions,
            "mode": self.mode,
            "warmup": None if self.warmup is None else list(self.warmup),
            "key_decimals": self.key_decimals,
            "policy": {json.dumps(_listify(k)): [float(p) for p in v] for k, v in self.policy.items()},
            "critic": {json.dumps(_listify(k)): float(v) for k, v in self.critic.items()},
            "config": None if self.config is None else asdict(self.config),
            "parameterization": self.parameterization,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "ActorSpec":
        return cls(
            Strategy(d["strategy"]),
            int(d["d"]),
            int(d["n_actions"]),
            {_tuplify(json.loads(k)): np.asarray(v, dtype=float) for k, v in d["policy"].items()},
            {_tuplify(json.loads(k)): float(v) for k, v in d["critic"].items()},
            d.get("mode", "deterministic"),
            None if d.get("warmup") is None else tuple(d["warmup"]),
            int(d.get("key_decimals", 3)),
            None if d.get("config") is None else TrainConfig(**d["config"]),
            d.get("parameterization", "table"),
        )


def _listify(k):
    return [_listify(x) for x in k] if isinstance(k, tuple) else k


def _tuplify(k):
    return tuple(_tuplify(x) for x in k) if isinstance(k, list) else k


def _key_distance(a, b) -> float:
    if a and isinstance(a[0], tuple):
        (ba, qa), (bb, qb) = a, b
        return sum(abs(x - y) for x, y in zip(ba, bb)) + sum(x != y for x, y in zip(qa, qb))
    return sum(abs(x - y) for x, y in zip(a, b))


def random_spec(n_actions: int, d: int = 0) -> ActorSpec:
    return ActorSpec(Strategy.RANDOM, d, n_actions)


# ---------------------------------------------------------------------------
# actor inputs


def predict_through(model: TabularWorldModel, m: WorldModelState, queue: Sequence[int]) -> WorldModelState:
    """Marginal prediction of the current latent from ``m`` through the queued actions."""
    for a in queue:
        m = predict_belief(model, m, a)
    return m


def sample_through(
    model: TabularWorldModel, m: WorldModelState, queue: Sequence[int], rng: np.random.Generator
) -> WorldModelState:
    for a in queue:
        m, _ = imagine_step(model, m, a, rng)
    return m


def actor_key(
    spec: ActorSpec,
    model: TabularWorldModel,
    m_delayed: WorldModelState,
    queue: Sequence[int],
    rng: Optional[np.random.Generator] = None,
):
    """The policy-table key an actor reads from the delayed information."""
    queue = tuple(queue)
    if len(queue) != spec.d:
        raise ValueError(f"queue has {len(queue)} actions, the actor expects d={spec.d}")
    k = spec.key_decimals
    if spec.strategy is Strategy.EXTENDED:
        return (belief_key(m_delayed.belief, k), queue)
    if spec.strategy in (Strategy.MEMORYLESS, Strategy.RANDOM):
        return belief_key(m_delayed.belief, k)
    if spec.mode == "sampled":
        if rng is None:
            raise ValueError("sampled imagination needs an rng")
        return belief_key(sample_through(model, m_delayed, queue, rng).belief, k)
    return belief_key(predict_through(model, m_delayed, queue).belief, k)


def _draw(p: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(p)
    return min(int(np.searchsorted(c, rng.random() * c[-1], side="right")), len(p) - 1)


def act(spec: ActorSpec, model: TabularWorldModel, m_delayed: WorldModelState, queue, rng) -> int:
    if spec.strategy is Strategy.RANDOM:
        return int(rng.integers(spec.n_actions))
    return _draw(spec.probs(actor_key(spec, model, m_delayed, queue, rng)), rng)


def latent_act(spec: ActorSpec, model: TabularWorldModel, m_delayed: WorldModelState, queue, rng) -> int:
    """Act on the current latent imagined from ``m_delayed`` through ``queue``."""
    if spec.strategy not in LATENT_STRATEGIES:
        raise ValueError(f"{spec.strategy.value} actors do not imagine the current latent")
    return act(spec, model, m_delayed, queue, rng)


class ActorAgent:
    """Rollout callback that filters delayed observations and queries an actor."""

    def __init__(self, spec: ActorSpec, model: TabularWorldModel):
        self.spec = spec
        self.model = model
        self.tracker = DelayedWorldModel(model, spec.d)

    def reset(self) -> None:
        self.tracker.reset_interaction()

    def __call__(self, t, obs, reward, actions, rng) -> int:
        tr, d = self.tracker, self.spec.d
        # warm-up steps the agent was not asked about
        while tr.t < t:
            tr.feed(DUMMY, 0.0)
            tr.take(actions[tr.t])
        m = tr.feed(obs, reward)
        if is_dummy(m):
            a = self._warmup_action(t, actions, rng)
        else:
            a = act(self.spec, self.model, m, actions[t - d:t] if d else (), rng)
        tr.take(a)
        return a

    def _warmup_action(self, t, actions, rng) -> int:
        spec = self.spec
        if spec.strategy is Strategy.RANDOM:
            return int(rng.integers(spec.n_actions))
        if spec.strategy in LATENT_STRATEGIES:
            m = predict_through(self.model, prior(self.model), actions[:t])
            return _draw(spec.probs(belief_key(m.belief, spec.key_decimals)), rng)
        return int(spec.warmup[t]) if spec.warmup is not None else 0


def evaluate_actor(
    process: Process,
    schedule: DelaySchedule,
    spec: ActorSpec,
    episodes: int,
    horizon: int,
    seed: int,
    model: Optional[TabularWorldModel] = None,
    warmup="random",
) -> tuple[float, float]:
    """Mean and standard error of the reward-time discounted return over ``horizon`` rewards.

    Each episode runs ``horizon + d`` agent steps so that ``horizon`` rewards arrive.
    """
    if episodes < 1:
        raise ValueError("need at least one episode")
    if spec.d != schedule.d:
        spec = spec.with_delay(schedule.d)
    model = model or TabularWorldModel.exact(process)
    gamma = as_pomdp(process).gamma
    agent = ActorAgent(spec, model)
    seeds = np.random.SeedSequence(seed).generate_state(episodes)
    returns = np.array(
        [
            delayed_rollout(process, schedule, agent, horizon + schedule.d, int(s), warmup).discounted_return(gamma)
            for s in seeds
        ]
    )
    stderr = float(returns.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0
    return float(returns.mean()), stderr


# ---------------------------------------------------------------------------
# exact solvers on fully observed MDPs


def solve_extended_optimal(mdp: TabularMdp, d: int, tol: float = DEFAULT_TOL) -> tuple[PolicyTable, ValueFunction]:
    """Optimal extended-state policy and values (start state: ``extend_mdp(mdp, d).initial_state``)."""
    values, table = value_iteration(extend_mdp(mdp, d), tol)
    return table, values


def solve_memoryless_optimal(
    mdp: TabularMdp, d: int, tol: float = DEFAULT_TOL, max_policies: int = MAX_MEMORYLESS_POLICIES
) -> tuple[PolicyTable, float]:
    """Best deterministic policy of the delayed state alone, by exhaustive scoring."""
    n = mdp.n_actions**mdp.n_states
    if n > max_policies:
        raise EnumerationLimitError(f"{n} memoryless policies exceed the cap of {max_policies}")
    ext = extend_mdp(mdp, d)
    best, best_v = None, -np.inf
    for actions in product(range(mdp.n_actions), repeat=mdp.n_states):
        table = PolicyTable.from_actions(actions, mdp.n_actions)
        v = policy_evaluation(ext, lift_memoryless(table, mdp.n_actions, d), tol)[ext.initial_state]
        if v > best_v + 1e-12:
            best, best_v = table, float(v)
    return best, best_v


def latent_groups(mdp: TabularMdp, d: int) -> tuple[list[int], list[tuple]]:
    """Group extended states by the current-state belief predicted from them.

    Returns the group index of every extended state and the group belief keys.
    """
    model = TabularWorldModel.exact(mdp)
    ext_n = mdp.n_states * mdp.n_actions**d
    keys: dict = {}
    groups = []
    for x in range(ext_n):
        e = decode_extended(x, mdp.n_actions, d)
        b = predict_through(model, one_hot(mdp.n_states, e.base), e.queue)
        groups.append(keys.setdefault(b.key, len(keys)))
    return groups, list(keys)


def solve_latent_optimal(
    mdp: TabularMdp, d: int, tol: float = DEFAULT_TOL, max_policies: int = MAX_MEMORYLESS_POLICIES
) -> tuple[PolicyTable, float]:
    """Best deterministic policy of the predicted current-state belief, by exhaustive scoring."""
    groups, keys = latent_groups(mdp, d)
    n = mdp.n_actions ** len(keys)
    if n > max_policies:
        raise EnumerationLimitError(f"{n} belief policies exceed the cap of {max_policies}")
    ext = extend_mdp(mdp, d)
    best, best_v = None, -np.inf
    for choice in product(range(mdp.n_actions), repeat=len(keys)):
        table = PolicyTable.from_actions([choice[g] for g in groups], mdp.n_actions)
        v = policy_evaluation(ext, table, tol)[ext.initial_state]
        if v > best_v + 1e-12:
            best, best_v = table, float(v)
    return best, best_v


def uniform_value(mdp: TabularMdp, d: int, tol: float = DEFAULT_TOL) -> float:
    ext = extend_mdp(mdp, d)
    return float(policy_evaluation(ext, PolicyTable.uniform(ext.n_states, ext.n_actions), tol)[ext.initial_state])


def spec_from_extended_table(mdp: TabularMdp, d: int, table: PolicyTable, key_decimals: int = 3) -> ActorSpec:
    """Wrap an extended-state policy of a fully observed MDP as an extended actor."""
    S, A = mdp.n_states, mdp.n_actions
    policy = {}
    for x in range(table.n_states):
        e = decode_extended(x, A, d)
        policy[(belief_key(one_hot(S, e.base).belief, key_decimals), e.queue)] = np.array(table.probs[x])
    return ActorSpec(Strategy.EXTENDED, d, A, policy, warmup=(0,) * d, key_decimals=key_decimals)


def spec_from_memoryless_table(mdp: TabularMdp, d: int, table: PolicyTable, key_decimals: int = 3) -> ActorSpec:
    S = mdp.n_states
    policy = {belief_key(one_hot(S, s).belief, key_decimals): np.array(table.probs[s]) for s in range(S)}
    return ActorSpec(Strategy.MEMORYLESS, d, mdp.n_actions, policy, warmup=(0,) * d, key_decimals=key_decimals)


def extended_policy(spec: ActorSpec, mdp: TabularMdp, model: Optional[TabularWorldModel] = None) -> PolicyTable:
    """The extended-state policy an actor induces on a fully observed MDP.

    Sampled latent prediction is expanded exactly into a mixture over the
    imagined latents.
    """
    model = model or TabularWorldModel.exact(mdp)
    S, A, d = mdp.n_states, mdp.n_actions, spec.d
    rows = np.zeros((S * A**d, A))
    for x in range(rows.shape[0]):
        e = decode_extended(x, A, d)
        m = one_hot(S, e.base)
        if spec.strategy is Strategy.RANDOM:
            rows[x] = 1.0 / A
        elif spec.strategy in LATENT_STRATEGIES and spec.mode == "sampled":
            for p, lat in _sampled_latents(model, m, e.queue):
                rows[x] += p * spec.probs(belief_key(lat.belief, spec.key_decimals))
        else:
            rows[x] = spec.probs(actor_key(spec, model, m, e.queue))
    return PolicyTable(rows / rows.sum(axis=1, keepdims=True))


def _sampled_latents(model, m, queue):
    dist = [(1.0, m)]
    for a in queue:
        dist = [(p * q, nxt) for p, lat in dist for q, nxt, _ in imagine_branches(model, lat, a)]
    return dist


def exact_start_value(spec: ActorSpec, mdp: TabularMdp, tol: float = DEFAULT_TOL) -> float:
    """Exact value of an actor on a fully observed MDP from ``(s0, warmup)``."""
    warm = spec.warmup if spec.warmup is not None else (0,) * spec.d
    ext = extend_mdp(mdp, spec.d, warmup=warm)
    return float(policy_evaluation(ext, extended_policy(spec, mdp), tol)[ext.initial_state])


# ---------------------------------------------------------------------------
# actor-critic in imagination


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def _episode_latents(model: TabularWorldModel, ep) -> list[WorldModelState]:
    m = observe(model, prior(model), ep.obs[0])
    out = [m]
    for k in range(len(ep) - 1):
        m = belief_update(model, m, ep.actions[k], ep.obs[k + 1], ep.rewards[k])
        out.append(m)
    return out


def _lambda_returns(rewards: Sequence[float], values: Sequence[float], gamma: float, lam: float) -> np.ndarray:
    """R_i = r_i + gamma * ((1 - lam) * v_{i+1} + lam * R_{i+1}), bootstrapped with v_n."""
    n = len(rewards)
    R = np.empty(n)
    nxt = values[n]
    for i in range(n - 1, -1, -1):
        nxt = rewards[i] + gamma * ((1.0 - lam) * values[i + 1] + lam * nxt)
        R[i] = nxt
    return R


class _LatentGraph:
    """Imagined latents interned as integers, with cached branch tables.

    Sampling a step draws one uniform against the cached cumulative branch
    weights, which has the same law as ``imagine_step``.
    """

    def __init__(self, model: TabularWorldModel, decimals: int):
        self.model = model
        self.decimals = decimals
        self.states: list[WorldModelState] = []
        self.coarse: list[tuple] = []
        self._ids: dict = {}
        self._steps: dict = {}
        self._predicted: dict = {}

    def node(self, m: WorldModelState) -> int:
        i = self._ids.get(m.key)
        if i is None:
            i = self._ids[m.key] = len(self.states)
            self.states.append(m)
            self.coarse.append(belief_key(m.belief, self.decimals))
        return i

    def _table(self, i: int, a: int):
        hit = self._steps.get((i, a))
        if hit is None:
            branches = imagine_branches(self.model, self.states[i], a)
            cum = list(np.cumsum([p for p, _, _ in branches]))
            hit = self._steps[(i, a)] = (cum, [(self.node(m), r) for _, m, r in branches])
        return hit

    def sample(self, i: int, a: int, rng: np.random.Generator) -> tuple[int, float]:
        cum, outs = self._table(i, a)
        return outs[min(bisect_right(cum, rng.random() * cum[-1]), len(outs) - 1)]

    def predicted_key(self, i: int, queue: tuple) -> tuple:
        hit = self._predicted.get((i, queue))
        if hit is None:
            m = predict_through(self.model, self.states[i], queue)
            hit = self._predicted[(i, queue)] = belief_key(m.belief, self.decimals)
        return hit

    def sampled_key(self, i: int, queue: tuple, rng: np.random.Generator) -> tuple:
        for a in queue:
            i, _ = self.sample(i, a, rng)
        return self.coarse[i]


def train_actor_critic_imagination(
    model: TabularWorldModel, spec: ActorSpec, buffer: ReplayBuffer, cfg: TrainConfig
) -> ActorSpec:
    """Tabular actor-critic on latent trajectories imagined from replay start points.

    Start points ``(m_j, a_j..a_{j+d-1})`` come from the buffer, with ``m_j``
    filtered from the stored undelayed episode.  The imagined latent chain runs
    ``H + d`` steps: the first ``d`` replay the stored queue, after which every
    step executes the action the actor chose ``d`` steps earlier.  For the
    extended and memoryless actors the critic scores the true imagined latent,
    so the return and baseline paired with actor decision ``k`` sit at chain
    index ``k + d``; the ``d`` queued steps only train the critic.  Latent
    actors (and the agnostic one, which trains with d = 0) score their own
    predicted latent.  The critic regresses onto lambda-returns and the actor
    follows the policy gradient with the critic baseline plus an entropy bonus.
    """
    if not buffer.episodes:
        raise ValueError("cannot train from an empty replay buffer")
    strategy = spec.strategy
    if strategy is Strategy.RANDOM:
        return spec
    d = 0 if strategy is Strategy.AGNOSTIC else spec.d
    H, A = cfg.horizon, model.n_actions
    gamma, lam = model.mdp.gamma, cfg.lam
    rng = np.random.default_rng(cfg.seed)
    graph = _LatentGraph(model, cfg.key_decimals)

    latents = [[graph.node(m) for m in _episode_latents(model, ep)] for ep in buffer.episodes]
    starts = [(i, k) for i, ep in enumerate(buffer.episodes) for k in range(len(ep)) if k + d <= len(ep.actions)]
    if not starts:
        raise ValueError("no replay index has a complete action window")
    logits: dict = {}
    critic: dict = dict(spec.critic)
    true_latent_critic = strategy in (Strategy.EXTENDED, Strategy.MEMORYLESS)
    sampled = spec.mode == "sampled"

    additive = spec.parameterization == "additive"

    def blocks_of(key):
        if not additive:
            return (key,)
        b, q = key
        return (("belief", b),) + tuple(("slot", n, a) for n, a in enumerate(q))

    def current_logits(key):
        z = np.zeros(A)
        for block in blocks_of(key):
            z = z + logits.setdefault(block, np.zeros(A))
        return z

    def decide_key(i, q):
        if strategy is Strategy.EXTENDED:
            return (graph.coarse[i], q)
        if strategy is Strategy.MEMORYLESS or d == 0:
            return graph.coarse[i]
        return graph.sampled_key(i, q, rng) if sampled else graph.predicted_key(i, q)

    for _ in range(cfg.updates):
        actor_acc: dict = {}
        critic_acc: dict = {}
        cums: dict = {}
        for pick in rng.integers(len(starts), size=cfg.batch):
            e, j = starts[pick]
            i = latents[e][j]
            q = tuple(buffer.episodes[e].actions[j:j + d])
            chain, rewards = [i], []
            decisions = []
            own_keys = []
            for step in range(H + d):
                if step < H:
                    key = decide_key(i, q)
                    cum = cums.get(key)
                    if cum is None:
                        cum = cums[key] = list(np.cumsum(_softmax(current_logits(key))))
                    a_new = min(bisect_right(cum, rng.random()), A - 1)
                    decisions.append((key, a_new))
                    own_keys.append(key)
                    q = q + (a_new,)
                i, r = graph.sample(i, q[0], rng)
                q = q[1:]
                chain.append(i)
                rewards.append(r)
                if step + 1 == H and not true_latent_critic:
                    own_keys.append(decide_key(i, q))
            if true_latent_critic:
                c_keys = [graph.coarse[x] for x in chain]
                v = [critic.get(c, 0.0) for c in c_keys]
                R = _lambda_returns(rewards, v, gamma, lam)
                adv = R[d:d + H] - np.asarray(v[d:d + H])
            else:
                c_keys = own_keys
                v = [critic.get(c, 0.0) for c in c_keys]
                R = _lambda_returns(rewards[d:d + H], v, gamma, lam)
                adv = R - np.asarray(v[:H])
            for c, target, base in zip(c_keys, R, v):
                acc = critic_acc.setdefault(c, [0.0, 0])
                acc[0] += target - base
                acc[1] += 1
            for (key, a_t), adv_t in zip(decisions, adv):
                acc = actor_acc.get(key)
                if acc is None:
                    acc = actor_acc[key] = [[0.0] * A, 0]
                acc[0][a_t] += adv_t
                acc[1] += 1
        for c, (total, n) in critic_acc.items():
            critic[c] = critic.get(c, 0.0) + cfg.critic_lr * total / n
        block_acc: dict = {}
        for key, (by_action, n) in actor_acc.items():
            # summed over samples: adv * (e_a - p) plus the entropy gradient
            p = _softmax(current_logits(key))
            logp = np.log(np.maximum(p, 1e-300))
            by_action = np.asarray(by_action)
            g = by_action - by_action.sum() * p - n * cfg.entropy_coeff * p * (logp - (p * logp).sum())
            for block in blocks_of(key):
                acc = block_acc.setdefault(block, [np.zeros(A), 0])
                acc[0] += g
                acc[1] += n
        for block, (g, n) in block_acc.items():
            logits[block] = logits[block] + cfg.actor_lr * g / n
        if not all(np.isfinite(logits[k]).all() for k in block_acc) or not all(
            np.isfinite(critic[c]) for c in critic_acc
        ):
            raise FloatingPointError("non-finite actor or critic values during training")

    policy = dict(logits) if additive else {k: _softmax(z) for k, z in logits.items()}
    return replace(spec, key_decimals=cfg.key_decimals, policy=policy, critic=critic, config=cfg, _nearest={})


@dataclass(frozen=True)
class PipelineRecord:
    spec: ActorSpec
    d: int
    mean: float
    stderr: float


def train_for_delay(
    process: Process,
    strategy: Strategy,
    d: int,
    cfg: TrainConfig,
    model: Optional[TabularWorldModel] = None,
    mode: str = "deterministic",
    parameterization: str = "auto",
) -> ActorSpec:
    """Collect random-action data under delay d (undelayed data for agnostic), shift it back, train.

    ``parameterization="auto"`` gives extended actors exact tables on fully
    observed processes and additive logits otherwise.
    """
    strategy = Strategy(strategy)
    pomdp = as_pomdp(process)
    n_actions = pomdp.n_actions
    if parameterization == "auto":
        additive = strategy is Strategy.EXTENDED and not pomdp.observes_state
        parameterization = "additive" if additive else "table"
    train_d = 0 if strategy is Strategy.AGNOSTIC else d
    model = model or TabularWorldModel.exact(process)
    buf = collect_buffer(process, train_d, cfg.collect_episodes, cfg.collect_horizon, cfg.seed)
    spec = ActorSpec(
        strategy, train_d, n_actions, mode=mode, warmup=(0,) * train_d,
        key_decimals=cfg.key_decimals, parameterization=parameterization,
    )
    trained = train_actor_critic_imagination(model, spec, buf, cfg)
    return trained.with_delay(d)


def agnostic_pipeline(
    pomdp: Process,
    d: int,
    cfg: TrainConfig,
    episodes: int = 200,
    horizon: int = 50,
    seed: Optional[int] = None,
    mode: str = "deterministic",
    model: Optional[TabularWorldModel] = None,
    warmup="random",
) -> PipelineRecord:
    """Train without delay, then evaluate under delay ``d`` with latent prediction."""
    model = model or TabularWorldModel.exact(pomdp)
    spec = train_for_delay(pomdp, Strategy.AGNOSTIC, d, cfg, model, mode)
    eval_seed = cfg.seed if seed is None else seed
    mean, se = evaluate_actor(pomdp, DelaySchedule(d), spec, episodes, horizon, eval_seed, model, warmup)
    return PipelineRecord(spec, d, mean, se)
