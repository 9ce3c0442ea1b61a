"""Delay sweeps across strategies and environments with normalized returns.

Rows are ordered strategy-major, then delay, then seed, and each
(strategy, delay) block ends with an aggregate row whose seed is ``"mean"``:
its raw return is the seed mean (normalized like any other row) and its
``stderr`` is the standard error of that mean over seeds.  Normalization maps the
uniform-random policy to 0 and the undelayed reference to 1, both evaluated at
d = 0 in the same way as the rows and averaged over the configured seeds.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .actors import (
    ActorSpec,
    Strategy,
    TrainConfig,
    evaluate_actor,
    extended_policy,
    random_spec,
    solve_extended_optimal,
    solve_latent_optimal,
    solve_memoryless_optimal,
    spec_from_extended_table,
    spec_from_memoryless_table,
    train_for_delay,
)
from .core import Process, TabularMdp, TabularPomdp, as_pomdp, finite_horizon_value
from .delay import DelaySchedule, extend_mdp, warmup_starts
from .envs import (
    Fig2Params,
    MaskedObsConfig,
    factored_chain,
    fig2_mdp,
    masked_pomdp,
    random_instance,
    switching_track,
)

CSV_COLUMNS = ("env", "strategy", "d", "seed", "raw_return", "normalized_return", "stderr", "runtime_ms")

DP_STRATEGIES = ("extended_dp", "memoryless_dp", "latent_dp")
LEARNED_STRATEGIES = tuple(s.value for s in Strategy if s is not Strategy.RANDOM)
ALL_STRATEGIES = DP_STRATEGIES + LEARNED_STRATEGIES + ("random",)


def _fig2(delta: float = 0.5, gamma: float = 0.9) -> TabularMdp:
    return fig2_mdp(Fig2Params(delta, gamma))


def _masked_track(rho: float = 0.5, flip: float = 0.1, safe_reward: float = 0.2,
                  wrong_penalty: float = 2.0, gamma: float = 0.9) -> TabularPomdp:
    return masked_pomdp(switching_track(flip, safe_reward, wrong_penalty, gamma), MaskedObsConfig(rho))


def _masked_chain(rho: float = 0.5, n_positions: int = 2, n_velocities: int = 2,
                  slip: float = 0.1, gamma: float = 0.9) -> TabularPomdp:
    return masked_pomdp(factored_chain(n_positions, n_velocities, slip, gamma), MaskedObsConfig(rho))


def _random_pomdp(seed: int = 0, n_states: int = 3, n_actions: int = 2, n_obs: int = 3,
                  sparsity: float = 0.0, gamma: float = 0.9) -> TabularPomdp:
    return random_instance(seed, n_states, n_actions, n_obs, sparsity, gamma)


def _random_mdp(seed: int = 0, n_states: int = 3, n_actions: int = 2,
                sparsity: float = 0.0, gamma: float = 0.9) -> TabularMdp:
    return random_instance(seed, n_states, n_actions, 1, sparsity, gamma).mdp


ENVIRONMENTS: dict[str, Callable[..., Process]] = {
    "fig2": _fig2,
    "masked_track": _masked_track,
    "masked_chain": _masked_chain,
    "random_pomdp": _random_pomdp,
    "random_mdp": _random_mdp,
}


def make_env(name: str, params: Optional[dict] = None) -> Process:
    try:
        build = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; known: {sorted(ENVIRONMENTS)}") from None
    return build(**(params or {}))


@dataclass(frozen=True)
class ExperimentConfig:
    """One sweep.  ``evaluation`` is ``exact`` (fully observed processes only),
    ``monte_carlo``, or ``auto`` (exact when the process is fully observed).
    Runtimes are written only when ``timing`` is set, so that default output
    is a pure function of the config."""

    env: str = "fig2"
    env_params: dict = field(default_factory=dict)
    delays: tuple = (0, 1)
    strategies: tuple = ("extended_dp",)
    seeds: tuple = (0,)
    episodes: int = 100
    horizon: int = 50
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: str = "auto"
    timing: bool = False
    out: Optional[str] = None
    format: str = "csv"

    def __post_init__(self):
        for name in ("delays", "strategies", "seeds"):
            value = tuple(getattr(self, name))
            if not value:
                raise ValueError(f"{name} must be nonempty")
            object.__setattr__(self, name, value)
        if any(int(d) < 0 for d in self.delays):
            raise ValueError("delays must be nonnegative")
        unknown = [s for s in self.strategies if s not in ALL_STRATEGIES]
        if unknown:
            raise ValueError(f"unknown strategies {unknown}; known: {list(ALL_STRATEGIES)}")
        if self.env not in ENVIRONMENTS:
            raise ValueError(f"unknown environment {self.env!r}; known: {sorted(ENVIRONMENTS)}")
        if self.evaluation not in ("auto", "exact", "monte_carlo"):
            raise ValueError(f"unknown evaluation mode {self.evaluation!r}")
        if self.format not in ("csv", "json"):
            raise ValueError(f"unknown output format {self.format!r}")
        if self.episodes < 1 or self.horizon < 1:
            raise ValueError("episodes and horizon must be >= 1")
        if isinstance(self.train, dict):
            object.__setattr__(self, "train", TrainConfig(**self.train))

    def to_dict(self) -> dict:
        out = asdict(self)
        for name in ("delays", "strategies", "seeds"):
            out[name] = list(out[name])
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ResultRow:
    env: str
    strategy: str
    d: int
    seed: object
    raw_return: Optional[float] = None
    normalized_return: Optional[float] = None
    stderr: Optional[float] = None
    runtime_ms: Optional[float] = None
    anchor: Optional[str] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass(frozen=True)
class ResultTable:
    rows: tuple
    anchors: dict
    metadata: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([_cell(getattr(r, c)) for c in CSV_COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        rows = [asdict(r) for r in self.rows]
        errors = [{"strategy": r.strategy, "d": r.d, "seed": r.seed, "error": r.error} for r in self.rows if r.error]
        doc = {"rows": rows, "anchors": self.anchors, "errors": errors, "metadata": self.metadata}
        return json.dumps(doc, indent=1) + "\n"

    def write(self, path: Union[str, Path], fmt: str = "csv") -> None:
        Path(path).write_text(self.to_csv() if fmt == "csv" else self.to_json())

    def aggregate(self, strategy: str, d: int) -> Optional[ResultRow]:
        for r in self.rows:
            if r.strategy == strategy and r.d == d and r.seed == "mean":
                return r
        return None


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def normalize_return(raw: float, undelayed_ref: float, random_ref: float) -> float:
    """Affine map sending ``random_ref`` to 0 and ``undelayed_ref`` to 1."""
    if undelayed_ref == random_ref:
        raise ValueError(f"degenerate normalization anchors: both equal {undelayed_ref!r}")
    return (raw - random_ref) / (undelayed_ref - random_ref)


# ---------------------------------------------------------------------------


def _use_exact(process: Process, mode: str) -> bool:
    fully = as_pomdp(process).observes_state
    if mode == "exact" and not fully:
        raise ValueError("exact evaluation needs a fully observed process")
    return mode == "exact" or (mode == "auto" and fully)


def exact_finite_return(spec: ActorSpec, mdp: TabularMdp, d: int, horizon: int) -> float:
    """Expected discounted sum of the first ``horizon`` rewards after a uniform random warm-up."""
    spec = spec if spec.d == d else spec.with_delay(d)
    ext = extend_mdp(mdp, d)
    V = finite_horizon_value(ext, extended_policy(spec, mdp), horizon)
    return float(sum(p * V[x] for x, p in warmup_starts(mdp, d)))


def build_actor(
    process: Process, strategy: str, d: int, seed: int, train: TrainConfig, memo: Optional[dict] = None
) -> ActorSpec:
    """Solve or train the actor for one row.  ``memo`` shares training runs
    that do not depend on the evaluation delay (agnostic actors train at d = 0)."""
    if memo is not None and strategy == Strategy.AGNOSTIC.value:
        key = (strategy, seed)
        if key not in memo:
            memo[key] = build_actor(process, strategy, 0, seed, train)
        return memo[key].with_delay(d)
    pomdp = as_pomdp(process)
    if strategy == "random":
        return random_spec(pomdp.n_actions, d)
    if strategy in DP_STRATEGIES:
        if not pomdp.observes_state:
            raise ValueError(f"{strategy} needs a fully observed process")
        mdp = pomdp.mdp
        if strategy == "extended_dp":
            return spec_from_extended_table(mdp, d, solve_extended_optimal(mdp, d)[0], train.key_decimals)
        if strategy == "memoryless_dp":
            return spec_from_memoryless_table(mdp, d, solve_memoryless_optimal(mdp, d)[0], train.key_decimals)
        return spec_from_extended_table(mdp, d, solve_latent_optimal(mdp, d)[0], train.key_decimals)
    mode = "sampled" if strategy == Strategy.LATENT_SAMPLED.value else "deterministic"
    return train_for_delay(process, Strategy(strategy), d, replace(train, seed=seed), mode=mode)


def _evaluate(process: Process, spec: ActorSpec, d: int, seed: int, cfg: ExperimentConfig) -> tuple[float, float]:
    if _use_exact(process, cfg.evaluation):
        return exact_finite_return(spec, as_pomdp(process).mdp, d, cfg.horizon), 0.0
    return evaluate_actor(process, DelaySchedule(d), spec, cfg.episodes, cfg.horizon, seed)


def compute_anchors(process: Process, cfg: ExperimentConfig, memo: Optional[dict] = None) -> dict:
    """Random and undelayed references at d = 0, averaged over the configured seeds."""
    pomdp = as_pomdp(process)
    if pomdp.observes_state:
        kind = "dp_optimal"
        ref = build_actor(process, "extended_dp", 0, 0, cfg.train)
        undelayed = [_evaluate(process, ref, 0, s, cfg)[0] for s in cfg.seeds]
    else:
        kind = "trained_undelayed"
        undelayed = [
            _evaluate(process, build_actor(process, "agnostic", 0, s, cfg.train, memo), 0, s, cfg)[0]
            for s in cfg.seeds
        ]
    rand = random_spec(pomdp.n_actions, 0)
    random_vals = [_evaluate(process, rand, 0, s, cfg)[0] for s in cfg.seeds]
    return {"undelayed": float(np.mean(undelayed)), "random": float(np.mean(random_vals)), "undelayed_kind": kind}


def run_experiment(cfg: ExperimentConfig) -> ResultTable:
    process = make_env(cfg.env, cfg.env_params)
    memo: dict = {}
    try:
        anchors = compute_anchors(process, cfg, memo)
        normalize_return(0.0, anchors["undelayed"], anchors["random"])
        anchor_error = None
    except Exception as exc:  # recorded on every row of the group
        anchors, anchor_error = {}, f"anchors: {type(exc).__name__}: {exc}"
    rows = []
    for strategy in cfg.strategies:
        for d in cfg.delays:
            d = int(d)
            block = []
            for seed in cfg.seeds:
                t0 = time.perf_counter()
                try:
                    if anchor_error:
                        raise RuntimeError(anchor_error)
                    spec = build_actor(process, strategy, d, int(seed), cfg.train, memo)
                    raw, se = _evaluate(process, spec, d, int(seed), cfg)
                    norm = normalize_return(raw, anchors["undelayed"], anchors["random"])
                    row = ResultRow(cfg.env, strategy, d, seed, raw, norm, se, anchor=anchors["undelayed_kind"])
                except Exception as exc:
                    row = ResultRow(cfg.env, strategy, d, seed, error=f"{type(exc).__name__}: {exc}")
                if cfg.timing:
                    row = replace(row, runtime_ms=round((time.perf_counter() - t0) * 1000.0, 3))
                block.append(row)
            rows.extend(block)
            rows.append(_aggregate(cfg.env, strategy, d, block, anchors))
    return ResultTable(tuple(rows), anchors, {"config": cfg.to_dict()})


def _aggregate(env: str, strategy: str, d: int, block: list, anchors: dict) -> ResultRow:
    bad = [r for r in block if not r.ok]
    if bad:
        return ResultRow(env, strategy, d, "mean", error=f"{len(bad)} of {len(block)} seeds failed")
    raw = np.array([r.raw_return for r in block])
    se = float(raw.std(ddof=1) / np.sqrt(len(raw))) if len(raw) > 1 else 0.0
    runtime = None
    if block[0].runtime_ms is not None:
        runtime = round(float(sum(r.runtime_ms for r in block)), 3)
    mean = float(raw.mean())
    norm = normalize_return(mean, anchors["undelayed"], anchors["random"])
    return ResultRow(env, strategy, d, "mean", mean, norm, se, runtime, anchors["undelayed_kind"])
