"""The eight acceptance checks, runnable from the CLI or the test suite.

Each check returns a :class:`CheckResult`; ``run_all`` prints one PASS/FAIL
line per check.
"""

from __future__ import annotations

import json
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from statistics import median
from typing import Callable

import numpy as np

from .actors import (
    Strategy,
    TrainConfig,
    exact_start_value,
    solve_extended_optimal,
    solve_memoryless_optimal,
    train_for_delay,
    uniform_value,
)
from .bench import ExperimentConfig, run_experiment
from .core import PolicyTable, TabularMdp, brute_force_return, value_iteration
from .delay import DelayedPomdp, delayed_expected_return, encode_extended, extend_mdp, warmup_starts
from .envs import Fig2Params, fig2_closed_forms, fig2_mdp, random_instance
from .worldmodel import TabularWorldModel, congruence_check, make_delayed, perturb_model

GAMMAS = (0.5, 0.9, 0.99)
DELTAS = (0.0, 0.1, 0.25, 0.5)
FIG2_TARGET = 1.0 / (1.0 - 0.9 * 0.5)


@dataclass(frozen=True)
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.number}. {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(number: int, name: str, limit: float, body: Callable[[], tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    ok, detail = body()
    dt = time.perf_counter() - t0
    if limit and dt >= limit:
        ok, detail = False, f"{detail}; runtime {dt:.1f}s exceeds {limit:.0f}s"
    return CheckResult(number, name, ok, detail, dt)


# ---------------------------------------------------------------------------


def check_closed_forms() -> CheckResult:
    def body():
        worst = 0.0
        for g in GAMMAS:
            for dl in DELTAS:
                p = Fig2Params(dl, g)
                mdp = fig2_mdp(p)
                v0 = value_iteration(mdp, tol=1e-10)[0][mdp.initial_state]
                ext = extend_mdp(mdp, 1)
                v1 = value_iteration(ext, tol=1e-10)[0][ext.initial_state]
                u, dd, ratio = fig2_closed_forms(p)
                worst = max(worst, abs(v0 - u), abs(v1 - dd), abs(v1 / v0 - ratio))
        return worst <= 1e-6, f"max error {worst:.2e} over {len(GAMMAS) * len(DELTAS)} (gamma, delta) pairs"

    return _timed(1, "closed forms", 2.0, body)


def _exact_ratio(g: float, dl: float) -> float:
    mdp = fig2_mdp(Fig2Params(dl, g))
    ext = extend_mdp(mdp, 1)
    v0 = value_iteration(mdp, tol=1e-13)[0][mdp.initial_state]
    v1 = value_iteration(ext, tol=1e-13)[0][ext.initial_state]
    return v1 / v0


def check_ratio_endpoints() -> CheckResult:
    def body():
        grid = np.linspace(0.0, 0.5, 26)
        problems = []
        for g in GAMMAS:
            r0 = _exact_ratio(g, 0.0)
            rh = _exact_ratio(g, 0.5)
            if abs(r0 - 1.0) > 1e-9:
                problems.append(f"gamma={g}: ratio at delta=0 is {r0!r}")
            if abs(rh - (1 - g) / (1 - g / 2) ** 2) > 1e-9:
                problems.append(f"gamma={g}: ratio at delta=1/2 is {rh!r}")
            ratios = [_exact_ratio(g, float(x)) for x in grid]
            if any(b > a + 1e-12 for a, b in zip(ratios, ratios[1:])):
                problems.append(f"gamma={g}: ratio increases somewhere on the grid")
            if min(ratios) < rh - 1e-12:
                problems.append(f"gamma={g}: ratio below the delta=1/2 value")
        return not problems, "; ".join(problems) or f"endpoints within 1e-9, non-increasing on {len(grid)} points"

    return _timed(2, "ratio endpoints", 0.0, body)


def reduction_instances() -> list[tuple[TabularMdp, int]]:
    """Twenty seeded random MDPs with |S| <= 4, |A| <= 3 and d <= 2."""
    out = []
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        S, A, d = int(rng.integers(2, 5)), int(rng.integers(2, 4)), int(rng.integers(0, 3))
        out.append((random_instance(seed, S, A, 1, sparsity=0.5).mdp, d))
    return out


def check_reduction() -> CheckResult:
    def body():
        worst = 0.0
        for seed, (mdp, d) in enumerate(reduction_instances()):
            ext = extend_mdp(mdp, d)
            rng = np.random.default_rng(seed)
            for _ in range(5):
                table = PolicyTable(rng.dirichlet(np.ones(mdp.n_actions), size=ext.n_states))

                def policy(s, queue, table=table):
                    return table.probs[encode_extended(s, queue, mdp.n_actions)]

                brute = sum(p * brute_force_return(ext, table, 6, x) for x, p in warmup_starts(mdp, d))
                worst = max(worst, abs(brute - delayed_expected_return(mdp, policy, d, 6)))
        return worst <= 1e-9, f"max |brute force - delayed rollout law| = {worst:.2e} over 100 policies"

    return _timed(3, "extended-MDP reduction", 30.0, body)


def check_congruence() -> CheckResult:
    def body():
        worst, weakest_control = 0.0, np.inf
        for seed in range(10):
            rng = np.random.default_rng(2000 + seed)
            S, O = int(rng.integers(2, 4)), int(rng.integers(2, 4))
            pomdp = random_instance(seed, S, 2, O)
            model = TabularWorldModel.exact(pomdp)
            actions = [int(a) for a in rng.integers(2, size=4)]
            worst = max(worst, congruence_check(model, pomdp, actions, 4).tv_distance)
            for d in (0, 1, 2):
                rep = congruence_check(make_delayed(model, d), DelayedPomdp(pomdp, d), actions, 4)
                worst = max(worst, rep.tv_distance)
            bad = perturb_model(model, pomdp.mdp.initial_state, actions[0])
            weakest_control = min(weakest_control, congruence_check(bad, pomdp, actions, 4).tv_distance)
        ok = worst <= 1e-9 and weakest_control > 0.01
        return ok, f"max TV {worst:.2e} (exact models); min TV {weakest_control:.3f} (perturbed models)"

    return _timed(4, "world-model congruence", 60.0, body)


def check_policy_ordering() -> CheckResult:
    def body():
        problems = []
        for i, (mdp, _) in enumerate(reduction_instances()):
            ext_vals = []
            for d in range(4):
                table, values = solve_extended_optimal(mdp, d, tol=1e-11)
                v_ext = float(values[extend_mdp(mdp, d).initial_state])
                v_mem = solve_memoryless_optimal(mdp, d, tol=1e-11)[1]
                v_rnd = uniform_value(mdp, d, tol=1e-11)
                if not (v_ext >= v_mem - 1e-8 and v_mem >= v_rnd - 1e-8):
                    problems.append(f"instance {i} d={d}: {v_ext:.6f}, {v_mem:.6f}, {v_rnd:.6f}")
                ext_vals.append(v_ext)
            if any(b > a + 1e-8 for a, b in zip(ext_vals, ext_vals[1:])):
                problems.append(f"instance {i}: extended optimum increases with d {ext_vals}")
        return not problems, "; ".join(problems) or "ordering and delay monotonicity hold on 20 instances, d in 0..3"

    return _timed(5, "policy-class ordering", 0.0, body)


def check_learning() -> CheckResult:
    def body():
        mdp = fig2_mdp(Fig2Params(0.5, 0.9))
        parts, ok = [], True
        for strategy in (Strategy.EXTENDED, Strategy.LATENT_DETERMINISTIC):
            vals = [
                exact_start_value(train_for_delay(mdp, strategy, 1, TrainConfig(updates=2000, seed=s)), mdp)
                for s in range(5)
            ]
            med = median(vals)
            ok &= abs(med - FIG2_TARGET) <= 0.05 * FIG2_TARGET
            parts.append(f"{strategy.value} median {med:.4f}")
        return ok, ", ".join(parts) + f" (target {FIG2_TARGET:.5f} +/- 5%)"

    return _timed(6, "learning sanity", 120.0, body)


TREND_CONFIG = dict(
    env="masked_track",
    env_params={"rho": 0.5},
    delays=[0, 8],
    strategies=["extended", "agnostic"],
    seeds=[0, 1, 2, 3, 4],
    episodes=100,
    horizon=30,
    train={"updates": 1000},
)


def check_trend() -> CheckResult:
    def body():
        tab = run_experiment(ExperimentConfig.from_dict(TREND_CONFIG))
        if not tab.ok:
            return False, "sweep had failing rows"
        e0, e8 = (tab.aggregate("extended", d).normalized_return for d in (0, 8))
        a0, a8 = (tab.aggregate("agnostic", d).normalized_return for d in (0, 8))
        ok = e8 >= a8 and (a0 - a8) >= (e0 - e8)
        return ok, f"extended {e0:.3f} -> {e8:.3f}, agnostic {a0:.3f} -> {a8:.3f}"

    return _timed(7, "extended vs agnostic trend", 0.0, body)


REPRO_CONFIG = dict(
    env="fig2",
    delays=[0, 1, 2],
    strategies=["extended_dp", "memoryless_dp", "latent_deterministic", "random"],
    seeds=[0, 1],
    horizon=30,
    evaluation="monte_carlo",
    episodes=50,
    train={"updates": 50},
)


def check_reproducibility() -> CheckResult:
    def body():
        with tempfile.TemporaryDirectory() as tmp:
            cfg = Path(tmp) / "cfg.json"
            cfg.write_text(json.dumps(REPRO_CONFIG))
            outs = []
            for i in range(2):
                out = Path(tmp) / f"run{i}.csv"
                proc = subprocess.run(
                    [sys.executable, "-m", "delaywm", "--config", str(cfg), "--out", str(out)],
                    capture_output=True,
                    text=True,
                )
                if proc.returncode != 0:
                    return False, f"CLI exited with {proc.returncode}: {proc.stderr.strip()[-200:]}"
                outs.append(out.read_bytes())
        same = outs[0] == outs[1]
        return same, f"two CLI runs produced {'identical' if same else 'different'} CSV ({len(outs[0])} bytes)"

    return _timed(8, "reproducibility", 0.0, body)


CHECKS = (
    check_closed_forms,
    check_ratio_endpoints,
    check_reduction,
    check_congruence,
    check_policy_ordering,
    check_learning,
    check_trend,
    check_reproducibility,
)


def run_all(stream=None) -> bool:
    stream = stream or sys.stdout
    ok = True
    for check in CHECKS:
        res = check()
        print(res.line(), file=stream, flush=True)
        ok &= res.passed
    return ok
