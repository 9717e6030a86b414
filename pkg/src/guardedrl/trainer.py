"""End-to-end training orchestration with safety variants and probes.

One loop owns all mutable state. Per step: the policy proposes a raw
action, the projection (variant-dependent) certifies it, the sanitized
transition lands in the online buffer, and the learner takes hybrid
batches under the current curriculum schedules. The raw proposal is
recorded in every variant (shadow channel) so pre-guard metrics stay
comparable at zero behavioral cost.

Variants:
  guardian        projected execution + guarded backup targets
  exec_mask_only  projected execution + raw-policy (unguarded) targets
  no_guard        raw execution + unguarded targets
  offline_only    no interaction at all; guarded targets on offline data

Two runs with identical config produce bit-identical logs.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .envs import GridWorldSpec, build_cliff_grid, env_step
from .guardian import project_action
from .learner import (
    BACKUP_GUARDED,
    BACKUP_UNGUARDED,
    LearnerConfig,
    PolicyTable,
    QEnsemble,
    compute_targets,
    ensemble_variance,
    soft_update_targets,
    update_actor,
    update_critics,
)
from .mdp import SafetySpec, TabularMdp
from .metrics import (
    VisitationStats,
    coverage_count,
    shadow_rates,
    support_kl,
    action_novelty_rate,
    td_error_stats,
    visitation_entropy,
)
from .sampling import (
    DssConfig,
    DtsConfig,
    OfflineDataset,
    OnlineBuffer,
    TransitionRecord,
    dss_mixing,
    dts_interval,
    sample_hybrid_batch,
    derive_bc_policy,
)

VARIANT_GUARDIAN = "guardian"
VARIANT_EXEC_MASK = "exec_mask_only"
VARIANT_NO_GUARD = "no_guard"
VARIANT_OFFLINE_ONLY = "offline_only"
VARIANTS = (VARIANT_GUARDIAN, VARIANT_EXEC_MASK, VARIANT_NO_GUARD, VARIANT_OFFLINE_ONLY)

# Projection applies at execution time in these variants (and at evaluation).
_PROJECTED_VARIANTS = (VARIANT_GUARDIAN, VARIANT_EXEC_MASK)
# Backup targets are guarded in these variants.
_GUARDED_BACKUP_VARIANTS = (VARIANT_GUARDIAN, VARIANT_OFFLINE_ONLY)


@dataclass
class RunConfig:
    variant: str
    grid: GridWorldSpec
    learner: LearnerConfig
    dts: DtsConfig
    dss: DssConfig
    total_steps: int
    seed: int
    offline_dataset_path: str | None = None
    ensemble_size: int = 2
    batch_size: int = 64
    updates_per_step: int = 1
    eval_every: int = 1000
    eval_episodes: int = 10
    eval_max_len: int = 100
    ttfv_episodes: int = 5
    ttfv_max_steps: int = 200
    max_episode_len: int = 200
    online_buffer_capacity: int = 10_000
    stochastic_eval: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.total_steps > 0 and not (
            self.dts.horizon == self.dss.horizon == self.total_steps
        ):
            raise ValueError("schedule horizons must equal total_steps")
        for name in ("ensemble_size", "batch_size", "updates_per_step", "eval_every",
                     "eval_episodes", "eval_max_len", "ttfv_episodes", "ttfv_max_steps",
                     "max_episode_len", "online_buffer_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class RunLog:
    """Append-only per-interval records plus the final summary."""

    records: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def append(self, record: dict) -> None:
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("record steps must be strictly increasing")
        self.records.append(record)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(rec) + "\n" for rec in self.records)

    def save(self, directory: str | Path) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        log_path = directory / "log.jsonl"
        summary_path = directory / "summary.json"
        log_path.write_text(self.to_jsonl())
        summary_path.write_text(json.dumps(self.summary, indent=2) + "\n")
        return log_path, summary_path

    @classmethod
    def load(cls, directory: str | Path) -> "RunLog":
        directory = Path(directory)
        records = [
            json.loads(line)
            for line in (directory / "log.jsonl").read_text().splitlines()
            if line.strip()
        ]
        summary = json.loads((directory / "summary.json").read_text())
        return cls(records=records, summary=summary)


@dataclass(frozen=True)
class EvalResult:
    mean_return: float
    violations: int
    returns: tuple[float, ...]
    state_visits: np.ndarray


@dataclass
class TrainerState:
    """Post-run internals, exposed for inspection and tests."""

    pol: PolicyTable
    ens: QEnsemble
    buffer: OnlineBuffer
    stats: VisitationStats


def _greedy_action(pol: PolicyTable, s: int) -> int:
    return int(np.argmax(pol.probs(s)))


def _sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    a = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
    return min(a, probs.shape[0] - 1)


def evaluate_policy(
    pol: PolicyTable,
    mdp: TabularMdp,
    spec: SafetySpec,
    episodes: int,
    max_len: int,
    guard_on: bool,
    seed: int,
    start_state: int = 0,
    stochastic: bool = False,
) -> EvalResult:
    """Fixed-episode evaluation: undiscounted return, predicate violations.

    Action selection is greedy by probability (stochastic draw behind a
    flag) with projection applied iff guard_on. Deterministic per seed.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(seed)
    returns: list[float] = []
    violations = 0
    visits = np.zeros(mdp.num_states, dtype=np.int64)
    for _ in range(episodes):
        s = start_state
        total = 0.0
        for _ in range(max_len):
            visits[s] += 1
            a = _sample_action(pol.probs(s), rng) if stochastic else _greedy_action(pol, s)
            if guard_on:
                a = project_action(s, a, spec).exec_action
            if not spec.safe[s, a]:
                violations += 1
            r, s, done = env_step(mdp, s, a, rng)
            total += r
            if done:
                visits[s] += 1
                break
        returns.append(total)
    return EvalResult(
        mean_return=float(np.mean(returns)),
        violations=violations,
        returns=tuple(returns),
        state_visits=visits,
    )


def measure_ttfv(
    pol: PolicyTable,
    mdp: TabularMdp,
    spec: SafetySpec,
    episodes: int,
    max_steps: int,
    guard_on: bool,
    seed: int,
    start_state: int = 0,
    hazard_states: Iterable[int] = (),
) -> float:
    """Median steps to the first violation, censored at max_steps.

    A violation is an executed transition with g(s, a) false or entry
    into a hazard state. Episodes that end (or time out) without one
    count as max_steps.
    """
    hazard_states = frozenset(hazard_states)
    rng = np.random.default_rng(seed)
    firsts: list[int] = []
    for _ in range(episodes):
        s = start_state
        first = max_steps
        for step in range(1, max_steps + 1):
            a = _greedy_action(pol, s)
            if guard_on:
                a = project_action(s, a, spec).exec_action
            if not spec.safe[s, a]:
                first = step
                break
            _, s, done = env_step(mdp, s, a, rng)
            if s in hazard_states:
                first = step
                break
            if done:
                break
        firsts.append(first)
    return float(statistics.median(firsts))


def _null_if_nan(x: float | None) -> float | None:
    if x is None:
        return None
    return float(x)


def run_training(
    cfg: RunConfig,
    offline: OfflineDataset | None = None,
    return_state: bool = False,
) -> RunLog | tuple[RunLog, TrainerState]:
    """Execute the full training loop for cfg.total_steps steps.

    The offline dataset is taken from the argument or loaded from
    cfg.offline_dataset_path; either way a missing/empty dataset fails
    before any step runs. Returns the per-interval log with a final
    summary (never writes files itself); with return_state the final
    learner/buffer internals come back too.
    """
    if offline is None:
        if cfg.offline_dataset_path is None:
            raise ValueError("need an offline dataset (argument or offline_dataset_path)")
        offline = OfflineDataset.load_jsonl(cfg.offline_dataset_path)
    if len(offline) == 0:
        raise ValueError("offline dataset is empty")

    mdp, spec = build_cliff_grid(cfg.grid)
    backup = BACKUP_GUARDED if cfg.variant in _GUARDED_BACKUP_VARIANTS else BACKUP_UNGUARDED
    learner_cfg = replace(cfg.learner, backup_mode=backup)
    guard_exec = cfg.variant in _PROJECTED_VARIANTS
    interactive = cfg.variant != VARIANT_OFFLINE_ONLY

    seed_seq = np.random.SeedSequence(cfg.seed)
    rng_init, rng_env, rng_sample, rng_probe = (
        np.random.default_rng(child) for child in seed_seq.spawn(4)
    )
    ens = QEnsemble.init_random(mdp.num_states, mdp.num_actions, cfg.ensemble_size, rng_init)
    pol = PolicyTable.zeros(mdp.num_states, mdp.num_actions)
    buffer = OnlineBuffer(cfg.online_buffer_capacity)
    stats = VisitationStats(mdp.num_states, mdp.num_actions)
    log = RunLog()

    executed_violations = 0
    starvation_events = 0
    offline_fallbacks = 0
    last_actor_loss: float | None = None
    interval_records: list[TransitionRecord] = []

    start = cfg.grid.start_state
    hazard_states = cfg.grid.hazard_states
    state = start
    episode = 0
    t_ep = 0

    def emit(step: int) -> None:
        nonlocal interval_records
        lam = dss_mixing(step, cfg.dss) if cfg.total_steps > 0 else cfg.dss.lambda_min
        delta = dts_interval(step, cfg.dts) if cfg.total_steps > 0 else cfg.dts.delta_min
        probe = sample_hybrid_batch(offline, buffer, lam, delta, cfg.batch_size, rng_probe)
        td = td_error_stats(probe.records, ens, pol, spec, learner_cfg)
        variance = ensemble_variance(ens, probe.records)
        if interval_records:
            pre_rate, near_rate = shadow_rates(interval_records, spec)
        else:
            pre_rate, near_rate = None, None
        eval_seed = cfg.seed * 1_000_003 + step
        evaluation = evaluate_policy(
            pol, mdp, spec, cfg.eval_episodes, cfg.eval_max_len,
            guard_on=guard_exec, seed=eval_seed, start_state=start,
            stochastic=cfg.stochastic_eval,
        )
        ttfv = measure_ttfv(
            pol, mdp, spec, cfg.ttfv_episodes, cfg.ttfv_max_steps,
            guard_on=guard_exec, seed=eval_seed + 1, start_state=start,
            hazard_states=hazard_states,
        )
        entropy = visitation_entropy(stats) if stats.total > 0 else None
        log.append(
            {
                "step": step,
                "lam": float(lam),
                "delta": int(delta),
                "td_error": float(td),
                "ensemble_variance": float(variance),
                "actor_loss": _null_if_nan(last_actor_loss),
                "executed_violations": executed_violations,
                "pre_guard_violation_rate": _null_if_nan(pre_rate),
                "near_miss_rate": _null_if_nan(near_rate),
                "eval_return": float(evaluation.mean_return),
                "eval_violations": evaluation.violations,
                "ttfv": float(ttfv),
                "coverage": coverage_count(stats),
                "visitation_entropy": _null_if_nan(entropy),
                "starvation_events": starvation_events,
            }
        )
        interval_records = []

    emit(0)
    for step in range(1, cfg.total_steps + 1):
        if interactive:
            a_prop = _sample_action(pol.probs(state), rng_env)
            if guard_exec:
                a_exec = project_action(state, a_prop, spec).exec_action
            else:
                a_exec = a_prop
            if not spec.safe[state, a_exec]:
                executed_violations += 1
            r, s_next, done = env_step(mdp, state, a_exec, rng_env)
            tr = TransitionRecord(
                s=state, a_exec=a_exec, r=r, s_next=s_next, done=done,
                t=t_ep, episode=episode, a_prop=a_prop,
            )
            buffer.append(tr)
            interval_records.append(tr)
            stats.record(state, a_exec)
            t_ep += 1
            if done or t_ep >= cfg.max_episode_len:
                state, episode, t_ep = start, episode + 1, 0
            else:
                state = s_next

        lam = dss_mixing(step, cfg.dss)
        delta = dts_interval(step, cfg.dts)
        for _ in range(cfg.updates_per_step):
            batch = sample_hybrid_batch(offline, buffer, lam, delta, cfg.batch_size, rng_sample)
            offline_fallbacks += batch.fallback_count
            targets, starved = compute_targets(batch.records, pol, ens, spec, learner_cfg)
            starvation_events += starved
            update_critics(ens, batch.records, targets, learner_cfg)
            last_actor_loss = update_actor(
                pol, [tr.s for tr in batch.records], ens, learner_cfg
            )
            soft_update_targets(ens, learner_cfg.tau)

        if step % cfg.eval_every == 0 or step == cfg.total_steps:
            emit(step)

    bc = derive_bc_policy(offline, mdp.num_states, mdp.num_actions)
    final_eval = evaluate_policy(
        pol, mdp, spec, cfg.eval_episodes, cfg.eval_max_len,
        guard_on=guard_exec, seed=cfg.seed * 1_000_003 + cfg.total_steps + 1,
        start_state=start, stochastic=cfg.stochastic_eval,
    )
    visits = final_eval.state_visits
    weights = visits if visits.sum() > 0 else np.ones(mdp.num_states)
    last = log.records[-1]
    log.summary = {
        "variant": cfg.variant,
        "seed": cfg.seed,
        "total_steps": cfg.total_steps,
        "executed_violations": executed_violations,
        "starvation_events": starvation_events,
        "offline_fallbacks": offline_fallbacks,
        "final_eval_return": float(final_eval.mean_return),
        "final_eval_violations": final_eval.violations,
        "final_td_error": last["td_error"],
        "final_ensemble_variance": last["ensemble_variance"],
        "final_ttfv": last["ttfv"],
        "coverage": coverage_count(stats),
        "visitation_entropy": _null_if_nan(
            visitation_entropy(stats) if stats.total > 0 else None
        ),
        "support_kl": float(support_kl(pol.all_probs(), bc, weights)),
        "action_novelty_rate": float(
            action_novelty_rate(pol.all_probs(), bc, list(range(mdp.num_states)))
        ),
    }
    if return_state:
        return log, TrainerState(pol=pol, ens=ens, buffer=buffer, stats=stats)
    return log
