"""Training-loop orchestration, evaluation, and run-log contracts."""

import numpy as np
import pytest

from guardedrl.envs import (
    RIGHT,
    UP,
    GridWorldSpec,
    build_cliff_grid,
    collect_offline_dataset,
    uniform_safe_policy,
)
from guardedrl.learner import LearnerConfig, PolicyTable
from guardedrl.sampling import DssConfig, DtsConfig
from guardedrl.trainer import (
    RunConfig,
    RunLog,
    evaluate_policy,
    measure_ttfv,
    run_training,
)

CLIFF_MAP = [
    ".....",
    ".....",
    "S...G",
    "XXXXX",
]


def make_grid(slip=0.0, **kw):
    defaults = dict(gamma=0.95, step_reward=-0.02, goal_reward=1.0, hazard_reward=-1.0)
    defaults.update(kw)
    return GridWorldSpec.from_ascii(CLIFF_MAP, slip_prob=slip, **defaults)


def make_dataset(grid, episodes=60, seed=11):
    mdp, spec = build_cliff_grid(grid)
    return collect_offline_dataset(
        mdp, spec, uniform_safe_policy(spec), n_episodes=episodes, max_ep_len=40,
        seed=seed, start_state=grid.start_state,
    )


def make_config(grid, variant="guardian", total_steps=300, seed=0, **kw):
    defaults = dict(
        ensemble_size=2,
        batch_size=16,
        eval_every=100,
        eval_episodes=3,
        eval_max_len=40,
        ttfv_episodes=3,
        ttfv_max_steps=60,
        max_episode_len=60,
        online_buffer_capacity=2000,
    )
    defaults.update(kw)
    horizon = max(total_steps, 1)
    return RunConfig(
        variant=variant,
        grid=grid,
        learner=LearnerConfig(alpha=0.01, tau=0.05, gamma=grid.gamma,
                              critic_lr=0.2, actor_lr=0.2),
        dts=DtsConfig(delta_min=1, delta_max=8, beta=2.0, horizon=horizon),
        dss=DssConfig(lambda_min=0.1, lambda_max=0.5, k=10.0 / horizon, horizon=horizon),
        total_steps=total_steps,
        seed=seed,
        **defaults,
    )


@pytest.fixture(scope="module")
def grid():
    return make_grid()


@pytest.fixture(scope="module")
def dataset(grid):
    return make_dataset(grid)


class TestRunConfig:
    def test_rejects_unknown_variant(self, grid):
        with pytest.raises(ValueError, match="variant"):
            make_config(grid, variant="shielded")

    def test_rejects_inconsistent_horizons(self, grid):
        cfg = make_config(grid, total_steps=300)
        with pytest.raises(ValueError, match="horizons"):
            RunConfig(
                variant="guardian", grid=grid, learner=cfg.learner,
                dts=DtsConfig(1, 8, 2.0, horizon=500), dss=cfg.dss,
                total_steps=300, seed=0,
            )


class TestRunTraining:
    def test_guardian_zero_slip_never_violates(self, grid, dataset):
        cfg = make_config(grid, variant="guardian", total_steps=400)
        log, state = run_training(cfg, dataset, return_state=True)
        assert log.summary["executed_violations"] == 0
        _, spec = build_cliff_grid(grid)
        for record in state.buffer.records():
            assert spec.safe[record.s, record.a_exec]
            assert record.a_prop is not None

    def test_offline_only_keeps_buffer_empty(self, grid, dataset):
        cfg = make_config(grid, variant="offline_only", total_steps=150)
        log, state = run_training(cfg, dataset, return_state=True)
        assert len(state.buffer) == 0
        assert log.summary["executed_violations"] == 0
        assert log.summary["offline_fallbacks"] > 0

    def test_no_guard_can_violate_on_cliff(self, grid, dataset):
        cfg = make_config(grid, variant="no_guard", total_steps=400, seed=3)
        log = run_training(cfg, dataset)
        assert log.summary["executed_violations"] > 0

    def test_zero_steps_snapshot_only(self, grid, dataset):
        cfg = make_config(grid, total_steps=0)
        log, state = run_training(cfg, dataset, return_state=True)
        assert len(log.records) == 1
        assert log.records[0]["step"] == 0
        assert np.all(state.pol.logits == 0.0)
        np.testing.assert_array_equal(state.ens.members, state.ens.targets)

    def test_bit_identical_reruns(self, grid, dataset):
        cfg = make_config(grid, total_steps=200, seed=7)
        first = run_training(cfg, dataset)
        second = run_training(cfg, dataset)
        assert first.records == second.records
        assert first.summary == second.summary

    def test_missing_dataset_fails_before_run(self, grid):
        cfg = make_config(grid, total_steps=10)
        with pytest.raises(ValueError, match="offline dataset"):
            run_training(cfg, None)

    def test_empty_dataset_rejected(self, grid):
        from guardedrl.sampling import OfflineDataset

        cfg = make_config(grid, total_steps=10)
        with pytest.raises(ValueError, match="empty"):
            run_training(cfg, OfflineDataset([]))

    def test_updates_per_step_changes_training(self, grid, dataset):
        single = run_training(make_config(grid, total_steps=150), dataset)
        double = run_training(
            make_config(grid, total_steps=150, updates_per_step=2), dataset
        )
        assert single.summary["final_td_error"] != double.summary["final_td_error"]

    def test_log_fields_and_monotone_steps(self, grid, dataset):
        cfg = make_config(grid, total_steps=250, eval_every=100)
        log = run_training(cfg, dataset)
        steps = [rec["step"] for rec in log.records]
        assert steps == [0, 100, 200, 250]
        for rec in log.records:
            for key in ("lam", "delta", "td_error", "ensemble_variance",
                        "executed_violations", "eval_return", "ttfv", "coverage",
                        "pre_guard_violation_rate", "near_miss_rate",
                        "visitation_entropy", "actor_loss", "starvation_events"):
                assert key in rec
        assert log.records[0]["actor_loss"] is None
        assert log.records[0]["pre_guard_violation_rate"] is None
        assert log.records[1]["pre_guard_violation_rate"] is not None
        coverages = [rec["coverage"] for rec in log.records]
        assert coverages == sorted(coverages)

    def test_exec_mask_executes_safely_but_backs_up_raw(self, grid, dataset):
        cfg = make_config(grid, variant="exec_mask_only", total_steps=200, seed=5)
        log, state = run_training(cfg, dataset, return_state=True)
        assert log.summary["executed_violations"] == 0
        guardian_log = run_training(
            make_config(grid, variant="guardian", total_steps=200, seed=5), dataset
        )
        # Same seed, different backup rule: the learned tables must diverge.
        assert guardian_log.summary["final_td_error"] != log.summary["final_td_error"]

    def test_summary_contains_report_fields(self, grid, dataset):
        cfg = make_config(grid, total_steps=120)
        log = run_training(cfg, dataset)
        for key in ("variant", "seed", "final_td_error", "final_ensemble_variance",
                    "final_ttfv", "final_eval_return", "coverage", "support_kl",
                    "action_novelty_rate", "starvation_events"):
            assert key in log.summary


class TestRunLog:
    def test_save_load_round_trip(self, grid, dataset, tmp_path):
        cfg = make_config(grid, total_steps=120)
        log = run_training(cfg, dataset)
        log.save(tmp_path / "run")
        loaded = RunLog.load(tmp_path / "run")
        assert loaded.records == log.records
        assert loaded.summary == log.summary

    def test_append_requires_increasing_steps(self):
        log = RunLog()
        log.append({"step": 5})
        with pytest.raises(ValueError):
            log.append({"step": 5})


class TestEvaluatePolicy:
    def test_hand_traced_corridor_return(self):
        grid = GridWorldSpec(width=3, height=1, start=(0, 0), goal=(2, 0),
                             step_reward=-0.1, goal_reward=2.0, gamma=0.9)
        mdp, spec = build_cliff_grid(grid)
        logits = np.zeros((mdp.num_states, 5))
        logits[:, RIGHT] = 10.0
        result = evaluate_policy(PolicyTable(logits), mdp, spec, episodes=4, max_len=20,
                                 guard_on=True, seed=0, start_state=grid.start_state)
        # Two moves, each -0.1, the second entering the goal for +2.0.
        assert result.mean_return == pytest.approx(1.8)
        assert result.violations == 0

    def test_same_seed_identical_returns(self, grid):
        mdp, spec = build_cliff_grid(make_grid(slip=0.3))
        pol = PolicyTable(np.random.default_rng(1).normal(size=(mdp.num_states, 5)))
        a = evaluate_policy(pol, mdp, spec, episodes=6, max_len=30, guard_on=True,
                            seed=42, start_state=5, stochastic=True)
        b = evaluate_policy(pol, mdp, spec, episodes=6, max_len=30, guard_on=True,
                            seed=42, start_state=5, stochastic=True)
        assert a.returns == b.returns

    def test_guard_off_counts_violations(self, grid):
        mdp, spec = build_cliff_grid(grid)
        logits = np.zeros((mdp.num_states, 5))
        logits[:, 1] = 10.0  # DOWN: straight toward the cliff row
        result = evaluate_policy(PolicyTable(logits), mdp, spec, episodes=2, max_len=10,
                                 guard_on=False, seed=0, start_state=grid.start_state)
        assert result.violations > 0


class TestMeasureTtfv:
    def test_guarded_zero_slip_is_censored(self, grid):
        mdp, spec = build_cliff_grid(grid)
        pol = PolicyTable(np.random.default_rng(2).normal(size=(mdp.num_states, 5)))
        ttfv = measure_ttfv(pol, mdp, spec, episodes=5, max_steps=50, guard_on=True,
                            seed=0, start_state=grid.start_state,
                            hazard_states=grid.hazard_states)
        assert ttfv == 50.0

    def test_hazard_walker_violates_immediately(self, grid):
        mdp, spec = build_cliff_grid(grid)
        logits = np.zeros((mdp.num_states, 5))
        logits[:, 1] = 10.0  # DOWN into the cliff from the start row
        ttfv = measure_ttfv(PolicyTable(logits), mdp, spec, episodes=3, max_steps=50,
                            guard_on=False, seed=0, start_state=grid.start_state,
                            hazard_states=grid.hazard_states)
        assert ttfv == 1.0

    def test_single_episode_median_is_that_value(self, grid):
        mdp, spec = build_cliff_grid(grid)
        logits = np.zeros((mdp.num_states, 5))
        logits[:, UP] = 10.0
        ttfv = measure_ttfv(PolicyTable(logits), mdp, spec, episodes=1, max_steps=25,
                            guard_on=True, seed=0, start_state=grid.start_state,
                            hazard_states=grid.hazard_states)
        assert ttfv == 25.0
