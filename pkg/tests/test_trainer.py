import numpy as np
import pytest
from dataclasses import replace

from trajrl import envs, nets
from trajrl.envs import Region, TimeState
from trajrl.trainer import (IterationReport, TrainConfig, TrainerState,
                            evaluate_policy, evaluate_policy_costs,
                            run_iteration, select_initial_states_bic,
                            toy1d_diagnostic, train)


def _tiny_toy_config(**overrides):
    model = envs.default_model("toy1d")
    field = envs.CostField(control_weight=0.01)
    kw = dict(model=model, field=field, n_episodes=16, episode_fraction=0.25,
              candidate_multiplier=3, m_updates=20, k_lookahead=60,
              minibatch=32, iterations=2, seed=7, reg_eps=0.1,
              max_iter_first=60, max_iter_later=30, eval_count=4,
              eval_use_to=False, eval_max_iter=60, calibration_probes=10,
              calibration_cap=80)
    kw.update(overrides)
    return TrainConfig(**kw)


# -- BIC selection ------------------------------------------------------------------

def _std_net_from_scores(fn):
    """Std net stub: single linear layer reading the scores off the state."""
    class Stub:
        pass

    return fn


def _scored_candidates(scores):
    return [TimeState(np.array([s]), 0) for s in scores]


def _linear_std_net():
    # sigma = sigma_min + softplus(w x); w chosen so the raw score is x itself
    return nets.Mlp(weights=(np.array([[1.0, 0.0]]),), biases=(np.zeros(1),),
                    head="std", sigma_min=1e-3)


def test_bic_keeps_largest_scores_descending():
    net = _linear_std_net()
    cands = _scored_candidates(np.linspace(-1.0, 1.0, 10))
    kept = select_initial_states_bic(cands, net, keep=3)
    vals = [c.x[0] for c in kept]
    assert vals == sorted(vals, reverse=True)
    assert vals == [1.0, pytest.approx(7.0 / 9.0 * 1.0 + 0.0, abs=1e-9),
                    pytest.approx(5.0 / 9.0, abs=1e-9)]


def test_bic_stable_tie_break():
    net = _linear_std_net()
    cands = _scored_candidates(np.zeros(6))
    kept = select_initial_states_bic(cands, net, keep=2)
    assert kept[0] is cands[0] and kept[1] is cands[1]


def test_bic_selected_scores_dominate_rejected():
    rng = np.random.default_rng(0)
    net = _linear_std_net()
    cands = _scored_candidates(rng.normal(0.0, 2.0, 1000))
    kept = select_initial_states_bic(cands, net, keep=100)
    kept_scores = {float(c.x[0]) for c in kept}
    rejected = [float(c.x[0]) for c in cands
                if float(c.x[0]) not in kept_scores]
    assert min(kept_scores) >= max(rejected)


def test_bic_rejects_keep_too_large():
    net = _linear_std_net()
    with pytest.raises(ValueError):
        select_initial_states_bic(_scored_candidates([0.0]), net, keep=2)


# -- schedule accounting ---------------------------------------------------------------

def test_single_iteration_solves_exactly_n_episodes():
    cfg = _tiny_toy_config(iterations=1)
    _, _, _, reports = train(cfg)
    assert len(reports) == 1
    assert reports[0].episodes_cum == cfg.n_episodes


def test_cumulative_episode_accounting():
    cfg = _tiny_toy_config(iterations=4)
    _, _, _, reports = train(cfg)
    expected = [cfg.n_episodes + j * round(cfg.episode_fraction * cfg.n_episodes)
                for j in range(4)]
    assert [r.episodes_cum for r in reports] == expected


def test_paper_schedule_300_375():
    # N=300 at 25%: cumulative counts 300, 375 after the first two iterations
    assert 300 + round(0.25 * 300) == 375
    cfg = _tiny_toy_config(n_episodes=12, iterations=3, episode_fraction=0.25)
    _, _, _, reports = train(cfg)
    assert [r.episodes_cum for r in reports] == [12, 15, 18]


def test_baseline_variant_schedule_is_full_batches():
    cfg = _tiny_toy_config(iterations=3, bic=False, episode_fraction=1.0)
    _, _, _, reports = train(cfg)
    assert [r.episodes_cum for r in reports] == [16, 32, 48]


def test_zero_iterations_returns_initialized_networks():
    cfg = _tiny_toy_config(iterations=0)
    actor, critic, std, reports = train(cfg)
    assert reports == []
    assert actor.out_dim == 1 and critic.out_dim == 1 and std.out_dim == 1


# -- determinism -----------------------------------------------------------------------

def test_fixed_seed_runs_are_identical():
    cfg = _tiny_toy_config(iterations=2)
    a_actor, a_critic, a_std, a_reports = train(cfg)
    b_actor, b_critic, b_std, b_reports = train(cfg)
    for pa, pb in zip(a_actor.flat_params() + a_critic.flat_params()
                      + a_std.flat_params(),
                      b_actor.flat_params() + b_critic.flat_params()
                      + b_std.flat_params()):
        np.testing.assert_array_equal(pa, pb)
    for ra, rb in zip(a_reports, b_reports):
        assert ra.episodes_cum == rb.episodes_cum
        assert ra.to_cost_mean == rb.to_cost_mean
        assert ra.eval_mean_cost == rb.eval_mean_cost
        assert ra.critic_loss_mean == rb.critic_loss_mean
        assert ra.std_loss_mean == rb.std_loss_mean


def test_different_seeds_differ():
    a = train(_tiny_toy_config(iterations=1, seed=1))[3]
    b = train(_tiny_toy_config(iterations=1, seed=2))[3]
    assert a[0].to_cost_mean != b[0].to_cost_mean


# -- evaluate_policy --------------------------------------------------------------------

def _trained_tiny():
    cfg = _tiny_toy_config(iterations=1)
    actor, critic, std, _ = train(cfg)
    return cfg, actor


def test_evaluate_single_start_equals_trajectory_cost():
    cfg, actor = _trained_tiny()
    start = TimeState(np.array([1.0]), 0)
    traj = nets.actor_rollout(actor, cfg.model, start, cfg.model.t_max,
                              cfg.field)
    mean = evaluate_policy(actor, cfg.model, cfg.field, [start], use_to=False)
    assert mean == pytest.approx(traj.cost, abs=1e-12)


def test_evaluate_with_to_never_worse_than_rollout():
    cfg, actor = _trained_tiny()
    starts = envs.sample_initial_states(cfg.model, 6, 11, Region.HARD_REGION)
    plain = evaluate_policy_costs(actor, cfg.model, cfg.field, starts,
                                  use_to=False)
    refined = evaluate_policy_costs(actor, cfg.model, cfg.field, starts,
                                    use_to=True, max_iter=80)
    assert np.all(refined <= plain + 1e-9)


def test_evaluate_requires_starts():
    cfg, actor = _trained_tiny()
    with pytest.raises(ValueError):
        evaluate_policy(actor, cfg.model, cfg.field, [], use_to=False)


# -- reports ---------------------------------------------------------------------------

def test_report_fields_populated():
    cfg = _tiny_toy_config(iterations=2)
    _, _, _, reports = train(cfg)
    for rep in reports:
        assert isinstance(rep, IterationReport)
        assert np.isfinite(rep.to_cost_mean)
        assert np.isfinite(rep.to_cost_median)
        assert 0.0 <= rep.converged_frac <= 1.0
        assert np.isfinite(rep.critic_loss_mean)
        assert np.isfinite(rep.std_loss_mean)
        assert rep.t_to_s >= 0.0 and rep.t_nets_s >= 0.0


def test_checkpoint_callback_fires_every_iteration():
    seen = []
    cfg = _tiny_toy_config(iterations=3)
    train(cfg, checkpoint_cb=lambda state: seen.append(state.episodes_cum))
    assert len(seen) == 3


def test_run_iteration_requires_resolved_cap():
    cfg = _tiny_toy_config(max_iter_first=None)
    state = TrainerState(cfg)
    with pytest.raises(RuntimeError):
        run_iteration(state, 1)


# -- 1D diagnostic (small grid smoke; the full version runs in acceptance) ------------

def test_toy1d_diagnostic_structure():
    cfg = _tiny_toy_config(iterations=1, m_updates=150, n_episodes=40)
    table = toy1d_diagnostic(cfg, grid=60, naive_max_iter=100)
    assert set(table) == {"x0", "v_bar", "v_critic", "v_std", "x_final"}
    assert all(len(v) == 60 for v in table.values())
    left = table["x_final"] < 0
    assert np.sum(left[:-1] != left[1:]) == 1     # exactly one basin flip


def test_toy1d_diagnostic_rejects_other_models():
    model = envs.default_model("pointmass")
    cfg = replace(_tiny_toy_config(), model=model,
                  field=envs.CostField(obstacles=(
                      envs.Ellipse((0.0, 3.5), (1.8, 3.2)),
                      envs.Ellipse((0.0, -3.5), (1.8, 3.2)),
                      envs.Ellipse((1.2, 0.0), (2.2, 1.4))),
                      obstacle_weight=10.0, distance_weight=0.02))
    with pytest.raises(ValueError):
        toy1d_diagnostic(cfg)
