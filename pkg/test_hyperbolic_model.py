import numpy as np
import pandas as pd
import pytest
from scipy.special import logsumexp, softmax

from conftest import REFERENCE_KERNEL, REFERENCE_U, make_primitives, model_path
from hyperbolic_model import (
    EULER_GAMMA,
    DataSet,
    DiscountParams,
    ModelPrimitives,
    StateSpace,
    TransitionKernel,
    UtilityMatrix,
    ccp_frame,
    estimate_frequencies,
    load_model_config,
    bellman_update,
    perceived_value,
    policy_evaluation,
    simulate_panel,
    solve_fixed_point,
    validate,
)
from lab_errors import (
    ConfigError,
    DimensionError,
    DomainError,
    EmptyCell,
    NoConvergence,
    RowSumError,
)

SMALL_U = np.array([[0.4, -0.3]])
SMALL_KERNEL = np.array([
    [[0.7, 0.3], [0.4, 0.6]],
    [[0.2, 0.8], [0.9, 0.1]],
])


def _small(beta=1.0, beta_tilde=1.0, delta=0.9):
    primitives = ModelPrimitives(StateSpace(1, 2), 2, UtilityMatrix(SMALL_U),
                                 DiscountParams(beta, beta_tilde, delta))
    return primitives, TransitionKernel(SMALL_KERNEL)


def _oracle_ccp(u, probs, delta, n_iter=5000):
    """Plain exponential value iteration on choice-specific values."""
    u_full = np.vstack([np.zeros((1, u.shape[1])), u])
    V = np.zeros(u.shape[1])
    for _ in range(n_iter):
        v = u_full + delta * (probs @ V)
        V = EULER_GAMMA + logsumexp(v, axis=0)
    return softmax(u_full + delta * (probs @ V), axis=0)


def test_exponential_matches_value_iteration_oracle():
    primitives, kernel = _small(delta=0.9)
    solved = solve_fixed_point(primitives, kernel)
    expected = _oracle_ccp(SMALL_U, SMALL_KERNEL, 0.9)
    assert np.max(np.abs(solved.P - expected)) < 1e-10
    assert np.max(np.abs(solved.P_tilde - solved.P)) < 1e-14


def test_tiny_delta_is_static_logit():
    primitives, kernel = _small(beta=0.7, beta_tilde=0.9, delta=1e-9)
    solved = solve_fixed_point(primitives, kernel)
    static = softmax(np.vstack([np.zeros((1, 2)), SMALL_U]), axis=0)
    assert np.max(np.abs(solved.P - static)) < 1e-6


def test_zero_utility_with_choice_independent_transitions_is_uniform():
    primitives, kernel = load_model_config(model_path('symmetric_zero.json'))
    solved = solve_fixed_point(primitives, kernel)
    assert np.allclose(solved.P, 1.0 / 3.0, atol=1e-12)
    assert np.allclose(solved.P.sum(axis=0), 1.0)


def test_reference_design_solves_and_probabilities_sum_to_one(reference_solved):
    assert reference_solved.residual <= 1e-12
    assert np.allclose(reference_solved.P.sum(axis=0), 1.0, atol=1e-14)
    assert np.allclose(reference_solved.P_tilde.sum(axis=0), 1.0, atol=1e-14)
    assert np.allclose(reference_solved.Z, REFERENCE_KERNEL @ reference_solved.V)
    assert reference_solved.iterations == len(reference_solved.residual_history)


def test_residual_history_contracts_at_rate_delta_in_exponential_case():
    primitives, kernel = _small(delta=0.9)
    history = solve_fixed_point(primitives, kernel, policy_steps=False).residual_history
    assert len(history) > 31
    for before, after in zip(history[:30], history[1:31]):
        assert after <= 0.9 * before * (1 + 1e-8)


def test_residual_history_is_monotone_after_burn_in_with_present_bias():
    primitives, kernel = _small(beta=0.7, beta_tilde=0.9, delta=0.6)
    history = solve_fixed_point(primitives, kernel, policy_steps=False).residual_history
    tail = [(before, after) for before, after in zip(history[10:], history[11:]) if before > 1e-11]
    assert len(tail) > 10
    for before, after in tail:
        assert after <= before


def test_policy_steps_reach_the_same_fixed_point_faster(reference):
    primitives, kernel = reference
    plain = solve_fixed_point(primitives, kernel, policy_steps=False)
    fast = solve_fixed_point(primitives, kernel, policy_steps=True)
    assert np.max(np.abs(fast.V - plain.V)) < 1e-10
    assert np.max(np.abs(fast.P - plain.P)) < 1e-10
    assert fast.iterations < plain.iterations
    assert fast.residual_history[-1] <= 1e-12


def test_policy_steps_handle_delta_near_one():
    primitives, kernel = make_primitives(delta=0.995)
    with pytest.raises(NoConvergence):
        solve_fixed_point(primitives, kernel, tol=1e-9, max_iter=200, policy_steps=False)
    fast = solve_fixed_point(primitives, kernel, tol=1e-9, max_iter=200)
    V = fast.V
    again = bellman_update(V, primitives.u.full(), kernel.probs, 0.9, 0.995)
    assert np.max(np.abs(again - V)) < 1e-8


def test_policy_evaluation_is_exact_at_the_fixed_point(reference_solved, reference):
    primitives, kernel = reference
    W = policy_evaluation(reference_solved.V, primitives.u.full(), kernel.probs, 0.9, 0.85)
    assert np.max(np.abs(W - reference_solved.V)) < 1e-10


def test_present_bias_shifts_observed_ccps(reference_solved):
    # beta < beta_tilde: observed and perceived CCPs differ
    assert np.max(np.abs(reference_solved.P - reference_solved.P_tilde)) > 1e-4


def test_no_convergence_carries_diagnostics(reference):
    primitives, kernel = reference
    with pytest.raises(NoConvergence) as info:
        solve_fixed_point(primitives, kernel, max_iter=3)
    assert info.value.iterations == 3
    assert info.value.residual > 1e-12


def test_damping_reaches_the_same_fixed_point(reference, reference_solved):
    primitives, kernel = reference
    damped = solve_fixed_point(primitives, kernel, damping=0.5)
    assert np.max(np.abs(damped.V - reference_solved.V)) < 1e-10
    with pytest.raises(DomainError):
        perceived_value(primitives.u.full(), kernel.probs, 0.9, 0.85, damping=1.5)


def test_validation_errors():
    bad = REFERENCE_KERNEL.copy()
    bad[1, 2, 0] += 0.01
    primitives, _ = make_primitives()
    with pytest.raises(RowSumError) as info:
        validate(primitives, TransitionKernel(bad))
    assert (info.value.choice, info.value.state) == (1, 2)

    with pytest.raises(DomainError):
        validate(*make_primitives(beta=0.0))
    with pytest.raises(DomainError):
        validate(*make_primitives(delta=1.0))
    with pytest.raises(DimensionError):
        validate(*make_primitives(u=REFERENCE_U[:, :3]))
    with pytest.raises(DimensionError):
        StateSpace(2, 1)


def test_errors_belong_to_the_config_family():
    assert issubclass(RowSumError, ValueError)
    assert issubclass(EmptyCell, ConfigError)
    assert issubclass(NoConvergence, RuntimeError)


def test_data_vector_has_dimension_s(reference_data):
    b = reference_data.to_vector()
    assert b.shape == (44,)
    back = DataSet.from_vector(b, reference_data.state_space, 3)
    assert np.allclose(back.P, reference_data.P, atol=1e-15)
    assert np.allclose(back.kernel.probs, reference_data.kernel.probs, atol=1e-15)
    with pytest.raises(DimensionError):
        DataSet.from_vector(b[:-1], reference_data.state_space, 3)


def test_state_index_layout():
    ss = StateSpace(2, 3)
    assert ss.index(1, 2) == 5
    assert ss.split(4) == (1, 1)


def test_simulation_is_deterministic_and_independent_of_workers(reference, reference_solved):
    _, kernel = reference
    a = simulate_panel(reference_solved, kernel, 50, 20, seed=42, workers=1)
    b = simulate_panel(reference_solved, kernel, 50, 20, seed=42, workers=1)
    c = simulate_panel(reference_solved, kernel, 50, 20, seed=42, workers=3)
    pd.testing.assert_frame_equal(a, b)
    pd.testing.assert_frame_equal(a, c)
    d = simulate_panel(reference_solved, kernel, 50, 20, seed=43, workers=1)
    assert not a.equals(d)


def test_zero_agents_gives_empty_panel(reference, reference_solved):
    _, kernel = reference
    panel = simulate_panel(reference_solved, kernel, 0, 50, seed=1)
    assert panel.empty
    assert list(panel.columns) == ['agent', 'period', 'state', 'choice']


def test_exact_enumeration_recovers_p_and_pi(reference, reference_solved):
    _, kernel = reference
    P = reference_solved.P
    rows = []
    agent = 0
    for x in range(4):
        for i in range(3):
            for y in range(4):
                rows.append((agent, 0, x, i, P[i, x] * kernel.probs[i, x, y]))
                rows.append((agent, 1, y, 0, 0.0))
                agent += 1
    panel = pd.DataFrame(rows, columns=['agent', 'period', 'state', 'choice', 'weight'])
    estimated = estimate_frequencies(panel, StateSpace(2, 2), 3)
    assert np.max(np.abs(estimated.P - P)) < 1e-12
    assert np.max(np.abs(estimated.kernel.probs - kernel.probs)) < 1e-12


def test_empty_cells_raise_unless_smoothed():
    panel = pd.DataFrame({'agent': [0, 0, 0], 'period': [0, 1, 2],
                          'state': [0, 1, 0], 'choice': [0, 0, 0]})
    with pytest.raises(EmptyCell) as info:
        estimate_frequencies(panel, StateSpace(1, 2), 2)
    assert info.value.kind == 'choice'
    smoothed = estimate_frequencies(panel, StateSpace(1, 2), 2, smoothing=True)
    assert np.allclose(smoothed.P.sum(axis=0), 1.0)


def test_zero_utility_simulation_frequencies_are_uniform():
    primitives, kernel = load_model_config(model_path('symmetric_zero.json'))
    solved = solve_fixed_point(primitives, kernel)
    panel = simulate_panel(solved, kernel, 2000, 20, seed=11, workers=1)
    n = len(panel)
    share = panel['choice'].value_counts(normalize=True).sort_index()
    assert list(share.index) == [0, 1, 2]
    se = np.sqrt((1.0 / 3.0) * (2.0 / 3.0) / n)
    assert np.all(np.abs(share.to_numpy() - 1.0 / 3.0) < 3.0 * se)


@pytest.mark.slow
def test_monte_carlo_frequencies_converge(reference, reference_solved):
    _, kernel = reference
    panel = simulate_panel(reference_solved, kernel, 100_000, 50, seed=7, workers=2)
    estimated = estimate_frequencies(panel, StateSpace(2, 2), 3)
    assert np.max(np.abs(estimated.P - reference_solved.P)) < 0.01
    assert np.max(np.abs(estimated.kernel.probs - kernel.probs)) < 0.01


def test_ccp_frame_layout(reference_solved):
    frame = ccp_frame(reference_solved, StateSpace(2, 2))
    assert len(frame) == 12
    assert np.allclose(frame.groupby('state')['P'].sum(), 1.0)


def test_missing_model_config_names_path(tmp_path):
    path = tmp_path / 'nope.json'
    with pytest.raises(ConfigError, match='nope.json'):
        load_model_config(str(path))
