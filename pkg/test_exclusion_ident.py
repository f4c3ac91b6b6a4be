import numpy as np
import pytest

from conftest import REFERENCE_KERNEL, REFERENCE_U, generate_data
from exclusion_ident import (
    ExclusionRestriction,
    IdentifiedSet,
    all_restrictions,
    exante_values,
    identified_set,
    identify_all,
    intersect_sets,
    moment_condition,
    recover_utilities,
)
from hyperbolic_model import EULER_GAMMA, DataSet, StateSpace, TransitionKernel
from lab_errors import ConfigError, DegenerateRestriction, DomainError
from system_builder import hotz_miller_residuals, pack_params

R1 = ExclusionRestriction(1, 0, 0, 1)


def _random_data(seed):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(3), size=4).T
    kernel = rng.dirichlet(np.ones(4), size=(3, 4))
    return DataSet(P=P, kernel=TransitionKernel(kernel), state_space=StateSpace(2, 2)).validate()


def test_exante_values_at_zero_delta(exponential_data):
    V = exante_values(exponential_data, 0.0)
    assert np.allclose(V, EULER_GAMMA - np.log(exponential_data.P[0]), atol=1e-15)


def test_exante_values_closed_form_for_uniform_ccps():
    data = DataSet(P=np.full((3, 4), 1.0 / 3.0), kernel=TransitionKernel(REFERENCE_KERNEL),
                   state_space=StateSpace(2, 2))
    V = exante_values(data, 0.6)
    assert np.allclose(V, (EULER_GAMMA + np.log(3.0)) / 0.4, atol=1e-12)


@pytest.mark.parametrize('seed', [0, 1, 2])
def test_exante_values_solve_the_defining_equation(seed):
    data = _random_data(seed)
    V = exante_values(data, 0.7)
    rhs = EULER_GAMMA - np.log(data.P[0]) + 0.7 * data.kernel.probs[0] @ V
    assert np.max(np.abs(V - rhs)) < 1e-12


def test_delta_outside_unit_interval_is_rejected(exponential_data):
    with pytest.raises(DomainError):
        exante_values(exponential_data, 1.0)
    with pytest.raises(DomainError):
        exante_values(exponential_data, -0.1)


def test_recover_utilities_round_trip(exponential_data):
    u = recover_utilities(exponential_data, 0.8).values
    assert np.max(np.abs(u - REFERENCE_U)) < 1e-8


def test_recover_utilities_special_cases(exponential_data):
    log_P = np.log(exponential_data.P)
    static = recover_utilities(exponential_data, 0.0).values
    assert np.allclose(static, log_P[1:] - log_P[0], atol=1e-14)

    flat = np.repeat(REFERENCE_KERNEL[:1], 3, axis=0)
    data = DataSet(P=exponential_data.P, kernel=TransitionKernel(flat), state_space=StateSpace(2, 2))
    assert np.allclose(recover_utilities(data, 0.7).values, log_P[1:] - log_P[0], atol=1e-14)


@pytest.mark.parametrize('delta', [0.2, 0.5, 0.9])
def test_inversion_zeroes_hotz_miller_block(exponential_data, delta):
    u = recover_utilities(exponential_data, delta).values
    params = pack_params(u, 1.0, 1.0, delta)
    assert np.max(np.abs(hotz_miller_residuals(params, exponential_data))) < 1e-8


def test_moment_condition_vanishes_at_truth_only(exponential_data):
    assert abs(moment_condition(exponential_data, R1, 0.8)) < 1e-8
    assert abs(moment_condition(exponential_data, R1, 0.5)) > 1e-6


@pytest.mark.parametrize('delta_star', [0.3, 0.8, 0.95])
def test_truth_is_in_every_identified_set(delta_star):
    data = generate_data(beta=1.0, beta_tilde=1.0, delta=delta_star)
    for restriction in all_restrictions(data.state_space, data.n_choices):
        found = identified_set(data, restriction)
        assert found.contains(delta_star, tol=1e-6)
        assert 1 <= found.size <= found.grid_size
        assert all(r <= 1e-10 for r in found.residuals)
        assert list(found.roots) == sorted(set(found.roots))


def test_finite_dependence_gives_point_identification(finite_dependence_data):
    for restriction in all_restrictions(finite_dependence_data.state_space, 3):
        found = identified_set(finite_dependence_data, restriction)
        assert found.point_identified
        assert found.roots[0] == pytest.approx(0.8, abs=1e-6)


def test_two_period_renewal_gives_two_roots(renewal_data):
    found = identified_set(renewal_data, R1)
    assert found.sign_changes == 2
    assert found.roots == pytest.approx([0.4, 0.8], abs=1e-9)
    assert not found.point_identified

    # m(d) = dL + d (c0 + c1 - 2 c2) + d^2 (c1 - c2) with c = gamma - ln P_0
    c = EULER_GAMMA - np.log(renewal_data.P[0])
    log_odds = np.log(renewal_data.P[1]) - np.log(renewal_data.P[0])
    coeffs = [c[1] - c[2], c[0] + c[1] - 2 * c[2], log_odds[0] - log_odds[1]]
    assert found.roots == pytest.approx(sorted(np.roots(coeffs).real), abs=1e-9)


def test_degenerate_restriction_is_flagged(degenerate_data):
    with pytest.raises(DegenerateRestriction) as info:
        identified_set(degenerate_data, R1)
    assert info.value.restriction == (1, 0, 0, 1)
    sets = identify_all(degenerate_data, [R1, ExclusionRestriction(2, 1, 0, 1)])
    assert all(s.degenerate for s in sets)
    assert sets[0].to_dict()['degenerate'] is True


def test_grid_size_floor(exponential_data):
    with pytest.raises(ConfigError):
        identified_set(exponential_data, R1, grid_size=50)


def test_trace_covers_the_grid(exponential_data):
    found = identified_set(exponential_data, R1, grid_size=200)
    trace = found.trace_frame()
    assert len(trace) == 200
    assert trace['delta'].iloc[-1] == pytest.approx(1 - 1e-6)


def test_parallel_grid_matches_serial(exponential_data):
    serial = identified_set(exponential_data, R1, grid_size=300, workers=1)
    parallel = identified_set(exponential_data, R1, grid_size=300, workers=2)
    assert serial.roots == parallel.roots
    assert np.array_equal(serial.values, parallel.values)


def test_intersections():
    a = IdentifiedSet(roots=[0.3, 0.8], residuals=[1e-12, 1e-12], grid_size=1000)
    b = IdentifiedSet(roots=[0.8 + 1e-8], residuals=[2e-12], grid_size=1000)
    assert intersect_sets([a]).roots == [0.3, 0.8]
    joint = intersect_sets([a, b])
    assert joint.roots == [0.8]
    assert joint.residuals == [2e-12]
    empty = intersect_sets([b, IdentifiedSet(roots=[0.3], residuals=[0.0])])
    assert empty.empty and empty.roots == []
    skipped = intersect_sets([a, IdentifiedSet(roots=[], residuals=[], degenerate=True)])
    assert skipped.roots == [0.3, 0.8]
    with pytest.raises(ConfigError):
        intersect_sets([])


def test_intersection_over_model_data_contains_truth(exponential_data):
    sets = identify_all(exponential_data, all_restrictions(StateSpace(2, 2), 3))
    assert len(sets) == 4
    assert intersect_sets(sets).contains(0.8)


def test_restriction_parsing_and_checks(exponential_data):
    assert ExclusionRestriction.parse('2:1:0:1') == ExclusionRestriction(2, 1, 0, 1)
    with pytest.raises(ConfigError):
        ExclusionRestriction.parse('2:1:0')
    with pytest.raises(ConfigError):
        ExclusionRestriction.parse('a:b:c:d')
    with pytest.raises(DomainError):
        ExclusionRestriction(1, 0, 1, 1)
    with pytest.raises(DomainError):
        moment_condition(exponential_data, ExclusionRestriction(3, 0, 0, 1), 0.5)
    assert len(all_restrictions(StateSpace(2, 3), 3)) == 8


def test_partial_plateau_is_flagged_but_not_degenerate():
    found = IdentifiedSet(roots=[0.8], residuals=[1e-12], grid_size=1000,
                          plateaus=[(0.1, 0.2)])
    doc = found.to_dict()
    assert doc['partially_degenerate'] is True
    assert doc['degenerate'] is False
    assert not found.point_identified
    clean = IdentifiedSet(roots=[0.8], residuals=[1e-12], grid_size=1000)
    assert clean.point_identified
    assert clean.to_dict()['partially_degenerate'] is False
    whole = IdentifiedSet(roots=[], residuals=[], degenerate=True)
    assert whole.to_dict()['partially_degenerate'] is False
