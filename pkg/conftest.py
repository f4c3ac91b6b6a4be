"""Shared fixtures: the 2x2 reference design and its exponential variants."""

import os

import numpy as np
import pytest

from hyperbolic_model import (
    DataSet,
    DiscountParams,
    ModelPrimitives,
    StateSpace,
    TransitionKernel,
    UtilityMatrix,
    load_dataset,
    load_model_config,
    solve_fixed_point,
)

ROOT = os.path.dirname(os.path.abspath(__file__))
MODELS = os.path.join(ROOT, 'models')

REFERENCE_U = np.array([[1.0, 1.0, -1.0, -1.0], [-0.5, -0.5, 1.5, 1.5]])
REFERENCE_KERNEL = np.array([
    [[0.6, 0.2, 0.1, 0.1], [0.3, 0.4, 0.2, 0.1], [0.1, 0.2, 0.5, 0.2], [0.25, 0.25, 0.25, 0.25]],
    [[0.1, 0.5, 0.2, 0.2], [0.2, 0.2, 0.3, 0.3], [0.4, 0.1, 0.1, 0.4], [0.05, 0.15, 0.3, 0.5]],
    [[0.2, 0.1, 0.6, 0.1], [0.1, 0.3, 0.1, 0.5], [0.3, 0.3, 0.2, 0.2], [0.5, 0.1, 0.1, 0.3]],
])


def model_path(name: str) -> str:
    return os.path.join(MODELS, name)


def make_primitives(beta=0.7, beta_tilde=0.9, delta=0.85, u=REFERENCE_U, kernel=REFERENCE_KERNEL):
    primitives = ModelPrimitives(StateSpace(2, 2), 3, UtilityMatrix(u),
                                 DiscountParams(beta, beta_tilde, delta))
    return primitives, TransitionKernel(kernel)


def generate_data(beta=0.7, beta_tilde=0.9, delta=0.85, u=REFERENCE_U, kernel=REFERENCE_KERNEL):
    primitives, k = make_primitives(beta, beta_tilde, delta, u, kernel)
    solved = solve_fixed_point(primitives, k)
    return DataSet.from_solution(solved, k, primitives.state_space)


@pytest.fixture
def reference():
    return make_primitives()


@pytest.fixture
def reference_solved(reference):
    primitives, kernel = reference
    return solve_fixed_point(primitives, kernel)


@pytest.fixture
def reference_data():
    return generate_data()


@pytest.fixture
def exponential_data():
    return generate_data(beta=1.0, beta_tilde=1.0, delta=0.8)


@pytest.fixture
def finite_dependence_data():
    primitives, kernel = load_model_config(model_path('finite_dependence.json'))
    solved = solve_fixed_point(primitives, kernel)
    return DataSet.from_solution(solved, kernel, primitives.state_space)


@pytest.fixture
def degenerate_data():
    primitives, kernel = load_model_config(model_path('degenerate.json'))
    solved = solve_fixed_point(primitives, kernel)
    return DataSet.from_solution(solved, kernel, primitives.state_space)


@pytest.fixture
def renewal_data():
    """Moment condition for restriction 1:0:0:1 is 0.5 (d - 0.4)(d - 0.8)."""
    return load_dataset(model_path('two_period_renewal_data.json'))
