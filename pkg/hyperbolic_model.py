#!/usr/bin/env python3
"""
Hyperbolic Discounting Dynamic Discrete Choice Model

Stationary, infinite-horizon model with partially naive quasi-hyperbolic
time preferences and type-1 extreme value taste shocks:

- the agent discounts with (beta, delta) and believes her future selves
  discount with (beta_tilde, delta);
- choice 0 is the reference alternative with u_0(x) = 0;
- states are x = (x_r, x_e) flattened as x = x_r * n_e + x_e.

Provides validation, the perception-perfect value fixed point, panel
simulation and cell-frequency estimation of the data (P, Pi).
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.linalg import LinAlgError, solve
from scipy.special import log_softmax, softmax

from lab_errors import (
    ConfigError,
    DimensionError,
    DomainError,
    EmptyCell,
    NoConvergence,
    RowSumError,
)

logger = logging.getLogger(__name__)

# Mean of the type-1 extreme value distribution
EULER_GAMMA: float = 0.5772156649015329

DELTA_MAX: float = 1.0 - 1e-6
ROW_SUM_TOL: float = 1e-9
PANEL_COLUMNS = ['agent', 'period', 'state', 'choice']


def _frozen_array(values: Any, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class StateSpace:
    """Observed state x = (x_r, x_e) with x_e the excluded component."""
    n_r: int
    n_e: int

    def __post_init__(self):
        if int(self.n_r) < 1:
            raise DimensionError(f"n_r must be >= 1, got {self.n_r}")
        if int(self.n_e) < 2:
            raise DimensionError(f"n_e must be >= 2, got {self.n_e}")

    @property
    def n_states(self) -> int:
        return self.n_r * self.n_e

    def index(self, x_r: int, x_e: int) -> int:
        if not (0 <= x_r < self.n_r and 0 <= x_e < self.n_e):
            raise DimensionError(f"state ({x_r}, {x_e}) outside {self.n_r}x{self.n_e} grid")
        return x_r * self.n_e + x_e

    def split(self, x: int) -> Tuple[int, int]:
        return divmod(int(x), self.n_e)


@dataclass(frozen=True)
class DiscountParams:
    beta: float
    beta_tilde: float
    delta: float

    def validate(self) -> 'DiscountParams':
        for name in ('beta', 'beta_tilde'):
            value = getattr(self, name)
            if not (0.0 < value <= 1.0):
                raise DomainError(f"{name}={value} outside (0, 1]")
        if not (0.0 < self.delta <= DELTA_MAX):
            raise DomainError(f"delta={self.delta} outside (0, {DELTA_MAX}]")
        return self

    @property
    def is_exponential(self) -> bool:
        return self.beta == 1.0 and self.beta_tilde == 1.0


@dataclass(frozen=True, eq=False)
class TransitionKernel:
    """pi(x'|x, i) stored as probs[i, x, x']."""
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'probs', _frozen_array(self.probs))

    @property
    def n_choices(self) -> int:
        return self.probs.shape[0]

    @property
    def n_states(self) -> int:
        return self.probs.shape[1]

    def validate(self, tol: float = ROW_SUM_TOL) -> 'TransitionKernel':
        if self.probs.ndim != 3 or self.probs.shape[1] != self.probs.shape[2]:
            raise DimensionError(f"kernel must have shape (I+1, X, X), got {self.probs.shape}")
        if not np.all(np.isfinite(self.probs)):
            raise DomainError("kernel has non-finite entries")
        if np.any(self.probs < 0.0):
            i, x, y = np.argwhere(self.probs < 0.0)[0]
            raise DomainError(f"negative transition probability pi({y}|{x},{i})={self.probs[i, x, y]}")
        sums = self.probs.sum(axis=2)
        off = np.abs(sums - 1.0)
        if np.any(off > tol):
            i, x = np.unravel_index(int(np.argmax(off)), off.shape)
            raise RowSumError(int(i), int(x), float(sums[i, x]))
        return self


@dataclass(frozen=True, eq=False)
class UtilityMatrix:
    """u_i(x) for i = 1..I; u_0 is identically zero and not stored."""
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'values', _frozen_array(np.atleast_2d(self.values)))

    @property
    def n_alternatives(self) -> int:
        return self.values.shape[0]

    def full(self) -> np.ndarray:
        """(I+1, X) array with the zero row of choice 0 prepended."""
        return np.vstack([np.zeros((1, self.values.shape[1])), self.values])


@dataclass(frozen=True)
class ModelPrimitives:
    state_space: StateSpace
    n_choices: int
    u: UtilityMatrix
    disc: DiscountParams

    @property
    def n_params(self) -> int:
        return (self.n_choices - 1) * self.state_space.n_states + 3


@dataclass(frozen=True, eq=False)
class SolvedModel:
    V: np.ndarray
    Z: np.ndarray
    P_tilde: np.ndarray
    P: np.ndarray
    residual: float
    iterations: int
    residual_history: Tuple[float, ...] = field(default=())

    def __post_init__(self):
        for name in ('V', 'Z', 'P_tilde', 'P'):
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))


@dataclass(frozen=True, eq=False)
class DataSet:
    """Observed CCPs P[i, x] and transition kernel; flattens to b in R^s."""
    P: np.ndarray
    kernel: TransitionKernel
    state_space: StateSpace

    def __post_init__(self):
        object.__setattr__(self, 'P', _frozen_array(self.P))
        if not isinstance(self.kernel, TransitionKernel):
            object.__setattr__(self, 'kernel', TransitionKernel(self.kernel))

    @property
    def n_choices(self) -> int:
        return self.P.shape[0]

    @property
    def n_states(self) -> int:
        return self.P.shape[1]

    @property
    def data_dim(self) -> int:
        return data_dimension(self.n_choices, self.n_states)

    def validate(self, tol: float = ROW_SUM_TOL) -> 'DataSet':
        I1, X = self.n_choices, self.n_states
        if X != self.state_space.n_states:
            raise DimensionError(f"P has {X} states, state space has {self.state_space.n_states}")
        if self.kernel.probs.shape != (I1, X, X):
            raise DimensionError(f"kernel shape {self.kernel.probs.shape} != {(I1, X, X)}")
        if np.any(self.P < 0.0) or np.any(self.P > 1.0) or not np.all(np.isfinite(self.P)):
            raise DomainError("choice probabilities must lie in [0, 1]")
        sums = self.P.sum(axis=0)
        if np.any(np.abs(sums - 1.0) > tol):
            x = int(np.argmax(np.abs(sums - 1.0)))
            raise DomainError(f"choice probabilities in state {x} sum to {sums[x]:.12g}")
        self.kernel.validate(tol)
        return self

    def to_vector(self) -> np.ndarray:
        """Drop P_0(x) and pi(X-1|x,i); stack the rest (length s)."""
        return np.concatenate([self.P[1:].ravel(), self.kernel.probs[:, :, :-1].ravel()])

    @classmethod
    def from_vector(cls, b: np.ndarray, state_space: StateSpace, n_choices: int) -> 'DataSet':
        """Inverse of to_vector. No validation, so perturbed vectors are accepted."""
        b = np.asarray(b, dtype=float)
        X = state_space.n_states
        I = n_choices - 1
        expected = data_dimension(n_choices, X)
        if b.shape != (expected,):
            raise DimensionError(f"data vector has shape {b.shape}, expected ({expected},)")
        rest = b[:I * X].reshape(I, X)
        P = np.vstack([1.0 - rest.sum(axis=0, keepdims=True), rest])
        k_rest = b[I * X:].reshape(n_choices, X, X - 1)
        probs = np.concatenate([k_rest, 1.0 - k_rest.sum(axis=2, keepdims=True)], axis=2)
        return cls(P=P, kernel=TransitionKernel(probs), state_space=state_space)

    @classmethod
    def from_solution(cls, solved: SolvedModel, kernel: TransitionKernel,
                      state_space: StateSpace) -> 'DataSet':
        return cls(P=solved.P, kernel=kernel, state_space=state_space)

    def to_json_dict(self) -> Dict[str, Any]:
        return {
            'n_r': self.state_space.n_r,
            'n_e': self.state_space.n_e,
            'n_choices': self.n_choices,
            'P': self.P.tolist(),
            'kernel': self.kernel.probs.tolist(),
        }

    @classmethod
    def from_json_dict(cls, doc: Dict[str, Any]) -> 'DataSet':
        try:
            state_space = StateSpace(int(doc['n_r']), int(doc['n_e']))
            data = cls(P=np.asarray(doc['P'], dtype=float),
                       kernel=TransitionKernel(np.asarray(doc['kernel'], dtype=float)),
                       state_space=state_space)
            if int(doc['n_choices']) != data.n_choices:
                raise DimensionError(f"n_choices={doc['n_choices']} but P has {data.n_choices} rows")
        except KeyError as e:
            raise ConfigError(f"data document is missing key {e}") from e
        return data.validate()


def data_dimension(n_choices: int, n_states: int) -> int:
    """s = I X + (I+1) X (X-1)."""
    return (n_choices - 1) * n_states + n_choices * n_states * (n_states - 1)


def validate(primitives: ModelPrimitives,
             kernel: TransitionKernel) -> Tuple[ModelPrimitives, TransitionKernel]:
    """Check every type invariant; return the pair unchanged."""
    X = primitives.state_space.n_states
    I1 = int(primitives.n_choices)
    if I1 < 2:
        raise DimensionError(f"need at least two choices, got n_choices={I1}")
    if primitives.u.values.shape != (I1 - 1, X):
        raise DimensionError(f"u has shape {primitives.u.values.shape}, expected {(I1 - 1, X)}")
    if not np.all(np.isfinite(primitives.u.values)):
        raise DomainError("utilities must be finite")
    if kernel.probs.shape != (I1, X, X):
        raise DimensionError(f"kernel has shape {kernel.probs.shape}, expected {(I1, X, X)}")
    kernel.validate()
    primitives.disc.validate()
    return primitives, kernel


def logit_ccp(u_full: np.ndarray, Z: np.ndarray, factor: float) -> np.ndarray:
    """softmax over choices of u + factor * Z (log domain, max-shifted)."""
    return softmax(u_full + factor * Z, axis=0)


def bellman_update(V: np.ndarray, u_full: np.ndarray, probs: np.ndarray,
                   beta_tilde: float, delta: float) -> np.ndarray:
    """One application of the perceived long-run value recursion."""
    Z = probs @ V
    log_pt = log_softmax(u_full + beta_tilde * delta * Z, axis=0)
    return np.sum(np.exp(log_pt) * (u_full + EULER_GAMMA - log_pt + delta * Z), axis=0)


def policy_evaluation(V: np.ndarray, u_full: np.ndarray, probs: np.ndarray,
                      beta_tilde: float, delta: float) -> Optional[np.ndarray]:
    """Value of holding the perceived CCPs implied by V fixed forever.

    Solves (Id - delta sum_i P~_i Pi_i) W = sum_i P~_i (u_i + gamma - ln P~_i).
    Returns None when the linear system is singular.
    """
    log_pt = log_softmax(u_full + beta_tilde * delta * (probs @ V), axis=0)
    pt = np.exp(log_pt)
    flow = np.sum(pt * (u_full + EULER_GAMMA - log_pt), axis=0)
    F = np.einsum('ix,ixy->xy', pt, probs)
    try:
        W = solve(np.eye(V.shape[0]) - delta * F, flow)
    except LinAlgError:
        return None
    return W if np.all(np.isfinite(W)) else None


def perceived_value(u_full: np.ndarray, probs: np.ndarray, beta_tilde: float, delta: float,
                    tol: float = 1e-12, max_iter: int = 10_000, damping: float = 1.0,
                    V0: Optional[np.ndarray] = None,
                    policy_steps: bool = True) -> Tuple[np.ndarray, float, int, List[float]]:
    """Damped successive approximation on V; no input validation.

    With ``policy_steps`` every iteration also tries a policy-evaluation
    step and keeps whichever candidate has the smaller Bellman residual.

    Returns (V, residual, iterations, residual_history), where the history
    holds sup|T(V_k) - V_k| per iterate. Raises NoConvergence when the
    residual is still above tol after max_iter iterations.
    """
    if not (0.0 < damping <= 1.0):
        raise DomainError(f"damping must lie in (0, 1], got {damping}")
    V = np.zeros(probs.shape[1]) if V0 is None else np.array(V0, dtype=float)
    TV = bellman_update(V, u_full, probs, beta_tilde, delta)
    history: List[float] = []
    residual = np.inf
    for it in range(1, max_iter + 1):
        residual = float(np.max(np.abs(TV - V)))
        history.append(residual)
        if not np.isfinite(residual):
            break
        if residual <= tol:
            return TV, residual, it, history
        V_next = TV if damping == 1.0 else V + damping * (TV - V)
        TV_next = bellman_update(V_next, u_full, probs, beta_tilde, delta)
        if policy_steps:
            W = policy_evaluation(V_next, u_full, probs, beta_tilde, delta)
            if W is not None:
                TW = bellman_update(W, u_full, probs, beta_tilde, delta)
                if np.max(np.abs(TW - W)) < np.max(np.abs(TV_next - V_next)):
                    V_next, TV_next = W, TW
        V, TV = V_next, TV_next
    raise NoConvergence(residual, len(history), tol)


def solve_fixed_point(primitives: ModelPrimitives, kernel: TransitionKernel,
                      tol: float = 1e-12, max_iter: int = 10_000,
                      damping: float = 1.0, policy_steps: bool = True) -> SolvedModel:
    """Solve the stationary perception-perfect strategy and its CCPs."""
    if tol <= 0:
        raise DomainError(f"tol must be positive, got {tol}")
    validate(primitives, kernel)
    disc = primitives.disc
    u_full = primitives.u.full()
    V, residual, iterations, history = perceived_value(
        u_full, kernel.probs, disc.beta_tilde, disc.delta, tol, max_iter, damping,
        policy_steps=policy_steps)
    Z = kernel.probs @ V
    P_tilde = logit_ccp(u_full, Z, disc.beta_tilde * disc.delta)
    P = logit_ccp(u_full, Z, disc.beta * disc.delta)
    logger.debug("fixed point converged in %d iterations (residual %.3e)", iterations, residual)
    return SolvedModel(V=V, Z=Z, P_tilde=P_tilde, P=P, residual=residual,
                       iterations=iterations, residual_history=tuple(history))


def _agent_draws(seed: int, agent: int, n_states: int, n_periods: int) -> Tuple[int, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(agent)]))
    x0 = int(rng.integers(n_states))
    return x0, rng.random((n_periods, 2))


def _simulate_chunk(agents: np.ndarray, P: np.ndarray, probs: np.ndarray,
                    n_periods: int, seed: int) -> pd.DataFrame:
    n_choices, n_states = P.shape
    n = len(agents)
    states0 = np.empty(n, dtype=np.int64)
    draws = np.empty((n, n_periods, 2))
    for k, agent in enumerate(agents):
        states0[k], draws[k] = _agent_draws(seed, agent, n_states, n_periods)

    cum_P = np.cumsum(P, axis=0).T          # (X, I+1)
    cum_K = np.cumsum(probs, axis=2)        # (I+1, X, X)
    states = np.empty((n, n_periods), dtype=np.int64)
    choices = np.empty((n, n_periods), dtype=np.int64)
    x = states0
    for t in range(n_periods):
        states[:, t] = x
        c = np.minimum((draws[:, t, 0][:, None] >= cum_P[x]).sum(axis=1), n_choices - 1)
        choices[:, t] = c
        x = np.minimum((draws[:, t, 1][:, None] >= cum_K[c, x]).sum(axis=1), n_states - 1)

    return pd.DataFrame({
        'agent': np.repeat(agents, n_periods).astype(np.int64),
        'period': np.tile(np.arange(n_periods, dtype=np.int64), n),
        'state': states.ravel(),
        'choice': choices.ravel(),
    })


def simulate_panel(solved: SolvedModel, kernel: TransitionKernel, n_agents: int,
                   n_periods: int, seed: int, workers: int = 1) -> pd.DataFrame:
    """Simulate (agent, period, state, choice) records from the observed CCPs.

    Each agent draws from its own stream seeded by (seed, agent), so the
    panel does not depend on how agents are split across workers.
    """
    if n_agents < 0 or n_periods < 0:
        raise DomainError("n_agents and n_periods must be non-negative")
    if kernel.probs.shape[1] != solved.P.shape[1] or kernel.probs.shape[0] != solved.P.shape[0]:
        raise DimensionError("kernel and solved model disagree on dimensions")
    if n_agents == 0 or n_periods == 0:
        return pd.DataFrame({c: pd.Series(dtype=np.int64) for c in PANEL_COLUMNS})

    chunks = [c for c in np.array_split(np.arange(n_agents), max(1, int(workers))) if len(c)]
    frames = Parallel(n_jobs=max(1, int(workers)))(
        delayed(_simulate_chunk)(chunk, solved.P, kernel.probs, n_periods, seed) for chunk in chunks
    )
    panel = pd.concat(frames, ignore_index=True)
    logger.info("simulated %d records for %d agents", len(panel), n_agents)
    return panel


def estimate_frequencies(panel: pd.DataFrame, state_space: StateSpace, n_choices: int,
                         smoothing: bool = False) -> DataSet:
    """Maximum-likelihood cell frequencies P_hat[i, x] and pi_hat(x'|x, i).

    An optional ``weight`` column weights each record (transitions are
    weighted by the record they leave from). Empty cells raise EmptyCell
    unless ``smoothing`` adds one pseudo-count to every cell.
    """
    X = state_space.n_states
    missing = [c for c in PANEL_COLUMNS if c not in panel.columns]
    if missing:
        raise ConfigError(f"panel is missing columns {missing}")

    df = panel.sort_values(['agent', 'period'], kind='mergesort')
    states = df['state'].to_numpy(dtype=np.int64)
    choices = df['choice'].to_numpy(dtype=np.int64)
    if len(df) and (states.min() < 0 or states.max() >= X or choices.min() < 0
                    or choices.max() >= n_choices):
        raise DimensionError("panel has states or choices outside the model dimensions")
    weights = df['weight'].to_numpy(dtype=float) if 'weight' in df.columns else np.ones(len(df))

    choice_counts = np.zeros((n_choices, X))
    np.add.at(choice_counts, (choices, states), weights)

    next_state = df.groupby('agent', sort=False)['state'].shift(-1)
    has_next = next_state.notna().to_numpy()
    trans_counts = np.zeros((n_choices, X, X))
    np.add.at(trans_counts,
              (choices[has_next], states[has_next], next_state[has_next].to_numpy(dtype=np.int64)),
              weights[has_next])

    if smoothing:
        choice_counts += 1.0
        trans_counts += 1.0
    else:
        empty = np.argwhere(choice_counts <= 0.0)
        if len(empty):
            raise EmptyCell(int(empty[0][0]), int(empty[0][1]), 'choice')
        empty = np.argwhere(trans_counts.sum(axis=2) <= 0.0)
        if len(empty):
            raise EmptyCell(int(empty[0][0]), int(empty[0][1]), 'transition')

    P_hat = choice_counts / choice_counts.sum(axis=0, keepdims=True)
    K_hat = trans_counts / trans_counts.sum(axis=2, keepdims=True)
    return DataSet(P=P_hat, kernel=TransitionKernel(K_hat), state_space=state_space).validate()


def primitives_from_dict(doc: Dict[str, Any]) -> Tuple[ModelPrimitives, TransitionKernel]:
    """Build and validate primitives from the JSON model document."""
    try:
        state_space = StateSpace(int(doc['n_r']), int(doc['n_e']))
        primitives = ModelPrimitives(
            state_space=state_space,
            n_choices=int(doc['n_choices']),
            u=UtilityMatrix(np.asarray(doc['u'], dtype=float)),
            disc=DiscountParams(float(doc['beta']), float(doc['beta_tilde']), float(doc['delta'])),
        )
        kernel = TransitionKernel(np.asarray(doc['kernel'], dtype=float))
    except KeyError as e:
        raise ConfigError(f"model config is missing key {e}") from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"model config is malformed: {e}") from e
    return validate(primitives, kernel)


def load_model_config(path: str) -> Tuple[ModelPrimitives, TransitionKernel]:
    if not os.path.exists(path):
        raise ConfigError(f"model config not found: {path}")
    try:
        with open(path, 'r') as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"model config {path} is not valid JSON: {e}") from e
    return primitives_from_dict(doc)


def load_dataset(path: str) -> DataSet:
    if not os.path.exists(path):
        raise ConfigError(f"data file not found: {path}")
    try:
        with open(path, 'r') as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"data file {path} is not valid JSON: {e}") from e
    return DataSet.from_json_dict(doc)


def ccp_frame(solved: SolvedModel, state_space: StateSpace) -> pd.DataFrame:
    """Long table of observed and perceived CCPs per (state, choice)."""
    n_choices, X = solved.P.shape
    x = np.tile(np.arange(X), n_choices)
    return pd.DataFrame({
        'state': x,
        'x_r': x // state_space.n_e,
        'x_e': x % state_space.n_e,
        'choice': np.repeat(np.arange(n_choices), X),
        'P': solved.P.ravel(),
        'P_tilde': solved.P_tilde.ravel(),
    })


def value_frame(solved: SolvedModel, state_space: StateSpace) -> pd.DataFrame:
    X = solved.V.shape[0]
    x = np.arange(X)
    return pd.DataFrame({'state': x, 'x_r': x // state_space.n_e,
                         'x_e': x % state_space.n_e, 'V': solved.V})
