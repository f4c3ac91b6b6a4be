"""
Exclusion-restriction identification of the discount factor (exponential case).

With beta = beta_tilde = 1 the data invert into ex-ante values

    V(delta) = (Id - delta Pi_0)^-1 (gamma - ln P_0)

and utilities

    u_i(x) = ln P_i(x) - ln P_0(x) - delta ((Pi_i - Pi_0) V(delta))(x).

Each restriction u_i(x_r, x_e) = u_i(x_r, x_e') gives a scalar moment
condition m(delta); its roots on [0, 1 - 1e-6] form the identified set.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.linalg import LinAlgError, solve
from scipy.optimize import bisect

from hyperbolic_model import DELTA_MAX, EULER_GAMMA, DataSet, StateSpace, UtilityMatrix
from lab_errors import ConfigError, DegenerateRestriction, DomainError, SingularSystem
from system_builder import interior_log

logger = logging.getLogger(__name__)

MIN_GRID_SIZE = 100
PLATEAU_RUN = 3
BISECT_XTOL = 1e-14


@dataclass(frozen=True)
class ExclusionRestriction:
    """u_i(x_r, x_e) = u_i(x_r, x_e2)."""
    choice: int
    x_r: int
    x_e: int
    x_e2: int

    def __post_init__(self):
        if self.x_e == self.x_e2:
            raise DomainError(f"restriction {self.label} compares a state with itself")
        if self.choice < 1:
            raise DomainError(f"restriction {self.label}: choice must be >= 1 (choice 0 is the reference)")

    @property
    def label(self) -> str:
        return f"{self.choice}:{self.x_r}:{self.x_e}:{self.x_e2}"

    @classmethod
    def parse(cls, text: str) -> 'ExclusionRestriction':
        """Parse 'i:x_r:x_e:x_e2'."""
        parts = text.strip().split(':')
        if len(parts) != 4:
            raise ConfigError(f"restriction {text!r} must look like i:x_r:x_e:x_e2")
        try:
            fields = [int(p) for p in parts]
        except ValueError as e:
            raise ConfigError(f"restriction {text!r} has non-integer fields") from e
        return cls(*fields)

    def check(self, state_space: StateSpace, n_choices: int) -> 'ExclusionRestriction':
        if not 1 <= self.choice < n_choices:
            raise DomainError(f"restriction {self.label}: choice out of range 1..{n_choices - 1}")
        if not 0 <= self.x_r < state_space.n_r:
            raise DomainError(f"restriction {self.label}: x_r out of range")
        for e in (self.x_e, self.x_e2):
            if not 0 <= e < state_space.n_e:
                raise DomainError(f"restriction {self.label}: x_e out of range")
        return self

    def to_dict(self) -> Dict[str, int]:
        return {'choice': self.choice, 'x_r': self.x_r, 'x_e': self.x_e, 'x_e2': self.x_e2}


@dataclass(eq=False)
class IdentifiedSet:
    """Roots of one moment condition, or the intersection over several.

    degenerate means m vanishes on the whole grid. Near-zero runs of three or
    more grid points elsewhere are listed in plateaus and leave degenerate
    False; partially_degenerate flags them. Roots are not reported inside a
    plateau.
    """
    roots: List[float]
    residuals: List[float]
    restriction: Optional[ExclusionRestriction] = None
    grid_size: int = 0
    sign_changes: int = 0
    plateaus: List[Tuple[float, float]] = field(default_factory=list)
    degenerate: bool = False
    empty: bool = False
    delta_lo: float = 0.0
    delta_hi: float = DELTA_MAX
    grid: Optional[np.ndarray] = field(default=None, repr=False)
    values: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return len(self.roots)

    @property
    def point_identified(self) -> bool:
        return self.size == 1 and not self.degenerate and not self.plateaus

    @property
    def partially_degenerate(self) -> bool:
        return bool(self.plateaus) and not self.degenerate

    def contains(self, delta: float, tol: float = 1e-6) -> bool:
        return any(abs(r - delta) <= tol for r in self.roots)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'restriction': self.restriction.to_dict() if self.restriction else None,
            'roots': [float(r) for r in self.roots],
            'residuals': [float(r) for r in self.residuals],
            'degenerate': self.degenerate,
            'partially_degenerate': self.partially_degenerate,
            'empty': self.empty,
            'point_identified': self.point_identified,
            'grid_size': self.grid_size,
            'sign_changes': self.sign_changes,
            'plateaus': [list(p) for p in self.plateaus],
            'interval': [self.delta_lo, self.delta_hi],
        }

    def trace_frame(self) -> pd.DataFrame:
        if self.grid is None:
            return pd.DataFrame(columns=['delta', 'moment_value'])
        return pd.DataFrame({'delta': self.grid, 'moment_value': self.values})


def _check_delta(delta: float) -> float:
    delta = float(delta)
    if not 0.0 <= delta < 1.0:
        raise DomainError(f"delta must lie in [0, 1), got {delta}")
    return delta


def exante_values(data: DataSet, delta: float) -> np.ndarray:
    """Solve V = gamma - ln P_0 + delta Pi_0 V."""
    delta = _check_delta(delta)
    log_P0 = interior_log(data.P[0])
    Pi0 = data.kernel.probs[0]
    A = np.eye(data.n_states) - delta * Pi0
    try:
        return solve(A, EULER_GAMMA - log_P0)
    except LinAlgError as e:
        raise SingularSystem(f"Id - delta Pi_0 is singular at delta={delta}") from e


def recover_utilities(data: DataSet, delta: float) -> UtilityMatrix:
    V = exante_values(data, delta)
    log_P = interior_log(data.P)
    probs = data.kernel.probs
    contrast = (probs[1:] - probs[0]) @ V
    return UtilityMatrix((log_P[1:] - log_P[0]) - delta * contrast)


def moment_condition(data: DataSet, restriction: ExclusionRestriction, delta: float) -> float:
    r = restriction.check(data.state_space, data.n_choices)
    u = recover_utilities(data, delta).values
    ss = data.state_space
    return float(u[r.choice - 1, ss.index(r.x_r, r.x_e)] - u[r.choice - 1, ss.index(r.x_r, r.x_e2)])


def _moment_on(data: DataSet, restriction: ExclusionRestriction, deltas: np.ndarray) -> np.ndarray:
    return np.array([moment_condition(data, restriction, d) for d in deltas])


def moment_trace(data: DataSet, restriction: ExclusionRestriction, grid: np.ndarray,
                 workers: int = 1) -> np.ndarray:
    """m(delta) over a grid, evaluated in contiguous chunks."""
    workers = max(1, int(workers))
    if workers == 1:
        return _moment_on(data, restriction, grid)
    chunks = [c for c in np.array_split(grid, workers) if c.size]
    parts = Parallel(n_jobs=workers)(delayed(_moment_on)(data, restriction, c) for c in chunks)
    return np.concatenate(parts)


def _near_zero_runs(mask: np.ndarray) -> List[Tuple[int, int]]:
    """Inclusive [start, end] index runs where mask is True."""
    runs = []
    k = 0
    while k < mask.size:
        if mask[k]:
            j = k
            while j + 1 < mask.size and mask[j + 1]:
                j += 1
            runs.append((k, j))
            k = j + 1
        else:
            k += 1
    return runs


def identified_set(data: DataSet, restriction: ExclusionRestriction, grid_size: int = 1000,
                   root_tol: float = 1e-10, workers: int = 1) -> IdentifiedSet:
    """Roots of m(delta) on [0, 1 - 1e-6] by grid scan and bisection.

    Runs of at least three grid points with |m| < root_tol are reported as
    plateaus, not roots. Raises DegenerateRestriction when the whole grid is
    such a plateau.
    """
    if grid_size < MIN_GRID_SIZE:
        raise ConfigError(f"grid_size must be >= {MIN_GRID_SIZE}, got {grid_size}")
    restriction.check(data.state_space, data.n_choices)

    grid = np.linspace(0.0, DELTA_MAX, grid_size)
    values = moment_trace(data, restriction, grid, workers)
    near = np.abs(values) < root_tol

    if near.all():
        raise DegenerateRestriction(
            f"moment condition for {restriction.label} vanishes on the whole grid",
            restriction=(restriction.choice, restriction.x_r, restriction.x_e, restriction.x_e2))

    roots: List[float] = []
    plateaus: List[Tuple[float, float]] = []
    for start, end in _near_zero_runs(near):
        if end - start + 1 >= PLATEAU_RUN:
            plateaus.append((float(grid[start]), float(grid[end])))
        else:
            k = start + int(np.argmin(np.abs(values[start:end + 1])))
            roots.append(float(grid[k]))

    sign_changes = 0

    def f(d: float) -> float:
        return moment_condition(data, restriction, d)

    for k in range(grid_size - 1):
        if near[k] or near[k + 1] or values[k] * values[k + 1] >= 0.0:
            continue
        sign_changes += 1
        root = bisect(f, grid[k], grid[k + 1], xtol=BISECT_XTOL, maxiter=200)
        if abs(f(root)) <= root_tol:
            roots.append(float(root))
        else:
            logger.warning("%s: sign change in [%.6f, %.6f] did not refine below %.1e",
                           restriction.label, grid[k], grid[k + 1], root_tol)

    roots.sort()
    residuals = [abs(f(r)) for r in roots]
    if plateaus:
        logger.warning("%s: %d near-zero plateau(s) flagged", restriction.label, len(plateaus))
    logger.info("%s: %d root(s) from %d sign change(s)", restriction.label, len(roots), sign_changes)
    return IdentifiedSet(roots=roots, residuals=residuals, restriction=restriction,
                         grid_size=grid_size, sign_changes=sign_changes, plateaus=plateaus,
                         empty=not (roots or plateaus), grid=grid, values=values)


def degenerate_set(restriction: ExclusionRestriction, grid_size: int) -> IdentifiedSet:
    return IdentifiedSet(roots=[], residuals=[], restriction=restriction,
                         grid_size=grid_size, degenerate=True)


def all_restrictions(state_space: StateSpace, n_choices: int) -> List[ExclusionRestriction]:
    """Consecutive-pair restrictions, one per row of the exclusion block."""
    return [ExclusionRestriction(i, x_r, e, e + 1)
            for i in range(1, n_choices)
            for x_r in range(state_space.n_r)
            for e in range(state_space.n_e - 1)]


def _set_or_degenerate(data, restriction, grid_size, root_tol) -> IdentifiedSet:
    try:
        return identified_set(data, restriction, grid_size, root_tol)
    except DegenerateRestriction as e:
        logger.warning(str(e))
        return degenerate_set(restriction, grid_size)


def identify_all(data: DataSet, restrictions: Sequence[ExclusionRestriction],
                 grid_size: int = 1000, root_tol: float = 1e-10,
                 workers: int = 1) -> List[IdentifiedSet]:
    """identified_set per restriction; degenerate ones come back flagged."""
    for r in restrictions:
        r.check(data.state_space, data.n_choices)
    return Parallel(n_jobs=max(1, int(workers)))(
        delayed(_set_or_degenerate)(data, r, grid_size, root_tol) for r in restrictions)


def intersect_sets(sets: Sequence[IdentifiedSet], match_tol: float = 1e-6) -> IdentifiedSet:
    """Roots present in every informative set within match_tol.

    Degenerate sets carry no information about delta and are skipped; if all
    of them are degenerate the result is degenerate too.
    """
    if not sets:
        raise ConfigError("intersect_sets needs at least one identified set")
    informative = [s for s in sets if not s.degenerate]
    grid_size = max(s.grid_size for s in sets)
    if not informative:
        return IdentifiedSet(roots=[], residuals=[], grid_size=grid_size, degenerate=True)

    head, rest = informative[0], informative[1:]
    roots: List[float] = []
    residuals: List[float] = []
    for root, res in zip(head.roots, head.residuals):
        worst = res
        for other in rest:
            if not other.roots:
                break
            gaps = np.abs(np.asarray(other.roots) - root)
            k = int(np.argmin(gaps))
            if gaps[k] > match_tol:
                break
            worst = max(worst, other.residuals[k])
        else:
            roots.append(root)
            residuals.append(worst)
    if not roots:
        logger.warning("identified sets have an empty intersection")
    return IdentifiedSet(roots=roots, residuals=residuals, grid_size=grid_size,
                         sign_changes=sum(s.sign_changes for s in informative),
                         empty=not roots)
