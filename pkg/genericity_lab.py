"""
Genericity Lab

Numerical analysis of smooth systems F : A x B -> R^m with A in R^n (unknowns)
and B in R^s (data):

- central finite-difference Jacobians dF (m x (n+s)) and dF_b (m x n);
- numerical rank from singular values and regular-value audits;
- multistart damped Gauss-Newton solution counting with clustering;
- range probes: how often uniformly drawn data admit any solution.

Ships four built-in systems (two linear examples and two scalar
choice-probability toys) and wraps the DDC system G~ as a SmoothSystem.
Multistart and probe results are heuristic: a reported minimum residual is an
upper bound on what is attainable, and missing a root is possible.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.linalg import svd, svdvals
from scipy.special import expit

from hyperbolic_model import (
    DELTA_MAX,
    DataSet,
    DiscountParams,
    ModelPrimitives,
    StateSpace,
    TransitionKernel,
    UtilityMatrix,
    solve_fixed_point,
)
from lab_errors import DimensionError, DomainError, HyperbolicLabError, NoSolutionFound
from system_builder import SystemDims, WarmStartCache, g_tilde, pack_params

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-6
PROBE_QUANTILES = (0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0)
# Inner fixed-point budget per evaluation of the DDC system
DDC_INNER_MAX_ITER = 500

Evaluator = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class SmoothSystem:
    """F(a, b) with coordinate boxes A = [a_lower, a_upper], B = [b_lower, b_upper]."""
    name: str
    n: int
    s: int
    m: int
    evaluator: Evaluator
    a_lower: np.ndarray
    a_upper: np.ndarray
    b_lower: np.ndarray
    b_upper: np.ndarray
    description: str = ""
    analytic_jacobian: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    sample_solution: Optional[Callable[[np.random.Generator], Tuple[np.ndarray, np.ndarray]]] = None
    project_data: Optional[Callable[[np.ndarray], np.ndarray]] = None
    reference_b: Optional[np.ndarray] = None

    def __post_init__(self):
        for name, size in (('a_lower', self.n), ('a_upper', self.n),
                           ('b_lower', self.s), ('b_upper', self.s)):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (size,)).copy()
            object.__setattr__(self, name, arr)

    def evaluate(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        out = np.asarray(self.evaluator(np.asarray(a, dtype=float), np.asarray(b, dtype=float)),
                         dtype=float)
        if out.shape != (self.m,):
            raise DimensionError(f"{self.name}: evaluator returned shape {out.shape}, expected ({self.m},)")
        return out

    @property
    def dims(self) -> Dict[str, int]:
        return {'n': self.n, 's': self.s, 'm': self.m}


@dataclass
class RankReport:
    a: List[float]
    b: List[float]
    n: int
    s: int
    m: int
    residual: float
    singular_values: List[float]
    singular_values_param: List[float]
    rank: int
    rank_param: int
    svd_tol: float
    regular: bool
    inconsistent: bool
    null_direction: Optional[List[float]] = None
    identified_combination: Optional[List[float]] = None

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class SolutionCount:
    b: List[float]
    solutions: List[List[float]]
    residuals: List[float]
    n_starts: int
    n_converged: int
    n_clustered: int
    non_isolated: bool
    min_residual: float
    param_ranks: List[int]
    res_tol: float
    cluster_tol: float
    null_direction: Optional[List[float]] = None
    identified_combination: Optional[List[float]] = None

    @property
    def count(self) -> int:
        return len(self.solutions)

    def to_dict(self) -> Dict[str, Any]:
        d = dict(self.__dict__)
        d['count'] = self.count
        return d


@dataclass
class AuditReport:
    system: str
    n_samples: int
    m: int
    n: int
    ranks: List[int]
    ranks_param: List[int]
    min_rank: Optional[int]
    all_regular: bool
    non_regular: List[Dict[str, Any]] = field(default_factory=list)
    inconsistent: int = 0
    failures: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def regular_points(self) -> int:
        return sum(1 for r in self.ranks if r == self.m)

    def to_dict(self) -> Dict[str, Any]:
        d = dict(self.__dict__)
        d['regular_points'] = self.regular_points
        d['passed'] = bool(self.ranks) and self.all_regular
        return d


@dataclass
class ProbeReport:
    system: str
    n_draws: int
    on_range: bool
    res_tol: float
    n_starts: int
    min_residuals: List[float]
    n_solvable: int
    caveat: str = ("multistart minima are upper bounds on the attainable residual; "
                   "a draw reported unsolvable may still admit a solution missed by the search")

    @property
    def fraction_solvable(self) -> float:
        return self.n_solvable / self.n_draws if self.n_draws else 0.0

    def quantiles(self) -> Dict[str, float]:
        if not self.min_residuals:
            return {}
        values = np.quantile(np.asarray(self.min_residuals), PROBE_QUANTILES)
        return {f"q{int(round(q * 100)):02d}": float(v) for q, v in zip(PROBE_QUANTILES, values)}

    def to_dict(self) -> Dict[str, Any]:
        return {
            'system': self.system,
            'n_draws': self.n_draws,
            'on_range': self.on_range,
            'res_tol': self.res_tol,
            'n_starts': self.n_starts,
            'fraction_solvable': self.fraction_solvable,
            'n_solvable': self.n_solvable,
            'min_residual_quantiles': self.quantiles(),
            'caveat': self.caveat,
        }

    def to_frame(self) -> pd.DataFrame:
        r = np.asarray(self.min_residuals, dtype=float)
        return pd.DataFrame({'draw': np.arange(len(r)), 'min_residual': r,
                             'solvable': r <= self.res_tol})


def task_rng(seed: int, *index: int) -> np.random.Generator:
    """Independent generator for task `index` under `seed`."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, index)]))


def _run_tasks(fn: Callable, arg_list: List[tuple], workers: int) -> list:
    return Parallel(n_jobs=max(1, int(workers)))(delayed(fn)(*args) for args in arg_list)


# -----------------------------
# Jacobians and rank
# -----------------------------

def _fd_jacobian(fun: Callable[[np.ndarray], np.ndarray], z: np.ndarray, lower: np.ndarray,
                 upper: np.ndarray, step: float, strict: bool) -> np.ndarray:
    """Central differences, step scaled by max(1, |z_j|).

    strict: leaving the box raises DomainError. Otherwise fall back to a
    one-sided difference at the boundary.
    """
    z = np.asarray(z, dtype=float)
    f0 = None
    cols = []
    for j in range(z.size):
        h = step * max(1.0, abs(z[j]))
        up_ok = z[j] + h <= upper[j]
        down_ok = z[j] - h >= lower[j]
        if strict and not (up_ok and down_ok):
            raise DomainError(f"finite difference in coordinate {j} leaves the domain box")
        if not (up_ok or down_ok):
            raise DomainError(f"domain box too narrow for a step in coordinate {j}")
        zp = z.copy()
        zm = z.copy()
        if up_ok:
            zp[j] = z[j] + h
        if down_ok:
            zm[j] = z[j] - h
        if not (up_ok and down_ok) and f0 is None:
            f0 = fun(z)
        fp = fun(zp) if up_ok else f0
        fm = fun(zm) if down_ok else f0
        # use the representable step
        cols.append((fp - fm) / (zp[j] - zm[j]))
    return np.column_stack(cols)


def jacobian(system: SmoothSystem, a: np.ndarray, b: np.ndarray, step: float = 1e-5,
             strict: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Return (dF, dF_b): the Jacobian in (a, b) and its block in a.

    strict=False differences one-sided on the boundary of A x B instead of
    raising DomainError.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    z = np.concatenate([a, b])
    lower = np.concatenate([system.a_lower, system.b_lower])
    upper = np.concatenate([system.a_upper, system.b_upper])
    dF = _fd_jacobian(lambda w: system.evaluate(w[:system.n], w[system.n:]),
                      z, lower, upper, step, strict=strict)
    return dF, dF[:, :system.n]


def param_jacobian(system: SmoothSystem, a: np.ndarray, b: np.ndarray,
                   step: float = 1e-5) -> np.ndarray:
    """dF_b only, one-sided at the boundary of A."""
    b = np.asarray(b, dtype=float)
    return _fd_jacobian(lambda w: system.evaluate(w, b), np.asarray(a, dtype=float),
                        system.a_lower, system.a_upper, step, strict=False)


def numerical_rank(singular_values: np.ndarray, svd_tol: float = 1e-8) -> int:
    """Count singular values above svd_tol * sigma_max."""
    sv = np.asarray(singular_values, dtype=float)
    if sv.size == 0 or sv.max() <= 0.0:
        return 0
    return int(np.sum(sv > svd_tol * sv.max()))


def _oriented(v: np.ndarray) -> List[float]:
    v = np.asarray(v, dtype=float)
    k = int(np.argmax(np.abs(v) > 1e-12 * np.abs(v).max())) if np.any(v) else 0
    return (v if v[k] >= 0 else -v).tolist()


def _directions(dF_b: np.ndarray, rank_param: int) -> Tuple[Optional[List[float]], Optional[List[float]]]:
    """Null direction when nullity is one; identified combination when rank is one."""
    n = dF_b.shape[1]
    _, _, Vt = svd(dF_b, full_matrices=True)
    null_direction = _oriented(Vt[-1]) if n - rank_param == 1 else None
    identified = _oriented(Vt[0]) if rank_param == 1 else None
    return null_direction, identified


def rank_at(system: SmoothSystem, a: np.ndarray, b: np.ndarray, svd_tol: float = 1e-8,
            step: float = 1e-5, strict: bool = True) -> RankReport:
    dF, dF_b = jacobian(system, a, b, step, strict)
    sv = svdvals(dF)
    sv_b = svdvals(dF_b)
    rank = numerical_rank(sv, svd_tol)
    rank_b = numerical_rank(sv_b, svd_tol)
    null_direction, identified = _directions(dF_b, rank_b)
    inconsistent = rank_b == system.m and system.m > system.n
    if inconsistent:
        logger.warning("%s: rank dF_b = m = %d exceeds n = %d; numerical rank is unreliable",
                       system.name, system.m, system.n)
    return RankReport(
        a=np.asarray(a, dtype=float).tolist(),
        b=np.asarray(b, dtype=float).tolist(),
        n=system.n, s=system.s, m=system.m,
        residual=float(np.max(np.abs(system.evaluate(a, b)))) if system.m else 0.0,
        singular_values=sv.tolist(),
        singular_values_param=sv_b.tolist(),
        rank=rank,
        rank_param=rank_b,
        svd_tol=svd_tol,
        regular=rank == system.m,
        inconsistent=inconsistent,
        null_direction=null_direction,
        identified_combination=identified,
    )


# -----------------------------
# Multistart Gauss-Newton
# -----------------------------

def _safe_residual(system: SmoothSystem, a: np.ndarray, b: np.ndarray) -> Optional[np.ndarray]:
    try:
        r = system.evaluate(a, b)
    except (HyperbolicLabError, FloatingPointError):
        return None
    return r if np.all(np.isfinite(r)) else None


def gauss_newton(system: SmoothSystem, a0: np.ndarray, b: np.ndarray, max_iter: int = 100,
                 res_tol: float = 1e-8, step: float = 1e-5, c1: float = 1e-4,
                 shrink: float = 0.5, alpha_min: float = 1e-10,
                 ftol: float = 1e-10) -> Tuple[np.ndarray, float, int]:
    """Damped Gauss-Newton with Armijo backtracking, projected onto A.

    Stops at |r|_inf <= res_tol / 100, when backtracking fails, or when an
    accepted step lowers |r|^2 by less than ftol relative (a stalled descent
    onto a nonzero minimum). Returns (a, sup-norm residual, iterations).
    Residual is inf when the starting point cannot be evaluated.
    """
    lower, upper = system.a_lower, system.a_upper
    a = np.clip(np.asarray(a0, dtype=float), lower, upper)
    r = _safe_residual(system, a, b)
    if r is None:
        return a, np.inf, 0
    f = float(r @ r)
    target = 1e-2 * res_tol

    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(r)) <= target:
            break
        try:
            J = param_jacobian(system, a, b, step)
        except (HyperbolicLabError, FloatingPointError):
            break
        if not np.all(np.isfinite(J)):
            break
        p = -np.linalg.lstsq(J, r, rcond=None)[0]
        g = 2.0 * J.T @ r

        alpha = 1.0
        accepted = False
        while alpha >= alpha_min:
            a_new = np.clip(a + alpha * p, lower, upper)
            r_new = _safe_residual(system, a_new, b)
            if r_new is not None:
                f_new = float(r_new @ r_new)
                if f_new <= f + c1 * float(g @ (a_new - a)):
                    accepted = True
                    break
            alpha *= shrink
        if not accepted:
            break
        moved = np.max(np.abs(a_new - a))
        stalled = f - f_new <= ftol * f
        a, r, f = a_new, r_new, f_new
        if moved <= 1e-15 * (1.0 + np.max(np.abs(a))) or stalled:
            break
    return a, float(np.max(np.abs(r))), it


def _uniform_start(system: SmoothSystem, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(system.a_lower, system.a_upper)


def _descend_from(system: SmoothSystem, b: np.ndarray, seed: int, index: int, max_iter: int,
                  res_tol: float, step: float) -> Tuple[np.ndarray, float]:
    a0 = _uniform_start(system, task_rng(seed, index))
    a, res, _ = gauss_newton(system, a0, b, max_iter=max_iter, res_tol=res_tol, step=step)
    return a, res


def cluster_points(points: List[np.ndarray], cluster_tol: float) -> List[int]:
    """Greedy clustering in input order; returns indices of representatives."""
    reps: List[int] = []
    for k, p in enumerate(points):
        if all(np.linalg.norm(p - points[j]) > cluster_tol for j in reps):
            reps.append(k)
    return reps


def count_solutions(system: SmoothSystem, b: np.ndarray, n_starts: int = 200, seed: int = 0,
                    res_tol: float = 1e-8, cluster_tol: float = 1e-4, max_iter: int = 100,
                    step: float = 1e-5, svd_tol: float = 1e-8, workers: int = 1) -> SolutionCount:
    """Multistart least-squares descent from uniform draws over A.

    A continuum of solutions shows up as non_isolated (rank dF_b < n at a
    solution), never as a count.
    """
    b = np.asarray(b, dtype=float)
    if b.shape != (system.s,):
        raise DimensionError(f"data vector has shape {b.shape}, expected ({system.s},)")
    results = _run_tasks(_descend_from,
                         [(system, b, seed, k, max_iter, res_tol, step) for k in range(n_starts)],
                         workers)
    residuals_all = [res for _, res in results]
    converged = [(a, res) for a, res in results if res <= res_tol]
    points = [a for a, _ in converged]
    reps = cluster_points(points, cluster_tol)

    solutions = [points[k] for k in reps]
    residuals = [float(converged[k][1]) for k in reps]
    ranks: List[int] = []
    null_direction = identified = None
    for a in solutions:
        J = param_jacobian(system, a, b, step)
        rank = numerical_rank(svdvals(J), svd_tol)
        ranks.append(rank)
        if null_direction is None and identified is None and rank < system.n:
            null_direction, identified = _directions(J, rank)

    count = SolutionCount(
        b=b.tolist(),
        solutions=[s.tolist() for s in solutions],
        residuals=residuals,
        n_starts=n_starts,
        n_converged=len(converged),
        n_clustered=len(solutions),
        non_isolated=any(r < system.n for r in ranks),
        min_residual=float(min(residuals_all)) if residuals_all else float('inf'),
        param_ranks=ranks,
        res_tol=res_tol,
        cluster_tol=cluster_tol,
        null_direction=null_direction,
        identified_combination=identified,
    )
    logger.info("%s: %d/%d starts converged into %d solution(s)", system.name,
                count.n_converged, n_starts, count.count)
    return count


# -----------------------------
# Audits and probes
# -----------------------------

def _draw_data(system: SmoothSystem, rng: np.random.Generator) -> np.ndarray:
    b = rng.uniform(system.b_lower, system.b_upper)
    return system.project_data(b) if system.project_data is not None else b


def _audit_sample(system: SmoothSystem, seed: int, k: int, svd_tol: float, step: float,
                  n_starts: int, res_tol: float, max_iter: int) -> Dict[str, Any]:
    rng = task_rng(seed, k)
    try:
        if system.sample_solution is not None:
            points = [system.sample_solution(rng)]
        else:
            b = _draw_data(system, rng)
            found = count_solutions(system, b, n_starts=n_starts, seed=int(rng.integers(2**31)),
                                    res_tol=res_tol, max_iter=max_iter, step=step, svd_tol=svd_tol)
            if not found.solutions:
                raise NoSolutionFound(found.min_residual)
            points = [(np.asarray(a), b) for a in found.solutions]
        reports = [rank_at(system, a, b, svd_tol, step) for a, b in points]
    except HyperbolicLabError as e:
        return {'sample': k, 'error': type(e).__name__, 'message': str(e)}
    return {'sample': k, 'reports': reports}


def regular_value_audit(system: SmoothSystem, n_samples: int = 100, seed: int = 0,
                        svd_tol: float = 1e-8, step: float = 1e-5, n_starts: int = 20,
                        res_tol: float = 1e-8, max_iter: int = 100,
                        workers: int = 1) -> AuditReport:
    """Rank of dF at sampled solutions of F(a, b) = 0.

    Uses the system's range sampler when available; otherwise draws data and
    searches for solutions. Samples without a solution are recorded, not fatal.
    """
    outcomes = _run_tasks(_audit_sample,
                          [(system, seed, k, svd_tol, step, n_starts, res_tol, max_iter)
                           for k in range(n_samples)],
                          workers)
    ranks: List[int] = []
    ranks_param: List[int] = []
    non_regular: List[Dict[str, Any]] = []
    failures: List[Dict[str, Any]] = []
    inconsistent = 0
    for outcome in outcomes:
        if 'error' in outcome:
            failures.append(outcome)
            continue
        for report in outcome['reports']:
            ranks.append(report.rank)
            ranks_param.append(report.rank_param)
            inconsistent += int(report.inconsistent)
            if not report.regular:
                non_regular.append({'sample': outcome['sample'], 'a': report.a, 'b': report.b,
                                    'rank': report.rank})
    audit = AuditReport(
        system=system.name, n_samples=n_samples, m=system.m, n=system.n,
        ranks=ranks, ranks_param=ranks_param,
        min_rank=min(ranks) if ranks else None,
        all_regular=not non_regular,
        non_regular=non_regular,
        inconsistent=inconsistent,
        failures=failures,
    )
    logger.info("%s: min rank %s over %d point(s), %d failure(s)", system.name,
                audit.min_rank, len(ranks), len(failures))
    return audit


def _probe_draw(system: SmoothSystem, seed: int, k: int, on_range: bool, n_starts: int,
                res_tol: float, max_iter: int, step: float, anchor_truth: bool) -> float:
    rng = task_rng(seed, k)
    starts: List[np.ndarray] = []
    if on_range:
        if system.sample_solution is None:
            raise DomainError(f"{system.name} has no range sampler for on-range probes")
        a_true, b = system.sample_solution(rng)
        if anchor_truth:
            starts.append(np.asarray(a_true, dtype=float))
    else:
        b = _draw_data(system, rng)
    starts.extend(_uniform_start(system, rng) for _ in range(n_starts))

    best = np.inf
    for a0 in starts:
        _, res, _ = gauss_newton(system, a0, b, max_iter=max_iter, res_tol=res_tol, step=step)
        best = min(best, res)
        if best <= 1e-2 * res_tol:
            break
    return float(best)


def range_probe(system: SmoothSystem, n_data_draws: int = 1000, seed: int = 0,
                res_tol: float = 1e-8, n_starts: int = 8, max_iter: int = 100,
                step: float = 1e-5, on_range: bool = False, anchor_truth: bool = False,
                workers: int = 1) -> ProbeReport:
    """Fraction of data draws for which multistart finds ||F_b||_inf <= res_tol.

    Off-range draws are uniform over B (projected onto valid simplexes where
    the system defines it); on-range draws come from the range sampler.
    """
    if system.m <= system.n:
        logger.warning("%s: m = %d <= n = %d, the range need not have measure zero",
                       system.name, system.m, system.n)
    minima = _run_tasks(_probe_draw,
                        [(system, seed, k, on_range, n_starts, res_tol, max_iter, step, anchor_truth)
                         for k in range(n_data_draws)],
                        workers)
    report = ProbeReport(system=system.name, n_draws=n_data_draws, on_range=on_range,
                         res_tol=res_tol, n_starts=n_starts, min_residuals=list(minima),
                         n_solvable=int(sum(1 for v in minima if v <= res_tol)))
    logger.info("%s: %d/%d draws admit a solution", system.name, report.n_solvable, n_data_draws)
    return report


# -----------------------------
# Built-in systems
# -----------------------------

def _ex1_eval(a, b):
    return b - a[0]


def _ex1_jac(a, b):
    return np.array([[-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])


def _ex1_sample(rng):
    a = rng.uniform(-0.9, 0.9, size=1)
    return a, np.array([a[0], a[0]])


def _ex2_eval(a, b):
    return b - (a[0] + a[1])


def _ex2_jac(a, b):
    return np.hstack([-np.ones((3, 2)), np.eye(3)])


def _ex2_sample(rng):
    a = rng.uniform(-0.45, 0.45, size=2)
    return a, np.full(3, a.sum())


def _logistic_eval(a, b):
    # p(theta) = 1 / (1 + exp(theta))
    return b - expit(-a)


def _logistic_jac(a, b):
    q = expit(-a[0])
    return np.array([[q * (1.0 - q), 1.0]])


def _logistic_sample(rng):
    theta = rng.uniform(-3.0, 3.0, size=1)
    return theta, expit(-theta)


def _piecewise_eval(a, b):
    return b - np.clip(a, 0.0, 1.0)


def _piecewise_jac(a, b):
    slope = -1.0 if 0.0 < a[0] < 1.0 else 0.0
    return np.array([[slope, 1.0]])


def _piecewise_sample(rng):
    theta = rng.uniform(0.02, 0.98, size=1)
    return theta, theta.copy()


def builtin_examples() -> Dict[str, SmoothSystem]:
    """Catalog of analytic systems keyed by short name."""
    return {
        'ex1': SmoothSystem(
            name='ex1', n=1, s=2, m=2, evaluator=_ex1_eval,
            a_lower=-2.0, a_upper=2.0, b_lower=-1.0, b_upper=1.0,
            description="everywhere point identified: F = (b1 - a, b2 - a)",
            analytic_jacobian=_ex1_jac, sample_solution=_ex1_sample),
        'ex2': SmoothSystem(
            name='ex2', n=2, s=3, m=3, evaluator=_ex2_eval,
            a_lower=-2.0, a_upper=2.0, b_lower=-1.0, b_upper=1.0,
            description="nowhere point identified: F = b - (a1 + a2) (1, 1, 1)",
            analytic_jacobian=_ex2_jac, sample_solution=_ex2_sample),
        'logistic': SmoothSystem(
            name='logistic', n=1, s=1, m=1, evaluator=_logistic_eval,
            a_lower=-5.0, a_upper=5.0, b_lower=PROBABILITY_FLOOR, b_upper=1.0 - PROBABILITY_FLOOR,
            description="p = 1 / (1 + exp(theta)): identified for almost all p and theta",
            analytic_jacobian=_logistic_jac, sample_solution=_logistic_sample),
        'piecewise': SmoothSystem(
            name='piecewise', n=1, s=1, m=1, evaluator=_piecewise_eval,
            a_lower=-1.0, a_upper=2.0, b_lower=0.0, b_upper=1.0,
            description="p = clip(theta, 0, 1): identified for almost all p, not almost all theta",
            analytic_jacobian=_piecewise_jac, sample_solution=_piecewise_sample),
    }


# -----------------------------
# DDC wrapper
# -----------------------------

def _cap_group(values: np.ndarray, axis: int, floor: float) -> np.ndarray:
    tot = values.sum(axis=axis, keepdims=True)
    scale = np.where(tot > 1.0 - floor, (1.0 - floor) / np.maximum(tot, floor), 1.0)
    return values * scale


def project_to_simplex(b: np.ndarray, state_space: StateSpace, n_choices: int,
                       floor: float = PROBABILITY_FLOOR) -> np.ndarray:
    """Rescale each probability group so its implied dropped entry is >= floor."""
    b = np.asarray(b, dtype=float)
    X = state_space.n_states
    I = n_choices - 1
    ccp = _cap_group(b[:I * X].reshape(I, X), axis=0, floor=floor)
    trans = _cap_group(b[I * X:].reshape(n_choices, X, X - 1), axis=2, floor=floor)
    return np.concatenate([ccp.ravel(), trans.ravel()])


def sample_ddc_solution(rng: np.random.Generator, state_space: StateSpace, n_choices: int,
                        tol: float = 1e-12, u_scale: float = 2.0,
                        discount_range: Tuple[float, float] = (0.3, 0.95),
                        ) -> Tuple[np.ndarray, np.ndarray]:
    """Draw exclusion-respecting primitives and an interior kernel; return (a, b)."""
    X = state_space.n_states
    I = n_choices - 1
    u_r = rng.uniform(-u_scale, u_scale, size=(I, state_space.n_r))
    u = np.repeat(u_r, state_space.n_e, axis=1)
    beta, beta_tilde, delta = rng.uniform(*discount_range, size=3)
    probs = 0.9 * rng.dirichlet(np.ones(X), size=(n_choices, X)) + 0.1 / X
    kernel = TransitionKernel(probs)
    primitives = ModelPrimitives(state_space, n_choices, UtilityMatrix(u),
                                 DiscountParams(float(beta), float(beta_tilde), float(delta)))
    solved = solve_fixed_point(primitives, kernel, tol=tol)
    data = DataSet.from_solution(solved, kernel, state_space)
    return pack_params(u, beta, beta_tilde, delta), data.to_vector()


def wrap_ddc(data: DataSet, dims: Optional[SystemDims] = None, tol: float = 1e-12,
             u_max: float = 10.0, max_iter: int = DDC_INNER_MAX_ITER,
             cache: Optional[WarmStartCache] = None) -> SmoothSystem:
    """G~ as a SmoothSystem with F(a, b) = g_tilde(a, data(b))."""
    actual = SystemDims.from_data(data)
    if dims is not None and dims != actual:
        raise DimensionError(f"dims {dims} do not match data {actual}")
    dims = actual
    state_space = data.state_space
    n_choices = data.n_choices

    def evaluator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return g_tilde(a, DataSet.from_vector(b, state_space, n_choices), dims,
                       tol=tol, max_iter=max_iter, cache=cache)

    def sampler(rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        return sample_ddc_solution(rng, state_space, n_choices, tol=tol)

    def projector(b: np.ndarray) -> np.ndarray:
        return project_to_simplex(b, state_space, n_choices)

    n_u = dims.I * dims.X
    a_lower = np.concatenate([np.full(n_u, -u_max), [PROBABILITY_FLOOR] * 3])
    a_upper = np.concatenate([np.full(n_u, u_max), [1.0, 1.0, DELTA_MAX]])
    return SmoothSystem(
        name='ddc', n=dims.n, s=dims.s, m=dims.m, evaluator=evaluator,
        a_lower=a_lower, a_upper=a_upper,
        b_lower=PROBABILITY_FLOOR, b_upper=1.0 - PROBABILITY_FLOOR,
        description=(f"G~ for I={dims.I}, n_r={dims.n_r}, n_e={dims.n_e} "
                     f"(n={dims.n}, s={dims.s}, m={dims.m})"),
        sample_solution=sampler, project_data=projector,
        reference_b=data.to_vector(),
    )
