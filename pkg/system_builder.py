"""
Exclusion-restriction equation system G~(u, beta, beta_tilde, delta; (P, Pi)) = 0.

The system stacks I*X Hotz-Miller log-odds equations and
I*(n_e - 1)*n_r exclusion restrictions u_i(x_r, x_e) = u_i(x_r, x_e + 1).

Parameter vector ordering: u_1(0..X-1), ..., u_I(0..X-1), beta, beta_tilde, delta.
Residual ordering: Hotz-Miller block by (i, x), then exclusions by
(i, x_r, consecutive x_e pair). Residuals are data minus model.
"""

import hashlib
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from hyperbolic_model import DataSet, ModelPrimitives, perceived_value
from lab_errors import DimensionError, LogDomainError

logger = logging.getLogger(__name__)

# Probabilities below LOG_HARD_FLOOR are rejected; LOG_CLAMP guards the log itself.
LOG_HARD_FLOOR = 1e-12
LOG_CLAMP = 1e-300
PROPOSITION_THRESHOLD = 4


@dataclass(frozen=True)
class SystemDims:
    n_choices: int
    n_r: int
    n_e: int

    @property
    def I(self) -> int:
        return self.n_choices - 1

    @property
    def X(self) -> int:
        return self.n_r * self.n_e

    @property
    def n_exclusion(self) -> int:
        return self.I * (self.n_e - 1) * self.n_r

    @property
    def n(self) -> int:
        """Unknowns: I X + 3."""
        return self.I * self.X + 3

    @property
    def m(self) -> int:
        """Equations: I X + I (n_e - 1) n_r."""
        return self.I * self.X + self.n_exclusion

    @property
    def s(self) -> int:
        """Data coordinates: I X + (I+1) X (X-1)."""
        return self.I * self.X + self.n_choices * self.X * (self.X - 1)

    @classmethod
    def from_data(cls, data: DataSet) -> 'SystemDims':
        return cls(data.n_choices, data.state_space.n_r, data.state_space.n_e)

    @classmethod
    def from_primitives(cls, primitives: ModelPrimitives) -> 'SystemDims':
        ss = primitives.state_space
        return cls(primitives.n_choices, ss.n_r, ss.n_e)

    def as_dict(self) -> dict:
        return {'n': self.n, 'm': self.m, 's': self.s, 'I': self.I, 'X': self.X,
                'n_r': self.n_r, 'n_e': self.n_e}


def design_check(dims: SystemDims) -> bool:
    """True iff I (n_e - 1) n_r >= 4."""
    return dims.n_exclusion >= PROPOSITION_THRESHOLD


def pack_params(u: np.ndarray, beta: float, beta_tilde: float, delta: float) -> np.ndarray:
    return np.concatenate([np.asarray(u, dtype=float).ravel(), [beta, beta_tilde, delta]])


def unpack_params(params: np.ndarray, dims: SystemDims) -> Tuple[np.ndarray, float, float, float]:
    a = np.asarray(params, dtype=float)
    if a.shape != (dims.n,):
        raise DimensionError(f"parameter vector has shape {a.shape}, expected ({dims.n},)")
    u = a[:dims.I * dims.X].reshape(dims.I, dims.X)
    return u, float(a[-3]), float(a[-2]), float(a[-1])


def params_from_primitives(primitives: ModelPrimitives) -> np.ndarray:
    d = primitives.disc
    return pack_params(primitives.u.values, d.beta, d.beta_tilde, d.delta)


class WarmStartCache:
    """Thread-safe store of converged perceived values keyed on (u, beta_tilde, delta, Pi).

    A hit only seeds the fixed-point iteration; the solve still runs to tol.
    """

    def __init__(self, max_entries: int = 256):
        self.max_entries = max_entries
        self._store: 'OrderedDict[str, np.ndarray]' = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(u: np.ndarray, beta_tilde: float, delta: float, probs: np.ndarray) -> str:
        h = hashlib.sha1()
        h.update(np.ascontiguousarray(u, dtype=float).tobytes())
        h.update(np.array([beta_tilde, delta], dtype=float).tobytes())
        h.update(np.ascontiguousarray(probs, dtype=float).tobytes())
        return h.hexdigest()

    def get(self, key: str) -> Optional[np.ndarray]:
        with self._lock:
            V = self._store.get(key)
            if V is None:
                self.misses += 1
                return None
            self.hits += 1
            self._store.move_to_end(key)
            return V.copy()

    def put(self, key: str, V: np.ndarray) -> None:
        with self._lock:
            self._store[key] = np.array(V, dtype=float)
            self._store.move_to_end(key)
            while len(self._store) > self.max_entries:
                self._store.popitem(last=False)


def _check_dims(data: DataSet, dims: Optional[SystemDims]) -> SystemDims:
    actual = SystemDims.from_data(data)
    if dims is not None and dims != actual:
        raise DimensionError(f"system dims {dims} do not match data dims {actual}")
    return actual


def interior_log(P: np.ndarray) -> np.ndarray:
    """ln P for strictly interior choice probabilities."""
    P = np.asarray(P, dtype=float)
    if not np.all(np.isfinite(P)) or np.any(P <= 0.0):
        raise LogDomainError("choice probabilities must be strictly positive for log-odds")
    if np.any(P < LOG_HARD_FLOOR):
        raise LogDomainError(f"choice probability {P.min():.3e} below {LOG_HARD_FLOOR:.0e}")
    return np.log(np.maximum(P, LOG_CLAMP))


def hotz_miller_residuals(params: np.ndarray, data: DataSet, dims: Optional[SystemDims] = None,
                          tol: float = 1e-12, max_iter: int = 10_000,
                          cache: Optional[WarmStartCache] = None) -> np.ndarray:
    """ln P_i - ln P_0 - u_i - beta delta (Z_i - Z_0) for every (i, x).

    Z comes from the perceived-value fixed point at (u, beta_tilde, delta) and
    the data kernel, re-solved on every call.
    """
    dims = _check_dims(data, dims)
    log_P = interior_log(data.P)
    u, beta, beta_tilde, delta = unpack_params(params, dims)
    u_full = np.vstack([np.zeros((1, dims.X)), u])
    probs = data.kernel.probs

    key = V0 = None
    if cache is not None:
        key = WarmStartCache.key(u, beta_tilde, delta, probs)
        V0 = cache.get(key)
    V, _, _, _ = perceived_value(u_full, probs, beta_tilde, delta, tol=tol,
                                 max_iter=max_iter, V0=V0)
    if cache is not None:
        cache.put(key, V)

    Z = probs @ V
    res = (log_P[1:] - log_P[0]) - u - beta * delta * (Z[1:] - Z[0])
    return res.ravel()


def exclusion_residuals(params: np.ndarray, dims: SystemDims) -> np.ndarray:
    """u_i(x_r, x_e^(k)) - u_i(x_r, x_e^(k+1)) for k = 0..n_e-2."""
    u, _, _, _ = unpack_params(params, dims)
    grid = u.reshape(dims.I, dims.n_r, dims.n_e)
    return (grid[:, :, :-1] - grid[:, :, 1:]).ravel()


def exclusion_residuals_levels(params: np.ndarray, dims: SystemDims) -> np.ndarray:
    """Levels form u_i(x_r, x_e) - u_bar_i(x_r), with u_bar the mean over x_e.

    Affinely equivalent to the differenced form; kept for comparison only.
    """
    u, _, _, _ = unpack_params(params, dims)
    grid = u.reshape(dims.I, dims.n_r, dims.n_e)
    return (grid - grid.mean(axis=2, keepdims=True)).ravel()


def g_tilde(params: np.ndarray, data: DataSet, dims: Optional[SystemDims] = None,
            tol: float = 1e-12, max_iter: int = 10_000,
            cache: Optional[WarmStartCache] = None) -> np.ndarray:
    dims = _check_dims(data, dims)
    return np.concatenate([
        hotz_miller_residuals(params, data, dims, tol=tol, max_iter=max_iter, cache=cache),
        exclusion_residuals(params, dims),
    ])


def residual_frame(g: np.ndarray, dims: SystemDims) -> pd.DataFrame:
    """Residual dump with columns block, index_i, index_x_or_pair, value."""
    g = np.asarray(g, dtype=float)
    if g.shape != (dims.m,):
        raise DimensionError(f"residual vector has shape {g.shape}, expected ({dims.m},)")
    rows = []
    k = 0
    for i in range(1, dims.I + 1):
        for x in range(dims.X):
            rows.append(('hotz_miller', i, str(x), g[k]))
            k += 1
    for i in range(1, dims.I + 1):
        for x_r in range(dims.n_r):
            for e in range(dims.n_e - 1):
                rows.append(('exclusion', i, f"{x_r}:{e}-{e + 1}", g[k]))
                k += 1
    return pd.DataFrame(rows, columns=['block', 'index_i', 'index_x_or_pair', 'value'])
