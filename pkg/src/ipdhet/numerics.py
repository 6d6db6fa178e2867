"""Shared numerical kernels: SPD linear algebra, scalar optimisation, RNG streams.

Thin, contract-enforcing wrappers around numpy/scipy.  Everything here is
deterministic given its inputs; the RNG streams are deterministic given
``(seed, stream_id)`` regardless of how work is scheduled across processes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.optimize

from .exceptions import NoSignChange, NonFiniteObjective, NotPositiveDefinite

#: Relative tolerance for the symmetry check on matrices passed to the SPD ops.
SYMMETRY_RTOL = 1e-10


def _as_spd_input(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = np.max(np.abs(a)) if a.size else 0.0
    if not np.all(np.isfinite(a)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    if scale > 0 and np.max(np.abs(a - a.T)) > SYMMETRY_RTOL * scale:
        raise NotPositiveDefinite("matrix is not symmetric")
    return a


def cholesky_factor(a: np.ndarray):
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Returns the ``(c, lower)`` pair used by :func:`scipy.linalg.cho_solve`.
    Raises :class:`NotPositiveDefinite` if the factorisation fails.
    """
    a = _as_spd_input(a)
    try:
        return scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc


def cholesky_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive definite ``A`` via Cholesky."""
    factor = cholesky_factor(a)
    b = np.asarray(b, dtype=float)
    if b.shape[0] != factor[0].shape[0]:
        raise ValueError(f"rhs has {b.shape[0]} rows, matrix has {factor[0].shape[0]}")
    return scipy.linalg.cho_solve(factor, b, check_finite=False)


def logdet_spd(a: np.ndarray) -> float:
    """Log-determinant of a symmetric positive definite matrix."""
    factor, _ = cholesky_factor(a)
    return float(2.0 * np.sum(np.log(np.diag(factor))))


def minimize_scalar_bounded(
    f: Callable[[float], float],
    lo: float,
    hi: float,
    tol: float = 1e-8,
    max_iter: int = 500,
) -> float:
    """Minimise ``f`` on ``[lo, hi]``; returns a point within ``tol`` of a minimiser.

    Bounded Brent search.  If the search lands within ``tol`` of an endpoint
    and the endpoint itself is at least as good, the exact endpoint is
    returned, so monotone objectives yield exactly ``lo`` (or ``hi``).

    Raises :class:`NonFiniteObjective` if ``f`` evaluates to NaN or infinity
    at an interior point.
    """
    if not hi > lo:
        raise ValueError(f"need lo < hi, got [{lo}, {hi}]")

    def guarded(x: float) -> float:
        fx = float(f(x))
        if np.isnan(fx) or np.isinf(fx):
            raise NonFiniteObjective(f"objective is {fx!r} at x={x!r}")
        return fx

    res = scipy.optimize.minimize_scalar(
        guarded, bounds=(lo, hi), method="bounded",
        options={"xatol": tol, "maxiter": max_iter},
    )
    x, fx = float(res.x), float(res.fun)
    # Endpoint polish: bounded Brent never evaluates the bounds themselves and
    # stops within sqrt(eps)*|x| + tol/3 of the minimiser, so use that window.
    snap = max(tol, 2.0 * np.sqrt(np.finfo(float).eps) * (1.0 + abs(x)))
    for bound in (lo, hi):
        if abs(x - bound) <= snap:
            fb = float(f(bound))
            if np.isnan(fb):
                continue
            if fb <= fx:
                return bound
    return x


def find_root_bisect(
    f: Callable[[float], float],
    lo: float,
    hi: float,
    tol: float = 1e-10,
) -> float:
    """Bisection root of ``f`` on ``[lo, hi]`` to within ``tol``.

    Requires a sign change over the bracket; raises :class:`NoSignChange`
    otherwise.
    """
    if not hi > lo:
        raise ValueError(f"need lo < hi, got [{lo}, {hi}]")
    flo, fhi = float(f(lo)), float(f(hi))
    if np.isnan(flo) or np.isnan(fhi):
        raise NonFiniteObjective("bracket endpoint evaluated to NaN")
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if np.sign(flo) == np.sign(fhi):
        raise NoSignChange(f"f({lo})={flo}, f({hi})={fhi} have the same sign")
    return float(scipy.optimize.bisect(f, lo, hi, xtol=tol, maxiter=500))


@dataclass
class RngStream:
    """Independent, reproducible random stream.

    The generator is derived from ``SeedSequence(seed, spawn_key=(stream_id,))``,
    so identical ``(seed, stream_id)`` pairs give identical draw sequences and
    distinct stream ids give statistically independent streams, independent of
    worker scheduling.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.seed < 0 or self.stream_id < 0:
            raise ValueError("seed and stream_id must be non-negative")
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def normal(self, mean: float = 0.0, sd: float = 1.0, size=None) -> np.ndarray | float:
        if sd < 0:
            raise ValueError(f"sd must be >= 0, got {sd}")
        return self._gen.normal(loc=mean, scale=sd, size=size)

    def uniform(self, size=None) -> np.ndarray | float:
        """Draws on [0, 1)."""
        return self._gen.random(size=size)

    def generator(self) -> np.random.Generator:
        """The underlying numpy generator (consumed state is shared)."""
        return self._gen
