"""Linear mixed models with independent random-effect blocks, fitted by REML.

The restricted log-likelihood for y ~ N(Xb, V), V = R + Z D Z',

    l_R = -1/2 [ (n-p) log 2pi + log|V| + log|X'V^-1 X| + y'Py ],

is evaluated through the Woodbury identity with M = D^-1 + Z'R^-1 Z, so a
single pass over the data yields per-residual-group cross-products and every
likelihood evaluation afterwards reduces to scalar-weighted sums of small
matrices.  Random blocks have one column per group level with a common
variance per block (independent diagonal D); the block with the most levels
is eliminated first (its slice of M is diagonal because levels occupy
disjoint rows) and the remaining small "border" is handled by a dense Schur
complement.  Crossed or multi-column blocks are out of scope.

Variance components are optimised on the log scale with a bounded
quasi-Newton search and explicit central-difference gradients, followed by a
boundary sweep so estimates that belong on the zero boundary land there
exactly (and are snapped to 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse as sp
from scipy.stats import norm

from .exceptions import (
    NonFiniteObjective,
    NotPositiveDefinite,
    RankDeficient,
    TooFewRows,
    UnknownComponent,
)
from .numerics import cholesky_factor, minimize_scalar_bounded

LOG2PI = math.log(2.0 * math.pi)

#: Bounds for log-variances during optimisation.
LOG_VAR_LO = -30.0
LOG_VAR_HI = 15.0
#: Variance estimates at or below this are reported as exactly zero.
VAR_SNAP = math.exp(-20.0)
#: Step for central-difference gradients of the restricted log-likelihood.
GRAD_STEP = 1e-5
#: Step for the central-difference observed-information matrix.
HESS_STEP = 5e-3
#: Relative tolerance on restricted log-likelihood change at convergence.
REL_TOL = 1e-8
#: Default iteration cap, mirroring the simulation protocol.
MAX_ITER = 40
#: Log-variances below this are treated as boundary when computing the
#: observed information (their rows carry no usable curvature).
ACTIVE_THRESH = -10.0
#: Relative rank tolerance for design-matrix construction.
RANK_TOL = 1e-8

_PENALTY = 1e13


def prune_collinear(
    gram: np.ndarray,
    names: Sequence[str],
    protect: Sequence[str] = (),
    tol: float = RANK_TOL,
) -> list[int]:
    """Indices of a maximal well-conditioned column subset, greedy in order.

    ``gram`` is X'X.  A column is kept when its residual norm after projection
    on the kept predecessors exceeds ``tol`` times its own norm.  Dropping a
    protected column raises :class:`RankDeficient` instead.
    """
    p = gram.shape[0]
    protected = set(protect)
    kept: list[int] = []
    chol = np.zeros((p, p))
    for j in range(p):
        djj = gram[j, j]
        if djj > 0:
            c = gram[kept, j] if kept else np.empty(0)
            w = (
                scipy.linalg.solve_triangular(chol[: len(kept), : len(kept)], c, lower=True)
                if kept else c
            )
            r2 = djj - float(w @ w)
        else:
            r2, w = 0.0, np.empty(0)
        if djj > 0 and r2 > (tol * tol) * djj:
            k = len(kept)
            chol[k, :k] = w
            chol[k, k] = math.sqrt(r2)
            kept.append(j)
        elif names[j] in protected:
            raise RankDeficient(f"protected column {names[j]!r} is collinear")
    return kept


@dataclass
class OlsFit:
    """Ordinary least squares fit."""

    beta: np.ndarray
    beta_cov: np.ndarray
    names: tuple[str, ...]
    sigma2: float
    rss: float
    df_resid: int
    n_obs: int

    def coef(self, name: str) -> float:
        return float(self.beta[self.names.index(name)])

    def coef_se(self, name: str) -> float:
        return float(math.sqrt(self.beta_cov[self.names.index(name), self.names.index(name)]))


def fit_ols(X: np.ndarray, y: np.ndarray, names: Optional[Sequence[str]] = None) -> OlsFit:
    """Least squares through the normal equations; requires full column rank.

    Residual variance uses the n - p divisor and ``beta_cov`` is
    sigma2 (X'X)^-1.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be 2-d")
    n, p = X.shape
    if names is None:
        names = tuple(f"x{j}" for j in range(p))
    if n < p + 1:
        raise TooFewRows(f"{n} rows for {p} columns; need at least {p + 1}")
    gram = X.T @ X
    eig = np.linalg.eigvalsh(gram)
    if eig[0] <= (RANK_TOL ** 2) * max(eig[-1], np.finfo(float).tiny):
        raise RankDeficient("X'X is singular at the rank tolerance")
    factor = cholesky_factor(gram)
    beta = scipy.linalg.cho_solve(factor, X.T @ y, check_finite=False)
    resid = y - X @ beta
    rss = float(resid @ resid)
    df = n - p
    sigma2 = rss / df
    cov = sigma2 * scipy.linalg.cho_solve(factor, np.eye(p), check_finite=False)
    return OlsFit(
        beta=beta, beta_cov=cov, names=tuple(names), sigma2=sigma2,
        rss=rss, df_resid=df, n_obs=n,
    )


@dataclass
class RandomBlock:
    """One random-effect block: a per-level coefficient on ``values``.

    ``groups`` assigns each row to a level; ``values`` is the covariate the
    level's coefficient multiplies (ones for a random intercept).  All levels
    of a block share a single variance parameter.
    """

    name: str
    groups: np.ndarray
    values: Optional[np.ndarray] = None

    def encoded(self, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        groups = np.asarray(self.groups)
        if len(groups) != n:
            raise ValueError(f"block {self.name!r}: groups length {len(groups)} != {n}")
        values = np.ones(n) if self.values is None else np.asarray(self.values, dtype=float)
        if len(values) != n:
            raise ValueError(f"block {self.name!r}: values length {len(values)} != {n}")
        labels, codes = np.unique(groups, return_inverse=True)
        return labels, codes, values


@dataclass
class LmmSpec:
    """A concrete model: response, fixed design, random blocks, residuals.

    Built via :func:`make_spec`, which validates shapes and removes collinear
    fixed-effect columns (protected columns excepted).
    """

    y: np.ndarray
    X: sp.csr_matrix
    names: tuple[str, ...]
    blocks: tuple[RandomBlock, ...]
    residual_codes: Optional[np.ndarray]
    residual_labels: tuple
    dropped: tuple[str, ...]

    @property
    def n_obs(self) -> int:
        return len(self.y)

    @property
    def n_params(self) -> int:
        return self.X.shape[1]

    @property
    def n_residual_groups(self) -> int:
        return len(self.residual_labels) if self.residual_codes is not None else 1

    def component_names(self) -> tuple[str, ...]:
        names = [b.name for b in self.blocks]
        if self.residual_codes is None:
            names.append("residual")
        else:
            names.extend(f"residual[{label}]" for label in self.residual_labels)
        return tuple(names)


def make_spec(
    y: np.ndarray,
    X: np.ndarray | sp.spmatrix,
    names: Sequence[str],
    blocks: Sequence[RandomBlock] = (),
    residual_groups: Optional[np.ndarray] = None,
    protect: Sequence[str] = (),
    rank_tol: float = RANK_TOL,
) -> LmmSpec:
    """Validate and assemble an :class:`LmmSpec`.

    Collinear fixed-effect columns are dropped greedily in order; dropping a
    column named in ``protect`` raises :class:`RankDeficient`.  Raises
    :class:`TooFewRows` when fewer than p + 1 rows remain.
    """
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("response contains non-finite values")
    n = len(y)
    Xs = sp.csr_matrix(X) if not sp.issparse(X) else X.tocsr()
    Xs = Xs.astype(float)
    if Xs.shape[0] != n:
        raise ValueError(f"X has {Xs.shape[0]} rows, y has {n}")
    if Xs.shape[1] != len(names):
        raise ValueError(f"{Xs.shape[1]} columns but {len(names)} names")

    gram = (Xs.T @ Xs).toarray()
    kept = prune_collinear(gram, list(names), protect=protect, tol=rank_tol)
    dropped = tuple(names[j] for j in range(len(names)) if j not in set(kept))
    Xs = Xs[:, kept].tocsr()
    names = tuple(names[j] for j in kept)
    if n < len(names) + 1:
        raise TooFewRows(f"{n} rows for {len(names)} columns")

    if residual_groups is not None:
        labels, codes = np.unique(np.asarray(residual_groups), return_inverse=True)
        if len(codes) != n:
            raise ValueError("residual_groups length mismatch")
        residual_codes, residual_labels = codes, tuple(labels.tolist())
    else:
        residual_codes, residual_labels = None, ("",)

    for b in blocks:
        b.encoded(n)  # shape validation
    return LmmSpec(
        y=y, X=Xs, names=names, blocks=tuple(blocks),
        residual_codes=residual_codes,
        residual_labels=residual_labels if residual_codes is not None else ("",),
        dropped=dropped,
    )


class _RemlProblem:
    """Precomputed cross-products and the REML objective for one spec."""

    def __init__(self, spec: LmmSpec):
        self.spec = spec
        y = spec.y
        X = spec.X
        self.n, self.p = X.shape

        # Residual grouping.
        if spec.residual_codes is None:
            codes = np.zeros(self.n, dtype=np.int64)
            self.n_resid = 1
        else:
            codes = spec.residual_codes
            self.n_resid = len(spec.residual_labels)
        self.resid_names = (
            ("residual",) if spec.residual_codes is None
            else tuple(f"residual[{label}]" for label in spec.residual_labels)
        )

        # Random blocks: the largest becomes the diagonal tier.
        encoded = [b.encoded(self.n) for b in spec.blocks]
        sizes = [len(labels) for labels, _, _ in encoded]
        self.block_names = tuple(b.name for b in spec.blocks)
        self.n_blocks = len(spec.blocks)
        if self.n_blocks:
            self.diag_block = int(np.argmax(sizes))
        else:
            self.diag_block = -1

        if self.diag_block >= 0:
            d_labels, d_codes, d_values = encoded[self.diag_block]
            self.L = len(d_labels)
            self.diag_labels = d_labels
        else:
            d_codes = d_values = None
            self.L = 0
            self.diag_labels = np.empty(0)

        border_cols = []       # (block_index, level_count) per border column set
        self.border_map = []   # parameter index per border column
        b_rows, b_cols, b_data = [], [], []
        offset = 0
        self.border_levels = []
        for bi, (labels, bcodes, bvalues) in enumerate(encoded):
            if bi == self.diag_block:
                continue
            nb = len(labels)
            b_rows.append(np.arange(self.n))
            b_cols.append(offset + bcodes)
            b_data.append(bvalues)
            self.border_map.extend([bi] * nb)
            self.border_levels.append((bi, nb))
            offset += nb
            border_cols.append((bi, nb))
        self.Kb = offset
        self.border_map = np.asarray(self.border_map, dtype=np.int64)
        if self.Kb:
            B = sp.csr_matrix(
                (np.concatenate(b_data), (np.concatenate(b_rows), np.concatenate(b_cols))),
                shape=(self.n, self.Kb),
            )
        else:
            B = None

        # Parameter layout: block variances in declaration order, then residuals.
        self.m = self.n_blocks + self.n_resid
        self.param_names = self.block_names + self.resid_names
        self.resid_slice = slice(self.n_blocks, self.m)

        # Per-group cross-products.
        G = self.n_resid
        p, Kb, L = self.p, self.Kb, self.L
        self.XXs = np.empty((G, p, p))
        self.Xys = np.empty((G, p))
        self.yys = np.empty(G)
        self.ns = np.empty(G)
        self.XBs = np.empty((G, p, Kb)) if Kb else None
        self.BBs = np.empty((G, Kb, Kb)) if Kb else None
        self.Bys = np.empty((G, Kb)) if Kb else None
        self.dds = np.empty((G, L)) if L else None
        self.Dys = np.empty((G, L)) if L else None

        # Cross-products against the diagonal tier are linear in the residual
        # weights, so they are stored as stacked COO triplets tagged with the
        # residual group; each evaluation reduces them with one bincount
        # instead of a per-group sparse sum.
        xd_parts: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        bd_parts: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []

        for g in range(G):
            idx = np.nonzero(codes == g)[0]
            Xg = X[idx]
            yg = y[idx]
            self.XXs[g] = (Xg.T @ Xg).toarray()
            self.Xys[g] = Xg.T @ yg
            self.yys[g] = yg @ yg
            self.ns[g] = len(idx)
            if Kb:
                Bg = B[idx]
                self.XBs[g] = (Xg.T @ Bg).toarray()
                self.BBs[g] = (Bg.T @ Bg).toarray()
                self.Bys[g] = Bg.T @ yg
            if L:
                dc = d_codes[idx]
                dv = d_values[idx]
                Dg = sp.csr_matrix((dv, (np.arange(len(idx)), dc)), shape=(len(idx), L))
                xd = (Xg.T @ Dg).tocoo()
                xd_parts.append((xd.row * L + xd.col, xd.data,
                                 np.full(xd.nnz, g, dtype=np.int64)))
                if Kb:
                    bd = (B[idx].T @ Dg).tocoo()
                    bd_parts.append((bd.row * L + bd.col, bd.data,
                                     np.full(bd.nnz, g, dtype=np.int64)))
                self.dds[g] = np.bincount(dc, weights=dv * dv, minlength=L)
                self.Dys[g] = np.bincount(dc, weights=dv * yg, minlength=L)

        if L:
            self.xd_flat = np.concatenate([f for f, _, _ in xd_parts])
            self.xd_vals = np.concatenate([d for _, d, _ in xd_parts])
            self.xd_group = np.concatenate([grp for _, _, grp in xd_parts])
            if Kb:
                self.bd_flat = np.concatenate([f for f, _, _ in bd_parts])
                self.bd_vals = np.concatenate([d for _, d, _ in bd_parts])
                self.bd_group = np.concatenate([grp for _, _, grp in bd_parts])

        # Number of levels per block, for log|D|.
        self.block_sizes = np.asarray(sizes, dtype=float) if sizes else np.empty(0)

    # -- objective -----------------------------------------------------------

    def loglik(self, phi: np.ndarray, extras: bool = False):
        """Restricted log-likelihood at log-variances ``phi``.

        With ``extras`` also returns the GLS coefficients and their
        covariance.  Raises :class:`NotPositiveDefinite` if a required
        factorisation fails.
        """
        phi = np.asarray(phi, dtype=float)
        if phi.shape != (self.m,):
            raise ValueError(f"expected {self.m} parameters, got {phi.shape}")
        v = np.exp(phi)
        rvars = v[self.resid_slice]
        w = 1.0 / rvars

        Cxx = np.einsum("g,gij->ij", w, self.XXs)
        cxy = w @ self.Xys
        cyy = float(w @ self.yys)
        sum_n_log_r = float(self.ns @ np.log(rvars))

        logdet_d = 0.0
        logdet_m = 0.0
        if self.n_blocks:
            logdet_d = float(self.block_sizes @ phi[: self.n_blocks])

        have_diag = self.L > 0
        have_border = self.Kb > 0
        Mdd = None
        Sf = None
        Cbd = None
        if have_diag:
            dvar = v[self.diag_block]
            cdd = w @ self.dds
            Mdd = 1.0 / dvar + cdd
            if np.any(Mdd <= 0):
                raise NotPositiveDefinite("diagonal tier of M is not positive")
            logdet_m += float(np.sum(np.log(Mdd)))
        if have_border:
            bvars = v[self.border_map]
            Cbb = np.einsum("g,gij->ij", w, self.BBs)
            Mbb = Cbb + np.diag(1.0 / bvars)
            if have_diag:
                Cbd = np.bincount(
                    self.bd_flat, weights=self.bd_vals * w[self.bd_group],
                    minlength=self.Kb * self.L,
                ).reshape(self.Kb, self.L)
                S = Mbb - (Cbd / Mdd) @ Cbd.T
            else:
                S = Mbb
            S = 0.5 * (S + S.T)
            Sf = cholesky_factor(S)
            logdet_m += float(2.0 * np.sum(np.log(np.diag(Sf[0]))))

        def m_solve(vb, vd):
            """Solve M u = [vd; vb]; either part may be None."""
            if not have_diag:
                return (scipy.linalg.cho_solve(Sf, vb, check_finite=False), None)
            scale = Mdd if vd.ndim == 1 else Mdd[:, None]
            if not have_border:
                return (None, vd / scale)
            t = vd / scale
            ub = scipy.linalg.cho_solve(Sf, vb - Cbd @ t, check_finite=False)
            ud = (vd - Cbd.T @ ub) / scale
            return (ub, ud)

        XtViX = Cxx
        XtViy = cxy
        ytViy = cyy
        if self.n_blocks:
            vXb = (
                np.einsum("g,gij->ij", w, self.XBs).T if have_border else None
            )  # (Kb, p)
            if have_diag:
                Cxd_dense = np.bincount(
                    self.xd_flat, weights=self.xd_vals * w[self.xd_group],
                    minlength=self.p * self.L,
                ).reshape(self.p, self.L)
                vXd = Cxd_dense.T  # (L, p)
            else:
                Cxd_dense = vXd = None
            vyb = w @ self.Bys if have_border else None
            vyd = w @ self.Dys if have_diag else None

            ub, ud = m_solve(vXb, vXd)
            correction = 0.0
            if ub is not None:
                correction = correction + vXb.T @ ub
            if ud is not None:
                correction = correction + Cxd_dense @ ud
            XtViX = Cxx - correction

            uyb, uyd = m_solve(vyb, vyd)
            ycorr_vec = 0.0
            yq = 0.0
            if uyb is not None:
                ycorr_vec = ycorr_vec + vXb.T @ uyb
                yq += float(vyb @ uyb)
            if uyd is not None:
                ycorr_vec = ycorr_vec + Cxd_dense @ uyd
                yq += float(vyd @ uyd)
            XtViy = cxy - ycorr_vec
            ytViy = cyy - yq

        XtViX = 0.5 * (XtViX + XtViX.T)
        xf = cholesky_factor(XtViX)
        beta = scipy.linalg.cho_solve(xf, XtViy, check_finite=False)
        logdet_xvx = float(2.0 * np.sum(np.log(np.diag(xf[0]))))
        qform = ytViy - float(XtViy @ beta)

        ll = -0.5 * (
            (self.n - self.p) * LOG2PI
            + sum_n_log_r + logdet_d + logdet_m + logdet_xvx + qform
        )
        if not extras:
            return ll
        beta_cov = scipy.linalg.cho_solve(xf, np.eye(self.p), check_finite=False)
        beta_cov = 0.5 * (beta_cov + beta_cov.T)
        return ll, beta, beta_cov

    def neg_loglik(self, phi: np.ndarray) -> float:
        """Penalised negative objective, safe for optimiser line searches."""
        try:
            ll = self.loglik(phi)
        except NotPositiveDefinite:
            return _PENALTY
        if not np.isfinite(ll):
            return _PENALTY
        return -ll

    def neg_grad(self, phi: np.ndarray) -> np.ndarray:
        """Central-difference gradient of the negative objective."""
        g = np.empty(self.m)
        for k in range(self.m):
            step = np.zeros(self.m)
            step[k] = GRAD_STEP
            g[k] = (self.neg_loglik(phi + step) - self.neg_loglik(phi - step)) / (2 * GRAD_STEP)
        return g

    def default_start(self) -> np.ndarray:
        """Heuristic starts: split the OLS residual variance across components."""
        gram = self.XXs.sum(axis=0)
        xy = self.Xys.sum(axis=0)
        try:
            beta = scipy.linalg.cho_solve(cholesky_factor(gram), xy, check_finite=False)
        except NotPositiveDefinite:
            beta = np.zeros(self.p)
        rss_g = np.empty(self.n_resid)
        for g in range(self.n_resid):
            rss_g[g] = self.yys[g] - 2.0 * beta @ self.Xys[g] + beta @ self.XXs[g] @ beta
        df_g = np.maximum(self.ns - self.p * self.ns / self.n, 1.0)
        s2_g = np.maximum(rss_g, 0.0) / df_g
        s2_g = np.clip(s2_g, 1e-8, None)
        s2_total = float(np.clip(np.sum(rss_g) / max(self.n - self.p, 1), 1e-8, None))

        start = np.empty(self.m)
        share = 0.5 if self.n_blocks else 1.0
        for bi in range(self.n_blocks):
            start[bi] = 0.5 * s2_total if self._block_is_intercept(bi) else 0.1 * s2_total
        start[self.resid_slice] = share * s2_g
        return np.log(np.clip(start, math.exp(LOG_VAR_LO), math.exp(LOG_VAR_HI)))

    def _block_is_intercept(self, bi: int) -> bool:
        values = self.spec.blocks[bi].values
        return values is None or bool(np.all(np.asarray(values) == 1.0))


@dataclass
class LmmFit:
    """Result of :func:`fit_reml`."""

    beta: np.ndarray
    beta_cov: np.ndarray
    beta_names: tuple[str, ...]
    varcomps: dict[str, float]
    loglik: float
    converged: bool
    iterations: int
    n_obs: int
    dropped: tuple[str, ...]
    _problem: _RemlProblem = field(repr=False)
    _phi: np.ndarray = field(repr=False)
    _hessian: Optional[tuple[np.ndarray, np.ndarray]] = field(default=None, repr=False)

    def coef(self, name: str) -> float:
        return float(self.beta[self.beta_names.index(name)])

    def coef_se(self, name: str) -> float:
        j = self.beta_names.index(name)
        return float(math.sqrt(self.beta_cov[j, j]))

    def residual_variances(self) -> dict:
        """Residual variance per residual group label ('' when common)."""
        labels = self._problem.spec.residual_labels
        names = self._problem.resid_names
        return {label: self.varcomps[name] for label, name in zip(labels, names)}

    def observed_information(self) -> tuple[np.ndarray, np.ndarray]:
        """Central-difference Hessian of -l_R over interior log-variances.

        Returns ``(H, active)`` where ``active`` holds the parameter indices
        with log-variance above the boundary threshold; components on the
        boundary carry no curvature and are excluded.
        """
        if self._hessian is not None:
            return self._hessian
        prob = self._problem
        phi = self._phi
        active = np.nonzero(phi > ACTIVE_THRESH)[0]
        ma = len(active)
        h = HESS_STEP
        H = np.empty((ma, ma))
        f0 = prob.neg_loglik(phi)
        for i, ki in enumerate(active):
            ei = np.zeros(prob.m)
            ei[ki] = h
            H[i, i] = (prob.neg_loglik(phi + ei) - 2.0 * f0 + prob.neg_loglik(phi - ei)) / (h * h)
            for jj, kj in enumerate(active[:i]):
                ej = np.zeros(prob.m)
                ej[kj] = h
                val = (
                    prob.neg_loglik(phi + ei + ej)
                    - prob.neg_loglik(phi + ei - ej)
                    - prob.neg_loglik(phi - ei + ej)
                    + prob.neg_loglik(phi - ei - ej)
                ) / (4.0 * h * h)
                H[i, jj] = H[jj, i] = val
        self._hessian = (H, active)
        return self._hessian


def _coordinate_sweep(problem: _RemlProblem, phi: np.ndarray, xatol: float) -> tuple[np.ndarray, float]:
    """One pass of bounded scalar minimisation over each free coordinate.

    Coordinates already on the zero boundary are left there; the boundary
    sweep in :func:`fit_reml` owns those decisions.
    """
    phi = phi.copy()
    for k in range(problem.m):
        if phi[k] <= LOG_VAR_LO + 1e-12:
            continue

        def fk(x, k=k):
            trial = phi.copy()
            trial[k] = x
            return problem.neg_loglik(trial)

        phi[k] = minimize_scalar_bounded(fk, LOG_VAR_LO, LOG_VAR_HI, tol=xatol)
    return phi, problem.neg_loglik(phi)


def fit_reml(
    spec: LmmSpec,
    start: Optional[Mapping[str, float]] = None,
    max_iter: int = MAX_ITER,
) -> LmmFit:
    """Maximise the restricted likelihood over log-variances.

    Bounded quasi-Newton (L-BFGS-B) with central-difference gradients and the
    iteration cap ``max_iter``; convergence means the relative objective
    change fell below ``REL_TOL``.  A post-search boundary sweep moves
    components to the zero boundary when that does not reduce the objective,
    and estimates at or below ``VAR_SNAP`` are reported as exactly 0.  A
    coordinate polish pass tightens small problems.  Estimates are returned
    even when the cap is hit; ``converged`` records which case occurred.
    """
    problem = _RemlProblem(spec)
    m = problem.m
    if start is not None:
        phi0 = np.empty(m)
        for k, name in enumerate(problem.param_names):
            try:
                value = float(start[name])
            except KeyError as exc:
                raise UnknownComponent(f"start value for unknown component {name!r}") from exc
            phi0[k] = math.log(np.clip(value, math.exp(LOG_VAR_LO), math.exp(LOG_VAR_HI)))
    else:
        phi0 = problem.default_start()

    res = scipy.optimize.minimize(
        problem.neg_loglik, phi0, jac=problem.neg_grad, method="L-BFGS-B",
        bounds=[(LOG_VAR_LO, LOG_VAR_HI)] * m,
        options={"maxiter": max_iter, "ftol": REL_TOL, "gtol": 1e-7},
    )
    phi = np.asarray(res.x, dtype=float)
    best = float(res.fun)
    iterations = int(res.nit)
    converged = bool(res.success) and res.status != 1
    if not converged and res.status == 2 and iterations < max_iter:
        # Abnormal line-search exit: fall back to coordinate search.
        budget = min(5, max_iter - iterations)
        for _ in range(budget):
            phi_new, f_new = _coordinate_sweep(problem, phi, xatol=1e-9)
            iterations += 1
            improved = best - f_new
            phi, best = phi_new, min(best, f_new)
            if improved <= REL_TOL * max(abs(best), 1.0):
                converged = True
                break

    # Boundary sweep: move components to zero when the objective allows it.
    moved = False
    for k in range(m):
        if phi[k] <= LOG_VAR_LO:
            continue
        trial = phi.copy()
        trial[k] = LOG_VAR_LO
        f_trial = problem.neg_loglik(trial)
        if f_trial <= best + 1e-9:
            phi, best, moved = trial, min(best, f_trial), True

    # Polish: cheap for small problems, and worthwhile after boundary moves.
    if iterations < max_iter and (m <= 8 or moved):
        sweeps = min(6 if m <= 8 else 2, max_iter - iterations)
        for _ in range(sweeps):
            prev = phi.copy()
            phi_new, f_new = _coordinate_sweep(problem, phi, xatol=1e-10)
            iterations += 1
            if f_new <= best:
                phi, best = phi_new, f_new
            if np.max(np.abs(phi - prev)) < 1e-8:
                break

    ll, beta, beta_cov = problem.loglik(phi, extras=True)
    values = np.exp(phi)
    values[values <= VAR_SNAP] = 0.0
    varcomps = dict(zip(problem.param_names, (float(x) for x in values)))
    return LmmFit(
        beta=beta, beta_cov=beta_cov, beta_names=spec.names,
        varcomps=varcomps, loglik=float(ll), converged=converged,
        iterations=iterations, n_obs=problem.n, dropped=spec.dropped,
        _problem=problem, _phi=phi,
    )


def reml_loglik(spec: LmmSpec, varcomps: Mapping[str, float]) -> float:
    """Restricted log-likelihood at the given positive variance components."""
    problem = _RemlProblem(spec)
    phi = np.empty(problem.m)
    for k, name in enumerate(problem.param_names):
        try:
            value = float(varcomps[name])
        except KeyError as exc:
            raise UnknownComponent(f"missing variance component {name!r}") from exc
        if not np.isfinite(value) or value <= 0:
            raise NotPositiveDefinite(f"component {name!r} must be positive, got {value}")
        phi[k] = math.log(value)
    ll = problem.loglik(phi)
    if not np.isfinite(ll):
        raise NonFiniteObjective(f"restricted log-likelihood is {ll}")
    return float(ll)


def wald_ci_logvariance(
    fit: LmmFit,
    component: str,
    level: float = 0.95,
) -> Optional[tuple[float, float]]:
    """Wald interval for a variance component on the log scale.

    ``exp(log v +- z * SE(log v))`` with the SE taken from the inverse
    observed information over interior log-variances.  Returns ``None``
    (missing) when the estimate is at the zero boundary, the information is
    not positive definite, or the interval is not finite.
    """
    if component not in fit.varcomps:
        raise UnknownComponent(f"no variance component named {component!r}")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    v = fit.varcomps[component]
    if v <= 1e-10:
        return None
    k = fit._problem.param_names.index(component)
    H, active = fit.observed_information()
    where = np.nonzero(active == k)[0]
    if len(where) == 0:
        return None
    idx = int(where[0])
    if H[idx, idx] <= 0 or not np.all(np.isfinite(H)):
        return None
    try:
        cov = scipy.linalg.cho_solve(cholesky_factor(H), np.eye(len(active)), check_finite=False)
    except NotPositiveDefinite:
        return None
    var_log = float(cov[idx, idx])
    if not np.isfinite(var_log) or var_log <= 0:
        return None
    z = float(norm.ppf(0.5 + level / 2.0))
    half = z * math.sqrt(var_log)
    lo, hi = v * math.exp(-half), v * math.exp(half)
    if not (np.isfinite(lo) and np.isfinite(hi)):
        return None
    return (lo, hi)
