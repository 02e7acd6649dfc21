"""Least squares and one-parameter REML fits.

Everything here works on plain numpy arrays. The two mixed-model fits
(`reml_random_intercept` and `reml_hetvar`) reduce their likelihoods to a
single variance parameter, scan it on a coarse grid and then refine the
best bracket with a bounded Brent search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.optimize

RANK_TOL = 1e-10


class RankDeficientError(ValueError):
    """Design matrix is not of full column rank."""

    def __init__(self, collinear: Sequence[str]):
        self.collinear = list(collinear)
        super().__init__(f"design is rank deficient; collinear columns: {', '.join(self.collinear)}")


class ConvergenceError(RuntimeError):
    """An optimizer ran out of iterations. ``state`` holds the best point found."""

    def __init__(self, message: str, state: dict):
        self.state = state
        super().__init__(message)


@dataclass(frozen=True)
class LinearFit:
    coefficients: np.ndarray
    coefficient_covariance: np.ndarray
    residual_variance: float
    residuals: np.ndarray
    design_labels: tuple[str, ...]

    def coef(self, label: str) -> float:
        return float(self.coefficients[self.design_labels.index(label)])

    def se(self, label: str) -> float:
        i = self.design_labels.index(label)
        return float(np.sqrt(self.coefficient_covariance[i, i]))


@dataclass(frozen=True)
class RandomInterceptFit:
    fixed_coefficients: np.ndarray
    tau_u_sq: float
    sigma_e_sq: float
    groups: tuple
    group_sizes: np.ndarray
    blups: np.ndarray
    blup_shrinkage: np.ndarray
    group_mean_residuals: np.ndarray
    reml_loglik: float
    design_labels: tuple[str, ...] = ()

    @property
    def variance_ratio(self) -> float:
        return self.tau_u_sq / self.sigma_e_sq if self.sigma_e_sq > 0 else math.inf


@dataclass(frozen=True)
class HetVarMixedFit:
    fixed_coefficients: np.ndarray
    tau_q_sq: float
    coefficient_covariance: np.ndarray
    converged: bool
    reml_loglik: float
    weights: np.ndarray
    design_labels: tuple[str, ...] = ()
    upper: float = math.nan
    iterations: int = 0
    extra: dict = field(default_factory=dict)

    def coef(self, label: str) -> float:
        return float(self.fixed_coefficients[self.design_labels.index(label)])

    def se(self, label: str) -> float:
        i = self.design_labels.index(label)
        return float(np.sqrt(self.coefficient_covariance[i, i]))


def _labels(labels, p):
    if labels is None:
        return tuple(f"x{i}" for i in range(p))
    labels = tuple(labels)
    if len(labels) != p:
        raise ValueError(f"expected {p} design labels, got {len(labels)}")
    return labels


def _as_design(design):
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def _pivoted_qr(X):
    Q, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        return Q, R, piv, 0
    rank = int(np.sum(diag > RANK_TOL * diag[0]))
    return Q, R, piv, rank


def column_rank(design) -> int:
    X = _as_design(design)
    return _pivoted_qr(X)[3]


def collinear_columns(design, labels=None) -> list[str]:
    """Labels of the columns that lie in the span of the columns before them."""
    return drop_collinear(design, labels)[2]


def drop_collinear(design, labels=None, keep: Sequence[str] = ()):
    """Remove columns until the design has full column rank.

    Columns listed in ``keep`` are favoured when choosing which columns to
    drop. Returns ``(reduced_design, reduced_labels, dropped_labels)``.
    """
    X = _as_design(design)
    labels = _labels(labels, X.shape[1])
    order = [i for i, lab in enumerate(labels) if lab in keep]
    order += [i for i, lab in enumerate(labels) if lab not in keep]
    chosen: list[int] = []
    for i in order:
        trial = chosen + [i]
        if column_rank(X[:, trial]) == len(trial):
            chosen = trial
    chosen.sort()
    dropped = [labels[i] for i in range(len(labels)) if i not in chosen]
    return X[:, chosen], tuple(labels[i] for i in chosen), dropped


def solve_full_rank(X, y, labels):
    Q, R, piv, rank = _pivoted_qr(X)
    p = X.shape[1]
    if rank < p:
        raise RankDeficientError(collinear_columns(X, labels))
    Rinv = scipy.linalg.solve_triangular(R, np.eye(p))
    beta_piv = Rinv @ (Q.T @ y)
    beta = np.empty(p)
    beta[piv] = beta_piv
    unscaled_piv = Rinv @ Rinv.T
    unscaled = np.empty((p, p))
    unscaled[np.ix_(piv, piv)] = unscaled_piv
    unscaled = 0.5 * (unscaled + unscaled.T)
    return beta, unscaled


def ols(design, response, labels=None) -> LinearFit:
    """Ordinary least squares with a rank-revealing QR solve."""
    X = _as_design(design)
    y = np.asarray(response, dtype=float)
    n, p = X.shape
    labels = _labels(labels, p)
    if y.shape != (n,):
        raise ValueError("response length does not match design rows")
    beta, unscaled = solve_full_rank(X, y, labels)
    resid = y - X @ beta
    dof = n - p
    s2 = float(resid @ resid / dof) if dof > 0 else math.nan
    return LinearFit(beta, s2 * unscaled, s2, resid, labels)


def wls(design, response, weights, labels=None) -> LinearFit:
    """Weighted least squares treating ``weights`` as inverse variances.

    ``coefficient_covariance`` is ``(X'WX)^-1``, i.e. the weights are taken
    to be the true inverse variances and no residual rescaling is done.
    ``residual_variance`` is the weighted residual mean square.
    """
    X = _as_design(design)
    y = np.asarray(response, dtype=float)
    w = np.asarray(weights, dtype=float)
    n, p = X.shape
    labels = _labels(labels, p)
    if w.shape != (n,):
        raise ValueError("weights length does not match design rows")
    if not np.all(w > 0):
        raise ValueError("weights must be strictly positive")
    sw = np.sqrt(w)
    beta, unscaled = solve_full_rank(X * sw[:, None], y * sw, labels)
    resid = y - X @ beta
    dof = n - p
    s2 = float(np.sum(w * resid**2) / dof) if dof > 0 else math.nan
    return LinearFit(beta, unscaled, s2, resid, labels)


def bounded_max(f: Callable[[float], float], lo: float, hi: float,
                tol: float = 1e-8, max_iter: int = 500):
    """Maximize a unimodal ``f`` on ``[lo, hi]`` (bounded Brent search).

    Returns ``(x, f(x), iterations, converged)``. The endpoints are checked,
    so a maximum sitting on the boundary is returned exactly.
    """
    lo, hi = float(lo), float(hi)
    if hi > lo:
        res = scipy.optimize.minimize_scalar(lambda t: -f(t), bounds=(lo, hi), method="bounded",
                                             options={"xatol": tol, "maxiter": max_iter})
        x, fx, it, converged = float(res.x), -float(res.fun), int(res.nfev), bool(res.success)
    else:
        x, fx, it, converged = lo, f(lo), 0, True
    for edge in (lo, hi):
        fe = f(edge)
        if fe > fx:
            x, fx = edge, fe
    return x, fx, it, converged


def _grid_then_refine(f, grid, tol, max_iter, score=None):
    """Best grid point, then refine inside its neighbouring bracket.

    With an analytic ``score`` (derivative of ``f``) that changes sign over
    the bracket the stationary point is located by Brent root finding, which
    resolves it to ``tol`` even where ``f`` is numerically flat. Otherwise a
    bounded Brent maximization is used.
    """
    values = np.array([f(g) for g in grid])
    if not np.any(np.isfinite(values)):
        raise ConvergenceError("objective is not finite anywhere on the search grid",
                               {"grid": grid, "values": values})
    k = int(np.nanargmax(np.where(np.isfinite(values), values, -np.inf)))
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, len(grid) - 1)]
    s_lo = score(lo) if score is not None else math.nan
    s_hi = score(hi) if score is not None else math.nan
    if s_lo > 0 > s_hi:
        x, res = scipy.optimize.brentq(score, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps,
                                       maxiter=max_iter, full_output=True, disp=False)
        x, fx, it, converged = float(x), f(x), res.iterations, res.converged
    else:
        x, fx, it, converged = bounded_max(f, lo, hi, tol=tol, max_iter=max_iter)
    if values[k] > fx:
        x, fx = grid[k], values[k]
    return x, fx, it, converged


# ---------------------------------------------------------------------------
# random intercept REML


class _GroupedDesign:
    """Sufficient statistics of a random-intercept model, per group."""

    def __init__(self, X, y, codes, n_groups):
        self.X, self.y = X, y
        self.N, self.p = X.shape
        self.n = np.bincount(codes, minlength=n_groups).astype(float)
        self.Sx = np.zeros((n_groups, self.p))
        np.add.at(self.Sx, codes, X)
        self.Sy = np.bincount(codes, weights=y, minlength=n_groups)
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)

    def gls(self, psi):
        c = psi / (1.0 + self.n * psi)
        A = self.XtX - (self.Sx * c[:, None]).T @ self.Sx
        b = self.Xty - self.Sx.T @ (c * self.Sy)
        q = self.yty - float(np.sum(c * self.Sy**2))
        return A, b, q

    def score(self, psi):
        """Derivative of `loglik` with respect to ``psi``."""
        A, b, q = self.gls(psi)
        beta = np.linalg.solve(A, b)
        rss = q - float(b @ beta)
        d2 = 1.0 / (1.0 + self.n * psi) ** 2
        sr = self.Sy - self.Sx @ beta
        drss = -float(np.sum(d2 * sr * sr))
        dA = -(self.Sx * d2[:, None]).T @ self.Sx
        dlogdet = float(np.trace(np.linalg.solve(A, dA)))
        dof = self.N - self.p
        return -0.5 * (dof * drss / rss + float(np.sum(self.n / (1.0 + self.n * psi))) + dlogdet)

    def loglik(self, psi):
        """Profile REML log-likelihood in the variance ratio ``psi`` (σ² profiled)."""
        A, b, q = self.gls(psi)
        try:
            L = np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            return -math.inf
        beta = scipy.linalg.cho_solve((L, True), b)
        rss = q - float(b @ beta)
        dof = self.N - self.p
        if rss <= 0:
            return math.inf
        s2 = rss / dof
        logdet_A = 2.0 * float(np.sum(np.log(np.diag(L))))
        return -0.5 * (dof * math.log(s2) + float(np.sum(np.log1p(self.n * psi)))
                       + logdet_A + dof)


def reml_random_intercept(design, response, groups, labels=None,
                          log_ratio_bounds=(math.log(1e-8), math.log(1e8)),
                          tol: float = 1e-10, max_iter: int = 500) -> RandomInterceptFit:
    """One-way random intercept model fitted by REML.

    The restricted likelihood is maximized over ``log(tau_u^2 / sigma_e^2)``
    within ``log_ratio_bounds``; the boundary ``tau_u^2 = 0`` is compared
    separately. BLUPs are ``shrinkage * mean GLS residual`` per group.
    Groups are reported in sorted order.
    """
    X = _as_design(design)
    y = np.asarray(response, dtype=float)
    N, p = X.shape
    labels = _labels(labels, p)
    if y.shape != (N,):
        raise ValueError("response length does not match design rows")
    groups = np.asarray(groups)
    if groups.shape != (N,):
        raise ValueError("group labels length does not match design rows")
    levels, codes = np.unique(groups, return_inverse=True)
    G = len(levels)
    if G < 3:
        raise ValueError(f"need at least 3 groups, got {G}")
    if N - p < 1:
        raise ValueError("no residual degrees of freedom")
    if column_rank(X) < p:
        raise RankDeficientError(collinear_columns(X, labels))
    if np.ptp(y) == 0:
        raise ValueError("degenerate response: zero variance (tau_u^2 = sigma_e^2 = 0)")

    gd = _GroupedDesign(X, y, codes, G)
    lo, hi = log_ratio_bounds
    f = lambda t: gd.loglik(math.exp(t))  # noqa: E731
    df = lambda t: math.exp(t) * gd.score(math.exp(t))  # noqa: E731
    grid = np.linspace(lo, hi, 65)
    t_best, ll_best, it, converged = _grid_then_refine(f, grid, tol, max_iter, score=df)
    if not converged:
        raise ConvergenceError("REML search for tau_u^2 did not converge",
                               {"log_ratio": t_best, "loglik": ll_best, "iterations": it})
    psi = math.exp(t_best)
    ll0 = gd.loglik(0.0)
    if ll0 >= ll_best:
        psi, ll_best = 0.0, ll0

    A, b, q = gd.gls(psi)
    beta = np.linalg.solve(A, b)
    sigma_sq = (q - float(b @ beta)) / (N - p)
    tau_sq = psi * sigma_sq
    resid = y - X @ beta
    rbar = np.bincount(codes, weights=resid, minlength=G) / gd.n
    shrink = tau_sq * gd.n / (tau_sq * gd.n + sigma_sq)
    blups = shrink * rbar
    return RandomInterceptFit(
        fixed_coefficients=beta, tau_u_sq=float(tau_sq), sigma_e_sq=float(sigma_sq),
        groups=tuple(levels.tolist()), group_sizes=gd.n.astype(int), blups=blups,
        blup_shrinkage=shrink, group_mean_residuals=rbar, reml_loglik=float(ll_best),
        design_labels=labels,
    )


# ---------------------------------------------------------------------------
# heteroscedastic known-variance REML


MAIN_TOL = 1e-6
REPLICATE_TOL = 1e-3


def hetvar_loglik(tau_q_sq, design, response, known_variances) -> float:
    """Restricted log-likelihood of ``y = Xb + q + g`` with var(g_j) = v_j known.

    ``-0.5 * [sum log(tau + v) + log det(X'WX) + r'Wr]`` with ``W = 1/(tau + v)``
    and ``r`` the GLS residual; additive constants dropped.
    """
    X = _as_design(design)
    y = np.asarray(response, dtype=float)
    v = np.asarray(known_variances, dtype=float)
    return _hetvar_eval(float(tau_q_sq), X, y, v)[0]


def _hetvar_eval(tau, X, y, v):
    tv = tau + v
    w = 1.0 / tv
    Xw = X * w[:, None]
    A = X.T @ Xw
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return -math.inf, None, None, w
    beta = scipy.linalg.cho_solve((L, True), Xw.T @ y)
    r = y - X @ beta
    ll = -0.5 * (float(np.sum(np.log(tv))) + 2.0 * float(np.sum(np.log(np.diag(L))))
                 + float(np.sum(w * r * r)))
    return ll, beta, L, w


def hetvar_score(tau, X, y, v) -> float:
    """Derivative of the restricted log-likelihood in ``tau_q^2``."""
    ll, beta, L, w = _hetvar_eval(tau, X, y, v)
    if L is None:
        return math.nan
    r = y - X @ beta
    Xw2 = X * (w * w)[:, None]
    tr = float(np.trace(scipy.linalg.cho_solve((L, True), X.T @ Xw2)))
    return -0.5 * (float(np.sum(w)) - tr - float(np.sum((w * r) ** 2)))


def hetvar_upper(response) -> float:
    y = np.asarray(response, dtype=float)
    return 100.0 * float(np.var(y, ddof=1))


def reml_hetvar(design, response, known_variances, labels=None,
                tol: float = MAIN_TOL, max_iter: int = 500, n_grid: int = 60) -> HetVarMixedFit:
    """Site-level regression with a random residual of unknown variance
    ``tau_q^2`` on top of known sampling variances ``v_j``.

    ``tau_q^2`` maximizes the restricted likelihood on
    ``[0, 100 * var(response)]``. The search scans a geometric grid (plus
    zero), then runs a bounded Brent search on the bracket around the best grid
    point until its width is below ``tol``. Coefficients are the GLS
    estimates at the optimum with covariance ``(X'WX)^-1``.
    """
    X = _as_design(design)
    y = np.asarray(response, dtype=float)
    v = np.asarray(known_variances, dtype=float)
    m, p = X.shape
    labels = _labels(labels, p)
    if y.shape != (m,) or v.shape != (m,):
        raise ValueError("response / known_variances length does not match design rows")
    if m < p + 2:
        raise ValueError(f"need at least {p + 2} rows for {p} coefficients, got {m}")
    if not np.all(v > 0):
        raise ValueError("known variances must be strictly positive")
    if column_rank(X) < p:
        raise RankDeficientError(collinear_columns(X, labels))
    upper = hetvar_upper(y)
    if not upper > 0:
        raise ConvergenceError("cannot bracket tau_q^2: response has zero variance",
                               {"upper": upper})

    f = lambda t: _hetvar_eval(t, X, y, v)[0]  # noqa: E731
    grid = np.concatenate([[0.0], upper * np.logspace(-10, 0, n_grid)])
    df = lambda t: hetvar_score(t, X, y, v)  # noqa: E731
    tau, ll, it, converged = _grid_then_refine(f, grid, tol, max_iter, score=df)
    ll0 = f(0.0)
    if ll0 >= ll:
        tau, ll = 0.0, ll0
    ll, beta, L, w = _hetvar_eval(tau, X, y, v)
    Linv = scipy.linalg.solve_triangular(L, np.eye(p), lower=True)
    cov = Linv.T @ Linv
    cov = 0.5 * (cov + cov.T)
    return HetVarMixedFit(
        fixed_coefficients=beta, tau_q_sq=float(tau), coefficient_covariance=cov,
        converged=bool(converged), reml_loglik=float(ll), weights=w,
        design_labels=labels, upper=upper, iterations=it,
    )
