"""Three-phase estimation of site-level mediation.

1. `phase1_local_effects`: regression-adjusted local impact per site, from
   site intercepts, pooled site-centered covariates and site-by-treatment
   interactions.
2. `phase2_control_blups`: random-intercept REML on the control arm; the
   BLUPs proxy unmeasured context.
3. `phase3_mediation`: site-level REML regression of local impacts on the
   site mean mediator report, optionally adjusting for the BLUPs and for
   measured moderators.

The coefficients reported for the BLUP and moderator columns in phase
three are not interpretable as causal moderation effects; only the
mediator slope is.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    MediatorMeans,
    SiteEffectTable,
    TrialDataset,
    stabilized_variance,
    validate_dataset,
)
from .regression import (
    MAIN_TOL,
    RandomInterceptFit,
    RankDeficientError,
    solve_full_rank,
    drop_collinear,
    reml_hetvar,
    reml_random_intercept,
)

log = logging.getLogger(__name__)

METHODS = (
    "naive", "blup_adjusted", "blup_adjusted_simex", "blup_adjusted_zeta1",
    "zeta2", "zeta2a", "zeta3",
)


@dataclass(frozen=True)
class SiteModerators:
    site_ids: tuple[str, ...]
    values: np.ndarray
    names: tuple[str, ...]

    def subset(self, site_ids):
        pos = {s: j for j, s in enumerate(self.site_ids)}
        return SiteModerators(tuple(site_ids), self.values[[pos[s] for s in site_ids]], self.names)


def site_moderators(d: TrialDataset) -> SiteModerators | None:
    d = validate_dataset(d)
    if d.moderators.shape[1] == 0:
        return None
    return SiteModerators(d.site_ids, d.moderators, d.moderator_names)


@dataclass(frozen=True)
class BlupTable:
    site_ids: tuple[str, ...]
    blup: np.ndarray
    raw_control_mean: np.ndarray
    fit: RandomInterceptFit

    def subset(self, site_ids):
        pos = {s: j for j, s in enumerate(self.site_ids)}
        ix = [pos[s] for s in site_ids]
        return replace(self, site_ids=tuple(site_ids), blup=self.blup[ix],
                       raw_control_mean=self.raw_control_mean[ix])


@dataclass(frozen=True)
class MediationFit:
    lambda_hat: float
    lambda_se: float
    tau_q_sq_hat: float
    method: str
    other_coefficients: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    converged: bool = True
    fit: object = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method tag {self.method!r}")


def _site_means(values, idx, m):
    n = np.bincount(idx, minlength=m).astype(float)
    if values.ndim == 1:
        return np.bincount(idx, weights=values, minlength=m) / n
    out = np.zeros((m, values.shape[1]))
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(idx, weights=values[:, c], minlength=m) / n
    return out


def centered_covariates(d: TrialDataset):
    """Covariates minus their site means, and the site means themselves."""
    xbar = _site_means(d.x, d.site_index, d.m)
    return d.x - xbar[d.site_index], xbar


def phase1_local_effects(d: TrialDataset, sigma_mode: str = "estimate") -> SiteEffectTable:
    """Local impact estimates from the saturated site-by-arm model.

    The fit is done by partialling the site-by-arm cell means out of the
    outcome and the centered covariates (an exact equivalent of the dummy
    regression). ``sigma_mode="fixed"`` uses ``sigma^2 = 1`` in the variance
    stabilization instead of the residual variance.
    """
    if sigma_mode not in ("estimate", "fixed"):
        raise ValueError("sigma_mode must be 'estimate' or 'fixed'")
    d = validate_dataset(d)
    m, idx, t = d.m, d.site_index, d.treatment.astype(np.intp)
    xc, _ = centered_covariates(d)
    N, k = xc.shape
    cell = 2 * idx + t
    ncell = np.bincount(cell, minlength=2 * m).astype(float)
    if np.any(ncell == 0):
        bad = [d.site_ids[j // 2] for j in np.flatnonzero(ncell == 0)]
        raise ValueError(f"site-by-treatment interaction inestimable for sites {bad}")
    ybar = np.bincount(cell, weights=d.y, minlength=2 * m) / ncell
    ytil = d.y - ybar[cell]
    dof = N - 2 * m - k
    if dof <= 0:
        raise ValueError(f"phase one has no residual degrees of freedom (N={N}, sites={m}, k={k})")
    if k:
        xbar_cell = _site_means(xc, cell, 2 * m)
        xtil = xc - xbar_cell[cell]
        beta, unscaled = solve_full_rank(xtil, ytil, d.covariate_names)
        resid = ytil - xtil @ beta
        diff = xbar_cell[1::2] - xbar_cell[0::2]
        adj = diff @ beta
        quad = np.einsum("ji,ik,jk->j", diff, unscaled, diff)
    else:
        beta = np.zeros(0)
        resid = ytil
        adj = quad = np.zeros(m)
    s2 = float(resid @ resid / dof)
    nT, nC = ncell[1::2], ncell[0::2]
    mu = (ybar[1::2] - ybar[0::2]) - adj
    S2 = s2 * (1.0 / nT + 1.0 / nC + quad)
    sigma_sq = s2 if sigma_mode == "estimate" else 1.0
    v = stabilized_variance(S2, sigma_sq, nT + nC, nT)
    return SiteEffectTable(
        site_ids=d.site_ids, local_effect=mu, raw_variance=S2, stabilized_variance=v,
        n_total=(nT + nC).astype(int), n_treated=nT.astype(int), sigma_sq=sigma_sq,
        residual_sigma_sq=s2, covariate_coefficients=beta,
    )


def phase2_control_blups(d: TrialDataset, include_moderators: bool = True,
                         include_covariate_site_means: bool = True) -> BlupTable:
    """BLUPs of site random intercepts fitted to control-arm outcomes only.

    Fixed part: intercept and site-centered covariates, plus the site
    moderators and/or the covariate site means when requested. Columns that
    are collinear with earlier ones (e.g. site means of pre-centered
    covariates, which are all zero) are dropped.
    """
    d = validate_dataset(d)
    xc, xbar = centered_covariates(d)
    ctl = d.treatment == 0
    idx = d.site_index[ctl]
    cols = [np.ones(int(ctl.sum()))]
    labels = ["intercept"]
    cols += [xc[ctl, c] for c in range(xc.shape[1])]
    labels += list(d.covariate_names)
    if include_moderators:
        cols += [d.moderators[idx, c] for c in range(d.moderators.shape[1])]
        labels += [f"site:{n}" for n in d.moderator_names]
    if include_covariate_site_means:
        cols += [xbar[idx, c] for c in range(xbar.shape[1])]
        labels += [f"mean:{n}" for n in d.covariate_names]
    X = np.column_stack(cols)
    X, labels, dropped = drop_collinear(X, labels, keep=("intercept",))
    if dropped:
        log.info("phase 2: dropped collinear columns %s", dropped)
    fit = reml_random_intercept(X, d.y[ctl], idx, labels=labels)
    if len(fit.groups) != d.m:
        raise ValueError("every site needs at least one control participant")
    raw = _site_means(d.y[ctl], idx, d.m)
    return BlupTable(d.site_ids, fit.blups, raw, fit)


def phase3_mediation(effects: SiteEffectTable, blups: BlupTable | None,
                     moderators: SiteModerators | None, mediator_means: MediatorMeans,
                     tol: float = MAIN_TOL) -> MediationFit:
    """Regress local impacts on the site mean mediator report.

    Design ``[1, blup?, moderators?, mediator]``, response the local
    effects, known variances the stabilized sampling variances, plus a
    random residual with variance ``tau_q^2`` fitted by REML. Sites without
    a mediator mean are dropped.
    """
    sites = list(effects.site_ids)
    for name, table in (("blups", blups), ("moderators", moderators)):
        if table is not None and set(table.site_ids) != set(sites):
            raise ValueError(f"site-set mismatch between effects and {name}")
    have = set(mediator_means.site_ids)
    missing = [s for s in sites if s not in have]
    if missing:
        log.warning("phase 3: dropping %d site(s) without a mediator mean: %s", len(missing), missing)
        sites = [s for s in sites if s in have]
    eff = effects.subset(sites)
    pos = {s: j for j, s in enumerate(mediator_means.site_ids)}
    zbar = np.asarray(mediator_means.mean, dtype=float)[[pos[s] for s in sites]]
    if np.ptp(zbar) == 0:
        raise ValueError("mediator has zero between-site variance; lambda is unidentified")

    cols, labels = [np.ones(len(sites))], ["intercept"]
    if blups is not None:
        cols.append(blups.subset(sites).blup)
        labels.append("cblup")
    if moderators is not None:
        mv = moderators.subset(sites).values
        cols += [mv[:, c] for c in range(mv.shape[1])]
        labels += [f"site:{n}" for n in moderators.names]
    cols.append(zbar)
    labels.append("mediator")
    X = np.column_stack(cols)
    X, labels, dropped = drop_collinear(X, labels, keep=("intercept", "mediator"))
    if "mediator" in dropped:
        raise RankDeficientError(["mediator"])
    fit = reml_hetvar(X, eff.local_effect, eff.stabilized_variance, labels=labels, tol=tol)
    other = {lab: float(c) for lab, c in zip(labels, fit.fixed_coefficients) if lab != "mediator"}
    diag = {"m": len(sites), "dropped_columns": dropped, "sigma_sq": effects.sigma_sq}
    return MediationFit(
        lambda_hat=fit.coef("mediator"), lambda_se=fit.se("mediator"),
        tau_q_sq_hat=fit.tau_q_sq, method="blup_adjusted" if blups is not None else "naive",
        other_coefficients=other, diagnostics=diag, converged=fit.converged, fit=fit,
    )


def _g(v) -> str:
    return f"{float(v):.12g}"


def write_phase_trace(path, effects: SiteEffectTable, blups: BlupTable | None = None,
                      fits: Sequence[MediationFit] = ()) -> None:
    """Audit file: one labelled block per phase, tab separated, 12 significant digits."""
    lines = ["[phase1]", f"sigma_sq\t{_g(effects.sigma_sq)}",
             f"residual_sigma_sq\t{_g(effects.residual_sigma_sq)}",
             "site_id\tlocal_effect\traw_variance\tstabilized_variance\tn_total\tn_treated"]
    for j, s in enumerate(effects.site_ids):
        lines.append("\t".join([s, _g(effects.local_effect[j]), _g(effects.raw_variance[j]),
                                _g(effects.stabilized_variance[j]), str(effects.n_total[j]),
                                str(effects.n_treated[j])]))
    if blups is not None:
        f = blups.fit
        lines += ["", "[phase2]", f"tau_u_sq\t{_g(f.tau_u_sq)}", f"sigma_e_sq\t{_g(f.sigma_e_sq)}",
                  "coefficient\testimate"]
        lines += [f"{lab}\t{_g(c)}" for lab, c in zip(f.design_labels, f.fixed_coefficients)]
        lines.append("site_id\tblup\tshrinkage\traw_control_mean")
        for j, s in enumerate(blups.site_ids):
            lines.append("\t".join([s, _g(blups.blup[j]), _g(f.blup_shrinkage[j]),
                                    _g(blups.raw_control_mean[j])]))
    for fit in fits:
        lines += ["", f"[phase3:{fit.method}]", f"tau_q_sq\t{_g(fit.tau_q_sq_hat)}",
                  "coefficient\testimate\tse"]
        hv = fit.fit
        if hv is not None:
            for i, lab in enumerate(hv.design_labels):
                lines.append(f"{lab}\t{_g(hv.fixed_coefficients[i])}\t"
                             f"{_g(math.sqrt(hv.coefficient_covariance[i, i]))}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
