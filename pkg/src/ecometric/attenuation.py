"""Corrections for measurement error in an ecometric mediator.

The site mean of treated participants' reports is a noisy proxy for the
site's true mediator value, which biases the phase-three slope toward
zero. Two remedies are provided:

* closed-form disattenuation factors (`disattenuation_factors`), which
  depend on the mediator ICC, the site sample-size distribution and the
  fitted impact variance; and
* SIMEX (`simex`): add extra noise in known increments, track how the
  slope decays and extrapolate a quadratic back to zero noise.

The factors are derived assuming no moderation by contextual factors.
They are applied regardless of the fitted moderator coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .data import MediatorMeans, SiteEffectTable, TrialDataset, validate_dataset
from .pipeline import (
    BlupTable,
    MediationFit,
    SiteModerators,
    phase3_mediation,
)
from .regression import REPLICATE_TOL, ols, reml_random_intercept

ICC_FLOOR = 0.005
ICC_CEILING = 0.995
UNRELIABLE_ZETA = 50.0


@dataclass(frozen=True)
class IccEstimate:
    icc: float
    between_var: float
    within_var: float
    floor: float = ICC_FLOOR
    ceiling: float = ICC_CEILING
    n_sites_used: int = 0
    unbounded: float = math.nan
    clamped: bool = False


def estimate_icc(d: TrialDataset, floor: float = ICC_FLOOR,
                 ceiling: float = ICC_CEILING) -> IccEstimate:
    """Intraclass correlation of treated-arm mediator reports.

    Fits an intercept-only random intercept model by REML to the reports of
    sites with at least two of them, then clamps the ratio
    ``between / (between + within)`` into ``[floor, ceiling]``. With no
    within-site spread at all the ICC is set to the ceiling.
    """
    if not 0 < floor <= ceiling < 1:
        raise ValueError("ICC bounds must satisfy 0 < floor <= ceiling < 1")
    d = validate_dataset(d)
    has = (d.treatment == 1) & ~np.isnan(d.z)
    idx = d.site_index[has]
    z = d.z[has]
    counts = np.bincount(idx, minlength=d.m)
    use = counts[idx] >= 2
    idx, z = idx[use], z[use]
    n_used = int(np.sum(counts >= 2))
    if n_used < 3:
        raise ValueError(f"ICC needs at least 3 sites with 2+ mediator reports, got {n_used}")
    if np.ptp(z) == 0:
        raise ValueError("mediator reports have zero total variance")
    means = np.bincount(idx, weights=z, minlength=d.m)[counts >= 2] / counts[counts >= 2]
    within_ss = float(np.sum((z - (np.bincount(idx, weights=z, minlength=d.m)
                                   / np.maximum(counts, 1))[idx]) ** 2))
    if within_ss <= 0:
        between = float(np.var(means, ddof=1))
        return IccEstimate(ceiling, between, 0.0, floor, ceiling, n_used, 1.0, True)
    fit = reml_random_intercept(np.ones((len(z), 1)), z, idx, labels=("intercept",))
    raw = fit.tau_u_sq / (fit.tau_u_sq + fit.sigma_e_sq)
    icc = min(max(raw, floor), ceiling)
    return IccEstimate(icc, fit.tau_u_sq, fit.sigma_e_sq, floor, ceiling, n_used, raw, icc != raw)


@dataclass(frozen=True)
class DisattenuationFactors:
    zeta1: float
    zeta2: float
    zeta2a: float
    zeta3: float
    icc: float
    n_bar: float
    n_harmonic: float
    v_n_sq: float
    tau_q_sq: float
    sigma_sq: float
    skew_assumption: str = "gamma"
    zeta1_harmonic: float = math.nan
    empirical_skew: float = math.nan
    unreliable: bool = False

    def get(self, which: str) -> float:
        return {"zeta1": self.zeta1, "zeta2": self.zeta2, "zeta2a": self.zeta2a,
                "zeta3": self.zeta3}[which]


def zeta_factors(icc: float, n_bar: float, v_n_sq: float, tau_q_sq: float,
                 sigma_sq: float) -> tuple[float, float, float, float]:
    """The four multiplicative corrections ``(zeta1, zeta2, zeta2a, zeta3)``.

    ``zeta3`` inverts the full third-order attenuation approximation with
    gamma-distributed site sizes (skewness ``2 * sqrt(v_n_sq)``)::

        c = tau + 4 s2 / n
        num = c^3 + tau^2 c V - 2 tau^3 V^2
        den = n c^3 - 4 tau s2 c V + 8 tau^2 s2 V^2
        zeta3 = 1 + k num / den,  k = 2 (1 - icc) / icc

    where ``V = v_n_sq``. The other three drop terms of this expression.
    """
    if not 0 < icc <= 1:
        raise ValueError(f"ICC must lie in (0, 1] to compute disattenuation factors, got {icc}")
    if not n_bar > 0:
        raise ValueError("mean site size must be positive")
    k = 2.0 * (1.0 - icc) / icc
    V, t, s2 = v_n_sq, tau_q_sq, sigma_sq
    zeta1 = 1.0 + k / n_bar
    zeta2 = 1.0 + k * (1.0 + V) / n_bar
    zeta2a = 1.0 + k * (1.0 + V - 2.0 * V * V) / n_bar
    c = t + 4.0 * s2 / n_bar
    num = c**3 + t * t * c * V - 2.0 * t**3 * V * V
    den = n_bar * c**3 - 4.0 * t * s2 * c * V + 8.0 * t * t * s2 * V * V
    zeta3 = 1.0 + k * num / den
    return zeta1, zeta2, zeta2a, zeta3


def disattenuation_factors(icc: IccEstimate | float, effects: SiteEffectTable,
                           tau_q_sq: float, sigma_sq: float | None = None) -> DisattenuationFactors:
    """Correction factors using the site sizes recorded in ``effects``.

    ``n_bar`` is the arithmetic mean total site size and ``v_n_sq`` the
    sample variance of site sizes over ``n_bar^2``. The harmonic-mean
    variant of ``zeta1`` and the empirical size skewness are reported but
    not used.
    """
    rho = icc.icc if isinstance(icc, IccEstimate) else float(icc)
    s2 = effects.sigma_sq if sigma_sq is None else sigma_sq
    n = np.asarray(effects.n_total, dtype=float)
    n_bar = float(n.mean())
    n_harm = float(len(n) / np.sum(1.0 / n))
    v_n_sq = float(np.var(n, ddof=1) / n_bar**2) if len(n) > 1 else 0.0
    z1, z2, z2a, z3 = zeta_factors(rho, n_bar, v_n_sq, tau_q_sq, s2)
    sd = n.std()
    skew = float(np.mean((n - n.mean()) ** 3) / sd**3) if sd > 0 else 0.0
    return DisattenuationFactors(
        z1, z2, z2a, z3, rho, n_bar, n_harm, v_n_sq, float(tau_q_sq), float(s2),
        zeta1_harmonic=1.0 + 2.0 * (1.0 - rho) / (n_harm * rho), empirical_skew=skew,
        unreliable=max(z1, z2, z2a, z3) > UNRELIABLE_ZETA,
    )


_CORRECTED_TAG = {"zeta1": "blup_adjusted_zeta1", "zeta2": "zeta2",
                  "zeta2a": "zeta2a", "zeta3": "zeta3"}


def apply_disattenuation(fit: MediationFit, factors: DisattenuationFactors,
                         which: str) -> MediationFit:
    """Scale the slope and (to first order) its SE by the chosen factor."""
    zeta = factors.get(which)
    diag = dict(fit.diagnostics, zeta=zeta, zeta_which=which, icc=factors.icc,
                n_bar=factors.n_bar, n_harmonic=factors.n_harmonic, v_n_sq=factors.v_n_sq,
                correction_unreliable=factors.unreliable)
    if fit.method == "naive":
        diag["corrected_from_naive"] = True
    return replace(fit, lambda_hat=fit.lambda_hat * zeta, lambda_se=fit.lambda_se * zeta,
                   method=_CORRECTED_TAG[which], diagnostics=diag)


# ---------------------------------------------------------------------------
# SIMEX


@dataclass(frozen=True)
class SimexConfig:
    increment: float = 0.004
    num_points: int = 500
    extrapolation_target: float = -1.0
    replicate_tolerance: float = REPLICATE_TOL
    seed: int = 0

    def __post_init__(self):
        if not self.increment > 0:
            raise ValueError("SIMEX increment must be positive")
        if self.num_points < 1:
            raise ValueError("SIMEX needs at least one noise level")
        if self.increment * self.num_points > 4 + 1e-12:
            raise ValueError("increment * num_points must not exceed 4")


@dataclass(frozen=True)
class SimexTrace:
    b: np.ndarray
    noise_level: np.ndarray
    lambda_b: np.ndarray
    converged: np.ndarray
    coefficients: np.ndarray
    target: float
    estimate: float
    n_failed: int = 0
    extra: dict = field(default_factory=dict)


def replicate_rng(seed: int, b: int) -> np.random.Generator:
    """Independent stream for noise level ``b``; parallel runs reproduce serial ones."""
    return np.random.default_rng([int(seed), int(b)])


def simex(effects: SiteEffectTable, blups: BlupTable | None,
          moderators: SiteModerators | None, mediator_means: MediatorMeans,
          cfg: SimexConfig = SimexConfig(), pooled_within_var: float | None = None,
          inner: Callable[[np.ndarray], tuple[float, bool]] | None = None,
          map_func=map):
    """SIMEX correction of the phase-three mediator slope.

    For ``b = 1..num_points`` each site mean gets independent Gaussian noise
    with variance ``b * increment * s2_j / n_j`` (``s2_j`` the site's own
    within-site report variance; ``pooled_within_var`` for sites with a
    single report) and the slope is refit. A quadratic in the noise level
    ``b * increment`` is fitted to the slopes and evaluated at
    ``extrapolation_target``.

    ``inner`` replaces the refit: it receives the perturbed site means and
    returns ``(slope, converged)``.
    Returns ``(MediationFit, SimexTrace)``.
    """
    within = np.asarray(mediator_means.within_variance, dtype=float)
    if np.any(np.isnan(within)):
        if pooled_within_var is None:
            raise ValueError("sites with a single mediator report need pooled_within_var")
        within = np.where(np.isnan(within), pooled_within_var, within)
    base_var = within / np.asarray(mediator_means.n_reports, dtype=float)
    zbar = np.asarray(mediator_means.mean, dtype=float)

    if inner is None:
        def inner(z):
            f = phase3_mediation(effects, blups, moderators, replace(mediator_means, mean=z),
                                 tol=cfg.replicate_tolerance)
            return f.lambda_hat, f.converged

    def one(b):
        level = b * cfg.increment
        noise = replicate_rng(cfg.seed, b).standard_normal(len(zbar))
        try:
            lam, ok = inner(zbar + noise * np.sqrt(base_var * level))
        except (ValueError, ArithmeticError, np.linalg.LinAlgError):
            lam, ok = math.nan, False
        return float(lam), bool(ok and math.isfinite(lam))

    bs = np.arange(1, cfg.num_points + 1)
    results = list(map_func(one, bs))
    lam = np.array([r[0] for r in results])
    ok = np.array([r[1] for r in results])
    n_failed = int(np.sum(~ok))
    if n_failed > 0.2 * cfg.num_points:
        raise RuntimeError(f"SIMEX: {n_failed} of {cfg.num_points} replicate fits failed")
    level = bs * cfg.increment
    design = np.column_stack([np.ones(ok.sum()), level[ok], level[ok] ** 2])
    quad = ols(design, lam[ok], labels=("pi0", "pi1", "pi2"))
    pi = quad.coefficients
    t = cfg.extrapolation_target
    est = float(pi[0] + pi[1] * t + pi[2] * t * t)
    trace = SimexTrace(bs, level, lam, ok, pi, t, est, n_failed)

    # no analytic SE or tau_q^2 for the extrapolant; the jackknife supplies the SE
    fit = MediationFit(
        lambda_hat=est, lambda_se=math.nan, tau_q_sq_hat=math.nan, method="blup_adjusted_simex",
        diagnostics={"m": len(zbar), "simex_failed": n_failed, "simex_points": cfg.num_points,
                     "simex_increment": cfg.increment, "adjusted_for_blups": blups is not None},
        converged=n_failed == 0,
    )
    return fit, trace


def write_simex_trace(path, trace: SimexTrace) -> None:
    """Tab-separated replicate rows followed by the quadratic coefficients."""
    lines = ["b\tnoise_level\tlambda_b\tconverged"]
    for b, lv, lam, ok in zip(trace.b, trace.noise_level, trace.lambda_b, trace.converged):
        lines.append(f"{int(b)}\t{lv:.12g}\t{lam:.12g}\t{int(ok)}")
    lines += ["", "[quadratic]", f"pi0\t{trace.coefficients[0]:.12g}",
              f"pi1\t{trace.coefficients[1]:.12g}", f"pi2\t{trace.coefficients[2]:.12g}",
              f"target\t{trace.target:.12g}", f"estimate\t{trace.estimate:.12g}",
              f"failed\t{trace.n_failed}"]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
