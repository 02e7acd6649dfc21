"""End-to-end estimators built from the three phases and the corrections.

`run_analysis` fits every requested method once on a dataset.
`make_estimator` returns a closure ``(dataset, replicate) -> lambda`` that
reruns the whole chain (phases, ICC, factors or the SIMEX ladder) and is
what the jackknife resamples.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .attenuation import (
    ICC_CEILING,
    ICC_FLOOR,
    DisattenuationFactors,
    IccEstimate,
    SimexConfig,
    SimexTrace,
    apply_disattenuation,
    disattenuation_factors,
    estimate_icc,
    simex,
)
from .data import MediatorMeans, SiteEffectTable, TrialDataset, mediator_site_means, validate_dataset
from .pipeline import (
    BlupTable,
    MediationFit,
    SiteModerators,
    phase1_local_effects,
    phase2_control_blups,
    phase3_mediation,
    site_moderators,
)
from .regression import MAIN_TOL, REPLICATE_TOL

# short names used on the command line -> method tags of the fits
SHORT_METHODS = {
    "naive": "naive", "blup": "blup_adjusted", "simex": "blup_adjusted_simex",
    "zeta1": "blup_adjusted_zeta1", "zeta2": "zeta2", "zeta2a": "zeta2a", "zeta3": "zeta3",
}
ALL_METHODS = tuple(SHORT_METHODS)


@dataclass(frozen=True)
class AnalysisOptions:
    sigma_mode: str = "estimate"
    icc_floor: float = ICC_FLOOR
    icc_ceiling: float = ICC_CEILING
    phase2_moderators: bool = True
    phase2_covariate_means: bool = True
    phase3_moderators: bool = True
    simex: SimexConfig = field(default_factory=SimexConfig)


@dataclass(frozen=True)
class PhaseInputs:
    effects: SiteEffectTable
    blups: BlupTable
    moderators: SiteModerators | None
    mediator: MediatorMeans
    pooled_within_var: float


def pooled_within_variance(mm: MediatorMeans) -> float:
    """Pooled within-site report variance; NaN when no site has two reports."""
    ok = mm.defined
    if not ok.any():
        return math.nan
    df = mm.n_reports[ok] - 1
    return float(np.sum(df * mm.within_variance[ok]) / np.sum(df))


def prepare(d: TrialDataset, opts: AnalysisOptions = AnalysisOptions()) -> PhaseInputs:
    d = validate_dataset(d)
    effects = phase1_local_effects(d, sigma_mode=opts.sigma_mode)
    blups = phase2_control_blups(d, include_moderators=opts.phase2_moderators,
                                 include_covariate_site_means=opts.phase2_covariate_means)
    mods = site_moderators(d) if opts.phase3_moderators else None
    mm = mediator_site_means(d, allow_missing=True)
    return PhaseInputs(effects, blups, mods, mm, pooled_within_variance(mm))


@dataclass
class AnalysisResult:
    fits: dict[str, MediationFit]
    icc: IccEstimate | None = None
    factors: DisattenuationFactors | None = None
    simex_trace: SimexTrace | None = None
    inputs: PhaseInputs | None = None
    seconds: dict[str, float] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)


def _factors(d, inputs, blup_fit, opts):
    icc = estimate_icc(d, opts.icc_floor, opts.icc_ceiling)
    eff = inputs.effects.subset(inputs.mediator.site_ids)
    return icc, disattenuation_factors(icc, eff, blup_fit.tau_q_sq_hat)


def run_analysis(d: TrialDataset, methods=ALL_METHODS, opts: AnalysisOptions = AnalysisOptions(),
                 tol: float = MAIN_TOL, seed_offset: int = 0, timer=None,
                 raise_errors: bool = True) -> AnalysisResult:
    """Fit each short method name in ``methods``.

    With ``raise_errors=False`` a failing method is recorded in
    ``errors`` (keyed by short name, prefixed with the failing phase)
    instead of aborting the run.
    """
    clock = timer or time.perf_counter
    bad = [m for m in methods if m not in SHORT_METHODS]
    if bad:
        raise ValueError(f"unknown method(s) {bad}; choose from {list(SHORT_METHODS)}")
    if not methods:
        raise ValueError("at least one method must be selected")
    res = AnalysisResult({})
    t0 = clock()
    try:
        d = validate_dataset(d)
        inputs = prepare(d, opts)
    except Exception as exc:
        if raise_errors:
            raise
        for m in methods:
            res.errors[m] = f"phases 1-2: {exc}"
        return res
    res.inputs = inputs
    shared = clock() - t0
    cache: dict[str, MediationFit] = {}

    def run(name):
        if name == "naive":
            return phase3_mediation(inputs.effects, None, inputs.moderators, inputs.mediator, tol=tol)
        if "blup" not in cache:
            cache["blup"] = phase3_mediation(inputs.effects, inputs.blups, inputs.moderators,
                                             inputs.mediator, tol=tol)
        blup = cache["blup"]
        if name == "blup":
            return blup
        if name == "simex":
            if not math.isfinite(inputs.pooled_within_var):
                raise ValueError("SIMEX needs at least one site with two or more mediator reports")
            cfg = replace(opts.simex, seed=opts.simex.seed + seed_offset)
            fit, trace = simex(inputs.effects, inputs.blups, inputs.moderators, inputs.mediator,
                               cfg, pooled_within_var=inputs.pooled_within_var)
            res.simex_trace = trace
            return fit
        if res.factors is None:
            res.icc, res.factors = _factors(d, inputs, blup, opts)
        return apply_disattenuation(blup, res.factors, name)

    phase = {"naive": "phase 3", "blup": "phase 3", "simex": "simex"}
    for name in methods:
        t1 = clock()
        try:
            res.fits[name] = run(name)
        except Exception as exc:
            if raise_errors:
                raise
            res.errors[name] = f"{phase.get(name, 'attenuation')}: {exc}"
        res.seconds[name] = clock() - t1 + shared
    return res


def make_estimator(method: str, opts: AnalysisOptions = AnalysisOptions(),
                   replicate_tol: float = REPLICATE_TOL, main_tol: float = MAIN_TOL):
    """Closure for `resampling.jackknife`: the full chain for one method.

    Replicates (``replicate > 0``) fit at ``replicate_tol``; SIMEX uses
    seed ``opts.simex.seed + replicate`` so every replicate draws its own
    noise ladder.
    """
    if method not in SHORT_METHODS:
        raise ValueError(f"unknown method {method!r}")

    def estimator(d: TrialDataset, replicate: int) -> float:
        tol = main_tol if replicate == 0 else replicate_tol
        r = run_analysis(d, (method,), opts, tol=tol, seed_offset=replicate)
        return r.fits[method].lambda_hat

    return estimator


def site_size_summary(effects: SiteEffectTable) -> tuple[float, float]:
    n = np.asarray(effects.n_total, dtype=float)
    return float(n.mean()), float(np.var(n, ddof=1) / n.mean() ** 2) if len(n) > 1 else math.nan
