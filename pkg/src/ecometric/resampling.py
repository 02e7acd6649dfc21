"""Delete-one-site jackknife."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .data import TrialDataset, validate_dataset

Estimator = Callable[[TrialDataset, int], float]


@dataclass(frozen=True)
class JackknifeResult:
    point_estimate_mean: float
    se: float
    replicates_run: int
    replicates_failed: int
    per_replicate_estimates: np.ndarray
    deleted_sites: tuple[str, ...]
    m: int
    full_estimate: float = math.nan
    subsample_ids: tuple[str, ...] | None = None

    @property
    def converged(self) -> np.ndarray:
        return np.isfinite(self.per_replicate_estimates)


def jackknife_se(estimates, m: int) -> float:
    """``(m - 1) * sqrt(s^2 / m)`` with ``s^2`` the sample variance of the
    replicate estimates. Uses the total site count ``m`` even when only a
    subsample of sites was deleted."""
    est = np.asarray(estimates, dtype=float)
    if len(est) < 2:
        return math.nan
    return float((m - 1) * math.sqrt(np.var(est, ddof=1) / m))


def jackknife(estimator: Estimator, d: TrialDataset, max_reps: int | None = None,
              seed: int = 0, max_failure_rate: float = 0.25, map_func=map) -> JackknifeResult:
    """Jackknife standard error of an end-to-end estimator.

    ``estimator(dataset, replicate)`` must rerun the whole analysis on the
    dataset it is given; ``replicate`` is 0 for the full data and ``1..R``
    for the delete-one replicates (used e.g. to derive per-replicate SIMEX
    seeds). When ``max_reps`` is below the number of sites, a simple random
    sample of ``max_reps`` sites (seeded) is deleted one at a time.
    Replicates that raise or return a non-finite value are excluded.
    """
    d = validate_dataset(d)
    m = d.m
    if m < 4:
        raise ValueError(f"jackknife needs at least 4 sites, got {m}")
    full = float(estimator(d, 0))
    if not math.isfinite(full):
        raise ValueError("estimator failed on the full dataset")
    subsample = None
    if max_reps is None or max_reps >= m:
        drop = list(d.site_ids)
    else:
        rng = np.random.default_rng(seed)
        chosen = np.sort(rng.choice(m, size=max_reps, replace=False))
        drop = [d.site_ids[j] for j in chosen]
        subsample = tuple(drop)

    def one(item):
        rep, site = item
        try:
            return float(estimator(d.drop_sites([site]), rep))
        except Exception:  # noqa: BLE001 - any failing replicate is counted, not fatal
            return math.nan

    est = np.array(list(map_func(one, list(enumerate(drop, start=1)))), dtype=float)
    ok = np.isfinite(est)
    failed = int(np.sum(~ok))
    if failed > max_failure_rate * len(drop):
        raise RuntimeError(f"jackknife: {failed} of {len(drop)} replicates failed")
    good = est[ok]
    return JackknifeResult(
        point_estimate_mean=float(good.mean()), se=jackknife_se(good, m),
        replicates_run=len(drop), replicates_failed=failed, per_replicate_estimates=est,
        deleted_sites=tuple(drop), m=m, full_estimate=full, subsample_ids=subsample,
    )


def write_replicate_dump(path, result: JackknifeResult) -> None:
    lines = ["deleted_site\testimate\tconverged"]
    for s, e in zip(result.deleted_sites, result.per_replicate_estimates):
        lines.append(f"{s}\t{e:.12g}\t{int(math.isfinite(e))}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
