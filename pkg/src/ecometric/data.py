"""Trial data containers, validation and CSV I/O.

A `TrialDataset` stores participant rows column-wise (numpy arrays, set
read-only) together with a site table. Raw datasets can be built from
records, arrays or CSV files; `validate_dataset` checks every invariant
and returns the canonical form used by the rest of the package, with sites
sorted lexicographically by identifier.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DatasetError(ValueError):
    """Validation failure. ``issues`` is a list of ``(row_index, message)``."""

    def __init__(self, issues):
        self.issues = list(issues)
        lines = [f"row {r}: {msg}" if r is not None else msg for r, msg in self.issues]
        super().__init__("invalid dataset:\n  " + "\n  ".join(lines))


@dataclass(frozen=True)
class ParticipantRecord:
    site_id: str
    treatment: int
    outcome: float
    mediator_report: float | None = None
    covariates: tuple[float, ...] = ()


@dataclass(frozen=True)
class SiteRecord:
    site_id: str
    moderators: tuple[float, ...] = ()
    n_total: int | None = None
    n_treated: int | None = None
    n_control: int | None = None


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TrialDataset:
    participant_site: np.ndarray
    treatment: np.ndarray
    y: np.ndarray
    z: np.ndarray
    x: np.ndarray
    site_ids: tuple[str, ...]
    moderators: np.ndarray
    covariate_names: tuple[str, ...] = ()
    moderator_names: tuple[str, ...] = ()
    sites: tuple[SiteRecord, ...] = ()
    site_index: np.ndarray | None = None
    validated: bool = False
    notes: tuple[str, ...] = field(default=(), compare=False)

    @property
    def m(self) -> int:
        return len(self.site_ids)

    @property
    def n_participants(self) -> int:
        return len(self.y)

    @property
    def n_total(self) -> np.ndarray:
        return np.array([s.n_total for s in self.sites])

    @property
    def n_treated(self) -> np.ndarray:
        return np.array([s.n_treated for s in self.sites])

    @property
    def n_control(self) -> np.ndarray:
        return np.array([s.n_control for s in self.sites])

    def records(self) -> list[ParticipantRecord]:
        out = []
        for i in range(self.n_participants):
            z = None if math.isnan(self.z[i]) else float(self.z[i])
            out.append(ParticipantRecord(str(self.participant_site[i]), int(self.treatment[i]),
                                         float(self.y[i]), z, tuple(map(float, self.x[i]))))
        return out

    def drop_sites(self, site_ids: Iterable[str]) -> "TrialDataset":
        """Return a validated copy with the given sites removed."""
        drop = set(site_ids)
        keep_sites = [i for i, s in enumerate(self.site_ids) if s not in drop]
        if self.validated:
            # removing whole sites cannot break any row-level invariant
            keep_rows = np.isin(self.site_index, keep_sites)
            remap = np.full(self.m, -1, dtype=np.intp)
            remap[keep_sites] = np.arange(len(keep_sites))
            if len(keep_sites) < 3:
                raise DatasetError([(None, f"need at least 3 sites, got {len(keep_sites)}")])
            return TrialDataset(
                participant_site=_frozen(self.participant_site[keep_rows], object),
                treatment=_frozen(self.treatment[keep_rows], np.int8),
                y=_frozen(self.y[keep_rows]), z=_frozen(self.z[keep_rows]),
                x=_frozen(self.x[keep_rows]), site_ids=tuple(self.site_ids[i] for i in keep_sites),
                moderators=_frozen(self.moderators[keep_sites]),
                covariate_names=self.covariate_names, moderator_names=self.moderator_names,
                sites=tuple(self.sites[i] for i in keep_sites),
                site_index=_frozen(remap[self.site_index[keep_rows]], np.intp),
                validated=True, notes=self.notes,
            )
        keep_rows = ~np.isin(self.participant_site, list(drop))
        raw = TrialDataset(
            participant_site=self.participant_site[keep_rows],
            treatment=self.treatment[keep_rows], y=self.y[keep_rows], z=self.z[keep_rows],
            x=self.x[keep_rows], site_ids=tuple(self.site_ids[i] for i in keep_sites),
            moderators=self.moderators[keep_sites],
            covariate_names=self.covariate_names, moderator_names=self.moderator_names,
        )
        return validate_dataset(raw)

    def equals(self, other: "TrialDataset") -> bool:
        def same(a, b):
            return a.shape == b.shape and np.array_equal(a, b, equal_nan=a.dtype.kind == "f")
        return (
            self.site_ids == other.site_ids and self.sites == other.sites
            and self.covariate_names == other.covariate_names
            and self.moderator_names == other.moderator_names
            and all(same(getattr(self, k), getattr(other, k))
                    for k in ("participant_site", "treatment", "y", "z", "x", "moderators"))
        )


def make_dataset(site, treatment, y, z=None, x=None, site_ids=None, moderators=None,
                 covariate_names=None, moderator_names=None,
                 site_records: Sequence[SiteRecord] | None = None) -> TrialDataset:
    """Assemble an unvalidated dataset from column arrays."""
    site = np.array([str(s) for s in site], dtype=object)
    n = len(site)
    treatment = np.asarray(treatment)
    y = np.asarray(y, dtype=float)
    z = np.full(n, np.nan) if z is None else np.array(
        [np.nan if v is None else v for v in z], dtype=float)
    x = np.zeros((n, 0)) if x is None else np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if site_records is not None:
        site_ids = [s.site_id for s in site_records]
        mods = [s.moderators for s in site_records]
        p = len(mods[0]) if mods else 0
        moderators = np.array(mods, dtype=float).reshape(len(mods), p)
    if site_ids is None:
        site_ids = sorted(set(site.tolist()))
    site_ids = tuple(str(s) for s in site_ids)
    if moderators is None:
        moderators = np.zeros((len(site_ids), 0))
    moderators = np.asarray(moderators, dtype=float)
    if moderators.ndim == 1:
        moderators = moderators[:, None]
    covariate_names = tuple(covariate_names) if covariate_names is not None else tuple(
        f"x_{i + 1}" for i in range(x.shape[1]))
    moderator_names = tuple(moderator_names) if moderator_names is not None else tuple(
        f"l_{i + 1}" for i in range(moderators.shape[1]))
    return TrialDataset(
        participant_site=_frozen(site, object), treatment=_frozen(treatment, object),
        y=_frozen(y), z=_frozen(z), x=_frozen(x), site_ids=site_ids,
        moderators=_frozen(moderators), covariate_names=covariate_names,
        moderator_names=moderator_names, sites=tuple(site_records or ()),
    )


def from_records(participants: Sequence[ParticipantRecord],
                 sites: Sequence[SiteRecord] | None = None, **names) -> TrialDataset:
    lengths = {len(p.covariates) for p in participants}
    k = lengths.pop() if len(lengths) == 1 else None
    cov = [tuple(p.covariates) for p in participants]
    if k is None:
        # kept ragged so validation can report the offending rows
        x = np.empty(len(participants), dtype=object)
        x[:] = cov
    else:
        x = np.array(cov, dtype=float).reshape(len(participants), k)
    ds = make_dataset(
        [p.site_id for p in participants], [p.treatment for p in participants],
        [p.outcome for p in participants], [p.mediator_report for p in participants],
        x=None if k is None else x, site_records=sites, **names)
    if k is None:
        object.__setattr__(ds, "x", x)
    return ds


def validate_dataset(raw: TrialDataset, drop_invalid_sites: bool = False,
                     min_sites: int = 3) -> TrialDataset:
    """Check all dataset invariants and return the canonical validated form.

    Errors are collected and raised together as a `DatasetError`. With
    ``drop_invalid_sites`` a site whose treatment or control arm is empty is
    removed (recorded in ``notes``) instead of failing.
    """
    if raw.validated:
        return raw
    issues: list[tuple[int | None, str]] = []
    n = len(raw.y)

    x = raw.x
    if x.dtype == object:
        lens = [len(r) for r in x]
        k = max(set(lens), key=lens.count)
        for i, L in enumerate(lens):
            if L != k:
                issues.append((i, f"covariate-length mismatch: {L} values, expected {k}"))
        x = np.zeros((n, k))
    trt = np.full(n, -1, dtype=np.int8)
    for i, t in enumerate(raw.treatment):
        try:
            tv = float(t)
        except (TypeError, ValueError):
            tv = math.nan
        if tv not in (0.0, 1.0):
            issues.append((i, f"treatment must be 0 or 1, got {t!r}"))
        else:
            trt[i] = int(tv)
    for i in np.flatnonzero(~np.isfinite(raw.y)):
        issues.append((int(i), "missing outcome"))
    if x.size and not np.all(np.isfinite(x)):
        for i in np.flatnonzero(~np.all(np.isfinite(x), axis=1)):
            issues.append((int(i), "missing covariate value"))
    for i in np.flatnonzero((trt == 0) & ~np.isnan(raw.z)):
        issues.append((int(i), "control-arm mediator report"))

    known = set(raw.site_ids)
    if len(known) != len(raw.site_ids):
        issues.append((None, "duplicate site_id in site table"))
    for i, s in enumerate(raw.participant_site):
        if s not in known:
            issues.append((i, f"unknown site_id {s!r}"))
    present = set(raw.participant_site.tolist())
    for s in raw.site_ids:
        if s not in present:
            issues.append((None, f"site {s!r} has no participants"))
    if raw.moderators.shape[0] != len(raw.site_ids):
        issues.append((None, "moderator table does not match site table"))
    elif raw.moderators.size and not np.all(np.isfinite(raw.moderators)):
        issues.append((None, "missing moderator value"))
    if issues:
        raise DatasetError(issues)

    order = sorted(range(len(raw.site_ids)), key=lambda i: raw.site_ids[i])
    site_ids = [raw.site_ids[i] for i in order]
    moderators = raw.moderators[order]
    pos = {s: j for j, s in enumerate(site_ids)}
    idx = np.array([pos[s] for s in raw.participant_site], dtype=np.intp)
    m = len(site_ids)
    n_tot = np.bincount(idx, minlength=m)
    n_trt = np.bincount(idx, weights=trt, minlength=m).astype(int)
    n_ctl = n_tot - n_trt

    provided = {s.site_id: s for s in raw.sites}
    notes = list(raw.notes)
    bad = [j for j in range(m) if n_trt[j] == 0 or n_ctl[j] == 0]
    if bad and drop_invalid_sites:
        notes += [f"dropped site {site_ids[j]!r}: site has empty arm" for j in bad]
        keep = np.isin(idx, bad, invert=True)
        trimmed = TrialDataset(
            participant_site=raw.participant_site[keep], treatment=trt[keep].astype(object),
            y=raw.y[keep], z=raw.z[keep], x=x[keep],
            site_ids=tuple(s for j, s in enumerate(site_ids) if j not in bad),
            moderators=np.delete(moderators, bad, axis=0),
            covariate_names=raw.covariate_names, moderator_names=raw.moderator_names,
            notes=tuple(notes),
        )
        return validate_dataset(trimmed, drop_invalid_sites=False, min_sites=min_sites)
    for j in bad:
        arm = "treatment" if n_trt[j] == 0 else "control"
        issues.append((None, f"site {site_ids[j]!r} has empty arm ({arm})"))
    for j, s in enumerate(site_ids):
        rec = provided.get(s)
        if rec is None:
            continue
        for name, got in (("n_total", n_tot[j]), ("n_treated", n_trt[j]), ("n_control", n_ctl[j])):
            want = getattr(rec, name)
            if want is not None and want != got:
                issues.append((None, f"site {s!r}: {name}={want} disagrees with participant rows ({got})"))
    if m < min_sites:
        issues.append((None, f"need at least {min_sites} sites, got {m}"))
    if issues:
        raise DatasetError(issues)

    sites = tuple(
        SiteRecord(s, tuple(map(float, moderators[j])), int(n_tot[j]), int(n_trt[j]), int(n_ctl[j]))
        for j, s in enumerate(site_ids)
    )
    return TrialDataset(
        participant_site=_frozen(raw.participant_site, object), treatment=_frozen(trt, np.int8),
        y=_frozen(raw.y), z=_frozen(raw.z), x=_frozen(x), site_ids=tuple(site_ids),
        moderators=_frozen(moderators), covariate_names=raw.covariate_names,
        moderator_names=raw.moderator_names, sites=sites, site_index=_frozen(idx, np.intp),
        validated=True, notes=tuple(notes),
    )


@dataclass(frozen=True)
class MediatorMeans:
    """Per-site treated-arm mediator summaries; ``within_variance`` is NaN
    where a site has fewer than two reports."""

    site_ids: tuple[str, ...]
    mean: np.ndarray
    within_variance: np.ndarray
    n_reports: np.ndarray

    @property
    def defined(self) -> np.ndarray:
        return self.n_reports >= 2


def mediator_site_means(d: TrialDataset, allow_missing: bool = False) -> MediatorMeans:
    """Mean and sample variance of treated-arm mediator reports per site.

    Sites with no report raise, unless ``allow_missing`` is set, in which
    case they are left out of the result.
    """
    d = validate_dataset(d)
    has = (d.treatment == 1) & ~np.isnan(d.z)
    idx = d.site_index[has]
    z = d.z[has]
    n = np.bincount(idx, minlength=d.m)
    missing = [d.site_ids[j] for j in np.flatnonzero(n == 0)]
    if missing and not allow_missing:
        raise ValueError(f"sites with zero treated mediator reports: {', '.join(missing)}")
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.bincount(idx, weights=z, minlength=d.m) / n
        dev = z - mean[idx]
        ss = np.bincount(idx, weights=dev * dev, minlength=d.m)
        within = np.where(n >= 2, ss / np.maximum(n - 1, 1), np.nan)
    keep = n > 0
    ids = tuple(s for s, k in zip(d.site_ids, keep) if k)
    return MediatorMeans(ids, _frozen(mean[keep]), _frozen(within[keep]), _frozen(n[keep], int))


@dataclass(frozen=True)
class SiteEffectTable:
    """Phase-one output: one row per site, sorted by site id.

    ``stabilized_variance`` averages the model-based variance with the
    expected variance ``sigma_sq / (n p (1-p))``.
    """

    site_ids: tuple[str, ...]
    local_effect: np.ndarray
    raw_variance: np.ndarray
    stabilized_variance: np.ndarray
    n_total: np.ndarray
    n_treated: np.ndarray
    sigma_sq: float
    residual_sigma_sq: float
    covariate_coefficients: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def m(self) -> int:
        return len(self.site_ids)

    def subset(self, site_ids: Sequence[str]) -> "SiteEffectTable":
        pos = {s: j for j, s in enumerate(self.site_ids)}
        ix = [pos[s] for s in site_ids]
        return replace(self, site_ids=tuple(site_ids), local_effect=self.local_effect[ix],
                       raw_variance=self.raw_variance[ix],
                       stabilized_variance=self.stabilized_variance[ix],
                       n_total=self.n_total[ix], n_treated=self.n_treated[ix])


def stabilized_variance(raw_variance, sigma_sq, n_total, n_treated):
    """``(S^2 + sigma^2 / (n p (1 - p))) / 2`` with ``p`` the site's treated share."""
    n_total = np.asarray(n_total, dtype=float)
    p = np.asarray(n_treated, dtype=float) / n_total
    return (np.asarray(raw_variance, dtype=float) + sigma_sq / (n_total * p * (1 - p))) / 2


# ---------------------------------------------------------------------------
# CSV


def _num(text: str, what: str, row: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise DatasetError([(row, f"cannot parse {what} {text!r}")]) from None


def read_participants_csv(path, sites_path=None) -> TrialDataset:
    """Read ``site_id,treatment,y,z,x_1..x_k`` (and optionally ``site_id,l_1..l_p``)."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:4] != ["site_id", "treatment", "y", "z"]:
            raise DatasetError([(None, f"{path}: header must start with site_id,treatment,y,z")])
        cov_names = header[4:]
        site, trt, y, z, x = [], [], [], [], []
        for r, row in enumerate(reader):
            if len(row) != len(header):
                raise DatasetError([(r, f"expected {len(header)} fields, got {len(row)}")])
            site.append(row[0])
            trt.append(_num(row[1], "treatment", r))
            y.append(math.nan if row[2] == "" else _num(row[2], "outcome", r))
            z.append(None if row[3] == "" else _num(row[3], "mediator", r))
            x.append([math.nan if v == "" else _num(v, "covariate", r) for v in row[4:]])
    site_ids = moderators = mod_names = None
    if sites_path is not None:
        sites_path = Path(sites_path)
        with sites_path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:1] != ["site_id"]:
                raise DatasetError([(None, f"{sites_path}: header must start with site_id")])
            mod_names = header[1:]
            site_ids, moderators = [], []
            for r, row in enumerate(reader):
                site_ids.append(row[0])
                moderators.append([math.nan if v == "" else _num(v, "moderator", r) for v in row[1:]])
        moderators = np.array(moderators, dtype=float).reshape(len(site_ids), len(mod_names))
    return make_dataset(site, trt, y, z, np.array(x, dtype=float).reshape(len(y), len(cov_names)),
                        site_ids=site_ids, moderators=moderators, covariate_names=cov_names,
                        moderator_names=mod_names)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_participants_csv(d: TrialDataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "treatment", "y", "z", *d.covariate_names])
        for i in range(d.n_participants):
            z = "" if math.isnan(d.z[i]) else _fmt(d.z[i])
            w.writerow([d.participant_site[i], int(d.treatment[i]), _fmt(d.y[i]), z,
                        *(_fmt(v) for v in d.x[i])])


def write_sites_csv(d: TrialDataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", *d.moderator_names])
        for j, s in enumerate(d.site_ids):
            w.writerow([s, *(_fmt(v) for v in d.moderators[j])])
