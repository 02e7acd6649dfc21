"""Toy multi-site trial generator.

Draws site features ``(B, L, Z)``, site random effects ``(u, q)`` and
participant data from the multilevel outcome model::

    y = alpha + (x - xbar_site) beta + B theta + L xi + u + e
        + T (delta + B phi + L eta + Z lambda + q)

with mediator reports ``z = Z + omega`` for treated participants only.
``B`` is latent; the observable dataset carries ``L`` as the single site
moderator. The latent values are returned separately in `SiteTruth`.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import TrialDataset, make_dataset, validate_dataset, write_participants_csv, write_sites_csv


def _psd(a, name):
    a = np.asarray(a, dtype=float)
    if not np.allclose(a, a.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(a).min() < -1e-12:
        raise ValueError(f"{name} must be positive semi-definite")


@dataclass(frozen=True)
class SimulationConfig:
    m: int = 500
    alpha: float = 1000.0
    beta: float = 3.0
    theta: float = 2.0
    xi: float = -0.5
    delta: float = 0.8
    phi: float = 0.5
    eta: float = 0.0
    lam: float = 1.0
    rho_z: float = 0.9
    sigma_sq: float = 1.0
    tau_u_sq: float = 0.100
    tau_q_sq: float = 0.020
    tau_uq: float = -0.015
    blz_cov: tuple = ((1.0, 0.0, -0.5), (0.0, 1.0, 0.0), (-0.5, 0.0, 1.0))
    x_var: float = 0.1
    site_size_shape: float = 1.0
    site_size_scale: float = 20.0
    min_site_size: int = 4
    treatment_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "blz_cov", tuple(tuple(float(v) for v in r) for r in self.blz_cov))
        _psd(self.blz_cov, "blz_cov")
        _psd([[self.tau_u_sq, self.tau_uq], [self.tau_uq, self.tau_q_sq]], "(u, q) covariance")
        if not 0 < self.rho_z < 1:
            raise ValueError("rho_z must lie in (0, 1)")
        if self.m < 1:
            raise ValueError("m must be positive")
        if not 0 < self.treatment_prob < 1:
            raise ValueError("treatment_prob must lie in (0, 1)")
        if self.min_site_size < 2:
            raise ValueError("min_site_size must be at least 2")
        if self.sigma_sq < 0 or self.x_var < 0:
            raise ValueError("variances must be non-negative")

    @property
    def within_report_var(self) -> float:
        """Per-report noise variance implied by the mediator ICC."""
        return self.blz_cov[2][2] * (1.0 - self.rho_z) / self.rho_z

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blz_cov"] = [list(r) for r in self.blz_cov]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        d = dict(d)
        if "blz_cov" in d:
            d["blz_cov"] = tuple(tuple(r) for r in d["blz_cov"])
        return cls(**d)


def default_toy_config(confounded: bool = True, **overrides) -> SimulationConfig:
    """The 500-site toy design; ``confounded`` switches ``phi`` between 0.5 and 0."""
    cfg = SimulationConfig(phi=0.5 if confounded else 0.0)
    return replace(cfg, **overrides) if overrides else cfg


@dataclass(frozen=True)
class SiteTruth:
    site_ids: tuple[str, ...]
    B: np.ndarray
    L: np.ndarray
    Z: np.ndarray
    u: np.ndarray
    q: np.ndarray
    true_effect: np.ndarray
    n: np.ndarray


@dataclass(frozen=True)
class SimulatedTrial:
    dataset: TrialDataset
    truth: SiteTruth
    config: SimulationConfig
    repaired_sites: tuple[str, ...] = field(default=())


def generate(cfg: SimulationConfig) -> SimulatedTrial:
    """Draw one trial. Bitwise reproducible for a fixed config (incl. seed).

    Site sizes are ``Gamma(shape, scale)`` rounded to the nearest integer
    and floored at ``min_site_size``. If Bernoulli assignment leaves an arm
    empty, the site's last participant is moved to that arm.
    """
    rng = np.random.default_rng(cfg.seed)
    m = cfg.m
    width = len(str(m))
    site_ids = tuple(f"s{j + 1:0{width}d}" for j in range(m))

    n = np.maximum(np.rint(rng.gamma(cfg.site_size_shape, cfg.site_size_scale, m)),
                   cfg.min_site_size).astype(int)
    blz = rng.multivariate_normal(np.zeros(3), np.array(cfg.blz_cov), size=m, method="eigh")
    uq = rng.multivariate_normal(np.zeros(2), [[cfg.tau_u_sq, cfg.tau_uq], [cfg.tau_uq, cfg.tau_q_sq]],
                                 size=m, method="eigh")
    B, L, Z = blz.T
    u, q = uq.T

    N = int(n.sum())
    idx = np.repeat(np.arange(m), n)
    starts = np.concatenate([[0], np.cumsum(n)[:-1]])
    x = rng.normal(0.0, math.sqrt(cfg.x_var), N)
    x = x - (np.bincount(idx, weights=x, minlength=m) / n)[idx]
    t = rng.binomial(1, cfg.treatment_prob, N)
    n_t = np.bincount(idx, weights=t, minlength=m)
    repaired = []
    for j in np.flatnonzero((n_t == 0) | (n_t == n)):
        last = starts[j] + n[j] - 1
        t[last] = 1 - t[last]
        repaired.append(site_ids[j])
    e = rng.normal(0.0, math.sqrt(cfg.sigma_sq), N)
    omega = rng.normal(0.0, math.sqrt(cfg.within_report_var), N)

    effect = cfg.delta + B * cfg.phi + L * cfg.eta + Z * cfg.lam + q
    y = (cfg.alpha + x * cfg.beta + (B * cfg.theta + L * cfg.xi + u)[idx]
         + t * effect[idx] + e)
    z = np.where(t == 1, Z[idx] + omega, np.nan)

    ds = make_dataset(np.array(site_ids, dtype=object)[idx], t, y, z, x[:, None],
                      site_ids=site_ids, moderators=L[:, None],
                      covariate_names=("x_1",), moderator_names=("l_1",))
    ds = validate_dataset(ds)
    truth = SiteTruth(site_ids, B, L, Z, u, q, effect, n)
    return SimulatedTrial(ds, truth, cfg, tuple(repaired))


def write_truth_csv(truth: SiteTruth, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "B", "L", "Z", "u", "q", "true_effect"])
        for j, s in enumerate(truth.site_ids):
            w.writerow([s] + [repr(float(a[j])) for a in
                              (truth.B, truth.L, truth.Z, truth.u, truth.q, truth.true_effect)])


def write_simulation(sim: SimulatedTrial, out_dir) -> dict[str, Path]:
    """Write participants.csv, sites.csv, truth.csv and config.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f for k, f in (("participants", "participants.csv"), ("sites", "sites.csv"),
                                      ("truth", "truth.csv"), ("config", "config.json"))}
    write_participants_csv(sim.dataset, paths["participants"])
    write_sites_csv(sim.dataset, paths["sites"])
    write_truth_csv(sim.truth, paths["truth"])
    paths["config"].write_text(json.dumps(sim.config.to_dict(), indent=2, sort_keys=True) + "\n",
                               encoding="utf-8")
    return paths
