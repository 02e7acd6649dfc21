import json
import math

import numpy as np
import pytest

from ecometric.attenuation import estimate_icc
from ecometric.simulation import (
    SimulationConfig,
    default_toy_config,
    generate,
    write_simulation,
)


def test_default_config_block():
    c = default_toy_config(True)
    assert c.phi == 0.5 and default_toy_config(False).phi == 0.0
    assert (c.alpha, c.beta, c.theta, c.xi, c.delta, c.eta, c.lam) == (1000, 3, 2, -0.5, 0.8, 0, 1)
    assert (c.rho_z, c.sigma_sq, c.x_var, c.treatment_prob, c.m) == (0.9, 1.0, 0.1, 0.5, 500)
    assert c.blz_cov == ((1, 0, -0.5), (0, 1, 0), (-0.5, 0, 1))
    assert (c.tau_u_sq, c.tau_uq, c.tau_q_sq) == (0.1, -0.015, 0.02)
    assert np.linalg.eigvalsh(np.array(c.blz_cov)).min() >= 0
    assert c.within_report_var == pytest.approx(1 / 9)


def test_psd_and_range_checks():
    with pytest.raises(ValueError):
        SimulationConfig(blz_cov=((1, 2, 0), (2, 1, 0), (0, 0, 1)))
    with pytest.raises(ValueError):
        SimulationConfig(tau_u_sq=0.01, tau_q_sq=0.01, tau_uq=0.5)
    with pytest.raises(ValueError):
        SimulationConfig(rho_z=1.0)


def test_degenerate_config_gives_constant_outcome():
    cfg = SimulationConfig(m=10, alpha=5.0, beta=0, theta=0, xi=0, delta=0, phi=0, eta=0, lam=0,
                           sigma_sq=0, tau_u_sq=0, tau_q_sq=0, tau_uq=0, seed=1)
    assert np.all(generate(cfg).dataset.y == 5.0)


def test_bitwise_reproducible_and_seed_sensitive():
    a = generate(default_toy_config(m=30, seed=5))
    b = generate(default_toy_config(m=30, seed=5))
    c = generate(default_toy_config(m=30, seed=6))
    assert a.dataset.equals(b.dataset)
    np.testing.assert_array_equal(a.truth.true_effect, b.truth.true_effect)
    assert not a.dataset.equals(c.dataset)


def test_structure_and_centering():
    sim = generate(default_toy_config(m=200, seed=7))
    d = sim.dataset
    assert d.site_ids == sim.truth.site_ids
    assert np.all(d.n_total >= 4)
    assert np.all(d.n_treated >= 1) and np.all(d.n_control >= 1)
    means = np.bincount(d.site_index, weights=d.x[:, 0]) / d.n_total
    assert np.max(np.abs(means)) < 1e-12
    assert np.all(np.isnan(d.z[d.treatment == 0]))
    assert not np.any(np.isnan(d.z[d.treatment == 1]))
    np.testing.assert_array_equal(d.moderators[:, 0], sim.truth.L)


def test_true_effect_formula():
    sim = generate(default_toy_config(m=50, seed=8))
    c, t = sim.config, sim.truth
    np.testing.assert_allclose(t.true_effect, c.delta + t.B * c.phi + t.L * c.eta + t.Z * c.lam + t.q)


def test_size_moments_and_icc():
    sim = generate(default_toy_config(seed=9))
    n = sim.dataset.n_total.astype(float)
    assert 18 <= n.mean() <= 22
    assert 0.8 <= n.var(ddof=1) / n.mean() ** 2 <= 1.2
    assert 0.85 <= estimate_icc(sim.dataset).icc <= 0.95


def test_zero_covariances_give_uncorrelated_features():
    cfg = default_toy_config(m=5000, blz_cov=((1, 0, 0), (0, 1, 0), (0, 0, 1)), seed=10,
                             site_size_scale=2.0)
    t = generate(cfg).truth
    r = np.corrcoef(np.vstack([t.B, t.L, t.Z]))
    assert np.max(np.abs(r[np.triu_indices(3, 1)])) < 0.05


def test_true_effect_mean_near_delta():
    t = generate(default_toy_config(seed=11)).truth
    se = t.true_effect.std(ddof=1) / math.sqrt(len(t.true_effect))
    assert abs(t.true_effect.mean() - 0.8) < 3 * se


def test_empty_arm_repair():
    cfg = default_toy_config(m=300, site_size_shape=1e6, site_size_scale=4e-6, seed=12)
    sim = generate(cfg)
    assert sim.repaired_sites
    assert np.all(sim.dataset.n_treated >= 1) and np.all(sim.dataset.n_control >= 1)


def test_writes_files_and_config_round_trip(tmp_path):
    sim = generate(default_toy_config(m=10, seed=13))
    paths = write_simulation(sim, tmp_path)
    assert set(paths) == {"participants", "sites", "truth", "config"}
    header = paths["truth"].read_text().splitlines()[0]
    assert header == "site_id,B,L,Z,u,q,true_effect"
    cfg = SimulationConfig.from_dict(json.loads(paths["config"].read_text()))
    assert cfg == sim.config
    assert len(paths["truth"].read_text().splitlines()) == 11
