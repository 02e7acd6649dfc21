import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecometric.analysis import make_estimator, run_analysis
from ecometric.resampling import jackknife, jackknife_se, write_replicate_dump
from ecometric.simulation import default_toy_config, generate


def site_stat_dataset(m=7, seed=0):
    return generate(default_toy_config(m=m, seed=seed)).dataset


def mean_moderator(d, rep):
    return float(d.moderators[:, 0].mean())


def test_constant_estimator_has_zero_se():
    res = jackknife(lambda d, r: 3.0, site_stat_dataset())
    assert res.se == 0.0
    assert res.replicates_run == 7 and res.replicates_failed == 0


def test_sample_mean_matches_textbook_formula():
    d = site_stat_dataset(m=9, seed=1)
    theta = d.moderators[:, 0]
    m = len(theta)
    loo = (theta.sum() - theta) / (m - 1)
    oracle = math.sqrt(np.sum((loo - loo.mean()) ** 2) * (m - 1) / m)
    res = jackknife(mean_moderator, d)
    assert res.se == pytest.approx(oracle, rel=1e-12)
    # for the mean the delete-one SE is the usual s / sqrt(m)
    assert res.se == pytest.approx(theta.std(ddof=1) / math.sqrt(m), rel=1e-10)
    assert res.full_estimate == pytest.approx(theta.mean())


def test_se_formula_uses_total_site_count():
    est = [1.0, 2.0, 4.0]
    assert jackknife_se(est, 10) == pytest.approx(9 * math.sqrt(np.var(est, ddof=1) / 10))


def test_subsample_is_seeded_and_deterministic():
    d = site_stat_dataset(m=20, seed=2)
    a = jackknife(mean_moderator, d, max_reps=6, seed=4)
    b = jackknife(mean_moderator, d, max_reps=6, seed=4)
    c = jackknife(mean_moderator, d, max_reps=6, seed=5)
    assert a.subsample_ids == b.subsample_ids and a.se == b.se
    assert a.subsample_ids != c.subsample_ids
    assert a.replicates_run == 6 and len(a.subsample_ids) == 6


@given(st.integers(0, 1000))
@settings(max_examples=10, deadline=None)
def test_full_subsample_equals_exhaustive(seed):
    d = site_stat_dataset(m=8, seed=3)
    full = jackknife(mean_moderator, d)
    sub = jackknife(mean_moderator, d, max_reps=8, seed=seed)
    assert sub.se == full.se
    np.testing.assert_array_equal(sub.per_replicate_estimates, full.per_replicate_estimates)


def test_order_of_execution_does_not_matter():
    d = site_stat_dataset(m=10, seed=4)

    def reversed_map(f, items):
        items = list(items)
        out = {i: f(x) for i, x in reversed(list(enumerate(items)))}
        return [out[i] for i in range(len(items))]

    a = jackknife(mean_moderator, d)
    b = jackknife(mean_moderator, d, map_func=reversed_map)
    assert a.se == b.se


def test_failed_replicates_excluded_and_budget():
    d = site_stat_dataset(m=8, seed=5)

    def flaky(ds, rep):
        if rep in (2, 5):
            raise ValueError("boom")
        return mean_moderator(ds, rep)

    res = jackknife(flaky, d)
    assert res.replicates_failed == 2
    assert np.isnan(res.per_replicate_estimates[[1, 4]]).all()
    good = res.per_replicate_estimates[res.converged]
    assert res.se == pytest.approx(jackknife_se(good, 8))

    def flakier(ds, rep):
        if rep in (1, 2, 3):
            return math.nan
        return 1.0

    with pytest.raises(RuntimeError, match="replicates failed"):
        jackknife(flakier, d)


def test_full_data_failure_and_small_m():
    with pytest.raises(ValueError):
        jackknife(lambda d, r: math.nan, site_stat_dataset())
    with pytest.raises(ValueError):
        jackknife(lambda d, r: 1.0, site_stat_dataset(m=3))


def test_replicate_dump(tmp_path):
    d = site_stat_dataset(m=5, seed=6)
    res = jackknife(mean_moderator, d)
    p = tmp_path / "dump.tsv"
    write_replicate_dump(p, res)
    lines = p.read_text().splitlines()
    assert lines[0] == "deleted_site\testimate\tconverged"
    assert [ln.split("\t")[0] for ln in lines[1:]] == list(d.site_ids)


def test_estimator_closure_reruns_every_phase():
    d = generate(default_toy_config(m=40, seed=7)).dataset
    est = make_estimator("zeta1")
    full = run_analysis(d, ("zeta1",)).fits["zeta1"].lambda_hat
    assert est(d, 0) == full
    dropped = d.drop_sites([d.site_ids[0]])
    assert est(dropped, 1) == pytest.approx(run_analysis(dropped, ("zeta1",)).fits["zeta1"].lambda_hat,
                                            abs=1e-3)


def test_simex_estimator_reseeds_per_replicate():
    from dataclasses import replace
    from ecometric.analysis import AnalysisOptions
    from ecometric.attenuation import SimexConfig
    d = generate(default_toy_config(m=40, seed=8)).dataset
    opts = replace(AnalysisOptions(), simex=SimexConfig(increment=0.1, num_points=20, seed=11))
    est = make_estimator("simex", opts)
    a = run_analysis(d, ("simex",), replace(opts, simex=SimexConfig(increment=0.1, num_points=20,
                                                                      seed=14))).fits["simex"]
    assert est(d, 3) == a.lambda_hat
