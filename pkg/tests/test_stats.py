import json
import math

import numpy as np
import pytest
from scipy import stats as sps

from meramdiff import stats as st
from meramdiff.markov import EpsDist, epsilon_distribution
from meramdiff.ddpm import make_letter_dataset


def test_constant_sequence_moments():
    m = st.moments(np.full(20, 3.0))
    assert m.std == 0.0 and m.mean == 3.0
    assert not m.higher_defined and math.isnan(m.skew) and math.isnan(m.excess_kurtosis)
    with pytest.raises(ValueError):
        st.moments([1.0] * 7)


def test_normal_moments(rng):
    m = st.moments(rng.standard_normal(100_000))
    assert abs(m.skew) < 0.05 and abs(m.excess_kurtosis) < 0.05
    assert m.std == pytest.approx(1.0, abs=0.01)
    assert set(m.to_dict()) == {"n", "mean", "std", "skew", "excess_kurtosis", "higher_defined"}


def test_triangular_kurtosis(coins, rng):
    law = epsilon_distribution(coins)
    # oracle: exact kurtosis of the discrete law, -0.6 in the continuum limit
    assert law.excess_kurtosis() == pytest.approx(-0.6, abs=1e-3)
    m = st.moments(law.sample(100_000, rng))
    assert m.excess_kurtosis == pytest.approx(-0.6, abs=0.05)


def test_chi2_rejection_rate_under_the_null(gauss_target):
    rng = np.random.default_rng(0)
    p = np.array([st.chi2_gof(gauss_target.sample(100_000, rng), gauss_target).p_value for _ in range(200)])
    # p-values roughly uniform, about 1% below 0.01
    assert (p < 0.01).mean() <= 0.04
    assert sps.kstest(p, "uniform").pvalue > 0.001


def test_triangular_is_rejected_against_the_gaussian(coins, gauss_target, rng):
    x = epsilon_distribution(coins).sample(40_000, rng)
    rep = st.chi2_gof(x, gauss_target)
    assert rep.p_value < 1e-6 and not rep.passed
    assert rep.dof == rep.notes["bins"] - 1


def test_chi2_input_checks(gauss_target):
    with pytest.raises(ValueError, match="aligned"):
        st.chi2_gof([0.001] * 10, gauss_target)
    with pytest.raises(ValueError, match="support"):
        st.chi2_gof([10.0] * 10, gauss_target)
    with pytest.raises(ValueError, match="bin"):
        st.chi2_gof([0.0] * 3, gauss_target)


def test_merge_bins_keeps_totals():
    e = np.array([1.0, 2.0, 6.0, 0.5, 5.0, 1.0])
    o = np.array([0, 3, 5, 1, 4, 2], dtype=float)
    me, mo = st.merge_bins(e, o)
    assert me.sum() == e.sum() and mo.sum() == o.sum()
    assert np.all(me >= 5)
    np.testing.assert_array_equal(me, [9.0, 6.5])


def test_ks_on_quantiles_is_tiny():
    n = 1000
    q = sps.norm.ppf((np.arange(n) + 0.5) / n)
    assert st.ks_statistic(q).statistic <= 1 / n


def test_ks_on_ideal_normal(rng):
    n = 10_000
    rep = st.ks_statistic(rng.standard_normal(n))
    assert rep.statistic < 1.63 / math.sqrt(n)
    assert rep.passed


def test_ks_discreteness_floor(gauss_target):
    # a perfect grid Gaussian: each point repeated in proportion to its mass
    x = np.repeat(gauss_target.support, np.rint(gauss_target.probs * 1e6).astype(int))
    rep = st.ks_statistic(x, grid_step=1 / 64)
    floor = rep.notes["discreteness_floor"]
    # the CDF jumps by step * pdf(0) ~ 0.0062 at 0; the normal CDF crosses it halfway
    assert floor == pytest.approx(0.5 / 64 / math.sqrt(2 * math.pi))
    assert rep.statistic == pytest.approx(floor, rel=1e-3)
    assert rep.notes["below_floor"] and not rep.passed
    json.dumps(rep.to_dict())


def test_ks_guards():
    with pytest.raises(ValueError):
        st.ks_statistic(np.zeros(10))
    with pytest.raises(ValueError):
        st.ks_statistic(np.zeros(100), sigma=0.0)


def test_serial_test_detects_sequential_draws(coins, rng):
    from meramdiff.markov import sample_chain, stationary

    eps = sample_chain(coins, 5000, rng, init=stationary(coins))[2]
    assert st.serial_permutation_test(eps, lag=1).p_value < 0.01
    iid = rng.standard_normal(5000)
    assert st.serial_permutation_test(iid, lag=1, seed=1).p_value > 0.01
    with pytest.raises(ValueError):
        st.serial_permutation_test([1.0, 2.0, 3.0], lag=2)


def test_mmd_null_case(rng):
    data = make_letter_dataset("U", 16, 120, flip=0.05, rng=1)
    idx = rng.permutation(120)
    rep = st.mmd2(data[idx[:60]], data[idx[60:]], seed=2)
    assert rep.p_value > 0.01
    assert abs(rep.mmd2) < 0.02
    scale = st.mmd2(data[:60], make_letter_dataset("L", 16, 60, flip=0.05, rng=2), rep.bandwidth).mmd2
    assert abs(rep.mmd2) < 0.1 * scale


def test_mmd_separates_letters():
    u = make_letter_dataset("U", 16, 40, flip=0.02, rng=3)
    letter_l = make_letter_dataset("L", 16, 40, flip=0.02, rng=4)
    rep = st.mmd2(u, letter_l, n_perm=200)
    assert rep.p_value < 0.005
    assert rep.mmd2 > 0


def test_mmd_guards(rng):
    a = rng.standard_normal((30, 4))
    with pytest.raises(ValueError):
        st.mmd2(a, rng.standard_normal((30, 5)))
    with pytest.raises(ValueError):
        st.mmd2(a[:10], a)
    with pytest.raises(ValueError):
        st.mmd2(a, a, n_perm=50)
    with pytest.raises(st.DegenerateInputError):
        st.mmd2(np.zeros((25, 4)), np.zeros((25, 4)))
    with pytest.raises(st.DegenerateInputError):
        st.median_bandwidth(np.ones((5, 2)))
    assert st.median_bandwidth(np.eye(3)) == pytest.approx(math.sqrt(2))


def test_fixed_bandwidth_is_used(rng):
    a, b = rng.standard_normal((25, 3)), rng.standard_normal((25, 3))
    assert st.mmd2(a, b, bandwidth=2.0).bandwidth == 2.0


def test_report_outputs(tmp_path, gauss_target, rng):
    rep = st.chi2_gof(gauss_target.sample(5000, rng), gauss_target)
    d = json.loads(rep.to_json())
    assert d["passed"] == rep.passed and d["dof"] == rep.dof
    assert rep.per_dof == pytest.approx(rep.statistic / rep.dof)
    st.write_reports_csv(tmp_path / "r.csv", [rep, rep])
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == ",".join(st.GofReport.CSV_FIELDS) and len(lines) == 3
    with pytest.raises(ValueError):
        st.write_reports_csv(tmp_path / "e.csv", [])
    mm = st.MmdReport(0.1, 1.0, 0.5, 20, 20, 200)
    st.write_reports_csv(tmp_path / "m.csv", [mm])
    assert (tmp_path / "m.csv").read_text().startswith("mmd2,bandwidth")
    assert math.isnan(st.GofReport("x", 1.0, 0.5, 10).per_dof)


def test_exact_eps_sampler_matches_its_own_law():
    law = EpsDist(1.0, np.array([0.25, 0.5, 0.25]))
    x = law.sample(20_000, np.random.default_rng(0))
    assert st.chi2_gof(x, law).passed
