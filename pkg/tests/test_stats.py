import csv
import math
from fractions import Fraction

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from fetalfit.fitting import ParameterMap
from fetalfit.stats import (REPORT_COLUMNS, StatsError, benjamini_hochberg, describe_feature,
                            histogram_mode, organ_ratio, rank_features, shapiro_wilk,
                            summarize_map, summarize_values, t_test, write_ranking_csv)
from fetalfit.volume_io import FeatureTable, SubjectRecord


def _records(n_ctrl, n_fgr):
    recs = [SubjectRecord(f"c{i}", "control", 30, 39, 9, 3.3) for i in range(n_ctrl)]
    return recs + [SubjectRecord(f"f{i}", "fgr", 30, 36, 6, 2.0) for i in range(n_fgr)]


def test_summary_hand_example():
    s = summarize_values([1, 2, 2, 9])
    assert (s.mean, s.median, s.min, s.max, s.variance) == (3.5, 2, 1, 9, 10.25)
    assert s.min <= s.mode <= s.max


def test_summary_constant_and_single(caplog):
    s = summarize_values(np.full(7, 2.5))
    assert s == (2.5, 2.5, 2.5, 2.5, 2.5, 0.0)
    s = summarize_values([4.0])
    assert s.variance == 0 and s.mode == 4.0
    assert "single" in caplog.text
    with pytest.raises(StatsError):
        summarize_values([np.nan])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40))
def test_summary_orderings(values):
    s = summarize_values(values)
    assert s.min <= s.median <= s.max
    assert s.min <= s.mode <= s.max
    assert s.variance >= 0


def test_mode_first_bin_tie():
    # two populated bins with equal counts: the lower wins
    assert histogram_mode([0, 0, 64, 64], bins=64) == pytest.approx(0.5)
    assert histogram_mode([0, 1, 1, 1, 64], bins=64) == pytest.approx(1.5)


def test_summarize_map_ignores_absent():
    data = np.full((2, 2, 1, 2), np.nan)
    data[0, 0, 0] = [1.0, 5.0]
    data[1, 0, 0] = [1.0, 7.0]
    pmap = ParameterMap("adc", "liver", ("S0", "ADC"), data, np.zeros((2, 2, 1)))
    assert summarize_map(pmap, "ADC").mean == 6.0
    mask = np.zeros((2, 2, 1), bool)
    mask[1, 0, 0] = True
    assert summarize_map(pmap, "ADC", mask).max == 7.0


def test_organ_ratio(caplog):
    assert organ_ratio(0.4, 0.2) == 2.0
    assert organ_ratio(-3.7, -3.7) == 1.0
    assert math.isnan(organ_ratio(1.0, 0.0))
    assert "zero denominator" in caplog.text
    assert math.isnan(organ_ratio(np.nan, 1.0))


def test_t_test_hand_example():
    r = t_test([1, 2, 3], [4, 5, 6])
    assert r.statistic == pytest.approx(-3 / math.sqrt(2 / 3), rel=1e-12)
    swapped = t_test([4, 5, 6], [1, 2, 3])
    assert swapped.statistic == -r.statistic and swapped.p_value == r.p_value
    same = t_test([1, 2, 4], [1, 2, 4])
    assert same.statistic == 0 and same.p_value == 1


def test_t_test_errors():
    with pytest.raises(StatsError):
        t_test([1], [1, 2])
    with pytest.raises(StatsError):
        t_test([2, 2], [3, 3, 3])
    with pytest.raises(StatsError):
        t_test([1, 2], [1, 2, 3], paired=True)


def _exact_t(a, b, pooled):
    a = [Fraction(x) for x in a]
    b = [Fraction(x) for x in b]
    na, nb = len(a), len(b)
    ma, mb = sum(a) / na, sum(b) / nb
    va = sum((x - ma) ** 2 for x in a) / (na - 1)
    vb = sum((x - mb) ** 2 for x in b) / (nb - 1)
    if pooled:
        sp2 = ((na - 1) * va + (nb - 1) * vb) / (na + nb - 2)
        t2 = (ma - mb) ** 2 / (sp2 * Fraction(1, na) + sp2 * Fraction(1, nb))
        df = Fraction(na + nb - 2)
    else:
        q = va / na + vb / nb
        t2 = (ma - mb) ** 2 / q
        df = q ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    return math.copysign(math.sqrt(t2), ma - mb), float(df)


small = st.lists(st.integers(-20, 20), min_size=2, max_size=5)


@settings(max_examples=150, deadline=None)
@given(small, small, st.booleans())
def test_t_test_exact_oracle(a, b, pooled):
    if len(set(a)) == 1 and len(set(b)) == 1:
        return
    r = t_test(a, b, pooled=pooled)
    t, df = _exact_t(a, b, pooled)
    assert r.statistic == pytest.approx(t, rel=1e-12, abs=1e-12)
    assert r.df == pytest.approx(df, rel=1e-12)
    ref = 2 * scipy.stats.t.sf(abs(t), df)
    assert r.p_value == pytest.approx(ref, rel=1e-9, abs=1e-14)
    assert 0 <= r.p_value <= 1


def test_paired():
    a = np.array([1.0, 2.5, 3.0, 5.0])
    b = np.array([0.5, 2.0, 3.2, 4.1])
    r = t_test(a, b, paired=True)
    ref = scipy.stats.ttest_rel(a, b)
    assert r.statistic == pytest.approx(ref.statistic, rel=1e-12)
    assert r.p_value == pytest.approx(ref.pvalue, rel=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 100).flatmap(lambda a: st.sampled_from([a, -a])), st.floats(-1e3, 1e3))
def test_t_test_affine_invariance(scale, shift):
    rng = np.random.default_rng(0)
    a, b = rng.normal(0, 1, 8), rng.normal(1, 2, 6)
    r0 = t_test(a, b)
    r1 = t_test(scale * a + shift, scale * b + shift)
    assert r1.p_value == pytest.approx(r0.p_value, rel=1e-6)
    assert r1.statistic == pytest.approx(math.copysign(1, scale) * r0.statistic, rel=1e-6)


def test_shapiro_matches_reference():
    for seed in range(20):
        x = np.random.default_rng(seed).standard_normal(12)
        r, ref = shapiro_wilk(x), scipy.stats.shapiro(x)
        assert r.statistic == pytest.approx(ref.statistic, abs=1e-6)
        assert r.p_value == pytest.approx(ref.pvalue, abs=1e-5)
    for n in (3, 5, 11, 30, 200):
        x = np.random.default_rng(n).exponential(size=n)
        r, ref = shapiro_wilk(x), scipy.stats.shapiro(x)
        assert r.statistic == pytest.approx(ref.statistic, abs=1e-6)
        assert r.p_value == pytest.approx(ref.pvalue, abs=1e-5)


def test_shapiro_examples():
    assert shapiro_wilk(np.arange(1, 13)).statistic >= 0.95
    with pytest.raises(StatsError):
        shapiro_wilk([1, 1, 1])
    with pytest.raises(StatsError):
        shapiro_wilk([1, 2])


def test_shapiro_calibration():
    rng = np.random.default_rng(42)
    rejected = sum(shapiro_wilk(rng.exponential(size=50)).p_value < 0.05 for _ in range(1000))
    accepted = sum(shapiro_wilk(rng.standard_normal(50)).p_value >= 0.05 for _ in range(1000))
    assert rejected >= 800
    assert accepted >= 900


def test_benjamini_hochberg():
    p = np.array([0.01, 0.04, 0.03, np.nan, 0.5])
    ref = scipy.stats.false_discovery_control([0.01, 0.04, 0.03, 0.5])
    adj = benjamini_hochberg(p)
    np.testing.assert_allclose(adj[[0, 1, 2, 4]], ref, rtol=1e-12)
    assert np.isnan(adj[3])


def _noise_table(rng, n_features, n_ctrl=12, n_fgr=12):
    rows = rng.standard_normal((n_ctrl + n_fgr, n_features))
    names = [f"f{k:03d}" for k in range(n_features)]
    return FeatureTable(names, rows, _records(n_ctrl, n_fgr))


def test_separated_feature_ranks_first():
    rng = np.random.default_rng(7)
    table = _noise_table(rng, 30)
    table.rows[:12, 13] += 10.0
    ranked, sig = rank_features(table)
    assert ranked[0].feature == "f013"
    assert ranked[0].t > 0   # control minus FGR
    assert sig[0].feature == "f013"


def test_rank_row_permutation_invariance():
    rng = np.random.default_rng(8)
    table = _noise_table(rng, 25)
    perm = rng.permutation(len(table.labels))
    a, _ = rank_features(table)
    b, _ = rank_features(table.subset(perm))
    assert [r.feature for r in a] == [r.feature for r in b]
    for x, y in zip(a, b):
        assert x.p == pytest.approx(y.p, rel=1e-12)


def test_rank_false_positive_calibration():
    rng = np.random.default_rng(9)
    _, sig = rank_features(_noise_table(rng, 100))
    assert 0 <= len(sig) <= 12


def test_rank_total_order_and_missing():
    rows = np.array([[1.0, 5.0, 1.0, np.nan],
                     [2.0, 5.0, 2.0, np.nan],
                     [3.0, 5.0, 4.0, 1.0],
                     [4.0, 5.0, 3.0, 2.0]])
    table = FeatureTable(["b", "const", "a", "sparse"], rows, _records(2, 2))
    ranked, _ = rank_features(table)
    # a and b have equal statistics, so the name decides; untestable last
    assert [r.feature for r in ranked][:2] == ["a", "b"]
    assert {r.feature for r in ranked[2:]} == {"const", "sparse"}
    assert all(math.isnan(r.p) for r in ranked[2:])
    with pytest.raises(StatsError):
        rank_features(FeatureTable(["x"], np.zeros((3, 1)), _records(3, 0)))


def test_bh_correction_shrinks_significant():
    rng = np.random.default_rng(10)
    table = _noise_table(rng, 100)
    _, raw = rank_features(table)
    _, bh = rank_features(table, correction="bh")
    assert len(bh) <= len(raw)


def test_ranking_csv(tmp_path):
    rng = np.random.default_rng(11)
    names = ["placenta/ivim/Dstar/median", "placenta:lungs/ivim/f/mean",
             "liver/raw/b0/energy_max"]
    table = FeatureTable(names, rng.standard_normal((6, 3)), _records(3, 3))
    ranked, _ = rank_features(table)
    path = write_ranking_csv(ranked, tmp_path / "r.csv")
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == REPORT_COLUMNS
    assert len(rows) == 4
    d = describe_feature("placenta:lungs/ivim/f/mean")
    assert d["Organ"] == "Placenta/Lungs" and d["Parameter"] == "Perfusion Fraction"
    assert describe_feature("liver/raw/b0/energy_max")["Average Metric"] == "Max Energy"
