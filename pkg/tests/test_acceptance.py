"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line.

The cohort criteria (6, 7, 8) fit 20 full default phantom cohorts and take
roughly a quarter of an hour on one core.
"""

import math
import time
from fractions import Fraction

import numpy as np
import pytest
import scipy.stats

from fetalfit.features import (assemble_table, fit_plan, fit_subjects, split_feature_kinds,
                               subject_features)
from fetalfit.fitting import FitConfig, draw_interior, fit_roi, fit_signals, fit_voxelwise
from fetalfit.ml import (CLASSIFY_HARALICK, CLASSIFY_SUMMARIES, REGRESS_GA, TrainConfig,
                         predict_linear, predict_logistic, run_experiment, train_linear,
                         train_logistic)
from fetalfit.models import (MODELS, ExtIvim, StandardIvim, T2Decay, T2Ivim, AdcDecay,
                             add_rician_noise, eval_adc, eval_ext_ivim, eval_standard_ivim,
                             eval_t2, eval_t2_ivim, get_model)
from fetalfit.phantom import CohortConfig, iter_cohort
from fetalfit.stats import rank_features, shapiro_wilk, t_test
from fetalfit.texture import DEFAULT_OFFSETS, build_glcm, haralick
from fetalfit.volume_io import (AcquisitionProtocol, FeatureTable, OrganMask, SubjectRecord,
                                Volume4D, read_dataset, read_feature_table, write_dataset,
                                write_feature_table)

N_COHORTS = 20
# the classification cohort holds 12 controls and 11 FGR subjects so the
# 80/20 split gives exactly 18 training and 5 test subjects
DROPPED_FOR_CLASSIFICATION = "fgr_11"


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number} {'PASS' if ok else 'FAIL'}: {detail}")
    return emit


def _rel(a, b):
    return np.max(np.abs(a - b) / np.abs(b))


# ---------------------------------------------------------------------------

def test_criterion_1_reductions(report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    n = 1000
    S0 = rng.uniform(1, 1000, n)[:, None]
    f = rng.uniform(0, 1, n)[:, None]
    dstar = rng.uniform(3e-3, 0.5, n)[:, None]
    adc = rng.uniform(1e-4, 4e-3, n)[:, None]
    t2a = rng.uniform(10, 400, n)[:, None]
    b = np.array([0.0, 50, 100, 200, 400, 600, 1000])
    te = rng.uniform(0, 200, 7)
    worst = max(
        _rel(eval_ext_ivim(ExtIvim(S0, f, dstar, t2a, t2a, adc), b, te),
             eval_t2_ivim(T2Ivim(S0, t2a, f, dstar, adc), b, te)),
        _rel(eval_t2_ivim(T2Ivim(S0, t2a, f, dstar, adc), b, 0.0),
             eval_standard_ivim(StandardIvim(S0, f, dstar, adc), b)),
        _rel(eval_standard_ivim(StandardIvim(S0, 0.0 * f, dstar, adc), b),
             eval_adc(AdcDecay(S0, adc), b)),
        _rel(eval_t2_ivim(T2Ivim(S0, t2a, f, dstar, adc), 0.0, te),
             eval_t2(T2Decay(S0, t2a), te)),
    )
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 1.0
    report(1, ok, f"max relative deviation {worst:.2e} over {n} draws in {elapsed:.2f} s")
    assert ok


def test_criterion_2_noiseless_recovery(report, protocol):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    rates = {}
    for model in MODELS:
        spec = get_model(model)
        theta = draw_interior(model, 200, rng)
        sig = spec.signal(theta, protocol.b, protocol.te)
        est, *_ = fit_signals(model, protocol, sig, FitConfig(model))
        rates[model] = float(np.mean(np.all(np.abs(est - theta) / theta < 1e-3, axis=1)))
    elapsed = time.perf_counter() - t0
    ok = min(rates.values()) >= 0.95 and elapsed < 120
    detail = ", ".join(f"{m} {r:.3f}" for m, r in rates.items())
    report(2, ok, f"recovery rates {detail}; {elapsed:.1f} s")
    assert ok


def test_criterion_3_noisy_ivim(report, protocol):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    spec = get_model("ivim")
    n = 500
    theta = np.column_stack([np.full(n, 1000.0), rng.uniform(0.15, 0.4, n),
                             rng.uniform(0.02, 0.08, n), rng.uniform(1.2e-3, 2.2e-3, n)])
    clean = spec.signal(theta, protocol.b, protocol.te).reshape(20, 25, 1, -1)
    vol = Volume4D(add_rician_noise(clean, 1000.0 / 30, seed=4))
    mask = OrganMask("placenta", np.ones((20, 25, 1), bool))
    # the phantom has no echo-time dependence, so every sample measures the model
    cfg = FitConfig("ivim", sample_selection="all")
    roi = fit_roi("ivim", protocol, vol.data.reshape(n, -1).mean(axis=0), cfg)
    est = fit_voxelwise("ivim", protocol, vol, mask, roi, cfg).data.reshape(n, -1)
    f_err = float(np.median(np.abs(est[:, 1] - theta[:, 1])))
    adc_err = float(np.median(np.abs(est[:, 3] - theta[:, 3]) / theta[:, 3]))
    elapsed = time.perf_counter() - t0
    ok = f_err <= 0.05 and adc_err <= 0.10 and elapsed < 60
    report(3, ok, f"median |f error| {f_err:.4f}, median ADC relative error {adc_err:.4f}, "
                  f"{elapsed:.1f} s")
    assert ok


def _brute_counts(img, offset, symmetric, levels):
    counts = np.zeros((levels, levels))
    n_r, n_c = img.shape
    for r in range(n_r):
        for c in range(n_c):
            for r2 in range(n_r):
                for c2 in range(n_c):
                    if (r2 - r, c2 - c) == offset:
                        counts[img[r, c], img[r2, c2]] += 1
                        if symmetric:
                            counts[img[r2, c2], img[r, c]] += 1
    return counts / counts.sum()


def test_criterion_4_glcm_oracle(report):
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(100):
        img = rng.integers(0, 8, (8, 8))
        for off in DEFAULT_OFFSETS:
            for sym in (True, False):
                if not np.array_equal(build_glcm(img, off, sym, levels=8).p,
                                      _brute_counts(img, off, sym, 8)):
                    mismatches += 1
    h = haralick(build_glcm(np.array([[0, 0], [1, 1]]), (0, 1)))
    expected = dict(energy=math.sqrt(0.5), entropy=math.log(2), contrast=0.0, homogeneity=1.0,
                    correlation=1.0, variance=0.25)
    worst = max(abs(getattr(h, k) - v) for k, v in expected.items())
    ok = mismatches == 0 and worst <= 1e-12
    report(4, ok, f"{mismatches} GLCM mismatches in 800 cases; worked example deviation {worst:.1e}")
    assert ok


def _exact_welch(a, b):
    a = [Fraction(x) for x in a]
    b = [Fraction(x) for x in b]
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    va = sum((x - ma) ** 2 for x in a) / (len(a) - 1)
    vb = sum((x - mb) ** 2 for x in b) / (len(b) - 1)
    qa, qb = va / len(a), vb / len(b)
    t = math.copysign(math.sqrt((ma - mb) ** 2 / (qa + qb)), ma - mb)
    df = float((qa + qb) ** 2 / (qa * qa / (len(a) - 1) + qb * qb / (len(b) - 1)))
    return t, df


def test_criterion_5_statistics(report):
    rng = np.random.default_rng(5)
    worst_t = worst_p = 0.0
    done = 0
    while done < 1000:
        a = rng.integers(-50, 50, rng.integers(2, 6)).tolist()
        b = rng.integers(-50, 50, rng.integers(2, 6)).tolist()
        if len(set(a)) == 1 and len(set(b)) == 1:
            continue
        res = t_test(a, b)
        t, df = _exact_welch(a, b)
        p = float(2 * scipy.stats.t.sf(abs(t), df))
        worst_t = max(worst_t, abs(res.statistic - t) / max(1.0, abs(t)))
        worst_p = max(worst_p, abs(res.p_value - p))
        done += 1
    worst_w = worst_sp = 0.0
    for seed in range(100):
        x = np.random.default_rng(seed).standard_normal(int(np.random.default_rng(seed).integers(3, 200)))
        ours, ref = shapiro_wilk(x), scipy.stats.shapiro(x)
        worst_w = max(worst_w, abs(ours.statistic - ref.statistic))
        worst_sp = max(worst_sp, abs(ours.p_value - ref.pvalue))
    recs = ([SubjectRecord(f"c{i}", "control", 30, 39, 9, 3) for i in range(12)]
            + [SubjectRecord(f"f{i}", "fgr", 30, 36, 6, 2) for i in range(12)])
    noise = FeatureTable([f"x{k}" for k in range(100)], rng.standard_normal((24, 100)), recs)
    n_sig = len(rank_features(noise)[1])
    ok = worst_t <= 1e-10 and worst_p <= 1e-10 and worst_w <= 1e-6 and 0 <= n_sig <= 12
    report(5, ok, f"t deviation {worst_t:.1e}, p deviation {worst_p:.1e}; "
                  f"Shapiro-Wilk W deviation {worst_w:.1e} (p {worst_sp:.1e}); "
                  f"{n_sig} of 100 noise features at p < 0.05")
    assert ok


# ---------------------------------------------------------------------------
# cohort criteria

def _cohort_table(seed: int) -> FeatureTable:
    subjects = list(iter_cohort(CohortConfig(seed=seed)))
    protocol = subjects[0][0]
    fits = fit_subjects(protocol, [(v, m, r) for _, v, m, _, r in subjects], fit_plan())
    return assemble_table([f.record for f in fits],
                          [subject_features(f, "summaries") for f in fits])


@pytest.fixture(scope="session")
def cohort_tables():
    tables, times = [], []
    for seed in range(N_COHORTS):
        t0 = time.perf_counter()
        tables.append(_cohort_table(seed))
        times.append(time.perf_counter() - t0)
    return tables, times


def _is_placental_dstar_or_f(name: str) -> bool:
    organ, _, param, _ = name.split("/")
    return organ == "placenta" and param in ("Dstar", "f")


def test_criterion_6_hierarchy(report, cohort_tables):
    tables, times = cohort_tables
    hits = 0
    for table in tables:
        ranked, _ = rank_features(table)
        hits += any(_is_placental_dstar_or_f(r.feature) for r in ranked[:5])
    ok = hits >= 18 and max(times) < 600
    report(6, ok, f"placental D* or f in the top 5 on {hits}/{N_COHORTS} cohorts; "
                  f"slowest cohort {max(times):.0f} s")
    assert ok


def test_criterion_7_classification(report, cohort_tables):
    tables, _ = cohort_tables
    perfect, cv_means, sizes = 0, [], set()
    for seed, table in enumerate(tables):
        keep = [i for i, s in enumerate(table.labels) if s.id != DROPPED_FOR_CLASSIFICATION]
        sub = table.subset(keep)
        summ, _ = split_feature_kinds(sub.feature_names)
        cfg = TrainConfig(strength=CLASSIFY_SUMMARIES.strength, l1_ratio=0.0, seed=seed)
        res = run_experiment(sub, "classify", cfg, summ)
        sizes.add((len(res.train_ids), len(res.test_ids)))
        perfect += res.test.accuracy == 1.0
        cv_means.append(res.cv.mean)
    cv = float(np.mean(cv_means))
    ok = perfect >= 18 and cv >= 0.9 and sizes == {(18, 5)}
    report(7, ok, f"test accuracy 100% on {perfect}/{N_COHORTS} cohorts; "
                  f"mean cv accuracy {cv:.3f}; train/test sizes {sorted(sizes)}")
    assert ok


def test_criterion_8_regression(report, cohort_tables):
    table = cohort_tables[0][0]
    summ, _ = split_feature_kinds(table.feature_names)
    res = run_experiment(table, "ga", REGRESS_GA, summ)
    ok = res.test.rmse <= 3.0
    report(8, ok, f"GA at delivery test rmse {res.test.rmse:.2f} weeks "
                  f"(cv rmse {res.cv.mean:.2f} +- {res.cv.std:.2f})")
    assert ok


# ---------------------------------------------------------------------------

def test_criterion_9_invariance(report, protocol, tmp_path):
    rng = np.random.default_rng(9)
    checks = {}

    # standardization invariance
    X = rng.standard_normal((30, 4))
    y = (X[:, 0] + 0.5 * rng.standard_normal(30) > 0).astype(float)
    X2 = X * [1e3, -2e-3, 5.0, 1.0] + [7.0, -1e3, 0.0, 3e4]
    a, b = train_logistic(X, y, CLASSIFY_HARALICK), train_logistic(X2, y, CLASSIFY_HARALICK)
    t = X @ [1.0, -1.0, 0.5, 2.0] + rng.standard_normal(30)
    ra, rb = train_linear(X, t, REGRESS_GA), train_linear(X2, t, REGRESS_GA)
    checks["standardization"] = (
        np.max(np.abs(a.decision(X) - b.decision(X2))) <= 1e-8
        and np.array_equal(predict_logistic(a, X)[1], predict_logistic(b, X2)[1])
        and np.max(np.abs(predict_linear(ra, X) - predict_linear(rb, X2))) <= 1e-8)

    # regularization monotonicity over a 10-point grid
    cn = [np.linalg.norm(train_logistic(X, y, TrainConfig(strength=C)).weights)
          for C in np.logspace(1, -3, 10)]
    an = [np.linalg.norm(train_linear(X, t, TrainConfig(strength=al)).weights)
          for al in np.logspace(-3, 3, 10)]
    small = np.linalg.norm(train_logistic(X, y, CLASSIFY_SUMMARIES).weights)
    large = np.linalg.norm(train_logistic(X, y, CLASSIFY_HARALICK).weights)
    checks["regularization"] = (bool(np.all(np.diff(cn) <= 0)) and bool(np.all(np.diff(an) <= 0))
                                and small < large)

    # voxelwise determinism across thread counts
    spec = get_model("t2ivim")
    theta = np.broadcast_to([500.0, 90.0, 0.3, 0.05, 0.0015], (8, 8, 3, 5)) * \
        (1 + 0.1 * rng.uniform(-1, 1, (8, 8, 3, 5)))
    vol = Volume4D(add_rician_noise(spec.signal(theta, protocol.b, protocol.te), 15.0, seed=2))
    mask = OrganMask("placenta", rng.uniform(size=(8, 8, 3)) < 0.7)
    roi = fit_roi("t2ivim", protocol, vol.data[mask.data].mean(axis=0))
    maps = [fit_voxelwise("t2ivim", protocol, vol, mask, roi, threads=k, chunk_size=c)
            for k, c in ((1, None), (2, None), (4, 5), (3, 1))]
    checks["thread determinism"] = all(m.data.tobytes() == maps[0].data.tobytes() for m in maps)

    # round-trip I/O
    sub = SubjectRecord("rt", "fgr", 28.0, 35.5, 7.5, 1900.0)
    write_dataset(tmp_path / "rt", protocol, Volume4D(vol.data.astype(np.float32)), [mask], sub)
    p2, v2, m2, s2 = read_dataset(tmp_path / "rt")
    rows = rng.standard_normal((23, 137))
    rows[rng.uniform(size=rows.shape) < 0.05] = np.nan
    recs = [SubjectRecord(f"s{i}", "control" if i % 2 else "fgr", 30.0, 38.0, 8.0, 3000.0 + i)
            for i in range(23)]
    table = FeatureTable([f"o/m/p{k}/mean" for k in range(137)], rows, recs)
    write_feature_table(table, tmp_path / "t.csv")
    back = read_feature_table(tmp_path / "t.csv")
    checks["round trip"] = (v2.data.tobytes() == vol.data.astype(np.float32).tobytes()
                            and np.array_equal(m2[0].data, mask.data) and s2 == sub
                            and p2.pairs == protocol.pairs
                            and np.array_equal(back.rows, rows, equal_nan=True)
                            and back.labels == recs)
    ok = all(checks.values())
    report(9, ok, ", ".join(f"{k} {'ok' if v else 'BROKEN'}" for k, v in checks.items()))
    assert ok
