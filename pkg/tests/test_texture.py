import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fetalfit.texture import (ABSENT, DEFAULT_OFFSETS, HARALICK_NAMES, Glcm, TextureConfig,
                              TextureError, build_glcm, haralick, quantize, texture_features,
                              texture_vectors)

ALL_OFFSETS = DEFAULT_OFFSETS + ((0, -1), (2, 1))


def brute_glcm(labels, offset, symmetric, levels):
    """All-pairs counter: visit every ordered pixel pair and test the displacement."""
    counts = np.zeros((levels, levels))
    n_r, n_c = labels.shape
    coords = [(r, c) for r in range(n_r) for c in range(n_c)]
    for r, c in coords:
        for r2, c2 in coords:
            if (r2 - r, c2 - c) != tuple(offset):
                continue
            a, b = labels[r, c], labels[r2, c2]
            if a == ABSENT or b == ABSENT:
                continue
            counts[a, b] += 1
            if symmetric:
                counts[b, a] += 1
    return counts / counts.sum()


def test_glcm_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(25):
        img = rng.integers(0, 5, (8, 8))
        img[rng.uniform(size=(8, 8)) < 0.1] = ABSENT
        for off in ALL_OFFSETS:
            for sym in (True, False):
                g = build_glcm(img, off, sym, levels=5)
                np.testing.assert_array_equal(g.p, brute_glcm(img, off, sym, 5))


def test_worked_2x2():
    g = build_glcm(np.array([[0, 0], [1, 1]]), (0, 1), symmetric=True)
    np.testing.assert_array_equal(g.p, [[0.5, 0], [0, 0.5]])
    h = haralick(g)
    expected = (np.sqrt(0.5), np.log(2), 1.0, 0.0, 0.25, 1.0)
    np.testing.assert_allclose(h, expected, rtol=0, atol=1e-12)


def test_asymmetric_single_pair():
    g = build_glcm(np.array([[0, 1]]), (0, 1), symmetric=False)
    assert g.p[0, 1] == 1 and g.p[1, 0] == 0


def test_constant_image():
    g = build_glcm(np.full((4, 4), 3), (1, 0), levels=6)
    assert np.count_nonzero(g.p) == 1 and g.p[3, 3] == 1
    h = haralick(g)
    assert (h.energy, h.entropy, h.contrast, h.homogeneity, h.variance) == (1, 0, 0, 1, 0)
    assert np.isnan(h.correlation)


@pytest.mark.parametrize("L", [2, 5, 16])
def test_uniform_energy(L):
    h = haralick(Glcm(np.full((L, L), 1.0 / L ** 2)))
    assert h.energy == pytest.approx(1.0 / L)
    assert h.entropy == pytest.approx(np.log(L * L))


def test_no_valid_pairs():
    with pytest.raises(TextureError):
        build_glcm(np.array([[0, ABSENT], [ABSENT, 1]]), (0, 1))
    with pytest.raises(TextureError):
        build_glcm(np.zeros((1, 3), int), (1, 0))


def test_quantize_examples():
    np.testing.assert_array_equal(quantize([0, 1, 2, 3], 2, (0, 3)), [0, 0, 1, 1])
    np.testing.assert_array_equal(quantize(np.full(5, 7.0), 8), np.zeros(5))
    assert quantize([0.0, 10.0], 4)[-1] == 3
    q = quantize([np.nan, 1.0, 2.0], 4)
    assert q[0] == ABSENT
    with pytest.raises(TextureError):
        quantize([np.nan, np.nan], 4)


def test_config_validation():
    with pytest.raises(ValueError):
        TextureConfig(levels=1)
    with pytest.raises(ValueError):
        TextureConfig(offsets=())
    with pytest.raises(ValueError):
        TextureConfig(offsets=((0, 0),))


label_images = arrays(np.int64, (6, 6), elements=st.integers(0, 4))


@settings(max_examples=60, deadline=None)
@given(label_images, st.sampled_from(ALL_OFFSETS), st.booleans())
def test_haralick_bounds(img, off, sym):
    g = build_glcm(img, off, sym, levels=5)
    assert np.all(g.p >= 0) and abs(g.p.sum() - 1) <= 1e-12
    if sym:
        np.testing.assert_array_equal(g.p, g.p.T)
    h = haralick(g)
    assert 1 / 5 - 1e-12 <= h.energy <= 1
    assert 0 <= h.entropy <= np.log(25) + 1e-12
    assert 0 < h.homogeneity <= 1 and h.contrast >= 0 and h.variance >= 0
    assert np.isnan(h.correlation) or -1 <= h.correlation <= 1


@settings(max_examples=40, deadline=None)
@given(label_images, st.sampled_from(DEFAULT_OFFSETS), st.permutations(range(5)))
def test_energy_entropy_relabel_invariant(img, off, perm):
    relabeled = np.asarray(perm)[img]
    a = haralick(build_glcm(img, off, levels=5))
    b = haralick(build_glcm(relabeled, off, levels=5))
    assert a.energy == pytest.approx(b.energy, abs=1e-12)
    assert a.entropy == pytest.approx(b.entropy, abs=1e-12)


def test_contrast_correlation_change_under_relabel():
    img = np.array([[0, 1, 2, 3]] * 4)
    perm = np.array([0, 2, 1, 3])   # non-monotone
    a = haralick(build_glcm(img, (0, 1), levels=4))
    b = haralick(build_glcm(perm[img], (0, 1), levels=4))
    assert a.contrast != pytest.approx(b.contrast)
    assert a.correlation != pytest.approx(b.correlation)


def test_singleton_aggregation():
    rng = np.random.default_rng(2)
    vals = rng.uniform(size=(6, 6, 1))
    feats = texture_features(vals, np.ones_like(vals, bool), TextureConfig(offsets=((0, 1),)))
    for name in HARALICK_NAMES:
        assert feats[f"{name}_mean"] == feats[f"{name}_max"]


def test_duplicate_slice_and_order_invariance():
    rng = np.random.default_rng(3)
    vals = rng.uniform(size=(7, 6, 3))
    mask = rng.uniform(size=vals.shape) < 0.8
    base = texture_features(vals, mask)
    # every slice duplicated once keeps the mean; the max is unaffected anyway
    dup = texture_features(np.repeat(vals, 2, axis=2), np.repeat(mask, 2, axis=2))
    rev = texture_features(vals[..., ::-1], mask[..., ::-1])
    for k in base:
        assert dup[k] == pytest.approx(base[k], rel=1e-12)
        assert rev[k] == pytest.approx(base[k], rel=1e-12)
    assert texture_features(vals, mask) == base


def test_out_of_mask_is_ignored():
    rng = np.random.default_rng(4)
    vals = rng.uniform(size=(5, 5, 2))
    mask = np.zeros(vals.shape, bool)
    mask[1:4, 1:4] = True
    other = np.where(mask, vals, 1e6)
    assert texture_features(vals, mask) == texture_features(other, mask)


def test_noisy_map_rougher_than_smooth():
    rng = np.random.default_rng(5)
    ramp = np.broadcast_to(np.linspace(0, 1, 16)[:, None, None], (16, 16, 2)).copy()
    noisy = ramp + rng.normal(0, 0.3, ramp.shape)
    mask = np.ones(ramp.shape, bool)
    smooth, rough = texture_features(ramp, mask), texture_features(noisy, mask)
    assert rough["contrast_mean"] > smooth["contrast_mean"]
    assert rough["homogeneity_mean"] < smooth["homogeneity_mean"]
    assert rough["entropy_mean"] > smooth["entropy_mean"]


def test_no_computable_slice():
    vals = np.ones((3, 3, 2))
    mask = np.zeros(vals.shape, bool)
    mask[0, 0, 0] = True
    with pytest.raises(TextureError):
        texture_vectors(vals, mask)
    with pytest.raises(TextureError):
        texture_features(vals, np.zeros(vals.shape, bool))
