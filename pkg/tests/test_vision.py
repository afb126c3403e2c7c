import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from racestack.errors import DegenerateError, InvalidDatasetError, InvalidInputError, PointAtInfinityError
from racestack.sim import synthetic_patch
from racestack.vision import (
    ConeColor,
    ImagePatch,
    LinearSvmModel,
    PerspectiveMatrix,
    classify_color,
    hog_features,
    kmeans_hue,
    project,
    solve_perspective,
    svm_predict,
    svm_train,
)

SQUARE = [(0, 0), (1, 0), (1, 1), (0, 1)]


def _homography_apply(H, p):
    v = H @ np.array([p[0], p[1], 1.0])
    return v[:2] / v[2]


def test_identity_homography():
    M = solve_perspective(list(zip(SQUARE, SQUARE)))
    assert np.allclose(M.M, np.eye(3), atol=1e-12)


def test_scaling_homography():
    M = solve_perspective([(s, (2 * s[0], 2 * s[1])) for s in SQUARE])
    assert np.allclose(M.M, np.diag([2, 2, 1]), atol=1e-12)


def test_fifth_point_maps():
    rng = np.random.default_rng(0)
    for _ in range(20):
        H = np.eye(3) + rng.normal(0, 0.2, (3, 3))
        H[2, :2] *= 0.1
        H /= H[2, 2]
        src = rng.uniform(-5, 5, (5, 2))
        dst = [_homography_apply(H, p) for p in src]
        try:
            M = solve_perspective(list(zip(src[:4], dst[:4])))
        except DegenerateError:
            continue
        assert np.allclose(project(src[4], M), dst[4], atol=1e-7)
        for s, d in zip(src[:4], dst[:4]):
            assert np.allclose(project(s, M), d, atol=1e-9)
        assert M.M[2, 2] == 1.0


def test_collinear_or_duplicate_rejected():
    with pytest.raises(DegenerateError):
        solve_perspective([((0, 0), (0, 0)), ((1, 1), (1, 1)), ((2, 2), (2, 2)), ((0, 1), (0, 1))])
    with pytest.raises(DegenerateError):
        solve_perspective([((0, 0), (0, 0)), ((0, 0), (1, 0)), ((1, 1), (1, 1)), ((0, 1), (0, 1))])


def test_project_identity_translation_and_infinity():
    assert np.allclose(project((3.0, -2.0), PerspectiveMatrix.identity()), (3.0, -2.0))
    # row-vector convention: the translation sits in the bottom row
    T = PerspectiveMatrix(np.array([[1, 0, 0], [0, 1, 0], [2.5, -1.0, 1]]))
    assert np.allclose(project((1.0, 1.0), T), (3.5, 0.0))
    M = PerspectiveMatrix(np.array([[1, 0, 1.0], [0, 1, 0], [0, 0, 1.0]]))
    with pytest.raises(PointAtInfinityError):
        project((-1.0, 0.0), M)


def test_singular_matrix_rejected():
    with pytest.raises(DegenerateError):
        PerspectiveMatrix(np.array([[1, 0, 0], [1, 0, 0], [0, 0, 1.0]]))


def test_hog_constant_patch_zero():
    d = hog_features(np.full((64, 64), 0.4))
    assert d.shape == (1764,)
    assert np.all(d == 0)


def test_hog_vertical_step_edge():
    img = np.zeros((64, 64))
    img[:, 36:] = 1.0
    d = hog_features(img).reshape(7, 7, 2, 2, 9)
    # cells in column 4 (pixels 32..39) hold the edge; gradient is along x, so bin 0
    block = d[0, 3]  # block whose right-hand cells are column 4
    right = block[:, 1]
    assert np.all(right[:, 0] > 0)
    assert np.allclose(right[:, 1:], 0)
    # cells away from the edge carry no energy
    assert np.allclose(d[0, 0], 0)


def test_hog_deterministic_and_nonnegative():
    rng = np.random.default_rng(3)
    img = rng.random((64, 64))
    a, b = hog_features(img), hog_features(img)
    assert np.array_equal(a, b)
    assert np.all(a >= 0) and np.all(np.isfinite(a))


@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_hog_offset_invariant(seed, c):
    img = np.random.default_rng(seed).random((32, 32))
    assert np.allclose(hog_features(img), hog_features(img + c), atol=1e-9)


def test_hog_dimension_mismatch():
    with pytest.raises(InvalidInputError):
        hog_features(np.zeros((30, 64)))


def _toy_set():
    rng = np.random.default_rng(0)
    pos = rng.normal([2, 2], 0.4, (40, 2))
    neg = rng.normal([-2, -1], 0.4, (40, 2))
    return pos, neg


def test_svm_separable_toy():
    pos, neg = _toy_set()
    m = svm_train(pos, neg, epochs=100, seed=1)
    assert m.train_accuracy == 1.0
    assert all(svm_predict(m, p)[0] for p in pos)
    assert not any(svm_predict(m, n)[0] for n in neg)
    assert all(b <= a for a, b in zip(m.losses, m.losses[1:]))


def test_svm_deterministic():
    pos, neg = _toy_set()
    a = svm_train(pos, neg, epochs=30, seed=4)
    b = svm_train(pos, neg, epochs=30, seed=4)
    assert np.array_equal(a.w, b.w) and a.b == b.b


def test_svm_empty_class():
    with pytest.raises(InvalidDatasetError):
        svm_train(np.zeros((0, 2)), np.ones((3, 2)))


def test_svm_predict_examples():
    m = LinearSvmModel(np.array([1.0, 0.0]), 0.0)
    assert svm_predict(m, [2.0, 0.0]) == (True, 2.0)
    assert svm_predict(m, [0.0, 5.0]) == (False, 0.0)
    with pytest.raises(InvalidInputError):
        svm_predict(m, [1.0, 2.0, 3.0])


def test_svm_on_synthetic_patches():
    rng = np.random.default_rng(2024)
    pos = [hog_features(synthetic_patch(True, rng, noise=0.05)) for _ in range(1000)]
    neg = [hog_features(synthetic_patch(False, rng, noise=0.05)) for _ in range(1000)]
    n_train = 800
    m = svm_train(pos[:n_train], neg[:n_train], seed=0)
    hits = sum(svm_predict(m, d)[0] for d in pos[n_train:]) + sum(not svm_predict(m, d)[0] for d in neg[n_train:])
    assert hits / 400 >= 0.95


def _hsv(hue, sat, val=0.6):
    return np.stack([np.asarray(hue, float), np.asarray(sat, float), np.full(np.shape(hue), val)], axis=-1)


def test_blue_on_gray_ground():
    hue = np.full((32, 32), 150.0)
    sat = np.full((32, 32), 0.05)
    hue[8:24, 10:22] = 240.0
    sat[8:24, 10:22] = 0.9
    assert classify_color(ImagePatch(_hsv(hue, sat), "hsv")) is ConeColor.BLUE


def test_all_gray_unknown():
    rng = np.random.default_rng(1)
    p = ImagePatch(_hsv(rng.uniform(0, 360, (16, 16)), np.full((16, 16), 0.02)), "hsv")
    assert classify_color(p) is ConeColor.UNKNOWN


def _kmeans_oracle(values, counts):
    """Lowest within-cluster circular SSE over every 2-partition of the distinct hues."""
    best, best_cost = None, math.inf
    n = len(values)
    for mask in itertools.product([0, 1], repeat=n - 1):
        lab = np.array((0,) + mask)
        if lab.min() == lab.max():
            continue
        cost = 0.0
        for k in (0, 1):
            v, c = values[lab == k], counts[lab == k]
            r = np.radians(v)
            mu = math.degrees(math.atan2((c * np.sin(r)).sum(), (c * np.cos(r)).sum()))
            d = (v - mu + 180.0) % 360.0 - 180.0
            cost += float((c * d * d).sum())
        if cost < best_cost:
            best, best_cost = lab, cost
    return best


def test_bimodal_red_matches_exhaustive_kmeans():
    rng = np.random.default_rng(5)
    red = np.array([352.0, 356.0, 0.0, 4.0, 8.0, 11.0, 347.0])
    ground = np.array([140.0, 146.0, 150.0, 155.0, 160.0, 163.0, 137.0, 158.0])
    hue = np.concatenate([rng.choice(red, 512), rng.choice(ground, 512)])
    sat = np.concatenate([np.full(512, 0.85), np.full(512, 0.12)])
    order = rng.permutation(1024)
    hue, sat = hue[order], sat[order]
    labels, _ = kmeans_hue(hue)
    values, inv, counts = np.unique(hue, return_inverse=True, return_counts=True)
    oracle = _kmeans_oracle(values, counts)
    got = labels
    same = np.array_equal(got, oracle[inv]) or np.array_equal(got, 1 - oracle[inv])
    assert same
    patch = ImagePatch(_hsv(hue.reshape(32, 32), sat.reshape(32, 32)), "hsv")
    assert classify_color(patch) is ConeColor.RED


@pytest.mark.parametrize("color", [ConeColor.RED, ConeColor.BLUE, ConeColor.YELLOW])
def test_rendered_cones_with_noise(color):
    rng = np.random.default_rng(9)
    right = 0
    for _ in range(30):
        right += classify_color(synthetic_patch(True, rng, noise=0.03, color=color)) is color
    assert right >= 28


@given(st.integers(0, 10_000), st.floats(0.1, 1.0))
def test_color_brightness_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    p = synthetic_patch(True, rng, size=32, noise=0.02)
    d = p.data.copy()
    d[..., 2] *= scale
    assert classify_color(p) is classify_color(ImagePatch(d, "hsv"))


def test_hsv_patch_validation():
    with pytest.raises(InvalidInputError):
        ImagePatch(np.zeros((4, 4, 3)) + [0, 1.5, 0.5], "hsv")
    with pytest.raises(InvalidInputError):
        ImagePatch(np.zeros((0, 4)))
