import warnings

import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from mbnspeaker.mbn import (
    BOTTOM,
    UPPER,
    KCentersClustering,
    MbnConfig,
    MbnError,
    MbnWarning,
    codes_to_csr,
    compute_k_schedule,
    encode_all,
    encode_clustering,
    encode_layer,
    encode_one,
    load_model,
    pca_fit,
    pca_transform,
    selected_width,
    shifted_width,
    train_clustering,
    train_layer,
    train_mbn,
    transform,
)


def _two_clusters(n=50, d=8, seed=0):
    r = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n // 2)
    X = r.standard_normal((n, d)) + 6.0 * labels[:, None]
    return X, labels


def _pca_oracle(Z, out_dim):
    """Leading eigenvectors of the sample covariance, largest-magnitude entry positive."""
    Zc = Z - Z.mean(axis=0)
    evals, evecs = scipy.linalg.eigh(Zc.T @ Zc / (Z.shape[0] - 1))
    order = np.argsort(evals)[::-1][:out_dim]
    vecs = evecs[:, order]
    for j in range(vecs.shape[1]):
        if vecs[np.argmax(np.abs(vecs[:, j])), j] < 0:
            vecs[:, j] = -vecs[:, j]
    return vecs


class TestSchedule:
    @pytest.mark.parametrize("n, k_max, hint, expected", [
        (3400, 10000, 34, [3060, 1530, 765, 382, 191, 95]),
        (10, 10000, 2, [9, 4]),
        (3400, 500, 34, [500, 250, 125, 62]),
    ])
    def test_examples(self, n, k_max, hint, expected):
        assert compute_k_schedule(n, k_max, hint) == expected

    @settings(max_examples=200)
    @given(st.integers(4, 100000), st.integers(2, 20000), st.one_of(st.none(), st.integers(1, 200)))
    def test_strictly_decreasing_and_bounded(self, n, k_max, hint):
        sched = compute_k_schedule(n, k_max, hint)
        assert sched[0] == min(int(0.9 * n), k_max)
        assert all(b < a for a, b in zip(sched, sched[1:]))
        assert all(b == a // 2 for a, b in zip(sched, sched[1:]))
        stop = int(np.ceil(1.5 * hint)) if hint else 30
        assert all(k >= stop for k in sched[1:])

    def test_invalid_schedules(self):
        with pytest.raises(MbnError):
            MbnConfig(k_schedule=(10, 10))
        with pytest.raises(MbnError):
            MbnConfig(k_schedule=(4, 1))
        with pytest.raises(MbnError):
            MbnConfig(reconstruction_fraction=0.7)

    def test_width_rounding(self):
        assert selected_width(0.5, 176) == 88
        assert selected_width(0.5, 7) == 4
        assert selected_width(0.01, 3) == 1
        assert shifted_width(0.5, 88) == 44
        assert shifted_width(0.5, 1) == 0


class TestClustering:
    def test_no_reconstruction_keeps_rows_verbatim(self, rng):
        X = rng.standard_normal((30, 10))
        cl = train_clustering(X, 7, 0.5, 0.0, np.random.default_rng(3))
        np.testing.assert_array_equal(cl.centers, X[np.ix_(cl.sample_rows, cl.selected_dims)])
        assert len(set(cl.sample_rows.tolist())) == 7
        assert len(cl.selected_dims) == 5

    def test_full_feature_fraction(self, rng):
        X = rng.standard_normal((12, 9))
        cl = train_clustering(X, 3, 1.0, 0.0, np.random.default_rng(0))
        assert cl.selected_dims.tolist() == list(range(9))

    def test_one_step_shift_direction(self):
        # three centers, one column shifted: (v1, v2, v3) -> (v2, v3, v1)
        X = np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]])
        for seed in range(20):
            cl = train_clustering(X, 3, 1.0, 0.5, np.random.default_rng(seed))
            original = X[cl.sample_rows]
            (col,) = cl.shifted_cols
            np.testing.assert_array_equal(cl.centers[:, col], np.roll(original[:, col], -1))
            other = 1 - col
            np.testing.assert_array_equal(cl.centers[:, other], original[:, other])

    @pytest.mark.parametrize("sparse_input", [False, True])
    def test_exactly_d_prime_columns_rotated(self, rng, sparse_input):
        X = rng.integers(0, 2, (40, 20)).astype(float) if sparse_input else rng.standard_normal((40, 20))
        data = sp.csr_matrix(X.astype(np.int32)) if sparse_input else X
        cl = train_clustering(data, 9, 0.5, 0.5, np.random.default_rng(5))
        d_hat = 10
        assert len(cl.shifted_cols) == shifted_width(0.5, d_hat) == 5
        original = X[np.ix_(cl.sample_rows, cl.selected_dims)]
        centers = cl.dense_centers()
        moved = np.zeros(d_hat, bool)
        moved[cl.shifted_cols] = True
        np.testing.assert_array_equal(centers[:, moved], np.roll(original[:, moved], -1, axis=0))
        np.testing.assert_array_equal(centers[:, ~moved], original[:, ~moved])

    def test_too_many_centers(self, rng):
        with pytest.raises(MbnError):
            train_clustering(rng.standard_normal((5, 3)), 6, 0.5, 0.0, np.random.default_rng(0))


class TestEncoding:
    def test_bottom_mode_exact_center(self, rng):
        centers = rng.standard_normal((4, 3))
        cl = KCentersClustering(np.array([0, 2, 4]), centers)
        x = np.zeros(5)
        x[[0, 2, 4]] = centers[2]
        assert encode_one(cl, x, BOTTOM) == 2

    def test_single_center(self, rng):
        cl = KCentersClustering(np.array([0, 1]), rng.standard_normal((1, 2)))
        for x in rng.standard_normal((5, 2)):
            assert encode_one(cl, x, BOTTOM) == 0

    def test_upper_mode_counts_shared_units(self):
        dense = np.zeros((2, 8))
        dense[0, [0, 1, 2, 6]] = 1
        dense[1, [3, 4, 5, 7]] = 1
        cl = KCentersClustering(np.arange(8), sp.csr_matrix(dense.astype(np.int32)))
        x = np.zeros(8)
        x[[0, 1, 2, 3]] = 1  # three units shared with center 0, one with center 1
        assert encode_one(cl, x, UPPER) == 0
        assert np.argmax(dense @ x) == 0

    def test_upper_mode_ties_go_to_lowest_index(self):
        dense = np.array([[1, 0, 1, 0], [0, 1, 1, 0], [1, 1, 0, 0]], dtype=np.int32)
        cl = KCentersClustering(np.arange(4), sp.csr_matrix(dense))
        x = np.array([1.0, 1.0, 1.0, 0.0])
        assert encode_one(cl, x, UPPER) == 0

    def test_rows_have_exactly_v_active_units(self, rng):
        X = rng.standard_normal((40, 12))
        layer, codes = train_layer(X, 1, 8, 25, 0.5, 0.5, seed=1, workers=1)
        Z = codes_to_csr(codes, 8)
        np.testing.assert_array_equal(np.asarray(Z.sum(axis=1)).ravel(), 25)
        upper, up_codes = train_layer(Z, 2, 4, 25, 0.5, 0.5, seed=1, workers=1)
        np.testing.assert_array_equal(np.asarray(codes_to_csr(up_codes, 4).sum(axis=1)).ravel(), 25)

    def test_identical_inputs_identical_codes(self, rng):
        X = rng.standard_normal((20, 6))
        X[7] = X[3]
        _, codes = train_layer(X, 1, 5, 30, 0.5, 0.0, seed=2, workers=1)
        np.testing.assert_array_equal(codes[7], codes[3])

    def test_within_cluster_overlap_exceeds_between(self):
        X, labels = _two_clusters()
        _, codes = train_layer(X, 1, 10, 100, 0.5, 0.0, seed=0, workers=1)
        overlap = (codes[:, None, :] == codes[None, :, :]).sum(axis=2)
        same = labels[:, None] == labels[None, :]
        off_diag = ~np.eye(len(labels), dtype=bool)
        within = overlap[same & off_diag].mean()
        between = overlap[~same].mean()
        assert within > between

    def test_codes_do_not_depend_on_workers(self, rng):
        X = rng.standard_normal((30, 10))
        _, a = train_layer(X, 1, 6, 40, 0.5, 0.5, seed=9, workers=1)
        _, b = train_layer(X, 1, 6, 40, 0.5, 0.5, seed=9, workers=4)
        np.testing.assert_array_equal(a, b)

    def test_tiny_perturbation_moves_only_boundary_points(self, rng):
        X = rng.standard_normal((60, 10))
        layer, codes = train_layer(X, 1, 12, 80, 0.5, 0.5, seed=4, workers=1)
        x = X[11].copy()
        x_pert = x + 1e-12 * rng.standard_normal(x.shape)
        new = encode_layer(layer, x_pert[None, :])[0]
        changed = np.flatnonzero(new != codes[11])
        for v in changed:
            cl = layer.clusterings[v]
            # oracle: distances of the unperturbed point in extended precision
            W = cl.dense_centers().astype(np.longdouble)
            xs = x[cl.selected_dims].astype(np.longdouble)
            dist = np.sort(np.sum((W - xs) ** 2, axis=1))
            assert dist[1] - dist[0] < 1e-9 * max(1.0, float(dist[0]))


class TestPca:
    def test_matches_eigensolver_oracle(self, rng):
        Z = rng.standard_normal((6, 4))
        _, proj, _ = pca_fit(Z, 3)
        np.testing.assert_allclose(proj, _pca_oracle(Z, 3), atol=1e-8)

    @pytest.mark.parametrize("shape", [(50, 40), (20, 35), (12, 12), (40, 3)])
    def test_tall_and_wide(self, rng, shape):
        Z = rng.standard_normal(shape) * rng.uniform(0.5, 3.0, shape[1])
        out = min(shape[0] - 1, shape[1], 6)
        _, proj, variances = pca_fit(Z, out)
        np.testing.assert_allclose(proj, _pca_oracle(Z, out), atol=1e-8)
        np.testing.assert_allclose(proj.T @ proj, np.eye(out), atol=1e-10)
        assert np.all(np.diff(variances) <= 0)

    def test_symmetric_pair(self):
        Z = np.array([[1.0, 0.0], [-1.0, 0.0]])
        mean, proj, _ = pca_fit(Z, 1)
        np.testing.assert_allclose(proj[:, 0], [1.0, 0.0])
        np.testing.assert_allclose(pca_transform(Z, mean, proj).ravel(), [1.0, -1.0])

    def test_affine_subspace_is_lossless(self, rng):
        basis = np.linalg.qr(rng.standard_normal((5, 2)))[0]
        Z = rng.standard_normal((25, 2)) @ basis.T + rng.standard_normal(5)
        mean, proj, _ = pca_fit(Z, 2)
        back = mean + pca_transform(Z, mean, proj) @ proj.T
        np.testing.assert_allclose(back, Z, atol=1e-8)

    def test_sparse_and_dense_agree(self, rng):
        Z = (rng.random((30, 50)) < 0.2).astype(float)
        m1, p1, _ = pca_fit(Z, 4)
        m2, p2, _ = pca_fit(sp.csr_matrix(Z), 4)
        np.testing.assert_allclose(p1, p2, atol=1e-10)
        np.testing.assert_allclose(pca_transform(Z, m1, p1), pca_transform(sp.csr_matrix(Z), m2, p2),
                                   atol=1e-10)

    def test_clamped_output_dim_warns(self, rng):
        with pytest.warns(MbnWarning, match="clamped"):
            _, proj, _ = pca_fit(rng.standard_normal((4, 10)), 6)
        assert proj.shape == (10, 3)

    def test_zero_variance_warns(self):
        with pytest.warns(MbnWarning, match="zero variance"):
            mean, proj, _ = pca_fit(np.ones((5, 3)), 2)
        np.testing.assert_array_equal(pca_transform(np.ones((5, 3)), mean, proj), 0.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(3, 25), st.integers(1, 25), st.integers(0, 2**32 - 1))
    def test_orthonormal_columns(self, n, D, seed):
        Z = np.random.default_rng(seed).standard_normal((n, D))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MbnWarning)
            _, proj, _ = pca_fit(Z, min(n - 1, D))
        np.testing.assert_allclose(proj.T @ proj, np.eye(proj.shape[1]), atol=1e-8)
        idx = np.argmax(np.abs(proj), axis=0)
        assert np.all(proj[idx, np.arange(proj.shape[1])] > 0)


@pytest.fixture(scope="module")
def trained():
    X, labels = _two_clusters(n=60, d=12, seed=3)
    cfg = MbnConfig(num_clusterings=30, k_schedule=(40, 20, 10), reconstruction_fraction=0.5,
                    output_dim=2, seed=5)
    model, Y = train_mbn(X, cfg, workers=1)
    return X, labels, model, Y


class TestNetwork:
    def test_transform_of_training_data(self, trained):
        X, _, model, Y = trained
        np.testing.assert_array_equal(transform(model, X), Y)

    def test_single_point(self, trained):
        X, _, model, Y = trained
        np.testing.assert_allclose(transform(model, X[5:6])[0], Y[5], rtol=0, atol=1e-12)

    def test_every_layer_has_v_active_units(self, trained):
        X, _, model, _ = trained
        for layer, codes in zip(model.layers, encode_all(model, X)):
            Z = codes_to_csr(codes, layer.k)
            np.testing.assert_array_equal(np.asarray(Z.sum(axis=1)).ravel(), len(layer.clusterings))

    def test_save_load_round_trip(self, trained, tmp_path):
        X, _, model, Y = trained
        model.save(tmp_path / "m")
        back = load_model(tmp_path / "m")
        assert back.schedule == model.schedule
        np.testing.assert_array_equal(transform(back, X), Y)

    def test_separates_two_clusters(self, trained):
        _, labels, _, Y = trained
        first = Y[:, 0]
        assert min(first[labels == 0].max(), first[labels == 1].max()) < max(
            first[labels == 0].min(), first[labels == 1].min()
        )

    def test_standardized_round_trip(self, tmp_path):
        X, _ = _two_clusters(n=30, d=6, seed=1)
        cfg = MbnConfig(num_clusterings=10, k_schedule=(20, 10), standardize=True, seed=2)
        model, Y = train_mbn(X, cfg, workers=1)
        model.save(tmp_path / "s")
        np.testing.assert_array_equal(transform(load_model(tmp_path / "s"), X), Y)

    def test_single_layer_reduces_to_pca_over_quantization(self, rng):
        X = rng.standard_normal((25, 4))
        cfg = MbnConfig(num_clusterings=1, k_schedule=(6,), feature_fraction=1.0,
                        reconstruction_fraction=0.0, output_dim=2, seed=8)
        model, Y = train_mbn(X, cfg, workers=1)
        centers = model.layers[0].clusterings[0].centers
        nearest = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
        onehot = np.eye(6)[nearest]
        mean, proj, _ = pca_fit(onehot, 2)
        np.testing.assert_allclose(Y, pca_transform(onehot, mean, proj), atol=1e-10)

    def test_auto_reconstruction(self):
        X, _ = _two_clusters(n=40, d=6)
        m, _ = train_mbn(X, MbnConfig(num_clusterings=5, speaker_hint=2, seed=1), workers=1)
        assert m.schedule[0] == 36
        assert m.reconstruction_fraction == 0.5

    def test_rejects_bad_input(self):
        with pytest.raises(MbnError, match="non-finite"):
            train_mbn(np.array([[np.nan, 1.0]] * 10), MbnConfig(k_schedule=(3,)))
        with pytest.raises(MbnError, match="exceeds"):
            train_mbn(np.ones((5, 2)), MbnConfig(k_schedule=(8, 4)))

    def test_wrong_dimension_on_transform(self, trained):
        _, _, model, _ = trained
        with pytest.raises(MbnError, match="dimensions"):
            transform(model, np.zeros((2, 3)))


def test_encode_clustering_rejects_unknown_mode(rng):
    cl = KCentersClustering(np.array([0]), rng.standard_normal((2, 1)))
    with pytest.raises(MbnError):
        encode_clustering(cl, rng.standard_normal((3, 1)), "sideways")
