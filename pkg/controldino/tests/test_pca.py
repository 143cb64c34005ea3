import numpy as np
import torch
from django.test import SimpleTestCase

from controldino.errors import ContractError, NumericError
from controldino.features import FeatureGrid
from controldino.pca import (
    KIND_STANDARD,
    KIND_STYLE_INVARIANT,
    KIND_TAIL_DROP,
    FeatureMatrix,
    ProjectionBasis,
    bottom_eigen_basis,
    covariance_eigh,
    disentanglement_report,
    explained_variance,
    features_to_rgb,
    project_features,
    random_orthogonal_basis,
    standard_pca,
    style_invariant_basis,
    style_projector,
    tail_drop_basis,
)


def planted_style(m=2000, d=12, seed=0):
    """Real rows with a strong axis u1; stylised rows shifted along u1 and u2."""
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    scales = np.linspace(3.0, 0.5, d)
    real = (rng.standard_normal((m, d)) * scales) @ q.T
    style_dirs = q[:, :2]
    offsets = rng.standard_normal((m, 2)) * np.array([3.0, 2.0])
    styled = real + offsets @ style_dirs.T
    return FeatureMatrix(real), FeatureMatrix(styled), style_dirs


def content_in_low_variance(m=5000, seed=0):
    """Style lives in the strong and middle directions; the four weakest carry none."""
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((12, 12)))
    scales = np.array([3.0, 3.0, 3.0, 3.0, 2.0, 2.0, 1.2, 1.2, 0.3, 0.3, 0.3, 0.3])
    real = (rng.standard_normal((m, 12)) * scales) @ q.T
    offsets = rng.standard_normal((m, 4)) * np.array([3.0, 2.0, 0.5, 0.5])
    styled = real + offsets @ q[:, [0, 1, 4, 5]].T
    return FeatureMatrix(real), FeatureMatrix(styled)


def assert_orthonormal(testcase, vectors):
    np.testing.assert_allclose(vectors.T @ vectors, np.eye(vectors.shape[1]), atol=1e-10)


class FeatureMatrixTests(SimpleTestCase):
    def test_validation(self):
        with self.assertRaises(ContractError):
            FeatureMatrix(np.zeros((1, 3)))
        with self.assertRaises(NumericError):
            FeatureMatrix(np.array([[1.0, np.nan], [0.0, 1.0]]))
        with self.assertRaises(ContractError):
            FeatureMatrix(np.array([[1.0, 2.0], [3.0, 5.0]]), centered=True)

    def test_from_grid_rows(self):
        grid = FeatureGrid(torch.arange(2 * 3 * 2 * 2, dtype=torch.float32).reshape(2, 3, 2, 2))
        X = FeatureMatrix.from_grid(grid)
        self.assertEqual(X.shape, (8, 3))
        np.testing.assert_array_equal(X.rows[0], grid.data[0, :, 0, 0].numpy())


class EigenTests(SimpleTestCase):
    def test_eigenvalues_match_characteristic_polynomial(self):
        rng = np.random.default_rng(1)
        for d in (2, 3, 4):
            X = FeatureMatrix(rng.standard_normal((50, d)) @ rng.standard_normal((d, d)))
            cov = X.covariance()
            vals, vecs = covariance_eigh(cov)
            expected = np.sort(np.roots(np.poly(cov)).real)[::-1]
            np.testing.assert_allclose(vals, expected, rtol=1e-7, atol=1e-9)
            np.testing.assert_allclose(cov @ vecs, vecs * vals, atol=1e-9)

    def test_standard_pca_properties(self):
        X, _, _ = planted_style()
        basis = standard_pca(X, 5)
        self.assertEqual(basis.kind, KIND_STANDARD)
        assert_orthonormal(self, basis.vectors)
        for col in basis.vectors.T:
            self.assertGreater(col[np.abs(col).argmax()], 0)
        self.assertAlmostEqual(standard_pca(X, 12).explained_variance_pct, 100.0, places=6)
        top, bottom = standard_pca(X, 4), bottom_eigen_basis(X, 8)
        self.assertAlmostEqual(top.explained_variance_pct + bottom.explained_variance_pct, 100.0, places=6)
        self.assertAlmostEqual(explained_variance(X, top.vectors), top.explained_variance_pct, places=6)

    def test_k_bounds(self):
        X = FeatureMatrix(np.random.default_rng(0).standard_normal((4, 6)))
        with self.assertRaises(ContractError):
            standard_pca(X, 4)
        with self.assertRaises(ContractError):
            standard_pca(X, 0)

    def test_basis_rejects_non_orthonormal_columns(self):
        with self.assertRaises(NumericError):
            ProjectionBasis(np.ones((3, 2)), KIND_STANDARD, 50.0)


class StyleInvariantTests(SimpleTestCase):
    def setUp(self):
        self.real, self.styled, self.style_dirs = planted_style()

    def test_removes_planted_style_directions(self):
        basis = style_invariant_basis(self.real, self.styled, 2, 6)
        self.assertEqual(basis.kind, KIND_STYLE_INVARIANT)
        assert_orthonormal(self, basis.vectors)
        np.testing.assert_allclose(basis.vectors.T @ self.style_dirs, 0.0, atol=1e-8)
        P = style_projector(basis)
        np.testing.assert_allclose(P @ self.style_dirs, 0.0, atol=1e-8)

    def test_projector_algebra(self):
        P = style_projector(style_invariant_basis(self.real, self.styled, 3, 4))
        np.testing.assert_allclose(P @ P, P, atol=1e-10)
        np.testing.assert_allclose(P, P.T, atol=1e-12)
        self.assertAlmostEqual(np.trace(P), 9.0, places=8)

    def test_report_prefers_style_invariant_basis(self):
        inv = disentanglement_report(self.real, self.styled, style_invariant_basis(self.real, self.styled, 2, 6))
        std = disentanglement_report(self.real, self.styled, standard_pca(self.real, 6))
        self.assertGreater(inv["cosine_similarity"], 0.999999)
        self.assertLess(std["cosine_similarity"], inv["cosine_similarity"] - 0.01)
        self.assertEqual(set(inv), {"basis_kind", "K", "cosine_similarity", "explained_variance_pct",
                                    "excluded_rows"})
        self.assertEqual(inv["K"], 6)

    def test_weakest_directions_are_most_style_invariant(self):
        real, styled = content_in_low_variance()
        cosine = {
            name: disentanglement_report(real, styled, basis)["cosine_similarity"]
            for name, basis in (
                ("bottom", bottom_eigen_basis(real, 4)),
                ("inv", style_invariant_basis(real, styled, 2, 4)),
                ("std", standard_pca(real, 4)),
                ("random", random_orthogonal_basis(12, 4, np.random.default_rng(1), real)),
            )
        }
        self.assertGreater(cosine["bottom"], cosine["inv"])
        self.assertGreater(cosine["inv"], cosine["std"])
        self.assertGreater(cosine["bottom"], cosine["random"])

    def test_row_order_does_not_change_basis(self):
        order = np.random.default_rng(4).permutation(self.real.shape[0])
        a = style_invariant_basis(self.real, self.styled, 2, 6)
        shuffled_real, shuffled_styled = FeatureMatrix(self.real.rows[order]), FeatureMatrix(self.styled.rows[order])
        b = style_invariant_basis(shuffled_real, shuffled_styled, 2, 6)
        np.testing.assert_allclose(b.vectors, a.vectors, atol=1e-8)
        self.assertAlmostEqual(b.explained_variance_pct, a.explained_variance_pct, places=8)

    def test_zero_style_covariance(self):
        with self.assertRaisesMessage(ContractError, "zero style covariance"):
            style_invariant_basis(self.real, self.real, 2, 4)

    def test_dimension_budget(self):
        with self.assertRaises(ContractError):
            style_invariant_basis(self.real, self.styled, 6, 7)
        with self.assertRaises(ContractError):
            style_projector(standard_pca(self.real, 3))

    def test_unpaired_matrices(self):
        short = FeatureMatrix(self.styled.rows[:-1])
        with self.assertRaises(ContractError):
            style_invariant_basis(self.real, short, 2, 4)


class OtherBasisTests(SimpleTestCase):
    def setUp(self):
        self.X, _, _ = planted_style(m=500)

    def test_random_basis(self):
        a = random_orthogonal_basis(12, 5, np.random.default_rng(3), self.X)
        b = random_orthogonal_basis(12, 5, np.random.default_rng(3), self.X)
        assert_orthonormal(self, a.vectors)
        np.testing.assert_array_equal(a.vectors, b.vectors)
        self.assertAlmostEqual(random_orthogonal_basis(12, 3, np.random.default_rng(0)).explained_variance_pct, 25.0)

    def test_explained_variance_grows_with_k(self):
        ev = [standard_pca(self.X, k).explained_variance_pct for k in range(1, 13)]
        self.assertTrue(all(b > a for a, b in zip(ev, ev[1:])), ev)
        self.assertAlmostEqual(ev[-1], 100.0, places=6)

    def test_tail_drop_error_grows_with_dropped_components(self):
        centered = self.X.center()

        def residual(k):
            v = tail_drop_basis(self.X, k=k, full=8, choices=(2, 4, 8)).vectors
            return float(np.sum((centered - centered @ v @ v.T) ** 2))

        errors = [residual(k) for k in (8, 4, 2)]
        self.assertTrue(errors[0] < errors[1] < errors[2], errors)

    def test_tail_drop_is_a_pca_prefix(self):
        full = standard_pca(self.X, 8)
        basis = tail_drop_basis(self.X, k=4, full=8, choices=(2, 4, 8))
        self.assertEqual(basis.kind, KIND_TAIL_DROP)
        np.testing.assert_array_equal(basis.vectors, full.vectors[:, :4])
        self.assertLess(basis.explained_variance_pct, full.explained_variance_pct)
        self.assertEqual(tail_drop_basis(self.X, k=8, full=8, choices=(2, 4, 8)).kind, KIND_STANDARD)

    def test_tail_drop_draws_from_choices(self):
        rng = np.random.default_rng(0)
        ks = {tail_drop_basis(self.X, rng=rng, full=8, choices=(2, 4, 8)).k for _ in range(30)}
        self.assertEqual(ks, {2, 4, 8})
        with self.assertRaises(ContractError):
            tail_drop_basis(self.X, k=3, full=8, choices=(2, 4, 8))


class ReportTests(SimpleTestCase):
    def test_identical_matrices_have_unit_similarity(self):
        X, _, _ = planted_style(m=200)
        report = disentanglement_report(X, X, standard_pca(X, 3))
        self.assertAlmostEqual(report["cosine_similarity"], 1.0, places=10)
        self.assertEqual(report["excluded_rows"], 0)

    def test_zero_norm_rows_are_excluded(self):
        rows = np.random.default_rng(2).standard_normal((20, 4))
        rows[5] = 0.0
        X = FeatureMatrix(rows)
        report = disentanglement_report(X, X, standard_pca(X, 2))
        self.assertEqual(report["excluded_rows"], 1)


class ProjectionTests(SimpleTestCase):
    def setUp(self):
        self.grid = FeatureGrid(torch.randn(3, 6, 4, 4, generator=torch.Generator().manual_seed(0)))
        self.basis = standard_pca(FeatureMatrix.from_grid(self.grid), 3)

    def test_projected_channels_are_centered(self):
        out = project_features(self.grid, self.basis)
        self.assertEqual(tuple(out.data.shape), (3, 3, 4, 4))
        torch.testing.assert_close(out.data.mean(dim=(0, 2, 3)), torch.zeros(3), atol=1e-5, rtol=0)

    def test_padding(self):
        out = project_features(self.grid, self.basis, pad_to=5)
        self.assertEqual(out.feature_dim, 5)
        self.assertTrue(torch.equal(out.data[:, 3:], torch.zeros(3, 2, 4, 4)))
        with self.assertRaises(ContractError):
            project_features(self.grid, self.basis, pad_to=2)

    def test_dimension_mismatch(self):
        with self.assertRaises(ContractError):
            project_features(FeatureGrid(torch.zeros(1, 5, 2, 2)), self.basis)

    def test_rgb_preview(self):
        rgb = features_to_rgb(self.grid)
        self.assertEqual(tuple(rgb.shape), (3, 3, 4, 4))
        self.assertGreaterEqual(float(rgb.min()), 0.0)
        self.assertLessEqual(float(rgb.max()), 1.0)
