"""
Unit Tests for saliency, PCA, balance and deformation statistics
tests/test_stats.py
"""

import numpy as np
import pytest
from scipy import integrate, special
from scipy import stats as scipy_stats

from face3d.analysis.evaluation import LabeledFeatureSet
from face3d.analysis.stats import (
    SignificanceMap,
    demographic_balance,
    mean_abs_deformation,
    pca_explained_variance,
    saliency_map,
    variance_spectra,
    welch_t_test,
)
from face3d.errors import DegenerateData, DegenerateVariance, InvariantError, TooFewSamples
from face3d.geometry.curves import FeatureKind
from face3d.geometry.mesh_io import Ethnicity, Expression, Gender


class TestWelch:
    """Test the unequal-variance t-test"""

    def test_matches_scipy(self):
        rng = np.random.default_rng(8)
        a = rng.normal(1.0, 2.0, size=9)
        b = rng.normal(0.0, 0.5, size=14)
        t, p = welch_t_test(a, b)
        expected = scipy_stats.ttest_ind(a, b, equal_var=False)
        assert t == pytest.approx(expected.statistic, rel=1e-10)
        assert p == pytest.approx(expected.pvalue, rel=1e-8)

    def test_matches_numerical_integration(self):
        """Two-tailed p against 1 - 2 * integral of the Student t density over [0, |t|]"""
        rng = np.random.default_rng(12)
        for _ in range(100):
            a = rng.normal(rng.uniform(-1.0, 1.0), rng.uniform(0.2, 3.0), size=rng.integers(2, 16))
            b = rng.normal(rng.uniform(-1.0, 1.0), rng.uniform(0.2, 3.0), size=rng.integers(2, 16))
            t, p = welch_t_test(a, b)

            se_a, se_b = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
            df = (se_a + se_b) ** 2 / (se_a ** 2 / (len(a) - 1) + se_b ** 2 / (len(b) - 1))
            log_norm = special.gammaln((df + 1) / 2) - special.gammaln(df / 2) - 0.5 * np.log(df * np.pi)

            def density(x):
                return np.exp(log_norm - (df + 1) / 2 * np.log1p(x * x / df))

            central, _ = integrate.quad(density, 0.0, abs(t), epsabs=1e-14, epsrel=1e-13, limit=200)
            assert t == pytest.approx((a.mean() - b.mean()) / np.sqrt(se_a + se_b), rel=1e-12)
            assert p == pytest.approx(1.0 - 2.0 * central, abs=1e-9)

    def test_too_few_samples(self):
        with pytest.raises(TooFewSamples):
            welch_t_test([1.0], [1.0, 2.0])

    def test_zero_variance(self):
        with pytest.raises(DegenerateVariance):
            welch_t_test([1.0, 1.0], [1.0, 2.0])


class TestSaliency:
    """Test per-cell significance maps"""

    @pytest.fixture
    def groups(self):
        rng = np.random.default_rng(2)
        male = rng.normal(0.0, 1.0, size=(8, 6))
        female = rng.normal(0.0, 1.0, size=(7, 6))
        male[:, 0] += 5.0
        male[:, 5] = 3.0
        X = np.vstack([male, female])
        genders = [Gender.MALE] * 8 + [Gender.FEMALE] * 7
        return X, genders, male, female

    def test_cells_match_scipy(self, groups):
        X, genders, male, female = groups
        result = saliency_map(X, genders, grid_shape=(2, 3))
        assert result.t_values.shape == (2, 3)
        for cell in range(5):
            expected = scipy_stats.ttest_ind(male[:, cell], female[:, cell], equal_var=False)
            assert result.t_values.ravel()[cell] == pytest.approx(expected.statistic, rel=1e-9)
            assert result.p_values.ravel()[cell] == pytest.approx(expected.pvalue, rel=1e-6, abs=1e-300)
        assert result.t_values[0, 0] > 0

    def test_zero_variance_cell(self, groups, caplog):
        X, genders, _, _ = groups
        result = saliency_map(X, genders, grid_shape=(2, 3))
        assert result.t_values[1, 2] == 0.0 and result.p_values[1, 2] == 1.0
        assert "zero variance" in caplog.text

    def test_masks_follow_p_values(self, groups):
        X, genders, _, _ = groups
        result = saliency_map(X, genders, alphas=(0.05, 0.01), grid_shape=(2, 3))
        assert result.alphas == [0.01, 0.05]
        assert result.masks[0.05][0, 0]
        assert result.density(0.05) == pytest.approx(result.masks[0.05].mean())

    def test_inconsistent_mask(self):
        with pytest.raises(InvariantError):
            SignificanceMap(np.zeros((1, 2)), np.array([[0.5, 0.001]]), {0.01: np.array([[True, True]])})

    def test_needs_two_per_gender(self):
        with pytest.raises(TooFewSamples):
            saliency_map(np.zeros((3, 6)), [Gender.MALE, Gender.FEMALE, Gender.FEMALE], grid_shape=(2, 3))


class TestPca:
    """Test explained-variance spectra"""

    def test_rank_one_data(self):
        t = np.array([-2.0, -1.0, 0.5, 1.0, 3.0])
        X = np.outer(t, [1.0, 3.0, -2.0]) + [4.0, 5.0, 6.0]
        spectrum = pca_explained_variance(X)
        np.testing.assert_allclose(spectrum.ratios, [1.0])
        np.testing.assert_allclose(spectrum.components[0], np.array([1.0, 3.0, -2.0]) / np.sqrt(14.0), atol=1e-9)

    def test_gram_matches_covariance(self):
        X = np.random.default_rng(6).normal(size=(6, 4))
        gram = pca_explained_variance(X, method="gram")
        cov = pca_explained_variance(X, method="covariance")
        assert len(gram.ratios) == 4
        np.testing.assert_allclose(gram.ratios, cov.ratios, atol=1e-12)
        np.testing.assert_allclose(gram.components, cov.components, atol=1e-9)
        assert gram.cumulative()[-1] == pytest.approx(1.0)

    def test_random_instances_against_direct_eigendecomposition(self):
        rng = np.random.default_rng(20)
        for _ in range(20):
            n, d = rng.integers(3, 12), rng.integers(2, 15)
            X = rng.normal(size=(n, d)) * rng.uniform(0.1, 5.0, size=d)
            gram = pca_explained_variance(X, method="gram")
            direct = pca_explained_variance(X, method="covariance")
            assert gram.ratios.sum() == pytest.approx(1.0, abs=1e-9)
            assert direct.ratios.sum() == pytest.approx(1.0, abs=1e-9)

            Xc = X - X.mean(axis=0)
            eigvals = np.sort(np.linalg.eigvalsh(Xc.T @ Xc))[::-1][:min(n - 1, d)]
            np.testing.assert_allclose(gram.ratios, eigvals / eigvals.sum(), atol=1e-8)
            np.testing.assert_allclose(gram.ratios, direct.ratios, atol=1e-8)

    def test_rank_is_capped_by_sample_count(self):
        X = np.random.default_rng(1).normal(size=(4, 30))
        spectrum = pca_explained_variance(X)
        assert len(spectrum.ratios) == 3
        assert np.all(np.diff(spectrum.ratios) <= 0)

    def test_constant_data(self):
        with pytest.raises(DegenerateData):
            pca_explained_variance(np.ones((5, 3)))

    def test_unknown_method(self):
        with pytest.raises(InvariantError):
            pca_explained_variance(np.eye(3), method="svd")

    def test_groups(self, caplog):
        rng = np.random.default_rng(0)
        genders = (Gender.FEMALE,) * 3 + (Gender.MALE,) * 3 + (Gender.MALE,)
        expressions = (Expression.NEUTRAL,) * 6 + (Expression.HAPPY,)
        features = LabeledFeatureSet(tuple(str(i) for i in range(7)), tuple(f"S{i}" for i in range(7)),
                                     genders, expressions, rng.normal(size=(7, 5)), FeatureKind.DEPTH)
        spectra = variance_spectra(features)
        assert [(s.gender, s.expression, s.n_samples) for s in spectra] == [
            (Gender.FEMALE, Expression.NEUTRAL, 3), (Gender.MALE, Expression.NEUTRAL, 3)]
        assert "Skipping PCA for Male/Happy" in caplog.text


class TestBalance:
    """Test demographic balance between genders"""

    def test_identical_groups(self, make_record):
        records = [make_record("F1", age=20), make_record("F1", Expression.HAPPY, age=20),
                   make_record("F2", age=30), make_record("M1", gender=Gender.MALE, age=20),
                   make_record("M2", gender=Gender.MALE, age=30)]
        report = demographic_balance(records)
        assert (report.n_female, report.n_male) == (2, 2)
        assert report.age_t == 0.0 and report.age_p == pytest.approx(1.0)
        assert report.ethnicity_p == 1.0
        assert report.mean_age_female == 25.0

    def test_ethnicity_difference(self, make_record):
        records = [make_record("F1", ethnicity=Ethnicity.ASIAN), make_record("F2", ethnicity=Ethnicity.ASIAN),
                   make_record("M1", gender=Gender.MALE, age=30), make_record("M2", gender=Gender.MALE, age=32)]
        report = demographic_balance(records)
        assert report.ethnicity_p == 0.0
        assert report.asian_fraction_female == 1.0 and report.asian_fraction_male == 0.0

    def test_needs_two_subjects_per_gender(self, make_record):
        with pytest.raises(TooFewSamples):
            demographic_balance([make_record("F1"), make_record("F2"), make_record("M1", gender=Gender.MALE)])


class TestDeformation:
    """Test mean absolute deformation maps"""

    def test_group_means(self):
        X = np.array([[1.0, -2.0, 0.0, 0.0], [-3.0, 2.0, 0.0, 4.0], [5.0, 5.0, 5.0, 5.0]])
        features = LabeledFeatureSet(("a", "b", "c"), ("S1", "S2", "S3"), (Gender.FEMALE,) * 2 + (Gender.MALE,),
                                     (Expression.SAD,) * 3, X, FeatureKind.DELTA_DEPTH)
        maps = mean_abs_deformation(features, grid_shape=(2, 2))
        assert set(maps) == {(Gender.FEMALE, Expression.SAD), (Gender.MALE, Expression.SAD)}
        np.testing.assert_allclose(maps[(Gender.FEMALE, Expression.SAD)], [[2.0, 2.0], [0.0, 2.0]])

    def test_requires_difference_features(self):
        features = LabeledFeatureSet(("a",), ("S1",), (Gender.FEMALE,), (Expression.SAD,), np.zeros((1, 4)),
                                     FeatureKind.DEPTH)
        with pytest.raises(InvariantError):
            mean_abs_deformation(features, grid_shape=(2, 2))
