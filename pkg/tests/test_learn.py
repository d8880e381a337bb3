"""
Unit Tests for the SVM and random-forest classifiers
tests/test_learn.py
"""

import numpy as np
import pytest
from scipy.optimize import minimize
from sklearn.tree import DecisionTreeClassifier

from face3d.analysis.learn import (
    ClassifierParams,
    ForestModel,
    ForestStrategy,
    SvmModel,
    SvmStrategy,
    TrainingMeta,
    TreeArrays,
    encode_labels,
    forest_critical_values,
    forest_oob_accuracy,
    load_model,
    model_to_dict,
    save_model,
    svm_critical_values,
    svm_decide,
    svm_objective,
    train_linear_svm,
    train_random_forest,
)
from face3d.errors import ConfigError, DimensionMismatch, InvariantError, ParseError, SingleClassError
from face3d.geometry.mesh_io import Gender


@pytest.fixture
def separable():
    """Two well separated Gaussian blobs, Female around +3 and Male around -3"""
    rng = np.random.default_rng(21)
    X = np.vstack([rng.normal(3.0, 1.0, size=(20, 5)), rng.normal(-3.0, 1.0, size=(20, 5))])
    y = [Gender.FEMALE] * 20 + [Gender.MALE] * 20
    return X, y


@pytest.fixture
def overlapping():
    rng = np.random.default_rng(4)
    X = np.vstack([rng.normal(0.5, 1.0, size=(8, 2)), rng.normal(-0.5, 1.0, size=(8, 2))])
    y = np.array([1] * 8 + [-1] * 8)
    return X, y


class TestLabels:
    """Test label encoding"""

    def test_genders_and_codes(self):
        np.testing.assert_array_equal(encode_labels([Gender.FEMALE, Gender.MALE, 1, -1]), [1, -1, 1, -1])

    def test_unknown_label(self):
        with pytest.raises(InvariantError):
            encode_labels(["F"])


class TestLinearSvm:
    """Test the soft-margin linear SVM"""

    def test_hard_margin_distances(self):
        X = np.array([[2.0, 0.0], [3.0, 1.0], [-2.0, 0.0], [-3.0, -1.0]])
        model = train_linear_svm(X, [1, 1, -1, -1], C=1e3)
        values = svm_critical_values(model, [[2.0, 0.0], [-2.0, 0.0], [1.0, 0.0]])
        np.testing.assert_allclose(values, [2.0, -2.0, 1.0], rtol=1e-3, atol=1e-3)

    def test_zero_distance_is_female(self):
        model = SvmModel([2.0, 0.0], 0.0, 1.0, TrainingMeta(2, 0, 1, 0.0))
        decision = svm_decide(model, np.array([0.0, 5.0]))
        assert decision == (Gender.FEMALE, 0.0)
        assert SvmStrategy().decide(model, [[-1e-9, 0.0]])[0].label is Gender.MALE

    def test_matches_primal_optimum(self, overlapping):
        """Objective agrees with a direct constrained solve of the primal"""
        X, y = overlapping
        C = 0.7
        model = train_linear_svm(X, y, C=C)
        n, d = X.shape

        def objective(z):
            return 0.5 * z[:d] @ z[:d] + C * z[d + 1:].sum()

        constraints = [
            {"type": "ineq", "fun": lambda z: y * (X @ z[:d] + z[d]) - 1.0 + z[d + 1:]},
            {"type": "ineq", "fun": lambda z: z[d + 1:]},
        ]
        start = np.concatenate([np.zeros(d + 1), np.ones(n) * 2.0])
        oracle = minimize(objective, start, method="SLSQP", constraints=constraints,
                          options={"maxiter": 500, "ftol": 1e-12})
        ours = svm_objective(model.weights, model.bias, X, y, C)
        assert ours == pytest.approx(oracle.fun, rel=1e-3)
        assert model.training_meta.final_objective == pytest.approx(ours)

    def test_four_point_boundary_matches_qp_solution(self):
        X = np.array([[-1.0, 0.0], [-2.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        y = np.array([-1, -1, 1, 1])
        model = train_linear_svm(X, [Gender.MALE, Gender.MALE, Gender.FEMALE, Gender.FEMALE], C=1e4)

        oracle = minimize(lambda z: 0.5 * z[:2] @ z[:2], np.zeros(3), method="SLSQP",
                          constraints=[{"type": "ineq", "fun": lambda z: y * (X @ z[:2] + z[2]) - 1.0}],
                          options={"maxiter": 500, "ftol": 1e-14})
        np.testing.assert_allclose(model.weights, oracle.x[:2], atol=1e-3)
        assert model.bias == pytest.approx(oracle.x[2], abs=1e-3)
        assert abs(model.bias / model.weights[0]) < 1e-3
        inner = svm_critical_values(model, [[-1.0, 0.0], [1.0, 0.0]])
        assert abs(inner[0]) == pytest.approx(abs(inner[1]), rel=1e-3)

    def test_retraining_is_bit_identical(self, overlapping):
        first = train_linear_svm(*overlapping, C=0.7, seed=4)
        second = train_linear_svm(*overlapping, C=0.7, seed=4)
        assert first.weights.tobytes() == second.weights.tobytes()
        assert first.bias == second.bias

    def test_hand_computed_decision(self):
        model = SvmModel([1.0, 0.0], 0.0, 1.0, TrainingMeta(2, 0, 1, 0.0))
        assert svm_decide(model, np.array([-3.0, 7.0])) == (Gender.MALE, -3.0)

    def test_joint_scaling_keeps_the_decision(self):
        x = np.array([0.4, -2.5])
        model = SvmModel([1.5, 0.25], -0.3, 1.0, TrainingMeta(2, 0, 1, 0.0))
        scaled = SvmModel([7.5, 1.25], -1.5, 1.0, TrainingMeta(2, 0, 1, 0.0))
        original, rescaled = svm_decide(model, x), svm_decide(scaled, x)
        assert original.label is rescaled.label
        assert original.critical_value == pytest.approx(rescaled.critical_value, rel=1e-12)

    def test_zero_column_does_not_change_predictions(self, separable):
        X, y = separable
        points = np.random.default_rng(7).normal(0.0, 3.0, size=(25, 5))
        plain = svm_critical_values(train_linear_svm(X, y), points)
        padded = svm_critical_values(train_linear_svm(np.column_stack([X, np.zeros(len(X))]), y),
                                     np.column_stack([points, np.zeros(len(points))]))
        np.testing.assert_allclose(padded, plain, rtol=1e-9, atol=1e-9)

    def test_single_class(self):
        with pytest.raises(SingleClassError):
            train_linear_svm(np.zeros((3, 2)), [1, 1, 1])

    def test_invalid_c(self, separable):
        with pytest.raises(ConfigError):
            train_linear_svm(*separable, C=0.0)

    def test_wrong_width(self, separable):
        model = train_linear_svm(*separable)
        with pytest.raises(DimensionMismatch):
            svm_critical_values(model, np.zeros((2, 4)))


class TestRandomForest:
    """Test the bagged decision forest"""

    def test_tree_arrays_match_sklearn(self, overlapping):
        X, y = overlapping
        tree = DecisionTreeClassifier(random_state=0).fit(X, y)
        points = np.random.default_rng(1).normal(size=(200, 2))
        np.testing.assert_array_equal(TreeArrays.from_sklearn(tree).predict(points), tree.predict(points))

    def test_independent_of_worker_count(self, separable):
        serial = train_random_forest(*separable, n_trees=12, seed=5, n_jobs=1)
        parallel = train_random_forest(*separable, n_trees=12, seed=5, n_jobs=2)
        assert model_to_dict(serial) == model_to_dict(parallel)

    def test_seed_changes_forest(self, overlapping):
        a = train_random_forest(*overlapping, n_trees=8, seed=1)
        b = train_random_forest(*overlapping, n_trees=8, seed=2)
        assert model_to_dict(a) != model_to_dict(b)

    def test_voting_ratio(self, separable):
        X, y = separable
        model = train_random_forest(X, y, n_trees=20, seed=3)
        ratios = forest_critical_values(model, X)
        assert np.all((ratios >= 0.0) & (ratios <= 1.0))
        np.testing.assert_allclose(ratios * 20, np.round(ratios * 20))
        assert np.all(ratios[:20] >= 0.5) and np.all(ratios[20:] < 0.5)

    def test_half_vote_is_female(self):
        female_leaf = TreeArrays([-1], [-1], [-1], [0.0], [1])
        male_leaf = TreeArrays([-1], [-1], [-1], [0.0], [-1])
        model = ForestModel((female_leaf, male_leaf), 2, 0, 3)
        decision = ForestStrategy().decide(model, np.zeros((1, 3)))[0]
        assert decision.critical_value == 0.5
        assert decision.label is Gender.FEMALE

    def test_out_of_bag_accuracy(self, separable):
        model = train_random_forest(*separable, n_trees=30, seed=9)
        assert forest_oob_accuracy(model, *separable) >= 0.9

    def test_retraining_is_bit_identical(self, overlapping):
        first = train_random_forest(*overlapping, n_trees=10, seed=6)
        second = train_random_forest(*overlapping, n_trees=10, seed=6)
        assert model_to_dict(first) == model_to_dict(second)
        points = np.random.default_rng(0).normal(size=(50, 2))
        assert forest_critical_values(first, points).tobytes() == forest_critical_values(second, points).tobytes()

    @pytest.mark.parametrize("seed", range(10))
    def test_out_of_bag_accuracy_over_seeds(self, seed):
        rng = np.random.default_rng(100 + seed)
        X = np.vstack([rng.normal(3.0, 1.0, size=(20, 5)), rng.normal(-3.0, 1.0, size=(20, 5))])
        y = [Gender.FEMALE] * 20 + [Gender.MALE] * 20
        model = train_random_forest(X, y, n_trees=30, seed=seed)
        assert forest_oob_accuracy(model, X, y) >= 0.9

    def test_split_feature_out_of_range(self):
        tree = TreeArrays([1, -1, -1], [2, -1, -1], [4, -1, -1], [0.0, 0.0, 0.0], [0, 1, -1])
        with pytest.raises(InvariantError):
            ForestModel((tree,), 1, 0, 3)

    def test_invalid_tree_count(self, separable):
        with pytest.raises(ConfigError):
            train_random_forest(*separable, n_trees=0)


class TestStrategies:
    """Test classifier strategies and parameters"""

    def test_thresholds_and_names(self):
        assert SvmStrategy().threshold == 0.0 and SvmStrategy().get_classifier_name() == "svm"
        assert ForestStrategy().threshold == 0.5 and ForestStrategy().get_classifier_name() == "forest"

    def test_params_validation(self):
        with pytest.raises(ConfigError):
            ClassifierParams(max_features="half")

    def test_forest_strategy_uses_params(self, separable):
        strategy = ForestStrategy(ClassifierParams(classifier="forest", n_trees=7, max_features="all"))
        assert strategy.train(*separable, seed=1).n_trees == 7


class TestModelJson:
    """Test model persistence"""

    def test_svm_file_reproduces_decisions(self, tmp_path, separable):
        X, y = separable
        model = train_linear_svm(X, y)
        loaded = load_model(save_model(model, tmp_path / "svm.json"))
        np.testing.assert_array_equal(svm_critical_values(loaded, X), svm_critical_values(model, X))

    def test_forest_file_reproduces_decisions(self, tmp_path, separable):
        X, y = separable
        model = train_random_forest(X, y, n_trees=5, seed=2)
        loaded = load_model(save_model(model, tmp_path / "forest.json"))
        np.testing.assert_array_equal(forest_critical_values(loaded, X), forest_critical_values(model, X))

    def test_unknown_kind(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text('{"kind": "knn"}')
        with pytest.raises(ParseError) as excinfo:
            load_model(path)
        assert excinfo.value.context["path"] == str(path)
