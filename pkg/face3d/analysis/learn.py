"""
Gender classifiers exposing their critical decision values
face3d/analysis/learn.py

Label convention: Female = +1, Male = -1.
SVM critical value: signed distance (w.x + b) / |w|, negative => Male, 0 => Female.
Forest critical value: fraction of trees voting Female, < 0.5 => Male, 0.5 => Female.
"""

from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Sequence, Tuple, Union
import logging

import numpy as np
from joblib import Parallel, delayed
from sklearn.svm import SVC
from sklearn.tree import DecisionTreeClassifier

from ..errors import (
    ConfigError,
    DimensionMismatch,
    InvariantError,
    ParseError,
    SingleClassError,
)
from ..geometry.mesh_io import Gender
from ..jsonio import dump_json, load_json
from ..seeding import derive_rng, derive_seed

logger = logging.getLogger(__name__)

FEMALE_LABEL = 1
MALE_LABEL = -1


class Decision(NamedTuple):
    label: Gender
    critical_value: float


def encode_labels(labels: Sequence) -> np.ndarray:
    """Genders (or +1/-1 ints) -> int array of +1 (Female) / -1 (Male)"""
    out = []
    for label in labels:
        if isinstance(label, Gender):
            out.append(FEMALE_LABEL if label is Gender.FEMALE else MALE_LABEL)
        elif label in (FEMALE_LABEL, MALE_LABEL):
            out.append(int(label))
        else:
            raise InvariantError(f"Unknown class label {label!r}")
    return np.array(out, dtype=np.int64)


def label_of(code: int) -> Gender:
    return Gender.FEMALE if code == FEMALE_LABEL else Gender.MALE


def _check_training_set(X, y) -> Tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatch(f"Training matrix must be 2D, got shape {X.shape}")
    y = encode_labels(y)
    if len(y) != len(X):
        raise DimensionMismatch(f"{len(X)} training rows but {len(y)} labels")
    if not np.all(np.isfinite(X)):
        raise InvariantError("Training matrix contains NaN or infinite values")
    if len(np.unique(y)) < 2:
        raise SingleClassError(f"Training set of {len(y)} samples contains a single gender")
    return X, y


def _check_inputs(X, n_features: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != n_features:
        raise DimensionMismatch(f"Model expects {n_features} features, got input of shape {X.shape}")
    return X


# ============ linear SVM ============

@dataclass(frozen=True)
class TrainingMeta:
    n_samples: int
    seed: int
    iterations: int
    final_objective: float


@dataclass(frozen=True, eq=False)
class SvmModel:
    weights: np.ndarray
    bias: float
    C: float
    training_meta: TrainingMeta

    def __post_init__(self):
        weights = np.array(self.weights, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(weights)) and np.isfinite(self.bias)):
            raise InvariantError("SVM weights and bias must be finite")
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", float(self.bias))

    @property
    def n_features(self) -> int:
        return len(self.weights)


def svm_objective(weights: np.ndarray, bias: float, X: np.ndarray, y: np.ndarray, C: float) -> float:
    """Primal objective 0.5*|w|^2 + C * sum(hinge)"""
    margins = y * (X @ weights + bias)
    return float(0.5 * weights @ weights + C * np.maximum(0.0, 1.0 - margins).sum())


def train_linear_svm(X, y, C: float = 1.0, seed: int = 0, tol: float = 1e-6) -> SvmModel:
    """Soft-margin linear SVM solved in the dual by libsvm's SMO.

    The solver is deterministic; `seed` is recorded for provenance only.
    """
    if not C > 0:
        raise ConfigError(f"learn.C must be positive, got {C}")
    if not tol > 0:
        raise ConfigError(f"learn.tol must be positive, got {tol}")
    X, y = _check_training_set(X, y)

    svc = SVC(kernel="linear", C=C, tol=tol, shrinking=True, max_iter=-1)
    svc.fit(X, y)
    # classes_ is sorted, so positive decision values belong to +1 (Female)
    weights = np.asarray(svc.coef_, dtype=np.float64).ravel()
    bias = float(svc.intercept_[0])
    objective = svm_objective(weights, bias, X, y, C)
    iterations = int(np.sum(getattr(svc, "n_iter_", 0)))
    logger.debug(f"SVM trained on {len(y)} samples: {iterations} SMO iterations, objective {objective:.6g}, "
                 f"{int(svc.n_support_.sum())} support vectors")
    return SvmModel(weights, bias, float(C), TrainingMeta(len(y), int(seed), iterations, objective))


def svm_critical_values(model: SvmModel, X) -> np.ndarray:
    X = _check_inputs(X, model.n_features)
    norm = np.linalg.norm(model.weights)
    # a zero weight vector degenerates to the sign of the bias
    return (X @ model.weights + model.bias) / (norm if norm > 0 else 1.0)


def svm_decide(model: SvmModel, x) -> Decision:
    value = float(svm_critical_values(model, getattr(x, "values", x))[0])
    return Decision(Gender.FEMALE if value >= 0 else Gender.MALE, value)


# ============ random forest ============

@dataclass(frozen=True, eq=False)
class TreeArrays:
    """One fitted tree as flat arrays; node 0 is the root, -1 marks a missing child.

    Split rule: x[feature] <= threshold goes to children_left. leaf_label is
    +1 (Female) or -1 (Male) and only meaningful on leaves.
    """

    children_left: np.ndarray
    children_right: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    leaf_label: np.ndarray

    def __post_init__(self):
        for name in ("children_left", "children_right", "feature", "leaf_label"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        object.__setattr__(self, "threshold", np.asarray(self.threshold, dtype=np.float64))
        n = len(self.children_left)
        if any(len(getattr(self, a)) != n for a in ("children_right", "feature", "threshold", "leaf_label")):
            raise InvariantError("Tree arrays must all have one entry per node")

    @property
    def is_leaf(self) -> np.ndarray:
        return self.children_left < 0

    @classmethod
    def from_sklearn(cls, tree: DecisionTreeClassifier) -> "TreeArrays":
        t = tree.tree_
        classes = np.asarray(tree.classes_)
        majority = classes[np.argmax(t.value[:, 0, :], axis=1)]
        leaf = t.children_left < 0
        return cls(
            children_left=t.children_left.copy(),
            children_right=t.children_right.copy(),
            feature=np.where(leaf, -1, t.feature),
            threshold=np.where(leaf, 0.0, t.threshold),
            leaf_label=np.where(leaf, majority, 0),
        )

    def predict(self, X: np.ndarray) -> np.ndarray:
        # trees split on float32-cast inputs
        Xs = np.asarray(X, dtype=np.float32).astype(np.float64)
        node = np.zeros(len(Xs), dtype=np.int64)
        rows = np.arange(len(Xs))
        active = ~self.is_leaf[node]
        while active.any():
            n = node[active]
            go_left = Xs[rows[active], self.feature[n]] <= self.threshold[n]
            node[active] = np.where(go_left, self.children_left[n], self.children_right[n])
            active = ~self.is_leaf[node]
        return self.leaf_label[node]

    def to_dict(self) -> Dict[str, List]:
        return {
            "children_left": self.children_left.tolist(),
            "children_right": self.children_right.tolist(),
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "leaf_label": [1 if v == FEMALE_LABEL else 0 for v in self.leaf_label.tolist()],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, List]) -> "TreeArrays":
        leaf = np.asarray(data["children_left"]) < 0
        labels = np.where(np.asarray(data["leaf_label"]) == 1, FEMALE_LABEL, MALE_LABEL)
        return cls(data["children_left"], data["children_right"], data["feature"],
                   data["threshold"], np.where(leaf, labels, 0))


@dataclass(frozen=True, eq=False)
class ForestModel:
    trees: Tuple[TreeArrays, ...]
    n_trees: int
    seed: int
    n_features: int

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        if len(self.trees) != self.n_trees:
            raise InvariantError(f"Forest declares {self.n_trees} trees but holds {len(self.trees)}")
        for tree in self.trees:
            split = ~tree.is_leaf
            if split.any() and (tree.feature[split].min() < 0 or tree.feature[split].max() >= self.n_features):
                raise InvariantError(f"Split feature index outside 0..{self.n_features - 1}")


def bootstrap_indices(seed: int, tree_index: int, n_samples: int) -> np.ndarray:
    return derive_rng(seed, f"tree:{tree_index}").integers(0, n_samples, size=n_samples)


def _fit_tree(X, y, seed, tree_index, max_features, min_leaf) -> TreeArrays:
    sample = bootstrap_indices(seed, tree_index, len(y))
    tree = DecisionTreeClassifier(
        criterion="gini",
        max_features=max_features,
        min_samples_leaf=min_leaf,
        random_state=derive_seed(seed, f"split:{tree_index}"),
    )
    tree.fit(X[sample], y[sample])
    return TreeArrays.from_sklearn(tree)


def train_random_forest(X, y, n_trees: int = 100, seed: int = 0, max_features: Union[str, int, None] = "sqrt",
                        min_leaf: int = 1, n_jobs: int = 1) -> ForestModel:
    """Bagged Gini trees; tree t draws its bootstrap and split features from
    seeds derived from (seed, t), so the forest does not depend on n_jobs."""
    if n_trees < 1:
        raise ConfigError(f"learn.n_trees must be >= 1, got {n_trees}")
    if min_leaf < 1:
        raise ConfigError(f"learn.min_leaf must be >= 1, got {min_leaf}")
    X, y = _check_training_set(X, y)

    trees = Parallel(n_jobs=n_jobs)(
        delayed(_fit_tree)(X, y, seed, t, max_features, min_leaf) for t in range(n_trees)
    )
    logger.debug(f"Forest of {n_trees} trees trained on {len(y)} samples, "
                 f"mean depth nodes {np.mean([len(t.feature) for t in trees]):.1f}")
    return ForestModel(tuple(trees), n_trees, int(seed), X.shape[1])


def forest_votes(model: ForestModel, X) -> np.ndarray:
    """(n_trees, n_samples) matrix of per-tree labels"""
    X = _check_inputs(X, model.n_features)
    return np.vstack([tree.predict(X) for tree in model.trees])


def forest_critical_values(model: ForestModel, X) -> np.ndarray:
    votes = forest_votes(model, X)
    return (votes == FEMALE_LABEL).sum(axis=0) / model.n_trees


def forest_decide(model: ForestModel, x) -> Decision:
    ratio = float(forest_critical_values(model, getattr(x, "values", x))[0])
    return Decision(Gender.FEMALE if ratio >= 0.5 else Gender.MALE, ratio)


def forest_oob_accuracy(model: ForestModel, X, y) -> float:
    """Accuracy of each sample's vote among trees whose bootstrap left it out"""
    X = _check_inputs(X, model.n_features)
    y = encode_labels(y)
    votes = forest_votes(model, X)
    female = np.zeros(len(y))
    total = np.zeros(len(y))
    for t in range(model.n_trees):
        out_of_bag = np.ones(len(y), dtype=bool)
        out_of_bag[bootstrap_indices(model.seed, t, len(y))] = False
        total += out_of_bag
        female += out_of_bag & (votes[t] == FEMALE_LABEL)
    scored = total > 0
    if not scored.any():
        raise InvariantError("No sample is out of bag for any tree")
    predicted = np.where(female[scored] / total[scored] >= 0.5, FEMALE_LABEL, MALE_LABEL)
    return float(np.mean(predicted == y[scored]))


# ============ strategies ============

@dataclass(frozen=True)
class ClassifierParams:
    classifier: str = "svm"
    C: float = 1.0
    tol: float = 1e-6
    n_trees: int = 100
    min_leaf: int = 1
    max_features: str = "sqrt"

    def __post_init__(self):
        if not self.C > 0:
            raise ConfigError(f"learn.C must be positive, got {self.C}")
        if not self.tol > 0:
            raise ConfigError(f"learn.tol must be positive, got {self.tol}")
        if self.n_trees < 1:
            raise ConfigError(f"learn.n_trees must be >= 1, got {self.n_trees}")
        if self.min_leaf < 1:
            raise ConfigError(f"learn.min_leaf must be >= 1, got {self.min_leaf}")
        if self.max_features not in ("sqrt", "log2", "all"):
            raise ConfigError(f"learn.max_features must be sqrt, log2 or all, got {self.max_features}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


Model = Union[SvmModel, ForestModel]


class ClassifierStrategy(ABC):
    """Abstract strategy: train a gender model and report critical values"""

    def __init__(self, params: ClassifierParams = ClassifierParams(), n_jobs: int = 1):
        self.params = params
        self.n_jobs = n_jobs

    @abstractmethod
    def train(self, X, y, seed: int) -> Model:
        pass

    @abstractmethod
    def critical_values(self, model: Model, X) -> np.ndarray:
        pass

    @property
    @abstractmethod
    def threshold(self) -> float:
        """Critical values >= threshold are Female"""

    @abstractmethod
    def get_classifier_name(self) -> str:
        pass

    def decide(self, model: Model, X) -> List[Decision]:
        values = self.critical_values(model, X)
        return [Decision(Gender.FEMALE if v >= self.threshold else Gender.MALE, float(v)) for v in values]


class SvmStrategy(ClassifierStrategy):
    """Linear-kernel SVM; critical value is the signed hyperplane distance"""

    threshold = 0.0

    def train(self, X, y, seed: int) -> SvmModel:
        return train_linear_svm(X, y, C=self.params.C, seed=seed, tol=self.params.tol)

    def critical_values(self, model: SvmModel, X) -> np.ndarray:
        return svm_critical_values(model, X)

    def get_classifier_name(self) -> str:
        return "svm"


class ForestStrategy(ClassifierStrategy):
    """Random forest; critical value is the Female voting ratio"""

    threshold = 0.5

    def train(self, X, y, seed: int) -> ForestModel:
        max_features = None if self.params.max_features == "all" else self.params.max_features
        return train_random_forest(X, y, n_trees=self.params.n_trees, seed=seed, max_features=max_features,
                                   min_leaf=self.params.min_leaf, n_jobs=self.n_jobs)

    def critical_values(self, model: ForestModel, X) -> np.ndarray:
        return forest_critical_values(model, X)

    def get_classifier_name(self) -> str:
        return "forest"


# ============ model JSON ============

def model_to_dict(model: Model) -> Dict[str, Any]:
    if isinstance(model, SvmModel):
        return {
            "kind": "svm",
            "weights": model.weights.tolist(),
            "bias": model.bias,
            "C": model.C,
            "training_meta": asdict(model.training_meta),
        }
    return {
        "kind": "forest",
        "n_trees": model.n_trees,
        "seed": model.seed,
        "n_features": model.n_features,
        "trees": [tree.to_dict() for tree in model.trees],
    }


def model_from_dict(data: Dict[str, Any]) -> Model:
    try:
        if data["kind"] == "svm":
            return SvmModel(data["weights"], data["bias"], data["C"], TrainingMeta(**data["training_meta"]))
        if data["kind"] == "forest":
            trees = tuple(TreeArrays.from_dict(t) for t in data["trees"])
            return ForestModel(trees, data["n_trees"], data["seed"], data["n_features"])
    except (KeyError, TypeError) as e:
        raise ParseError(f"Malformed model JSON: missing or invalid field {e}") from e
    raise ParseError(f"Unknown model kind {data.get('kind')!r}")


def save_model(model: Model, path) -> Path:
    return dump_json(model_to_dict(model), path)


def load_model(path) -> Model:
    try:
        return model_from_dict(load_json(path))
    except ParseError as e:
        raise e.with_context(path=str(path))
