"""
Subject-independent evaluation protocols
face3d/analysis/evaluation.py

* expression-general leave-one-subject-out (all scans pooled)
* expression-specific train/test matrix over the five expressions
* expression-based evaluation on per-expression difference features
* critical-value histograms of expressive scans vs the same subjects' neutral scans

Every trained model is identified by a fold key; the audit maps fold keys to
the training subjects so subject independence can be checked after the fact.
"""

from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple
import logging

import numpy as np
from joblib import Parallel, delayed

from ..errors import EmptyGroup, InvariantError, SingleClassFold, TooFewSamples
from ..geometry.curves import FeatureKind, FeatureTable
from ..geometry.mesh_io import EXPRESSIONS, NON_NEUTRAL, Expression, Gender, ScanRecord
from ..observer import PipelineEvents
from ..seeding import derive_seed
from .learn import ClassifierStrategy, Decision, encode_labels

logger = logging.getLogger(__name__)

DEFAULT_BINS = 20
ALL_SUBJECTS = "*"


@dataclass(frozen=True, eq=False)
class LabeledFeatureSet:
    scan_ids: Tuple[str, ...]
    subject_ids: Tuple[str, ...]
    genders: Tuple[Gender, ...]
    expressions: Tuple[Expression, ...]
    X: np.ndarray
    kind: FeatureKind

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        n = len(self.scan_ids)
        if X.ndim != 2 or len(X) != n or not (len(self.subject_ids) == len(self.genders) == len(self.expressions) == n):
            raise InvariantError("Labeled feature set needs one label tuple entry per feature row")
        object.__setattr__(self, "X", X)

    def __len__(self) -> int:
        return len(self.scan_ids)

    @property
    def y(self) -> np.ndarray:
        return encode_labels(self.genders)

    @property
    def subjects(self) -> List[str]:
        return sorted(set(self.subject_ids))

    @classmethod
    def from_table(cls, table: FeatureTable, records: Sequence[ScanRecord]) -> "LabeledFeatureSet":
        by_id = {r.scan_id: r for r in records}
        missing = [s for s in table.scan_ids if s not in by_id]
        if missing:
            raise InvariantError(f"{len(missing)} feature rows have no manifest entry", {"scan_id": missing[0]})
        rows = [by_id[s] for s in table.scan_ids]
        return cls(
            scan_ids=table.scan_ids,
            subject_ids=tuple(r.subject_id for r in rows),
            genders=tuple(r.gender for r in rows),
            expressions=tuple(r.expression for r in rows),
            X=table.values,
            kind=table.kind,
        )

    def subset(self, mask: np.ndarray) -> "LabeledFeatureSet":
        idx = np.flatnonzero(mask)
        return LabeledFeatureSet(
            tuple(self.scan_ids[i] for i in idx),
            tuple(self.subject_ids[i] for i in idx),
            tuple(self.genders[i] for i in idx),
            tuple(self.expressions[i] for i in idx),
            self.X[idx],
            self.kind,
        )

    def for_expression(self, expression: Expression) -> "LabeledFeatureSet":
        return self.subset(np.array([e is expression for e in self.expressions], dtype=bool))


@dataclass(frozen=True)
class ScanDecision:
    scan_id: str
    subject_id: str
    expression: Expression
    true_gender: Gender
    decision: Decision
    fold: str

    @property
    def correct(self) -> bool:
        return self.decision.label is self.true_gender

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scan_id": self.scan_id,
            "subject_id": self.subject_id,
            "expression": self.expression.value,
            "true_gender": self.true_gender.value,
            "predicted_gender": self.decision.label.value,
            "critical_value": self.decision.critical_value,
            "fold": self.fold,
        }


@dataclass(frozen=True)
class Rates:
    female_rate: Optional[float]
    male_rate: Optional[float]
    overall_rate: float
    n_female: int
    n_male: int
    n_scans: int

    @classmethod
    def from_decisions(cls, per_scan: Sequence[ScanDecision]) -> "Rates":
        if not per_scan:
            raise EmptyGroup("Cannot compute classification rates over zero scans")
        female = [d.correct for d in per_scan if d.true_gender is Gender.FEMALE]
        male = [d.correct for d in per_scan if d.true_gender is Gender.MALE]
        return cls(
            female_rate=sum(female) / len(female) if female else None,
            male_rate=sum(male) / len(male) if male else None,
            overall_rate=(sum(female) + sum(male)) / len(per_scan),
            n_female=len(female),
            n_male=len(male),
            n_scans=len(per_scan),
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class EvalReport:
    per_scan: Tuple[ScanDecision, ...]
    rates: Rates
    config: Dict[str, Any]
    audit: Dict[str, Tuple[str, ...]]

    def recompute_rates(self) -> Rates:
        return Rates.from_decisions(self.per_scan)

    def verify_subject_independence(self) -> bool:
        """True when no scan was decided by a model trained on its own subject"""
        for item in self.per_scan:
            if item.subject_id in self.audit[item.fold]:
                return False
        return True

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config,
            "rates": self.rates.to_dict(),
            "per_scan": [d.to_dict() for d in self.per_scan],
            "audit": {fold: list(subjects) for fold, subjects in sorted(self.audit.items())},
        }


# ============ fold machinery ============

def _check_both_genders(y: np.ndarray, fold: str, held_out: str):
    if len(np.unique(y)) < 2:
        raise SingleClassFold(f"Training set of fold '{fold}' contains a single gender",
                              {"fold": fold, "held_out_subject": held_out})


def _train_and_decide(strategy: ClassifierStrategy, X_train, y_train, X_test, seed: int) -> List[Decision]:
    model = strategy.train(X_train, y_train, seed)
    return strategy.decide(model, X_test)


def _train_model(strategy: ClassifierStrategy, X_train, y_train, seed: int):
    return strategy.train(X_train, y_train, seed)


def loo_subject_cv(features: LabeledFeatureSet, strategy: ClassifierStrategy, master_seed: int,
                   n_jobs: int = 1, events: Optional[PipelineEvents] = None,
                   config: Optional[Mapping[str, Any]] = None) -> EvalReport:
    """Leave-one-subject-out: each fold tests every scan of one subject.

    Fold order follows sorted subject ids; the fold seed is derived from
    (master_seed, subject_id), so the report does not depend on n_jobs.
    """
    subjects = features.subjects
    if len(subjects) < 2:
        raise TooFewSamples(f"Leave-one-subject-out needs >= 2 subjects, got {len(subjects)}")
    y = features.y
    subject_arr = np.array(features.subject_ids, dtype=object)

    folds = []
    audit: Dict[str, Tuple[str, ...]] = {}
    for subject in subjects:
        test = subject_arr == subject
        _check_both_genders(y[~test], subject, subject)
        folds.append((subject, np.flatnonzero(~test), np.flatnonzero(test)))
        audit[subject] = tuple(sorted(set(subject_arr[~test])))

    results = Parallel(n_jobs=n_jobs)(
        delayed(_train_and_decide)(strategy, features.X[train], y[train], features.X[test],
                                   derive_seed(master_seed, subject))
        for subject, train, test in folds
    )

    decisions: Dict[int, ScanDecision] = {}
    for (subject, train, test), fold_decisions in zip(folds, results):
        for i, decision in zip(test, fold_decisions):
            decisions[i] = ScanDecision(features.scan_ids[i], subject, features.expressions[i],
                                        features.genders[i], decision, subject)
        n_correct = sum(decisions[i].correct for i in test)
        if events is not None:
            events.fold_completed(subject, subject, len(train), n_correct, len(test))

    per_scan = tuple(decisions[i] for i in range(len(features)))
    echo = dict(config or {})
    echo.update({"classifier": strategy.get_classifier_name(), "master_seed": master_seed,
                 "feature_kind": features.kind.value, "protocol": "leave_one_subject_out"})
    report = EvalReport(per_scan, Rates.from_decisions(per_scan), echo, audit)
    logger.info(f"LOO ({strategy.get_classifier_name()}, {features.kind.value}): "
                f"{len(subjects)} folds, overall rate {report.rates.overall_rate:.4f}")
    return report


# ============ expression-specific matrix ============

@dataclass(frozen=True)
class MatrixCell:
    train_expression: Expression
    test_expression: Expression
    per_scan: Tuple[ScanDecision, ...]

    @property
    def n_test(self) -> int:
        return len(self.per_scan)

    @property
    def n_correct(self) -> int:
        return sum(d.correct for d in self.per_scan)

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_test


@dataclass(frozen=True)
class ExpressionMatrix:
    cells: Dict[Tuple[Expression, Expression], MatrixCell]
    config: Dict[str, Any]
    audit: Dict[str, Tuple[str, ...]]

    def accuracy(self, train: Expression, test: Expression) -> float:
        return self.cells[(train, test)].accuracy

    def n_test(self, train: Expression, test: Expression) -> int:
        return self.cells[(train, test)].n_test

    def accuracy_grid(self) -> np.ndarray:
        return np.array([[self.accuracy(tr, te) for te in EXPRESSIONS] for tr in EXPRESSIONS])

    def diagonal_mean(self, weighted: bool = True) -> float:
        return _mean_of([self.cells[(e, e)] for e in EXPRESSIONS], weighted)

    def off_diagonal_mean(self, weighted: bool = True) -> float:
        return _mean_of([c for (tr, te), c in self.cells.items() if tr is not te], weighted)

    def row_means(self, train: Expression) -> Dict[str, float]:
        """Scan-weighted and unweighted means of one training row, excluding the diagonal"""
        off = [self.cells[(train, te)] for te in EXPRESSIONS if te is not train]
        return {"weighted": _mean_of(off, True), "unweighted": _mean_of(off, False)}

    def verify_subject_independence(self) -> bool:
        return all(d.subject_id not in self.audit[d.fold] for c in self.cells.values() for d in c.per_scan)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config,
            "cells": [
                {"train": tr.value, "test": te.value, "accuracy": c.accuracy, "n_test": c.n_test,
                 "n_correct": c.n_correct, "per_scan": [d.to_dict() for d in c.per_scan]}
                for (tr, te), c in sorted(self.cells.items(), key=lambda kv: (EXPRESSIONS.index(kv[0][0]),
                                                                             EXPRESSIONS.index(kv[0][1])))
            ],
            "diagonal_mean": {"weighted": self.diagonal_mean(True), "unweighted": self.diagonal_mean(False)},
            "off_diagonal_mean": {"weighted": self.off_diagonal_mean(True),
                                  "unweighted": self.off_diagonal_mean(False)},
            "row_means": {tr.value: self.row_means(tr) for tr in EXPRESSIONS},
            "audit": {fold: list(subjects) for fold, subjects in sorted(self.audit.items())},
        }


def _mean_of(cells: Sequence[MatrixCell], weighted: bool) -> float:
    if weighted:
        return sum(c.n_correct for c in cells) / sum(c.n_test for c in cells)
    return float(np.mean([c.accuracy for c in cells]))


def _matrix_fold_key(train: Expression, held_out: str) -> str:
    return f"{train.code}:{held_out}"


def expression_specific_matrix(features: LabeledFeatureSet, strategy: ClassifierStrategy, master_seed: int,
                               n_jobs: int = 1, events: Optional[PipelineEvents] = None,
                               config: Optional[Mapping[str, Any]] = None) -> ExpressionMatrix:
    """Train on one expression subset, test on each expression subset.

    Per train expression, one model is trained with each of its subjects held
    out (the leave-one-subject-out folds) plus one model on the full subset.
    A test scan uses the model that held its subject out, or the full-subset
    model when its subject has no scan in the training subset. The diagonal
    is therefore exactly leave-one-subject-out within each expression.
    """
    y_all = features.y
    subject_arr = np.array(features.subject_ids, dtype=object)
    subsets: Dict[Expression, np.ndarray] = {}
    for expression in EXPRESSIONS:
        mask = np.array([e is expression for e in features.expressions], dtype=bool)
        if not mask.any():
            raise EmptyGroup(f"No {expression.value} scans for the expression-specific matrix")
        if len(np.unique(y_all[mask])) < 2:
            raise SingleClassFold(f"The {expression.value} subset contains a single gender",
                                  {"fold": expression.code})
        subsets[expression] = mask

    jobs = []
    audit: Dict[str, Tuple[str, ...]] = {}
    for train in EXPRESSIONS:
        mask = subsets[train]
        train_subjects = sorted(set(subject_arr[mask]))
        for held_out in train_subjects + [ALL_SUBJECTS]:
            rows = mask & (subject_arr != held_out)
            key = _matrix_fold_key(train, held_out)
            _check_both_genders(y_all[rows], key, held_out)
            audit[key] = tuple(sorted(set(subject_arr[rows])))
            seed = derive_seed(master_seed, held_out) if held_out != ALL_SUBJECTS \
                else derive_seed(master_seed, f"{train.value}:{ALL_SUBJECTS}")
            jobs.append((key, np.flatnonzero(rows), seed))

    models = Parallel(n_jobs=n_jobs)(
        delayed(_train_model)(strategy, features.X[rows], y_all[rows], seed) for _, rows, seed in jobs
    )
    model_by_key = {key: model for (key, _, _), model in zip(jobs, models)}
    n_train_by_key = {key: len(rows) for key, rows, _ in jobs}

    cells: Dict[Tuple[Expression, Expression], MatrixCell] = {}
    for train in EXPRESSIONS:
        train_subjects = set(subject_arr[subsets[train]])
        for test in EXPRESSIONS:
            idx = np.flatnonzero(subsets[test])
            keys = [_matrix_fold_key(train, s if s in train_subjects else ALL_SUBJECTS) for s in subject_arr[idx]]
            per_scan: List[ScanDecision] = [None] * len(idx)
            for key in sorted(set(keys)):
                members = [p for p, k in enumerate(keys) if k == key]
                decisions = strategy.decide(model_by_key[key], features.X[idx[members]])
                for p, decision in zip(members, decisions):
                    i = idx[p]
                    per_scan[p] = ScanDecision(features.scan_ids[i], features.subject_ids[i],
                                               features.expressions[i], features.genders[i], decision, key)
                if events is not None:
                    events.fold_completed(f"{train.code}->{test.code}:{key}", key.split(":", 1)[1],
                                          n_train_by_key[key], sum(per_scan[p].correct for p in members),
                                          len(members))
            cells[(train, test)] = MatrixCell(train, test, tuple(per_scan))

    echo = dict(config or {})
    echo.update({"classifier": strategy.get_classifier_name(), "master_seed": master_seed,
                 "feature_kind": features.kind.value, "protocol": "expression_specific_matrix"})
    matrix = ExpressionMatrix(cells, echo, audit)
    logger.info(f"Expression matrix ({strategy.get_classifier_name()}): diagonal mean "
                f"{matrix.diagonal_mean():.4f}, off-diagonal mean {matrix.off_diagonal_mean():.4f}")
    return matrix


# ============ expression-based evaluation ============

def expression_based_eval(delta_features: LabeledFeatureSet, strategy: ClassifierStrategy, master_seed: int,
                          n_jobs: int = 1, events: Optional[PipelineEvents] = None,
                          config: Optional[Mapping[str, Any]] = None) -> Dict[Expression, EvalReport]:
    """Independent leave-one-subject-out run per expression on difference features"""
    if not delta_features.kind.is_delta:
        raise InvariantError(f"Expression-based evaluation needs difference features, got {delta_features.kind.value}")
    reports: Dict[Expression, EvalReport] = {}
    for expression in NON_NEUTRAL:
        subset = delta_features.for_expression(expression)
        if len(subset) == 0:
            logger.warning(f"No {expression.value} difference features; skipping that expression")
            continue
        echo = dict(config or {})
        echo["expression"] = expression.value
        reports[expression] = loo_subject_cv(subset, strategy, derive_seed(master_seed, expression.value),
                                             n_jobs=n_jobs, events=events, config=echo)
    if not reports:
        raise EmptyGroup("No expressive difference features to evaluate")
    return reports


# ============ critical-value histograms ============

@dataclass(frozen=True, eq=False)
class DecisionHistogram:
    expression: Expression
    edges: np.ndarray
    count_neutral: np.ndarray
    count_expressive: np.ndarray
    mean_neutral: float
    mean_expressive: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "expression": self.expression.value,
            "edges": self.edges.tolist(),
            "count_neutral": self.count_neutral.tolist(),
            "count_expressive": self.count_expressive.tolist(),
            "mean_neutral": self.mean_neutral,
            "mean_expressive": self.mean_expressive,
        }


HistogramSet = Dict[Expression, DecisionHistogram]


def histogram_edges(values: np.ndarray, bins: int) -> np.ndarray:
    """`bins` equal-width bins over the pooled range; a constant value gets a unit-wide range"""
    lo, hi = float(np.min(values)), float(np.max(values))
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def decision_histograms(report: EvalReport, records: Sequence[ScanRecord], bins: int = DEFAULT_BINS) -> HistogramSet:
    """Per non-neutral expression: critical values of the expressive scans vs
    the neutral scans of the same subjects, on shared bin edges."""
    if bins < 1:
        raise InvariantError(f"Histogram needs >= 1 bin, got {bins}")
    by_id = {r.scan_id: r for r in records}
    values: Dict[Tuple[str, Expression], List[float]] = {}
    for item in report.per_scan:
        record = by_id.get(item.scan_id)
        expression = record.expression if record is not None else item.expression
        subject = record.subject_id if record is not None else item.subject_id
        values.setdefault((subject, expression), []).append(item.decision.critical_value)

    histograms: HistogramSet = {}
    for expression in NON_NEUTRAL:
        subjects = sorted({s for (s, e) in values if e is expression})
        expressive = np.array([v for s in subjects for v in values[(s, expression)]])
        neutral = np.array([v for s in subjects for v in values.get((s, Expression.NEUTRAL), [])])
        if len(expressive) == 0 or len(neutral) == 0:
            raise EmptyGroup(f"No {'expressive' if len(expressive) == 0 else 'neutral'} critical values "
                             f"for {expression.value}", {"expression": expression.value})
        edges = histogram_edges(np.concatenate([expressive, neutral]), bins)
        histograms[expression] = DecisionHistogram(
            expression=expression,
            edges=edges,
            count_neutral=np.histogram(neutral, bins=edges)[0],
            count_expressive=np.histogram(expressive, bins=edges)[0],
            mean_neutral=float(neutral.mean()),
            mean_expressive=float(expressive.mean()),
        )
    return histograms
