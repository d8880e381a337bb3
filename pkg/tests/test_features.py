"""
Unit Tests for difference and landmark features
tests/test_features.py
"""

from itertools import combinations

import numpy as np
import pytest

from face3d.analysis.features import (
    SubjectPair,
    expression_delta,
    form_subject_pairs,
    landmark_coord_features,
    landmark_distance_features,
    pairwise_distances,
)
from face3d.errors import InvariantError, KindMismatch, SubjectMismatch
from face3d.geometry.curves import FeatureKind, FeatureVector
from face3d.geometry.mesh_io import Expression, Gender, Landmarks68
from face3d.observer import ExclusionRecorder, PipelineEvents


def _depth(value, shape=(2, 3)):
    return FeatureVector(np.full(shape[0] * shape[1], float(value)), FeatureKind.DEPTH, shape)


@pytest.fixture
def landmarks():
    rng = np.random.default_rng(5)
    return Landmarks68(rng.uniform(0.0, 400.0, size=(68, 2)))


class TestExpressionDelta:
    """Test expressive-minus-neutral features"""

    def test_difference_and_kind(self, make_record):
        neutral = make_record("S1")
        happy = make_record("S1", Expression.HAPPY)
        delta = expression_delta(SubjectPair((neutral, _depth(1.5)), (happy, _depth(4.0))))
        assert delta.kind is FeatureKind.DELTA_DEPTH
        assert delta.grid_shape == (2, 3)
        np.testing.assert_allclose(delta.values, 2.5)

    def test_subjects_must_match(self, make_record):
        pair = SubjectPair((make_record("S1"), _depth(0)), (make_record("S2", Expression.SAD), _depth(1)))
        with pytest.raises(SubjectMismatch):
            expression_delta(pair)

    def test_roles_must_match(self, make_record):
        pair = SubjectPair((make_record("S1", Expression.HAPPY), _depth(0)), (make_record("S1", Expression.SAD),
                                                                              _depth(1)))
        with pytest.raises(InvariantError):
            expression_delta(pair)

    def test_kinds_must_match(self, make_record):
        coord = FeatureVector(np.zeros(136), FeatureKind.COORD)
        pair = SubjectPair((make_record("S1"), _depth(0)), (make_record("S1", Expression.SAD), coord))
        with pytest.raises(KindMismatch):
            expression_delta(pair)

    def test_grid_shapes_must_match(self, make_record):
        pair = SubjectPair((make_record("S1"), _depth(0, (2, 3))), (make_record("S1", Expression.SAD),
                                                                    _depth(0, (3, 2))))
        with pytest.raises(KindMismatch):
            expression_delta(pair)


class TestLandmarkFeatures:
    """Test landmark coordinate and distance features"""

    def test_coordinates_are_nosetip_aligned(self, landmarks):
        vector = landmark_coord_features(landmarks)
        assert vector.kind is FeatureKind.COORD
        assert len(vector) == 136
        np.testing.assert_array_equal(vector.values[60:62], [0.0, 0.0])
        np.testing.assert_allclose(vector.values[0:2], landmarks.points[0] - landmarks.points[30])

    def test_distances_follow_pair_order(self, landmarks):
        vector = landmark_distance_features(landmarks)
        expected = [np.linalg.norm(landmarks.points[i] - landmarks.points[j]) for i, j in combinations(range(68), 2)]
        assert len(vector) == 2278
        np.testing.assert_allclose(vector.values, expected, rtol=1e-12)

    def test_distances_are_translation_invariant(self, landmarks):
        moved = Landmarks68(landmarks.points + [13.0, -7.0])
        np.testing.assert_allclose(pairwise_distances(moved.points), pairwise_distances(landmarks.points),
                                   atol=1e-9)


class TestPairing:
    """Test neutral/expressive pairing"""

    def test_pairs_follow_manifest_order(self, make_record):
        records = [make_record("S1", Expression.HAPPY), make_record("S1"), make_record("S1", Expression.SAD),
                   make_record("S2", gender=Gender.MALE), make_record("S2", Expression.DISGUST, Gender.MALE)]
        vectors = {r.scan_id: _depth(i) for i, r in enumerate(records)}
        pairs = form_subject_pairs(records, vectors)
        assert [p.expressive[0].scan_id for p in pairs] == ["S1_HP", "S1_SD", "S2_DI"]
        assert all(p.neutral[0].expression is Expression.NEUTRAL for p in pairs)
        assert pairs[2].subject_id == "S2" and pairs[2].expression is Expression.DISGUST

    def test_subject_without_neutral_is_excluded(self, make_record, caplog):
        records = [make_record("S1"), make_record("S1", Expression.HAPPY), make_record("S3", Expression.SAD)]
        vectors = {r.scan_id: _depth(0) for r in records}
        events = PipelineEvents()
        recorder = ExclusionRecorder()
        events.attach(recorder)
        pairs = form_subject_pairs(records, vectors, events)
        assert len(pairs) == 1
        assert recorder.records == [{"scan_id": "S3_SD", "subject_id": "S3", "reason": "subject has no neutral scan"}]
        assert "S3 has no neutral scan" in caplog.text

    def test_scans_without_vectors_are_skipped(self, make_record):
        records = [make_record("S1"), make_record("S1", Expression.HAPPY)]
        assert form_subject_pairs(records, {"S1_HP": _depth(0)}) == []
