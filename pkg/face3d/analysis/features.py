"""
Expression-difference features and 2D landmark features
face3d/analysis/features.py
"""

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple
import logging

import numpy as np
from scipy.spatial.distance import pdist

from ..errors import InvariantError, KindMismatch, SubjectMismatch
from ..geometry.curves import FeatureKind, FeatureVector
from ..geometry.mesh_io import Expression, Landmarks68, ScanRecord
from ..observer import PipelineEvents

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SubjectPair:
    """An expressive scan and the neutral scan of the same subject"""

    neutral: Tuple[ScanRecord, FeatureVector]
    expressive: Tuple[ScanRecord, FeatureVector]

    @property
    def subject_id(self) -> str:
        return self.neutral[0].subject_id

    @property
    def expression(self) -> Expression:
        return self.expressive[0].expression


def expression_delta(pair: SubjectPair) -> FeatureVector:
    """expressive - neutral, element-wise"""
    neutral_record, neutral_vec = pair.neutral
    expressive_record, expressive_vec = pair.expressive
    if neutral_record.subject_id != expressive_record.subject_id:
        raise SubjectMismatch(
            f"Cannot pair scans of subjects '{neutral_record.subject_id}' and '{expressive_record.subject_id}'"
        )
    if neutral_record.expression is not Expression.NEUTRAL:
        raise InvariantError(f"Scan {neutral_record.scan_id} is not a neutral scan")
    if expressive_record.expression is Expression.NEUTRAL:
        raise InvariantError(f"Scan {expressive_record.scan_id} is not an expressive scan")
    if (neutral_vec.kind is not expressive_vec.kind or len(neutral_vec) != len(expressive_vec)
            or neutral_vec.grid_shape != expressive_vec.grid_shape):
        raise KindMismatch(
            f"Feature kinds differ: {neutral_vec.kind.value}[{len(neutral_vec)}] vs "
            f"{expressive_vec.kind.value}[{len(expressive_vec)}]"
        )
    return FeatureVector(expressive_vec.values - neutral_vec.values, neutral_vec.kind.delta, neutral_vec.grid_shape)


def landmark_coord_features(landmarks: Landmarks68) -> FeatureVector:
    """Nosetip-aligned coordinates, flattened (x0, y0, ..., x67, y67)"""
    aligned = landmarks.points - landmarks.nosetip
    return FeatureVector(aligned.reshape(-1), FeatureKind.COORD)


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    """Euclidean distances of all unordered pairs i < j, lexicographic order"""
    return pdist(np.asarray(points, dtype=np.float64), metric="euclidean")


def landmark_distance_features(landmarks: Landmarks68) -> FeatureVector:
    return FeatureVector(pairwise_distances(landmarks.points), FeatureKind.DIST)


def form_subject_pairs(records: Sequence[ScanRecord],
                       vectors: Mapping[str, FeatureVector],
                       events: Optional[PipelineEvents] = None) -> List[SubjectPair]:
    """One pair per (subject, expressive scan) with that subject's neutral scan.

    Scans without a feature vector are skipped; subjects lacking a neutral scan
    are excluded with a warning. Pairs follow manifest order.
    """
    neutral: Dict[str, ScanRecord] = {}
    for record in records:
        if record.expression is Expression.NEUTRAL and record.scan_id in vectors:
            neutral.setdefault(record.subject_id, record)

    pairs: List[SubjectPair] = []
    warned = set()
    for record in records:
        if record.expression is Expression.NEUTRAL or record.scan_id not in vectors:
            continue
        base = neutral.get(record.subject_id)
        if base is None:
            if record.subject_id not in warned:
                logger.warning(f"Subject {record.subject_id} has no neutral scan; excluded from difference features")
                warned.add(record.subject_id)
            if events is not None:
                events.scan_excluded(record.scan_id, record.subject_id, "subject has no neutral scan")
            continue
        pairs.append(SubjectPair((base, vectors[base.scan_id]), (record, vectors[record.scan_id])))
    return pairs
