"""
Published accuracies of the full pipeline on FRGCv2 (percent).

These need the license-restricted scans and cannot be reproduced on the
synthetic corpus; they are shown next to computed rates for orientation only.
"""

from typing import Optional

from ..geometry.mesh_io import Expression

# expression-general leave-one-subject-out, 3D depth features
GENERAL = {
    "svm": {"Female": 90.66, "Male": 91.24, "All": 90.99},
    "forest": {"Female": 88.17, "Male": 89.72, "All": 89.03},
}
GENERAL_SCANS = {"Female": 524, "Male": 652, "All": 1176}

# same-expression training and testing, summarised over the five expressions
EXPRESSION_SPECIFIC_DIAGONAL = 92.60
# mean over the Happy-trained row
EXPRESSION_SPECIFIC_HAPPY_ROW = 93.00

# expression-difference depth features, SVM, leave-one-subject-out per expression
EXPRESSION_BASED = {
    Expression.HAPPY: {"Female": 74.44, "Male": 82.01, "All": 79.15, "#Scans": 259},
    Expression.DISGUST: {"Female": 67.50, "Male": 75.47, "All": 72.04, "#Scans": 186},
    Expression.SURPRISE: {"Female": 63.48, "Male": 66.92, "All": 65.31, "#Scans": 245},
    Expression.SAD: {"Female": 65.16, "Male": 67.12, "All": 66.05, "#Scans": 162},
}

# 2D landmark baselines on static faces, SVM
LANDMARK_STATIC = {
    "coord": {"Female": 84.89, "Male": 87.58, "All": 86.31},
    "dist": {"Female": 86.23, "Male": 87.88, "All": 87.07},
}

# 2D landmark expression differences, SVM, overall rate per expression
LANDMARK_DELTA = {
    "coord": {Expression.HAPPY: 60.47, Expression.DISGUST: 59.68, Expression.SURPRISE: 60.82, Expression.SAD: 64.82},
    "dist": {Expression.HAPPY: 62.02, Expression.DISGUST: 55.38, Expression.SURPRISE: 66.94, Expression.SAD: 62.96},
}


def reference_rate(feature_kind: str, classifier: str, expression: Optional[Expression] = None) -> Optional[float]:
    """Published overall rate (percent) for an experiment, or None when none was reported"""
    if expression is None:
        if feature_kind == "depth":
            return GENERAL.get(classifier, {}).get("All")
        if classifier == "svm":
            return LANDMARK_STATIC.get(feature_kind, {}).get("All")
        return None
    if classifier != "svm":
        return None
    if feature_kind == "depth":
        return EXPRESSION_BASED.get(expression, {}).get("All")
    return LANDMARK_DELTA.get(feature_kind, {}).get(expression)
