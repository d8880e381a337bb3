"""
Statistical analysis of features
face3d/analysis/stats.py

Welch t-test saliency maps, per-group PCA explained-variance spectra,
demographic balance tests and mean absolute deformation maps.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
from scipy import linalg, special

from ..errors import DegenerateData, DegenerateVariance, InvariantError, TooFewSamples
from ..geometry.curves import DEFAULT_GRID_SHAPE
from ..geometry.mesh_io import NON_NEUTRAL, Ethnicity, Expression, Gender, ScanRecord
from .evaluation import LabeledFeatureSet

logger = logging.getLogger(__name__)

DEFAULT_ALPHAS = (0.01, 0.05, 0.10)
# eigenvalues below this fraction of the largest are numerically zero
_RANK_TOL = 1e-10


def _welch_core(mean_a, var_a, n_a, mean_b, var_b, n_b) -> Tuple[np.ndarray, np.ndarray]:
    """Element-wise Welch t statistic and two-tailed p; requires var_a/n_a + var_b/n_b > 0"""
    se_a = var_a / n_a
    se_b = var_b / n_b
    t = (mean_a - mean_b) / np.sqrt(se_a + se_b)
    df = (se_a + se_b) ** 2 / (se_a ** 2 / (n_a - 1) + se_b ** 2 / (n_b - 1))
    # two-tailed tail probability of Student's t via the regularized incomplete beta
    p = special.betainc(df / 2.0, 0.5, df / (df + t ** 2))
    return t, np.clip(p, 0.0, 1.0)


def _moments(values: np.ndarray, axis: int = 0):
    return values.mean(axis=axis), values.var(axis=axis, ddof=1), values.shape[axis]


def welch_t_test(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """Unequal-variance two-sample t-test. Returns (t, two-tailed p)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise TooFewSamples(f"Welch t-test needs >= 2 samples per group, got {len(a)} and {len(b)}")
    mean_a, var_a, n_a = _moments(a)
    mean_b, var_b, n_b = _moments(b)
    if var_a == 0 or var_b == 0:
        raise DegenerateVariance("Welch t-test needs nonzero variance in both groups")
    t, p = _welch_core(mean_a, var_a, n_a, mean_b, var_b, n_b)
    return float(t), float(p)


# ============ saliency ============

@dataclass(frozen=True, eq=False)
class SignificanceMap:
    t_values: np.ndarray
    p_values: np.ndarray
    masks: Dict[float, np.ndarray]

    def __post_init__(self):
        for alpha, mask in self.masks.items():
            if not np.array_equal(mask, self.p_values < alpha):
                raise InvariantError(f"Significance mask at alpha={alpha} does not match p < alpha")

    @property
    def alphas(self) -> List[float]:
        return sorted(self.masks)

    def density(self, alpha: float) -> float:
        return float(self.masks[alpha].mean())


def saliency_map(X: np.ndarray, genders: Sequence[Gender], alphas: Sequence[float] = DEFAULT_ALPHAS,
                 grid_shape: Tuple[int, int] = DEFAULT_GRID_SHAPE) -> SignificanceMap:
    """Per-cell Welch t-test of male minus female feature values.

    Cells with zero variance in either group get t = 0, p = 1.
    """
    X = np.asarray(X, dtype=np.float64)
    genders = list(genders)
    if X.ndim != 2 or X.shape[1] != grid_shape[0] * grid_shape[1] or len(genders) != len(X):
        raise InvariantError(f"Saliency input of shape {X.shape} does not match grid {grid_shape}")
    male = X[[g is Gender.MALE for g in genders]]
    female = X[[g is Gender.FEMALE for g in genders]]
    if len(male) < 2 or len(female) < 2:
        raise TooFewSamples(f"Saliency map needs >= 2 scans per gender, got {len(male)} male / {len(female)} female")

    mean_m, var_m, n_m = _moments(male)
    mean_f, var_f, n_f = _moments(female)
    degenerate = (var_m == 0) | (var_f == 0)
    t = np.zeros(X.shape[1])
    p = np.ones(X.shape[1])
    ok = ~degenerate
    t[ok], p[ok] = _welch_core(mean_m[ok], var_m[ok], n_m, mean_f[ok], var_f[ok], n_f)
    if degenerate.any():
        logger.warning(f"{int(degenerate.sum())} feature cells have zero variance in a gender group; "
                       f"reported as t=0, p=1")

    t = t.reshape(grid_shape)
    p = p.reshape(grid_shape)
    masks = {float(alpha): p < alpha for alpha in alphas}
    return SignificanceMap(t, p, masks)


# ============ PCA ============

@dataclass(frozen=True, eq=False)
class VarianceSpectrum:
    ratios: np.ndarray
    gender: Optional[Gender] = None
    expression: Optional[Expression] = None
    components: Optional[np.ndarray] = None
    n_samples: int = 0

    def __post_init__(self):
        ratios = np.asarray(self.ratios, dtype=np.float64)
        if np.any(np.diff(ratios) > 0):
            raise InvariantError("Explained-variance ratios must be non-increasing")
        object.__setattr__(self, "ratios", ratios)

    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.ratios)


def _orient(components: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude entry is positive"""
    lead = components[np.arange(len(components)), np.argmax(np.abs(components), axis=1)]
    return components * np.where(lead < 0, -1.0, 1.0)[:, None]


def pca_explained_variance(X, method: str = "auto", gender: Optional[Gender] = None,
                           expression: Optional[Expression] = None) -> VarianceSpectrum:
    """Explained-variance ratios of the column-centred data.

    `method` is "gram" (eigendecomposition of the n x n Gram matrix),
    "covariance" (d x d) or "auto" (Gram when n < d). Ratios are sorted
    descending and truncated at min(n - 1, d) and at the numerical rank.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise TooFewSamples(f"PCA needs >= 2 samples, got shape {X.shape}")
    n, d = X.shape
    if method == "auto":
        method = "gram" if n < d else "covariance"
    if method not in ("gram", "covariance"):
        raise InvariantError(f"Unknown PCA method '{method}'")

    Xc = X - X.mean(axis=0)
    if not np.any(Xc):
        raise DegenerateData("Data has zero total variance")

    if method == "gram":
        eigvals, eigvecs = linalg.eigh(Xc @ Xc.T)
    else:
        eigvals, eigvecs = linalg.eigh(Xc.T @ Xc)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]

    rank = min(n - 1, d)
    eigvals = eigvals[:rank]
    keep = eigvals > _RANK_TOL * eigvals[0]
    eigvals = eigvals[keep]
    eigvecs = eigvecs[:, :rank][:, keep]
    if len(eigvals) == 0 or eigvals[0] <= 0:
        raise DegenerateData("Data has zero total variance")

    if method == "gram":
        components = (Xc.T @ eigvecs / np.sqrt(eigvals)).T
    else:
        components = eigvecs.T
    ratios = eigvals / eigvals.sum()
    return VarianceSpectrum(ratios, gender, expression, _orient(components), n)


def variance_spectra(features: LabeledFeatureSet) -> List[VarianceSpectrum]:
    """One spectrum per (gender, expression) group with at least two scans"""
    spectra = []
    expressions = sorted(set(features.expressions), key=list(Expression).index)
    for expression in expressions:
        for gender in Gender:
            mask = np.array([g is gender and e is expression
                             for g, e in zip(features.genders, features.expressions)], dtype=bool)
            if mask.sum() < 2:
                logger.warning(f"Skipping PCA for {gender.value}/{expression.value}: {int(mask.sum())} scans")
                continue
            spectra.append(pca_explained_variance(features.X[mask], gender=gender, expression=expression))
    return spectra


# ============ demographic balance ============

@dataclass(frozen=True)
class BalanceReport:
    age_t: float
    age_p: float
    ethnicity_t: float
    ethnicity_p: float
    n_female: int
    n_male: int
    mean_age_female: float
    mean_age_male: float
    asian_fraction_female: float
    asian_fraction_male: float


def _tolerant_welch(a: np.ndarray, b: np.ndarray) -> Tuple[float, float]:
    """Welch test that also accepts zero variance: equal constants give p = 1, distinct ones p = 0"""
    mean_a, var_a, n_a = _moments(a)
    mean_b, var_b, n_b = _moments(b)
    if var_a == 0 and var_b == 0:
        if mean_a == mean_b:
            return 0.0, 1.0
        return float(np.copysign(np.inf, mean_a - mean_b)), 0.0
    t, p = _welch_core(mean_a, var_a, n_a, mean_b, var_b, n_b)
    return float(t), float(p)


def demographic_balance(records: Sequence[ScanRecord]) -> BalanceReport:
    """Age and ethnicity (0/1 encoded) t-tests between genders, one entry per subject"""
    subjects: Dict[str, ScanRecord] = {}
    for record in records:
        subjects.setdefault(record.subject_id, record)
    female = [r for r in subjects.values() if r.gender is Gender.FEMALE]
    male = [r for r in subjects.values() if r.gender is Gender.MALE]
    if len(female) < 2 or len(male) < 2:
        raise TooFewSamples(f"Balance tests need >= 2 subjects per gender, got {len(female)} female / {len(male)} male")

    age_f = np.array([r.age for r in female], dtype=np.float64)
    age_m = np.array([r.age for r in male], dtype=np.float64)
    asian_f = np.array([r.ethnicity is Ethnicity.ASIAN for r in female], dtype=np.float64)
    asian_m = np.array([r.ethnicity is Ethnicity.ASIAN for r in male], dtype=np.float64)
    age_t, age_p = _tolerant_welch(age_m, age_f)
    eth_t, eth_p = _tolerant_welch(asian_m, asian_f)
    return BalanceReport(age_t, age_p, eth_t, eth_p, len(female), len(male),
                         float(age_f.mean()), float(age_m.mean()), float(asian_f.mean()), float(asian_m.mean()))


# ============ deformation maps ============

def mean_abs_deformation(delta_features: LabeledFeatureSet,
                         grid_shape: Tuple[int, int] = DEFAULT_GRID_SHAPE) -> Dict[Tuple[Gender, Expression], np.ndarray]:
    """Cell-wise mean |expressive - neutral| per (gender, expression) group"""
    if not delta_features.kind.is_delta:
        raise InvariantError(f"Deformation maps need difference features, got {delta_features.kind.value}")
    maps = {}
    for expression in NON_NEUTRAL:
        for gender in Gender:
            mask = np.array([g is gender and e is expression
                             for g, e in zip(delta_features.genders, delta_features.expressions)], dtype=bool)
            if mask.any():
                maps[(gender, expression)] = np.abs(delta_features.X[mask]).mean(axis=0).reshape(grid_shape)
    return maps
