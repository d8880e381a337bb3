"""
Radial-curve depth representation of a frontalized face
face3d/geometry/curves.py

Curve j leaves the nosetip at angle 2*pi*j/n_curves; its point k lies at
radius (k+1)*r_max/n_points in the xy-plane. The feature is the surface
depth at that point relative to the nosetip.
"""

from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from ..errors import (
    AllInvalidCurve,
    ConfigError,
    DimensionMismatch,
    EmptyMesh,
    InvariantError,
    IoError,
    ParseError,
)
from ..jsonio import CSV_FLOAT_FORMAT
from .mesh_io import Mesh

logger = logging.getLogger(__name__)

# an xy distance below this counts as hitting the vertex exactly
_EXACT_HIT_MM = 1e-12


@dataclass(frozen=True)
class CurveConfig:
    n_curves: int = 100
    n_points: int = 40
    r_max_mm: float = 80.0
    support_radius_mm: float = 5.0
    n_neighbors: int = 3

    def __post_init__(self):
        if self.n_curves < 1 or self.n_points < 1:
            raise ConfigError(f"curves.n_curves and curves.n_points must be >= 1, "
                              f"got {self.n_curves} x {self.n_points}")
        if not self.r_max_mm > 0:
            raise ConfigError(f"curves.r_max_mm must be positive, got {self.r_max_mm}")
        if not self.support_radius_mm > 0:
            raise ConfigError(f"curves.support_radius_mm must be positive, got {self.support_radius_mm}")
        if self.n_neighbors < 1:
            raise ConfigError(f"curves.n_neighbors must be >= 1, got {self.n_neighbors}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.n_curves, self.n_points

    def to_dict(self) -> Dict:
        return asdict(self)


class FeatureKind(Enum):
    DEPTH = "Depth4000"
    COORD = "Coord136"
    DIST = "Dist2278"
    DELTA_DEPTH = "Delta4000"
    DELTA_COORD = "DeltaCoord136"
    DELTA_DIST = "DeltaDist2278"

    @property
    def is_delta(self) -> bool:
        return self in _DELTA_OF.values()

    @property
    def is_depth(self) -> bool:
        return self in (FeatureKind.DEPTH, FeatureKind.DELTA_DEPTH)

    @property
    def delta(self) -> "FeatureKind":
        """Kind of the expression difference of two vectors of this kind"""
        if self not in _DELTA_OF:
            raise InvariantError(f"{self.value} is already a difference feature")
        return _DELTA_OF[self]

    @property
    def fixed_length(self) -> Optional[int]:
        return _FIXED_LENGTH.get(self)


_DELTA_OF = {
    FeatureKind.DEPTH: FeatureKind.DELTA_DEPTH,
    FeatureKind.COORD: FeatureKind.DELTA_COORD,
    FeatureKind.DIST: FeatureKind.DELTA_DIST,
}
_FIXED_LENGTH = {
    FeatureKind.COORD: 136,
    FeatureKind.DELTA_COORD: 136,
    FeatureKind.DIST: 2278,
    FeatureKind.DELTA_DIST: 2278,
}
DEFAULT_GRID_SHAPE = (100, 40)


def expected_length(kind: FeatureKind, grid_shape: Tuple[int, int] = DEFAULT_GRID_SHAPE) -> int:
    if kind.is_depth:
        return int(grid_shape[0] * grid_shape[1])
    return kind.fixed_length


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Fixed-length feature vector. Depth kinds carry their (n_curves, n_points) grid shape."""

    values: np.ndarray
    kind: FeatureKind
    grid_shape: Tuple[int, int] = DEFAULT_GRID_SHAPE

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).ravel()
        length = expected_length(self.kind, self.grid_shape)
        if len(values) != length:
            raise DimensionMismatch(f"{self.kind.value} vector must have {length} values, got {len(values)}")
        if not np.all(np.isfinite(values)):
            raise InvariantError(f"{self.kind.value} vector contains NaN or infinite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "grid_shape", tuple(int(s) for s in self.grid_shape))

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True, eq=False)
class DepthFeatureGrid:
    depths: np.ndarray
    curve_angles: np.ndarray
    radii: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        depths = np.array(self.depths, dtype=np.float64)
        validity = np.array(self.validity, dtype=bool)
        if depths.ndim != 2 or validity.shape != depths.shape:
            raise InvariantError("Depth and validity grids must be equal-shape 2D arrays")
        if len(self.curve_angles) != depths.shape[0] or len(self.radii) != depths.shape[1]:
            raise InvariantError("Curve angles / radii do not match the depth grid shape")
        if not np.all(np.isfinite(depths)):
            raise InvariantError("Depth grid contains NaN after extraction")
        object.__setattr__(self, "depths", depths)
        object.__setattr__(self, "validity", validity)
        object.__setattr__(self, "curve_angles", np.array(self.curve_angles, dtype=np.float64))
        object.__setattr__(self, "radii", np.array(self.radii, dtype=np.float64))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depths.shape


def curve_angles(n_curves: int) -> np.ndarray:
    return 2.0 * np.pi * np.arange(n_curves) / n_curves


def curve_radii(n_points: int, r_max_mm: float) -> np.ndarray:
    return (np.arange(n_points) + 1) * (r_max_mm / n_points)


def sample_positions(config: CurveConfig) -> np.ndarray:
    """(n_curves, n_points, 2) xy offsets from the nosetip"""
    theta = curve_angles(config.n_curves)[:, None]
    r = curve_radii(config.n_points, config.r_max_mm)[None, :]
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)


def extract_radial_curves(mesh: Mesh, nosetip: np.ndarray, config: CurveConfig = CurveConfig()) -> DepthFeatureGrid:
    """Sample the surface depth along the radial curves.

    Depth is the inverse-distance weighted z of up to `n_neighbors` vertices
    within `support_radius_mm` in xy, minus the nosetip z. Unsupported cells
    are filled by linear interpolation along their curve.
    """
    if mesh.n_vertices == 0:
        raise EmptyMesh("Cannot extract curves from an empty mesh")
    nosetip = np.asarray(nosetip, dtype=np.float64)
    k = min(config.n_neighbors, mesh.n_vertices)

    offsets = sample_positions(config)
    query = offsets.reshape(-1, 2) + nosetip[:2]
    tree = cKDTree(mesh.vertices[:, :2])
    distances, indices = tree.query(query, k=k, distance_upper_bound=config.support_radius_mm)
    distances = distances.reshape(len(query), k)
    indices = indices.reshape(len(query), k)

    found = np.isfinite(distances)
    valid = found.any(axis=1)
    z = mesh.vertices[np.where(found, indices, 0), 2]

    with np.errstate(divide="ignore"):
        weights = np.where(found, 1.0 / distances, 0.0)
    exact = found & (distances <= _EXACT_HIT_MM)
    has_exact = exact.any(axis=1)
    # exact hits take the first coincident vertex's z
    weights[has_exact] = 0.0
    first_exact = np.argmax(exact, axis=1)
    weights[has_exact, first_exact[has_exact]] = 1.0

    depth = np.full(len(query), np.nan)
    depth[valid] = (weights[valid] * z[valid]).sum(axis=1) / weights[valid].sum(axis=1) - nosetip[2]

    shape = config.shape
    depth = depth.reshape(shape)
    valid = valid.reshape(shape)
    radii = curve_radii(config.n_points, config.r_max_mm)
    for j in range(config.n_curves):
        row_valid = valid[j]
        if not row_valid.any():
            raise AllInvalidCurve(f"Radial curve {j} has no surface support within "
                                  f"{config.support_radius_mm} mm", {"curve": j})
        if not row_valid.all():
            # np.interp holds the nearest valid value beyond either end
            depth[j] = np.interp(radii, radii[row_valid], depth[j, row_valid])

    n_invalid = int((~valid).sum())
    if n_invalid:
        logger.debug(f"{n_invalid} of {valid.size} curve samples had no support and were interpolated")
    return DepthFeatureGrid(depth, curve_angles(config.n_curves), radii, valid)


def grid_to_vector(grid: DepthFeatureGrid) -> FeatureVector:
    """Curve-major flatten: vector[j * n_points + k] = depths[j, k]"""
    return FeatureVector(grid.depths.reshape(-1), FeatureKind.DEPTH, grid.shape)


def vector_to_grid(vector: FeatureVector) -> np.ndarray:
    if not vector.kind.is_depth:
        raise InvariantError(f"{vector.kind.value} vectors have no curve grid")
    return vector.values.reshape(vector.grid_shape)


# ============ feature CSV ============

@dataclass(frozen=True, eq=False)
class FeatureTable:
    """Feature vectors of one kind, one row per scan, in file order"""

    scan_ids: Tuple[str, ...]
    kind: FeatureKind
    values: np.ndarray
    grid_shape: Tuple[int, int] = DEFAULT_GRID_SHAPE

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or len(values) != len(self.scan_ids):
            raise InvariantError("Feature table needs one row per scan id")
        length = expected_length(self.kind, self.grid_shape)
        if values.shape[1] != length:
            raise DimensionMismatch(f"{self.kind.value} table must have {length} columns, got {values.shape[1]}")
        object.__setattr__(self, "scan_ids", tuple(self.scan_ids))
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.scan_ids)

    def vector(self, scan_id: str) -> FeatureVector:
        return FeatureVector(self.values[self.scan_ids.index(scan_id)], self.kind, self.grid_shape)

    def items(self) -> Iterator[Tuple[str, FeatureVector]]:
        for scan_id, row in zip(self.scan_ids, self.values):
            yield scan_id, FeatureVector(row, self.kind, self.grid_shape)

    @classmethod
    def from_vectors(cls, items: Sequence[Tuple[str, FeatureVector]]) -> "FeatureTable":
        if not items:
            raise InvariantError("Cannot build a feature table from zero vectors")
        kinds = {v.kind for _, v in items}
        if len(kinds) != 1:
            raise InvariantError(f"Mixed feature kinds in one table: {sorted(k.value for k in kinds)}")
        first = items[0][1]
        return cls(tuple(s for s, _ in items), first.kind,
                   np.vstack([v.values for _, v in items]), first.grid_shape)


def write_feature_csv(table: FeatureTable, path) -> Path:
    """Header `scan_id,<Kind>_0,...`; values in index order with exact round-trip precision"""
    path = Path(path)
    columns = [f"{table.kind.value}_{i}" for i in range(table.values.shape[1])]
    df = pd.DataFrame(table.values, columns=columns)
    df.insert(0, "scan_id", list(table.scan_ids))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    except OSError as e:
        raise IoError(f"Cannot write feature CSV: {e}", {"path": str(path)}) from e
    logger.info(f"Wrote {len(table)} {table.kind.value} rows to {path}")
    return path


def read_feature_csv(path, grid_shape: Tuple[int, int] = DEFAULT_GRID_SHAPE) -> FeatureTable:
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype={"scan_id": str}, float_precision="round_trip")
    except FileNotFoundError as e:
        raise IoError(f"Feature CSV not found: {path}", {"path": str(path)}) from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ParseError(f"Malformed feature CSV: {e}", path) from e

    columns = list(df.columns)
    if not columns or columns[0] != "scan_id" or len(columns) < 2:
        raise ParseError("Feature CSV must start with a scan_id column followed by values", path, 1)
    prefix = columns[1].rsplit("_", 1)[0]
    try:
        kind = FeatureKind(prefix)
    except ValueError:
        raise ParseError(f"Unknown feature kind '{prefix}'", path, 1) from None
    expected = [f"{kind.value}_{i}" for i in range(len(columns) - 1)]
    if columns[1:] != expected:
        raise ParseError(f"{kind.value} columns must be numbered 0..{len(columns) - 2} in order", path, 1)

    try:
        values = df[expected].to_numpy(dtype=np.float64)
    except ValueError as e:
        raise ParseError(f"Non-numeric feature value: {e}", path) from e
    if not np.all(np.isfinite(values)):
        bad = int(np.argwhere(~np.isfinite(values))[0, 0])
        raise ParseError("Feature values must be finite", path, bad + 2)
    return FeatureTable(tuple(df["scan_id"]), kind, values, grid_shape)


def write_grid_csv(grid: np.ndarray, path, value_name: str = "value") -> Path:
    """Long-format per-cell table: curve, point, <value_name>"""
    path = Path(path)
    grid = np.asarray(grid)
    j, k = np.meshgrid(np.arange(grid.shape[0]), np.arange(grid.shape[1]), indexing="ij")
    df = pd.DataFrame({"curve": j.ravel(), "point": k.ravel(), value_name: grid.ravel()})
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    except OSError as e:
        raise IoError(f"Cannot write grid CSV: {e}", {"path": str(path)}) from e
    return path


def read_grid_csv(path, value_name: Optional[str] = None) -> np.ndarray:
    path = Path(path)
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except FileNotFoundError as e:
        raise IoError(f"Grid CSV not found: {path}", {"path": str(path)}) from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ParseError(f"Malformed grid CSV: {e}", path) from e
    if list(df.columns[:2]) != ["curve", "point"] or len(df.columns) < 3:
        raise ParseError("Grid CSV must have curve, point and a value column", path, 1)
    column = value_name or df.columns[2]
    if column not in df.columns:
        raise ParseError(f"Grid CSV has no column '{column}'", path, 1)
    shape = (int(df["curve"].max()) + 1, int(df["point"].max()) + 1)
    if len(df) != shape[0] * shape[1]:
        raise ParseError(f"Grid CSV has {len(df)} rows, expected {shape[0] * shape[1]}", path)
    grid = np.full(shape, np.nan)
    grid[df["curve"].to_numpy(), df["point"].to_numpy()] = df[column].to_numpy(dtype=np.float64)
    return grid
