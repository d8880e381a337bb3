"""
Loading and saving of 3D face data, landmark files and the dataset manifest
face3d/geometry/mesh_io.py

Supported mesh grammars (all text, `.` decimal separator, `#` starts a comment
line in XYZ and RANGE_GRID files):

* PLY_ASCII  - Stanford PLY, ``format ascii 1.0``, ``element vertex N`` with
  x/y/z properties (extra properties ignored), optional ``element face M`` with
  triangle lists ``3 i j k``.
* XYZ        - one vertex per line, ``x y z``.
* RANGE_GRID - ``rows=R`` and ``cols=C`` header lines, one line of R*C validity
  flags (0/1, row-major), then the X, Y and Z blocks, each R lines of C values.
  Vertices are the valid cells in row-major order.

Manifest: CSV with the header
``scan_id,subject_id,gender,expression,ethnicity,age,mesh_path,landmarks_path``.
Relative paths are resolved against the manifest's directory.
"""

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple
import logging
import os

import numpy as np
import pandas as pd

from ..errors import (
    CountError,
    DuplicateScanError,
    InvariantError,
    IoError,
    ParseError,
    UnknownLabelError,
)

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = [
    "scan_id", "subject_id", "gender", "expression",
    "ethnicity", "age", "mesh_path", "landmarks_path",
]
AGE_FILTER_YEARS = 40
N_LANDMARKS = 68
DEFAULT_NOSETIP_LANDMARK = 30


class Gender(Enum):
    FEMALE = "Female"
    MALE = "Male"


class Expression(Enum):
    NEUTRAL = "Neutral"
    HAPPY = "Happy"
    DISGUST = "Disgust"
    SURPRISE = "Surprise"
    SAD = "Sad"

    @property
    def code(self) -> str:
        return EXPRESSION_CODES[self]


EXPRESSIONS: Tuple[Expression, ...] = tuple(Expression)
NON_NEUTRAL: Tuple[Expression, ...] = tuple(e for e in Expression if e is not Expression.NEUTRAL)
EXPRESSION_CODES = {
    Expression.NEUTRAL: "NT",
    Expression.HAPPY: "HP",
    Expression.DISGUST: "DI",
    Expression.SURPRISE: "SP",
    Expression.SAD: "SD",
}


class Ethnicity(Enum):
    ASIAN = "Asian"
    NON_ASIAN = "NonAsian"


class MeshFormat(Enum):
    PLY_ASCII = "ply"
    XYZ = "xyz"
    RANGE_GRID = "grid"

    @classmethod
    def from_path(cls, path) -> "MeshFormat":
        suffix = Path(path).suffix.lower().lstrip(".")
        for fmt in cls:
            if fmt.value == suffix:
                return fmt
        if suffix in ("rng", "range"):
            return cls.RANGE_GRID
        raise ParseError(f"Cannot infer mesh format from extension '.{suffix}'", path)


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class RangeGrid:
    """Range-scanner lattice: per-cell validity and the vertex index of valid cells"""

    valid: np.ndarray
    index: np.ndarray

    def __post_init__(self):
        valid = np.array(self.valid, dtype=bool)
        index = np.array(self.index, dtype=np.int64)
        if valid.ndim != 2 or valid.shape != index.shape:
            raise InvariantError("Grid validity and index maps must be equal-shape 2D arrays")
        if np.any(index[~valid] != -1):
            raise InvariantError("Invalid grid cells must carry index -1")
        object.__setattr__(self, "valid", _readonly(valid))
        object.__setattr__(self, "index", _readonly(index))

    @property
    def rows(self) -> int:
        return self.valid.shape[0]

    @property
    def cols(self) -> int:
        return self.valid.shape[1]

    @classmethod
    def from_valid(cls, valid: np.ndarray) -> "RangeGrid":
        """Index valid cells in row-major order"""
        valid = np.asarray(valid, dtype=bool)
        index = np.full(valid.shape, -1, dtype=np.int64)
        index[valid] = np.arange(int(valid.sum()))
        return cls(valid, index)


@dataclass(frozen=True, eq=False)
class Mesh:
    """3D facial surface in millimeters. Arrays are stored read-only."""

    vertices: np.ndarray
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    grid: Optional[RangeGrid] = None

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(vertices)):
            raise InvariantError("Mesh has NaN or infinite vertex coordinates")
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise InvariantError(f"Face index out of range for {len(vertices)} vertices")
        if self.grid is not None and int(self.grid.valid.sum()) != len(vertices):
            raise InvariantError(
                f"Grid has {int(self.grid.valid.sum())} valid cells but mesh has {len(vertices)} vertices"
            )
        object.__setattr__(self, "vertices", _readonly(vertices))
        object.__setattr__(self, "faces", _readonly(faces))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def has_faces(self) -> bool:
        return len(self.faces) > 0

    @property
    def has_connectivity(self) -> bool:
        return self.grid is not None or self.has_faces

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        """Same topology, new vertex positions"""
        return Mesh(vertices, self.faces, self.grid)


@dataclass(frozen=True)
class ScanRecord:
    scan_id: str
    subject_id: str
    gender: Gender
    expression: Expression
    ethnicity: Ethnicity
    age: int
    mesh_path: Path
    landmarks_path: Optional[Path] = None

    def __post_init__(self):
        if self.age < 0:
            raise InvariantError(f"Negative age {self.age}", {"scan_id": self.scan_id})

    def to_row(self, base_dir: Optional[Path] = None) -> Dict[str, str]:
        def rel(p: Optional[Path]) -> str:
            if p is None:
                return ""
            if base_dir is not None:
                try:
                    return Path(os.path.relpath(Path(p).resolve(), Path(base_dir).resolve())).as_posix()
                except ValueError:
                    pass
            return Path(p).as_posix()

        return {
            "scan_id": self.scan_id,
            "subject_id": self.subject_id,
            "gender": self.gender.value,
            "expression": self.expression.value,
            "ethnicity": self.ethnicity.value,
            "age": str(self.age),
            "mesh_path": rel(self.mesh_path),
            "landmarks_path": rel(self.landmarks_path),
        }


@dataclass(frozen=True, eq=False)
class Landmarks68:
    """68 ordered 2D landmarks in pixel coordinates"""

    points: np.ndarray
    nosetip_index: int = DEFAULT_NOSETIP_LANDMARK

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.shape != (N_LANDMARKS, 2):
            raise CountError(f"Expected {N_LANDMARKS} landmarks, got array of shape {points.shape}")
        if not np.all(np.isfinite(points)):
            raise InvariantError("Landmarks contain NaN or infinite coordinates")
        if not 0 <= self.nosetip_index < N_LANDMARKS:
            raise InvariantError(f"Nosetip index {self.nosetip_index} outside 0..{N_LANDMARKS - 1}")
        object.__setattr__(self, "points", _readonly(points))

    @property
    def nosetip(self) -> np.ndarray:
        return self.points[self.nosetip_index]


# ============ low-level parsing helpers ============

def _content_lines(path: Path, skip_comments: bool = True) -> Iterator[Tuple[int, str]]:
    """Yield (1-based line number, stripped line) for non-empty lines"""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or (skip_comments and line.startswith("#")):
                    continue
                yield lineno, line
    except FileNotFoundError as e:
        raise IoError(f"File not found: {path}", {"path": str(path)}) from e
    except UnicodeDecodeError as e:
        raise ParseError(f"File is not UTF-8 text ({e.reason})", path) from e
    except OSError as e:
        raise IoError(f"Cannot read file: {e}", {"path": str(path)}) from e


def _parse_floats(tokens: Sequence[str], path: Path, lineno: int, expected: Optional[int] = None) -> List[float]:
    if expected is not None and len(tokens) != expected:
        raise ParseError(f"Expected {expected} values, found {len(tokens)}", path, lineno)
    try:
        return [float(t) for t in tokens]
    except ValueError as e:
        raise ParseError(f"Non-numeric value: {e}", path, lineno) from e


def _parse_int(token: str, path: Path, lineno: int) -> int:
    try:
        return int(token)
    except ValueError as e:
        raise ParseError(f"Expected an integer, found '{token}'", path, lineno) from e


# ============ mesh loaders ============

def _load_xyz(path: Path) -> Mesh:
    rows = [_parse_floats(line.split(), path, lineno, expected=3) for lineno, line in _content_lines(path)]
    return Mesh(np.array(rows, dtype=np.float64).reshape(-1, 3))


def _load_ply_ascii(path: Path) -> Mesh:
    lines = list(_content_lines(path, skip_comments=False))
    if not lines or lines[0][1] != "ply":
        raise ParseError("Missing 'ply' magic line", path, lines[0][0] if lines else None)

    n_vertices: Optional[int] = None
    n_faces = 0
    vertex_props: List[str] = []
    current_element = None
    body_start = None
    for pos, (lineno, line) in enumerate(lines[1:], start=1):
        tokens = line.split()
        keyword = tokens[0]
        if keyword == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise ParseError("Only 'format ascii' PLY files are supported", path, lineno)
        elif keyword in ("comment", "obj_info"):
            continue
        elif keyword == "element":
            if len(tokens) != 3:
                raise ParseError("Malformed element line", path, lineno)
            current_element = tokens[1]
            count = _parse_int(tokens[2], path, lineno)
            if current_element == "vertex":
                n_vertices = count
            elif current_element == "face":
                n_faces = count
            elif count:
                raise ParseError(f"Unsupported PLY element '{current_element}'", path, lineno)
        elif keyword == "property":
            if current_element == "vertex":
                vertex_props.append(tokens[-1])
        elif keyword == "end_header":
            body_start = pos + 1
            break
        else:
            raise ParseError(f"Unknown header keyword '{keyword}'", path, lineno)

    if body_start is None:
        raise ParseError("Missing 'end_header'", path)
    if n_vertices is None:
        raise ParseError("Missing 'element vertex' declaration", path)
    try:
        xi, yi, zi = (vertex_props.index(axis) for axis in ("x", "y", "z"))
    except ValueError as e:
        raise ParseError(f"Vertex element lacks x/y/z properties: {vertex_props}", path) from e

    body = lines[body_start:]
    if len(body) != n_vertices + n_faces:
        raise ParseError(
            f"Header declares {n_vertices} vertices and {n_faces} faces "
            f"but body has {len(body)} lines", path,
        )

    vertices = np.empty((n_vertices, 3), dtype=np.float64)
    for i, (lineno, line) in enumerate(body[:n_vertices]):
        values = _parse_floats(line.split(), path, lineno, expected=len(vertex_props))
        vertices[i] = (values[xi], values[yi], values[zi])

    faces = np.empty((n_faces, 3), dtype=np.int64)
    for i, (lineno, line) in enumerate(body[n_vertices:]):
        tokens = line.split()
        if len(tokens) != 4 or tokens[0] != "3":
            raise ParseError("Only triangle faces ('3 i j k') are supported", path, lineno)
        faces[i] = [_parse_int(t, path, lineno) for t in tokens[1:]]

    return Mesh(vertices, faces)


def _load_range_grid(path: Path) -> Mesh:
    lines = list(_content_lines(path))
    header: Dict[str, int] = {}
    for lineno, line in lines[:2]:
        key, sep, value = line.partition("=")
        if not sep or key.strip() not in ("rows", "cols"):
            raise ParseError("Expected 'rows=R' and 'cols=C' header lines", path, lineno)
        header[key.strip()] = _parse_int(value.strip(), path, lineno)
    if set(header) != {"rows", "cols"}:
        raise ParseError("Expected 'rows=R' and 'cols=C' header lines", path)
    rows, cols = header["rows"], header["cols"]
    if rows <= 0 or cols <= 0:
        raise ParseError(f"Grid dimensions must be positive, got {rows}x{cols}", path)

    body = lines[2:]
    if len(body) != 1 + 3 * rows:
        raise ParseError(
            f"Expected 1 flag line and {3 * rows} coordinate lines, found {len(body)} lines", path
        )

    flag_lineno, flag_line = body[0]
    flag_tokens = flag_line.split()
    if len(flag_tokens) != rows * cols or any(t not in ("0", "1") for t in flag_tokens):
        raise ParseError(f"Flag line must hold {rows * cols} values of 0/1", path, flag_lineno)
    valid = np.array([t == "1" for t in flag_tokens], dtype=bool).reshape(rows, cols)

    blocks = np.empty((3, rows, cols), dtype=np.float64)
    for b in range(3):
        for r in range(rows):
            lineno, line = body[1 + b * rows + r]
            blocks[b, r] = _parse_floats(line.split(), path, lineno, expected=cols)

    vertices = np.stack([blocks[0][valid], blocks[1][valid], blocks[2][valid]], axis=1)
    return Mesh(vertices, grid=RangeGrid.from_valid(valid))


_LOADERS = {
    MeshFormat.PLY_ASCII: _load_ply_ascii,
    MeshFormat.XYZ: _load_xyz,
    MeshFormat.RANGE_GRID: _load_range_grid,
}


def load_mesh(path, fmt: Optional[MeshFormat] = None) -> Mesh:
    """Load a mesh; the format defaults to the one implied by the file extension"""
    path = Path(path)
    fmt = fmt or MeshFormat.from_path(path)
    mesh = _LOADERS[fmt](path)
    logger.debug(f"Loaded {fmt.name} mesh {path} with {mesh.n_vertices} vertices, {len(mesh.faces)} faces")
    return mesh


def _format_row(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def save_mesh(mesh: Mesh, path, fmt: MeshFormat = MeshFormat.PLY_ASCII,
              vertex_colors: Optional[np.ndarray] = None) -> Path:
    """Write a mesh as text. Floats use the shortest exact round-trip representation."""
    path = Path(path)
    if fmt is MeshFormat.RANGE_GRID:
        raise IoError("Saving RANGE_GRID files is not supported", {"path": str(path)})

    lines: List[str] = []
    if fmt is MeshFormat.XYZ:
        if mesh.has_faces:
            logger.warning(f"XYZ has no face record; dropping {len(mesh.faces)} faces when saving {path}")
        lines.extend(_format_row(v) for v in mesh.vertices)
    else:
        colors = None
        if vertex_colors is not None:
            colors = np.asarray(vertex_colors, dtype=np.uint8).reshape(-1, 3)
            if len(colors) != mesh.n_vertices:
                raise InvariantError("One colour per vertex is required")
        lines += ["ply", "format ascii 1.0", f"element vertex {mesh.n_vertices}",
                  "property double x", "property double y", "property double z"]
        if colors is not None:
            lines += ["property uchar red", "property uchar green", "property uchar blue"]
        lines += [f"element face {len(mesh.faces)}", "property list uchar int vertex_indices", "end_header"]
        for i, v in enumerate(mesh.vertices):
            row = _format_row(v)
            if colors is not None:
                row += " " + " ".join(str(int(c)) for c in colors[i])
            lines.append(row)
        lines.extend(f"3 {a} {b} {c}" for a, b, c in mesh.faces)

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as e:
        raise IoError(f"Cannot write mesh: {e}", {"path": str(path)}) from e
    return path


# ============ landmarks ============

def load_landmarks(path, nosetip_index: int = DEFAULT_NOSETIP_LANDMARK) -> Landmarks68:
    path = Path(path)
    points = []
    for lineno, line in _content_lines(path):
        values = _parse_floats(line.split(), path, lineno, expected=2)
        if not all(np.isfinite(values)):
            raise ParseError("Landmark coordinates must be finite", path, lineno)
        points.append(values)
    if len(points) != N_LANDMARKS:
        raise CountError(f"Expected {N_LANDMARKS} landmark lines, found {len(points)}", {"path": str(path)})
    return Landmarks68(np.array(points), nosetip_index)


def save_landmarks(landmarks: Landmarks68, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(_format_row(p) for p in landmarks.points) + "\n")
    except OSError as e:
        raise IoError(f"Cannot write landmarks: {e}", {"path": str(path)}) from e
    return path


# ============ manifest ============

def _parse_label(enum_cls, value: str, column: str, path: Path, lineno: int):
    try:
        return enum_cls(value)
    except ValueError:
        allowed = ", ".join(e.value for e in enum_cls)
        raise UnknownLabelError(
            f"Unknown {column} '{value}' (allowed: {allowed})", {"path": str(path), "line": lineno}
        ) from None


def load_manifest(path, allow_duplicates: bool = False) -> List[ScanRecord]:
    """Parse and validate the dataset manifest.

    Duplicate (subject_id, expression) pairs are an error unless
    `allow_duplicates` is set, which the manifest-filter command uses before
    keeping only the first scan of each pair.
    """
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError as e:
        raise IoError(f"Manifest not found: {path}", {"path": str(path)}) from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ParseError(f"Malformed manifest CSV: {e}", path) from e

    if list(df.columns) != MANIFEST_COLUMNS:
        raise ParseError(f"Manifest header must be {','.join(MANIFEST_COLUMNS)}", path, 1)

    base_dir = path.parent
    records: List[ScanRecord] = []
    seen: Dict[Tuple[str, Expression], str] = {}
    seen_ids = set()
    for i, row in enumerate(df.itertuples(index=False)):
        lineno = i + 2
        row = row._asdict()
        scan_id = row["scan_id"].strip()
        subject_id = row["subject_id"].strip()
        if not scan_id or not subject_id:
            raise ParseError("scan_id and subject_id must be non-empty", path, lineno)
        if scan_id in seen_ids:
            raise DuplicateScanError(f"Duplicate scan_id '{scan_id}'", {"path": str(path), "line": lineno})
        gender = _parse_label(Gender, row["gender"].strip(), "gender", path, lineno)
        expression = _parse_label(Expression, row["expression"].strip(), "expression", path, lineno)
        ethnicity = _parse_label(Ethnicity, row["ethnicity"].strip(), "ethnicity", path, lineno)
        age = _parse_int(row["age"].strip(), path, lineno)
        if age < 0:
            raise ParseError(f"Age must be non-negative, got {age}", path, lineno)
        if age > AGE_FILTER_YEARS:
            logger.warning(f"Scan {scan_id}: age {age} exceeds the {AGE_FILTER_YEARS}-year study filter")

        key = (subject_id, expression)
        if key in seen and allow_duplicates:
            logger.warning(f"Subject {subject_id} has a repeated {expression.value} scan '{scan_id}'")
        elif key in seen:
            raise DuplicateScanError(
                f"Subject '{subject_id}' has more than one {expression.value} scan "
                f"('{seen[key]}' and '{scan_id}')", {"path": str(path), "line": lineno},
            )
        seen.setdefault(key, scan_id)
        seen_ids.add(scan_id)

        mesh_path = row["mesh_path"].strip()
        if not mesh_path:
            raise ParseError("mesh_path must be non-empty", path, lineno)
        landmarks = row["landmarks_path"].strip()
        records.append(ScanRecord(
            scan_id=scan_id,
            subject_id=subject_id,
            gender=gender,
            expression=expression,
            ethnicity=ethnicity,
            age=age,
            mesh_path=base_dir / mesh_path,
            landmarks_path=(base_dir / landmarks) if landmarks else None,
        ))

    logger.info(f"Loaded manifest {path}: {len(records)} scans, "
                f"{len({r.subject_id for r in records})} subjects")
    return records


def save_manifest(records: Sequence[ScanRecord], path) -> Path:
    """Write records with paths relative to the manifest directory when possible"""
    path = Path(path)
    base_dir = path.parent
    df = pd.DataFrame([r.to_row(base_dir) for r in records], columns=MANIFEST_COLUMNS)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise IoError(f"Cannot write manifest: {e}", {"path": str(path)}) from e
    return path


def filter_manifest(records: Sequence[ScanRecord], max_age: int = AGE_FILTER_YEARS,
                    require_pair: bool = True) -> Tuple[List[ScanRecord], List[Tuple[ScanRecord, str]]]:
    """Apply the study's dataset filter.

    Keeps, in manifest order, the first scan of each (subject, expression) of
    subjects aged at most `max_age`; with `require_pair`, only subjects having
    a neutral and at least one expressive scan. Returns
    (kept, [(excluded record, reason), ...]).
    """
    excluded: List[Tuple[ScanRecord, str]] = []
    first: Dict[Tuple[str, Expression], ScanRecord] = {}
    for record in records:
        if record.age > max_age:
            excluded.append((record, f"age {record.age} > {max_age}"))
        elif (record.subject_id, record.expression) in first:
            excluded.append((record, "not the first scan of this subject and expression"))
        else:
            first[(record.subject_id, record.expression)] = record

    by_subject: Dict[str, List[ScanRecord]] = {}
    for record in first.values():
        by_subject.setdefault(record.subject_id, []).append(record)

    kept_subjects = {
        subject for subject, recs in by_subject.items()
        if not require_pair or (any(r.expression is Expression.NEUTRAL for r in recs)
                                and any(r.expression is not Expression.NEUTRAL for r in recs))
    }
    kept = []
    for record in first.values():
        if record.subject_id in kept_subjects:
            kept.append(record)
        else:
            excluded.append((record, "subject lacks a neutral or an expressive scan"))
    return kept, excluded
