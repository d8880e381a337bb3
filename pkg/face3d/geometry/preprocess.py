"""
Geometric preprocessing of raw 3D faces
face3d/geometry/preprocess.py

Pipeline order: hole filling -> central cropping around the nosetip ->
Laplacian smoothing -> ICP frontalization against a reference template.
"""

from dataclasses import asdict, dataclass
from typing import Dict, List, NamedTuple, Optional, Tuple
import logging

import numpy as np
from scipy import ndimage, sparse
from scipy.spatial import cKDTree

from ..errors import (
    ConfigError,
    DegenerateConfiguration,
    EmptyMesh,
    EmptyResult,
    InvariantError,
    UnsupportedTopology,
)
from .mesh_io import Mesh, RangeGrid

logger = logging.getLogger(__name__)

NOSETIP_CYLINDER_MM = 40.0
# extra template surface kept beyond the scan crop radius
TEMPLATE_MARGIN_MM = 20.0
_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class PreprocessConfig:
    crop_radius_mm: float = 80.0
    smooth_iterations: int = 10
    smooth_lambda: float = 0.5
    icp_max_iters: int = 60
    icp_tol_mm: float = 1e-4
    icp_align_centroids: bool = True
    template_path: Optional[str] = None

    def __post_init__(self):
        if not self.crop_radius_mm > 0:
            raise ConfigError(f"preprocess.crop_radius_mm must be positive, got {self.crop_radius_mm}")
        if self.smooth_iterations < 0:
            raise ConfigError(f"preprocess.smooth_iterations must be >= 0, got {self.smooth_iterations}")
        if not 0 < self.smooth_lambda < 1:
            raise ConfigError(f"preprocess.smooth_lambda must lie in (0, 1), got {self.smooth_lambda}")
        if self.icp_max_iters < 1:
            raise ConfigError(f"preprocess.icp_max_iters must be >= 1, got {self.icp_max_iters}")
        if not self.icp_tol_mm > 0:
            raise ConfigError(f"preprocess.icp_tol_mm must be positive, got {self.icp_tol_mm}")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x -> rotation @ x + translation, millimeters"""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > _ORTHO_TOL:
            raise InvariantError("Rotation matrix is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > _ORTHO_TOL:
            raise InvariantError("Rotation matrix determinant is not +1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying `first`, then self"""
        return RigidTransform(self.rotation @ first.rotation,
                              self.rotation @ first.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    @property
    def angle_deg(self) -> float:
        cos_angle = np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.degrees(np.arccos(cos_angle)))

    def to_dict(self) -> Dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}


class IcpResult(NamedTuple):
    mesh: Mesh
    transform: RigidTransform
    residual_history: List[float]


# ============ topology helpers ============

_GRID_OFFSETS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def _shift(array: np.ndarray, dr: int, dc: int, fill) -> np.ndarray:
    """out[r, c] = array[r + dr, c + dc], `fill` outside the grid"""
    out = np.full_like(array, fill)
    rows, cols = array.shape[:2]
    src_r = slice(max(dr, 0), rows + min(dr, 0))
    dst_r = slice(max(-dr, 0), rows + min(-dr, 0))
    src_c = slice(max(dc, 0), cols + min(dc, 0))
    dst_c = slice(max(-dc, 0), cols + min(-dc, 0))
    out[dst_r, dst_c] = array[src_r, src_c]
    return out


def _edges(mesh: Mesh) -> np.ndarray:
    """Undirected vertex adjacency as an (E, 2) array, i < j"""
    if mesh.grid is not None:
        index = mesh.grid.index
        pairs = []
        for a, b in ((index[:, :-1], index[:, 1:]), (index[:-1, :], index[1:, :])):
            both = (a >= 0) & (b >= 0)
            pairs.append(np.stack([a[both], b[both]], axis=1))
        edges = np.concatenate(pairs)
    elif mesh.has_faces:
        f = mesh.faces
        edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    else:
        raise UnsupportedTopology("Operation needs a range grid or faces; got a bare point cloud")
    edges = np.sort(edges, axis=1)
    return np.unique(edges, axis=0)


def _adjacency(mesh: Mesh) -> sparse.csr_matrix:
    edges = _edges(mesh)
    n = mesh.n_vertices
    data = np.ones(2 * len(edges))
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))


def _boundary_vertices(mesh: Mesh) -> np.ndarray:
    """Boolean mask of vertices lying on an open boundary"""
    mask = np.zeros(mesh.n_vertices, dtype=bool)
    if mesh.grid is not None:
        valid = mesh.grid.valid
        complete = np.ones_like(valid)
        for dr, dc in _GRID_OFFSETS:
            complete &= _shift(valid, dr, dc, False)
        mask[mesh.grid.index[valid & ~complete]] = True
    elif mesh.has_faces:
        f = mesh.faces
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        unique, counts = np.unique(edges, axis=0, return_counts=True)
        mask[unique[counts == 1].ravel()] = True
    return mask


# ============ hole filling ============

def _fill_grid_holes(mesh: Mesh) -> Mesh:
    grid = mesh.grid
    valid = grid.valid.copy()
    positions = np.full(valid.shape + (3,), np.nan)
    positions[valid] = mesh.vertices[grid.index[valid]]

    labels, n_components = ndimage.label(~valid)
    border_labels = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    interior = (labels > 0) & ~np.isin(labels, border_labels)
    if not interior.any():
        return mesh

    new_vertices = []
    new_index = grid.index.copy()
    next_index = mesh.n_vertices
    while True:
        counts = np.zeros(valid.shape, dtype=np.int64)
        sums = np.zeros(valid.shape + (3,))
        for dr, dc in _GRID_OFFSETS:
            nb_valid = _shift(valid, dr, dc, False)
            counts += nb_valid
            sums += np.where(nb_valid[..., None], _shift(np.nan_to_num(positions), dr, dc, 0.0), 0.0)
        fill = interior & ~valid & (counts >= 2)
        if not fill.any():
            break
        positions[fill] = sums[fill] / counts[fill][:, None]
        for r, c in zip(*np.nonzero(fill)):
            new_index[r, c] = next_index
            new_vertices.append(positions[r, c])
            next_index += 1
        valid |= fill

    logger.debug(f"Filled {len(new_vertices)} interior grid cells")
    vertices = np.vstack([mesh.vertices, np.array(new_vertices).reshape(-1, 3)])
    return Mesh(vertices, mesh.faces, RangeGrid(valid, new_index))


def _boundary_loops(faces: np.ndarray) -> List[List[int]]:
    """Closed loops of directed boundary edges"""
    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    undirected = np.sort(directed, axis=1)
    _, inverse, counts = np.unique(undirected, axis=0, return_inverse=True, return_counts=True)
    boundary = directed[counts[inverse.ravel()] == 1]
    successor: Dict[int, int] = {}
    for a, b in boundary:
        successor.setdefault(int(a), int(b))

    loops = []
    visited = set()
    for start in sorted(successor):
        if start in visited:
            continue
        loop = [start]
        visited.add(start)
        current = successor[start]
        while current != start and current in successor and current not in visited:
            loop.append(current)
            visited.add(current)
            current = successor[current]
        if current == start and len(loop) >= 3:
            loops.append(loop)
    return loops


def _fill_face_holes(mesh: Mesh) -> Mesh:
    loops = _boundary_loops(mesh.faces)
    if len(loops) <= 1:
        return mesh

    def perimeter(loop):
        pts = mesh.vertices[loop]
        return float(np.linalg.norm(pts - np.roll(pts, -1, axis=0), axis=1).sum())

    outer = max(range(len(loops)), key=lambda i: perimeter(loops[i]))
    vertices = [mesh.vertices]
    faces = [mesh.faces]
    next_index = mesh.n_vertices
    for i, loop in enumerate(loops):
        if i == outer:
            continue
        vertices.append(mesh.vertices[loop].mean(axis=0, keepdims=True))
        loop_arr = np.array(loop)
        # reversed boundary direction keeps the fan consistently oriented
        faces.append(np.stack([np.roll(loop_arr, -1), loop_arr, np.full(len(loop), next_index)], axis=1))
        next_index += 1
    logger.debug(f"Closed {len(loops) - 1} mesh holes")
    return Mesh(np.vstack(vertices), np.vstack(faces))


def fill_holes(mesh: Mesh) -> Mesh:
    """Fill interior holes; originally valid vertices keep their index and position"""
    if mesh.grid is not None:
        return _fill_grid_holes(mesh)
    if mesh.has_faces:
        return _fill_face_holes(mesh)
    raise UnsupportedTopology("Hole filling needs a range grid or faces; got a bare point cloud")


# ============ nosetip, cropping, smoothing ============

def detect_nosetip(mesh: Mesh, cylinder_radius_mm: float = NOSETIP_CYLINDER_MM) -> np.ndarray:
    """Highest vertex (max z) within a vertical cylinder around the xy-centroid"""
    if mesh.n_vertices == 0:
        raise EmptyMesh("Cannot detect the nosetip of an empty mesh")
    xy = mesh.vertices[:, :2]
    inside = np.linalg.norm(xy - xy.mean(axis=0), axis=1) <= cylinder_radius_mm
    if not inside.any():
        inside[:] = True
    candidates = np.flatnonzero(inside)
    # argmax returns the first maximum, i.e. the smallest vertex index
    best = candidates[np.argmax(mesh.vertices[candidates, 2])]
    return mesh.vertices[best].copy()


def crop_face(mesh: Mesh, center: np.ndarray, radius_mm: float) -> Mesh:
    """Keep vertices within a Euclidean sphere (boundary inclusive)"""
    if not radius_mm > 0:
        raise ConfigError(f"Crop radius must be positive, got {radius_mm}")
    keep = np.linalg.norm(mesh.vertices - np.asarray(center, dtype=np.float64), axis=1) <= radius_mm
    if not keep.any():
        raise EmptyResult(f"No vertex lies within {radius_mm} mm of the crop center")
    if keep.all():
        return mesh

    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[keep] = np.arange(int(keep.sum()))
    faces = mesh.faces
    if len(faces):
        faces = remap[faces[np.all(keep[faces], axis=1)]]
    grid = None
    if mesh.grid is not None:
        old = mesh.grid.index
        index = np.where(old >= 0, remap[np.maximum(old, 0)], -1)
        grid = RangeGrid(index >= 0, index)
    return Mesh(mesh.vertices[keep], faces, grid)


def smooth(mesh: Mesh, iterations: int, lam: float) -> Mesh:
    """Uniform umbrella Laplacian smoothing; boundary vertices stay fixed"""
    if not 0 < lam < 1:
        raise ConfigError(f"Smoothing lambda must lie in (0, 1), got {lam}")
    if iterations < 0:
        raise ConfigError(f"Smoothing iterations must be >= 0, got {iterations}")
    adjacency = _adjacency(mesh)
    if iterations == 0:
        return mesh

    degree = np.asarray(adjacency.sum(axis=1)).ravel()
    movable = (degree > 0) & ~_boundary_vertices(mesh)
    inv_degree = np.zeros_like(degree)
    inv_degree[movable] = 1.0 / degree[movable]

    vertices = mesh.vertices.copy()
    for _ in range(iterations):
        mean_neighbors = (adjacency @ vertices) * inv_degree[:, None]
        vertices[movable] += lam * (mean_neighbors[movable] - vertices[movable])
    return mesh.with_vertices(vertices)


# ============ ICP frontalization ============

def best_rigid_fit(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Least-squares rotation + translation mapping source onto target (SVD, reflection-corrected)"""
    source_centroid = source.mean(axis=0)
    target_centroid = target.mean(axis=0)
    src = source - source_centroid
    dst = target - target_centroid
    if len(source) < 3 or np.linalg.matrix_rank(src) < 2:
        raise DegenerateConfiguration("Correspondence set has fewer than three non-collinear points")

    H = src.T @ dst
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = target_centroid - R @ source_centroid
    return RigidTransform(R, t)


def _rms(distances: np.ndarray) -> float:
    return float(np.sqrt(np.mean(distances ** 2)))


def _grid_triangles(grid: RangeGrid) -> np.ndarray:
    """Two triangles per grid cell, keeping those whose three corners are valid"""
    index = grid.index
    v00, v01 = index[:-1, :-1].ravel(), index[:-1, 1:].ravel()
    v10, v11 = index[1:, :-1].ravel(), index[1:, 1:].ravel()
    triangles = np.concatenate([np.stack([v00, v01, v10], axis=1), np.stack([v10, v01, v11], axis=1)])
    return triangles[np.all(triangles >= 0, axis=1)]


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...i->...", a, b)


def _closest_on_segments(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    dd = _dot(d, d)
    t = np.clip(_dot(p - a, d) / np.where(dd > 0, dd, 1.0), 0.0, 1.0)
    return a + t[..., None] * d


def closest_points_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest point to p on each triangle (a, b, c); all arguments broadcast over leading axes"""
    ab, ac = b - a, c - a
    normal = np.cross(ab, ac)
    nn = _dot(normal, normal)
    flat = nn > 1e-18
    safe_nn = np.where(flat, nn, 1.0)
    projected = p - (_dot(p - a, normal) / safe_nn)[..., None] * normal

    aq = projected - a
    d00, d01, d11 = _dot(ab, ab), _dot(ab, ac), _dot(ac, ac)
    d20, d21 = _dot(aq, ab), _dot(aq, ac)
    v = (d11 * d20 - d01 * d21) / safe_nn
    w = (d00 * d21 - d01 * d20) / safe_nn
    inside = flat & (v >= 0) & (w >= 0) & (v + w <= 1)

    # outside the triangle the closest point lies on one of its edges
    candidates = np.stack([_closest_on_segments(p, a, b),
                           _closest_on_segments(p, b, c),
                           _closest_on_segments(p, c, a)])
    gaps = np.linalg.norm(candidates - p, axis=-1)
    on_edge = np.take_along_axis(candidates, np.argmin(gaps, axis=0)[None, ..., None], axis=0)[0]
    return np.where(inside[..., None], projected, on_edge)


class SurfaceMatcher:
    """Closest-point queries against a mesh surface.

    Triangles come from the faces, else from the range grid; a bare point
    cloud falls back to its nearest vertex.
    """

    def __init__(self, mesh: Mesh, n_candidates: int = 12):
        if mesh.n_vertices == 0:
            raise EmptyMesh("Cannot match points against an empty mesh")
        self.vertices = mesh.vertices
        if mesh.has_faces:
            triangles = mesh.faces
        elif mesh.grid is not None:
            triangles = _grid_triangles(mesh.grid)
        else:
            triangles = np.zeros((0, 3), dtype=np.int64)

        if len(triangles):
            self.corners = self.vertices[triangles]
            self.tree = cKDTree(self.corners.mean(axis=1))
            self.n_candidates = min(n_candidates, len(triangles))
        else:
            self.corners = None
            self.tree = cKDTree(self.vertices)
            self.n_candidates = 1

    @property
    def has_surface(self) -> bool:
        return self.corners is not None

    def closest(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(closest surface points, distances) for an (N, 3) query array"""
        points = np.asarray(points, dtype=np.float64)
        if not self.has_surface:
            distances, nearest = self.tree.query(points)
            return self.vertices[nearest], distances

        _, candidates = self.tree.query(points, k=self.n_candidates)
        candidates = np.asarray(candidates).reshape(len(points), -1)
        corners = self.corners[candidates]
        query = points[:, None, :]
        found = closest_points_on_triangles(query, corners[..., 0, :], corners[..., 1, :], corners[..., 2, :])
        gaps = np.linalg.norm(found - query, axis=-1)
        best = np.argmin(gaps, axis=1)
        rows = np.arange(len(points))
        return found[rows, best], gaps[rows, best]


def frontalize_icp(mesh: Mesh, template: Mesh, config: PreprocessConfig = PreprocessConfig()) -> IcpResult:
    """Point-to-point ICP of `mesh` onto the surface of `template`.

    Every source point is paired with its closest point on the template
    triangles and the pairs are fitted with `best_rigid_fit`.
    residual_history[i] is the RMS point-to-surface distance after i updates,
    and is non-increasing: an update that would raise it ends the loop.
    """
    if mesh.n_vertices == 0 or template.n_vertices == 0:
        raise EmptyMesh("ICP needs non-empty source and template meshes")

    matcher = SurfaceMatcher(template)
    if not matcher.has_surface:
        logger.warning("ICP template has no triangles: matching against its vertices")
    transform = RigidTransform.identity()
    if config.icp_align_centroids:
        transform = RigidTransform(np.eye(3), template.vertices.mean(axis=0) - mesh.vertices.mean(axis=0))
    points = transform.apply(mesh.vertices)
    targets, distances = matcher.closest(points)
    residual = _rms(distances)
    history = [residual]

    for _ in range(config.icp_max_iters):
        step = best_rigid_fit(points, targets)
        moved = step.apply(points)
        new_targets, new_distances = matcher.closest(moved)
        new_residual = _rms(new_distances)
        if new_residual > residual:
            break
        points, targets = moved, new_targets
        transform = step.compose(transform)
        history.append(new_residual)
        improvement = residual - new_residual
        residual = new_residual
        if improvement < config.icp_tol_mm:
            break

    logger.debug(f"ICP finished after {len(history) - 1} updates, residual {residual:.6f} mm, "
                 f"rotation {transform.angle_deg:.3f} deg")
    return IcpResult(mesh.with_vertices(points), transform, history)


# ============ full pipeline ============

@dataclass(frozen=True, eq=False)
class PreprocessedScan:
    mesh: Mesh
    nosetip: np.ndarray
    transform: RigidTransform
    residual_history: Tuple[float, ...]


class Preprocessor:
    """Runs fill -> crop -> smooth -> frontalize against one nosetip-centered template"""

    def __init__(self, template: Mesh, config: PreprocessConfig = PreprocessConfig()):
        self.config = config
        tip = detect_nosetip(template)
        centered = template.with_vertices(template.vertices - tip)
        self.template = crop_face(centered, np.zeros(3), config.crop_radius_mm + TEMPLATE_MARGIN_MM)

    def run(self, mesh: Mesh) -> PreprocessedScan:
        cfg = self.config
        if mesh.has_connectivity:
            mesh = fill_holes(mesh)
        else:
            logger.warning("Point cloud without grid or faces: skipping hole filling and smoothing")

        tip = detect_nosetip(mesh)
        mesh = crop_face(mesh, tip, cfg.crop_radius_mm)
        if mesh.has_connectivity:
            mesh = smooth(mesh, cfg.smooth_iterations, cfg.smooth_lambda)

        tip = detect_nosetip(mesh)
        centered = mesh.with_vertices(mesh.vertices - tip)
        aligned, transform, history = frontalize_icp(centered, self.template, cfg)
        nosetip = detect_nosetip(aligned)
        return PreprocessedScan(aligned, nosetip, transform, tuple(history))
