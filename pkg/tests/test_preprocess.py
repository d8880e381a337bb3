"""
Unit Tests for hole filling, cropping, smoothing and ICP frontalization
tests/test_preprocess.py
"""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from face3d.analysis.synth import FaceModel, default_profile, grid_faces
from face3d.errors import (
    ConfigError,
    DegenerateConfiguration,
    EmptyMesh,
    EmptyResult,
    InvariantError,
    UnsupportedTopology,
)
from face3d.geometry.mesh_io import Mesh, RangeGrid
from face3d.geometry.preprocess import (
    PreprocessConfig,
    Preprocessor,
    RigidTransform,
    SurfaceMatcher,
    best_rigid_fit,
    closest_points_on_triangles,
    crop_face,
    detect_nosetip,
    fill_holes,
    frontalize_icp,
    smooth,
)


def _planar_grid_mesh(valid):
    """Range-grid mesh with vertex (r, c) at x = c, y = r, z = 0"""
    valid = np.asarray(valid, dtype=bool)
    rows, cols = np.nonzero(valid)
    vertices = np.stack([cols, rows, np.zeros(len(rows))], axis=1).astype(float)
    return Mesh(vertices, grid=RangeGrid.from_valid(valid))


class TestRigidTransform:
    """Test rigid transform algebra"""

    def test_compose_with_inverse_is_identity(self):
        transform = RigidTransform(Rotation.from_euler("xyz", [10, -20, 35], degrees=True).as_matrix(), [1, 2, 3])
        identity = transform.compose(transform.inverse())
        np.testing.assert_allclose(identity.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(identity.translation, 0.0, atol=1e-12)

    def test_compose_order(self):
        first = RigidTransform(np.eye(3), [1, 0, 0])
        second = RigidTransform(Rotation.from_euler("z", 90, degrees=True).as_matrix(), [0, 0, 0])
        point = np.array([[1.0, 0.0, 0.0]])
        np.testing.assert_allclose(second.compose(first).apply(point), second.apply(first.apply(point)))

    def test_angle(self):
        transform = RigidTransform(Rotation.from_rotvec([0, 0, np.radians(12.5)]).as_matrix(), [0, 0, 0])
        assert transform.angle_deg == pytest.approx(12.5)

    def test_rejects_reflection(self):
        with pytest.raises(InvariantError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), [0, 0, 0])

    def test_rejects_scaling(self):
        with pytest.raises(InvariantError):
            RigidTransform(2.0 * np.eye(3), [0, 0, 0])


class TestBestRigidFit:
    """Test the closed-form least-squares rigid fit"""

    def test_recovers_known_motion(self):
        rng = np.random.default_rng(3)
        source = rng.normal(size=(30, 3)) * 20.0
        truth = RigidTransform(Rotation.from_euler("xyz", [5, 40, -15], degrees=True).as_matrix(), [3, -2, 7])
        fit = best_rigid_fit(source, truth.apply(source))
        np.testing.assert_allclose(fit.rotation, truth.rotation, atol=1e-9)
        np.testing.assert_allclose(fit.translation, truth.translation, atol=1e-9)

    def test_collinear_points(self):
        line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateConfiguration):
            best_rigid_fit(line, line + 1.0)


class TestHoleFilling:
    """Test interior hole filling on grids and triangle meshes"""

    def test_interior_grid_hole_is_filled(self):
        valid = np.ones((7, 7), dtype=bool)
        valid[3, 3] = False
        mesh = _planar_grid_mesh(valid)
        filled = fill_holes(mesh)
        assert filled.n_vertices == mesh.n_vertices + 1
        np.testing.assert_array_equal(filled.vertices[:mesh.n_vertices], mesh.vertices)
        np.testing.assert_allclose(filled.vertices[filled.grid.index[3, 3]], [3.0, 3.0, 0.0])

    def test_border_gap_is_not_a_hole(self):
        valid = np.ones((5, 5), dtype=bool)
        valid[0, 2] = False
        mesh = _planar_grid_mesh(valid)
        assert fill_holes(mesh).n_vertices == mesh.n_vertices

    def test_larger_grid_hole_fills_from_the_rim(self):
        valid = np.ones((9, 9), dtype=bool)
        valid[3:6, 3:6] = False
        filled = fill_holes(_planar_grid_mesh(valid))
        assert filled.grid.valid.all()
        np.testing.assert_allclose(filled.vertices[:, 2], 0.0)

    def test_triangle_hole_gets_a_fan(self):
        """Removing the triangles around an interior vertex leaves a hexagonal hole"""
        xs, ys = np.meshgrid(np.arange(5.0), np.arange(5.0))
        vertices = np.stack([xs.ravel(), ys.ravel(), np.zeros(25)], axis=1)
        faces = grid_faces(5, 5)
        faces = faces[~np.any(faces == 12, axis=1)]
        mesh = Mesh(vertices, faces)
        filled = fill_holes(mesh)
        assert len(faces) == 26
        assert filled.n_vertices == 26
        assert len(filled.faces) == 32
        np.testing.assert_allclose(filled.vertices[25], [2.0, 2.0, 0.0])
        np.testing.assert_array_equal(filled.vertices[:25], vertices)

    def test_point_cloud(self):
        with pytest.raises(UnsupportedTopology):
            fill_holes(Mesh(np.zeros((4, 3))))


class TestNosetipAndCrop:
    """Test nosetip detection and spherical cropping"""

    def test_nosetip_of_dome(self, dome):
        np.testing.assert_allclose(detect_nosetip(dome), [0.0, 0.0, 30.0])

    def test_nosetip_tie_takes_first_vertex(self):
        mesh = Mesh([[0.0, 0.0, 1.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
        np.testing.assert_array_equal(detect_nosetip(mesh), [0.0, 0.0, 1.0])

    def test_nosetip_ignores_points_outside_cylinder(self):
        mesh = Mesh([[0.0, 0.0, 1.0], [1.0, 0.0, 2.0], [-1.0, 0.0, 0.0], [300.0, 0.0, 50.0]] + [[0.5, 0.5, 0.0]] * 4)
        np.testing.assert_array_equal(detect_nosetip(mesh), [1.0, 0.0, 2.0])

    def test_nosetip_of_empty_mesh(self):
        with pytest.raises(EmptyMesh):
            detect_nosetip(Mesh(np.zeros((0, 3))))

    def test_crop_is_boundary_inclusive(self):
        mesh = Mesh([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0], [3.0, 4.0, 0.1]])
        cropped = crop_face(mesh, [0.0, 0.0, 0.0], 5.0)
        assert cropped.n_vertices == 2

    def test_crop_remaps_faces(self, dome):
        cropped = crop_face(dome, [0.0, 0.0, 30.0], 12.0)
        assert 0 < cropped.n_vertices < dome.n_vertices
        assert cropped.faces.max() < cropped.n_vertices
        assert np.all(np.linalg.norm(cropped.vertices - [0.0, 0.0, 30.0], axis=1) <= 12.0)

    def test_crop_keeps_grid_consistent(self):
        cropped = crop_face(_planar_grid_mesh(np.ones((5, 5))), [2.0, 2.0, 0.0], 1.0)
        assert cropped.n_vertices == 5
        assert int(cropped.grid.valid.sum()) == 5

    def test_crop_is_idempotent(self, dome):
        once = crop_face(dome, [0.0, 0.0, 30.0], 12.0)
        twice = crop_face(once, [0.0, 0.0, 30.0], 12.0)
        assert twice is once
        np.testing.assert_array_equal(twice.vertices, once.vertices)
        np.testing.assert_array_equal(twice.faces, once.faces)

    def test_crop_to_nothing(self, dome):
        with pytest.raises(EmptyResult):
            crop_face(dome, [500.0, 0.0, 0.0], 1.0)


class TestSmoothing:
    """Test umbrella Laplacian smoothing"""

    def test_flat_grid_is_a_fixed_point(self):
        mesh = _planar_grid_mesh(np.ones((6, 6)))
        np.testing.assert_allclose(smooth(mesh, 5, 0.5).vertices, mesh.vertices, atol=1e-12)

    def test_spike_shrinks_and_boundary_stays(self):
        xs, ys = np.meshgrid(np.arange(7.0), np.arange(7.0))
        z = np.zeros((7, 7))
        z[3, 3] = 10.0
        z[0, 0] = 4.0
        vertices = np.stack([xs.ravel(), ys.ravel(), z.ravel()], axis=1)
        mesh = Mesh(vertices, grid_faces(7, 7))
        smoothed = smooth(mesh, 3, 0.5)
        assert smoothed.vertices[24, 2] < 10.0
        assert smoothed.vertices[0, 2] == 4.0

    def test_zero_iterations(self, dome):
        assert smooth(dome, 0, 0.5) is dome

    def test_invalid_lambda(self, dome):
        with pytest.raises(ConfigError):
            smooth(dome, 1, 1.5)

    def test_point_cloud(self):
        with pytest.raises(UnsupportedTopology):
            smooth(Mesh(np.zeros((4, 3))), 1, 0.5)


class TestSurfaceMatcher:
    """Test closest-point queries on triangles"""

    TRIANGLE = (np.array([0.0, 0.0, 0.0]), np.array([4.0, 0.0, 0.0]), np.array([0.0, 4.0, 0.0]))

    @pytest.mark.parametrize("point, expected", [
        ([1.0, 1.0, 5.0], [1.0, 1.0, 0.0]),
        ([2.0, -3.0, 1.0], [2.0, 0.0, 0.0]),
        ([-2.0, -2.0, 0.0], [0.0, 0.0, 0.0]),
        ([4.0, 4.0, -1.0], [2.0, 2.0, 0.0]),
        ([9.0, -1.0, 0.0], [4.0, 0.0, 0.0]),
    ])
    def test_regions_of_one_triangle(self, point, expected):
        a, b, c = self.TRIANGLE
        np.testing.assert_allclose(closest_points_on_triangles(np.array(point), a, b, c), expected, atol=1e-12)

    def test_degenerate_triangle_uses_its_edges(self):
        a, b = np.zeros(3), np.array([2.0, 0.0, 0.0])
        found = closest_points_on_triangles(np.array([1.0, 3.0, 0.0]), a, b, b)
        np.testing.assert_allclose(found, [1.0, 0.0, 0.0], atol=1e-12)

    def test_points_between_vertices_have_zero_distance(self, grid_mesh):
        mesh = grid_mesh(lambda x, y: 0.5 * x - 0.25 * y, extent=6.0, pitch=3.0)
        rng = np.random.default_rng(4)
        xy = rng.uniform(-5.0, 5.0, size=(40, 2))
        points = np.column_stack([xy, 0.5 * xy[:, 0] - 0.25 * xy[:, 1]])
        found, distances = SurfaceMatcher(mesh).closest(points)
        np.testing.assert_allclose(distances, 0.0, atol=1e-9)
        np.testing.assert_allclose(found, points, atol=1e-9)

    def test_range_grid_is_triangulated(self):
        matcher = SurfaceMatcher(_planar_grid_mesh(np.ones((3, 3))))
        assert matcher.has_surface
        found, distances = matcher.closest(np.array([[0.5, 1.5, 2.0]]))
        np.testing.assert_allclose(found, [[0.5, 1.5, 0.0]], atol=1e-12)
        assert distances[0] == pytest.approx(2.0)

    def test_point_cloud_matches_vertices(self):
        matcher = SurfaceMatcher(Mesh([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]]))
        assert not matcher.has_surface
        found, distances = matcher.closest(np.array([[2.0, 1.0, 0.0]]))
        np.testing.assert_allclose(found, [[3.0, 0.0, 0.0]])
        assert distances[0] == pytest.approx(np.sqrt(2.0))

    def test_empty_mesh(self):
        with pytest.raises(EmptyMesh):
            SurfaceMatcher(Mesh(np.zeros((0, 3))))


class TestIcp:
    """Test ICP frontalization"""

    @pytest.fixture
    def template(self, small_synth_config):
        return FaceModel(small_synth_config).template()

    def test_identical_meshes_converge_immediately(self, template):
        result = frontalize_icp(template, template)
        assert result.residual_history[0] == pytest.approx(0.0, abs=1e-9)
        assert len(result.residual_history) <= 2
        assert result.transform.angle_deg == pytest.approx(0.0, abs=1e-3)

    def test_recovers_small_rotation(self, template):
        motion = RigidTransform(Rotation.from_euler("x", 3.0, degrees=True).as_matrix(), [1.0, 2.0, 0.5])
        posed = template.with_vertices(motion.apply(template.vertices))
        config = PreprocessConfig(icp_max_iters=100, icp_tol_mm=1e-6)
        result = frontalize_icp(posed, template, config)
        history = result.residual_history
        assert all(b <= a for a, b in zip(history, history[1:]))
        assert history[-1] < history[0]
        assert history[-1] < 1.0
        assert abs(result.transform.angle_deg - 3.0) < 1.5

    @pytest.fixture(scope="class")
    def face_template(self):
        template = FaceModel(default_profile()).template()
        return template.with_vertices(template.vertices - detect_nosetip(template))

    @staticmethod
    def _assert_recovered(face_template, motion):
        posed = face_template.with_vertices(motion.apply(face_template.vertices))
        result = frontalize_icp(posed, face_template, PreprocessConfig(icp_max_iters=500, icp_tol_mm=1e-9))
        history = result.residual_history
        assert all(b <= a for a, b in zip(history, history[1:]))
        error = result.transform.compose(motion)
        assert error.angle_deg < 0.5
        assert np.linalg.norm(error.translation) < 0.1

    def test_recovers_rotation_about_y_with_translation(self, face_template):
        motion = RigidTransform(Rotation.from_euler("y", 10.0, degrees=True).as_matrix(), [3.0, -2.0, 1.0])
        self._assert_recovered(face_template, motion)

    @pytest.mark.slow
    def test_recovers_random_motions(self, face_template):
        rng = np.random.default_rng(2024)
        for _ in range(10):
            axis = rng.normal(size=3)
            angle = np.radians(rng.uniform(0.0, 25.0))
            shift = rng.normal(size=3)
            shift *= rng.uniform(0.0, 20.0) / np.linalg.norm(shift)
            motion = RigidTransform(Rotation.from_rotvec(angle * axis / np.linalg.norm(axis)).as_matrix(), shift)
            self._assert_recovered(face_template, motion)

    def test_empty_template(self, template):
        with pytest.raises(EmptyMesh):
            frontalize_icp(template, Mesh(np.zeros((0, 3))))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            PreprocessConfig(icp_max_iters=0)
        with pytest.raises(ConfigError):
            PreprocessConfig(smooth_lambda=0.0)


class TestPreprocessor:
    """Test the full preprocessing pipeline"""

    def test_synthetic_face_lands_on_template(self, small_synth_config):
        model = FaceModel(small_synth_config)
        template = model.template()
        shifted = template.with_vertices(template.vertices + [5.0, -3.0, 2.0])
        scan = Preprocessor(template, PreprocessConfig(smooth_iterations=2)).run(shifted)
        history = scan.residual_history
        assert all(b <= a for a, b in zip(history, history[1:]))
        assert np.all(np.abs(scan.nosetip[:2]) <= 3.0)
        assert abs(scan.nosetip[2]) <= 3.0

    def test_point_cloud_skips_topology_steps(self, dome, caplog):
        cloud = Mesh(dome.vertices)
        scan = Preprocessor(dome).run(cloud)
        assert scan.mesh.n_vertices == dome.n_vertices
        assert "skipping hole filling" in caplog.text
