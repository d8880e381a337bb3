"""
Shared fixtures for the face3d test suite
tests/conftest.py
"""

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from face3d.analysis.synth import default_profile, grid_faces
from face3d.geometry.mesh_io import (
    MANIFEST_COLUMNS,
    Ethnicity,
    Expression,
    Gender,
    Mesh,
    ScanRecord,
)


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    """Keep FACE3D_* variables of the calling shell out of every test"""
    import os
    for name in list(os.environ):
        if name.startswith("FACE3D_"):
            monkeypatch.delenv(name, raising=False)


@pytest.fixture
def make_record():
    """Build a ScanRecord with sensible defaults"""
    def _make(subject_id, expression=Expression.NEUTRAL, gender=Gender.FEMALE, age=25,
              ethnicity=Ethnicity.NON_ASIAN, scan_id=None, mesh_path=None, landmarks_path=None):
        scan_id = scan_id or f"{subject_id}_{expression.code}"
        return ScanRecord(scan_id, subject_id, gender, expression, ethnicity, age,
                          Path(mesh_path or f"meshes/{scan_id}.ply"),
                          Path(landmarks_path) if landmarks_path else None)
    return _make


@pytest.fixture
def write_manifest():
    """Write manifest rows (dicts keyed by column) as CSV text, returning the path"""
    def _write(path, rows):
        path = Path(path)
        lines = [",".join(MANIFEST_COLUMNS)]
        for row in rows:
            lines.append(",".join(str(row.get(col, "")) for col in MANIFEST_COLUMNS))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path
    return _write


@pytest.fixture
def manifest_row():
    def _row(scan_id, subject_id, gender="Female", expression="Neutral", age=25, ethnicity="NonAsian",
             mesh_path=None, landmarks_path=""):
        return {
            "scan_id": scan_id,
            "subject_id": subject_id,
            "gender": gender,
            "expression": expression,
            "ethnicity": ethnicity,
            "age": age,
            "mesh_path": mesh_path or f"meshes/{scan_id}.ply",
            "landmarks_path": landmarks_path,
        }
    return _row


@pytest.fixture
def grid_mesh():
    """Triangulated z-graph over a regular square grid"""
    def _make(surface, extent=10.0, pitch=1.0):
        ticks = np.arange(-extent, extent + 0.5 * pitch, pitch)
        xs, ys = np.meshgrid(ticks, ticks)
        z = surface(xs, ys)
        vertices = np.stack([xs.ravel(), ys.ravel(), np.asarray(z, dtype=float).ravel()], axis=1)
        return Mesh(vertices, grid_faces(*xs.shape))
    return _make


@pytest.fixture
def dome(grid_mesh):
    """Spherical cap of radius 30 mm peaking at (0, 0, 30)"""
    return grid_mesh(lambda x, y: np.sqrt(np.clip(900.0 - x ** 2 - y ** 2, 0.0, None)), extent=20.0, pitch=2.0)


@pytest.fixture
def small_synth_config():
    """Default profile on a coarse, small grid"""
    return replace(default_profile(), n_subjects=6, grid_extent_mm=45.0, grid_pitch_mm=3.0, seed=11)
