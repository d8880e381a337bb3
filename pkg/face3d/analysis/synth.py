"""
Synthetic 3D expressive-face corpora with planted gender effects
face3d/analysis/synth.py

A face is a z-graph over a regular xy grid (mm, nosetip at the origin,
+y towards the forehead, +z towards the viewer):

    neutral    = ellipsoidal cap + nose bump + gender morph + subject bumps
    expressive = neutral + amplitude(gender) * intensity * field(expression)
                 [+ female-only mixing fields] + sensor noise

Expression fields only move z, so the difference of a noiseless pair on the
same grid is exactly the planted field.
"""

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
from joblib import Parallel, delayed
from scipy.spatial.transform import Rotation

from ..errors import ConfigError, IoError
from ..geometry.mesh_io import (
    NON_NEUTRAL,
    Ethnicity,
    Expression,
    Gender,
    Landmarks68,
    Mesh,
    ScanRecord,
    save_landmarks,
    save_manifest,
    save_mesh,
)
from ..jsonio import dump_json
from ..seeding import derive_rng

logger = logging.getLogger(__name__)

# vertex coordinates are stored at 0.1 micrometre resolution
_VERTEX_DECIMALS = 4
_PIXELS_PER_MM = 2.5
_IMAGE_CENTER_PX = (320.0, 240.0)
# in-plane landmark displacement per mm of surface deformation
_LANDMARK_GAIN = 0.5


# ============ analytic surface pieces ============

def _gaussian(x, y, cx, cy, sx, sy):
    return np.exp(-((x - cx) ** 2 / (2.0 * sx ** 2) + (y - cy) ** 2 / (2.0 * sy ** 2)))


@dataclass(frozen=True)
class DeformationField:
    """Sum of signed anisotropic Gaussian bumps (cx, cy, sx, sy, weight), peak-normalised to 1 mm.

    `pull` is the in-plane landmark motion per unit field: x is mirrored
    about the midline so symmetric fields pull symmetrically.
    """

    name: str
    bumps: Tuple[Tuple[float, float, float, float, float], ...]
    pull: Tuple[float, float] = (0.0, 0.0)

    def evaluate(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        total = np.zeros(np.broadcast(x, y).shape)
        for cx, cy, sx, sy, weight in self.bumps:
            total = total + weight * _gaussian(x, y, cx, cy, sx, sy)
        return total

    def displacement(self, points: np.ndarray) -> np.ndarray:
        """(L, 2) in-plane motion (mm) of landmarks at `points` per mm of amplitude"""
        strength = np.abs(self.evaluate(points[:, 0], points[:, 1]))
        direction = np.stack([np.sign(points[:, 0]) * self.pull[0],
                              np.full(len(points), self.pull[1])], axis=1)
        return _LANDMARK_GAIN * strength[:, None] * direction


FIELDS: Dict[str, DeformationField] = {f.name: f for f in (
    DeformationField("smile", ((-25.0, -30.0, 12.0, 11.0, 1.0), (25.0, -30.0, 12.0, 11.0, 1.0)), (1.0, 0.6)),
    DeformationField("mouth_open", ((0.0, -42.0, 15.0, 10.0, -1.0),), (0.0, -1.0)),
    DeformationField("brow_raise", ((-30.0, 45.0, 14.0, 8.0, 1.0), (30.0, 45.0, 14.0, 8.0, 1.0)), (0.0, 1.0)),
    DeformationField("nose_wrinkle", ((0.0, 24.0, 8.0, 6.0, 1.0), (-11.0, 13.0, 5.0, 5.0, 0.6),
                                      (11.0, 13.0, 5.0, 5.0, 0.6)), (-0.3, 0.5)),
    DeformationField("lip_press", ((0.0, -32.0, 16.0, 6.0, -1.0),), (-0.5, 0.0)),
    DeformationField("eye_squint", ((-32.0, 27.0, 10.0, 6.0, 1.0), (32.0, 27.0, 10.0, 6.0, 1.0)), (0.0, -0.4)),
    DeformationField("lip_corner_down", ((-25.0, -36.0, 10.0, 9.0, -1.0), (25.0, -36.0, 10.0, 9.0, -1.0)),
                     (0.3, -1.0)),
)}

# morphology differing between genders: brow ridge, chin and nose prominence
_MORPH_BUMPS = ((0.0, 40.0, 35.0, 8.0, 1.0), (0.0, -65.0, 20.0, 12.0, 1.0))
_MORPH_NOSE_WEIGHT = 0.3
# per-subject identity bumps, kept clear of the nose
_SUBJECT_BUMPS = ((-40.0, 10.0), (40.0, 10.0), (-20.0, -55.0), (20.0, -55.0), (0.0, 55.0),
                  (-50.0, -20.0), (50.0, -20.0))
_SUBJECT_BUMP_SIGMA = 15.0


@dataclass(frozen=True)
class BaseShape:
    cap_half_width_mm: float = 120.0
    cap_half_height_mm: float = 150.0
    cap_depth_mm: float = 60.0
    nose_height_mm: float = 25.0
    nose_width_mm: float = 11.0
    nose_bridge_mm: float = 22.0

    def evaluate(self, x, y) -> np.ndarray:
        rho = (x / self.cap_half_width_mm) ** 2 + (y / self.cap_half_height_mm) ** 2
        cap = self.cap_depth_mm * (np.sqrt(np.clip(1.0 - rho, 0.0, None)) - 1.0)
        return cap + self.nose(x, y)

    def nose(self, x, y) -> np.ndarray:
        # the nose extends further up towards the bridge than down to the lip
        sy = np.where(y > 0, self.nose_bridge_mm, self.nose_width_mm)
        return self.nose_height_mm * np.exp(-(x ** 2 / (2.0 * self.nose_width_mm ** 2) + y ** 2 / (2.0 * sy ** 2)))


@dataclass(frozen=True)
class ExpressionEffect:
    field: str
    male_amplitude_mm: float
    female_amplitude_mm: float
    # extra (field, amplitude) pairs applied to female subjects with a per-subject weight in [0, 1]
    female_mix: Tuple[Tuple[str, float], ...] = ()
    intensity_spread: float = 0.7

    def amplitude(self, gender: Gender) -> float:
        return self.female_amplitude_mm if gender is Gender.FEMALE else self.male_amplitude_mm


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 120
    female_fraction: float = 0.44
    base_shape: BaseShape = BaseShape()
    gender_morph_gap_mm: float = 0.5
    expression_effects: Dict[Expression, ExpressionEffect] = field(default_factory=dict)
    subject_noise_mm: float = 1.5
    sensor_noise_mm: float = 0.15
    landmark_jitter_px: float = 1.0
    pose_jitter_deg: float = 0.0
    pose_jitter_mm: float = 0.0
    grid_extent_mm: float = 90.0
    grid_pitch_mm: float = 3.0
    asian_fraction: float = 0.3
    age_range: Tuple[int, int] = (18, 40)
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 4:
            raise ConfigError(f"synth.n_subjects must be >= 4, got {self.n_subjects}")
        if not 0 < self.female_fraction < 1:
            raise ConfigError(f"synth.female_fraction must lie in (0, 1), got {self.female_fraction}")
        n_female = self.n_female
        if n_female < 1 or n_female >= self.n_subjects:
            raise ConfigError(f"synth.female_fraction {self.female_fraction} leaves a gender without subjects")
        for name in ("gender_morph_gap_mm", "subject_noise_mm", "sensor_noise_mm", "landmark_jitter_px",
                     "pose_jitter_deg", "pose_jitter_mm"):
            if getattr(self, name) < 0:
                raise ConfigError(f"synth.{name} must be >= 0, got {getattr(self, name)}")
        if not (self.grid_pitch_mm > 0 and self.grid_extent_mm > self.grid_pitch_mm):
            raise ConfigError("synth.grid_pitch_mm must be positive and smaller than synth.grid_extent_mm")
        if not 0 <= self.asian_fraction <= 1:
            raise ConfigError(f"synth.asian_fraction must lie in [0, 1], got {self.asian_fraction}")
        if not 0 <= self.age_range[0] <= self.age_range[1]:
            raise ConfigError(f"synth.age_range must be an ordered non-negative pair, got {self.age_range}")
        for expression, effect in self.expression_effects.items():
            if expression is Expression.NEUTRAL:
                raise ConfigError("Neutral scans carry no expression effect")
            amplitudes = [effect.male_amplitude_mm, effect.female_amplitude_mm] + [a for _, a in effect.female_mix]
            if min(amplitudes) < 0:
                raise ConfigError(f"synth amplitudes for {expression.value} must be >= 0")
            if not 0 <= effect.intensity_spread < 2:
                raise ConfigError(f"synth intensity spread for {expression.value} must lie in [0, 2)")
            for name in [effect.field] + [f for f, _ in effect.female_mix]:
                if name not in FIELDS:
                    raise ConfigError(f"Unknown deformation field '{name}' (known: {', '.join(sorted(FIELDS))})")

    @property
    def n_female(self) -> int:
        return int(round(self.female_fraction * self.n_subjects))

    @property
    def expressions(self) -> Tuple[Expression, ...]:
        return tuple(e for e in NON_NEUTRAL if e in self.expression_effects)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["expression_effects"] = {e.value: asdict(effect) for e, effect in self.expression_effects.items()}
        return data


def default_profile() -> SynthConfig:
    """Strongly gendered Happy and Disgust deformations, weak Surprise and Sad ones.

    Males deform along a single field; females mix in two more for Happy.
    """
    return SynthConfig(expression_effects={
        Expression.HAPPY: ExpressionEffect("smile", 6.0, 2.0, female_mix=(("eye_squint", 2.5), ("nose_wrinkle", 2.0))),
        Expression.DISGUST: ExpressionEffect("nose_wrinkle", 3.5, 2.0),
        Expression.SURPRISE: ExpressionEffect("mouth_open", 2.5, 2.4),
        Expression.SAD: ExpressionEffect("lip_corner_down", 2.0, 1.9),
    })


def null_profile() -> SynthConfig:
    """No static or expression-related gender signal"""
    return SynthConfig(gender_morph_gap_mm=0.0, expression_effects={
        Expression.HAPPY: ExpressionEffect("smile", 4.0, 4.0),
        Expression.DISGUST: ExpressionEffect("nose_wrinkle", 3.0, 3.0),
        Expression.SURPRISE: ExpressionEffect("mouth_open", 3.0, 3.0),
        Expression.SAD: ExpressionEffect("lip_corner_down", 2.0, 2.0),
    })


def expression_specific_profile() -> SynthConfig:
    """Weak static morphology; each expression carries its gender signal on its own field"""
    return SynthConfig(gender_morph_gap_mm=1.0, expression_effects={
        Expression.HAPPY: ExpressionEffect("smile", 6.0, 1.0),
        Expression.DISGUST: ExpressionEffect("nose_wrinkle", 1.0, 5.0),
        Expression.SURPRISE: ExpressionEffect("brow_raise", 5.0, 1.0),
        Expression.SAD: ExpressionEffect("lip_corner_down", 1.0, 5.0),
    })


# ============ face model ============

@dataclass(frozen=True, eq=False)
class SubjectTraits:
    subject_id: str
    gender: Gender
    ethnicity: Ethnicity
    age: int
    identity: np.ndarray
    landmark_offsets: np.ndarray
    intensities: Dict[Expression, float]
    female_mix_weights: Dict[Expression, Tuple[float, ...]]


class FaceModel:
    """Closed-form synthetic face surfaces for one SynthConfig"""

    def __init__(self, config: SynthConfig):
        self.config = config
        ticks = np.arange(-config.grid_extent_mm, config.grid_extent_mm + 0.5 * config.grid_pitch_mm,
                          config.grid_pitch_mm)
        self.xs, self.ys = np.meshgrid(ticks, ticks)
        self.faces = grid_faces(*self.xs.shape)

    # --- surface terms ---
    def morph(self, x, y, gender: Gender) -> np.ndarray:
        sign = 1.0 if gender is Gender.MALE else -1.0
        bumps = sum(w * _gaussian(x, y, cx, cy, sx, sy) for cx, cy, sx, sy, w in _MORPH_BUMPS)
        nose = self.config.base_shape.nose(x, y) / self.config.base_shape.nose_height_mm
        return sign * 0.5 * self.config.gender_morph_gap_mm * (bumps + _MORPH_NOSE_WEIGHT * nose)

    def identity(self, x, y, coefficients: np.ndarray) -> np.ndarray:
        total = np.zeros(np.broadcast(x, y).shape)
        for c, (cx, cy) in zip(coefficients, _SUBJECT_BUMPS):
            total = total + c * _gaussian(x, y, cx, cy, _SUBJECT_BUMP_SIGMA, _SUBJECT_BUMP_SIGMA)
        return total

    def neutral_surface(self, x, y, traits: SubjectTraits) -> np.ndarray:
        return (self.config.base_shape.evaluate(x, y) + self.morph(x, y, traits.gender)
                + self.identity(x, y, traits.identity))

    def planted_delta(self, x, y, traits: SubjectTraits, expression: Expression) -> np.ndarray:
        """Expressive minus neutral surface for this subject"""
        effect = self.config.expression_effects[expression]
        scale = effect.amplitude(traits.gender) * traits.intensities[expression]
        delta = scale * FIELDS[effect.field].evaluate(x, y)
        if traits.gender is Gender.FEMALE:
            for (name, amplitude), weight in zip(effect.female_mix, traits.female_mix_weights[expression]):
                delta = delta + amplitude * weight * FIELDS[name].evaluate(x, y)
        return delta

    def template(self) -> Mesh:
        """Canonical neutral face: base shape only, on the generation grid"""
        z = self.config.base_shape.evaluate(self.xs, self.ys)
        return Mesh(_grid_vertices(self.xs, self.ys, z), self.faces)

    def nosetip(self) -> np.ndarray:
        return np.array([0.0, 0.0, float(self.config.base_shape.evaluate(0.0, 0.0))])

    # --- landmarks ---
    def landmarks_mm(self, traits: SubjectTraits, expression: Expression) -> np.ndarray:
        gap = self.config.gender_morph_gap_mm
        sign = 1.0 if traits.gender is Gender.MALE else -1.0
        points = canonical_landmarks_mm()
        points[:17, 0] *= 1.0 + sign * 0.01 * gap
        points[17:27, 1] -= sign * 0.25 * gap
        points = points + traits.landmark_offsets
        if expression is not Expression.NEUTRAL:
            effect = self.config.expression_effects[expression]
            scale = effect.amplitude(traits.gender) * traits.intensities[expression]
            motion = scale * FIELDS[effect.field].displacement(points)
            if traits.gender is Gender.FEMALE:
                for (name, amplitude), weight in zip(effect.female_mix, traits.female_mix_weights[expression]):
                    motion = motion + amplitude * weight * FIELDS[name].displacement(points)
            points = points + motion
        return points


def grid_faces(rows: int, cols: int) -> np.ndarray:
    """Two counter-clockwise (+z facing) triangles per grid cell, row-major vertex order"""
    index = np.arange(rows * cols).reshape(rows, cols)
    v00 = index[:-1, :-1].ravel()
    v01 = index[:-1, 1:].ravel()
    v10 = index[1:, :-1].ravel()
    v11 = index[1:, 1:].ravel()
    return np.concatenate([np.stack([v00, v01, v10], axis=1), np.stack([v10, v01, v11], axis=1)])


def _grid_vertices(xs, ys, z) -> np.ndarray:
    return np.stack([xs.ravel(), ys.ravel(), np.asarray(z).ravel()], axis=1)


def canonical_landmarks_mm() -> np.ndarray:
    """68-point layout in face millimetres; index 30 is the nosetip at the origin"""
    t = np.linspace(0.0, 1.0, 17)
    theta = np.pi + t * np.pi
    jaw = np.stack([65.0 * np.cos(theta), 10.0 + 85.0 * np.sin(theta)], axis=1)
    s = np.linspace(0.0, 1.0, 5)
    brow_r = np.stack([np.linspace(-50.0, -12.0, 5), 45.0 + 5.0 * np.sin(np.pi * s)], axis=1)
    brow_l = np.stack([np.linspace(12.0, 50.0, 5), 45.0 + 5.0 * np.sin(np.pi * s)], axis=1)
    bridge = np.stack([np.zeros(4), [30.0, 20.0, 10.0, 0.0]], axis=1)
    nostrils = np.stack([np.linspace(-12.0, 12.0, 5), [-6.0, -8.0, -9.0, -8.0, -6.0]], axis=1)

    def ellipse(cx, cy, rx, ry, degrees):
        a = np.radians(degrees)
        return np.stack([cx + rx * np.cos(a), cy + ry * np.sin(a)], axis=1)

    eye_angles = [180, 135, 45, 0, -45, -135]
    eye_r = ellipse(-32.0, 33.0, 11.0, 4.0, eye_angles)
    eye_l = ellipse(32.0, 33.0, 11.0, 4.0, eye_angles)
    mouth_outer = ellipse(0.0, -32.0, 25.0, 9.0, [180, 150, 120, 90, 60, 30, 0, -30, -60, -90, -120, -150])
    mouth_inner = ellipse(0.0, -32.0, 18.0, 4.0, [180, 135, 90, 45, 0, -45, -90, -135])
    return np.vstack([jaw, brow_r, brow_l, bridge, nostrils, eye_r, eye_l, mouth_outer, mouth_inner])


def mm_to_pixels(points_mm: np.ndarray) -> np.ndarray:
    cx, cy = _IMAGE_CENTER_PX
    return np.stack([cx + _PIXELS_PER_MM * points_mm[:, 0], cy - _PIXELS_PER_MM * points_mm[:, 1]], axis=1)


# ============ corpus generation ============

def subject_id_of(index: int) -> str:
    return f"S{index + 1:04d}"


def scan_id_of(subject_id: str, expression: Expression) -> str:
    return f"{subject_id}_{expression.code}"


def _genders(config: SynthConfig) -> List[Gender]:
    order = derive_rng(config.seed, "genders").permutation(config.n_subjects)
    female = set(order[:config.n_female].tolist())
    return [Gender.FEMALE if i in female else Gender.MALE for i in range(config.n_subjects)]


def draw_traits(config: SynthConfig, index: int, gender: Gender) -> SubjectTraits:
    rng = derive_rng(config.seed, f"subject:{index}")
    lo, hi = config.age_range
    ethnicity = Ethnicity.ASIAN if rng.random() < config.asian_fraction else Ethnicity.NON_ASIAN
    age = int(rng.integers(lo, hi + 1))
    identity = rng.normal(0.0, config.subject_noise_mm, size=len(_SUBJECT_BUMPS))
    offsets = rng.normal(0.0, config.landmark_jitter_px / _PIXELS_PER_MM, size=(68, 2))
    intensities = {}
    mix = {}
    for expression in NON_NEUTRAL:
        effect = config.expression_effects.get(expression)
        spread = effect.intensity_spread if effect is not None else 0.0
        intensities[expression] = float(rng.uniform(1.0 - spread / 2.0, 1.0 + spread / 2.0))
        n_mix = len(effect.female_mix) if effect is not None else 0
        mix[expression] = tuple(float(w) for w in rng.uniform(0.0, 1.0, size=n_mix))
    return SubjectTraits(subject_id_of(index), gender, ethnicity, age, identity, offsets, intensities, mix)


def _pose(config: SynthConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(config.pose_jitter_deg) * rng.uniform(-1.0, 1.0)
    rotation = Rotation.from_rotvec(axis * angle).as_matrix()
    translation = rng.uniform(-1.0, 1.0, size=3) * config.pose_jitter_mm
    return rotation, translation


def _generate_subject(config: SynthConfig, index: int, gender: Gender, out_dir: Path) -> Dict[str, Any]:
    model = FaceModel(config)
    traits = draw_traits(config, index, gender)
    x, y = model.xs, model.ys
    neutral = model.neutral_surface(x, y, traits)
    scans = []
    for expression in (Expression.NEUTRAL,) + config.expressions:
        rng = derive_rng(config.seed, f"scan:{index}:{expression.value}")
        z = neutral if expression is Expression.NEUTRAL else neutral + model.planted_delta(x, y, traits, expression)
        if config.sensor_noise_mm > 0:
            z = z + rng.normal(0.0, config.sensor_noise_mm, size=z.shape)
        vertices = _grid_vertices(x, y, z)
        nosetip = np.array([0.0, 0.0, float(model.neutral_surface(0.0, 0.0, traits))])
        pose = {"rotation": np.eye(3).tolist(), "translation": [0.0, 0.0, 0.0]}
        if config.pose_jitter_deg > 0 or config.pose_jitter_mm > 0:
            rotation, translation = _pose(config, rng)
            vertices = vertices @ rotation.T + translation
            nosetip = rotation @ nosetip + translation
            pose = {"rotation": rotation.tolist(), "translation": translation.tolist()}
        vertices = np.round(vertices, _VERTEX_DECIMALS)

        scan_id = scan_id_of(traits.subject_id, expression)
        mesh_path = out_dir / "meshes" / f"{scan_id}.ply"
        landmarks_path = out_dir / "landmarks" / f"{scan_id}.txt"
        save_mesh(Mesh(vertices, model.faces), mesh_path)
        lm_mm = model.landmarks_mm(traits, expression)
        lm_px = mm_to_pixels(lm_mm) + rng.normal(0.0, 0.25 * config.landmark_jitter_px, size=(68, 2))
        save_landmarks(Landmarks68(np.round(lm_px, _VERTEX_DECIMALS)), landmarks_path)

        scans.append({
            "record": ScanRecord(scan_id, traits.subject_id, gender, expression, traits.ethnicity, traits.age,
                                 mesh_path, landmarks_path),
            "nosetip": nosetip,
            "pose": pose,
        })

    return {
        "subject_id": traits.subject_id,
        "gender": gender.value,
        "ethnicity": traits.ethnicity.value,
        "age": traits.age,
        "identity_coefficients": traits.identity.tolist(),
        "intensities": {e.value: traits.intensities[e] for e in config.expressions},
        "female_mix_weights": {e.value: list(traits.female_mix_weights[e]) for e in config.expressions},
        "planted_amplitudes_mm": {
            e.value: config.expression_effects[e].amplitude(gender) * traits.intensities[e]
            for e in config.expressions
        },
        "scans": scans,
    }


def generate_corpus(config: SynthConfig, out_dir, n_jobs: int = 1) -> Path:
    """Write meshes, landmarks, template.ply, manifest.csv and ground_truth.json under out_dir"""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"Cannot create output directory: {e}", {"path": str(out_dir)}) from e

    genders = _genders(config)
    subjects = Parallel(n_jobs=n_jobs)(
        delayed(_generate_subject)(config, i, genders[i], out_dir) for i in range(config.n_subjects)
    )

    model = FaceModel(config)
    save_mesh(model.template(), out_dir / "template.ply")
    records = [scan["record"] for subject in subjects for scan in subject["scans"]]
    manifest_path = save_manifest(records, out_dir / "manifest.csv")

    truth_subjects = []
    for subject in subjects:
        entry = {k: v for k, v in subject.items() if k != "scans"}
        entry["scans"] = [{"scan_id": s["record"].scan_id, "expression": s["record"].expression.value,
                           "nosetip": s["nosetip"].tolist(), "pose": s["pose"]} for s in subject["scans"]]
        truth_subjects.append(entry)
    dump_json({
        "seed": config.seed,
        "config": config.to_dict(),
        "template_nosetip": model.nosetip().tolist(),
        "fields": {name: {"bumps": [list(b) for b in f.bumps], "pull": list(f.pull)} for name, f in FIELDS.items()},
        "subjects": truth_subjects,
    }, out_dir / "ground_truth.json")

    logger.info(f"Generated {len(records)} scans of {config.n_subjects} subjects "
                f"({config.n_female} female) under {out_dir}")
    return manifest_path


def with_seed(config: SynthConfig, seed: int) -> SynthConfig:
    return replace(config, seed=seed)
