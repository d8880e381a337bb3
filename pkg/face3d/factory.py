"""
Factory Pattern Implementation and run configuration for the face3d toolkit
face3d/factory.py
"""

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, NamedTuple, Optional, Tuple
import logging
import os
import sys

from dotenv import dotenv_values

from .analysis.learn import ClassifierParams, ClassifierStrategy, ForestStrategy, SvmStrategy
from .analysis.synth import SynthConfig, default_profile, expression_specific_profile, null_profile
from .errors import ConfigError
from .geometry.curves import CurveConfig, FeatureKind
from .geometry.mesh_io import AGE_FILTER_YEARS, DEFAULT_NOSETIP_LANDMARK
from .geometry.preprocess import PreprocessConfig


class ClassifierFactory:
    """
    Factory Pattern: Creates the classifier strategy named by `learn.classifier`
    """

    _classifiers = {}

    @classmethod
    def register_classifier(cls, classifier_type: str, strategy_class):
        """Register a new classifier strategy"""
        cls._classifiers[classifier_type] = strategy_class

    @classmethod
    def create_classifier(cls, classifier_type: str, params: Optional[ClassifierParams] = None,
                          n_jobs: int = 1) -> ClassifierStrategy:
        """Create a classifier strategy based on type and parameters"""
        if classifier_type not in cls._classifiers:
            raise ConfigError(f"Unknown classifier type: {classifier_type} "
                              f"(available: {', '.join(cls.get_available_classifiers())})")
        params = params or ClassifierParams(classifier=classifier_type)
        return cls._classifiers[classifier_type](params, n_jobs)

    @classmethod
    def get_available_classifiers(cls) -> List[str]:
        """Get list of available classifier types"""
        return sorted(cls._classifiers)


ClassifierFactory.register_classifier("svm", SvmStrategy)
ClassifierFactory.register_classifier("forest", ForestStrategy)


SYNTH_PROFILES: Dict[str, Callable[[], SynthConfig]] = {
    "default": default_profile,
    "null": null_profile,
    "expression_specific": expression_specific_profile,
}
FEATURE_KINDS = {"depth": FeatureKind.DEPTH, "coord": FeatureKind.COORD, "dist": FeatureKind.DIST}
ENV_PREFIX = "FACE3D_"
# FACE3D_* variables that are not configuration keys
_RESERVED_ENV = {"FACE3D_LOG_LEVEL", "FACE3D_LOG_FILE"}


class _Key(NamedTuple):
    kind: str
    default: Any


_PRE = PreprocessConfig()
_CUR = CurveConfig()
_CLS = ClassifierParams()
_SYN = SynthConfig()

# dotted key -> (value kind, default); lookups are case-insensitive
_SCHEMA: Dict[str, _Key] = {
    "run.manifest": _Key("path", None),
    "run.out_dir": _Key("path", None),
    "run.features_dir": _Key("path", None),
    "run.master_seed": _Key("int", 0),
    "run.jobs": _Key("int", 1),
    "preprocess.crop_radius_mm": _Key("float", _PRE.crop_radius_mm),
    "preprocess.smooth_iterations": _Key("int", _PRE.smooth_iterations),
    "preprocess.smooth_lambda": _Key("float", _PRE.smooth_lambda),
    "preprocess.icp_max_iters": _Key("int", _PRE.icp_max_iters),
    "preprocess.icp_tol_mm": _Key("float", _PRE.icp_tol_mm),
    "preprocess.icp_align_centroids": _Key("bool", _PRE.icp_align_centroids),
    "preprocess.template_path": _Key("path", None),
    "curves.n_curves": _Key("int", _CUR.n_curves),
    "curves.n_points": _Key("int", _CUR.n_points),
    "curves.r_max_mm": _Key("float", _CUR.r_max_mm),
    "curves.support_radius_mm": _Key("float", _CUR.support_radius_mm),
    "curves.n_neighbors": _Key("int", _CUR.n_neighbors),
    "landmarks.nosetip_index": _Key("int", DEFAULT_NOSETIP_LANDMARK),
    "learn.classifier": _Key("str", _CLS.classifier),
    "learn.c": _Key("float", _CLS.C),
    "learn.tol": _Key("float", _CLS.tol),
    "learn.n_trees": _Key("int", _CLS.n_trees),
    "learn.min_leaf": _Key("int", _CLS.min_leaf),
    "learn.max_features": _Key("str", _CLS.max_features),
    "eval.feature_kind": _Key("str", "depth"),
    "eval.bins": _Key("int", 20),
    "eval.alphas": _Key("floats", (0.01, 0.05, 0.10)),
    "synth.profile": _Key("str", "default"),
    "synth.n_subjects": _Key("int", _SYN.n_subjects),
    "synth.female_fraction": _Key("float", _SYN.female_fraction),
    "synth.gender_morph_gap_mm": _Key("float", _SYN.gender_morph_gap_mm),
    "synth.subject_noise_mm": _Key("float", _SYN.subject_noise_mm),
    "synth.sensor_noise_mm": _Key("float", _SYN.sensor_noise_mm),
    "synth.landmark_jitter_px": _Key("float", _SYN.landmark_jitter_px),
    "synth.pose_jitter_deg": _Key("float", _SYN.pose_jitter_deg),
    "synth.pose_jitter_mm": _Key("float", _SYN.pose_jitter_mm),
    "synth.grid_extent_mm": _Key("float", _SYN.grid_extent_mm),
    "synth.grid_pitch_mm": _Key("float", _SYN.grid_pitch_mm),
    "synth.asian_fraction": _Key("float", _SYN.asian_fraction),
    "synth.min_age": _Key("int", _SYN.age_range[0]),
    "synth.max_age": _Key("int", _SYN.age_range[1]),
    "manifest.max_age": _Key("int", AGE_FILTER_YEARS),
    "manifest.require_pair": _Key("bool", True),
}
# synth keys that map one-to-one onto SynthConfig fields
_SYNTH_FIELDS = ("n_subjects", "female_fraction", "gender_morph_gap_mm", "subject_noise_mm", "sensor_noise_mm",
                 "landmark_jitter_px", "pose_jitter_deg", "pose_jitter_mm", "grid_extent_mm", "grid_pitch_mm",
                 "asian_fraction")


def env_name(key: str) -> str:
    """run.master_seed -> FACE3D_RUN_MASTER_SEED"""
    return ENV_PREFIX + key.replace(".", "_").upper()


@dataclass(frozen=True)
class RunConfig:
    """Everything one command needs; echoed into run.json"""

    preprocess: PreprocessConfig
    curves: CurveConfig
    learn: ClassifierParams
    synth: SynthConfig
    synth_profile: str
    manifest: Optional[str]
    out_dir: Optional[str]
    features_dir: Optional[str]
    master_seed: int
    jobs: int
    nosetip_index: int
    feature_kind: FeatureKind
    bins: int
    alphas: Tuple[float, ...]
    max_age: int
    require_pair: bool

    def require(self, name: str) -> Path:
        """Path-valued setting that must be present and exist"""
        value = getattr(self, name)
        key = f"run.{name}"
        if value is None:
            raise ConfigError(f"{key} is not set (config file, {env_name(key)} or command-line flag)")
        path = Path(value)
        if name != "out_dir" and not path.exists():
            raise ConfigError(f"{key} does not exist: {value}")
        return path

    def to_dict(self) -> Dict[str, Any]:
        """Configuration echo; `jobs` is left out so outputs do not depend on it"""
        return {
            "run": {"manifest": self.manifest, "out_dir": self.out_dir, "features_dir": self.features_dir,
                    "master_seed": self.master_seed},
            "preprocess": self.preprocess.to_dict(),
            "curves": self.curves.to_dict(),
            "landmarks": {"nosetip_index": self.nosetip_index},
            "learn": self.learn.to_dict(),
            "eval": {"feature_kind": self.feature_kind.value, "bins": self.bins, "alphas": list(self.alphas)},
            "synth": dict(self.synth.to_dict(), profile=self.synth_profile),
            "manifest": {"max_age": self.max_age, "require_pair": self.require_pair},
        }


class ConfigurationManager:
    """
    Assembles one invocation's configuration.
    Precedence: defaults < --config file < FACE3D_* environment < command-line overrides.
    """

    def __init__(self, config_file=None, environ: Optional[Mapping[str, str]] = None,
                 overrides: Optional[Mapping[str, Any]] = None):
        self._config: Dict[str, Any] = {key: spec.default for key, spec in _SCHEMA.items()}
        self._explicit = set()
        self._load_configuration(config_file, os.environ if environ is None else environ, overrides or {})

    def _load_configuration(self, config_file, environ: Mapping[str, str], overrides: Mapping[str, Any]):
        """Load configuration from the key=value file, environment variables and overrides"""
        if config_file is not None:
            path = Path(config_file)
            if not path.is_file():
                raise ConfigError(f"Config file not found: {path}")
            try:
                file_config = dotenv_values(path, interpolate=False)
            except (OSError, UnicodeDecodeError) as e:
                raise ConfigError(f"Cannot read config file {path}: {e}") from e
            for key, value in file_config.items():
                if value is None:
                    raise ConfigError(f"Config file {path}: key '{key}' has no value")
                self.set(key, value)

        known_env = {env_name(key): key for key in _SCHEMA}
        for name in sorted(environ):
            if not name.startswith(ENV_PREFIX) or name in _RESERVED_ENV:
                continue
            if name not in known_env:
                raise ConfigError(f"Unknown configuration variable {name}")
            self.set(known_env[name], environ[name])

        for key, value in overrides.items():
            if value is not None:
                self.set(key, value)

    def _safe_int_conversion(self, value: Any, key: str) -> int:
        """Convert a config value to int"""
        if isinstance(value, bool):
            raise ConfigError(f"Invalid integer for {key}: '{value}'")
        try:
            return int(str(value).strip())
        except (ValueError, TypeError):
            raise ConfigError(f"Invalid integer for {key}: '{value}'") from None

    def _safe_float_conversion(self, value: Any, key: str) -> float:
        """Convert a config value to float"""
        try:
            return float(str(value).strip())
        except (ValueError, TypeError):
            raise ConfigError(f"Invalid number for {key}: '{value}'") from None

    def _safe_bool_conversion(self, value: Any, key: str) -> bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"Invalid boolean for {key}: '{value}'")

    def _convert(self, key: str, value: Any):
        kind = _SCHEMA[key].kind
        if kind == "int":
            return self._safe_int_conversion(value, key)
        if kind == "float":
            return self._safe_float_conversion(value, key)
        if kind == "bool":
            return self._safe_bool_conversion(value, key)
        if kind == "floats":
            items = value if isinstance(value, (list, tuple)) else str(value).split(",")
            return tuple(self._safe_float_conversion(v, key) for v in items if str(v).strip())
        if kind == "path":
            text = str(value).strip()
            return Path(text).as_posix() if text else None
        return str(value).strip()

    def get(self, key: str, default=None):
        """Get configuration value"""
        return self._config.get(key.lower(), default)

    def set(self, key: str, value):
        """Set configuration value"""
        normalized = key.strip().lower()
        if normalized not in _SCHEMA:
            raise ConfigError(f"Unknown configuration key '{key}'")
        self._config[normalized] = self._convert(normalized, value)
        self._explicit.add(normalized)

    def is_set(self, key: str) -> bool:
        return key.lower() in self._explicit

    def get_all(self) -> Dict[str, Any]:
        """Get all configuration"""
        return self._config.copy()

    def build(self) -> RunConfig:
        """Validate the flat settings into typed module configs"""
        get = self.get
        classifier = get("learn.classifier")
        if classifier not in ClassifierFactory.get_available_classifiers():
            raise ConfigError(f"Unknown classifier type: {classifier} "
                              f"(available: {', '.join(ClassifierFactory.get_available_classifiers())})")
        profile = get("synth.profile")
        if profile not in SYNTH_PROFILES:
            raise ConfigError(f"Unknown synth.profile '{profile}' (available: {', '.join(SYNTH_PROFILES)})")
        kind = get("eval.feature_kind")
        if kind not in FEATURE_KINDS:
            raise ConfigError(f"Unknown eval.feature_kind '{kind}' (available: {', '.join(FEATURE_KINDS)})")
        if get("run.jobs") == 0 or get("run.jobs") < -1:
            raise ConfigError(f"run.jobs must be >= 1 (or -1 for all cores), got {get('run.jobs')}")
        if get("eval.bins") < 1:
            raise ConfigError(f"eval.bins must be >= 1, got {get('eval.bins')}")
        alphas = get("eval.alphas")
        if not alphas or any(not 0 < a < 1 for a in alphas):
            raise ConfigError(f"eval.alphas must be values in (0, 1), got {alphas}")
        if not 0 <= get("landmarks.nosetip_index") < 68:
            raise ConfigError(f"landmarks.nosetip_index must lie in 0..67, got {get('landmarks.nosetip_index')}")

        synth = replace(SYNTH_PROFILES[profile](), seed=get("run.master_seed"))
        synth_overrides = {name: get(f"synth.{name}") for name in _SYNTH_FIELDS if self.is_set(f"synth.{name}")}
        if self.is_set("synth.min_age") or self.is_set("synth.max_age"):
            synth_overrides["age_range"] = (get("synth.min_age"), get("synth.max_age"))
        synth = replace(synth, **synth_overrides)

        return RunConfig(
            preprocess=PreprocessConfig(
                crop_radius_mm=get("preprocess.crop_radius_mm"),
                smooth_iterations=get("preprocess.smooth_iterations"),
                smooth_lambda=get("preprocess.smooth_lambda"),
                icp_max_iters=get("preprocess.icp_max_iters"),
                icp_tol_mm=get("preprocess.icp_tol_mm"),
                icp_align_centroids=get("preprocess.icp_align_centroids"),
                template_path=get("preprocess.template_path"),
            ),
            curves=CurveConfig(
                n_curves=get("curves.n_curves"),
                n_points=get("curves.n_points"),
                r_max_mm=get("curves.r_max_mm"),
                support_radius_mm=get("curves.support_radius_mm"),
                n_neighbors=get("curves.n_neighbors"),
            ),
            learn=ClassifierParams(
                classifier=classifier,
                C=get("learn.c"),
                tol=get("learn.tol"),
                n_trees=get("learn.n_trees"),
                min_leaf=get("learn.min_leaf"),
                max_features=get("learn.max_features"),
            ),
            synth=synth,
            synth_profile=profile,
            manifest=get("run.manifest"),
            out_dir=get("run.out_dir"),
            features_dir=get("run.features_dir"),
            master_seed=get("run.master_seed"),
            jobs=get("run.jobs"),
            nosetip_index=get("landmarks.nosetip_index"),
            feature_kind=FEATURE_KINDS[kind],
            bins=get("eval.bins"),
            alphas=tuple(sorted(set(alphas))),
            max_age=get("manifest.max_age"),
            require_pair=get("manifest.require_pair"),
        )


class LoggerManager:
    """
    Centralized logging setup for one command-line invocation
    Provides consistent logging with structured format
    """

    valid_levels = ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']

    def __init__(self, level: Optional[str] = None, log_file: Optional[str] = None,
                 environ: Optional[Mapping[str, str]] = None):
        environ = os.environ if environ is None else environ
        self._handlers: List[logging.Handler] = []
        self._previous: Tuple[List[logging.Handler], int] = ([], logging.WARNING)
        self._setup_logger(level or environ.get('FACE3D_LOG_LEVEL', 'INFO'),
                           log_file or environ.get('FACE3D_LOG_FILE'))

    def _setup_logger(self, level: str, log_file: Optional[str]):
        """Setup logger configuration"""
        log_level = 'INFO'
        if str(level).upper() in self.valid_levels:
            log_level = str(level).upper()

        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s'
        )
        handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
        if log_file:
            try:
                handlers.append(logging.FileHandler(log_file))
            except OSError as e:
                raise ConfigError(f"Cannot open log file {log_file}: {e}") from e
        for handler in handlers:
            handler.setFormatter(formatter)

        root = logging.getLogger()
        self._previous = (list(root.handlers), root.level)
        # detached rather than closed so close() can restore them
        for handler in self._previous[0]:
            root.removeHandler(handler)
        logging.basicConfig(level=getattr(logging, log_level), handlers=handlers, force=True)
        self._handlers = handlers
        self._logger = logging.getLogger('face3d')
        if str(level).upper() != log_level:
            self._logger.warning(f"Invalid log level '{level}', using {log_level}")

    def get_logger(self) -> logging.Logger:
        """Get logger instance"""
        return self._logger

    def log_run_start(self, command: str, config: RunConfig):
        self._logger.info(f"RUN_START - Command: {command}, MasterSeed: {config.master_seed}, "
                          f"Jobs: {config.jobs}, OutDir: {config.out_dir}")

    def log_run_end(self, command: str, exit_code: int, elapsed: float):
        self._logger.info(f"RUN_END - Command: {command}, ExitCode: {exit_code}, Elapsed: {elapsed:.2f}s")

    def log_error(self, error: Exception, context: str = "", extra_data: Dict[str, Any] = None):
        """Log error with context and extra data"""
        error_msg = f"Error in {context}: {str(error)}"
        if extra_data:
            error_msg += f" | Extra: {extra_data}"
        self._logger.error(error_msg, exc_info=True)

    def close(self):
        """Detach this invocation's handlers and restore the previous root configuration"""
        root = logging.getLogger()
        for handler in self._handlers:
            root.removeHandler(handler)
            handler.close()
        previous_handlers, previous_level = self._previous
        for handler in previous_handlers:
            root.addHandler(handler)
        root.setLevel(previous_level)
        self._handlers = []
