"""
Human-readable artifacts: colormap images, accuracy tables, histograms
face3d/analysis/report.py

Feature grids are rendered unwrapped: one image row per radial curve
(angle order), one column per curve point (radius order). Images are
binary PPM (P6): header "P6\\n<width> <height>\\n255\\n" then RGB bytes.
"""

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union
import logging

import numpy as np
import pandas as pd
from PIL import Image

from ..errors import InvariantError, IoError, NonFiniteInput, UnknownAlpha
from ..geometry.curves import CurveConfig
from ..geometry.mesh_io import EXPRESSIONS, Mesh, save_mesh
from ..jsonio import CSV_FLOAT_FORMAT, dump_json
from .evaluation import EvalReport, ExpressionMatrix
from .stats import SignificanceMap, VarianceSpectrum

logger = logging.getLogger(__name__)

SIGNIFICANT_RGB = (255, 0, 0)
NOT_SIGNIFICANT_RGB = (200, 200, 200)
OUTSIDE_RGB = (128, 128, 128)
RATE_COLUMNS = ["Female", "Male", "All", "#Scans"]


class Palette(Enum):
    GRAYSCALE = "Grayscale"
    HEAT = "Heat"

    def colors(self, t: np.ndarray) -> np.ndarray:
        """t in [0, 1] -> (..., 3) floats in [0, 1]; every channel is non-decreasing in t"""
        t = np.clip(t, 0.0, 1.0)
        if self is Palette.GRAYSCALE:
            return np.repeat(t[..., None], 3, axis=-1)
        # black -> red -> yellow -> white
        return np.stack([np.clip(3.0 * t, 0, 1), np.clip(3.0 * t - 1.0, 0, 1), np.clip(3.0 * t - 2.0, 0, 1)], axis=-1)


@dataclass(frozen=True)
class FixedScale:
    vmin: float
    vmax: float

    def __post_init__(self):
        if not self.vmax > self.vmin:
            raise InvariantError(f"Fixed scale needs max > min, got [{self.vmin}, {self.vmax}]")


AUTO = "Auto"
Scale = Union[str, FixedScale]


@dataclass(frozen=True, eq=False)
class ColorImage:
    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise InvariantError(f"Color image must be (height, width, 3), got {pixels.shape}")
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def count(self, rgb: Tuple[int, int, int]) -> int:
        return int(np.all(self.pixels == np.array(rgb, dtype=np.uint8), axis=-1).sum())

    def to_ppm_bytes(self) -> bytes:
        header = f"P6\n{self.width} {self.height}\n255\n".encode("ascii")
        return header + self.pixels.tobytes()

    def save(self, path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(self.pixels, mode="RGB").save(path, format="PPM")
        except OSError as e:
            raise IoError(f"Cannot write image: {e}", {"path": str(path)}) from e
        return path


def _to_bytes(rgb01: np.ndarray) -> np.ndarray:
    return np.round(rgb01 * 255.0).astype(np.uint8)


def _upscale(pixels: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise InvariantError(f"Upscale factor must be >= 1, got {factor}")
    return np.repeat(np.repeat(pixels, factor, axis=0), factor, axis=1)


def normalize(values: np.ndarray, scale: Scale = AUTO) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteInput("Cannot render NaN or infinite values")
    if isinstance(scale, FixedScale):
        lo, hi = scale.vmin, scale.vmax
    else:
        lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.zeros_like(values)
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0)


def render_grid(grid: np.ndarray, palette: Palette = Palette.HEAT, scale: Scale = AUTO, upscale: int = 1) -> ColorImage:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise InvariantError(f"Grid must be 2D, got shape {grid.shape}")
    pixels = _to_bytes(palette.colors(normalize(grid, scale)))
    return ColorImage(_upscale(pixels, upscale))


def _mask_for(sig: SignificanceMap, alpha: float) -> np.ndarray:
    for key, mask in sig.masks.items():
        if np.isclose(key, alpha, rtol=0, atol=1e-12):
            return mask
    raise UnknownAlpha(f"No significance mask at alpha={alpha} (available: {sig.alphas})")


def render_significance(sig: SignificanceMap, alpha: float, upscale: int = 1) -> ColorImage:
    mask = _mask_for(sig, alpha)
    pixels = np.empty(mask.shape + (3,), dtype=np.uint8)
    pixels[...] = NOT_SIGNIFICANT_RGB
    pixels[mask] = SIGNIFICANT_RGB
    return ColorImage(_upscale(pixels, upscale))


def grid_vertex_colors(mesh: Mesh, nosetip: np.ndarray, grid: np.ndarray, config: CurveConfig = CurveConfig(),
                       palette: Palette = Palette.HEAT, scale: Scale = AUTO) -> np.ndarray:
    """Per-vertex colours painting each vertex with the cell of its nearest curve point"""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape != config.shape:
        raise InvariantError(f"Grid shape {grid.shape} does not match curve layout {config.shape}")
    rel = mesh.vertices[:, :2] - np.asarray(nosetip, dtype=np.float64)[:2]
    radius = np.hypot(rel[:, 0], rel[:, 1])
    angle = np.mod(np.arctan2(rel[:, 1], rel[:, 0]), 2.0 * np.pi)
    step_r = config.r_max_mm / config.n_points
    j = np.mod(np.rint(angle / (2.0 * np.pi / config.n_curves)).astype(int), config.n_curves)
    k = np.clip(np.rint(radius / step_r).astype(int) - 1, 0, config.n_points - 1)
    colors = _to_bytes(palette.colors(normalize(grid, scale)))[j, k]
    colors[radius > config.r_max_mm + 0.5 * step_r] = OUTSIDE_RGB
    return colors


def write_colored_mesh(mesh: Mesh, colors: np.ndarray, path) -> Path:
    return save_mesh(mesh, path, vertex_colors=colors)


# ============ tables ============

def _write_csv(df: pd.DataFrame, path: Path, index: bool = True) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, index=index, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    except OSError as e:
        raise IoError(f"Cannot write table: {e}", {"path": str(path)}) from e
    return path


def rates_table(reports: Mapping[str, EvalReport]) -> pd.DataFrame:
    rows = []
    for name, report in reports.items():
        r = report.rates
        rows.append({"Female": r.female_rate, "Male": r.male_rate, "All": r.overall_rate, "#Scans": r.n_scans})
    df = pd.DataFrame(rows, columns=RATE_COLUMNS, index=pd.Index(list(reports), name="experiment"))
    return df


def matrix_tables(matrix: ExpressionMatrix) -> Tuple[pd.DataFrame, pd.DataFrame]:
    codes = [e.code for e in EXPRESSIONS]
    accuracy = pd.DataFrame(matrix.accuracy_grid(), index=pd.Index(codes, name="train"), columns=codes)
    counts = pd.DataFrame([[matrix.n_test(tr, te) for te in EXPRESSIONS] for tr in EXPRESSIONS],
                          index=pd.Index(codes, name="train"), columns=codes)
    return accuracy, counts


def spectra_table(spectra: Sequence[VarianceSpectrum]) -> pd.DataFrame:
    rows = []
    for s in spectra:
        for i, (ratio, cum) in enumerate(zip(s.ratios, s.cumulative())):
            rows.append({
                "gender": s.gender.value if s.gender else "",
                "expression": s.expression.value if s.expression else "",
                "component": i + 1,
                "ratio": ratio,
                "cumulative": cum,
            })
    return pd.DataFrame(rows, columns=["gender", "expression", "component", "ratio", "cumulative"])


def write_tables(reports: Mapping[str, EvalReport], matrix: Optional[ExpressionMatrix],
                 spectra: Sequence[VarianceSpectrum], out_dir) -> List[Path]:
    """Rates (Female/Male/All/#Scans), 5x5 expression matrix, variance spectra, plus a JSON mirror"""
    out_dir = Path(out_dir)
    written = []
    mirror: Dict[str, object] = {}
    if reports:
        table = rates_table(reports)
        written.append(_write_csv(table, out_dir / "rates.csv"))
        mirror["rates"] = {name: {col: table.loc[name, col] for col in RATE_COLUMNS} for name in table.index}
    if matrix is not None:
        accuracy, counts = matrix_tables(matrix)
        written.append(_write_csv(accuracy, out_dir / "matrix.csv"))
        written.append(_write_csv(counts, out_dir / "matrix_counts.csv"))
        mirror["matrix"] = {
            "accuracy": {tr: accuracy.loc[tr].to_dict() for tr in accuracy.index},
            "n_test": {tr: {k: int(v) for k, v in counts.loc[tr].to_dict().items()} for tr in counts.index},
            "diagonal_mean": {"weighted": matrix.diagonal_mean(True), "unweighted": matrix.diagonal_mean(False)},
            "off_diagonal_mean": {"weighted": matrix.off_diagonal_mean(True),
                                  "unweighted": matrix.off_diagonal_mean(False)},
            "row_means": {tr.code: matrix.row_means(tr) for tr in EXPRESSIONS},
        }
    if spectra:
        table = spectra_table(spectra)
        written.append(_write_csv(table, out_dir / "spectra.csv", index=False))
        mirror["spectra"] = table.to_dict(orient="records")
    written.append(dump_json(_plain(mirror), out_dir / "tables.json"))
    return written


def _plain(obj):
    """NaN-free, numpy-free copy for JSON"""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return None if np.isnan(obj) else float(obj)
    return obj


def write_histograms(histograms: Mapping, out_dir) -> List[Path]:
    """One CSV per expression: bin_left, bin_right, count_neutral, count_expressive"""
    out_dir = Path(out_dir)
    written = []
    for expression, hist in histograms.items():
        df = pd.DataFrame({
            "bin_left": hist.edges[:-1],
            "bin_right": hist.edges[1:],
            "count_neutral": hist.count_neutral,
            "count_expressive": hist.count_expressive,
        })
        written.append(_write_csv(df, out_dir / f"histogram_{expression.value}.csv", index=False))
    return written


def write_significance(sig: SignificanceMap, out_dir, prefix: str = "saliency", upscale: int = 4) -> List[Path]:
    """Long-format t/p table plus one red/gray image per alpha"""
    out_dir = Path(out_dir)
    j, k = np.meshgrid(np.arange(sig.t_values.shape[0]), np.arange(sig.t_values.shape[1]), indexing="ij")
    df = pd.DataFrame({"curve": j.ravel(), "point": k.ravel(),
                       "t": sig.t_values.ravel(), "p": sig.p_values.ravel()})
    for alpha in sig.alphas:
        df[f"significant_{alpha:g}"] = sig.masks[alpha].ravel().astype(int)
    written = [_write_csv(df, out_dir / f"{prefix}.csv", index=False)]
    for alpha in sig.alphas:
        written.append(render_significance(sig, alpha, upscale).save(out_dir / f"{prefix}_p{alpha:g}.ppm"))
    logger.info("Saliency densities: " + ", ".join(f"p<{a:g}: {sig.density(a):.4f}" for a in sig.alphas))
    return written
