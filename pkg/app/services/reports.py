"""
Emissão de relatórios: CSVs de métricas e tendência, montagens PGM,
GIF animado de templates ao longo da idade e gráficos SVG.
"""

import csv
import io
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import imageio.v3 as iio
import numpy as np
from jinja2 import Environment, FileSystemLoader, select_autoescape
from PIL import Image

from app.config import LABEL_NAMES, TEMPLATES_DIR
from app.services.evaluation import MetricReport
from app.services.file_utils import atomic_text_write, atomic_write_bytes
from app.services.trends import TrendReport

logger = logging.getLogger(__name__)

# Duração de cada frame do GIF (ms)
GIF_FRAME_MS = 400

_env = Environment(
    loader=FileSystemLoader(str(TEMPLATES_DIR)),
    autoescape=select_autoescape(["svg", "j2"]),
    trim_blocks=True,
    lstrip_blocks=True,
)


def _fmt(value: float) -> str:
    return "nan" if value is None or (isinstance(value, float) and math.isnan(value)) else repr(float(value))


# =============================================================================
# CSV
# =============================================================================

def metrics_csv(report: MetricReport) -> str:
    """Uma linha por sujeito por rótulo e uma linha "mean" por sujeito."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([
        "subject", "label", "dice", "surface_distance_mean_symmetric", "neg_jac_fraction", "mean_grad_norm",
    ])
    for row in report.rows:
        for c, d in sorted(row.dice.per_label.items()):
            writer.writerow([
                row.subject_id, LABEL_NAMES.get(c, c), _fmt(d), _fmt(row.surface_distance),
                _fmt(row.regularity.neg_jac_fraction), _fmt(row.regularity.mean_grad_norm),
            ])
        writer.writerow([
            row.subject_id, "mean", _fmt(row.dice.mean), _fmt(row.surface_distance),
            _fmt(row.regularity.neg_jac_fraction), _fmt(row.regularity.mean_grad_norm),
        ])
    return buf.getvalue()


def aggregate_csv(report: MetricReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "mean", "ci95_half_width", "n"])
    for name, (mean, half) in report.aggregate().items():
        writer.writerow([name, _fmt(mean), _fmt(half), len(report.rows)])
    return buf.getvalue()


def trend_csv(report: TrendReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["age", "structure", "template_vol", "kde_vol", "lt2019_vol", "rel_err", "lt2019_rel_err", "in_support"])
    for r in report.rows:
        writer.writerow([
            _fmt(r.age), r.structure_name, _fmt(r.template_vol), _fmt(r.kde_vol), _fmt(r.lt2019_vol),
            _fmt(r.rel_err), _fmt(r.lt2019_rel_err), int(r.in_support),
        ])
    return buf.getvalue()


def write_metrics(report: MetricReport, out_dir: Path) -> List[Path]:
    paths = [out_dir / "metrics.csv", out_dir / "metrics_aggregate.csv"]
    atomic_text_write(paths[0], metrics_csv(report))
    atomic_text_write(paths[1], aggregate_csv(report))
    return paths


def write_trend(report: TrendReport, out_dir: Path, svg: bool = True) -> List[Path]:
    paths = [out_dir / "trend.csv"]
    atomic_text_write(paths[0], trend_csv(report))
    if svg:
        for c in sorted({r.structure for r in report.rows}):
            name = LABEL_NAMES.get(c, f"label{c}")
            path = out_dir / f"trend_{name}.svg"
            atomic_text_write(path, render_trend_svg(report, c))
            paths.append(path)
    return paths


# =============================================================================
# Imagens
# =============================================================================

def to_uint8(data: np.ndarray, lo: Optional[float] = None, hi: Optional[float] = None) -> np.ndarray:
    """Escala para 0-255; volumes 3D viram a fatia central do eixo 0."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[arr.shape[0] // 2]
    lo = float(arr.min()) if lo is None else lo
    hi = float(arr.max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(arr.shape, dtype=np.uint8)
    return np.clip(np.round((arr - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


def labels_to_uint8(labels: np.ndarray, n_labels: int) -> np.ndarray:
    return to_uint8(labels.astype(np.float64), 0.0, float(max(n_labels - 1, 1)))


def montage(frames: Sequence[np.ndarray], gap: int = 2) -> np.ndarray:
    """Concatena frames 2D uint8 lado a lado com separador preto."""
    h = max(f.shape[0] for f in frames)
    parts = []
    for i, f in enumerate(frames):
        padded = np.zeros((h, f.shape[1]), dtype=np.uint8)
        padded[: f.shape[0]] = f
        parts.append(padded)
        if i < len(frames) - 1:
            parts.append(np.zeros((h, gap), dtype=np.uint8))
    return np.concatenate(parts, axis=1)


def pgm_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PPM")  # uint8 2D -> PGM binário
    return buf.getvalue()


def png_bytes(image: np.ndarray, scale: int = 1) -> bytes:
    img = Image.fromarray(image)
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.Resampling.NEAREST)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def write_pgm(image: np.ndarray, path: Path) -> Path:
    atomic_write_bytes(path, pgm_bytes(image))
    return path


def write_gif(frames: Sequence[np.ndarray], path: Path, duration_ms: int = GIF_FRAME_MS) -> Path:
    buf = io.BytesIO()
    iio.imwrite(buf, list(frames), extension=".gif", duration=duration_ms, loop=0)
    atomic_write_bytes(path, buf.getvalue())
    return path


def template_montage(intensities: Sequence[np.ndarray], labels: Optional[Sequence[np.ndarray]] = None,
                     n_labels: int = 0) -> np.ndarray:
    """Linha de intensidades (escala comum) e, opcionalmente, linha de rótulos."""
    lo = min(float(np.min(i)) for i in intensities)
    hi = max(float(np.max(i)) for i in intensities)
    top = montage([to_uint8(i, lo, hi) for i in intensities])
    if not labels:
        return top
    bottom = montage([labels_to_uint8(lab, n_labels) for lab in labels])
    return np.concatenate([top, np.zeros((2, top.shape[1]), dtype=np.uint8), bottom], axis=0)


# =============================================================================
# SVG
# =============================================================================

def _polyline(xs: Sequence[float], ys: Sequence[float], x_range, y_range, width, height, pad) -> str:
    (x0, x1), (y0, y1) = x_range, y_range
    pts = []
    for x, y in zip(xs, ys):
        if y is None or math.isnan(y):
            continue
        px = pad + (x - x0) / max(x1 - x0, 1e-12) * (width - 2 * pad)
        py = height - pad - (y - y0) / max(y1 - y0, 1e-12) * (height - 2 * pad)
        pts.append(f"{px:.1f},{py:.1f}")
    return " ".join(pts)


def render_trend_svg(report: TrendReport, structure: int, width: int = 480, height: int = 320) -> str:
    """Gráfico de linhas: template, KDE populacional e LT2019 (se houver)."""
    pad = 40
    ages = [r.age for r in report.rows if r.structure == structure]
    series = {
        "template": [r.template_vol for r in report.rows if r.structure == structure],
        "kde": [r.kde_vol for r in report.rows if r.structure == structure],
        "lt2019": [r.lt2019_vol for r in report.rows if r.structure == structure],
    }
    finite = [v for vals in series.values() for v in vals if not math.isnan(v)]
    y_range = (min(finite) * 0.9, max(finite) * 1.1) if finite else (0.0, 1.0)
    x_range = (min(ages), max(ages)) if ages else (0.0, 1.0)

    lines = []
    colors = {"template": "#1f77b4", "kde": "#444444", "lt2019": "#d62728"}
    for name, vals in series.items():
        pts = _polyline(ages, vals, x_range, y_range, width, height, pad)
        if pts:
            lines.append({"name": name, "points": pts, "color": colors[name]})

    return _env.get_template("trend_chart.svg.j2").render(
        title=f"{LABEL_NAMES.get(structure, structure)} ({report.tag}), bandwidth {report.bandwidth:g}",
        width=width,
        height=height,
        pad=pad,
        lines=lines,
        x_range=x_range,
        y_range=y_range,
    )
