"""
Testes da emissao de relatorios (CSV, PGM, GIF, PNG e SVG).
"""

import csv
import io

import imageio.v3 as iio
import numpy as np
import pytest
from PIL import Image

from app.services import reports
from app.services.evaluation import DiceResult, MetricReport, Regularity, SubjectMetrics
from app.services.trends import TrendReport, TrendRow


def _metric_report():
    rows = [
        SubjectMetrics("sub-0001", DiceResult({1: 0.8, 2: float("nan")}, 0.8), 1.5, Regularity(0.0, 0.2)),
        SubjectMetrics("sub-0002", DiceResult({1: 0.6, 2: 0.4}, 0.5), 2.5, Regularity(0.01, 0.3)),
    ]
    return MetricReport(rows, 3)


def _trend_report():
    rows = [
        TrendRow(20, 2, 11.0, 10.0, float("nan"), 0.1, float("nan"), True),
        TrendRow(40, 2, 13.0, 12.0, float("nan"), 1 / 12, float("nan"), True),
    ]
    return TrendReport("F", 5.0, rows)


class TestCsv:
    """Testes para metrics_csv(), aggregate_csv() e trend_csv()."""

    def test_metrics_rows(self):
        """Deve gravar uma linha por rotulo e uma linha mean por sujeito."""
        rows = list(csv.DictReader(io.StringIO(reports.metrics_csv(_metric_report()))))
        assert len(rows) == 6
        assert rows[0]["label"] == "cortex"
        assert rows[1]["dice"] == "nan"
        assert rows[2]["label"] == "mean" and float(rows[2]["dice"]) == 0.8

    def test_aggregate_rows(self):
        """Deve agregar media e IC por metrica."""
        rows = {r["metric"]: r for r in csv.DictReader(io.StringIO(reports.aggregate_csv(_metric_report())))}
        assert float(rows["dice_mean"]["mean"]) == pytest.approx(0.65)
        assert float(rows["dice_2"]["ci95_half_width"]) == 0.0
        assert rows["surface_distance"]["n"] == "2"

    def test_trend_columns(self):
        """Deve usar o nome da estrutura e o flag de suporte."""
        rows = list(csv.DictReader(io.StringIO(reports.trend_csv(_trend_report()))))
        assert rows[0]["structure"] == "ventricle"
        assert rows[0]["in_support"] == "1"
        assert rows[0]["lt2019_vol"] == "nan"

    def test_write_files(self, temp_dir):
        """Deve gravar CSVs e SVG no diretorio de saida."""
        paths = reports.write_metrics(_metric_report(), temp_dir)
        paths += reports.write_trend(_trend_report(), temp_dir)
        names = sorted(p.name for p in paths)
        assert names == ["metrics.csv", "metrics_aggregate.csv", "trend.csv", "trend_ventricle.svg"]
        assert all(p.is_file() for p in paths)


class TestSvg:
    """Testes para render_trend_svg()."""

    def test_contains_series(self):
        """Deve desenhar as series finitas e omitir a vazia."""
        svg = reports.render_trend_svg(_trend_report(), 2)
        assert svg.lstrip().startswith("<svg")
        assert "template" in svg and "kde" in svg
        assert "#d62728" not in svg

    def test_templates_dir_holds_chart(self):
        """Deve achar o template do grafico ao lado do pacote app."""
        from app.config import TEMPLATES_DIR

        assert (TEMPLATES_DIR / "trend_chart.svg.j2").is_file()


class TestImages:
    """Testes para imagens PGM, PNG e GIF."""

    def test_to_uint8_range(self):
        """Deve escalar para 0-255."""
        out = reports.to_uint8(np.array([[0.0, 0.5], [1.0, 1.0]]))
        assert out.dtype == np.uint8
        assert out.min() == 0 and out.max() == 255

    def test_to_uint8_constant(self):
        """Deve devolver zeros para imagem constante."""
        assert reports.to_uint8(np.ones((3, 3))).max() == 0

    def test_to_uint8_takes_central_slice(self):
        """Deve usar a fatia central de volumes 3D."""
        assert reports.to_uint8(np.zeros((5, 4, 6))).shape == (4, 6)

    def test_montage_width(self):
        """Deve somar larguras e separadores."""
        frames = [np.zeros((4, 5), dtype=np.uint8)] * 3
        assert reports.montage(frames, gap=2).shape == (4, 19)

    def test_template_montage_with_labels(self):
        """Deve empilhar a linha de rotulos sob a de intensidades."""
        panel = reports.template_montage([np.zeros((8, 8)), np.ones((8, 8))], [np.zeros((8, 8), dtype=int)] * 2, 5)
        assert panel.shape == (18, 18)

    def test_pgm_header(self, temp_dir):
        """Deve gravar PGM binario."""
        path = reports.write_pgm(np.zeros((4, 6), dtype=np.uint8), temp_dir / "x.pgm")
        assert path.read_bytes().startswith(b"P5")

    def test_png_scale(self):
        """Deve ampliar por vizinho mais proximo."""
        png = reports.png_bytes(np.zeros((4, 6), dtype=np.uint8), scale=3)
        assert Image.open(io.BytesIO(png)).size == (18, 12)

    def test_gif_frames(self, temp_dir):
        """Deve gravar um frame por imagem."""
        frames = [np.full((8, 8), v, dtype=np.uint8) for v in (0, 128, 255)]
        path = reports.write_gif(frames, temp_dir / "a.gif")
        assert iio.imread(path, index=None).shape[0] == 3
