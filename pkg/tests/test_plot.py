import math
import re
import xml.etree.ElementTree as ET

import pytest

from trialcate.evaluation import MetricsRecord
from trialcate.svgplot import LEFT, RIGHT, WIDTH, line_chart, plot_metrics

NS = "{http://www.w3.org/2000/svg}"


def _records(models=("M1", "M2", "M1_IPW", "M2_IPW"), sizes=(200, 500, 2000), dims=(2,)):
    out = []
    for m_i, m in enumerate(models):
        for n in sizes:
            for d in dims:
                for rep in range(2):
                    mse = 1.0 + m_i / 10 + 100 / n
                    out.append(MetricsRecord("coef_x2=0.5", m, "A", n, d, 0.5, rep, mse, 0.1 * (rep - 0.5), mse - 0.0025))
    return out


def test_four_models_four_polylines(tmp_path):
    paths = plot_metrics(_records(), tmp_path)
    assert sorted(p.name for p in paths) == [f"aimA_{m}_dimx1-2.svg" for m in ("bias", "mse", "variance")]
    root = ET.parse(tmp_path / "aimA_mse_dimx1-2.svg").getroot()
    assert len(root.findall(f"{NS}polyline")) == 4
    legend = [t.text for t in root.findall(f"{NS}text")]
    assert {"M1", "M2", "M1_IPW", "M2_IPW"} <= set(legend)


def test_tick_labels_parse_back(tmp_path):
    plot_metrics(_records(sizes=(200, 500, 2000, 5000)), tmp_path)
    text = (tmp_path / "aimA_variance_dimx1-2.svg").read_text(encoding="utf-8")
    ticks = re.findall(r'class="xtick"[^>]*>([^<]+)<', text)
    assert [int(t) for t in ticks] == [200, 500, 2000, 5000]


def test_log_x_positions():
    svg = line_chart("t", [("a", [(10, 1.0), (100, 2.0), (1000, 3.0)])])
    xs = [float(x) for x in re.findall(r'class="xtick" x="([0-9.]+)"', svg)]
    assert xs[1] - xs[0] == pytest.approx(xs[2] - xs[1], abs=0.02)
    assert xs[0] == pytest.approx(LEFT) and xs[2] == pytest.approx(WIDTH - RIGHT)


def test_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    plot_metrics(_records(), a)
    plot_metrics(_records(), b)
    for p in a.iterdir():
        assert p.read_bytes() == (b / p.name).read_bytes()


def test_bias_panel_uses_mean_absolute_bias(tmp_path):
    plot_metrics(_records(models=("M1",), sizes=(200, 500)), tmp_path)
    root = ET.parse(tmp_path / "aimA_bias_dimx1-2.svg").getroot()
    pts = root.find(f"{NS}polyline").get("points").split()
    ys = {float(p.split(",")[1]) for p in pts}
    # both replicates have |bias| 0.05 while the signed mean is 0
    assert len(ys) == 1


def test_scenarios_split_into_files(tmp_path):
    recs = _records() + [
        MetricsRecord("coef_x2=0", r.model, r.aim, r.trial_size, r.dim_x1, 0.0, r.replicate, r.mse, r.bias, r.variance)
        for r in _records()
    ]
    names = {p.name for p in plot_metrics(recs, tmp_path)}
    assert "coef_x2-0_aimA_mse_dimx1-2.svg" in names and "coef_x2-0.5_aimA_mse_dimx1-2.svg" in names


def test_empty_input(tmp_path):
    with pytest.raises(ValueError):
        plot_metrics([], tmp_path)
    nan = math.nan
    with pytest.raises(ValueError):
        plot_metrics([MetricsRecord("s", "M1", "A", 200, 2, 0.5, 0, nan, nan, nan, "error: x")], tmp_path)
