"""CSV writers, manifest atomicity, and figure rendering."""

import hashlib
import re

import pytest

from sidetune.errors import DataFormatError
from sidetune.report import (
    RESULTS_COLUMNS,
    fmt,
    read_results_csv,
    render_figures,
    write_csv,
    write_manifest,
)


def results_fixture(tmp_path, rows):
    path = tmp_path / "results.csv"
    write_csv(path, RESULTS_COLUMNS, rows)
    return path


def grid_rows(strategy="sidetune", run_id="abc123", m=3, flat=True):
    rows = []
    for i in range(1, m + 1):
        for j in range(1, i + 1):
            value = 0.3 if flat else 0.3 + 0.1 * (i - j)
            rows.append((run_id, strategy, i, j, "loss", value + 0.01 * j, 1, 50))
            rows.append((run_id, strategy, i, j, "error_rate", value, 1, 50))
    for j in range(1, m + 1):
        rows.append((f"{run_id}/ctrl-{j}", strategy, j, j, "loss", 0.31 + 0.01 * j, 1, 50))
    return rows


def test_fmt_round_trips_floats():
    assert fmt(0.1) == "0.1"
    assert float(fmt(1 / 3)) == 1 / 3
    assert fmt(None) == ""
    assert fmt(7) == "7"


def test_csv_bytes_deterministic(tmp_path):
    rows = grid_rows()
    a = results_fixture(tmp_path / "a", rows)
    b = results_fixture(tmp_path / "b", rows)
    assert a.read_bytes() == b.read_bytes()


def test_read_results_round_trip(tmp_path):
    path = results_fixture(tmp_path, grid_rows())
    parsed = read_results_csv(path)
    assert parsed.stages["sidetune"] == 3
    assert parsed.grids["sidetune"][1][3] == pytest.approx(0.3)
    assert parsed.control_losses["sidetune"][2] == pytest.approx(0.33)


def test_read_results_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("nope,nope\n1,2\n")
    with pytest.raises(DataFormatError, match="line 1"):
        read_results_csv(path)


def test_read_results_reports_line_numbers(tmp_path):
    path = results_fixture(tmp_path, grid_rows())
    text = path.read_text().splitlines()
    text[3] = text[3].replace("loss", "banana")
    path.write_text("\n".join(text) + "\n")
    with pytest.raises(DataFormatError, match="line 4"):
        read_results_csv(path)
    text[3] = "only,three,fields"
    path.write_text("\n".join(text) + "\n")
    with pytest.raises(DataFormatError, match="line 4"):
        read_results_csv(path)


def test_manifest_atomic_write(tmp_path):
    path = tmp_path / "manifest.json"
    write_manifest(path, {"b": 2, "a": 1})
    body = path.read_text()
    assert body.index('"a"') < body.index('"b"')  # sorted keys
    assert not (tmp_path / "manifest.json.tmp").exists()


def test_figures_deterministic(tmp_path):
    path = results_fixture(tmp_path, grid_rows())
    first = render_figures(path, tmp_path / "f1")
    second = render_figures(path, tmp_path / "f2")
    assert [p.name for p in first] == [p.name for p in second]
    for a, b in zip(first, second):
        assert hashlib.sha256(a.read_bytes()).digest() == hashlib.sha256(b.read_bytes()).digest()


def test_figures_include_rigidity_only_with_controls(tmp_path):
    rows = [r for r in grid_rows() if "/ctrl-" not in r[0]]
    path = results_fixture(tmp_path, rows)
    written = render_figures(path, tmp_path / "figs")
    names = {p.name for p in written}
    assert "rigidity.svg" not in names
    assert "forgetting.svg" in names


def test_empty_results_render_no_data(tmp_path):
    path = results_fixture(tmp_path, [])
    written = render_figures(path, tmp_path / "figs")
    assert len(written) == 1
    body = written[0].read_text()
    assert "no data" in body


def test_flat_curves_have_flat_polylines(tmp_path):
    # a frozen-row grid must render each task's curve at constant height
    path = results_fixture(tmp_path, grid_rows(flat=True))
    written = render_figures(path, tmp_path / "figs")
    curves = next(p for p in written if p.name.startswith("curves_"))
    svg = curves.read_text()
    for j in (1, 2, 3):
        match = re.search(rf'<g id="curve-task-{j}">.*?d="([^"]+)"', svg, re.S)
        assert match, f"missing polyline for task {j}"
        ys = [float(pair.split()[1]) for pair in
              re.findall(r"[ML] ([-\d.]+ [-\d.]+)", match.group(1))]
        assert max(ys) - min(ys) < 1e-6, f"task {j} curve is not flat: {ys}"
