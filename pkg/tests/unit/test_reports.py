import xml.etree.ElementTree as ET

import numpy as np
import pandas as pd
import pytest

from flatlat.errors import ContractError, OutputError
from flatlat.reports import (
    Provenance,
    Report,
    csv_report,
    emit_report,
    heat_table,
    heatmap_grid,
    line_chart,
    parse_csv_report,
    read_csv_report,
)

pytestmark = pytest.mark.unit

PROV = Provenance("flatlat analyze --seed 7", 7, "0123456789ab")


def make_frame():
    return pd.DataFrame({"step": [1, 2, 3], "loss": [0.5, 0.25, 0.125]})


def svg_root(report):
    return ET.fromstring(report.payload)


class TestCsv:
    def test_header_lines(self):
        text = csv_report(make_frame(), PROV).payload.decode("utf-8")
        assert text.splitlines()[:4] == [
            "# command: flatlat analyze --seed 7",
            "# seed: 7",
            "# config_hash: 0123456789ab",
            "step,loss",
        ]

    def test_parse_returns_table_and_provenance(self):
        frame, meta = parse_csv_report(csv_report(make_frame(), PROV).payload)
        pd.testing.assert_frame_equal(frame, make_frame())
        assert meta == {"command": "flatlat analyze --seed 7", "seed": "7", "config_hash": "0123456789ab"}

    def test_same_input_same_bytes(self):
        assert csv_report(make_frame(), PROV).payload == csv_report(make_frame(), PROV).payload

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            Report("png", b"", PROV)


class TestSvg:
    def test_line_chart_is_well_formed_with_provenance(self):
        report = line_chart([1, 2, 3], {"loss": [3.0, 2.0, 1.0]}, PROV, title="loss", logy=True)
        assert report.kind == "svg"
        assert svg_root(report).tag.endswith("svg")
        text = report.payload.decode("utf-8")
        assert "seed: 7" in text
        assert text.index("<!-- command:") < text.index("<svg")

    def test_svg_is_reproducible(self):
        a = line_chart([0, 1], {"a": [1.0, 2.0]}, PROV).payload
        b = line_chart([0, 1], {"a": [1.0, 2.0]}, PROV).payload
        assert a == b

    def test_heatmap_grid(self):
        maps = np.random.default_rng(0).uniform(size=(5, 3, 3))
        svg_root(heatmap_grid(maps, PROV, title="ablation"))

    def test_heatmap_grid_rejects_flat_input(self):
        with pytest.raises(ContractError):
            heatmap_grid(np.zeros((3, 3)), PROV)

    def test_heat_table(self):
        frame = pd.DataFrame(
            {"cfg_weight": [1.5, 1.5, 3.0, 3.0], "t_lo": [0.0, 0.2, 0.0, 0.2], "accuracy": [0.5, 0.6, 0.7, 0.8]}
        )
        svg_root(heat_table(frame, "cfg_weight", "t_lo", "accuracy", PROV))

    def test_double_dash_in_command_stays_valid_xml(self):
        prov = Provenance("flatlat sample --count 4", 1, "x")
        report = line_chart([0, 1], {"a": [0.0, 1.0]}, prov)
        svg_root(report)
        assert "- -count" in report.payload.decode("utf-8")


class TestEmit:
    def test_atomic_write(self, tmp_path):
        path = emit_report(csv_report(make_frame(), PROV), tmp_path / "out" / "log.csv")
        assert sorted(p.name for p in path.parent.iterdir()) == ["log.csv"]
        frame, meta = read_csv_report(path)
        assert meta["seed"] == "7"
        assert len(frame) == 3

    def test_unwritable_target(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OutputError) as exc:
            emit_report(csv_report(make_frame(), PROV), blocker / "log.csv")
        assert exc.value.category == "io"

    def test_failed_rename_leaves_no_temp_file(self, tmp_path, monkeypatch):
        def fail(src, dst):
            raise OSError("disk full")

        monkeypatch.setattr("flatlat.reports.os.replace", fail)
        with pytest.raises(OutputError):
            emit_report(csv_report(make_frame(), PROV), tmp_path / "log.csv")
        assert list(tmp_path.iterdir()) == []
