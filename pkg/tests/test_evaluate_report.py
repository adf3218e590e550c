import json
import os
import re

import numpy as np
import pytest

from octselfnet.backbones import build_mae
from octselfnet.checkpoint import Checkpoint
from octselfnet.data import generate_synthetic_domain
from octselfnet.errors import CheckpointError, ConfigError, UsageError
from octselfnet.evaluate import (
    CrossEvalMatrix, EvalReport, cross_evaluate, load_report, mode_config, score_report, write_matrix_artifacts,
)
from octselfnet.finetune import FinetuneConfig
from octselfnet.metrics import auc_roc, ScoredSet
from octselfnet.report import CSV_COLUMNS, emit_curves, emit_report, loss_svg, report_csv, roc_svg, svg_polylines

from conftest import tiny_spec

FAST = FinetuneConfig(augment=False, max_epochs=2, patience=1, batch_size=8)


@pytest.fixture(scope="module")
def domains(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("dom"))
    return [generate_synthetic_domain(tiny_spec(name=f"d{i}", seed=10 + i, extra=False), root) for i in range(3)]


def pretrained(domains, preset="vit-desk"):
    mae = build_mae(preset, 0, in_chans=3)
    return Checkpoint("pretrain", {"kind": mae.cfg.kind, "preset": preset,
                                   "domains": [d.domain_name for d in domains]}, mae.state_dict())


def fake_matrix(mode="full", names=("a", "b", "c"), seed=0):
    rng = np.random.default_rng(seed)
    cells = []
    for tr in names:
        for te in names:
            cells.append(score_report(mode, "vit-desk", tr, te, rng.random(12), [0, 1] * 6, "fp"))
    return CrossEvalMatrix(mode, list(names), cells, {"seed": seed})


class TestModes:
    def test_mode_config(self):
        assert mode_config("half-data").train_fraction == 0.5
        assert mode_config("no-aug").augment is False
        assert mode_config("baseline").selection == "val_loss"
        assert mode_config("full", seed=7).seed == 7

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            mode_config("zero-shot")


class TestCrossEvaluate:
    def test_nine_cells(self, domains):
        m = cross_evaluate(domains, "full", "vit-desk", pretrained(domains), FAST)
        assert len(m.cells) == 9 and m.grid().shape == (3, 3)
        for c in m.cells:
            assert all(0 <= getattr(c, k) <= 1 for k in ("accuracy", "auc_roc", "auc_pr", "f1"))
            assert c.n_test == 4

    def test_reproducible_csv(self, domains):
        runs = [report_csv(cross_evaluate(domains[:2], "no-aug", "vit-desk", pretrained(domains[:2]), FAST))
                for _ in range(2)]
        assert runs[0] == runs[1]

    def test_baseline_no_ckpt(self, domains):
        m = cross_evaluate(domains[:2], "baseline", "vit-desk", None,
                           FinetuneConfig(augment=False, max_epochs=2, patience=1, batch_size=8,
                                          pipeline="baseline", selection="val_loss"))
        assert {c.classifier for c in m.cells} == {"resnet-desk"}

    def test_needs_checkpoint(self, domains):
        with pytest.raises(CheckpointError):
            cross_evaluate(domains, "full", "vit-desk", None, FAST)

    def test_needs_two_domains(self, domains):
        with pytest.raises(ConfigError):
            cross_evaluate(domains[:1], "full", "vit-desk", pretrained(domains[:1]), FAST)

    def test_ds1_only_checks_domains(self, domains):
        with pytest.raises(ConfigError):
            cross_evaluate(domains, "pretrain-ds1-only", "vit-desk", pretrained(domains), FAST)
        m = cross_evaluate(domains[:2], "pretrain-ds1-only", "vit-desk", pretrained(domains[:1]), FAST)
        assert len(m.cells) == 4

    def test_half_data_counts(self, domains):
        m = cross_evaluate(domains[:2], "half-data", "vit-desk", pretrained(domains[:2]), FAST)
        assert m.meta["runs"]["d0"]["train_counts"] == {"normal": 2, "amd": 2}


class TestReport:
    def test_csv_rows_and_order(self, tmp_path):
        m = fake_matrix()
        csv_path, _ = emit_report(m, str(tmp_path / "r"))
        lines = open(csv_path).read().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS) and len(lines) == 10
        keys = [tuple(l.split(",")[:4]) for l in lines[1:]]
        assert keys == sorted(keys)

    def test_sort_is_input_order_free(self):
        a = fake_matrix()
        b = CrossEvalMatrix(a.mode, a.domains, list(reversed(a.cells)), a.meta)
        assert report_csv(a) == report_csv(b)

    def test_json_round_trip(self, tmp_path):
        m = fake_matrix()
        _, json_path = emit_report(m, str(tmp_path / "r"))
        back = load_report(json_path)[0]
        for c in m.cells:
            d = back.cell(c.train_domain, c.test_domain)
            assert (d.accuracy, d.auc_roc, d.auc_pr, d.f1) == (c.accuracy, c.auc_roc, c.auc_pr, c.f1)
            assert d.roc_points == [tuple(p) for p in c.roc_points]

    def test_empty(self, tmp_path):
        with pytest.raises(UsageError):
            emit_report(CrossEvalMatrix("full", [], []), str(tmp_path / "x"))

    def test_artifacts(self, tmp_path):
        paths = write_matrix_artifacts(fake_matrix(names=("a", "b")), str(tmp_path))
        assert len(paths) == 2 + 4 * 2 and all(os.path.exists(p) for p in paths)

    def test_off_diagonal_mean(self):
        m = fake_matrix()
        g = m.grid()
        assert m.off_diagonal_mean() == pytest.approx((g.sum() - np.trace(g)) / 6, abs=1e-15)


def shoelace_under(points):
    xs, ys = zip(*points)
    return sum((xs[i + 1] - xs[i]) * (ys[i + 1] + ys[i]) / 2 for i in range(len(xs) - 1))


class TestSvg:
    def test_two_point_roc(self):
        svg = roc_svg([(0.0, 0.0), (1.0, 1.0)])
        assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
        assert len(re.findall("<polyline", svg)) == 1

    def test_loss_fifty(self):
        svg = loss_svg({"train_loss": list(np.linspace(1, 0.1, 50))}, keys=("train_loss",))
        assert [len(p) for p in svg_polylines(svg)] == [50]

    def test_reintegration(self, rng):
        s, y = rng.random(40), rng.integers(0, 2, 40)
        y[:2] = (0, 1)
        r = auc_roc(ScoredSet(s, y))
        pts = svg_polylines(roc_svg(r.points))[0]
        assert abs(shoelace_under(pts) - r.value) < 1e-6

    def test_emit_curves_kinds(self, tmp_path):
        c = fake_matrix().cells[0]
        assert os.path.exists(emit_curves(c, str(tmp_path / "roc.svg"), "roc"))
        with pytest.raises(UsageError):
            emit_curves(c, str(tmp_path / "x.svg"))
        with pytest.raises(UsageError):
            loss_svg({})

    def test_well_formed_xml(self):
        import xml.etree.ElementTree as ET

        ET.fromstring(roc_svg([(0.0, 0.0), (0.5, 0.7), (1.0, 1.0)], title="a <b> & c"))
