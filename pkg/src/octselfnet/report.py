"""CSV/JSON reports and self-contained SVG curves."""

import csv
import io
import json
import os
import re
from xml.sax.saxutils import escape

from .errors import IntegrityError, UsageError

CSV_COLUMNS = ("mode", "classifier", "train_domain", "test_domain", "accuracy", "auc_roc", "auc_pr", "f1", "n_test")

# plot frame: data [0, 1] maps onto [PAD, PAD + SIZE]
PAD = 50.0
SIZE = 400.0


def _write(path, text):
    try:
        d = os.path.dirname(os.path.abspath(path))
        os.makedirs(d, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise IntegrityError(f"cannot write {path}: {exc}") from exc
    return path


def _cells(matrices):
    if not isinstance(matrices, (list, tuple)):
        matrices = [matrices]
    cells = [c for m in matrices for c in m.cells]
    return sorted(cells, key=lambda c: (c.mode, c.train_domain, c.test_domain, c.classifier))


def report_csv(matrices):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for c in _cells(matrices):
        w.writerow([c.mode, c.classifier, c.train_domain, c.test_domain,
                    repr(c.accuracy), repr(c.auc_roc), repr(c.auc_pr), repr(c.f1), c.n_test])
    return buf.getvalue()


def emit_report(matrices, path_prefix):
    """Write ``<prefix>.csv`` and ``<prefix>.json``; returns both paths."""
    cells = _cells(matrices)
    if not cells:
        raise UsageError("nothing to report: the matrix has no cells")
    csv_path = _write(path_prefix + ".csv", report_csv(matrices))
    doc = {"cells": [c.to_dict() for c in cells]}
    if not isinstance(matrices, (list, tuple)):
        matrices = [matrices]
    doc["matrices"] = [{"mode": m.mode, "domains": m.domains, "meta": m.meta} for m in matrices]
    json_path = _write(path_prefix + ".json", json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return csv_path, json_path


# ---------------------------------------------------------------------------
# SVG


def _xy(x, y):
    return PAD + x * SIZE, PAD + (1.0 - y) * SIZE


def _polyline(points, colour="#1f5fa8"):
    coords = " ".join("%.9f,%.9f" % _xy(x, y) for x, y in points)
    return f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{coords}"/>'


def _frame(title, xlabel, ylabel, body):
    w = SIZE + 2 * PAD
    ticks = []
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        x, y0 = _xy(t, 0)
        ticks.append(f'<text x="{x:.1f}" y="{y0 + 18:.1f}" font-size="11" text-anchor="middle">{t:g}</text>')
        x0, y = _xy(0, t)
        ticks.append(f'<text x="{x0 - 8:.1f}" y="{y + 4:.1f}" font-size="11" text-anchor="end">{t:g}</text>')
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0f}" height="{w:.0f}" viewBox="0 0 {w:.0f} {w:.0f}">',
        f'<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="white" stroke="black"/>',
        f'<text x="{w / 2:.1f}" y="{PAD / 2:.1f}" font-size="14" text-anchor="middle">{escape(title)}</text>',
        f'<text x="{w / 2:.1f}" y="{w - 8:.1f}" font-size="12" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{w / 2:.1f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {w / 2:.1f})">{escape(ylabel)}</text>',
        *ticks, *body, "</svg>", ""])


def roc_svg(points, title="ROC"):
    x0, y0 = _xy(0, 0)
    x1, y1 = _xy(1, 1)
    chance = f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y1}" stroke="#999" stroke-dasharray="4 4"/>'
    return _frame(title, "false positive rate", "true positive rate", [chance, _polyline(points)])


def pr_svg(points, title="Precision-recall"):
    return _frame(title, "recall", "precision", [_polyline(points, "#a8401f")])


def loss_svg(history, title="MSE loss", keys=("train_loss", "val_loss")):
    """One polyline per series, one vertex per epoch; y is scaled to the joint range."""
    series = [(k, history[k]) for k in keys if history.get(k)]
    if not series:
        raise UsageError("history has no loss series to plot")
    lo = min(min(v) for _, v in series)
    hi = max(max(v) for _, v in series)
    span = hi - lo or 1.0
    colours = ("#1f5fa8", "#a8401f", "#2e8b57")
    body = []
    for (k, v), col in zip(series, colours):
        n = len(v)
        pts = [((i / (n - 1)) if n > 1 else 0.5, (val - lo) / span) for i, val in enumerate(v)]
        body.append(_polyline(pts, col))
        body.append(f'<text x="{PAD + 8}" y="{PAD + 16 + 14 * len(body) // 2}" font-size="11" fill="{col}">{k}</text>')
    body.append(f'<text x="{PAD + SIZE}" y="{PAD - 4}" font-size="10" text-anchor="end">'
                f'range {lo:.6g} to {hi:.6g}</text>')
    return _frame(title, "epoch (scaled)", "loss (scaled)", body)


def emit_curves(obj, path, kind=None, title=None):
    """Write an SVG: ``kind`` 'roc' or 'pr' for an EvalReport, or a loss history dict."""
    if isinstance(obj, dict):
        return _write(path, loss_svg(obj, title or "loss"))
    if kind == "roc":
        return _write(path, roc_svg(obj.roc_points, title or f"ROC {obj.train_domain} -> {obj.test_domain}"))
    if kind == "pr":
        return _write(path, pr_svg(obj.pr_points, title or f"PR {obj.train_domain} -> {obj.test_domain}"))
    raise UsageError("emit_curves needs kind='roc' or 'pr' for a report")


def svg_polylines(svg_text):
    """Parse every polyline back into data-space (x, y) lists."""
    out = []
    for m in re.finditer(r'<polyline[^>]*points="([^"]*)"', svg_text):
        pts = []
        for pair in m.group(1).split():
            sx, sy = (float(v) for v in pair.split(","))
            pts.append(((sx - PAD) / SIZE, 1.0 - (sy - PAD) / SIZE))
        out.append(pts)
    return out
