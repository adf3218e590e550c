"""Domain manifests: CSV rows of ``path,label,split`` relative to the manifest's folder."""

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .._util import floor_count
from ..errors import DataError, IntegrityError, ManifestParseError

LABELS = ("normal", "amd", "cnv", "dme")
SPLITS = ("train", "val", "test")
BINARY = ("normal", "amd")
# Drusen scans count as AMD.
LABEL_ALIASES = {"drusen": "amd"}


@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: str
    split: str


@dataclass
class DatasetManifest:
    domain_name: str
    rows: list
    root: str = "."
    fingerprint: dict = field(default_factory=dict)

    def select(self, split=None, labels=None):
        return [r for r in self.rows
                if (split is None or r.split == split) and (labels is None or r.label in labels)]

    def counts(self, split=None, labels=None):
        out = {}
        for r in self.select(split, labels):
            out[r.label] = out.get(r.label, 0) + 1
        return out

    def abspath(self, row):
        return os.path.join(self.root, row.path)

    def binary(self):
        """Copy restricted to normal/amd rows."""
        return replace(self, rows=self.select(labels=BINARY))


def check_disjoint(rows):
    seen = {}
    for r in rows:
        prev = seen.setdefault(r.path, r.split)
        if prev != r.split:
            raise DataError(f"{r.path!r} appears in both {prev!r} and {r.split!r} splits")


def load_manifest(path, domain_name=None, check_files=True):
    """Parse a manifest; labels are validated per line and files must exist."""
    rows = []
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IntegrityError(f"cannot read manifest {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "label", "split"]:
            raise ManifestParseError(f"{path}:1: header must be 'path,label,split'")
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != 3:
                raise ManifestParseError(f"{path}:{lineno}: expected 3 fields, got {len(rec)}")
            p, label, split = (c.strip() for c in rec)
            label = LABEL_ALIASES.get(label.lower(), label.lower())
            if label not in LABELS:
                raise ManifestParseError(f"{path}:{lineno}: unknown label {rec[1]!r}")
            if split not in SPLITS:
                raise ManifestParseError(f"{path}:{lineno}: unknown split {split!r}")
            rows.append(ManifestRow(p, label, split))
    check_disjoint(rows)
    root = os.path.dirname(os.path.abspath(path))
    if check_files:
        for r in rows:
            if not os.path.isfile(os.path.join(root, r.path)):
                raise IntegrityError(f"manifest {path} lists missing image {r.path!r}")
    name = domain_name or os.path.basename(root)
    return DatasetManifest(name, rows, root)


def write_manifest(path, rows):
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "label", "split"])
            for r in rows:
                w.writerow([r.path, r.label, r.split])
    except OSError as exc:
        raise IntegrityError(f"cannot write manifest {path}: {exc}") from exc


def subsample_fraction(manifest, split, fraction, seed):
    """Keep floor(fraction * n_c) rows of each class c in ``split``; other splits untouched."""
    if not 0 < fraction <= 1:
        raise DataError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1:
        return manifest
    rng = np.random.default_rng(seed)
    keep = set()
    for label in sorted(manifest.counts(split)):
        idx = [i for i, r in enumerate(manifest.rows) if r.split == split and r.label == label]
        k = floor_count(fraction, len(idx))
        if k == 0:
            raise DataError(f"fraction {fraction} leaves no {label!r} rows in {split!r}")
        keep.update(idx[j] for j in np.sort(rng.choice(len(idx), size=k, replace=False)))
    rows = [r for i, r in enumerate(manifest.rows) if r.split != split or i in keep]
    return replace(manifest, rows=rows)
