"""Cross-dataset evaluation: fine-tune on each domain, test on every domain."""

import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ._util import fingerprint, stable_int
from .backbones import build_classifier, is_resnet
from .data.loader import binary_set
from .data.transforms import AugmentationPipeline
from .errors import CheckpointError, ConfigError, IntegrityError
from .finetune import FinetuneConfig, baseline_config, finetune, predict, transfer_encoder_weights
from .metrics import summarize
from .report import emit_curves, emit_report

MODES = ("full", "half-data", "no-aug", "pretrain-ds1-only", "baseline")
METRICS = ("accuracy", "auc_roc", "auc_pr", "f1")


@dataclass
class EvalReport:
    mode: str
    classifier: str
    train_domain: str
    test_domain: str
    accuracy: float
    auc_roc: float
    auc_pr: float
    f1: float
    roc_points: list
    pr_points: list
    n_test: int
    fingerprint: str = ""

    def to_dict(self):
        d = asdict(self)
        d["roc_points"] = [list(p) for p in self.roc_points]
        d["pr_points"] = [list(p) for p in self.pr_points]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["roc_points"] = [tuple(p) for p in d["roc_points"]]
        d["pr_points"] = [tuple(p) for p in d["pr_points"]]
        return cls(**d)


@dataclass
class CrossEvalMatrix:
    mode: str
    domains: list
    cells: list
    meta: dict = field(default_factory=dict)

    def cell(self, train_domain, test_domain):
        for c in self.cells:
            if c.train_domain == train_domain and c.test_domain == test_domain:
                return c
        raise KeyError((train_domain, test_domain))

    def grid(self, metric="auc_roc"):
        return np.array([[getattr(self.cell(a, b), metric) for b in self.domains] for a in self.domains])

    def diagonal(self, metric="auc_roc"):
        return np.diag(self.grid(metric))

    def off_diagonal_mean(self, metric="auc_roc"):
        g = self.grid(metric)
        mask = ~np.eye(len(self.domains), dtype=bool)
        return float(g[mask].mean())


def score_report(mode, classifier, train_domain, test_domain, scores, labels, fp=""):
    m = summarize(scores, labels)
    return EvalReport(mode, classifier, train_domain, test_domain, m["accuracy"], m["auc_roc"], m["auc_pr"],
                      m["f1"], m["roc_points"], m["pr_points"], int(len(labels)), fp)


def domain_seed(seed, domain):
    """Independent per-domain seed so train domains can run in any order."""
    return seed + stable_int(domain) % 100003


def mode_config(mode, base=None, seed=0):
    """Fine-tuning hyperparameters implied by an evaluation mode.

    ``base`` defaults to the baseline recipe for ``baseline`` and to the
    fine-tuning recipe otherwise.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
    if base is None:
        base = baseline_config() if mode == "baseline" else FinetuneConfig()
    cfg = base
    if mode == "half-data":
        cfg = replace(cfg, train_fraction=0.5)
    elif mode == "no-aug":
        cfg = replace(cfg, augment=False)
    return replace(cfg, seed=seed)


def cross_evaluate(domains, mode, preset, pretrained=None, base_config=None, seed=0, run_dir=None, log=None,
                   baseline_preset="resnet-desk"):
    """Fill the D x D matrix for ``mode``.

    ``domains`` are DatasetManifests; ``pretrained`` is the pretraining
    checkpoint (required except for ``baseline``, which trains a ResNet from
    scratch on each domain).
    """
    if len(domains) < 2:
        raise ConfigError("cross-evaluation needs at least two domains")
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
    names = [d.domain_name for d in domains]
    if mode == "baseline":
        preset = baseline_preset
        if not is_resnet(preset):
            raise ConfigError(f"baseline mode trains a ResNet preset, got {preset!r}")
    else:
        if pretrained is None:
            raise CheckpointError(f"mode {mode!r} needs a pretrained checkpoint")
        pre_domains = pretrained.config.get("domains", [])
        if mode == "pretrain-ds1-only" and pre_domains != names[:1]:
            raise ConfigError(f"pretrain-ds1-only expects a checkpoint pretrained on {names[:1]}, got {pre_domains}")
        if mode != "pretrain-ds1-only" and sorted(pre_domains) != sorted(names):
            raise ConfigError(f"mode {mode!r} expects pretraining on {names}, checkpoint saw {pre_domains}")
    cells = []
    meta = {"preset": preset, "seed": seed, "runs": {}}
    for train_dom in domains:
        s = domain_seed(seed, train_dom.domain_name)
        cfg = mode_config(mode, base_config, s)
        model = build_classifier(preset, s, in_chans=3)
        census = None
        if mode != "baseline":
            census = transfer_encoder_weights(model, pretrained).census
        tag = f"{mode}_{train_dom.domain_name}"
        res = finetune(model, train_dom, cfg, run_dir=run_dir, log=log, name=f"finetune_{tag}",
                       run_config={"mode": mode, "preset": preset})
        fp = fingerprint(res.checkpoint.config)
        meta["runs"][train_dom.domain_name] = {"fingerprint": fp, "best_epoch": res.stop.best_epoch,
                                               "epochs_run": len(res.history["epoch"]),
                                               "train_counts": res.train_counts, "census": census,
                                               "history": res.history}
        pipe = AugmentationPipeline("none", model.cfg.image_size, cfg.scheme)
        for test_dom in domains:
            test = binary_set(test_dom, "test", pipe, seed=s)
            scores = predict(model, test)
            cells.append(score_report(mode, preset, train_dom.domain_name, test_dom.domain_name,
                                      scores, test.targets, fp))
            if log:
                c = cells[-1]
                log(f"{mode} {train_dom.domain_name} -> {test_dom.domain_name}: auc_roc {c.auc_roc:.4f} "
                    f"acc {c.accuracy:.4f}")
    return CrossEvalMatrix(mode, names, cells, meta)


def load_report(json_path):
    try:
        with open(json_path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"cannot read report {json_path}: {exc}") from exc
    cells = [EvalReport.from_dict(c) for c in doc["cells"]]
    return [CrossEvalMatrix(m["mode"], m["domains"], [c for c in cells if c.mode == m["mode"]], m["meta"])
            for m in doc["matrices"]]


def write_matrix_artifacts(matrix, out_dir):
    """Report files plus ROC/PR SVGs for every cell."""
    paths = list(emit_report(matrix, os.path.join(out_dir, f"report_{matrix.mode}")))
    for c in matrix.cells:
        stem = os.path.join(out_dir, "curves", f"{matrix.mode}_{c.train_domain}_to_{c.test_domain}")
        paths.append(emit_curves(c, stem + "_roc.svg", "roc"))
        paths.append(emit_curves(c, stem + "_pr.svg", "pr"))
    return paths
