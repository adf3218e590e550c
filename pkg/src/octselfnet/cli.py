"""Command-line entry point: synth-data, pretrain, finetune, cross-eval, report.

Exit codes: 0 success, 2 configuration or contract error, 3 IO error,
4 numerical failure.
"""

import argparse
import csv
import glob
import io
import json
import os
import sys

from . import __version__
from .backbones import PRESET_NAMES, build_classifier, build_mae, estimate_flops, input_shape_for, is_resnet
from .checkpoint import load_checkpoint
from .config import RunConfig, default_run_root
from .data.manifest import load_manifest
from .data.synthetic import generate_preset
from .errors import ConfigError, IntegrityError, OctsnError
from .evaluate import MODES, cross_evaluate, load_report, write_matrix_artifacts
from .finetune import finetune, transfer_encoder_weights
from .mae import pretrain
from .module import count_parameters
from .report import emit_curves, report_csv


class RunLog:
    def __init__(self, run_dir, quiet=False):
        self.path = os.path.join(run_dir, "log.txt")
        self.quiet = quiet

    def __call__(self, msg):
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(msg + "\n")
        if not self.quiet:
            print(msg, flush=True)


def _write_text(path, text):
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise IntegrityError(f"cannot write {path}: {exc}") from exc


def _history_csv(history, keys):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for row in zip(*(history[k] for k in keys)):
        w.writerow([repr(v) for v in row])
    return buf.getvalue()


def _prepare(args, command):
    """Resolve config (defaults < file < flags), create the run dir, snapshot the config."""
    cfg = RunConfig.default()
    if args.config:
        cfg.update_from_file(args.config)
    for section, key, value in args.overrides:
        if section == "run":
            cfg.set(section, key, value)
    # fine-tuning flags address whichever recipe this run uses
    phase = "baseline" if cfg.get("run", "mode") == "baseline" and command == "cross-eval" else "finetune"
    if command == "finetune" and is_resnet(cfg.get("run", "backbone")):
        phase = "baseline"
    for section, key, value in args.overrides:
        if section != "run":
            cfg.set(phase if section == "finetune" else section, key, value)
    run_dir = args.run_dir or os.path.join(default_run_root(), command)
    try:
        os.makedirs(run_dir, exist_ok=True)
    except OSError as exc:
        raise IntegrityError(f"cannot create run directory {run_dir}: {exc}") from exc
    _write_text(os.path.join(run_dir, f"config_{command}.ini"), cfg.to_text())
    return cfg, run_dir


def _manifests(cfg, names=None):
    root = cfg.get("run", "data")
    out = []
    for name in names or cfg.domains():
        path = os.path.join(root, name, "manifest.csv")
        if not os.path.exists(path):
            raise IntegrityError(f"no manifest for domain {name!r} at {path}")
        out.append(load_manifest(path, name))
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args):
    cfg, run_dir = _prepare(args, "synth-data")
    out = args.out or cfg.get("run", "data")
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise IntegrityError(f"cannot create output directory {out}: {exc}") from exc
    manifests = generate_preset(cfg.get("run", "synth_preset"), out, seed_offset=cfg.get("run", "seed"))
    log = RunLog(run_dir, args.quiet)
    for m in manifests:
        log(f"{m.domain_name}: {len(m.rows)} images -> {m.root}")
    return 0


def cmd_pretrain(args):
    cfg, run_dir = _prepare(args, "pretrain")
    pcfg = cfg.pretrain_config()
    manifests = _manifests(cfg)
    preset = cfg.get("run", "backbone")
    model = build_mae(preset, cfg.get("run", "seed"), in_chans=3)
    resume = None
    last = os.path.join(run_dir, "pretrain_last.ckpt")
    if args.resume:
        if not os.path.exists(last):
            raise ConfigError(f"--resume given but {last} does not exist")
        resume = load_checkpoint(last)
    log = RunLog(run_dir, args.quiet)
    res = pretrain(model, manifests, pcfg, run_dir=run_dir, resume=resume, log=log,
                   run_config={"preset": preset, "seed": cfg.get("run", "seed")})
    _write_text(os.path.join(run_dir, "pretrain_loss.csv"),
                _history_csv(res.history, ("epoch", "train_loss", "val_loss")))
    emit_curves(res.history, os.path.join(run_dir, "pretrain_loss.svg"), title=f"{preset} masked MSE")
    log(f"best epoch {res.checkpoint.epoch} val {res.checkpoint.val_loss:.6f}")
    return 0


def cmd_finetune(args):
    cfg, run_dir = _prepare(args, "finetune")
    preset = cfg.get("run", "backbone")
    domain = args.domain or cfg.domains()[0]
    (manifest,) = _manifests(cfg, [domain])
    seed = cfg.get("run", "seed")
    baseline = is_resnet(preset)
    if baseline and not args.from_scratch:
        raise ConfigError("ResNet presets have no pretrained encoder; add --from-scratch")
    fcfg = cfg.finetune_config("baseline" if baseline else "finetune")
    model = build_classifier(preset, seed, in_chans=3)
    log = RunLog(run_dir, args.quiet)
    if not args.from_scratch:
        path = args.checkpoint or os.path.join(default_run_root(), "pretrain", "pretrain_best.ckpt")
        if not os.path.exists(path):
            raise ConfigError(f"pretrained checkpoint {path} not found (pass --checkpoint or --from-scratch)")
        rep = transfer_encoder_weights(model, load_checkpoint(path))
        log(f"transferred {rep.census} encoder parameters from {path}")
    res = finetune(model, manifest, fcfg, run_dir=run_dir, log=log, name=f"finetune_{domain}",
                   run_config={"preset": preset, "seed": seed})
    keys = ("epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy")
    _write_text(os.path.join(run_dir, f"finetune_{domain}_history.csv"), _history_csv(res.history, keys))
    emit_curves(res.history, os.path.join(run_dir, f"finetune_{domain}_loss.svg"), title=f"{preset} on {domain}")
    log(f"best epoch {res.stop.best_epoch} ({fcfg.selection} {res.stop.best_metric:.6f})")
    return 0


def cmd_cross_eval(args):
    cfg, run_dir = _prepare(args, "cross-eval")
    mode = cfg.get("run", "mode")
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
    manifests = _manifests(cfg)
    pretrained = None
    if mode != "baseline":
        path = args.checkpoint or os.path.join(default_run_root(), "pretrain", "pretrain_best.ckpt")
        if not os.path.exists(path):
            raise ConfigError(f"mode {mode!r} needs a pretrained checkpoint; {path} not found")
        pretrained = load_checkpoint(path)
    base = cfg.finetune_config("baseline" if mode == "baseline" else "finetune")
    log = RunLog(run_dir, args.quiet)
    matrix = cross_evaluate(manifests, mode, cfg.get("run", "backbone"), pretrained, base,
                            seed=cfg.get("run", "seed"), run_dir=run_dir, log=log,
                            baseline_preset=cfg.get("run", "baseline_backbone"))
    for path in write_matrix_artifacts(matrix, run_dir):
        log(f"wrote {path}")
    return 0


def network_details(presets):
    """CSV rows: preset, parameters, MACs at the preset's input size."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["preset", "input", "parameters", "macs"])
    for p in presets:
        model = build_classifier(p, 0, in_chans=3)
        shape = input_shape_for(model)
        w.writerow([p, "x".join(str(s) for s in shape[1:]), count_parameters(model),
                    estimate_flops(model, shape, unit="mac")])
    return buf.getvalue()


def cmd_report(args):
    run_dir = args.run_dir or default_run_root()
    paths = sorted(glob.glob(os.path.join(run_dir, "**", "report_*.json"), recursive=True))
    if not paths:
        raise ConfigError(f"{run_dir} holds no report_*.json; run cross-eval first")
    matrices = []
    for p in paths:
        try:
            matrices.extend(load_report(p))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed report {p}: {exc}") from exc
    _write_text(os.path.join(run_dir, "comparison.csv"), report_csv(matrices))
    presets = sorted({m.meta.get("preset") for m in matrices if m.meta.get("preset") in PRESET_NAMES})
    table = network_details(presets)
    _write_text(os.path.join(run_dir, "network_details.csv"), table)
    svgs = sorted(os.path.relpath(p, run_dir) for p in glob.glob(os.path.join(run_dir, "**", "*.svg"),
                                                                  recursive=True))
    items = "\n".join(f'<figure><img src="{s}" width="300"/><figcaption>{s}</figcaption></figure>' for s in svgs)
    _write_text(os.path.join(run_dir, "index.html"),
                f"<!DOCTYPE html>\n<html><body>\n<h1>Curves</h1>\n{items}\n</body></html>\n")
    if not args.quiet:
        print(report_csv(matrices), end="")
        print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

_PHASE_FLAGS = {
    "pretrain": [("lr", float), ("weight_decay", float), ("beta1", float), ("beta2", float),
                 ("batch_size", int), ("epochs", int), ("mask_ratio", float), ("max_steps", int),
                 ("loss_scope", str)],
    "finetune": [("lr", float), ("weight_decay", float), ("beta1", float), ("beta2", float),
                 ("batch_size", int), ("max_epochs", int), ("patience", int), ("train_fraction", float),
                 ("selection", str)],
}


class _Override(argparse.Action):
    def __init__(self, option_strings, dest, section=None, key=None, const_value=None, **kw):
        self.section, self.key, self.const_value = section, key, const_value
        if const_value is not None:
            kw["nargs"] = 0
        super().__init__(option_strings, dest, **kw)

    def __call__(self, parser, ns, values, option_string=None):
        if getattr(ns, "overrides", None) is None:
            ns.overrides = []
        ns.overrides.append((self.section, self.key, self.const_value if self.const_value is not None else values))


def _add_common(p, run_keys=("data", "domains", "backbone")):
    p.add_argument("--config", help="key=value config file with [section] headers")
    p.add_argument("--run-dir", help="output directory (default: $OCTSN_RUN_DIR/<command>)")
    p.add_argument("--seed", action=_Override, section="run", key="seed", type=int, dest="_seed",
                   metavar="N")
    p.add_argument("--quiet", action="store_true")
    for k in run_keys:
        p.add_argument("--" + k.replace("_", "-"), action=_Override, section="run", key=k, dest="_" + k,
                       metavar=k.upper())


def _add_phase(p, phase):
    for key, typ in _PHASE_FLAGS[phase]:
        p.add_argument("--" + key.replace("_", "-"), action=_Override, section=phase, key=key, type=typ,
                       dest=f"_{key}", metavar=key.upper())


def build_parser():
    parser = argparse.ArgumentParser(prog="octsn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write the synthetic domains")
    _add_common(p, run_keys=())
    p.add_argument("--preset", action=_Override, section="run", key="synth_preset", dest="_preset",
                   metavar="GROUP")
    p.add_argument("--out", help="output root (default: [run] data)")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("pretrain", help="masked-autoencoder pretraining on pooled domains")
    _add_common(p)
    _add_phase(p, "pretrain")
    p.add_argument("--resume", action="store_true", help="continue from pretrain_last.ckpt in the run dir")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning on one domain")
    _add_common(p)
    _add_phase(p, "finetune")
    p.add_argument("--domain", help="train domain (default: first of --domains)")
    p.add_argument("--checkpoint", help="pretraining checkpoint")
    p.add_argument("--from-scratch", action="store_true", help="skip weight transfer (baseline path)")
    p.add_argument("--no-augment", action=_Override, section="finetune", key="augment", const_value="false",
                   dest="_no_augment")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("cross-eval", help="fine-tune per domain and test on every domain")
    _add_common(p, run_keys=("data", "domains", "backbone", "mode", "baseline_backbone"))
    _add_phase(p, "finetune")
    p.add_argument("--checkpoint", help="pretraining checkpoint")
    p.add_argument("--no-augment", action=_Override, section="finetune", key="augment", const_value="false",
                   dest="_no_augment")
    p.set_defaults(func=cmd_cross_eval)

    p = sub.add_parser("report", help="merge cross-eval reports in a run directory")
    p.add_argument("--run-dir", help="run directory to summarise (default: $OCTSN_RUN_DIR)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "overrides", None) is None:
        args.overrides = []
    try:
        return args.func(args)
    except OctsnError as exc:
        print(f"octsn {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"octsn {args.command}: IO error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
