"""Supervised fine-tuning: weight transfer, early stopping and prediction."""

import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .data.loader import binary_set
from .data.manifest import subsample_fraction
from .data.transforms import AugmentationPipeline
from .errors import ConfigError, NumericalError, TransferError
from .module import count_parameters
from .optim import AdamW

SELECTIONS = ("val_accuracy", "val_loss")


@dataclass
class TransferReport:
    census: int
    copied: list
    skipped: list


def transfer_encoder_weights(classifier, ckpt):
    """Copy every encoder array of ``ckpt`` into ``classifier.encoder`` by name.

    Checkpoint-only encoder entries (the pretraining mask token) are skipped
    and listed; ``census`` counts the copied parameter elements.
    """
    kind = ckpt.config.get("kind")
    if kind != classifier.cfg.kind:
        raise TransferError(f"checkpoint holds a {kind!r} encoder, classifier is {classifier.cfg.kind!r}")
    source = ckpt.encoder_params()
    target = classifier.encoder.state_dict()
    missing = [n for n in target if n not in source]
    if missing:
        raise TransferError(f"checkpoint lacks encoder arrays: {', '.join(missing)}")
    bad = [n for n in target if source[n].shape != target[n].shape]
    if bad:
        raise TransferError("shape mismatch for encoder arrays: "
                            + ", ".join(f"{n} {source[n].shape} vs {target[n].shape}" for n in bad))
    classifier.encoder.load_state_dict({n: source[n] for n in target})
    params = dict(classifier.encoder.named_parameters())
    census = int(sum(params[n].size for n in target if n in params))
    return TransferReport(census, list(target), sorted(set(source) - set(target)))


def predict_proba(logits):
    """Softmax over the two logits; column 1 is the AMD probability."""
    return T.softmax(T.as_tensor(logits), axis=-1).data


@dataclass
class EarlyStopState:
    best_metric: Optional[float] = None
    best_epoch: int = 0
    epochs_since_improve: int = 0

    def update(self, metric, epoch, higher_is_better=True):
        """Record one epoch; returns True when it is a strict improvement.

        Ties keep the earlier epoch.
        """
        better = self.best_metric is None or (metric > self.best_metric if higher_is_better
                                              else metric < self.best_metric)
        if better:
            self.best_metric = metric
            self.best_epoch = epoch
            self.epochs_since_improve = 0
        else:
            self.epochs_since_improve += 1
        return better

    def should_stop(self, patience):
        return self.epochs_since_improve >= patience


@dataclass
class FinetuneConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.99
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    selection: str = "val_accuracy"
    augment: bool = True
    pipeline: str = "finetune"
    train_fraction: float = 1.0
    class_weighting: bool = False
    freeze_encoder: bool = False
    scheme: str = "imagenet"
    seed: int = 0

    def __post_init__(self):
        if self.selection not in SELECTIONS:
            raise ConfigError(f"selection must be one of {SELECTIONS}, got {self.selection!r}")
        if not 0 < self.patience < self.max_epochs:
            raise ConfigError(f"patience {self.patience} must lie in (0, max_epochs={self.max_epochs})")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError(f"train_fraction must lie in (0, 1], got {self.train_fraction}")
        if not self.lr > 0 or self.batch_size < 1:
            raise ConfigError("lr and batch_size must be positive")
        if self.pipeline not in ("finetune", "baseline"):
            raise ConfigError(f"pipeline must be 'finetune' or 'baseline', got {self.pipeline!r}")


def baseline_config(**overrides):
    """ResNet baseline hyperparameters: batch 24, betas 0.9/0.999, val-loss selection."""
    base = dict(batch_size=24, beta2=0.999, selection="val_loss", pipeline="baseline")
    base.update(overrides)
    return FinetuneConfig(**base)


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    history: dict
    stop: EarlyStopState
    train_counts: dict = field(default_factory=dict)


def predict(model, dataset, batch_size=64):
    """AMD probabilities for every image of ``dataset`` (eval mode, no augmentation)."""
    model.eval()
    out = []
    with T.no_grad():
        for s in range(0, len(dataset), batch_size):
            idx = np.arange(s, min(s + batch_size, len(dataset)))
            out.append(predict_proba(model(T.Tensor(dataset.batch(idx, pipeline=_eval_pipe(dataset)))))[:, 1])
    return np.concatenate(out)


def _eval_pipe(dataset):
    p = dataset.pipeline
    return p if p.kind == "none" else AugmentationPipeline("none", p.size, p.scheme)


def _evaluate(model, dataset, batch_size):
    """(accuracy at 0.5, mean cross-entropy) over ``dataset``."""
    model.eval()
    y = dataset.targets
    correct, loss_sum = 0, 0.0
    with T.no_grad():
        for s in range(0, len(dataset), batch_size):
            idx = np.arange(s, min(s + batch_size, len(dataset)))
            logits = model(T.Tensor(dataset.batch(idx, pipeline=_eval_pipe(dataset))))
            loss_sum += T.cross_entropy(logits, y[idx]).item() * len(idx)
            correct += int(((predict_proba(logits)[:, 1] >= 0.5).astype(int) == y[idx]).sum())
    model.train()
    return correct / len(dataset), loss_sum / len(dataset)


def class_weights(targets):
    counts = np.bincount(targets, minlength=2).astype(np.float64)
    return len(targets) / (2 * counts)


def finetune(model, manifest, cfg, run_dir=None, run_config=None, log=None, name="finetune"):
    """Train ``model`` on the normal/amd rows of ``manifest``.

    The weights of the best epoch under ``cfg.selection`` are restored into
    ``model`` and returned as a checkpoint.
    """
    image_size = model.cfg.image_size
    data = subsample_fraction(manifest.binary(), "train", cfg.train_fraction, cfg.seed)
    kind = cfg.pipeline if cfg.augment else "none"
    pipe = AugmentationPipeline(kind, image_size, cfg.scheme)
    train = binary_set(data, "train", pipe, seed=cfg.seed)
    val = binary_set(data, "val", AugmentationPipeline("none", image_size, cfg.scheme), seed=cfg.seed)
    y = train.targets
    weights = class_weights(y) if cfg.class_weighting else None
    if cfg.freeze_encoder and hasattr(model, "encoder"):
        for p in model.encoder.parameters():
            p.requires_grad = False

    run_config = dict(run_config or {})
    run_config.setdefault("preset", model.cfg.preset_name)
    run_config.setdefault("kind", model.cfg.kind)
    run_config["finetune"] = asdict(cfg)
    run_config["domain"] = manifest.domain_name
    run_config["pipeline"] = pipe.describe()

    opt = AdamW(model, cfg.lr, (cfg.beta1, cfg.beta2), cfg.weight_decay)
    higher = cfg.selection == "val_accuracy"
    stop = EarlyStopState()
    history = {"epoch": [], "train_loss": [], "train_accuracy": [], "val_loss": [], "val_accuracy": []}
    best_state = None
    model.train()
    for epoch in range(1, cfg.max_epochs + 1):
        total, correct = 0.0, 0
        for idx, images in train.batches(cfg.batch_size, epoch):
            logits = model(T.Tensor(images))
            loss = T.cross_entropy(logits, y[idx], weights)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"fine-tuning loss became {value} at epoch {epoch}")
            T.backward(loss)
            opt.step()
            opt.zero_grad()
            total += value * len(idx)
            correct += int((np.argmax(logits.data, axis=1) == y[idx]).sum())
        val_acc, val_loss = _evaluate(model, val, cfg.batch_size)
        history["epoch"].append(epoch)
        history["train_loss"].append(total / len(train))
        history["train_accuracy"].append(correct / len(train))
        history["val_loss"].append(val_loss)
        history["val_accuracy"].append(val_acc)
        metric = val_acc if higher else val_loss
        if stop.update(metric, epoch, higher):
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        if log:
            log(f"{name} epoch {epoch}: train {total / len(train):.5f} val_acc {val_acc:.4f} val_loss {val_loss:.5f}")
        if stop.should_stop(cfg.patience):
            break
    model.load_state_dict(best_state)
    model.eval()
    meta = {"history": history, "best_epoch": stop.best_epoch, "best_metric": stop.best_metric,
            "selection": cfg.selection, "train_counts": data.counts("train")}
    ckpt = Checkpoint("finetune", run_config, best_state, None, stop.best_epoch,
                      history["val_loss"][stop.best_epoch - 1], meta)
    if run_dir:
        save_checkpoint(os.path.join(run_dir, f"{name}.ckpt"), ckpt)
    return FinetuneResult(ckpt, history, stop, data.counts("train"))
