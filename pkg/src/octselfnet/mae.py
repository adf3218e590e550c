"""Masked-autoencoder pretraining: masking, patch targets, loss and the training loop."""

import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from ._util import floor_count
from .checkpoint import Checkpoint, check_name_scheme, load_checkpoint, save_checkpoint
from .data.loader import ImageSet
from .data.transforms import AugmentationPipeline
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .optim import AdamW


@dataclass(frozen=True)
class MaskSpec:
    n_patches: int
    masked: tuple
    ratio: float

    def as_bool(self):
        out = np.zeros(self.n_patches, dtype=bool)
        out[list(self.masked)] = True
        return out


def mask_count(n_patches, ratio):
    return floor_count(ratio, n_patches)


def sample_mask(n_patches, ratio, rng):
    """Uniformly choose floor(ratio * n) distinct patches to hide."""
    if not 0 < ratio < 1:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    k = mask_count(n_patches, ratio)
    if k == 0:
        raise ConfigError(f"ratio {ratio} masks no patch out of {n_patches}; nothing to reconstruct")
    idx = rng.choice(n_patches, size=k, replace=False)
    return MaskSpec(n_patches, tuple(int(i) for i in np.sort(idx)), ratio)


def batch_masks(n_images, n_patches, ratio, rng):
    return np.stack([sample_mask(n_patches, ratio, rng).as_bool() for _ in range(n_images)])


def patchify(image, patch):
    """(C, H, W) -> (n, P*P*C), or (B, C, H, W) -> (B, n, P*P*C).

    Patches are row-major over the grid; inside a patch the layout is
    (row, col, channel).
    """
    x = np.asarray(image)
    single = x.ndim == 3
    if single:
        x = x[None]
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not divisible into {patch}x{patch} patches")
    gh, gw = h // patch, w // patch
    out = x.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 3, 5, 1).reshape(b, gh * gw, patch * patch * c)
    return out[0] if single else out


def unpatchify(patches, patch, channels, height, width):
    p = np.asarray(patches)
    single = p.ndim == 2
    if single:
        p = p[None]
    gh, gw = height // patch, width // patch
    if gh * patch != height or gw * patch != width or p.shape[1] != gh * gw:
        raise ShapeError(f"{p.shape[1]} patches of size {patch} do not tile {height}x{width}")
    if p.shape[2] != patch * patch * channels:
        raise ShapeError(f"patch vectors have length {p.shape[2]}, expected {patch * patch * channels}")
    b = p.shape[0]
    out = p.reshape(b, gh, gw, patch, patch, channels).transpose(0, 5, 1, 3, 2, 4).reshape(b, channels, height, width)
    return out[0] if single else out


def masked_mse_loss(pred, target, mask, scope="masked"):
    """Mean squared error averaged over patch elements, then over masked patches.

    ``mask`` is a MaskSpec or a boolean array shaped like ``pred`` without its
    last axis. ``scope="all"`` averages over every patch instead.
    """
    pred = T.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    m = mask.as_bool() if isinstance(mask, MaskSpec) else np.asarray(mask, dtype=bool)
    if m.shape != pred.shape[:-1]:
        raise ShapeError(f"mask {m.shape} does not match patches {pred.shape[:-1]}")
    per_patch = T.mean((pred - target) ** 2, axis=-1)
    if scope == "all":
        return T.mean(per_patch)
    if scope != "masked":
        raise ConfigError(f"loss scope must be 'masked' or 'all', got {scope!r}")
    n = int(m.sum())
    if n == 0:
        raise ConfigError("mask selects no patches")
    return T.sum_(per_patch * m.astype(np.float64)) / n


@dataclass
class PretrainConfig:
    lr: float = 1.5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    batch_size: int = 32
    epochs: int = 50
    mask_ratio: float = 0.7
    seed: int = 0
    loss_scope: str = "masked"
    scheme: str = "imagenet"
    max_steps: Optional[int] = None
    norm_pix: bool = False

    def __post_init__(self):
        if not 0 < self.mask_ratio < 1:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        for key in ("lr", "batch_size", "epochs"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.loss_scope not in ("masked", "all"):
            raise ConfigError(f"loss_scope must be 'masked' or 'all', got {self.loss_scope!r}")


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    history: dict = field(default_factory=dict)
    last: Optional[Checkpoint] = None


def patch_targets(images, patch, norm_pix=False):
    """Reconstruction targets; ``norm_pix`` standardises each patch on its own."""
    target = patchify(images, patch)
    if norm_pix:
        mu = target.mean(axis=-1, keepdims=True)
        var = target.var(axis=-1, keepdims=True)
        target = (target - mu) / np.sqrt(var + 1e-6)
    return target


def mae_loss(model, images, masks, scope="masked", norm_pix=False):
    pred = model(T.Tensor(images), masks)
    return masked_mse_loss(pred, patch_targets(images, model.cfg.mask_patch_size, norm_pix), masks, scope)


def validation_masks(n_images, n_patches, ratio, seed):
    """Masks for the validation images, one per image index, identical every epoch."""
    return np.stack([sample_mask(n_patches, ratio, np.random.default_rng([seed, 424242, i])).as_bool()
                     for i in range(n_images)])


def evaluate_mae(model, dataset, masks, batch_size, scope="masked", norm_pix=False):
    """Masked MSE over a whole split (per-patch average across all images)."""
    model.eval()
    total, count = 0.0, 0
    with T.no_grad():
        for s in range(0, len(dataset), batch_size):
            idx = np.arange(s, min(s + batch_size, len(dataset)))
            m = masks[idx]
            loss = mae_loss(model, dataset.batch(idx), m, scope, norm_pix)
            n = int(m.sum()) if scope == "masked" else m.size
            total += loss.item() * n
            count += n
    model.train()
    return total / count


def _snapshot(model, cfg, run_config, epoch, val_loss, history, opt=None, best=None):
    meta = {"history": history}
    if best is not None:
        meta["best"] = best
    return Checkpoint("pretrain", run_config, {k: v.copy() for k, v in model.state_dict().items()},
                      {k: v.copy() for k, v in opt.state_arrays().items()} if opt else None,
                      epoch, val_loss, meta)


def pretrain(model, datasets, cfg, run_dir=None, run_config=None, resume=None, log=None):
    """Train ``model`` (a MaskedAutoencoder) on the pooled train splits of ``datasets``.

    Labels are ignored, so every class contributes. The returned checkpoint
    holds the weights of the epoch with the lowest validation loss; when
    ``run_dir`` is given, ``pretrain_best.ckpt`` and a resumable
    ``pretrain_last.ckpt`` (with optimizer state) are written each epoch.
    """
    if not datasets:
        raise DataError("pretraining needs at least one dataset")
    ecfg = model.cfg
    pipe = AugmentationPipeline("none", ecfg.image_size, cfg.scheme)
    if pipe.channels != ecfg.in_chans:
        raise ConfigError(f"{cfg.scheme} normalisation yields {pipe.channels} channels, model expects {ecfg.in_chans}")
    train = ImageSet(datasets, "train", pipe, seed=cfg.seed)
    val = ImageSet(datasets, "val", pipe, seed=cfg.seed)
    n_patches = ecfg.n_mask_patches
    val_masks = validation_masks(len(val), n_patches, cfg.mask_ratio, cfg.seed)
    run_config = dict(run_config or {})
    run_config.setdefault("preset", ecfg.preset_name)
    run_config.setdefault("kind", ecfg.kind)
    run_config.setdefault("in_chans", ecfg.in_chans)
    run_config["pretrain"] = asdict(cfg)
    run_config["domains"] = [d.domain_name for d in datasets]

    opt = AdamW(model, cfg.lr, (cfg.beta1, cfg.beta2), cfg.weight_decay)
    history = {"epoch": [], "train_loss": [], "val_loss": [], "step_loss": []}
    best = {"val_loss": math.inf, "epoch": 0}
    best_ckpt = last = None
    start = 0
    if resume is not None:
        load_model(model, resume)
        opt.load_state_arrays(resume.optimizer, resume.meta["opt_step"])
        history = resume.meta["history"]
        best = resume.meta["best"]
        start = resume.epoch
        best_path = os.path.join(run_dir or "", "pretrain_best.ckpt")
        if run_dir and os.path.exists(best_path):
            best_ckpt = load_checkpoint(best_path)
    steps = len(history["step_loss"])
    model.train()
    for epoch in range(start + 1, cfg.epochs + 1):
        total, count = 0.0, 0
        for b, (idx, images) in enumerate(train.batches(cfg.batch_size, epoch)):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            masks = batch_masks(len(idx), n_patches, cfg.mask_ratio, np.random.default_rng([cfg.seed, epoch, b, 1]))
            loss = mae_loss(model, images, masks, cfg.loss_scope, cfg.norm_pix)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"pretraining loss became {value} at epoch {epoch}, batch {b}")
            T.backward(loss)
            opt.step()
            opt.zero_grad()
            history["step_loss"].append(value)
            total += value * len(idx)
            count += len(idx)
            steps += 1
        if count == 0:
            break
        val_loss = evaluate_mae(model, val, val_masks, cfg.batch_size, cfg.loss_scope, cfg.norm_pix)
        if not math.isfinite(val_loss):
            raise NumericalError(f"validation loss became {val_loss} at epoch {epoch}")
        history["epoch"].append(epoch)
        history["train_loss"].append(total / count)
        history["val_loss"].append(val_loss)
        if val_loss < best["val_loss"]:
            best = {"val_loss": val_loss, "epoch": epoch}
            best_ckpt = _snapshot(model, cfg, run_config, epoch, val_loss, history)
            if run_dir:
                save_checkpoint(os.path.join(run_dir, "pretrain_best.ckpt"), best_ckpt)
        last = _snapshot(model, cfg, run_config, epoch, val_loss, history, opt, best)
        last.meta["opt_step"] = opt.state.step
        if run_dir:
            save_checkpoint(os.path.join(run_dir, "pretrain_last.ckpt"), last)
        if log:
            log(f"epoch {epoch}: train {total / count:.6f} val {val_loss:.6f}")
    if best_ckpt is None:
        raise DataError("no pretraining epoch completed")
    best_ckpt.meta["history"] = history
    return PretrainResult(best_ckpt, history, last)


def load_model(model, ckpt):
    """Restore every array of ``model`` from ``ckpt`` after a name-scheme check."""
    check_name_scheme(model, ckpt.params)
    model.load_state_dict(ckpt.params)
    return model
