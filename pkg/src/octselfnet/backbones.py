"""MAE encoder/decoder pairs (ViT, Swin, SwinV2), classifier and ResNet baselines.

ViT encoders drop masked tokens and see only the visible ones; Swin kinds
replace masked patch embeddings with a learnable mask token and process the
full grid, because shifted-window attention needs every grid cell.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from ._util import floor_count
from .errors import ConfigError, ShapeError, UsageError
from .layers import (
    BatchNorm2d,
    Bottleneck,
    Conv2d,
    LayerNorm,
    Linear,
    PatchEmbed,
    PatchExpand,
    PatchGrid,
    PatchMerge,
    SwinBlock,
    TransformerBlock,
)
from .module import Module, ModuleList, Parameter, count_parameters, trunc_normal

KINDS = ("vit", "swin", "swinv2", "resnet")


@dataclass(frozen=True)
class BackboneConfig:
    kind: str
    image_size: int
    patch_size: int
    embed_dim: int
    depths: tuple
    heads: tuple
    window: int = 7
    in_chans: int = 1
    mask_patch: Optional[int] = None
    mlp_ratio: int = 4
    cpb_hidden: int = 512
    preset_name: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if self.kind == "resnet":
            return
        if self.kind == "vit" and (len(self.depths) != 1 or len(self.heads) != 1):
            raise ConfigError("vit backbones have a single stage")
        if len(self.depths) != len(self.heads):
            raise ConfigError(f"depths {self.depths} and heads {self.heads} differ in length")
        if self.embed_dim % self.heads[0]:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by {self.heads[0]} heads")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image {self.image_size} is not divisible by patch {self.patch_size}")
        if self.image_size % self.mask_patch_size or self.mask_patch_size % self.patch_size:
            raise ConfigError("mask patch must divide the image and be a multiple of the patch size")
        if self.kind == "vit" and self.mask_patch_size != self.patch_size:
            raise ConfigError("vit masks whole tokens: mask_patch must equal patch_size")
        grid = self.image_size // self.patch_size
        if self.kind != "vit" and grid % (2 ** (len(self.depths) - 1)):
            raise ConfigError(f"token grid {grid} cannot be merged {len(self.depths) - 1} times")

    @property
    def mask_patch_size(self):
        return self.mask_patch or self.patch_size

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def n_mask_patches(self):
        return (self.image_size // self.mask_patch_size) ** 2

    @property
    def out_dim(self):
        if self.kind == "vit":
            return self.embed_dim
        return self.embed_dim * 2 ** (len(self.depths) - 1)


@dataclass(frozen=True)
class DecoderConfig:
    kind: str
    embed_dim: int
    depths: tuple
    heads: tuple

    def __post_init__(self):
        if self.kind not in ("vit", "swin"):
            raise ConfigError(f"unknown decoder kind {self.kind!r}")
        if len(self.depths) != len(self.heads):
            raise ConfigError("decoder depths and heads differ in length")


@dataclass(frozen=True)
class ResNetConfig:
    stem: int
    widths: tuple
    blocks: tuple
    in_chans: int = 3
    image_size: int = 224
    num_classes: int = 2
    preset_name: Optional[str] = None
    kind: str = field(default="resnet", init=False)


@dataclass
class EncoderOutput:
    tokens: T.Tensor
    grid: PatchGrid
    stage_dims: list
    ids_keep: Optional[np.ndarray] = None


PRESETS = {
    "vit-paper": (BackboneConfig("vit", 224, 16, 1024, (6,), (4,), preset_name="vit-paper"),
                  DecoderConfig("vit", 1024, (4,), (4,))),
    "swin-paper": (BackboneConfig("swin", 224, 4, 96, (2, 2, 18, 2), (6, 12, 24, 48), window=7, mask_patch=16,
                                  preset_name="swin-paper"),
                   DecoderConfig("swin", 768, (2, 18, 2, 2), (48, 24, 12, 6))),
    "swinv2-paper": (BackboneConfig("swinv2", 224, 4, 96, (2, 2, 6, 2), (3, 6, 12, 24), window=7, mask_patch=16,
                                    preset_name="swinv2-paper"),
                     DecoderConfig("swin", 768, (2, 6, 2, 2), (24, 12, 6, 3))),
    "vit-desk": (BackboneConfig("vit", 32, 4, 64, (2,), (4,), preset_name="vit-desk"),
                 DecoderConfig("vit", 64, (1,), (4,))),
    "swin-desk": (BackboneConfig("swin", 32, 4, 16, (2, 2, 2, 2), (1, 2, 4, 8), window=4, cpb_hidden=64,
                                 preset_name="swin-desk"),
                  DecoderConfig("swin", 64, (2, 2, 2, 2), (8, 4, 2, 1))),
    "swinv2-desk": (BackboneConfig("swinv2", 32, 4, 16, (1, 1, 2, 1), (1, 2, 4, 8), window=4, cpb_hidden=64,
                                   preset_name="swinv2-desk"),
                    DecoderConfig("swin", 64, (1, 2, 1, 1), (8, 4, 2, 1))),
}

RESNET_PRESETS = {
    "resnet50": ResNetConfig(64, (64, 128, 256, 512), (3, 4, 6, 3), preset_name="resnet50"),
    "resnet-desk": ResNetConfig(8, (8, 16, 32, 64), (1, 1, 1, 1), image_size=32, preset_name="resnet-desk"),
}

PRESET_NAMES = tuple(PRESETS) + tuple(RESNET_PRESETS)


def get_preset(name, in_chans=None):
    """(BackboneConfig, DecoderConfig) or a ResNetConfig for ``name``."""
    if name in PRESETS:
        enc, dec = PRESETS[name]
        if in_chans is not None:
            enc = replace(enc, in_chans=in_chans)
        return enc, dec
    if name in RESNET_PRESETS:
        cfg = RESNET_PRESETS[name]
        return replace(cfg, in_chans=in_chans) if in_chans is not None else cfg
    raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")


def is_resnet(name):
    return name in RESNET_PRESETS


# ---------------------------------------------------------------------------
# encoders


def token_mask_from_patches(mask, cfg):
    """(B, n_mask_patches) bool -> (B, grid*grid) bool at token resolution."""
    mask = np.asarray(mask, dtype=bool)
    side = cfg.image_size // cfg.mask_patch_size
    r = cfg.mask_patch_size // cfg.patch_size
    m = mask.reshape(-1, side, side).repeat(r, axis=1).repeat(r, axis=2)
    return m.reshape(mask.shape[0], -1)


class ViTEncoder(Module):
    def __init__(self, cfg, rng):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = PatchEmbed(cfg.in_chans, cfg.patch_size, d, rng, norm=False)
        self.pos_embed = Parameter(trunc_normal(rng, (1, cfg.grid ** 2, d)))
        self.blocks = ModuleList([TransformerBlock(d, cfg.heads[0], rng, cfg.mlp_ratio)
                                  for _ in range(cfg.depths[0])], prefix="block")
        self.norm = LayerNorm(d)

    def forward(self, images, mask=None):
        x = self.patch_embed(images) + self.pos_embed
        ids_keep = None
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            n_vis = (~mask).sum(axis=1)
            if mask.shape[1] != x.shape[1] or np.any(n_vis != n_vis[0]):
                raise ShapeError("mask must cover every token and mask the same count per image")
            ids_keep = np.stack([np.flatnonzero(~m) for m in mask])
            x = T.gather(x, ids_keep[:, :, None], axis=1)
        for blk in self.blocks:
            x = blk(x)
        g = self.cfg.grid
        return EncoderOutput(self.norm(x), PatchGrid(g, g, self.cfg.embed_dim), [self.cfg.embed_dim], ids_keep)


class SwinStage(Module):
    def __init__(self, dim, depth, heads, grid, window, rng, version, mlp_ratio, cpb_hidden, merge):
        super().__init__()
        self.blocks = ModuleList([
            SwinBlock(dim, heads, grid, window, 0 if i % 2 == 0 else window // 2, rng, version,
                      mlp_ratio, cpb_hidden)
            for i in range(depth)], prefix="block")
        self.merge = PatchMerge(dim, rng, version) if merge else None

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return x


class SwinEncoder(Module):
    """Hierarchical encoder; ``mask_token=False`` drops the pretraining-only token.

    The token's random draw happens either way so the remaining weights are
    initialised identically.
    """

    def __init__(self, cfg, rng, mask_token=True):
        super().__init__()
        self.cfg = cfg
        version = 2 if cfg.kind == "swinv2" else 1
        self.patch_embed = PatchEmbed(cfg.in_chans, cfg.patch_size, cfg.embed_dim, rng, norm=True)
        token = trunc_normal(rng, (1, 1, cfg.embed_dim))
        if mask_token:
            self.mask_token = Parameter(token)
        n = len(cfg.depths)
        stages = []
        for i in range(n):
            g = cfg.grid // 2 ** i
            stages.append(SwinStage(cfg.embed_dim * 2 ** i, cfg.depths[i], cfg.heads[i], (g, g), cfg.window, rng,
                                    version, cfg.mlp_ratio, cfg.cpb_hidden, merge=i < n - 1))
        self.stages = ModuleList(stages, prefix="stage")
        self.norm = LayerNorm(cfg.out_dim)

    def embed(self, images, mask=None):
        x = self.patch_embed(images)
        if mask is not None:
            if not hasattr(self, "mask_token"):
                raise UsageError("this encoder was built without a mask token")
            mask = np.asarray(mask, dtype=bool)
            if mask.shape[1] != self.cfg.n_mask_patches:
                raise ShapeError(f"mask has {mask.shape[1]} entries, expected {self.cfg.n_mask_patches}")
            x = T.where(token_mask_from_patches(mask, self.cfg)[:, :, None], self.mask_token, x)
        return x

    def forward(self, images, mask=None):
        x = self.embed(images, mask)
        b = x.shape[0]
        g = self.cfg.grid
        dims = []
        for stage in self.stages:
            x = stage(x)
            dims.append(x.shape[-1])
            if stage.merge is not None:
                x = stage.merge(x.reshape(b, g, g, -1))
                g //= 2
                x = x.reshape(b, g * g, -1)
        return EncoderOutput(self.norm(x), PatchGrid(g, g, x.shape[-1]), dims)


def build_backbone(cfg, seed=0, mask_token=True):
    """Encoder module for a BackboneConfig or preset name."""
    if isinstance(cfg, str):
        cfg = get_preset(cfg)
        if isinstance(cfg, ResNetConfig):
            return build_resnet(cfg, seed)
        cfg = cfg[0]
    rng = np.random.default_rng(seed)
    if cfg.kind == "vit":
        return ViTEncoder(cfg, rng)
    if cfg.kind in ("swin", "swinv2"):
        return SwinEncoder(cfg, rng, mask_token)
    raise ConfigError(f"build_backbone cannot build kind {cfg.kind!r}")


def encode(model, image, mask=None):
    if image.shape[-1] != model.cfg.image_size or image.shape[-2] != model.cfg.image_size:
        raise ShapeError(f"image {image.shape} does not match configured size {model.cfg.image_size}")
    return model(image, mask)


# ---------------------------------------------------------------------------
# decoders


class ViTDecoder(Module):
    def __init__(self, dcfg, ecfg, rng):
        super().__init__()
        self.cfg = dcfg
        self.enc_cfg = ecfg
        d = dcfg.embed_dim
        self.embed = Linear(ecfg.embed_dim, d, rng)
        self.mask_token = Parameter(trunc_normal(rng, (1, 1, d)))
        self.pos_embed = Parameter(trunc_normal(rng, (1, ecfg.grid ** 2, d)))
        self.blocks = ModuleList([TransformerBlock(d, dcfg.heads[0], rng, ecfg.mlp_ratio)
                                  for _ in range(dcfg.depths[0])], prefix="block")
        self.norm = LayerNorm(d)
        self.pred = Linear(d, ecfg.patch_size ** 2 * ecfg.in_chans, rng)

    def forward(self, enc, mask=None):
        x = self.embed(enc.tokens)
        b = x.shape[0]
        n = self.enc_cfg.grid ** 2
        if enc.ids_keep is not None:
            n_vis = enc.ids_keep.shape[1]
            if mask is not None and np.asarray(mask).sum(axis=1)[0] != n - n_vis:
                raise ShapeError("mask is inconsistent with the encoder's visible tokens")
            fill = T.broadcast_to(self.mask_token, (b, n - n_vis, x.shape[-1]))
            x = T.concat([x, fill], axis=1)
            kept = np.zeros((b, n), dtype=bool)
            np.put_along_axis(kept, enc.ids_keep, True, axis=1)
            order = np.concatenate([enc.ids_keep, np.stack([np.flatnonzero(~k) for k in kept])], axis=1)
            restore = np.argsort(order, axis=1, kind="stable")
            x = T.gather(x, restore[:, :, None], axis=1)
        elif x.shape[1] != n:
            raise ShapeError("decoder input does not cover the full token grid")
        x = x + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.pred(self.norm(x))


class SwinDecoder(Module):
    """Embed to the decoder width, then Swin stages separated by patch expansion."""

    def __init__(self, dcfg, ecfg, rng):
        super().__init__()
        self.cfg = dcfg
        self.enc_cfg = ecfg
        n = len(dcfg.depths)
        if n != len(ecfg.depths):
            raise ConfigError("swin decoder needs as many stages as the encoder")
        self.embed = Linear(ecfg.out_dim, dcfg.embed_dim, rng)
        g = ecfg.grid // 2 ** (n - 1)
        stages = []
        for i in range(n):
            dim = dcfg.embed_dim // 2 ** i
            stages.append(SwinStage(dim, dcfg.depths[i], dcfg.heads[i], (g, g), ecfg.window, rng, 1,
                                    ecfg.mlp_ratio, ecfg.cpb_hidden, merge=False))
            if i < n - 1:
                stages[-1].expand = PatchExpand(dim, rng)
                g *= 2
            else:
                stages[-1].expand = None
        self.stages = ModuleList(stages, prefix="stage")
        self.out_dim = dcfg.embed_dim // 2 ** (n - 1)
        self.norm = LayerNorm(self.out_dim)
        self.pred = Linear(self.out_dim, ecfg.patch_size ** 2 * ecfg.in_chans, rng)

    def forward(self, enc, mask=None):
        x = self.embed(enc.tokens)
        b = x.shape[0]
        g = enc.grid.height
        for stage in self.stages:
            x = stage(x)
            if stage.expand is not None:
                x = stage.expand(x.reshape(b, g, g, -1))
                g *= 2
                x = x.reshape(b, g * g, -1)
        return tokens_to_mask_patches(self.pred(self.norm(x)), self.enc_cfg)


def tokens_to_mask_patches(pred, cfg):
    """(B, grid^2, P*P*C) per-token pixels -> (B, n_mask_patches, MP*MP*C)."""
    b = pred.shape[0]
    g, p, c, mp = cfg.grid, cfg.patch_size, cfg.in_chans, cfg.mask_patch_size
    if mp == p:
        return pred
    img = T.transpose(pred.reshape(b, g, g, p, p, c), (0, 1, 3, 2, 4, 5)).reshape(b, g * p, g * p, c)
    s = cfg.image_size // mp
    out = T.transpose(img.reshape(b, s, mp, s, mp, c), (0, 1, 3, 2, 4, 5))
    return out.reshape(b, s * s, mp * mp * c)


def build_decoder(dcfg, ecfg, seed=0):
    rng = np.random.default_rng(seed)
    if dcfg.kind == "vit":
        return ViTDecoder(dcfg, ecfg, rng)
    return SwinDecoder(dcfg, ecfg, rng)


def decode(decoder, enc, mask=None):
    return decoder(enc, mask)


class MaskedAutoencoder(Module):
    def __init__(self, encoder, decoder):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder
        self.cfg = encoder.cfg

    def forward(self, images, mask):
        return self.decoder(self.encoder(images, mask), mask)


def build_mae(preset, seed=0, in_chans=None):
    ecfg, dcfg = get_preset(preset, in_chans) if isinstance(preset, str) else preset
    if ecfg.kind == "resnet":
        raise ConfigError("resnet presets have no masked autoencoder")
    return MaskedAutoencoder(build_backbone(ecfg, seed), build_decoder(dcfg, ecfg, seed + 1))


# ---------------------------------------------------------------------------
# classifier


def _fan_in_linear(i, o, rng):
    # U(+-1/sqrt(fan_in)) for weights and bias; a 0.02 normal would shrink
    # the signal ~100x through this relu stack
    lin = Linear(i, o, rng)
    bound = 1.0 / np.sqrt(i)
    lin.weight.data[...] = rng.uniform(-bound, bound, (o, i))
    lin.bias.data[...] = rng.uniform(-bound, bound, o)
    return lin


class ClassifierHead(Module):
    """in -> 512 -> 256 -> 128 (relu after each) -> 2 logits."""

    dims = (512, 256, 128)

    def __init__(self, in_dim, rng, num_classes=2):
        super().__init__()
        self.fc1 = _fan_in_linear(in_dim, self.dims[0], rng)
        self.fc2 = _fan_in_linear(self.dims[0], self.dims[1], rng)
        self.fc3 = _fan_in_linear(self.dims[1], self.dims[2], rng)
        self.logits = _fan_in_linear(self.dims[2], num_classes, rng)

    def forward(self, x):
        x = T.relu(self.fc1(x))
        x = T.relu(self.fc2(x))
        x = T.relu(self.fc3(x))
        return self.logits(x)


def pool_representation(enc, kind="mean"):
    """Mean over tokens (ViT) or over the final-stage grid (Swin kinds)."""
    if kind != "mean":
        raise ConfigError("only mean pooling is available; this build has no class token")
    return T.mean(enc.tokens, axis=1)


class Classifier(Module):
    def __init__(self, encoder, rng, pool="mean", freeze_encoder=False):
        super().__init__()
        self.encoder = encoder
        self.head = ClassifierHead(encoder.cfg.out_dim, rng)
        self.cfg = encoder.cfg
        self.pool = pool
        if freeze_encoder:
            for p in encoder.parameters():
                p.requires_grad = False

    def forward(self, images):
        return self.head(pool_representation(self.encoder(images), self.pool))


def build_classifier(preset, seed=0, in_chans=None, pool="mean", freeze_encoder=False):
    """Encoder + fresh head, or a ResNet for resnet presets."""
    cfg = get_preset(preset, in_chans) if isinstance(preset, str) else preset
    if isinstance(cfg, ResNetConfig):
        return build_resnet(cfg, seed)
    ecfg = cfg[0] if isinstance(cfg, tuple) else cfg
    encoder = build_backbone(ecfg, seed, mask_token=False)
    return Classifier(encoder, np.random.default_rng(seed + 7919), pool, freeze_encoder)


# ---------------------------------------------------------------------------
# resnet baseline


class ResNet(Module):
    def __init__(self, cfg, rng):
        super().__init__()
        self.cfg = cfg
        self.stem_conv = Conv2d(cfg.in_chans, cfg.stem, 7, rng, stride=2, padding=3)
        self.stem_bn = BatchNorm2d(cfg.stem)
        stages = []
        cin = cfg.stem
        for i, (width, nblocks) in enumerate(zip(cfg.widths, cfg.blocks)):
            blocks = []
            for j in range(nblocks):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(Bottleneck(cin, width, rng, stride))
                cin = width * Bottleneck.expansion
            stages.append(ModuleList(blocks, prefix="block"))
        self.stages = ModuleList(stages, prefix="stage")
        self.fc = Linear(cin, cfg.num_classes, rng)
        self.out_dim = cin

    def features(self, x):
        x = T.relu(self.stem_bn(self.stem_conv(x)))
        x = T.max_pool2d(x, 3, 2, 1)
        for stage in self.stages:
            for blk in stage:
                x = blk(x)
        return T.mean(x, axis=(2, 3))

    def forward(self, x):
        return self.fc(self.features(x))


def build_resnet(preset, seed=0, in_chans=None):
    cfg = get_preset(preset, in_chans) if isinstance(preset, str) else preset
    if not isinstance(cfg, ResNetConfig):
        raise ConfigError(f"{preset!r} is not a resnet preset")
    return ResNet(cfg, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# accounting


def input_shape_for(model, batch=1):
    cfg = model.cfg
    return (batch, cfg.in_chans, cfg.image_size, cfg.image_size)


def estimate_flops(model, input_shape=None, unit="flop", mask_ratio=0.7):
    """Analytic FLOPs of one forward pass, traced from the executed matmuls and convs.

    ``unit="flop"`` counts 2 per multiply-accumulate; ``unit="mac"`` counts
    multiply-accumulates (the convention most published model tables use).
    """
    if unit not in ("flop", "mac"):
        raise ConfigError(f"unknown flop unit {unit!r}")
    shape = input_shape or input_shape_for(model)
    x = T.Tensor(np.zeros(shape))
    was_training = model.training
    model.eval()
    try:
        with T.no_grad(), T.count_macs() as counter:
            if isinstance(model, MaskedAutoencoder):
                n = model.cfg.n_mask_patches
                k = floor_count(mask_ratio, n)
                mask = np.zeros((shape[0], n), dtype=bool)
                mask[:, :k] = True
                model(x, mask)
            else:
                model(x)
    finally:
        model.train(was_training)
    return counter.macs * (2 if unit == "flop" else 1)


__all__ = [
    "BackboneConfig", "DecoderConfig", "ResNetConfig", "EncoderOutput", "PRESETS", "RESNET_PRESETS",
    "PRESET_NAMES", "get_preset", "build_backbone", "build_decoder", "build_mae", "build_classifier",
    "build_resnet", "encode", "decode", "pool_representation", "count_parameters", "estimate_flops",
    "MaskedAutoencoder", "Classifier", "ClassifierHead", "ResNet",
]
