"""Transformer and convolutional building blocks.

Token grids are carried as (B, H, W, C) tensors. Window attention, shifted
window masks, relative position biases (table lookup for Swin, log-spaced
continuous MLP for SwinV2), patch embed/merge/expand and the bottleneck
residual block of the ResNet baseline all live here.
"""

from dataclasses import dataclass
import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .module import Module, ModuleList, Parameter, kaiming_uniform, trunc_normal

MASK_NEG = -1e9
MAX_LOGIT_SCALE = math.log(1.0 / 0.01)


@dataclass(frozen=True)
class AttentionConfig:
    dim: int
    heads: int
    kind: str = "standard"  # standard | window | window_shifted | scaled_cosine
    window: int = 0
    shift: int = 0

    def __post_init__(self):
        if self.kind not in ("standard", "window", "window_shifted", "scaled_cosine"):
            raise ConfigError(f"unknown attention kind {self.kind!r}")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.kind == "standard":
            if self.shift:
                raise ConfigError("standard attention cannot be shifted")
        elif self.window < 1:
            raise ConfigError("window attention needs window >= 1")
        if self.shift and not 0 < self.shift < self.window:
            raise ConfigError(f"shift {self.shift} must lie in [0, window={self.window})")
        if self.kind == "window" and self.shift:
            raise ConfigError("kind 'window' is unshifted; use 'window_shifted'")

    @property
    def head_dim(self):
        return self.dim // self.heads


@dataclass(frozen=True)
class PatchGrid:
    height: int
    width: int
    dim: int

    @property
    def tokens(self):
        return self.height * self.width


# ---------------------------------------------------------------------------
# basic layers


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True, std=0.02):
        super().__init__()
        self.weight = Parameter(trunc_normal(rng, (out_features, in_features), std))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        return linear_forward(x, self.weight, self.bias)


def linear_forward(x, weight, bias=None):
    return T.linear(x, weight, bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Mlp(Module):
    def __init__(self, dim, hidden, rng, act="gelu"):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self.act = act

    def forward(self, x):
        return self.fc2(T.activation(self.fc1(x), self.act))


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, bias=False):
        super().__init__()
        self.weight = Parameter(kaiming_uniform(rng, (cout, cin, kernel, kernel)))
        self.bias = Parameter(np.zeros(cout)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return T.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


# ---------------------------------------------------------------------------
# attention


def _split_heads(qkv, heads):
    b, n, three_d = qkv.shape
    d = three_d // 3
    x = qkv.reshape(b, n, 3, heads, d // heads).transpose(2, 0, 3, 1, 4)
    return x[0], x[1], x[2]


def _merge_heads(x):
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)


def _add_window_mask(attn, mask):
    if mask is None:
        return attn
    nw = mask.shape[0]
    bw, h, n, _ = attn.shape
    attn = attn.reshape(bw // nw, nw, h, n, n) + mask[None, :, None]
    return attn.reshape(bw, h, n, n)


def multi_head_attention(x, qkv_weight, qkv_bias, proj_weight, proj_bias, heads, bias=None, mask=None,
                         return_weights=False):
    """Scaled dot-product attention over (B, N, D) tokens.

    ``bias`` is a per-head (heads, N, N) additive term; ``mask`` a per-window
    (nW, N, N) additive term for batches laid out window-major.
    """
    dim = x.shape[-1]
    if dim % heads:
        raise ConfigError(f"dim {dim} is not divisible by {heads} heads")
    q, k, v = _split_heads(T.linear(x, qkv_weight, qkv_bias), heads)
    scale = 1.0 / math.sqrt(dim // heads)
    attn = (q * scale) @ T.swapaxes(k, -1, -2)
    if bias is not None:
        attn = attn + bias
    attn = T.softmax(_add_window_mask(attn, mask), axis=-1)
    out = T.linear(_merge_heads(attn @ v), proj_weight, proj_bias)
    return (out, attn) if return_weights else out


def scaled_cosine_attention(x, qkv_weight, qkv_bias, proj_weight, proj_bias, heads, logit_scale,
                            bias=None, mask=None, return_weights=False):
    """Cosine-similarity attention with a learnable, clamped per-head scale.

    ``logit_scale`` holds log(1/tau) per head; 1/tau is clamped to <= 100.
    """
    q, k, v = _split_heads(T.linear(x, qkv_weight, qkv_bias), heads)
    cos = T.l2_normalize(q, axis=-1) @ T.swapaxes(T.l2_normalize(k, axis=-1), -1, -2)
    scale = T.exp(T.clamp_max(logit_scale, MAX_LOGIT_SCALE)).reshape(-1, 1, 1)
    attn = cos * scale
    if bias is not None:
        attn = attn + bias
    attn = T.softmax(_add_window_mask(attn, mask), axis=-1)
    out = T.linear(_merge_heads(attn @ v), proj_weight, proj_bias)
    return (out, attn) if return_weights else out


class Attention(Module):
    """Global multi-head self-attention (ViT)."""

    def __init__(self, dim, heads, rng):
        super().__init__()
        self.cfg = AttentionConfig(dim, heads, "standard")
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x):
        return multi_head_attention(x, self.qkv.weight, self.qkv.bias, self.proj.weight, self.proj.bias,
                                    self.cfg.heads)


# ---------------------------------------------------------------------------
# windows


def window_partition(x, window):
    """(B, H, W, C) -> (B * nW, M*M, C), windows in row-major order."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ShapeError(f"grid {h}x{w} is not divisible by window {window}")
    x = x.reshape(b, h // window, window, w // window, window, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b * (h // window) * (w // window), window * window, c)


def window_reverse(windows, window, h, w):
    """Inverse of ``window_partition``."""
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // window) * (w // window))
    x = windows.reshape(b, h // window, w // window, window, window, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


def shift_region_labels(h, w, window, shift):
    """Region id of each token of the cyclically shifted grid."""
    labels = np.zeros((h, w), dtype=np.int64)
    if shift == 0:
        return labels
    cuts = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    cnt = 0
    for hs in cuts:
        for ws in cuts:
            labels[hs, ws] = cnt
            cnt += 1
    return labels


def shifted_window_mask(h, w, window, shift):
    """Additive (nW, M*M, M*M) mask: MASK_NEG between tokens of different regions."""
    if not 0 <= shift < window:
        raise ConfigError(f"shift {shift} must lie in [0, {window})")
    labels = shift_region_labels(h, w, window, shift)
    win = window_partition(labels[None, :, :, None], window)[..., 0]
    diff = win[:, :, None] != win[:, None, :]
    return np.where(diff, MASK_NEG, 0.0)


def relative_position_index(window):
    """(M*M, M*M) index into a (2M-1)^2 table of displacements."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.transpose(1, 2, 0) + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


def log_spaced_coords(window):
    """((2M-1)^2, 2) displacement table mapped through sign(d) log(1+|d|) / log 8."""
    r = np.arange(-(window - 1), window, dtype=np.float64)
    grid = np.stack(np.meshgrid(r, r, indexing="ij"), axis=-1).reshape(-1, 2)
    return np.sign(grid) * np.log1p(np.abs(grid)) / math.log(8.0)


class RelPosBias(Module):
    def __init__(self, window, heads, rng):
        super().__init__()
        self.window = window
        self.table = Parameter(trunc_normal(rng, ((2 * window - 1) ** 2, heads)))
        self.register_buffer("_index", relative_position_index(window))

    def forward(self):
        n = self.window * self.window
        return T.transpose(self.table[self._index.reshape(-1)].reshape(n, n, -1), (2, 0, 1))


class ContinuousPosBias(Module):
    def __init__(self, window, heads, rng, hidden=512):
        super().__init__()
        self.window = window
        self.fc1 = Linear(2, hidden, rng)
        self.fc2 = Linear(hidden, heads, rng, bias=False)
        self.register_buffer("_coords", log_spaced_coords(window))
        self.register_buffer("_index", relative_position_index(window))

    def forward(self):
        n = self.window * self.window
        table = self.fc2(T.relu(self.fc1(T.Tensor(self._coords))))
        bias = table[self._index.reshape(-1)].reshape(n, n, -1)
        return T.sigmoid(T.transpose(bias, (2, 0, 1))) * 16.0


class WindowAttention(Module):
    def __init__(self, dim, heads, window, rng, version=1, cpb_hidden=512):
        super().__init__()
        self.heads = heads
        self.window = window
        self.version = version
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        if version == 1:
            self.rel_bias = RelPosBias(window, heads, rng)
        else:
            self.logit_scale = Parameter(np.full(heads, math.log(10.0)))
            self.cpb = ContinuousPosBias(window, heads, rng, cpb_hidden)

    def forward(self, x, mask=None):
        if self.version == 1:
            return multi_head_attention(x, self.qkv.weight, self.qkv.bias, self.proj.weight, self.proj.bias,
                                        self.heads, bias=self.rel_bias(), mask=mask)
        return scaled_cosine_attention(x, self.qkv.weight, self.qkv.bias, self.proj.weight, self.proj.bias,
                                       self.heads, self.logit_scale, bias=self.cpb(), mask=mask)


class TransformerBlock(Module):
    """Pre-norm ViT block."""

    def __init__(self, dim, heads, rng, mlp_ratio=4):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class SwinBlock(Module):
    """Swin (version=1, pre-norm) or SwinV2 (version=2, residual post-norm) block.

    Grids smaller than the window shrink the window to the grid and disable
    shifting; grids not divisible by the window are zero-padded right/bottom.
    """

    def __init__(self, dim, heads, grid, window, shift, rng, version=1, mlp_ratio=4, cpb_hidden=512):
        super().__init__()
        h, w = grid
        if min(h, w) <= window:
            window, shift = min(h, w), 0
        self.grid = (h, w)
        self.window = window
        self.shift = shift
        self.version = version
        self.cfg = AttentionConfig(dim, heads, "scaled_cosine" if version == 2 else
                                   ("window_shifted" if shift else "window"), window, shift)
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window, rng, version, cpb_hidden)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng)
        hp = -(-h // window) * window
        wp = -(-w // window) * window
        self.register_buffer("_mask", shifted_window_mask(hp, wp, window, shift) if shift else np.zeros(0))

    def _attend(self, x):
        b, n, c = x.shape
        h, w = self.grid
        m = self.window
        x = x.reshape(b, h, w, c)
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            x = T.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)))
        hp, wp = h + ph, w + pw
        if self.shift:
            x = T.roll(x, (-self.shift, -self.shift), (1, 2))
        win = window_partition(x, m)
        win = self.attn(win, self._mask if self.shift else None)
        x = window_reverse(win, m, hp, wp)
        if self.shift:
            x = T.roll(x, (self.shift, self.shift), (1, 2))
        if ph or pw:
            x = x[:, :h, :w, :]
        return x.reshape(b, n, c)

    def forward(self, x):
        if self.version == 1:
            x = x + self._attend(self.norm1(x))
            return x + self.mlp(self.norm2(x))
        x = x + self.norm1(self._attend(x))
        return x + self.norm2(self.mlp(x))


# ---------------------------------------------------------------------------
# patch operations


def patch_embed(image, weight, bias, patch, method="conv"):
    """(B, C, H, W) -> (B, H/P * W/P, D) tokens in row-major grid order."""
    b, c, h, w = image.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not divisible by patch {patch}")
    d = weight.shape[0]
    if method == "conv":
        y = T.conv2d(image, weight, bias, stride=patch)
        return T.transpose(y, (0, 2, 3, 1)).reshape(b, (h // patch) * (w // patch), d)
    if method == "linear":
        x = T.as_tensor(image).reshape(b, c, h // patch, patch, w // patch, patch)
        x = T.transpose(x, (0, 2, 4, 1, 3, 5)).reshape(b, (h // patch) * (w // patch), c * patch * patch)
        return T.linear(x, weight.reshape(d, -1), bias)
    raise ConfigError(f"unknown patch embed method {method!r}")


class PatchEmbed(Module):
    def __init__(self, in_chans, patch, dim, rng, norm=True):
        super().__init__()
        self.patch = patch
        self.weight = Parameter(trunc_normal(rng, (dim, in_chans, patch, patch)))
        self.bias = Parameter(np.zeros(dim))
        self.norm = LayerNorm(dim) if norm else None

    def forward(self, image):
        x = patch_embed(image, self.weight, self.bias, self.patch)
        return self.norm(x) if self.norm is not None else x


def merge_2x2(x):
    """(B, H, W, C) -> (B, H/2, W/2, 4C) in order top-left, bottom-left, top-right, bottom-right."""
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"patch merge needs an even grid, got {h}x{w}")
    x = x.reshape(b, h // 2, 2, w // 2, 2, c)
    # slot order (col offset, row offset) -> TL, BL, TR, BR
    return T.transpose(x, (0, 1, 3, 4, 2, 5)).reshape(b, h // 2, w // 2, 4 * c)


class PatchMerge(Module):
    def __init__(self, dim, rng, version=1):
        super().__init__()
        self.version = version
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)
        self.norm = LayerNorm(4 * dim if version == 1 else 2 * dim)

    def forward(self, x):
        x = merge_2x2(x)
        if self.version == 1:
            return self.reduction(self.norm(x))
        return self.norm(self.reduction(x))


class PatchExpand(Module):
    """(B, H, W, C) -> (B, 2H, 2W, C/2): linear C -> 2C then 2x2 pixel shuffle."""

    def __init__(self, dim, rng):
        super().__init__()
        if dim % 2:
            raise ShapeError(f"patch expand needs an even channel count, got {dim}")
        self.expand = Linear(dim, 2 * dim, rng, bias=False)
        self.norm = LayerNorm(dim // 2)

    def forward(self, x):
        b, h, w, c = x.shape
        if c % 2:
            raise ShapeError(f"patch expand needs an even channel count, got {c}")
        y = self.expand(x).reshape(b, h, w, 2, 2, c // 2)
        y = T.transpose(y, (0, 1, 3, 2, 4, 5)).reshape(b, 2 * h, 2 * w, c // 2)
        return self.norm(y)


class Bottleneck(Module):
    expansion = 4

    def __init__(self, cin, width, rng, stride=1):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = Conv2d(cin, width, 1, rng)
        self.bn1 = BatchNorm2d(width)
        self.conv2 = Conv2d(width, width, 3, rng, stride=stride, padding=1)
        self.bn2 = BatchNorm2d(width)
        self.conv3 = Conv2d(width, cout, 1, rng)
        self.bn3 = BatchNorm2d(cout)
        if stride > 1 or cin != cout:
            self.down_conv = Conv2d(cin, cout, 1, rng, stride=stride)
            self.down_bn = BatchNorm2d(cout)
        else:
            self.down_conv = None
            self.down_bn = None

    def forward(self, x):
        skip = x if self.down_conv is None else self.down_bn(self.down_conv(x))
        y = T.relu(self.bn1(self.conv1(x)))
        y = T.relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        return T.relu(y + skip)

