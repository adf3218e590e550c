"""Resizing, normalisation and the augmentation pipelines.

Images travel through the pipeline as float64 grayscale arrays in [0, 1];
normalisation is the last step and produces the (C, H, W) model input.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .. import _kernels
from ..errors import ConfigError, ShapeError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
SCHEMES = ("imagenet", "unit")

DEFAULTS = {
    "crop_scale": (0.6, 1.0),
    "crop_ratio": (3 / 4, 4 / 3),
    "rotation_deg": 15.0,
    "jitter": 0.2,
    "grayscale_p": 0.1,
    "flip_p": 0.5,
    "blur_sigma": (0.1, 1.5),
    "elastic_alpha": 10.0,
    "elastic_sigma": 4.0,
}

PIPELINE_OPS = {
    "finetune": ("random_resized_crop", "hflip", "color_jitter", "random_grayscale", "normalize"),
    "baseline": ("resize", "rotation", "hflip", "color_jitter", "gaussian_blur", "elastic", "normalize"),
    "none": ("resize", "normalize"),
}


def resize_bilinear(image, target_h, target_w):
    """Bilinear resize with half-pixel centres (align_corners=False), edge-clamped."""
    img = np.asarray(image, dtype=np.float64)
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"target size must be positive, got {target_h}x{target_w}")
    if img.ndim == 3:
        return np.stack([resize_bilinear(c, target_h, target_w) for c in img])
    h, w = img.shape
    if (h, w) == (target_h, target_w):
        return img.copy()
    ys = (np.arange(target_h) + 0.5) * (h / target_h) - 0.5
    xs = (np.arange(target_w) + 0.5) * (w / target_w) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return _kernels.bilinear_sample(img, yy, xx)


def normalize(image, scheme="imagenet", scale=255.0):
    """(H, W) grayscale with values in [0, scale] -> (C, H, W) model input.

    ``imagenet`` replicates the channel three times before standardising.
    """
    x = np.asarray(image, dtype=np.float64) / scale
    if scheme == "unit":
        return x[None]
    if scheme == "imagenet":
        mean = np.array(IMAGENET_MEAN)[:, None, None]
        std = np.array(IMAGENET_STD)[:, None, None]
        return (np.broadcast_to(x, (3,) + x.shape) - mean) / std
    raise ConfigError(f"unknown normalisation scheme {scheme!r}; choose from {SCHEMES}")


def scheme_channels(scheme):
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown normalisation scheme {scheme!r}")
    return 3 if scheme == "imagenet" else 1


# ---------------------------------------------------------------------------
# individual ops on [0, 1] grayscale


def crop_box(rng, h, w, scale, ratio, attempts=10):
    """(top, left, height, width) in the usual random-resized-crop recipe."""
    area = h * w
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(attempts):
        target = area * rng.uniform(*scale)
        ar = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(target * ar)))
        ch = int(round(math.sqrt(target / ar)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # central crop fallback, clamped into the ratio range
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def random_resized_crop(img, rng, size, scale, ratio):
    top, left, ch, cw = crop_box(rng, *img.shape, scale, ratio)
    return resize_bilinear(img[top:top + ch, left:left + cw], size, size)


def hflip(img, flip):
    return img[:, ::-1].copy() if flip else img


def color_jitter(img, brightness, contrast):
    out = img * brightness
    mean = out.mean()
    return np.clip((out - mean) * contrast + mean, 0.0, 1.0)


def rotate(img, degrees):
    """Rotate about the centre; uncovered corners are filled with 0."""
    h, w = img.shape
    t = math.radians(degrees)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    ys = math.cos(t) * yy + math.sin(t) * xx + cy
    xs = -math.sin(t) * yy + math.cos(t) * xx + cx
    return _kernels.bilinear_sample(img, ys, xs, zero_pad=True)


def gaussian_blur(img, sigma):
    return ndimage.gaussian_filter(img, sigma, mode="reflect")


def elastic(img, rng, alpha, sigma):
    """Displace pixels by alpha * (Gaussian-smoothed uniform noise)."""
    h, w = img.shape
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma, mode="constant") * alpha
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma, mode="constant") * alpha
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return _kernels.bilinear_sample(img, yy + dy, xx + dx)


# ---------------------------------------------------------------------------
# pipelines


@dataclass(frozen=True)
class AugmentationPipeline:
    kind: str
    size: int
    scheme: str = "imagenet"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PIPELINE_OPS:
            raise ConfigError(f"unknown pipeline {self.kind!r}; choose from {tuple(PIPELINE_OPS)}")
        scheme_channels(self.scheme)
        unknown = set(self.params) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown augmentation parameter {sorted(unknown)[0]!r}")
        if self.size < 1:
            raise ConfigError("pipeline size must be positive")

    @property
    def ops(self):
        return PIPELINE_OPS[self.kind]

    @property
    def channels(self):
        return scheme_channels(self.scheme)

    def param(self, key):
        return self.params.get(key, DEFAULTS[key])

    def describe(self):
        return {"kind": self.kind, "size": self.size, "scheme": self.scheme, "ops": list(self.ops),
                "params": {k: self.param(k) for k in sorted(DEFAULTS)}}


def augment(image, pipeline, rng=None, scale=255.0):
    """Apply ``pipeline`` to one grayscale image; returns (C, size, size).

    Random parameters are drawn from ``rng`` in op order, so a seeded
    generator makes the output reproducible.
    """
    img = np.asarray(image, dtype=np.float64) / scale
    if rng is None and pipeline.kind != "none":
        raise ConfigError(f"pipeline {pipeline.kind!r} needs an rng")
    s = pipeline.size
    for op in pipeline.ops:
        if op == "resize":
            img = resize_bilinear(img, s, s)
        elif op == "random_resized_crop":
            img = random_resized_crop(img, rng, s, pipeline.param("crop_scale"), pipeline.param("crop_ratio"))
        elif op == "hflip":
            img = hflip(img, rng.random() < pipeline.param("flip_p"))
        elif op == "color_jitter":
            j = pipeline.param("jitter")
            img = color_jitter(img, rng.uniform(1 - j, 1 + j), rng.uniform(1 - j, 1 + j))
        elif op == "random_grayscale":
            # inputs are already single-channel, so the conversion is the identity;
            # the draw is kept so the rng stream matches a colour pipeline
            rng.random()
        elif op == "rotation":
            d = pipeline.param("rotation_deg")
            img = rotate(img, rng.uniform(-d, d))
        elif op == "gaussian_blur":
            img = gaussian_blur(img, rng.uniform(*pipeline.param("blur_sigma")))
        elif op == "elastic":
            img = elastic(img, rng, pipeline.param("elastic_alpha"), pipeline.param("elastic_sigma"))
        elif op == "normalize":
            return normalize(img, pipeline.scheme, scale=1.0)
    raise AssertionError("pipelines end with normalize")
