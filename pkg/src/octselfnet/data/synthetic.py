"""Seeded OCT-like B-scan generator for multi-domain experiments.

Each image is a dark field crossed by a curved retina: a stack of
alternating-intensity bands ending in a bright RPE line, all under
multiplicative speckle. Class-specific lesions:

* amd: drusen, Gaussian bumps that lift the RPE and fill with medium signal
* cnv: a bright irregular lesion above the RPE over a dark fluid pocket
* dme: dark intraretinal cysts and a thickened retina

Domains differ only in texture/geometry parameters, which gives a genuine
covariate shift between them.
"""

import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from ..errors import ConfigError, IntegrityError
from .manifest import LABELS, SPLITS, DatasetManifest, ManifestRow, write_manifest
from .pgm import write_pgm


@dataclass(frozen=True)
class Texture:
    speckle_grain: float = 1.0
    speckle_strength: float = 0.5
    band_count: int = 4
    band_curvature: float = 0.15
    brightness: float = 0.85
    noise: float = 0.05
    thickness: float = 0.3
    tilt: float = 0.0


@dataclass(frozen=True)
class Lesion:
    drusen_amplitude: float = 0.16
    drusen_count: tuple = (2, 4)
    drusen_width: float = 0.06


@dataclass(frozen=True)
class SyntheticDomainSpec:
    name: str
    counts: dict
    image_size: int = 64
    texture: Texture = field(default_factory=Texture)
    lesion: Lesion = field(default_factory=Lesion)
    seed: int = 0

    def __post_init__(self):
        for (split, label), n in self.counts.items():
            if split not in SPLITS or label not in LABELS:
                raise ConfigError(f"bad count key ({split!r}, {label!r})")
            if n <= 0:
                raise ConfigError(f"{self.name}: count for ({split}, {label}) must be positive, got {n}")
        if self.image_size < 16:
            raise ConfigError("synthetic images must be at least 16 pixels")

    def describe(self):
        d = asdict(self)
        d["counts"] = {f"{s}/{c}": n for (s, c), n in sorted(self.counts.items())}
        return d


def _counts(train, val, test, extra=None):
    out = {}
    for split, (n, a) in zip(SPLITS, (train, val, test)):
        out[(split, "normal")] = n
        out[(split, "amd")] = a
    for key, n in (extra or {}).items():
        out[key] = n
    return out


# Normal/AMD splits keep a large-set imbalance (ds1) and two smaller, milder ones, scaled to desk size.
DESK3 = {
    "ds1-desk": SyntheticDomainSpec(
        "ds1-desk",
        _counts((400, 66), (55, 9), (52, 8),
                {("train", "cnv"): 40, ("train", "dme"): 30, ("val", "cnv"): 5, ("val", "dme"): 4}),
        texture=Texture(speckle_grain=0.7, speckle_strength=0.45, band_count=4, band_curvature=0.12,
                        brightness=0.85, noise=0.04, thickness=0.30, tilt=0.0),
        lesion=Lesion(drusen_amplitude=0.17, drusen_count=(2, 4), drusen_width=0.06),
        seed=101),
    "ds2-desk": SyntheticDomainSpec(
        "ds2-desk",
        _counts((100, 52), (15, 8), (30, 15), {("train", "dme"): 20, ("val", "dme"): 3}),
        texture=Texture(speckle_grain=1.6, speckle_strength=0.4, band_count=6, band_curvature=-0.06,
                        brightness=0.75, noise=0.05, thickness=0.36, tilt=0.05),
        lesion=Lesion(drusen_amplitude=0.16, drusen_count=(2, 3), drusen_width=0.07),
        seed=202),
    "ds3-desk": SyntheticDomainSpec(
        "ds3-desk",
        _counts((198, 93), (24, 12), (24, 12), {("train", "cnv"): 20, ("val", "cnv"): 3}),
        texture=Texture(speckle_grain=1.1, speckle_strength=0.35, band_count=3, band_curvature=0.28,
                        brightness=1.0, noise=0.03, thickness=0.26, tilt=-0.06),
        lesion=Lesion(drusen_amplitude=0.18, drusen_count=(2, 5), drusen_width=0.055),
        seed=303),
}

PRESET_GROUPS = {"desk3": ("ds1-desk", "ds2-desk", "ds3-desk")}


def _gauss(x, c, w):
    return np.exp(-0.5 * ((x - c) / w) ** 2)


def render_image(spec, label, rng):
    """One uint8 (S, S) scan of class ``label``."""
    s = spec.image_size
    tex, les = spec.texture, spec.lesion
    u = (np.arange(s) + 0.5) / s
    yy, xx = np.meshgrid(u, u, indexing="ij")
    x = u

    centre = 0.62 + rng.uniform(-0.05, 0.05)
    curv = tex.band_curvature * rng.uniform(0.8, 1.2)
    rpe = centre + curv * (x - 0.5) ** 2 * 4 - 0.5 * curv + tex.tilt * (x - 0.5)
    thick = tex.thickness * rng.uniform(0.9, 1.1) * np.ones(s)

    lift = np.zeros(s)
    if label == "amd":
        k = int(rng.integers(les.drusen_count[0], les.drusen_count[1] + 1))
        for c in rng.uniform(0.15, 0.85, size=k):
            lift += les.drusen_amplitude * rng.uniform(0.7, 1.3) * _gauss(x, c, les.drusen_width * rng.uniform(0.8, 1.2))
    if label == "dme":
        thick = thick * (1 + 0.35 * _gauss(x, rng.uniform(0.35, 0.65), 0.15))

    rpe_line = rpe - lift
    ilm = rpe - thick - 0.7 * lift
    depth = (yy - ilm[None, :]) / (rpe_line - ilm)[None, :]  # 0 at ILM, 1 at RPE
    inside = (depth >= 0) & (depth <= 1)
    phase = np.clip(depth, 0, 1) * tex.band_count
    layers = 0.2 + 0.2 * np.cos(np.pi * phase) ** 2
    img = np.where(inside, layers, 0.04)
    img = img + 0.8 * _gauss(yy, rpe_line[None, :] + 0.01, 0.012)
    chor = yy > rpe[None, :] + 0.02
    img = img + np.where(chor, 0.25 * np.exp(-(yy - rpe[None, :]) / 0.12), 0.0)
    if label == "amd":
        # drusen material between the lifted and the original RPE line
        under = (yy > rpe_line[None, :] + 0.025) & (yy < rpe[None, :])
        img = np.where(under, 0.6, img)
    elif label == "cnv":
        c = rng.uniform(0.3, 0.7)
        blob = _gauss(xx, c, 0.07) * _gauss(yy, rpe_line[None, :] - 0.06, 0.03)
        img = img + 0.8 * blob * (1 + 0.5 * rng.standard_normal((s, s)))
        img = np.where(_gauss(xx, c, 0.1) * _gauss(yy, rpe_line[None, :] - 0.015, 0.012) > 0.4, 0.02, img)
    elif label == "dme":
        for _ in range(int(rng.integers(2, 5))):
            cx = rng.uniform(0.3, 0.7)
            cy = np.interp(cx, x, ilm) + rng.uniform(0.3, 0.6) * np.interp(cx, x, thick)
            r = rng.uniform(0.025, 0.05)
            img = np.where(((xx - cx) / r) ** 2 + ((yy - cy) / (0.7 * r)) ** 2 < 1, 0.02, img)

    grain = ndimage.gaussian_filter(rng.standard_normal((s, s)), tex.speckle_grain)
    grain /= grain.std() + 1e-12
    img = img * np.exp(tex.speckle_strength * grain - 0.5 * tex.speckle_strength ** 2)
    img = img * tex.brightness + tex.noise * rng.standard_normal((s, s))
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def generate_synthetic_domain(spec, out_dir):
    """Write ``<out_dir>/<name>/images/*.pgm`` plus ``manifest.csv``; returns the manifest."""
    root = os.path.join(out_dir, spec.name)
    img_dir = os.path.join(root, "images")
    try:
        os.makedirs(img_dir, exist_ok=True)
    except OSError as exc:
        raise IntegrityError(f"cannot create {img_dir}: {exc}") from exc
    rows = []
    for split in SPLITS:
        for label in LABELS:
            n = spec.counts.get((split, label), 0)
            for i in range(n):
                # one independent stream per image, so counts can change without reshuffling others
                rng = np.random.default_rng([spec.seed, SPLITS.index(split), LABELS.index(label), i])
                rel = f"images/{split}_{label}_{i:04d}.pgm"
                write_pgm(os.path.join(root, rel), render_image(spec, label, rng))
                rows.append(ManifestRow(rel, label, split))
    write_manifest(os.path.join(root, "manifest.csv"), rows)
    return DatasetManifest(spec.name, rows, root)


def generate_preset(group, out_dir, seed_offset=0):
    if group not in PRESET_GROUPS:
        raise ConfigError(f"unknown synthetic preset {group!r}; choose from {tuple(PRESET_GROUPS)}")
    out = []
    for name in PRESET_GROUPS[group]:
        spec = DESK3[name]
        if seed_offset:
            spec = SyntheticDomainSpec(spec.name, spec.counts, spec.image_size, spec.texture, spec.lesion,
                                       spec.seed + seed_offset)
        out.append(generate_synthetic_domain(spec, out_dir))
    return out
