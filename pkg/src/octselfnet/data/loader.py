"""Batch assembly from manifests.

Every image gets its own generator seeded by (seed, epoch, index), so batch
contents depend only on those numbers and never on iteration history.
"""

import numpy as np

from ..errors import DataError
from .manifest import BINARY
from .pgm import read_pgm
from .transforms import augment


class ImageSet:
    """Rows of one or more manifests with a preprocessing pipeline."""

    def __init__(self, manifests, split, pipeline, labels=None, seed=0):
        if not isinstance(manifests, (list, tuple)):
            manifests = [manifests]
        self.items = []
        for m in manifests:
            for r in m.select(split, labels):
                self.items.append((m.abspath(r), r.label, m.domain_name))
        if not self.items:
            raise DataError(f"no {split!r} images in {[m.domain_name for m in manifests]}")
        self.split = split
        self.pipeline = pipeline
        self.seed = seed
        self._cache = {}

    def __len__(self):
        return len(self.items)

    @property
    def targets(self):
        """1 for amd, 0 otherwise."""
        return np.array([int(lab == "amd") for _, lab, _ in self.items])

    def raw(self, i):
        img = self._cache.get(i)
        if img is None:
            img = self._cache[i] = read_pgm(self.items[i][0])
        return img

    def image(self, i, epoch=0, pipeline=None):
        pipeline = pipeline or self.pipeline
        if pipeline.kind == "none":
            # deterministic, so computed once
            key = (i, pipeline.size, pipeline.scheme)
            out = self._cache.get(key)
            if out is None:
                out = self._cache[key] = augment(self.raw(i), pipeline)
            return out
        return augment(self.raw(i), pipeline, np.random.default_rng([self.seed, epoch, i]))

    def batch(self, indices, epoch=0, pipeline=None):
        return np.stack([self.image(int(i), epoch, pipeline) for i in indices])

    def batches(self, batch_size, epoch=0, shuffle=True, pipeline=None):
        """Yield (indices, images) over one epoch; shuffle order is seeded per epoch."""
        order = np.arange(len(self))
        if shuffle:
            order = np.random.default_rng([self.seed, epoch, 7]).permutation(len(self))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            yield idx, self.batch(idx, epoch, pipeline)


def binary_set(manifest, split, pipeline, seed=0):
    """Normal/AMD rows of ``split``; both classes must be present."""
    ds = ImageSet(manifest, split, pipeline, labels=BINARY, seed=seed)
    t = ds.targets
    if t.min() == t.max():
        only = "amd" if t[0] else "normal"
        raise DataError(f"{manifest.domain_name} {split} split has only {only!r} images")
    return ds
