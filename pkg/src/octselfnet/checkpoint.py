"""Checkpoint files.

Layout::

    b"OCTSN1" | u64 header_len | header JSON (UTF-8, sorted keys) | sections

Each section is ``u64 nbytes`` followed by the raw little-endian array bytes,
in the order the header lists them. The header records name, dtype, shape
and offset for every array plus a SHA-256 over the section block, so a
truncated or altered file is rejected before any array is handed out.
"""

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CheckpointError, IntegrityError

MAGIC = b"OCTSN1"
FORMAT_VERSION = 1
_U64 = struct.Struct("<Q")


@dataclass
class Checkpoint:
    phase: str
    config: dict
    params: dict
    optimizer: Optional[dict] = None
    epoch: int = 0
    val_loss: Optional[float] = None
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def preset(self):
        return self.config.get("preset")

    def encoder_params(self):
        return {k[len("encoder."):]: v for k, v in self.params.items() if k.startswith("encoder.")}


def _sections(groups):
    index, blobs, offset = [], [], 0
    for group, arrays in groups:
        for name, arr in arrays.items():
            a = np.asarray(arr)
            dt = "<f8" if a.dtype.kind == "f" else "<i8"
            raw = np.ascontiguousarray(a, dtype=dt).tobytes()
            index.append({"group": group, "name": name, "dtype": dt, "shape": list(a.shape),
                          "offset": offset, "nbytes": len(raw)})
            blobs.append(_U64.pack(len(raw)) + raw)
            offset += _U64.size + len(raw)
    return index, b"".join(blobs)


def checkpoint_bytes(ckpt):
    groups = [("params", ckpt.params)]
    if ckpt.optimizer is not None:
        groups.append(("optimizer", ckpt.optimizer))
    index, body = _sections(groups)
    header = {
        "format_version": ckpt.format_version,
        "phase": ckpt.phase,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "val_loss": ckpt.val_loss,
        "meta": ckpt.meta,
        "has_optimizer": ckpt.optimizer is not None,
        "arrays": index,
        "body_sha256": hashlib.sha256(body).hexdigest(),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return MAGIC + _U64.pack(len(hb)) + hb + body


def save_checkpoint(path, ckpt):
    """Write atomically (temp file then rename)."""
    data = checkpoint_bytes(ckpt)
    tmp = f"{path}.tmp"
    try:
        d = os.path.dirname(os.path.abspath(path))
        os.makedirs(d, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IntegrityError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IntegrityError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:len(MAGIC)] != MAGIC:
        raise IntegrityError(f"{path} is not a checkpoint (bad magic bytes)")
    pos = len(MAGIC)
    if len(raw) < pos + _U64.size:
        raise IntegrityError(f"{path} is truncated inside the header length")
    (hlen,) = _U64.unpack_from(raw, pos)
    pos += _U64.size
    if len(raw) < pos + hlen:
        raise IntegrityError(f"{path} is truncated inside the header")
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path} has a corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path} has format version {header.get('format_version')}, "
                              f"this build reads version {FORMAT_VERSION}")
    body = raw[pos + hlen:]
    expected = sum(_U64.size + a["nbytes"] for a in header["arrays"])
    if len(body) < expected:
        raise IntegrityError(f"{path} is truncated: {len(body)} of {expected} section bytes")
    if hashlib.sha256(body[:expected]).hexdigest() != header["body_sha256"]:
        raise IntegrityError(f"{path} failed its checksum")
    groups = {"params": {}, "optimizer": {}}
    for a in header["arrays"]:
        (n,) = _U64.unpack_from(body, a["offset"])
        if n != a["nbytes"]:
            raise IntegrityError(f"{path}: section {a['name']!r} length prefix {n} != {a['nbytes']}")
        start = a["offset"] + _U64.size
        arr = np.frombuffer(body[start:start + n], dtype=a["dtype"]).reshape(a["shape"]).copy()
        groups[a["group"]][a["name"]] = arr
    return Checkpoint(header["phase"], header["config"], groups["params"],
                      groups["optimizer"] if header["has_optimizer"] else None,
                      header["epoch"], header["val_loss"], header["meta"], header["format_version"])


def check_name_scheme(model, params, prefix=""):
    """Raise naming the first model array (in model order) absent from ``params``,
    then the first unexpected one, then the first shape mismatch."""
    expected = model.state_dict()
    for name, arr in expected.items():
        key = prefix + name
        if key not in params:
            raise CheckpointError(f"name scheme mismatch: model expects {key!r}, not found in checkpoint")
    extra = [k for k in params if k.startswith(prefix) and k[len(prefix):] not in expected]
    if extra:
        raise CheckpointError(f"name scheme mismatch: checkpoint has {extra[0]!r}, unknown to the model")
    for name, arr in expected.items():
        if params[prefix + name].shape != arr.shape:
            raise CheckpointError(f"name scheme mismatch: {prefix + name!r} has shape "
                                  f"{params[prefix + name].shape}, model expects {arr.shape}")


def load_into(model, ckpt):
    """Restore every parameter and buffer of ``model`` from ``ckpt``."""
    check_name_scheme(model, ckpt.params)
    return model.load_state_dict(ckpt.params, strict=True)
