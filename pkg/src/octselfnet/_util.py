import hashlib
import json
import math


def floor_count(ratio, n):
    """floor(ratio * n), robust to products like 0.57 * 100 = 56.99999999999999."""
    return math.floor(ratio * n + 1e-9)


def fingerprint(obj):
    """Short stable hash of a JSON-serialisable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def stable_int(*parts):
    """Deterministic 32-bit integer from strings/ints (Python's hash() is salted)."""
    blob = "\x1f".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:4], "little")
