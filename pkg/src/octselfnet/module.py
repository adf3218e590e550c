"""Parameter containers.

A ``Module`` discovers parameters, buffers and submodules from its attributes
in assignment order; the dotted attribute path becomes the parameter name.
Those names are the unit of checkpointing and weight transfer.
"""

import math

import numpy as np

from .errors import CheckpointError, ShapeError
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, requires_grad=True):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=requires_grad)


class Module:
    training = True

    def __init__(self):
        object.__setattr__(self, "_buffers", {})

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def register_buffer(self, name, value):
        if "_buffers" not in self.__dict__:
            object.__setattr__(self, "_buffers", {})
        self._buffers[name] = np.asarray(value)
        object.__setattr__(self, name, self._buffers[name])

    def children(self):
        for key, val in self.__dict__.items():
            if isinstance(val, Module):
                yield key, val

    def named_parameters(self, prefix=""):
        for key, val in self.__dict__.items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for key, val in self.__dict__.items():
            if isinstance(val, Module):
                yield from val.named_buffers(prefix + key + ".")
        for key in self.__dict__.get("_buffers", {}):
            yield prefix + key, self._buffers[key]

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        """Parameters then persistent buffers, as plain arrays keyed by name."""
        out = {name: p.data for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            if not name.rsplit(".", 1)[-1].startswith("_"):
                out[name] = buf
        return out

    def load_state_dict(self, state, strict=True, prefix=""):
        """Copy arrays into the module in place; returns the loaded names."""
        targets = {}
        for name, p in self.named_parameters():
            targets[name] = p.data
        for name, buf in self.named_buffers():
            if not name.rsplit(".", 1)[-1].startswith("_"):
                targets[name] = buf
        loaded = []
        for name, arr in targets.items():
            key = prefix + name
            if key not in state:
                if strict:
                    raise CheckpointError(f"parameter {key!r} missing from state")
                continue
            src = np.asarray(state[key])
            if src.shape != arr.shape:
                raise ShapeError(f"parameter {key!r}: shape {src.shape} does not match {arr.shape}")
            arr[...] = src
            loaded.append(name)
        if strict:
            extra = sorted(set(k[len(prefix):] for k in state if k.startswith(prefix)) - set(targets))
            if extra:
                raise CheckpointError(f"unexpected parameter {prefix + extra[0]!r} in state")
        return loaded


class ModuleList(Module):
    """Indexed children named ``{prefix}{i}``."""

    def __init__(self, modules=(), prefix=""):
        super().__init__()
        self._prefix = prefix
        self._n = 0
        for m in modules:
            self.append(m)

    def append(self, module):
        object.__setattr__(self, f"{self._prefix}{self._n}", module)
        self._n += 1

    def __getitem__(self, i):
        if i < 0:
            i += self._n
        return self.__dict__[f"{self._prefix}{i}"]

    def __len__(self):
        return self._n

    def __iter__(self):
        return (self[i] for i in range(self._n))


def count_parameters(model):
    """Total element count of every Parameter in ``model``."""
    return int(sum(p.size for p in model.parameters()))


# ---------------------------------------------------------------------------
# initialisers


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) truncated to +-2 std, resampled until in range."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def kaiming_uniform(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)
