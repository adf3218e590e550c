"""AdamW with decoupled weight decay, and a finite-difference gradient checker."""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, UsageError


@dataclass
class AdamWState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")


def adamw_step(named_params, state):
    """One in-place AdamW update over ``(name, Parameter)`` pairs.

    Decay is applied directly to the weights (theta -= lr * wd * theta) before
    the bias-corrected Adam move, independent of the moment estimates.
    Parameters with ``requires_grad=False`` are skipped.
    """
    named_params = [(n, p) for n, p in named_params if p.requires_grad]
    for name, p in named_params:
        if p.grad is None:
            raise UsageError(f"parameter {name!r} has no gradient; call backward first")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in named_params:
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class AdamW:
    """Thin stateful wrapper binding a module's parameters to an AdamWState."""

    def __init__(self, model, lr, betas=(0.9, 0.999), weight_decay=0.0, eps=1e-8):
        self.model = model
        self.state = AdamWState(lr, betas[0], betas[1], weight_decay, eps)

    def step(self):
        adamw_step(self.model.named_parameters(), self.state)

    def zero_grad(self):
        self.model.zero_grad()

    def state_arrays(self):
        out = {}
        for name, arr in self.state.m.items():
            out["m." + name] = arr
            out["v." + name] = self.state.v[name]
        return out

    def load_state_arrays(self, arrays, step):
        self.state.step = int(step)
        for key, arr in arrays.items():
            kind, name = key.split(".", 1)
            (self.state.m if kind == "m" else self.state.v)[name] = np.array(arr)


def _rel_err(a, n, floor=1e-6):
    if len(a) == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


@dataclass
class GradCheckResult:
    max_rel_err: float
    checked: int
    skipped_switches: int


def grad_check(model, inputs, eps=1e-4, n_coords=60, seed=0, forward=None, details=False):
    """Max relative error between analytic and central-difference gradients.

    The scalar probed is ``sum(R * forward(model, inputs))`` for a fixed random
    R. At least 50 coordinates are drawn across trainable parameters (frozen
    ones are excluded); all of them are checked when the model has fewer.

    A coordinate whose +-eps perturbation flips a relu, max-pool or clamp
    decision straddles a non-differentiable point, where the difference
    quotient does not estimate the derivative. Such coordinates are replaced
    by fresh draws and counted in ``skipped_switches``.
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")
    forward = forward or (lambda m, x: m(x))
    rng = np.random.default_rng(seed)
    with T.no_grad():
        probe = rng.normal(size=T.as_tensor(forward(model, inputs)).shape)

    def scalar():
        with T.record_switches() as log:
            val = float((forward(model, inputs).data * probe).sum())
        return val, log

    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    model.zero_grad()
    with T.record_switches() as base_log:
        loss = (forward(model, inputs) * probe).sum()
    T.backward(loss)

    sizes = np.array([p.size for _, p in params])
    total = int(sizes.sum())
    n_coords = max(n_coords, 50)
    order = rng.permutation(total)
    bounds = np.cumsum(sizes)
    analytic, numeric = [], []
    skipped = 0
    with T.no_grad():
        for f in order:
            if len(analytic) >= n_coords:
                break
            k = int(np.searchsorted(bounds, f, side="right"))
            _, p = params[k]
            i = np.unravel_index(int(f - (bounds[k] - sizes[k])), p.shape)
            old = p.data[i]
            p.data[i] = old + eps
            up, up_log = scalar()
            p.data[i] = old - eps
            down, down_log = scalar()
            p.data[i] = old
            if up_log != base_log or down_log != base_log:
                skipped += 1
                continue
            numeric.append((up - down) / (2 * eps))
            analytic.append(0.0 if p.grad is None else p.grad[i])
    model.zero_grad()
    err = _rel_err(np.array(analytic), np.array(numeric))
    if details:
        return GradCheckResult(err, len(analytic), skipped)
    return err
