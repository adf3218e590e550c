import numpy as np
import pytest

from octselfnet import tensor as T


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar f at array x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f(x)
        x[i] = old - eps
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def check_op_grad(op, *arrays, eps=1e-6, tol=1e-6, seed=0):
    """Compare the tape gradient of sum(R * op(*inputs)) with central differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with T.no_grad():
        shape = op(*[T.Tensor(a) for a in arrays]).shape
    probe = np.random.default_rng(seed).normal(size=shape)
    ts = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    T.backward((op(*ts) * probe).sum())
    for k, a in enumerate(arrays):
        def f(v, k=k):
            args = [T.Tensor(v if j == k else arrays[j]) for j in range(len(arrays))]
            with T.no_grad():
                return float((op(*args).data * probe).sum())
        num = numeric_grad(f, a.copy(), eps)
        ana = ts[k].grad
        err = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-6)
        assert err.max() < tol, (k, err.max())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk3(tmp_path_factory):
    from octselfnet.data import generate_preset

    root = tmp_path_factory.mktemp("desk3")
    return generate_preset("desk3", str(root))


def tiny_spec(name="tiny", seed=5, n=4, extra=True, size=32):
    from octselfnet.data.synthetic import SyntheticDomainSpec

    counts = {("train", "normal"): n, ("train", "amd"): n, ("val", "normal"): 2, ("val", "amd"): 2,
              ("test", "normal"): 2, ("test", "amd"): 2}
    if extra:
        counts[("train", "cnv")] = 1
        counts[("train", "dme")] = 1
    return SyntheticDomainSpec(name, counts, image_size=size, seed=seed)


@pytest.fixture
def tiny_domain(tmp_path):
    from octselfnet.data import generate_synthetic_domain

    return generate_synthetic_domain(tiny_spec(), str(tmp_path))
