"""Shared oracles: central finite differences and a float64 reference MLP."""
import numpy as np

from talkdistill import numkernel as nk


def as_params(arrays, dtype):
    return {k: nk.Tensor(np.asarray(v, dtype=dtype), requires_grad=True, dtype=dtype)
            for k, v in arrays.items()}


def gradcheck(build, arrays, seed=0, h=1e-5, wrt=None):
    """Max relative error of float32 analytic gradients against float64 central differences.

    ``build(tensors)`` returns an output tensor of any shape; it is reduced
    with a fixed random projection so every output entry matters. Relative
    error is ``max|analytic - numeric| / max|numeric|`` per input.
    """
    wrt = list(arrays) if wrt is None else wrt
    rng = np.random.default_rng(seed)
    out64 = build(as_params(arrays, np.float64)).data
    proj = rng.normal(size=out64.shape)

    def f(arrs):
        return float(np.sum(build(as_params(arrs, np.float64)).data * proj))

    t32 = as_params(arrays, np.float32)
    loss = nk.sum_all(nk.mul(build(t32), nk.Tensor(proj.astype(np.float32))))
    loss.backward()

    errors = {}
    for name in wrt:
        base = np.asarray(arrays[name], dtype=np.float64)
        numeric = np.zeros_like(base)
        for i in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[i] += h
            minus[i] -= h
            numeric[i] = (f({**arrays, name: plus}) - f({**arrays, name: minus})) / (2 * h)
        analytic = t32[name].grad
        analytic = np.zeros_like(numeric) if analytic is None else analytic.astype(np.float64)
        scale = max(np.abs(numeric).max(), 1e-8)
        errors[name] = float(np.abs(analytic - numeric).max() / scale)
    return errors


def relu(x):
    return np.maximum(x, 0.0)


def layer_norm(x, gamma, beta, eps=nk.LAYER_NORM_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def params64(named):
    return {n: p.data.astype(np.float64) for n, p in named}
