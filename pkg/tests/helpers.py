"""Finite-difference oracles shared by the test modules."""

import numpy as np

from virtual_targets.autodiff import Tensor


def numerical_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x.copy())
        flat[i] = orig - h
        down = f(x.copy())
        flat[i] = orig
        g[i] = (up - down) / (2 * h)
    return grad


def numerical_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian of vector ``f`` at vector ``x``."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=1)


def rel_err(a, b):
    """Norm-wise relative error of ``a`` against reference ``b``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(b), np.linalg.norm(a), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_op(fn, *arrays, h=1e-5, tol=1e-4, seed=0):
    """Compare backprop of sum(fn(*inputs) * R) against central differences."""
    rng = np.random.default_rng(seed)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    weights = rng.normal(size=out.shape)
    (out * weights).sum().backward()
    worst = 0.0
    for i, a in enumerate(arrays):

        def scalar(x, i=i):
            args = [Tensor(b) for b in arrays]
            args[i] = Tensor(x)
            return float(np.sum(fn(*args).data * weights))

        num = numerical_grad(scalar, a, h)
        err = rel_err(tensors[i].grad, num)
        assert err < tol, f"input {i}: relative error {err:.2e}"
        worst = max(worst, err)
    return worst


def kink_margin(model, x, cond):
    """Per-row distance of the closest hidden ReLU pre-activation to zero.

    Finite differences of the NLL are only valid for rows where a small
    parameter step cannot flip a ReLU.
    """
    margin = np.full(len(x), np.inf)
    cols = np.array(x, dtype=np.float64)
    full = model.layers
    try:
        for k, layer in enumerate(full):
            for j in range(model.d):
                h = np.column_stack([cols[:, list(layer.order[:j])], cond])
                net = layer.nets[j]
                for w, b in zip(net.weights[:-1], net.biases[:-1]):
                    pre = h @ w + b
                    margin = np.minimum(margin, np.abs(pre).min(axis=1))
                    h = np.maximum(pre, 0.0)
            model.layers = full[: k + 1]
            cols, _ = model.forward(x, cond[:, 0], cond[:, 1:] if model.n_psi else None)
    finally:
        model.layers = full
    return margin


def kink_free_batch(model, rng, n, margin=1e-3):
    """``n`` rows of (x, cond) in the unit box whose ReLU inputs all stay ``margin`` from zero."""
    x = rng.uniform(-1, 1, (20 * n, model.d))
    cond = rng.uniform(-1, 1, (20 * n, model.n_cond))
    keep = np.nonzero(kink_margin(model, x, cond) > margin)[0][:n]
    assert len(keep) == n, "not enough kink-free rows"
    return x[keep], cond[keep]
