"""Central finite-difference gradient checks."""

import numpy as np

from .tensor import Tensor


def numerical_grad(fn, tensors, which, h=1e-5, indices=None):
    """d fn / d tensors[which] at ``indices`` (flat) by central differences."""
    target = tensors[which]
    flat = target.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = []
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn(*tensors).data)
        flat[i] = orig - h
        down = float(fn(*tensors).data)
        flat[i] = orig
        out.append((up - down) / (2 * h))
    return np.array(out)


def analytic_grads(fn, tensors):
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    loss = fn(*tensors)
    loss.backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in tensors]


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(fn, *arrays, h=1e-5, seed=0, max_entries=None):
    """Max relative error between backprop and finite differences over all inputs.

    ``arrays`` are float64 numpy arrays; ``fn`` maps Tensors to a scalar Tensor.
    With ``max_entries`` only that many randomly chosen entries per input are probed.
    """
    tensors = [Tensor(np.array(a, dtype=np.float64)) for a in arrays]
    grads = analytic_grads(fn, tensors)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, t in enumerate(tensors):
        idx = np.arange(t.size)
        if max_entries is not None and t.size > max_entries:
            idx = np.sort(rng.choice(t.size, max_entries, replace=False))
        num = numerical_grad(fn, tensors, i, h, idx)
        worst = max(worst, relative_error(grads[i].reshape(-1)[idx], num))
    return worst
