"""Central finite-difference gradient checking shared by the test modules."""

import numpy as np

from hyperseg.tensor import backward


def numerical_grad(f, tensors, h=1e-5, sample=None, rng=None):
    """Central-difference gradients of scalar ``f()`` w.r.t. each tensor.

    ``f`` must recompute the loss from the tensors' current data. When
    ``sample`` is set, only that many randomly chosen coordinates per tensor
    are probed (the rest stay NaN and are skipped by ``max_rel_error``).
    """
    grads = []
    for t in tensors:
        g = np.full(t.data.shape, np.nan)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, sample, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            hi = f()
            flat[i] = old - h
            lo = f()
            flat[i] = old
            g.reshape(-1)[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_grad(f, tensors):
    for t in tensors:
        t.zero_grad()
    loss = f()
    backward(loss)
    return [t.grad.copy() for t in tensors]


def max_rel_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        mask = ~np.isnan(n)
        if not mask.any():
            continue
        diff = np.abs(a[mask] - n[mask])
        scale = np.maximum(np.maximum(np.abs(a[mask]), np.abs(n[mask])), floor)
        worst = max(worst, float((diff / scale).max()))
    return worst


def check_gradients(build_loss, params, h=1e-5, tol=1e-4, sample=None, rng=None):
    """Assert analytic gradients match central differences for all params.

    ``build_loss`` is a zero-argument callable returning a scalar Tensor; it is
    re-invoked for every probe so it must be a pure function of the params.
    """
    ana = analytic_grad(build_loss, params)
    num = numerical_grad(lambda: build_loss().item(), params, h=h, sample=sample, rng=rng)
    err = max_rel_error(ana, num)
    assert err <= tol, f"gradient mismatch: max relative error {err:.3e} > {tol}"
    return err
