"""Shared test utilities: finite-difference oracles and small fixtures."""

import numpy as np

from moeloc.autodiff import Tensor


def numerical_grad(f, x, h=1e-6):
    """Central finite differences of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_grad(build, x0, h=1e-6, rtol=1e-5, atol=1e-8):
    """Compare tape gradients of `build` against central differences.

    `build` maps a Tensor to a scalar Tensor. Returns (analytic, numeric).
    """
    x = Tensor(np.array(x0, dtype=np.float64), requires_grad=True)
    out = build(x)
    out.backward()
    analytic = x.grad.copy()

    numeric = numerical_grad(lambda a: build(Tensor(a)).item(), np.array(x0, dtype=np.float64), h=h)
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)
    return analytic, numeric


def max_rel_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_param_grads(loss_fn, params, rng, n_probe=4, h=1e-6, rtol=1e-4, atol=1e-8):
    """Spot-check tape gradients of trainable parameters against FD.

    `loss_fn` rebuilds the forward pass from the params' current values
    and returns a scalar Tensor. Probes `n_probe` random elements per
    parameter with central differences.
    """
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        idxs = rng.choice(flat.size, size=min(n_probe, flat.size), replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            hi = loss_fn().item()
            flat[i] = orig - h
            lo = loss_fn().item()
            flat[i] = orig
            fd = (hi - lo) / (2 * h)
            assert abs(gflat[i] - fd) <= atol + rtol * max(abs(fd), abs(gflat[i])), (
                gflat[i],
                fd,
            )
