"""Central finite-difference helpers shared by the gradient test suites."""

import numpy as np


def finite_diff(f, x, h=1e-5):
    """Central-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-3, atol=1e-7, label=""):
    """Relative check with an absolute floor for near-zero entries."""
    a = np.asarray(analytic, dtype=float).reshape(-1)
    n = np.asarray(numeric, dtype=float).reshape(-1)
    assert a.shape == n.shape, f"{label}: shape {a.shape} vs {n.shape}"
    denom = np.maximum(np.abs(a), np.abs(n))
    err = np.abs(a - n)
    bad = err > rtol * denom + atol
    if np.any(bad):
        i = int(np.argmax(err - rtol * denom - atol))
        raise AssertionError(
            f"{label}: gradient mismatch at flat index {i}: "
            f"analytic={a[i]:.10g} numeric={n[i]:.10g} abs err={err[i]:.3g}")
