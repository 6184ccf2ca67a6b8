"""Shared test utilities: finite-difference gradient checking, quaternions."""

import numpy as np

from diffsurf.autodiff import Tensor


def quat_mul(p, q):
    """Hamilton product of quaternions in (w, x, y, z) order."""
    pw, px, py, pz = p
    qw, qx, qy, qz = q
    return np.array([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ])


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar-valued f at x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat_x, flat_g = x.ravel(), g.ravel()
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        fp = float(f(x))
        flat_x[i] = orig - h
        fm = float(f(x))
        flat_x[i] = orig
        flat_g[i] = (fp - fm) / (2.0 * h)
    return g


def gradcheck(build, x: np.ndarray, h: float = 1e-6, rtol: float = 1e-4, atol: float = 1e-7):
    """Compare reverse-mode and central-difference gradients of `build`.

    `build` maps a Tensor leaf to a scalar Tensor. Raises AssertionError on
    mismatch; returns the analytic gradient on success.
    """
    x = np.asarray(x, dtype=np.float64)
    leaf = Tensor(x.copy(), requires_grad=True)
    out = build(leaf)
    assert out.data.size == 1, "gradcheck expects a scalar output"
    out.backward()
    analytic = leaf.grad
    numeric = numeric_grad(lambda arr: float(build(Tensor(arr)).data), x, h=h)
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)
    return analytic


def fd_gradient_report(f, theta0: np.ndarray, *, h_scale: float = 1e-4,
                       curvature_tol: float = 1e-6) -> tuple:
    """Central differences with detection of nonsmooth coordinates.

    Returns (fd_gradient, excluded_mask, f0). `f` maps a flat float64 vector to
    a float. Step h_i = h_scale * max(1, |theta_i|). A coordinate is excluded
    when the symmetric second difference |f+ + f- - 2 f0| spikes, which flags
    kinks (sort-order flips, histogram-bin reassignment, support-mask changes)
    where one-sided derivatives legitimately disagree.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    f0 = float(f(theta0))
    n = theta0.size
    fd = np.zeros(n)
    excluded = np.zeros(n, dtype=bool)
    scale = max(1.0, abs(f0))
    for i in range(n):
        h = h_scale * max(1.0, abs(theta0[i]))
        tp = theta0.copy()
        tp[i] += h
        tm = theta0.copy()
        tm[i] -= h
        fp, fm = float(f(tp)), float(f(tm))
        fd[i] = (fp - fm) / (2.0 * h)
        excluded[i] = abs(fp + fm - 2.0 * f0) > curvature_tol * scale
    return fd, excluded, f0


def relative_errors(analytic: np.ndarray, fd: np.ndarray,
                    floor: float = 1e-8) -> np.ndarray:
    """Elementwise |a - b| / max(|a|, |b|, floor)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(fd, dtype=np.float64).ravel()
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
