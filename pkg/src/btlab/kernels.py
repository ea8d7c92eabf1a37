"""Hot numeric kernels: masked finite differences, energy densities, p-fluxes.

Two interchangeable backends operate on flattened node arrays plus
per-axis neighbor tables (built once per grid):

* a numba ``@njit`` backend (default when numba imports cleanly),
* a pure-numpy fallback.

Set ``BTLAB_BACKEND=numpy`` or ``BTLAB_BACKEND=numba`` to force one.
``benchmarks/bench_kernels.py`` compares the two.

Difference scheme codes (per node, per axis): 0 = no neighbor, 1 = centered,
2 = forward one-sided, 3 = backward one-sided.
"""

from __future__ import annotations

import os

import numpy as np

SCHEME_NONE = 0
SCHEME_CENTERED = 1
SCHEME_FORWARD = 2
SCHEME_BACKWARD = 3


def _pick_backend() -> str:
    forced = os.environ.get("BTLAB_BACKEND", "").strip().lower()
    if forced in ("numpy", "numba"):
        return forced
    if forced:
        raise ValueError(f"BTLAB_BACKEND must be 'numpy' or 'numba', got {forced!r}")
    try:
        import numba  # noqa: F401
        return "numba"
    except ImportError:
        return "numpy"


BACKEND = _pick_backend()


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------

def _gradient_numpy(values, nbr_plus, nbr_minus, scheme, inv_h):
    n_axes = nbr_plus.shape[0]
    n_nodes, d = values.shape
    out = np.zeros((n_nodes, n_axes, d))
    for i in range(n_axes):
        sc = scheme[i]
        vp = values[nbr_plus[i]]
        vm = values[nbr_minus[i]]
        cen = sc == SCHEME_CENTERED
        fwd = sc == SCHEME_FORWARD
        bwd = sc == SCHEME_BACKWARD
        out[cen, i, :] = (vp[cen] - vm[cen]) * (0.5 * inv_h)
        out[fwd, i, :] = (vp[fwd] - values[fwd]) * inv_h
        out[bwd, i, :] = (values[bwd] - vm[bwd]) * inv_h
    return out


def _adjoint_numpy(flux, nbr_plus, nbr_minus, scheme, inv_h):
    n_nodes, n_axes, d = flux.shape
    out = np.zeros((n_nodes, d))
    idx = np.arange(n_nodes)
    for i in range(n_axes):
        sc = scheme[i]
        f = flux[:, i, :]
        cen = sc == SCHEME_CENTERED
        fwd = sc == SCHEME_FORWARD
        bwd = sc == SCHEME_BACKWARD
        np.add.at(out, nbr_plus[i][cen], f[cen] * (0.5 * inv_h))
        np.add.at(out, nbr_minus[i][cen], f[cen] * (-0.5 * inv_h))
        np.add.at(out, nbr_plus[i][fwd], f[fwd] * inv_h)
        np.add.at(out, idx[fwd], f[fwd] * (-inv_h))
        np.add.at(out, idx[bwd], f[bwd] * inv_h)
        np.add.at(out, nbr_minus[i][bwd], f[bwd] * (-inv_h))
    return out


def _density_euclid_numpy(grad):
    return np.einsum("xid,xid->x", grad, grad)


def _density_metric_numpy(grad, ginv):
    return np.einsum("xij,xid,xjd->x", ginv, grad, grad)


def _pflux_euclid_numpy(grad, e, p, delta):
    fac = p * (e + delta * delta) ** ((p - 2.0) / 2.0)
    return grad * fac[:, None, None]


def _pflux_metric_numpy(grad, ginv, e, p, delta):
    fac = p * (e + delta * delta) ** ((p - 2.0) / 2.0)
    return np.einsum("xij,xjd->xid", ginv, grad) * fac[:, None, None]


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

if BACKEND == "numba":
    from numba import njit

    @njit(cache=True)
    def _gradient_numba(values, nbr_plus, nbr_minus, scheme, inv_h):
        n_axes = nbr_plus.shape[0]
        n_nodes, d = values.shape
        out = np.zeros((n_nodes, n_axes, d))
        half = 0.5 * inv_h
        for i in range(n_axes):
            for x in range(n_nodes):
                sc = scheme[i, x]
                if sc == SCHEME_NONE:
                    continue
                xp = nbr_plus[i, x]
                xm = nbr_minus[i, x]
                if sc == SCHEME_CENTERED:
                    for c in range(d):
                        out[x, i, c] = (values[xp, c] - values[xm, c]) * half
                elif sc == SCHEME_FORWARD:
                    for c in range(d):
                        out[x, i, c] = (values[xp, c] - values[x, c]) * inv_h
                else:
                    for c in range(d):
                        out[x, i, c] = (values[x, c] - values[xm, c]) * inv_h
        return out

    @njit(cache=True)
    def _adjoint_numba(flux, nbr_plus, nbr_minus, scheme, inv_h):
        n_nodes, n_axes, d = flux.shape
        out = np.zeros((n_nodes, d))
        half = 0.5 * inv_h
        for i in range(n_axes):
            for x in range(n_nodes):
                sc = scheme[i, x]
                if sc == SCHEME_NONE:
                    continue
                xp = nbr_plus[i, x]
                xm = nbr_minus[i, x]
                if sc == SCHEME_CENTERED:
                    for c in range(d):
                        f = flux[x, i, c] * half
                        out[xp, c] += f
                        out[xm, c] -= f
                elif sc == SCHEME_FORWARD:
                    for c in range(d):
                        f = flux[x, i, c] * inv_h
                        out[xp, c] += f
                        out[x, c] -= f
                else:
                    for c in range(d):
                        f = flux[x, i, c] * inv_h
                        out[x, c] += f
                        out[xm, c] -= f
        return out

    @njit(cache=True)
    def _density_euclid_numba(grad):
        n_nodes, n_axes, d = grad.shape
        out = np.zeros(n_nodes)
        for x in range(n_nodes):
            acc = 0.0
            for i in range(n_axes):
                for c in range(d):
                    acc += grad[x, i, c] * grad[x, i, c]
            out[x] = acc
        return out

    @njit(cache=True)
    def _density_metric_numba(grad, ginv):
        n_nodes, n_axes, d = grad.shape
        out = np.zeros(n_nodes)
        for x in range(n_nodes):
            acc = 0.0
            for i in range(n_axes):
                for j in range(n_axes):
                    gij = ginv[x, i, j]
                    if gij == 0.0:
                        continue
                    dot = 0.0
                    for c in range(d):
                        dot += grad[x, i, c] * grad[x, j, c]
                    acc += gij * dot
            out[x] = acc
        return out

    @njit(cache=True)
    def _pflux_euclid_numba(grad, e, p, delta):
        n_nodes, n_axes, d = grad.shape
        out = np.empty_like(grad)
        for x in range(n_nodes):
            fac = p * (e[x] + delta * delta) ** ((p - 2.0) / 2.0)
            for i in range(n_axes):
                for c in range(d):
                    out[x, i, c] = grad[x, i, c] * fac
        return out

    @njit(cache=True)
    def _pflux_metric_numba(grad, ginv, e, p, delta):
        n_nodes, n_axes, d = grad.shape
        out = np.zeros_like(grad)
        for x in range(n_nodes):
            fac = p * (e[x] + delta * delta) ** ((p - 2.0) / 2.0)
            for i in range(n_axes):
                for c in range(d):
                    acc = 0.0
                    for j in range(n_axes):
                        acc += ginv[x, i, j] * grad[x, j, c]
                    out[x, i, c] = acc * fac
        return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def gradient_op(values, nbr_plus, nbr_minus, scheme, inv_h):
    """Masked finite-difference gradient, shape (nodes, axes, d)."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    if BACKEND == "numba":
        return _gradient_numba(values, nbr_plus, nbr_minus, scheme, float(inv_h))
    return _gradient_numpy(values, nbr_plus, nbr_minus, scheme, float(inv_h))


def adjoint_op(flux, nbr_plus, nbr_minus, scheme, inv_h):
    """Exact adjoint of :func:`gradient_op`, shape (nodes, d)."""
    flux = np.ascontiguousarray(flux, dtype=np.float64)
    if BACKEND == "numba":
        return _adjoint_numba(flux, nbr_plus, nbr_minus, scheme, float(inv_h))
    return _adjoint_numpy(flux, nbr_plus, nbr_minus, scheme, float(inv_h))


def energy_density_sq(grad, ginv=None):
    """Pointwise squared gradient norm |du|_g^2 = g^{ij} <d_i u, d_j u>."""
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    if ginv is None:
        if BACKEND == "numba":
            return _density_euclid_numba(grad)
        return _density_euclid_numpy(grad)
    ginv = np.ascontiguousarray(ginv, dtype=np.float64)
    if BACKEND == "numba":
        return _density_metric_numba(grad, ginv)
    return _density_metric_numpy(grad, ginv)


def p_flux(grad, e, p, delta=0.0, ginv=None):
    """Derivative of (e + delta^2)^{p/2} with respect to the gradient entries."""
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    e = np.ascontiguousarray(e, dtype=np.float64)
    if ginv is None:
        if BACKEND == "numba":
            return _pflux_euclid_numba(grad, e, float(p), float(delta))
        return _pflux_euclid_numpy(grad, e, float(p), float(delta))
    ginv = np.ascontiguousarray(ginv, dtype=np.float64)
    if BACKEND == "numba":
        return _pflux_metric_numba(grad, ginv, e, float(p), float(delta))
    return _pflux_metric_numpy(grad, ginv, e, float(p), float(delta))
