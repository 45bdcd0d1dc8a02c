"""Independent reference computations shared by the test modules."""

from __future__ import annotations

import numpy as np
from scipy import integrate as sint
from scipy.optimize import minimize_scalar
from scipy.special import ndtr

from seisoed.elastic_solver import Forcing, TimeConfig, assemble_operators, step_primal
from seisoed.grid_medium import MaterialField, build_grid

# manufactured problem: rho = 1, lam = 2, mu = 1 on the unit square
LAM, MU = 2.0, 1.0
CENTER, WIDTH = (0.5, 0.5), 0.08


def _bump(x1, x2):
    """Gaussian bump and its second derivatives (b, b11, b22, b12)."""
    d1, d2 = x1 - CENTER[0], x2 - CENTER[1]
    s2 = WIDTH**2
    b = np.exp(-(d1**2 + d2**2) / (2 * s2))
    b11 = b * (d1**2 / s2**2 - 1 / s2)
    b22 = b * (d2**2 / s2**2 - 1 / s2)
    b12 = b * d1 * d2 / s2**2
    return b, b11, b22, b12


def mms_exact(x1, x2, t):
    """u1 = b sin^4(pi t), u2 = b sin^4(pi t) / 2."""
    b = _bump(x1, x2)[0]
    s = np.sin(np.pi * t) ** 4
    return b * s, 0.5 * b * s


def mms_force(x1, x2, t):
    """Body force making ``mms_exact`` solve u_tt = div sigma(u) + f."""
    b, b11, b22, b12 = _bump(x1, x2)
    s = np.sin(np.pi * t) ** 4
    s_tt = 12 * np.pi**2 * np.sin(np.pi * t) ** 2 * np.cos(np.pi * t) ** 2 \
        - 4 * np.pi**2 * np.sin(np.pi * t) ** 4
    a = 0.5
    div1 = (LAM + 2 * MU) * b11 + MU * b22 + (LAM + MU) * a * b12
    div2 = MU * a * b11 + (LAM + 2 * MU) * a * b22 + (LAM + MU) * b12
    return b * s_tt - div1 * s, a * b * s_tt - div2 * s


def mms_error(n_cells: int, T: float = 0.5, probe: int = 20) -> float:
    """Max error over time at a fixed lattice of probe points."""
    h = 1.0 / n_cells
    grid = build_grid((0.0, 1.0, 0.0, 1.0), h)
    ops = assemble_operators(grid, MaterialField.uniform(grid, 1.0, np.sqrt(LAM + 2 * MU), 1.0))
    cfg = TimeConfig(0.25 * h, T)
    X1, X2 = np.meshgrid(grid.x1, grid.x2, indexing="ij")
    x1, x2 = X1.ravel(), X2.ravel()
    t = cfg.times
    f1 = np.stack([mms_force(x1, x2, tm)[0] for tm in t])
    f2 = np.stack([mms_force(x1, x2, tm)[1] for tm in t])
    values = np.concatenate([f1, f2], axis=1)[:, :, None]
    stride = n_cells // probe
    pi, pj = np.meshgrid(np.arange(0, grid.N1, stride), np.arange(0, grid.N2, stride),
                         indexing="ij")
    nodes = grid.flat_index(pi, pj).ravel()
    rec = np.concatenate([nodes, nodes + grid.N_h])
    samples, _ = step_primal(ops, Forcing(np.arange(ops.n), values), cfg, rec)
    e1 = np.stack([mms_exact(x1[nodes], x2[nodes], tm)[0] for tm in t])
    e2 = np.stack([mms_exact(x1[nodes], x2[nodes], tm)[1] for tm in t])
    exact = np.concatenate([e1, e2], axis=1)
    return float(np.max(np.abs(samples[:, :, 0] - exact)))


def refraction_time(src, rec, interface, v_top, v_bottom) -> float:
    """Fermat travel time from a source below a flat interface to a point above it."""
    (xs, zs), (xr, zr) = src, rec

    def time(x):
        return (np.hypot(x - xs, interface - zs) / v_bottom
                + np.hypot(xr - x, zr - interface) / v_top)

    lo, hi = sorted((xs, xr))
    return float(minimize_scalar(time, bounds=(lo, hi), method="bounded",
                                 options={"xatol": 1e-6}).fun)


def pulse_reflection(h=20.0, T=1.0):
    """Energy of the field reflected by the x1_max edge, relative to the incident pulse."""
    cp, cs, rho = 2000.0, 1000.0, 1000.0
    out = []
    for x1_max in (2000.0, 4000.0):
        grid = build_grid((0.0, x1_max, -2000.0, 0.0), h)
        ops = assemble_operators(grid, MaterialField.uniform(grid, rho, cp, cs))
        cfg = TimeConfig(0.5 * h / cp, T)
        X1, X2 = np.meshgrid(grid.x1, grid.x2, indexing="ij")

        def pulse(shift):
            g = np.exp(-((X1 - 1000.0 - shift) ** 2 + (X2 + 1000.0) ** 2) / (2 * 100.0**2))
            return np.concatenate([g.ravel(), np.zeros(grid.N_h)])

        keep = grid.flat_index(*np.nonzero(X1 <= 2000.0 + 1e-9))
        rec = np.concatenate([keep, keep + grid.N_h])
        forcing = Forcing(np.array([0]), np.zeros((cfg.N_t, 1, 1)))
        samples, _ = step_primal(ops, forcing, cfg, rec,
                                 initial=(pulse(-cp * cfg.dt), pulse(0.0)))
        out.append(samples[:, :, 0])
    small, big = out
    incident = np.sum(big[0] ** 2)
    reflected = np.sum((small[-1] - big[-1]) ** 2)
    return reflected / incident


def linear_gaussian_eig_uniform(width: float, s: float) -> float:
    """Exact EIG for y = theta + N(0, s^2) with theta ~ U(0, width).

    Mutual information ``H(y) - H(y | theta)`` with the marginal entropy of y
    integrated numerically.  ``s`` is the noise std of the sufficient
    statistic (sigma / sqrt(N) for N repeated observations).
    """
    def p(y):
        return (ndtr(y / s) - ndtr((y - width) / s)) / width

    def integrand(y):
        v = p(y)
        return -v * np.log(v) if v > 0 else 0.0

    lo, hi = -12 * s, width + 12 * s
    pts = [0.0, width]
    h_y = sint.quad(integrand, lo, hi, points=pts, limit=500, epsabs=1e-13, epsrel=1e-12)[0]
    return h_y - 0.5 * np.log(2 * np.pi * np.e * s * s)


def linear_gaussian_eig_gaussian(prior_var: float, noise_var: float, n: int = 1) -> float:
    """Closed-form EIG for n repeated observations of theta ~ N(0, prior_var)."""
    return 0.5 * np.log1p(prior_var * n / noise_var)
