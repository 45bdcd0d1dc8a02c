"""Point moment-tensor source on the grid.

The source is ``S(t) M grad(delta(x - x_s))`` with a Gaussian time function
and a fourth-order, twice continuously differentiable regularisation of the
Dirac distribution and its derivative.  Everything needed by the Hessian
assembly (first and second derivatives of the discrete forcing with respect to
the seven source parameters) is computed analytically here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as npoly

from .errors import DomainError
from .grid_medium import Grid

PARAM_NAMES = ("x1s", "x2s", "t_s", "omega_s", "m11", "m12", "m22")
N_THETA = 7
LOCATION = (0, 1)
TIMING = (2, 3)
MOMENT = (4, 5, 6)
_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class SourceParams:
    x1s: float
    x2s: float
    t_s: float
    omega_s: float
    m11: float
    m12: float
    m22: float

    def __post_init__(self):
        if not self.omega_s > 0:
            raise DomainError(f"omega_s must be positive, got {self.omega_s}")

    def to_array(self) -> np.ndarray:
        return np.array([self.x1s, self.x2s, self.t_s, self.omega_s,
                         self.m11, self.m12, self.m22], dtype=float)

    @classmethod
    def from_array(cls, theta) -> "SourceParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (N_THETA,):
            raise DomainError(f"expected {N_THETA} source parameters, got shape {theta.shape}")
        return cls(*(float(v) for v in theta))


def as_params(theta) -> SourceParams:
    return theta if isinstance(theta, SourceParams) else SourceParams.from_array(theta)


# --------------------------------------------------------------------------
# time function

def time_function(t, t_s: float, omega_s: float):
    """Gaussian source time function and its parameter derivatives.

    ``t``, ``t_s`` and ``omega_s`` broadcast against each other.

    Returns
    -------
    value : ndarray
        ``omega/sqrt(2 pi) * exp(-omega**2 (t - t_s)**2 / 2)``.
    grad : ndarray, shape ``t.shape + (2,)``
        Derivatives with respect to ``(t_s, omega_s)``.
    hess : ndarray, shape ``t.shape + (2, 2)``
    """
    w = np.asarray(omega_s, dtype=float)
    if not np.all(w > 0):
        raise DomainError(f"omega_s must be positive, got {omega_s}")
    t = np.asarray(t, dtype=float)
    tau = t - t_s
    s = w / _SQRT_2PI * np.exp(-0.5 * w**2 * tau**2)
    g_ts = w**2 * tau
    g_w = 1.0 / w - w * tau**2
    grad = np.stack([s * g_ts, s * g_w], axis=-1)
    h_tt = s * (w**4 * tau**2 - w**2)
    h_tw = s * (3.0 * w * tau - w**3 * tau**3)
    h_ww = s * (g_w**2 - 1.0 / w**2 - tau**2)
    hess = np.stack([np.stack([h_tt, h_tw], -1), np.stack([h_tw, h_ww], -1)], -2)
    return s, grad, hess


# --------------------------------------------------------------------------
# regularised delta stencils
#
# Coefficients in ascending powers of alpha, for the six nodes k-2 .. k+3.

def _poly(*coeffs):
    out = np.zeros(10)
    out[: len(coeffs)] = coeffs
    return out


_P = _poly(0, 0, 0, 0, 0, 5 / 3, -7 / 24, -17 / 12, 9 / 8, -1 / 4)
_R = _poly(0, 0, 0, 0, -25 / 12, -3 / 4, 59 / 12, -4, 1)

_DELTA = np.array([
    _poly(0, 1 / 12, -1 / 24, -1 / 12, -19 / 24) + _P,
    _poly(0, -2 / 3, 2 / 3, 1 / 6, 4) - 5 * _P,
    _poly(1, 0, -5 / 4, 0, -97 / 12) + 10 * _P,
    _poly(0, 2 / 3, 2 / 3, -1 / 6, 49 / 6) - 10 * _P,
    _poly(0, -1 / 12, -1 / 24, 1 / 12, -33 / 8) + 5 * _P,
    _poly(0, 0, 0, 0, 5 / 6) - _P,
])

_DELTA_PRIME = np.array([
    _poly(-1 / 12, 1 / 12, 1 / 4, 2 / 3) + _R,
    _poly(2 / 3, -4 / 3, -1 / 2, -7 / 2) - 5 * _R,
    _poly(0, 5 / 2, 0, 22 / 3) + 10 * _R,
    _poly(-2 / 3, -4 / 3, 1 / 2, -23 / 3) - 10 * _R,
    _poly(1 / 12, 1 / 12, -1 / 4, 4) + 5 * _R,
    _poly(0, 0, 0, -5 / 6) - _R,
])

_TABLES = {0: _DELTA, 1: _DELTA_PRIME}


@dataclass(frozen=True)
class DeltaStencil:
    """Six-point stencil for ``delta`` (order 0) or ``delta'`` (order 1).

    ``weights[d]`` holds the ``d``-th derivative of the nodal weights with
    respect to the source coordinate, for nodes ``anchor-2 .. anchor+3``.
    """

    anchor: int
    alpha: float
    order: int
    weights: np.ndarray  # shape (3, 6)

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.anchor - 2, self.anchor + 4)


def _anchor(x_s: float, axis_origin: float, h: float, n_nodes: int | None):
    pos = (x_s - axis_origin) / h
    k = int(np.floor(pos))
    alpha = pos - k
    if alpha >= 1.0:
        k, alpha = k + 1, 0.0
    lo_ok = pos >= 3.0 - 1e-9
    hi_ok = n_nodes is None or pos <= (n_nodes - 1) - 3.0 + 1e-9
    if not (lo_ok and hi_ok):
        raise DomainError(
            f"source coordinate {x_s} is closer than 3h to the boundary of the axis"
        )
    return k, alpha


def _stencil(x_s, axis_origin, h, order, n_nodes=None) -> DeltaStencil:
    k, alpha = _anchor(float(x_s), float(axis_origin), float(h), n_nodes)
    table = _TABLES[order]
    scale = h ** -(order + 1)
    w = np.empty((3, 6))
    for d in range(3):
        coeffs = npoly.polyder(table, m=d, axis=1) if d else table
        # d/dx_s = (1/h) d/dalpha
        w[d] = npoly.polyval(alpha, coeffs.T) * scale / h**d
    return DeltaStencil(k, alpha, order, w)


def delta_stencil(x_s, axis_origin, h, n_nodes=None) -> DeltaStencil:
    """Fourth-order, C2-in-position discretisation of ``delta(x - x_s)``."""
    return _stencil(x_s, axis_origin, h, 0, n_nodes)


def delta_prime_stencil(x_s, axis_origin, h, n_nodes=None) -> DeltaStencil:
    """Fourth-order, C2-in-position discretisation of ``delta'(x - x_s)``."""
    return _stencil(x_s, axis_origin, h, 1, n_nodes)


# --------------------------------------------------------------------------
# two-dimensional forcing


@dataclass(frozen=True)
class SourcePattern:
    """Spatial part of the discrete forcing on the 6x6 support patch.

    The forcing at time ``t`` is ``S(t) * G`` where ``G`` depends on the
    location and moment parameters only.

    Attributes
    ----------
    nodes : (36,) flat grid indices of the patch
    G : (2, 36) pattern for components 1 and 2
    dG : (2, 36, 7) first derivatives (zero in the timing columns)
    d2G : (2, 36, 7, 7) second derivatives
    """

    theta: np.ndarray
    nodes: np.ndarray
    G: np.ndarray
    dG: np.ndarray
    d2G: np.ndarray


def source_pattern(theta, grid: Grid) -> SourcePattern:
    p = as_params(theta)
    ax = [_stencil(p.x1s, grid.x1_min, grid.h, o, grid.N1) for o in (0, 1)]
    ay = [_stencil(p.x2s, grid.x2_min, grid.h, o, grid.N2) for o in (0, 1)]
    # (moment index, x1 stencil order, x2 stencil order) per component
    terms = (((4, 1, 0), (5, 0, 1)), ((5, 1, 0), (6, 0, 1)))
    m = p.to_array()
    G = np.zeros((2, 6, 6))
    dG = np.zeros((2, 6, 6, N_THETA))
    d2G = np.zeros((2, 6, 6, N_THETA, N_THETA))
    for comp, comp_terms in enumerate(terms):
        for mi, ox, oy in comp_terms:
            X, Y = ax[ox].weights, ay[oy].weights
            mc = m[mi]
            outer = lambda a, b: np.outer(X[a], Y[b])
            G[comp] += mc * outer(0, 0)
            dG[comp, :, :, 0] += mc * outer(1, 0)
            dG[comp, :, :, 1] += mc * outer(0, 1)
            dG[comp, :, :, mi] += outer(0, 0)
            d2G[comp, :, :, 0, 0] += mc * outer(2, 0)
            d2G[comp, :, :, 1, 1] += mc * outer(0, 2)
            d2G[comp, :, :, 0, 1] += mc * outer(1, 1)
            d2G[comp, :, :, 1, 0] += mc * outer(1, 1)
            d2G[comp, :, :, 0, mi] += outer(1, 0)
            d2G[comp, :, :, mi, 0] += outer(1, 0)
            d2G[comp, :, :, 1, mi] += outer(0, 1)
            d2G[comp, :, :, mi, 1] += outer(0, 1)
    ii, jj = np.meshgrid(ax[0].nodes, ay[0].nodes, indexing="ij")
    nodes = grid.flat_index(ii, jj).ravel()
    return SourcePattern(m, nodes, G.reshape(2, 36), dG.reshape(2, 36, N_THETA),
                         d2G.reshape(2, 36, N_THETA, N_THETA))


def _scatter(grid: Grid, nodes, values):
    out = np.zeros((grid.N_h,) + values.shape[1:])
    out[nodes] = values
    return out


def discretize_source(theta, grid: Grid, t: float):
    """Nodal force vectors ``(f1, f2)`` at time ``t`` (each of length ``N_h``)."""
    p = as_params(theta)
    pat = source_pattern(p, grid)
    s = time_function(t, p.t_s, p.omega_s)[0]
    return tuple(_scatter(grid, pat.nodes, s * pat.G[k]) for k in range(2))


def forcing_jacobian(pat: SourcePattern, t):
    """Patch-local derivative of the forcing, shape ``t.shape + (2, 36, 7)``."""
    p = as_params(pat.theta)
    s, ds, _ = time_function(t, p.t_s, p.omega_s)
    s = np.asarray(s)[..., None, None, None]
    jac = s * pat.dG
    jac = np.broadcast_to(jac, np.shape(t) + pat.dG.shape).copy()
    for col, tcol in zip(TIMING, range(2)):
        jac[..., col] = ds[..., tcol, None, None] * pat.G
    return jac


def forcing_hessian(pat: SourcePattern, t):
    """Patch-local second derivative, shape ``t.shape + (2, 36, 7, 7)``."""
    p = as_params(pat.theta)
    s, ds, d2s = time_function(t, p.t_s, p.omega_s)
    out = np.asarray(s)[..., None, None, None, None] * pat.d2G
    out = np.broadcast_to(out, np.shape(t) + pat.d2G.shape).copy()
    for a, ta in zip(TIMING, range(2)):
        for b in range(N_THETA):
            if b in TIMING:
                out[..., a, b] = d2s[..., ta, b - 2, None, None] * pat.G
            else:
                val = ds[..., ta, None, None] * pat.dG[..., b]
                out[..., a, b] = val
                out[..., b, a] = val
    return out


def source_jacobian(theta, grid: Grid, t: float):
    """Full-grid ``d f_k / d theta`` as an array of shape ``(2, N_h, 7)``."""
    pat = source_pattern(theta, grid)
    jac = forcing_jacobian(pat, float(t))
    return np.stack([_scatter(grid, pat.nodes, jac[k]) for k in range(2)])


def source_hessian_rows(theta, grid: Grid, t: float):
    """Second-derivative blocks on the support patch.

    Returns the flat node indices (36,) and an array ``(2, 36, 7, 7)``;
    nodes outside the patch have identically zero blocks.
    """
    pat = source_pattern(theta, grid)
    return pat.nodes, forcing_hessian(pat, float(t))
