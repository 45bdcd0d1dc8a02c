"""Second-order finite differences for 2D isotropic elastodynamics.

Semi-discrete system, with ``u = [u1; u2]`` stacked over all nodes::

    I1 u'' + I2 u' = A u + C f

``A = -M^{-1} K`` where ``K`` is the Hessian of a discrete strain energy and
``M`` the lumped (trapezoidal) mass.  Interior rows reduce to the classical
scheme

    nu u1'' = D+x(A D-x u1) + D+y(mu D-y u1) + D0x(lam D0y u2) + D0y(mu D0x u2) + f1

(and symmetrically for ``u2``), with coefficients averaged from the cells
around each edge.  On the free surface the traction-free condition is a
natural boundary condition of the energy; on absorbing edges the traction is
replaced by the first-order characteristic (dashpot) law
``sigma.n = -diag(nu cp, nu cs) u'`` in the (normal, tangential) frame, which
gives the diagonal damping ``I2``.  Time stepping uses central differences
for both time derivatives.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, DomainError, InstabilityError
from .grid_medium import Grid, MaterialField

SIDES = ("left", "right", "bottom", "top")


@dataclass(frozen=True)
class Boundaries:
    left: str = "absorbing"
    right: str = "absorbing"
    bottom: str = "absorbing"
    top: str = "free"

    def __post_init__(self):
        for side in SIDES:
            if getattr(self, side) not in ("free", "absorbing"):
                raise ConfigError(f"boundary '{side}' must be 'free' or 'absorbing'")


@dataclass(frozen=True)
class DiscreteOperators:
    """Assembled operators acting on stacked vectors ``[u1; u2]``.

    ``A`` is the block matrix ``[[A1, A2], [B1, B2]]``; ``I1``, ``I2`` and
    ``C`` are diagonal and stored as vectors.
    """

    grid: Grid
    material: MaterialField
    boundaries: Boundaries
    K: sp.csr_matrix
    A: sp.csr_matrix
    AT: sp.csr_matrix
    mass: np.ndarray
    damping: np.ndarray
    I1: np.ndarray
    I2: np.ndarray
    C: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self) -> int:
        return 2 * self.grid.N_h

    def block(self, name: str) -> sp.csr_matrix:
        nh = self.grid.N_h
        r, c = {"A1": (0, 0), "A2": (0, 1), "B1": (1, 0), "B2": (1, 1)}[name]
        return self.A[r * nh:(r + 1) * nh, c * nh:(c + 1) * nh]

    @property
    def absorbing_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.I2[: self.grid.N_h] > 0)

    def spectral_radius(self) -> float:
        """Largest eigenvalue of ``M^{-1} K`` (the undamped generator)."""
        if "rho" not in self._cache:
            s = 1.0 / np.sqrt(self.mass)
            sym = sp.diags(s) @ self.K @ sp.diags(s)
            if sym.shape[0] <= 400:
                rho = float(np.linalg.eigvalsh(sym.toarray())[-1])
            else:
                # fixed start vector keeps the limit reproducible
                v0 = np.cos(np.arange(sym.shape[0]) * 0.7)
                rho = float(spla.eigsh(sym, k=1, which="LA", tol=1e-8, v0=v0,
                                       return_eigenvectors=False)[0])
            self._cache["rho"] = rho
        return self._cache["rho"]

    def stable_dt(self) -> float:
        """Stability limit of the central-difference scheme, ``2/sqrt(rho)``."""
        return 2.0 / math.sqrt(self.spectral_radius())

    def max_dt(self, cfl: float = 0.9) -> float:
        return cfl * self.stable_dt()


def _difference_matrices(n1: int, n2: int, h: float):
    """Edge differences and cell-averaged derivatives on an ``n1 x n2`` grid."""
    e1 = sp.diags([-np.ones(n1 - 1), np.ones(n1 - 1)], [0, 1], shape=(n1 - 1, n1)) / h
    e2 = sp.diags([-np.ones(n2 - 1), np.ones(n2 - 1)], [0, 1], shape=(n2 - 1, n2)) / h
    a1 = sp.diags([np.full(n1 - 1, 0.5), np.full(n1 - 1, 0.5)], [0, 1], shape=(n1 - 1, n1))
    a2 = sp.diags([np.full(n2 - 1, 0.5), np.full(n2 - 1, 0.5)], [0, 1], shape=(n2 - 1, n2))
    i1, i2 = sp.identity(n1), sp.identity(n2)
    dx = sp.kron(e1, i2, format="csr")       # x-edges (n1-1, n2)
    dy = sp.kron(i1, e2, format="csr")       # y-edges (n1, n2-1)
    cx = sp.kron(e1, a2, format="csr")       # cell x-derivative
    cy = sp.kron(a1, e2, format="csr")       # cell y-derivative
    # cell -> adjacent edge averaging with half weights (trapezoid across edges)
    sx = sp.kron(sp.identity(n1 - 1), a2.T, format="csr")   # x-edges <- cells
    sy = sp.kron(a1.T, sp.identity(n2 - 1), format="csr")   # y-edges <- cells
    cell_avg = sp.kron(a1, a2, format="csr")
    return dx, dy, cx, cy, sx, sy, cell_avg


def assemble_operators(grid: Grid, material: MaterialField,
                       boundaries: Boundaries | None = None) -> DiscreteOperators:
    """Assemble the semi-discrete elastic operators on ``grid``."""
    boundaries = boundaries or Boundaries()
    n1, n2, h = grid.N1, grid.N2, grid.h
    dx, dy, cx, cy, sx, sy, cell_avg = _difference_matrices(n1, n2, h)
    lam = material.lam.ravel()
    mu = material.mu.ravel()
    lam_c = cell_avg @ lam
    mu_c = cell_avg @ mu
    big_c = lam_c + 2 * mu_c
    area = h * h
    # edge weights = area * mean of adjacent cell coefficients (half at boundary rows)
    wA_x, wmu_x = area * (sx @ big_c), area * (sx @ mu_c)
    wA_y, wmu_y = area * (sy @ big_c), area * (sy @ mu_c)
    K11 = dx.T @ sp.diags(wA_x) @ dx + dy.T @ sp.diags(wmu_y) @ dy
    K22 = dx.T @ sp.diags(wmu_x) @ dx + dy.T @ sp.diags(wA_y) @ dy
    K12 = area * (cx.T @ sp.diags(lam_c) @ cy + cy.T @ sp.diags(mu_c) @ cx)
    K = sp.bmat([[K11, K12], [K12.T, K22]], format="csr")
    K = ((K + K.T) * 0.5).tocsr()

    w1 = np.ones(n1)
    w1[[0, -1]] = 0.5
    w2 = np.ones(n2)
    w2[[0, -1]] = 0.5
    node_area = area * np.outer(w1, w2).ravel()
    rho = material.density.ravel()
    mass = np.tile(rho * node_area, 2)

    # dashpot: normal component impedance nu*cp, tangential nu*cs
    zp = (rho * material.cp.ravel()).reshape(n1, n2)
    zs = (rho * material.cs.ravel()).reshape(n1, n2)
    d1 = np.zeros((n1, n2))
    d2 = np.zeros((n1, n2))
    if boundaries.left == "absorbing":
        d1[0, :] += h * w2 * zp[0, :]
        d2[0, :] += h * w2 * zs[0, :]
    if boundaries.right == "absorbing":
        d1[-1, :] += h * w2 * zp[-1, :]
        d2[-1, :] += h * w2 * zs[-1, :]
    if boundaries.bottom == "absorbing":
        d1[:, 0] += h * w1 * zs[:, 0]
        d2[:, 0] += h * w1 * zp[:, 0]
    if boundaries.top == "absorbing":
        d1[:, -1] += h * w1 * zs[:, -1]
        d2[:, -1] += h * w1 * zp[:, -1]
    damping = np.concatenate([d1.ravel(), d2.ravel()])

    inv_mass = 1.0 / mass
    A = (-sp.diags(inv_mass) @ K).tocsr()
    return DiscreteOperators(
        grid=grid, material=material, boundaries=boundaries, K=K, A=A,
        AT=A.T.tocsr(), mass=mass, damping=damping,
        I1=np.ones(2 * grid.N_h), I2=damping * inv_mass,
        C=np.tile(1.0 / rho, 2),
    )


# --------------------------------------------------------------------------
# time configuration and receivers


@dataclass(frozen=True)
class TimeConfig:
    dt: float
    T: float

    def __post_init__(self):
        if not (self.dt > 0 and self.T > 0):
            raise ConfigError("dt and T must be positive")
        ratio = self.T / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ConfigError(f"T={self.T} is not a multiple of dt={self.dt}")

    @property
    def N_t(self) -> int:
        return 1 + round(self.T / self.dt)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N_t) * self.dt


def check_cfl(ops: DiscreteOperators, config: TimeConfig, cfl: float = 0.9) -> None:
    limit = ops.max_dt(cfl)
    if config.dt > limit * (1 + 1e-12):
        raise ConfigError(
            f"time step dt={config.dt:g} violates the CFL limit {limit:.6g} "
            f"({cfl:g} x scheme limit {ops.stable_dt():.6g})"
        )


@dataclass(frozen=True)
class Receivers:
    """Receiver stations snapped to grid nodes."""

    positions: np.ndarray       # requested (N_R, 2)
    nodes: np.ndarray           # flat node index per receiver
    snap: np.ndarray            # snap distance per receiver

    @property
    def N_R(self) -> int:
        return len(self.nodes)

    def dof(self, n_h: int) -> np.ndarray:
        """Indices into the stacked ``[u1; u2]`` vector, shape ``(N_R, 2)``."""
        return np.stack([self.nodes, self.nodes + n_h], axis=1)


def place_receivers(grid: Grid, positions, tol: float = 1e-6) -> Receivers:
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    nodes, snaps = [], []
    for x1, x2 in pos:
        if not (grid.x1_min - tol <= x1 <= grid.x1_max + tol
                and grid.x2_min - tol <= x2 <= grid.x2_max + tol):
            raise DomainError(f"receiver ({x1}, {x2}) lies outside the grid")
        i, j, d = grid.nearest_node(x1, x2)
        if d > tol * grid.h:
            warnings.warn(f"receiver ({x1:g}, {x2:g}) snapped to node by {d:g} m", stacklevel=2)
        nodes.append(int(grid.flat_index(i, j)))
        snaps.append(d)
    return Receivers(pos, np.array(nodes, dtype=int), np.array(snaps))


def surface_receivers(grid: Grid, x1_positions) -> Receivers:
    x1 = np.asarray(x1_positions, dtype=float).ravel()
    return place_receivers(grid, np.column_stack([x1, np.full_like(x1, grid.x2_max)]))


@dataclass(frozen=True)
class ReceiverSeries:
    """Waveforms at the receivers: ``data[r, component, m]``."""

    data: np.ndarray
    dt: float
    positions: np.ndarray | None = None

    @property
    def N_R(self) -> int:
        return self.data.shape[0]

    @property
    def N_t(self) -> int:
        return self.data.shape[2]

    @property
    def T(self) -> float:
        return (self.N_t - 1) * self.dt

    def dump(self, path) -> None:
        """Write the little-endian binary layout ``N_R, N_t, dt`` + samples."""
        with open(path, "wb") as fh:
            fh.write(struct.pack("<qqd", self.N_R, self.N_t, self.dt))
            fh.write(np.ascontiguousarray(self.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ReceiverSeries":
        raw = Path(path).read_bytes()
        n_r, n_t, dt = struct.unpack("<qqd", raw[:24])
        data = np.frombuffer(raw[24:], dtype="<f8").reshape(n_r, 2, n_t).copy()
        return cls(data, dt)


@dataclass(frozen=True)
class Forcing:
    """Space-time forcing supported on a subset of the stacked dofs.

    ``values[m, i, k]`` is the force at dof ``index[i]`` and time level ``m``
    for right-hand side ``k``; several right-hand sides are solved at once.
    """

    index: np.ndarray
    values: np.ndarray

    @property
    def n_rhs(self) -> int:
        return self.values.shape[2]


def _as_columns(values):
    values = np.asarray(values, dtype=float)
    return values[..., None] if values.ndim == 2 else values


def _finite_or_raise(arr, step):
    with np.errstate(invalid="ignore", over="ignore"):
        total = arr.sum()
    if not np.isfinite(total):
        raise InstabilityError(step)


def step_primal(ops: DiscreteOperators, forcing: Forcing, config: TimeConfig,
                record=None, store_history: bool = False, initial=None):
    """March the primal recursion, by default from zero initial data.

    Parameters
    ----------
    record : array of stacked-dof indices, optional
        Dofs sampled at every time level (receivers).
    store_history : bool
        Also return the full field ``(N_t, 2 N_h, k)``.
    initial : (u_prev, u0), optional
        Displacement at levels -1 and 0, each ``(2 N_h,)`` or ``(2 N_h, k)``.

    Returns
    -------
    samples : ndarray (N_t, len(record), k) or None
    history : ndarray or None
    """
    n, nt, dt = ops.n, config.N_t, config.dt
    k = forcing.n_rhs
    if forcing.values.shape[0] < nt - 1:
        raise DomainError("forcing has fewer time levels than the run needs")
    dt2 = dt * dt
    inv_d = (1.0 / (ops.I1 + 0.5 * dt * ops.I2))[:, None]
    c_prev = (ops.I1 - 0.5 * dt * ops.I2)[:, None]
    c_now = 2.0 * ops.I1[:, None]
    scaled_force = dt2 * ops.C[forcing.index][None, :, None] * forcing.values
    rec = None if record is None else np.asarray(record).ravel()
    samples = None if rec is None else np.zeros((nt, len(rec), k))
    history = np.zeros((nt, n, k)) if store_history else None
    u_prev = np.zeros((n, k))
    u = np.zeros((n, k))
    if initial is not None:
        u_prev = u_prev + np.asarray(initial[0], dtype=float).reshape(n, -1)
        u = u + np.asarray(initial[1], dtype=float).reshape(n, -1)
    if samples is not None:
        samples[0] = u[rec]
    if history is not None:
        history[0] = u
    A = ops.A
    for m in range(nt - 1):
        rhs = c_now * u - c_prev * u_prev + dt2 * (A @ u)
        rhs[forcing.index] += scaled_force[m]
        u_next = rhs * inv_d
        _finite_or_raise(u_next, m + 1)
        u_prev, u = u, u_next
        if samples is not None:
            samples[m + 1] = u[rec]
        if history is not None:
            history[m + 1] = u
    return samples, history


def solve_dual(ops: DiscreteOperators, residual_index, residual_grad,
               config: TimeConfig, store=None):
    """Backward (adjoint) recursion driven by ``grad_u L`` at each time level.

    Solves, for ``m = N_t-1 .. 1``::

        (I1/dt^2 + I2/(2dt)) phi^{m-1} = (2 I1/dt^2 + A^T) phi^m
                                         - (I1/dt^2 - I2/(2dt)) phi^{m+1} - grad L^m

    with ``phi^{N_t} = phi^{N_t-1} = 0``.  With this sign convention
    ``grad_theta L = -sum_m phi^m . C f_theta^m``.

    Parameters
    ----------
    residual_index : stacked-dof indices where ``grad_u L`` is nonzero
    residual_grad : ndarray (N_t, len(index)) or (N_t, len(index), k)
    store : dof indices to keep in the returned history (default: all)

    Returns
    -------
    phi : ndarray (N_t, len(store), k)
    """
    n, nt, dt = ops.n, config.N_t, config.dt
    g = _as_columns(residual_grad)
    idx = np.asarray(residual_index).ravel()
    k = g.shape[2]
    dt2 = dt * dt
    inv_d = (1.0 / (ops.I1 + 0.5 * dt * ops.I2))[:, None]
    c_next = (ops.I1 - 0.5 * dt * ops.I2)[:, None]
    c_now = 2.0 * ops.I1[:, None]
    keep = np.arange(n) if store is None else np.asarray(store).ravel()
    phi_hist = np.zeros((nt, len(keep), k))
    phi_next = np.zeros((n, k))
    phi = np.zeros((n, k))
    AT = ops.AT
    for m in range(nt - 1, 0, -1):
        rhs = c_now * phi - c_next * phi_next + dt2 * (AT @ phi)
        rhs[idx] -= dt2 * g[m]
        phi_prev = rhs * inv_d
        _finite_or_raise(phi_prev, m - 1)
        phi_next, phi = phi, phi_prev
        phi_hist[m - 1] = phi[keep]
    return phi_hist


# --------------------------------------------------------------------------
# Green's functions from the receivers back to the source region


@dataclass(frozen=True)
class ReceiverGreens:
    """Discrete impulse responses from forcing dofs to receiver samples.

    Built from one dual solve per receiver component: by time invariance of
    the recursion, ``y^k = sum_{m<k} G[k-m] f^m`` exactly, where ``G[l]`` is
    read off the dual solution for a unit impulse at the final level.
    """

    dofs: np.ndarray            # stacked-dof indices covered
    response: np.ndarray        # (n_out, N_t, len(dofs)), lag-major
    n_out: int
    N_t: int
    _lookup: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def build(cls, ops: DiscreteOperators, config: TimeConfig, outputs, dofs):
        outputs = np.asarray(outputs).ravel()
        dofs = np.asarray(dofs).ravel()
        nt = config.N_t
        g = np.zeros((nt, len(outputs), len(outputs)))
        g[nt - 1] = np.eye(len(outputs))
        phi = solve_dual(ops, outputs, g, config, store=dofs)   # (nt, ndofs, nout)
        # lag l corresponds to dual level N_t-1-l
        resp = -(ops.C[dofs][None, :, None] * phi)[::-1]       # (lag, ndofs, nout)
        resp = np.ascontiguousarray(np.transpose(resp, (2, 0, 1)))
        return cls(dofs, resp, len(outputs), nt,
                   {int(d): i for i, d in enumerate(dofs)})

    def columns(self, index) -> np.ndarray:
        try:
            return np.array([self._lookup[int(i)] for i in np.asarray(index).ravel()])
        except KeyError as exc:
            raise DomainError(f"dof {exc.args[0]} lies outside the Green's function region") from None

    def observe(self, index, values) -> np.ndarray:
        """Receiver samples ``(N_t, n_out, k)`` for forcing on ``index``."""
        vals = _as_columns(values)[: self.N_t]
        cols = self.columns(index)
        nt = self.N_t
        nfft = 2 * nt
        g_hat = np.fft.rfft(self.response[:, :, cols], n=nfft, axis=1)    # (o, f, p)
        f_hat = np.fft.rfft(vals, n=nfft, axis=0)                          # (f, p, k)
        y = np.fft.irfft(np.einsum("ofp,fpk->fok", g_hat, f_hat), n=nfft, axis=0)
        return y[:nt]


# --------------------------------------------------------------------------
# moment-tensor source runs


def _source_forcing(theta, grid: Grid, config: TimeConfig, params=None):
    from .source import as_params, forcing_jacobian, source_pattern, time_function

    p = as_params(theta)
    pat = source_pattern(p, grid)
    index = np.concatenate([pat.nodes, pat.nodes + grid.N_h])
    t = config.times
    if params is None:
        s = time_function(t, p.t_s, p.omega_s)[0]
        if s[0] > 1e-8 * p.omega_s / math.sqrt(2 * math.pi):
            warnings.warn("source time function is not negligible at t=0; "
                          "the zero-velocity start is only first-order accurate", stacklevel=3)
        values = s[:, None] * pat.G.reshape(1, -1)
        return Forcing(index, values[:, :, None])
    jac = forcing_jacobian(pat, t).reshape(len(t), -1, pat.dG.shape[-1])
    return Forcing(index, jac[:, :, list(params)])


def _to_series(samples, receivers: Receivers, dt: float):
    # samples: (N_t, 2*N_R, k) ordered receiver-major, component-minor
    nt, _, k = samples.shape
    data = samples.reshape(nt, receivers.N_R, 2, k).transpose(3, 1, 2, 0)
    return [ReceiverSeries(np.ascontiguousarray(d), dt, receivers.positions) for d in data]


def simulate(ops: DiscreteOperators, theta, config: TimeConfig, receivers: Receivers,
             store_history: bool = False):
    """Receiver waveforms (and optionally the full field) for source ``theta``."""
    forcing = _source_forcing(theta, ops.grid, config)
    samples, history = step_primal(ops, forcing, config, receivers.dof(ops.grid.N_h),
                                   store_history)
    series = _to_series(samples, receivers, config.dt)[0]
    return (series, history[:, :, 0]) if store_history else series


def solve_sensitivities(ops: DiscreteOperators, theta, config: TimeConfig,
                        receivers: Receivers, params=None):
    """Derivatives of the receiver waveforms with respect to each parameter.

    All requested parameters are propagated together as one multi-column
    solve; returns a list of :class:`ReceiverSeries` in ``params`` order
    (default: all seven).
    """
    params = list(range(7)) if params is None else list(params)
    forcing = _source_forcing(theta, ops.grid, config, params)
    samples, _ = step_primal(ops, forcing, config, receivers.dof(ops.grid.N_h))
    return _to_series(samples, receivers, config.dt)
