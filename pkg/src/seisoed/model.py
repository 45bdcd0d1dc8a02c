"""Seismic forward model wiring: grid, medium, operators, receivers, fast evaluation."""

from __future__ import annotations

import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy import fft as sfft

from .elastic_solver import (DiscreteOperators, ReceiverGreens, Receivers, TimeConfig,
                             assemble_operators, check_cfl, simulate, solve_sensitivities,
                             surface_receivers)
from .errors import DomainError
from .grid_medium import Grid, LayerSpec, build_grid, layered_material
from .source import _TABLES, N_THETA, time_function

# (component, moment column, x1 stencil order, x2 stencil order)
_TERMS = ((0, 4, 1, 0), (0, 5, 0, 1), (1, 5, 1, 0), (1, 6, 0, 1))


@dataclass
class SeismicModel:
    """A layered medium on a grid with a time window; receivers vary per call."""

    grid: Grid
    ops: DiscreteOperators
    time: TimeConfig
    _sens_cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, extents, h, layers: LayerSpec, dt, T, cfl=0.9) -> "SeismicModel":
        grid = build_grid(extents, h)
        ops = assemble_operators(grid, layered_material(layers, grid))
        time = TimeConfig(dt, T)
        check_cfl(ops, time, cfl)
        return cls(grid, ops, time)

    def surface(self, x1_positions) -> Receivers:
        return surface_receivers(self.grid, x1_positions)

    def simulate(self, theta, receivers: Receivers):
        return simulate(self.ops, theta, self.time, receivers)

    def sensitivities(self, theta, receivers: Receivers, params=None) -> np.ndarray:
        """Sensitivity array ``(n_params, N_R, 2, N_t)``."""
        series = solve_sensitivities(self.ops, theta, self.time, receivers, params)
        return np.stack([s.data for s in series])


def _stencil_batch(x, origin, h, order, deriv=0):
    """Vectorised stencil weights ``(n, 6)`` and anchors ``(n,)``.

    ``deriv`` selects derivatives of the weights with respect to ``x``.
    """
    pos = (np.asarray(x, dtype=float) - origin) / h
    k = np.floor(pos).astype(int)
    alpha = pos - k
    wrap = alpha >= 1.0
    k[wrap] += 1
    alpha[wrap] = 0.0
    table = npoly.polyder(_TABLES[order], m=deriv, axis=1) if deriv else _TABLES[order]
    powers = alpha[:, None] ** np.arange(table.shape[1])[None, :]
    return powers @ table.T * h ** -(order + 1 + deriv), k


class GreensForwardModel:
    """Exact receiver waveforms for many source parameters at once.

    Impulse responses from every forcing dof in a box of source positions to
    every receiver channel are computed once (one dual solve per channel);
    the waveform for a given source then reduces to stencil contractions and
    a causal convolution with the source time function.  Results agree with
    :func:`~seisoed.elastic_solver.simulate` to rounding error.
    """

    def __init__(self, ops: DiscreteOperators, config: TimeConfig, receivers: Receivers,
                 x1_range, x2_range):
        grid = ops.grid
        self.grid, self.config, self.receivers = grid, config, receivers
        h = grid.h
        i_lo = int(np.floor((x1_range[0] - grid.x1_min) / h)) - 2
        i_hi = int(np.floor((x1_range[1] - grid.x1_min) / h)) + 4
        j_lo = int(np.floor((x2_range[0] - grid.x2_min) / h)) - 2
        j_hi = int(np.floor((x2_range[1] - grid.x2_min) / h)) + 4
        if i_lo < 0 or j_lo < 0 or i_hi >= grid.N1 or j_hi >= grid.N2:
            raise DomainError("source box is closer than 3h to the grid boundary")
        self.i0, self.j0 = i_lo, j_lo
        self.n1r, self.n2r = i_hi - i_lo + 1, j_hi - j_lo + 1
        self.x1_range, self.x2_range = tuple(x1_range), tuple(x2_range)
        ii, jj = np.meshgrid(np.arange(i_lo, i_hi + 1), np.arange(j_lo, j_hi + 1), indexing="ij")
        nodes = grid.flat_index(ii, jj).ravel()
        dofs = np.concatenate([nodes, nodes + grid.N_h])
        greens = ReceiverGreens.build(ops, config, receivers.dof(grid.N_h), dofs)
        n_out, nt = greens.n_out, greens.N_t
        # response[o, lag, comp, i, j]
        self.response = greens.response.reshape(n_out, nt, 2, self.n1r, self.n2r)
        self.n_out, self.N_t = n_out, nt
        self._x_cache: dict = {}

    def _x_contracted(self, x1s: float, deriv: int = 0):
        """Responses as polynomials in the x2 stencil offset, per x2 anchor.

        Returns ``P[k, moment, power, out, lag]`` such that the unconvolved
        response of a source at ``x1s`` with x2 anchor ``j0 + 2 + k`` and
        offset ``alpha`` is ``sum_{moment, power} m * alpha**power * P``.
        """
        key = (x1s, deriv)
        if key not in self._x_cache:
            grid = self.grid
            X = []
            for order in (0, 1):
                w, k = _stencil_batch([x1s], grid.x1_min, grid.h, order, deriv)
                cols = k[0] - 2 + np.arange(6) - self.i0
                X.append(np.einsum("olcij,i->olcj", self.response[:, :, :, cols, :], w[0]))
            n_anchor = self.n2r - 5
            n_pow = _TABLES[0].shape[1]
            P = np.zeros((n_anchor, 3, n_pow, self.n_out, self.N_t))
            win = np.arange(n_anchor)[:, None] + np.arange(6)[None, :]
            for comp, mcol, ox, oy in _TERMS:
                tab = _TABLES[oy] * grid.h ** -(oy + 1)                      # (6, power)
                block = X[ox][:, :, comp][:, :, win]                          # (o, lag, k, 6)
                P[:, mcol - 4] += np.einsum("olkj,jp->kpol", block, tab)
            if len(self._x_cache) > 64:
                self._x_cache.clear()
            self._x_cache[key] = P.reshape(n_anchor, -1, self.n_out * self.N_t)
        return self._x_cache[key]

    def _check(self, thetas):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        if thetas.shape[1] != N_THETA:
            raise DomainError(f"expected parameter rows of length {N_THETA}")
        tol = 1e-9 * self.grid.h
        (a1, b1), (a2, b2) = self.x1_range, self.x2_range
        if (np.any(thetas[:, 0] < a1 - tol) or np.any(thetas[:, 0] > b1 + tol)
                or np.any(thetas[:, 1] < a2 - tol) or np.any(thetas[:, 1] > b2 + tol)):
            raise DomainError("source position outside the precomputed region")
        return thetas

    def _anchors(self, x2):
        pos = (x2 - self.grid.x2_min) / self.grid.h
        anchor = np.floor(pos).astype(int)
        alpha = pos - anchor
        wrap = alpha >= 1.0
        anchor[wrap] += 1
        alpha[wrap] = 0.0
        return anchor - 2 - self.j0, alpha

    def _contract(self, thetas, kidx, coef, deriv=0):
        n = len(thetas)
        r = np.empty((n, self.n_out * self.N_t))
        for x1s in np.unique(thetas[:, 0]):
            P = self._x_contracted(float(x1s), deriv)
            in_group = thetas[:, 0] == x1s
            for k in np.unique(kidx[in_group]):
                sel = np.flatnonzero(in_group & (kidx == k))
                r[sel] = coef[sel] @ P[k]
        return r.reshape(n, self.n_out, self.N_t)

    def _nfft(self):
        return sfft.next_fast_len(2 * self.N_t - 1, real=True)

    def _convolve(self, r_hat, s, nfft):
        y = sfft.irfft(r_hat * sfft.rfft(s, nfft, axis=-1)[:, None, :], nfft, axis=-1)
        return y[..., : self.N_t]

    def __call__(self, thetas) -> np.ndarray:
        """Noise-free waveforms ``(n, N_R, 2, N_t)`` for parameters ``(n, 7)``."""
        thetas = self._check(thetas)
        n = len(thetas)
        kidx, alpha = self._anchors(thetas[:, 1])
        powers = alpha[:, None] ** np.arange(_TABLES[0].shape[1])
        coef = (thetas[:, 4:7, None] * powers[:, None, :]).reshape(n, -1)
        r = self._contract(thetas, kidx, coef)
        s = time_function(self.config.times[None, :], thetas[:, 2:3], thetas[:, 3:4])[0]
        nfft = self._nfft()
        y = self._convolve(sfft.rfft(r, nfft, axis=-1), s, nfft)
        return y.reshape(n, self.receivers.N_R, 2, self.N_t)

    def jacobian(self, thetas, params=None) -> np.ndarray:
        """Exact parameter derivatives ``(n, k, N_R, 2, N_t)`` of the waveforms."""
        thetas = self._check(thetas)
        params = list(range(N_THETA)) if params is None else list(params)
        n = len(thetas)
        h = self.grid.h
        kidx, alpha = self._anchors(thetas[:, 1])
        n_pow = _TABLES[0].shape[1]
        expo = np.arange(n_pow)
        powers = alpha[:, None] ** expo
        dpowers = np.zeros_like(powers)
        dpowers[:, 1:] = expo[1:] * alpha[:, None] ** expo[:-1] / h
        m = thetas[:, 4:7, None]
        coef = (m * powers[:, None, :]).reshape(n, -1)
        s, ds, _ = time_function(self.config.times[None, :], thetas[:, 2:3], thetas[:, 3:4])
        nfft = self._nfft()
        r0_hat = None
        out = np.empty((n, len(params), self.n_out, self.N_t))
        for col, p in enumerate(params):
            if p in (2, 3):
                if r0_hat is None:
                    r0_hat = sfft.rfft(self._contract(thetas, kidx, coef), nfft, axis=-1)
                out[:, col] = self._convolve(r0_hat, ds[..., p - 2], nfft)
                continue
            if p == 0:
                r = self._contract(thetas, kidx, coef, deriv=1)
            elif p == 1:
                r = self._contract(thetas, kidx, (m * dpowers[:, None, :]).reshape(n, -1))
            else:
                unit = np.zeros((n, 3, n_pow))
                unit[:, p - 4] = powers
                r = self._contract(thetas, kidx, unit.reshape(n, -1))
            out[:, col] = self._convolve(sfft.rfft(r, nfft, axis=-1), s, nfft)
        return out.reshape(n, len(params), self.receivers.N_R, 2, self.N_t)


def reduced_model(full_model, free, fixed_theta):
    """Wrap a batch model of all seven parameters as a model of ``free`` only."""
    free = list(free)
    base = np.asarray(fixed_theta, dtype=float)

    def model(sub):
        sub = np.atleast_2d(sub)
        thetas = np.repeat(base[None, :], len(sub), axis=0)
        thetas[:, free] = sub
        return full_model(thetas)

    return model


@contextmanager
def quiet_start():
    """Silence the smooth-start warning during batch runs."""
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="source time function is not negligible")
        yield
