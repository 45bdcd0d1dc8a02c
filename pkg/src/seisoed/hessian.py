"""Misfit Hessians, parameter rescaling and conditioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .elastic_solver import (DiscreteOperators, ReceiverSeries, Receivers, TimeConfig,
                             simulate, solve_dual, solve_sensitivities)
from .errors import DomainError, NumericalError, UnidentifiableParameterError
from .source import as_params, forcing_hessian, forcing_jacobian, source_pattern

ZERO_DIAGONAL = 1e-300


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian measurement noise, i.i.d. over receivers and time levels.

    ``cov`` is the 2x2 covariance of the two displacement components.
    """

    cov: np.ndarray

    def __post_init__(self):
        cov = np.array(self.cov, dtype=float)
        if cov.ndim == 0:
            cov = cov * np.eye(2)
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T, rtol=0, atol=0):
            raise DomainError("noise covariance must be a symmetric 2x2 matrix")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise DomainError("noise covariance must be positive definite") from None
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)

    @classmethod
    def isotropic(cls, variance: float) -> "NoiseModel":
        return cls(float(variance) * np.eye(2))

    @property
    def isotropic_std(self) -> float | None:
        c = self.cov
        if c[0, 1] == 0 and c[0, 0] == c[1, 1]:
            return float(np.sqrt(c[0, 0]))
        return None

    def whiten(self, arr) -> np.ndarray:
        """Apply ``L^{-1}`` (``cov = L L^T``) to arrays shaped ``(..., 2, N_t)``."""
        arr = np.asarray(arr, dtype=float)
        std = self.isotropic_std
        if std is not None:
            return arr / std
        return np.einsum("ij,...jt->...it", np.linalg.inv(self._chol), arr)

    def sample(self, rng, shape) -> np.ndarray:
        """Noise realisations with shape ``shape + (2, N_t)``; ``shape[-1]`` is N_t."""
        *lead, nt = shape
        z = rng.standard_normal(tuple(lead) + (2, nt))
        return np.einsum("ij,...jt->...it", self._chol, z)


def _stack(series) -> np.ndarray:
    if isinstance(series, np.ndarray):
        return series
    arrays = [s.data if isinstance(s, ReceiverSeries) else np.asarray(s) for s in series]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise DomainError(f"sensitivity series have mismatched shapes {sorted(shapes)}")
    return np.stack(arrays)


def misfit_hessian_H1(sensitivities, noise: NoiseModel) -> np.ndarray:
    """Gauss-Newton Hessian ``sum_r sum_m du^T C_eps^{-1} du``.

    ``sensitivities`` is a list of :class:`ReceiverSeries` (one per
    parameter) or an array shaped ``(N_theta, N_R, 2, N_t)``.
    """
    sens = _stack(sensitivities)
    J = noise.whiten(sens).reshape(sens.shape[0], -1)
    H = J @ J.T
    return 0.5 * (H + H.T)


def misfit_gradient_noise(sensitivities, noise: NoiseModel, eps) -> np.ndarray:
    """The data-noise part ``sum eps^T C_eps^{-1} du`` of the misfit gradient."""
    sens = _stack(sensitivities)
    w = noise.whiten(sens).reshape(sens.shape[0], -1)
    e = noise.whiten(eps).ravel()
    return w @ e


def misfit_hessian_H2(phi_patch, theta, ops: DiscreteOperators, config: TimeConfig):
    """Dual-weighted second-derivative term ``-sum_m (phi^m C) . d2f^m``.

    Parameters
    ----------
    phi_patch : ndarray (N_t, 72)
        Dual solution restricted to the source patch dofs, ordered as
        ``[component 1 nodes, component 2 nodes]`` of :func:`source_pattern`.
    """
    if phi_patch is None:
        raise NumericalError("H_II requires the dual solution")
    grid = ops.grid
    pat = source_pattern(theta, grid)
    idx = np.concatenate([pat.nodes, pat.nodes + grid.N_h])
    d2f = forcing_hessian(pat, config.times).reshape(config.N_t, len(idx), 7, 7)
    weights = np.asarray(phi_patch) * ops.C[idx][None, :]
    return -np.einsum("mi,miab->ab", weights, d2f)


def patch_dofs(theta, ops: DiscreteOperators) -> np.ndarray:
    pat = source_pattern(theta, ops.grid)
    return np.concatenate([pat.nodes, pat.nodes + ops.grid.N_h])


def residual_gradient(series: ReceiverSeries, data: ReceiverSeries, noise: NoiseModel):
    """``grad_u L`` at the receivers, shaped ``(N_t, 2 N_R)`` receiver-major."""
    r = data.data - series.data                                  # (N_R, 2, N_t)
    cinv = np.linalg.inv(noise.cov)
    g = -np.einsum("ij,rjt->tri", cinv, r)
    return g.reshape(r.shape[2], -1)


@dataclass(frozen=True)
class MisfitDerivatives:
    value: float
    gradient: np.ndarray
    H_I: np.ndarray
    H_II: np.ndarray | None


def misfit_derivatives(ops: DiscreteOperators, theta, data: ReceiverSeries,
                       noise: NoiseModel, config: TimeConfig, receivers: Receivers,
                       second_order: bool = True, params=None) -> MisfitDerivatives:
    """Value, adjoint gradient and Hessian pieces of ``L1 = 1/2 sum r^T C^-1 r``.

    ``params`` restricts the derivatives to a subset of the seven parameters.
    """
    params = list(range(7)) if params is None else list(params)
    theta = as_params(theta).to_array()
    pred = simulate(ops, theta, config, receivers)
    r = noise.whiten(data.data - pred.data)
    value = 0.5 * float(np.sum(r * r))
    grad_u = residual_gradient(pred, data, noise)
    idx = patch_dofs(theta, ops)
    phi = solve_dual(ops, receivers.dof(ops.grid.N_h), grad_u, config, store=idx)[:, :, 0]
    pat = source_pattern(theta, ops.grid)
    jac = forcing_jacobian(pat, config.times).reshape(config.N_t, len(idx), 7)
    gradient = -np.einsum("mi,mia->a", phi * ops.C[idx], jac)[params]
    sens = solve_sensitivities(ops, theta, config, receivers, params)
    H_I = misfit_hessian_H1(sens, noise)
    H_II = None
    if second_order:
        H_II = misfit_hessian_H2(phi, theta, ops, config)[np.ix_(params, params)]
    return MisfitDerivatives(value, gradient, H_I, H_II)


# --------------------------------------------------------------------------
# scaling and conditioning


@dataclass(frozen=True)
class HessianResult:
    H_I: np.ndarray
    S: np.ndarray               # diagonal entries of the scaling matrix
    H_scaled: np.ndarray
    cond_unscaled: float
    cond_scaled: float
    H_II: np.ndarray | None = None

    @property
    def log_det(self) -> float:
        """``log|H_I|`` evaluated through the scaled matrix."""
        return log_det_scaled(self.H_scaled, self.S)


def _svd_cond(H) -> float:
    s = np.linalg.svd(H, compute_uv=False)
    return float(s[0] / s[-1]) if s[-1] > 0 else float("inf")


def scale_hessian(H) -> HessianResult:
    """Diagonal rescaling ``H~ = S^-1 H S^-1`` with ``S = sqrt(diag H)``.

    The unscaled condition number is ``|H| |H^-1|`` in the spectral norm,
    with ``H^-1 = S^-1 H~^-1 S^-1`` formed from the well-conditioned scaled
    matrix; a direct SVD of ``H`` loses the small singular values once the
    condition number approaches ``1/eps``.
    """
    H = np.asarray(H, dtype=float)
    d = np.diag(H)
    for i, v in enumerate(d):
        if not v > ZERO_DIAGONAL:
            raise UnidentifiableParameterError(i)
    S = np.sqrt(d)
    Hs = H / np.outer(S, S)
    Hs = 0.5 * (Hs + Hs.T)
    np.fill_diagonal(Hs, 1.0)
    cond_scaled = _svd_cond(Hs)
    if not np.isfinite(cond_scaled):
        cond_unscaled = float("inf")
    else:
        Hs_inv = np.linalg.inv(Hs)
        H_inv = Hs_inv / np.outer(S, S)
        cond_unscaled = float(np.linalg.norm(H, 2) * np.linalg.norm(H_inv, 2))
    return HessianResult(H, S, Hs, cond_unscaled, cond_scaled)


def log_det_scaled(H_scaled, S) -> float:
    sign, logdet = np.linalg.slogdet(H_scaled)
    if sign <= 0:
        raise NumericalError("Hessian is not positive definite")
    return float(logdet + 2.0 * np.sum(np.log(S)))


def write_matrix_csv(path, H) -> None:
    """Row-major CSV with 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.atleast_2d(H):
            w.writerow([f"{v:.17g}" for v in row])


def read_matrix_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)
