"""Priors, Laplace-based information gain and the nested Monte Carlo estimator."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, logsumexp

from .errors import DomainError, NumericalError
from .hessian import NoiseModel, log_det_scaled, scale_hessian

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class UniformPrior:
    """Independent uniform priors on the box ``[low, high]``."""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low = np.atleast_1d(np.asarray(self.low, dtype=float))
        high = np.atleast_1d(np.asarray(self.high, dtype=float))
        if low.shape != high.shape or np.any(high <= low):
            raise DomainError("prior bounds need high > low componentwise")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @property
    def dim(self) -> int:
        return len(self.low)

    @property
    def widths(self) -> np.ndarray:
        return self.high - self.low

    @property
    def mean(self) -> np.ndarray:
        return 0.5 * (self.low + self.high)

    def contains(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.low) and np.all(theta <= self.high))

    def log_density(self, theta) -> float:
        if not self.contains(theta):
            return -math.inf
        return -float(np.sum(np.log(self.widths)))

    def hess_log_density(self, theta) -> np.ndarray:
        return np.zeros((self.dim, self.dim))

    def from_cube(self, u) -> np.ndarray:
        """Affine map from ``[-1, 1]^d`` onto the box."""
        return self.mean + 0.5 * self.widths * np.asarray(u, dtype=float)

    def sample(self, rng, n: int) -> np.ndarray:
        return self.low + self.widths * rng.random((n, self.dim))


@dataclass(frozen=True)
class GaussianPrior:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", np.linalg.cholesky(cov))

    @property
    def dim(self) -> int:
        return len(self.mean)

    def log_density(self, theta) -> float:
        z = np.linalg.solve(self._chol, np.asarray(theta, dtype=float) - self.mean)
        logdet = 2 * np.sum(np.log(np.diag(self._chol)))
        return float(-0.5 * (z @ z) - 0.5 * logdet - 0.5 * self.dim * LOG_2PI)

    def hess_log_density(self, theta) -> np.ndarray:
        return -np.linalg.inv(self.cov)

    def sample(self, rng, n: int) -> np.ndarray:
        return self.mean + rng.standard_normal((n, self.dim)) @ self._chol.T


@dataclass(frozen=True)
class EigEstimate:
    value: float
    stderr: float
    estimator: str              # laplace-T4 | laplace-T3 | nested-mc
    n_samples: int
    M_outer: int | None = None
    M_inner: int | None = None
    terms: np.ndarray | None = field(default=None, repr=False, compare=False)
    outer_samples: np.ndarray | None = field(default=None, repr=False, compare=False)


def cost_functional(theta, predicted, data, prior, noise: NoiseModel) -> float:
    """Negative log-posterior up to a constant: ``1/2 sum r^T C^-1 r - h(theta)``.

    ``predicted`` and ``data`` are receiver arrays ``(N_R, 2, N_t)`` or
    :class:`~seisoed.elastic_solver.ReceiverSeries`.
    """
    h = prior.log_density(theta)
    if not np.isfinite(h):
        return math.inf
    pred = getattr(predicted, "data", predicted)
    obs = getattr(data, "data", data)
    if np.shape(pred) != np.shape(obs):
        raise DomainError(f"data shape {np.shape(obs)} does not match prediction {np.shape(pred)}")
    r = noise.whiten(np.asarray(obs) - np.asarray(pred))
    return 0.5 * float(np.sum(r * r)) - h


def _log_det(H) -> float:
    H = 0.5 * (np.asarray(H, dtype=float) + np.asarray(H, dtype=float).T)
    try:
        res = scale_hessian(H)
        return log_det_scaled(res.H_scaled, res.S)
    except NumericalError:
        w, v = np.linalg.eigh(H / np.sqrt(np.outer(np.abs(np.diag(H)), np.abs(np.diag(H))) + 1e-300))
        raise NumericalError(
            f"Hessian is singular; null direction {np.array2string(v[:, 0], precision=3)}"
        ) from None


def dkl_hat(H1, prior, theta) -> float:
    """Laplace information gain from the Gauss-Newton Hessian at ``theta``.

    ``-1/2 log((2 pi)^d |H1^-1|) - d/2 - h(theta)``
    """
    H1 = np.atleast_2d(np.asarray(H1, dtype=float))
    d = H1.shape[0]
    return 0.5 * _log_det(H1) - 0.5 * d * LOG_2PI - 0.5 * d - prior.log_density(theta)


def dkl_hat_batch(H1, prior, thetas) -> np.ndarray:
    """:func:`dkl_hat` for a stack of Hessians ``(n, d, d)``."""
    H = np.asarray(H1, dtype=float)
    H = 0.5 * (H + np.swapaxes(H, -1, -2))
    d = H.shape[-1]
    diag = np.diagonal(H, axis1=-2, axis2=-1)
    if np.any(diag <= 0):
        raise NumericalError("Hessian has a non-positive diagonal entry")
    S = np.sqrt(diag)
    sign, logdet = np.linalg.slogdet(H / (S[:, :, None] * S[:, None, :]))
    if np.any(sign <= 0):
        bad = int(np.flatnonzero(sign <= 0)[0])
        raise NumericalError(f"Hessian is not positive definite at {np.asarray(thetas)[bad]}")
    logp = np.array([prior.log_density(t) for t in thetas])
    return 0.5 * (logdet + 2 * np.log(S).sum(-1)) - 0.5 * d * LOG_2PI - 0.5 * d - logp


def dkl_second_order(H_full, prior, theta) -> float:
    """Laplace information gain with the full Hessian and prior-curvature trace.

    ``H_full`` is the complete Hessian of the negative log-posterior,
    ``H_I + H_II - grad grad h``.
    """
    H = np.atleast_2d(np.asarray(H_full, dtype=float))
    H = 0.5 * (H + H.T)
    d = H.shape[0]
    hh = prior.hess_log_density(theta)
    trace = float(np.trace(np.linalg.solve(H, hh))) if np.any(hh) else 0.0
    return (0.5 * _log_det(H) - 0.5 * d * LOG_2PI - 0.5 * d
            - prior.log_density(theta) - 0.5 * trace)


def posterior_marginal_variances(H1) -> np.ndarray:
    res = scale_hessian(np.atleast_2d(H1))
    return np.diag(np.linalg.inv(res.H_scaled)) / res.S**2


def per_parameter_gain(H1, prior: UniformPrior, theta=None) -> np.ndarray:
    """Marginal entropy drop per parameter: ``log(b-a) - 1/2 log(2 pi e var_i)``."""
    var = posterior_marginal_variances(H1)
    if np.any(var <= 0):
        raise NumericalError("posterior marginal variance is not positive")
    return np.log(prior.widths) - 0.5 * np.log(2 * math.pi * math.e * var)


def check_concentration(H1, prior: UniformPrior) -> bool:
    """Warn when a posterior std exceeds a sixth of the prior width."""
    std = np.sqrt(posterior_marginal_variances(H1))
    wide = std > prior.widths / 6
    if np.any(wide):
        log.warning("posterior not concentrated for parameters %s", np.flatnonzero(wide).tolist())
    return not np.any(wide)


# --------------------------------------------------------------------------
# nested Monte Carlo


def _stream(seed: int, *ids) -> np.random.Generator:
    from .integrate import stream_generator
    return stream_generator(seed, *ids)


def _log_gauss_interval(lo, hi):
    """``log(Phi(hi) - Phi(lo))`` without cancellation, for ``lo < hi``."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    upper = lo > 0
    a = np.where(upper, log_ndtr(-lo), log_ndtr(hi))
    b = np.where(upper, log_ndtr(-hi), log_ndtr(lo))
    return a + np.log1p(-np.exp(b - a))


def _inner_log_lik(model, noise, z, inner, linear, prior, n_obs, chunk):
    """Unnormalised ``log p(z | theta_j)`` for every inner sample.

    With ``linear`` set, the model is affine in that parameter and its
    uniform prior is integrated analytically, so the value is the
    conditional likelihood of the remaining parameters.
    """
    out = []
    for s in range(0, len(inner), chunk):
        block = inner[s:s + chunk]
        if linear is None:
            diff = z[None, :] - noise.whiten(model(block)).reshape(len(block), n_obs)
            out.append(-0.5 * np.einsum("ij,ij->i", diff, diff))
            continue
        lo_v, hi_v = prior.low[linear], prior.high[linear]
        at_lo, at_hi = block.copy(), block.copy()
        at_lo[:, linear] = lo_v
        at_hi[:, linear] = hi_v
        y_lo = noise.whiten(model(at_lo)).reshape(len(block), n_obs)
        y_hi = noise.whiten(model(at_hi)).reshape(len(block), n_obs)
        # z - g = r - (m - lo) a with a the whitened slope
        a = (y_hi - y_lo) / (hi_v - lo_v)
        r = z[None, :] - y_lo
        q = np.einsum("ij,ij->i", a, a)
        p = np.einsum("ij,ij->i", a, r)
        rr = np.einsum("ij,ij->i", r, r)
        if np.any(q <= 0):
            raise NumericalError("model does not depend on the marginalised parameter")
        mu = p / q
        sq = np.sqrt(q)
        val = (-0.5 * (rr - p * mu) + 0.5 * np.log(2 * math.pi / q)
               + _log_gauss_interval(-mu * sq, (hi_v - lo_v - mu) * sq)
               - math.log(hi_v - lo_v))
        out.append(val)
    return np.concatenate(out)


def nested_mc_eig(model, prior, noise: NoiseModel, M_outer: int, M_inner: int,
                  seed: int, reuse_inner: bool = False, linear_param: int | None = None,
                  chunk: int = 4096) -> EigEstimate:
    """Double-loop Monte Carlo estimate of the expected information gain.

    Parameters
    ----------
    model : callable
        Maps a batch of parameters ``(n, d)`` to noise-free observations
        shaped ``(n, ..., 2, N_t)``.
    reuse_inner : bool
        Use the outer samples as the inner sample set for every outer sample
        instead of drawing fresh inner samples.  Cheaper but biased.
    linear_param : int, optional
        Index of a parameter in which the model is affine and whose prior is
        uniform.  The inner average over that parameter is then done in
        closed form (a conditional Monte Carlo estimate of the same evidence),
        which removes one dimension from the inner sampling.

    Outer sample ``i`` draws its parameters, noise and inner samples from its
    own counter-based stream, so results do not depend on batching.
    """
    if M_outer < 1 or M_inner < 1:
        raise DomainError("M_outer and M_inner must be at least 1")
    if linear_param is not None and not isinstance(prior, UniformPrior):
        raise DomainError("analytic marginalisation needs a uniform prior")
    outer_theta = np.stack([prior.sample(_stream(seed, 0, i), 1)[0] for i in range(M_outer)])
    g_outer = noise.whiten(model(outer_theta)).reshape(M_outer, -1)
    n_obs = g_outer.shape[1]
    terms = np.empty(M_outer)
    for i in range(M_outer):
        rng = _stream(seed, 1, i)
        xi = rng.standard_normal(n_obs)
        z = g_outer[i] + xi
        inner = outer_theta if reuse_inner else prior.sample(_stream(seed, 2, i), M_inner)
        log_lik = _inner_log_lik(model, noise, z, inner, linear_param, prior, n_obs, chunk)
        lse = logsumexp(log_lik)
        if not np.isfinite(lse):
            raise NumericalError(f"all inner likelihoods underflow at outer sample {i}")
        terms[i] = -0.5 * float(xi @ xi) - (lse - math.log(len(inner)))
    value = float(np.mean(terms))
    stderr = float(np.std(terms, ddof=1) / math.sqrt(M_outer)) if M_outer > 1 else math.inf
    n_inner = M_outer if reuse_inner else M_inner
    return EigEstimate(value, stderr, "nested-mc", M_outer * n_inner, M_outer, n_inner,
                       terms=terms, outer_samples=outer_theta)
