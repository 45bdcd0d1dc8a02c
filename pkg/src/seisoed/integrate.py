"""Outer integration over the prior: Monte Carlo and sparse Gauss-Legendre rules."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DomainError, NumericalError


@lru_cache(maxsize=None)
def _gauss_legendre(n: int):
    if n < 1:
        raise DomainError("a Gauss-Legendre rule needs n >= 1")
    x = np.cos(np.pi * (np.arange(1, n + 1) - 0.25) / (n + 0.5))
    for _ in range(100):
        p0, p1 = np.ones_like(x), x.copy()
        for k in range(2, n + 1):
            p0, p1 = p1, ((2 * k - 1) * x * p1 - (k - 1) * p0) / k
        dp = n * (x * p1 - p0) / (x * x - 1) if n > 1 else np.ones_like(x)
        if n == 1:
            p1 = x
        step = p1 / dp
        x = x - step
        if np.max(np.abs(step)) < 1e-16:
            break
    # derivative at the converged nodes for the weights
    p0, p1 = np.ones_like(x), x.copy()
    for k in range(2, n + 1):
        p0, p1 = p1, ((2 * k - 1) * x * p1 - (k - 1) * p0) / k
    dp = n * (x * p1 - p0) / (x * x - 1) if n > 1 else np.ones_like(x)
    w = 2.0 / ((1 - x * x) * dp * dp)
    order = np.argsort(x)
    x, w = x[order], w[order]
    x = 0.5 * (x - x[::-1])        # enforce exact symmetry
    w = 0.5 * (w + w[::-1])
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gauss_legendre_1d(n: int):
    """Gauss-Legendre nodes and weights on ``[-1, 1]`` (Newton iteration)."""
    x, w = _gauss_legendre(int(n))
    return x.copy(), w.copy()


@dataclass(frozen=True)
class QuadratureRule:
    dim: int
    points: np.ndarray          # (eta, dim) in [-1, 1]^dim
    weights: np.ndarray         # (eta,), summing to 2^dim
    tag: str
    level: int | None = None

    @property
    def size(self) -> int:
        return len(self.weights)


def tensor_rule(counts) -> QuadratureRule:
    rules = [gauss_legendre_1d(n) for n in counts]
    pts = np.array(list(itertools.product(*[r[0] for r in rules])))
    wts = np.array([math.prod(c) for c in itertools.product(*[r[1] for r in rules])])
    return QuadratureRule(len(counts), pts.reshape(-1, len(counts)), wts, "tensor")


def _compositions(total: int, dim: int):
    """Multi-indices ``i >= 1`` with ``|i| = total``."""
    if dim == 1:
        yield (total,)
        return
    for first in range(1, total - dim + 2):
        for rest in _compositions(total - first, dim - 1):
            yield (first,) + rest


def smolyak_total_degree(dim: int, level: int) -> QuadratureRule:
    """Smolyak combination of Gauss-Legendre rules with linear growth ``m(i) = i``.

    Multi-indices satisfy ``level + 1 <= |i| <= level + dim`` and carry the
    coefficient ``(-1)^(level+dim-|i|) C(dim-1, level+dim-|i|)``.  Repeated
    nodes are merged.
    """
    if dim < 1 or level < 0:
        raise DomainError("need dim >= 1 and level >= 0")
    acc: dict[tuple, float] = {}
    for total in range(max(dim, level + 1), level + dim + 1):
        q = level + dim - total
        coeff = (-1) ** q * math.comb(dim - 1, q)
        for idx in _compositions(total, dim):
            rule = tensor_rule(idx)
            for p, w in zip(rule.points, rule.weights):
                key = tuple(p.tolist())
                acc[key] = acc.get(key, 0.0) + coeff * w
    keys = sorted(k for k, v in acc.items() if v != 0.0)
    pts = np.array(keys, dtype=float).reshape(-1, dim)
    wts = np.array([acc[k] for k in keys])
    return QuadratureRule(dim, pts, wts, "smolyak-total-degree", level)


def _box(prior_box):
    low = np.atleast_1d(np.asarray(getattr(prior_box, "low", prior_box[0]), dtype=float))
    high = np.atleast_1d(np.asarray(getattr(prior_box, "high", prior_box[1]), dtype=float))
    return low, high


def _evaluate(f, thetas) -> np.ndarray:
    vals = np.asarray(f(thetas), dtype=float).reshape(len(thetas))
    bad = np.flatnonzero(~np.isfinite(vals))
    if len(bad):
        raise NumericalError(f"integrand is not finite at {thetas[bad[0]].tolist()}")
    return vals


def expectation_quadrature(f, rule: QuadratureRule, prior_box) -> float:
    """Prior expectation of ``f`` under a uniform box prior.

    ``f`` maps a batch of parameter vectors ``(n, dim)`` to ``n`` values.
    """
    low, high = _box(prior_box)
    thetas = 0.5 * (low + high) + 0.5 * (high - low) * rule.points
    vals = _evaluate(f, thetas)
    return float(np.sum(rule.weights * vals) / 2.0**rule.dim)


# --------------------------------------------------------------------------
# random streams and Monte Carlo


def stream_generator(seed: int, *ids: int) -> np.random.Generator:
    """Independent generator for ``(seed, ids)`` from a counter-based bit generator.

    The seed and up to three stream identifiers fill the Philox key and the
    upper counter words, so distinct identifiers give non-overlapping streams.
    """
    if len(ids) > 3:
        raise DomainError("at most three stream identifiers are supported")
    words = list(ids) + [0] * (3 - len(ids))
    counter = np.array([0] + words, dtype=np.uint64)
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x5EED], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


@dataclass(frozen=True)
class SampleStream:
    """Reproducible uniform draws on a parameter box.

    Sample ``j`` depends only on ``(seed, stream, j)``.
    """

    seed: int
    low: np.ndarray
    high: np.ndarray
    stream: int = 0

    @property
    def dim(self) -> int:
        return len(np.atleast_1d(self.low))

    def cube(self, start: int, n: int) -> np.ndarray:
        out = np.empty((n, self.dim))
        for j in range(n):
            out[j] = stream_generator(self.seed, self.stream, start + j).random(self.dim)
        return out

    def draw(self, start: int, n: int) -> np.ndarray:
        low, high = np.asarray(self.low, float), np.asarray(self.high, float)
        return low + (high - low) * self.cube(start, n)


def expectation_mc(f, prior_box, M: int, seed: int, stream: int = 0):
    """Monte Carlo mean and standard error over ``M`` prior draws."""
    if M < 2:
        raise DomainError("Monte Carlo needs M >= 2")
    low, high = _box(prior_box)
    thetas = SampleStream(seed, low, high, stream).draw(0, M)
    vals = _evaluate(f, thetas)
    return float(np.sum(vals) / M), float(np.std(vals, ddof=1) / math.sqrt(M))


def relative_errors(estimates) -> np.ndarray:
    """``|I_{k+1} - I_k| / |I_{k+1}|`` for successive estimates."""
    est = np.asarray(estimates, dtype=float)
    return np.abs(est[1:] - est[:-1]) / np.abs(est[1:])


def convergence_rate(errors, sizes) -> float:
    """Least-squares slope of ``-log(error)`` against ``log(size)``."""
    errors = np.asarray(errors, dtype=float)
    sizes = np.asarray(sizes, dtype=float)
    if len(errors) < 3 or len(errors) != len(sizes):
        raise DomainError("need at least three (size, error) pairs")
    if np.any(errors <= 0) or np.any(sizes <= 0):
        raise DomainError("sizes and errors must be positive")
    slope = np.polyfit(np.log(sizes), np.log(errors), 1)[0]
    return float(-slope)


def write_convergence_csv(path, sizes, estimates, rel_errors, header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["size", "estimate", "rel_error"])
        for n, est, err in zip(sizes, estimates, rel_errors):
            w.writerow([int(n), f"{est:.17g}", "" if err is None else f"{err:.17g}"])
