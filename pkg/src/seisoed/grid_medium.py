"""Uniform 2D grid and layered isotropic elastic medium."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError


@dataclass(frozen=True)
class Grid:
    """Uniform Cartesian grid with a single spacing ``h`` on both axes.

    Nodes are indexed from zero: node ``(i, j)`` sits at
    ``(x1_min + i*h, x2_min + j*h)``.  Nodal fields are stored as arrays of
    shape ``(N1, N2)`` and flattened in C order, so the flat index of
    ``(i, j)`` is ``i*N2 + j``.  The last row ``j = N2 - 1`` is the top
    edge ``x2 = x2_max``.
    """

    x1_min: float
    x1_max: float
    x2_min: float
    x2_max: float
    h: float
    N1: int
    N2: int

    @property
    def N_h(self) -> int:
        return self.N1 * self.N2

    @property
    def shape(self) -> tuple[int, int]:
        return (self.N1, self.N2)

    @property
    def x1(self) -> np.ndarray:
        return self.x1_min + np.arange(self.N1) * self.h

    @property
    def x2(self) -> np.ndarray:
        return self.x2_min + np.arange(self.N2) * self.h

    def coords(self, i, j):
        return self.x1_min + i * self.h, self.x2_min + j * self.h

    def flat_index(self, i, j):
        return np.asarray(i) * self.N2 + np.asarray(j)

    def nearest_node(self, x1: float, x2: float) -> tuple[int, int, float]:
        """Closest node to ``(x1, x2)`` and the snap distance."""
        i = int(np.clip(round((x1 - self.x1_min) / self.h), 0, self.N1 - 1))
        j = int(np.clip(round((x2 - self.x2_min) / self.h), 0, self.N2 - 1))
        xi, xj = self.coords(i, j)
        return i, j, math.hypot(xi - x1, xj - x2)


def build_grid(extents, h: float) -> Grid:
    """Build a :class:`Grid` from ``(x1_min, x1_max, x2_min, x2_max)``.

    Both spans must be integer multiples of ``h`` (to ``1e-9*h``).
    """
    x1_min, x1_max, x2_min, x2_max = (float(v) for v in extents)
    h = float(h)
    if not h > 0:
        raise ConfigError(f"grid spacing must be positive, got h={h}")
    counts = []
    for axis, lo, hi in (("x1", x1_min, x1_max), ("x2", x2_min, x2_max)):
        span = hi - lo
        if not span > 0:
            raise ConfigError(f"empty extent on axis {axis}: [{lo}, {hi}]")
        ratio = span / h
        n = round(ratio)
        if abs(ratio - n) * h > 1e-9 * h:
            raise ConfigError(
                f"extent on axis {axis} ({span:g}) is not a multiple of h={h:g} "
                f"(ratio {ratio:g})"
            )
        if n + 1 < 3:
            raise ConfigError(f"axis {axis} needs at least 3 nodes, got {n + 1}")
        counts.append(n + 1)
    return Grid(x1_min, x1_max, x2_min, x2_max, h, counts[0], counts[1])


def lame_from_velocities(density, cp, cs):
    """Lamé parameters ``(lam, mu)`` from density and P/S wave speeds."""
    density = np.asarray(density, dtype=float)
    cp = np.asarray(cp, dtype=float)
    cs = np.asarray(cs, dtype=float)
    if np.any(density <= 0) or np.any(cp <= 0) or np.any(cs < 0):
        raise DomainError("density and P speed must be positive, S speed non-negative")
    mu = density * cs**2
    lam = density * (cp**2 - 2.0 * cs**2)
    if np.any(lam <= 0):
        if np.any(lam + 2 * mu <= 0):
            raise DomainError("lam + 2 mu must be positive")
        warnings.warn("cp <= sqrt(2) cs gives a non-positive lam", stacklevel=2)
    if lam.ndim == 0:
        return float(lam), float(mu)
    return lam, mu


@dataclass(frozen=True)
class Layer:
    x2_top: float
    x2_bottom: float
    density: float
    cp: float
    cs: float


@dataclass(frozen=True)
class LayerSpec:
    """Horizontal layers ordered from the surface down."""

    layers: tuple[Layer, ...]

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("at least one layer is required")
        for a in self.layers:
            if not a.x2_top > a.x2_bottom:
                raise ConfigError(f"layer top {a.x2_top} must lie above bottom {a.x2_bottom}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.x2_bottom != b.x2_top:
                raise ConfigError(
                    f"layers are not contiguous: bottom {a.x2_bottom} vs next top {b.x2_top}"
                )

    @classmethod
    def from_bottoms(cls, top, bottoms, density, cp, cs) -> "LayerSpec":
        tops = [float(top)] + [float(b) for b in bottoms[:-1]]
        return cls(tuple(Layer(t, float(b), float(r), float(p), float(s))
                         for t, b, r, p, s in zip(tops, bottoms, density, cp, cs)))

    @classmethod
    def loh1(cls, top=0.0, bottom=-15000.0) -> "LayerSpec":
        return cls((Layer(top, -1000.0, 2600.0, 4000.0, 2000.0),
                    Layer(-1000.0, bottom, 2700.0, 6000.0, 3464.0)))


@dataclass(frozen=True)
class MaterialField:
    """Per-node density and Lamé parameters."""

    density: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    cp: np.ndarray = field(init=False, repr=False)
    cs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if np.any(self.density <= 0) or np.any(self.mu <= 0) or np.any(self.lam + 2 * self.mu <= 0):
            raise DomainError("material must satisfy density > 0, mu > 0, lam + 2 mu > 0")
        for arr in (self.density, self.lam, self.mu):
            arr.setflags(write=False)
        cp = np.sqrt((2 * self.mu + self.lam) / self.density)
        cs = np.sqrt(self.mu / self.density)
        cp.setflags(write=False)
        cs.setflags(write=False)
        object.__setattr__(self, "cp", cp)
        object.__setattr__(self, "cs", cs)

    @classmethod
    def uniform(cls, grid: Grid, density, cp, cs) -> "MaterialField":
        lam, mu = lame_from_velocities(density, cp, cs)
        ones = np.ones(grid.shape)
        return cls(density * ones, lam * ones, mu * ones)


def layered_material(layers: LayerSpec, grid: Grid) -> MaterialField:
    """Assign layer properties to every node; interface nodes take the upper layer."""
    tol = 1e-9 * grid.h
    top = layers.layers[0].x2_top
    bottom = layers.layers[-1].x2_bottom
    if top < grid.x2_max - tol or bottom > grid.x2_min + tol:
        raise ConfigError(
            f"layers cover [{bottom}, {top}] but the grid spans [{grid.x2_min}, {grid.x2_max}]"
        )
    x2 = grid.x2
    density = np.empty(grid.N2)
    cp = np.empty(grid.N2)
    cs = np.empty(grid.N2)
    assigned = np.zeros(grid.N2, dtype=bool)
    for layer in layers.layers:
        inside = (x2 <= layer.x2_top + tol) & (x2 >= layer.x2_bottom - tol) & ~assigned
        density[inside] = layer.density
        cp[inside] = layer.cp
        cs[inside] = layer.cs
        assigned |= inside
    if not assigned.all():
        raise ConfigError("layer specification leaves grid rows unassigned")
    lam, mu = lame_from_velocities(density, cp, cs)
    tile = np.ones((grid.N1, 1))
    return MaterialField(tile * density, tile * lam, tile * mu)
