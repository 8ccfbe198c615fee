"""Sphere grids, synthesis/analysis of steerable coefficients and grid softmax."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .so3 import IrrepsLayout, LayoutError, SteerableTensor, angles_to_vector, spherical_harmonics

GRID_KINDS = ("gauss_legendre_theta", "equiangular")
DEFAULT_TAU = 0.1


class GridConfigError(ValueError):
    """Grid resolution too coarse for the requested band limit, or unknown kind."""


@dataclass(frozen=True)
class SphereGrid:
    n_theta: int
    n_phi: int
    kind: str
    theta: np.ndarray = field(repr=False)
    phi: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    lmax: int = 3

    @property
    def size(self) -> int:
        return self.n_theta * self.n_phi

    @property
    def points(self) -> np.ndarray:
        """Unit vectors of all nodes, theta-major, shape ``(S, 3)``."""
        return _points(self)

    @property
    def angles(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-node ``(theta, phi)`` arrays of length ``S``."""
        t, p = np.meshgrid(self.theta, self.phi, indexing="ij")
        return t.reshape(-1), p.reshape(-1)

    def sh(self, lmax: int) -> np.ndarray:
        """Harmonics at every node, shape ``(S, (lmax+1)**2)`` (cached)."""
        return _sh_table(self, lmax)

    def angular_spacing(self) -> float:
        """Largest gap between neighbouring nodes, in radians."""
        dtheta = np.max(np.diff(np.concatenate([[0.0], self.theta, [np.pi]])))
        return float(max(dtheta, 2 * np.pi / self.n_phi))

    def nearest(self, direction) -> int:
        d = np.asarray(direction, dtype=np.float64)
        return int(np.argmax(self.points @ (d / np.linalg.norm(d))))


_cache: dict[tuple, np.ndarray] = {}


def _key(grid: SphereGrid) -> tuple:
    return (grid.n_theta, grid.n_phi, grid.kind)


def _points(grid: SphereGrid) -> np.ndarray:
    key = _key(grid) + ("points",)
    if key not in _cache:
        t, p = grid.angles
        pts = angles_to_vector(t, p)
        pts.setflags(write=False)
        _cache[key] = pts
    return _cache[key]


def _sh_table(grid: SphereGrid, lmax: int) -> np.ndarray:
    key = _key(grid) + ("sh", lmax)
    if key not in _cache:
        table = spherical_harmonics(_points(grid), lmax)
        table.setflags(write=False)
        _cache[key] = table
    return _cache[key]


def check_nyquist(n_theta: int, n_phi: int, lmax: int) -> None:
    need = 2 * lmax
    if n_theta < need or n_phi < need or n_theta * n_phi < need * need:
        raise GridConfigError(
            f"grid {n_theta}x{n_phi} violates S >= (2 L_max)^2 = {need * need} for L_max={lmax}"
        )


def make_grid(n_theta: int = 100, n_phi: int = 100, kind: str = "gauss_legendre_theta", lmax: int = 3) -> SphereGrid:
    """Build a product grid on the sphere.

    ``gauss_legendre_theta`` places Gauss-Legendre nodes in ``cos(theta)`` and
    equispaced azimuths, which integrates products of harmonics of degree
    ``<= lmax`` exactly once ``n_theta > lmax`` and ``n_phi > 2 lmax``.
    ``equiangular`` uses cell midpoints in theta with the exact cell solid
    angle as weight.
    """
    check_nyquist(n_theta, n_phi, lmax)
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    if kind == "gauss_legendre_theta":
        x, w = np.polynomial.legendre.leggauss(n_theta)
        # descending x gives ascending theta
        x, w = x[::-1], w[::-1]
        theta = np.arccos(x)
        w_theta = w
    elif kind == "equiangular":
        edges = np.linspace(0.0, np.pi, n_theta + 1)
        theta = 0.5 * (edges[:-1] + edges[1:])
        w_theta = np.cos(edges[:-1]) - np.cos(edges[1:])
    else:
        raise GridConfigError(f"unknown grid kind {kind!r}; expected one of {GRID_KINDS}")
    weights = np.repeat(w_theta * (2 * np.pi / n_phi), n_phi)
    for arr in (theta, phi, weights):
        arr.setflags(write=False)
    return SphereGrid(n_theta, n_phi, kind, theta, phi, weights, lmax)


def _channel_blocks(layout: IrrepsLayout) -> tuple[int, int]:
    """Channel count and max degree of a layout usable for gridding."""
    mults = {layout.mult(l) for l in layout.degrees()}
    if len(mults) > 1:
        raise LayoutError(f"every degree needs the same multiplicity to grid, got {layout}")
    return (mults.pop() if mults else 0), layout.lmax


def coefficient_matrix(coeffs: SteerableTensor) -> np.ndarray:
    """Dense ``(C, (lmax+1)**2)`` coefficients; absent degrees are zero."""
    n_ch, lmax = _channel_blocks(coeffs.layout)
    mat = np.zeros((n_ch, (lmax + 1) ** 2))
    for l, blk in coeffs.by_degree().items():
        mat[:, l * l : (l + 1) ** 2] = blk
    return mat


def to_grid(coeffs: SteerableTensor, grid: SphereGrid) -> np.ndarray:
    """Evaluate ``sum_lm f_c^{lm} Y_lm`` at every node; shape ``(S, C)``."""
    mat = coefficient_matrix(coeffs)
    lmax = coeffs.layout.lmax
    if lmax > grid.lmax:
        check_nyquist(grid.n_theta, grid.n_phi, lmax)
    return grid.sh(lmax) @ mat.T


def from_grid(signal, grid: SphereGrid, lmax: int) -> SteerableTensor:
    """Quadrature projection ``f^{lm} = sum_s w_s f(s) Y_lm(s)`` per channel."""
    check_nyquist(grid.n_theta, grid.n_phi, lmax)
    values = np.asarray(signal, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != grid.size:
        raise ValueError(f"signal has {values.shape[0]} points, grid has {grid.size}")
    coeff = (grid.sh(lmax) * grid.weights[:, None]).T @ values  # ((L+1)^2, C)
    blocks = {l: coeff[l * l : (l + 1) ** 2].T for l in range(lmax + 1)}
    return SteerableTensor.from_degrees(blocks)


def grid_softmax(logits, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Softmax of ``logits / tau`` over the raw grid points (no quadrature weights)."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64).reshape(-1) / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def write_grid_csv(path, grid: SphereGrid, values, header: str = "value") -> None:
    """Write ``theta, phi, weight, value...`` rows (radians, 17 significant digits)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    theta, phi = grid.angles
    names = [header] if values.shape[1] == 1 else [f"{header}_{c}" for c in range(values.shape[1])]
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["theta", "phi", "weight", *names])
        for s in range(grid.size):
            row = [theta[s], phi[s], grid.weights[s], *values[s]]
            writer.writerow([f"{v:.17g}" for v in row])


def read_grid_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(theta_phi_weight (S, 3), values (S, C))`` from :func:`write_grid_csv` output."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :3], data[:, 3:]
