"""Transforms between mode coefficients and the in-plane collocation grid."""

from __future__ import annotations

from functools import cached_property

import numpy as np

from .geometry import Discretization


class Collocation:
    """Uniform grid of ``n`` points per periodic direction, ``n >= 2(2M+1)``.

    Physical arrays have the flattened grid (row-major, x1 slowest) as their
    leading axis. Coefficients follow f(x) = sum_xi c_xi exp(2 pi i xi.x).
    """

    def __init__(self, disc: Discretization, n: int | None = None):
        self.disc = disc
        self.d = disc.d
        self.n = int(n) if n is not None else disc.n_colloc
        if self.n < 2 * disc.M + 1:
            raise ValueError("collocation grid too coarse for the mode set")
        self.shape = (self.n,) * self.d
        self.size = self.n**self.d
        self._index = tuple(np.mod(disc.modes[:, j], self.n) for j in range(self.d))

    @cached_property
    def points(self) -> np.ndarray:
        """Grid coordinates, shape (size, d)."""
        axis = np.arange(self.n) / self.n
        mesh = np.meshgrid(*([axis] * self.d), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """(x1, x2) columns; x2 is zero when the plane is one-dimensional."""
        pts = self.points
        x2 = pts[:, 1] if self.d == 2 else np.zeros(self.size)
        return pts[:, 0], x2

    def to_physical(self, coeffs: np.ndarray, real: bool = True) -> np.ndarray:
        coeffs = np.asarray(coeffs)
        rest = coeffs.shape[1:]
        full = np.zeros(self.shape + rest, dtype=complex)
        full[self._index] = coeffs
        axes = tuple(range(self.d))
        vals = np.fft.ifftn(full, axes=axes) * self.size
        vals = vals.reshape((self.size,) + rest)
        return vals.real.copy() if real else vals

    def to_modes(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values)
        rest = values.shape[1:]
        grid = values.reshape(self.shape + rest)
        axes = tuple(range(self.d))
        spec = np.fft.fftn(grid, axes=axes) / self.size
        return spec[self._index]

    def mean(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values).mean(axis=0)
