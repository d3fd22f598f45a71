"""Sparse finite-difference stencils on tensor grids.

Second-order central differences in the interior, periodic wrap on periodic
axes and one-sided second-order formulas at the two ends of a
non-periodic axis.  Every differential operator in the package is built
from these matrices, so identical stencils are used everywhere.
"""

from functools import lru_cache

import numpy as np
import scipy.sparse as sp


def first_1d(m, h, periodic):
    """First-derivative matrix on ``m`` nodes with spacing ``h``."""
    if m < 3:
        raise ValueError(f"need at least 3 nodes per axis, got {m}")
    rows, cols, vals = [], [], []
    for i in range(m):
        if periodic:
            entries = [((i - 1) % m, -0.5), ((i + 1) % m, 0.5)]
        elif i == 0:
            entries = [(0, -1.5), (1, 2.0), (2, -0.5)]
        elif i == m - 1:
            entries = [(m - 1, 1.5), (m - 2, -2.0), (m - 3, 0.5)]
        else:
            entries = [(i - 1, -0.5), (i + 1, 0.5)]
        for j, v in entries:
            rows.append(i)
            cols.append(j)
            vals.append(v / h)
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, m))


def second_1d(m, h, periodic):
    """Compact second-derivative matrix on ``m`` nodes."""
    if m < 4 and not periodic:
        raise ValueError(f"need at least 4 nodes on a non-periodic axis, got {m}")
    if m < 3:
        raise ValueError(f"need at least 3 nodes per axis, got {m}")
    rows, cols, vals = [], [], []
    for i in range(m):
        if periodic:
            entries = [((i - 1) % m, 1.0), (i, -2.0), ((i + 1) % m, 1.0)]
        elif i == 0:
            entries = [(0, 2.0), (1, -5.0), (2, 4.0), (3, -1.0)]
        elif i == m - 1:
            entries = [(m - 1, 2.0), (m - 2, -5.0), (m - 3, 4.0), (m - 4, -1.0)]
        else:
            entries = [(i - 1, 1.0), (i, -2.0), (i + 1, 1.0)]
        for j, v in entries:
            rows.append(i)
            cols.append(j)
            vals.append(v / h**2)
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, m))


def along_axis(op1d, shape, axis):
    """Lift a 1D operator to act on ``axis`` of a row-major grid."""
    out = sp.identity(1, format="csr")
    for k, m in enumerate(shape):
        factor = op1d if k == axis else sp.identity(m, format="csr")
        out = sp.kron(out, factor, format="csr")
    return out


class Stencils:
    """Cached derivative matrices for one grid layout."""

    def __init__(self, shape, h, periodic):
        self.shape = tuple(int(s) for s in shape)
        self.h = float(h)
        self.periodic = tuple(bool(p) for p in periodic)
        self.size = int(np.prod(self.shape))
        n = len(self.shape)
        self.d1 = [along_axis(first_1d(self.shape[k], h, self.periodic[k]), self.shape, k)
                   for k in range(n)]
        self.d2 = [along_axis(second_1d(self.shape[k], h, self.periodic[k]), self.shape, k)
                   for k in range(n)]
        self._mixed = {}

    def mixed(self, q, k):
        """Matrix of the mixed derivative; canonical axis order keeps it symmetric."""
        q, k = min(q, k), max(q, k)
        if (q, k) not in self._mixed:
            self._mixed[(q, k)] = (self.d1[q] @ self.d1[k]).tocsr()
        return self._mixed[(q, k)]

    def second(self, q, k):
        return self.d2[q] if q == k else self.mixed(q, k)

    def laplacian(self):
        return sum(self.d2[1:], self.d2[0]).tocsr()

    def apply(self, mat, values):
        """Apply ``mat`` to grid values; leading batch axes are allowed."""
        values = np.asarray(values, dtype=float)
        batch = values.shape[: values.ndim - len(self.shape)]
        flat = values.reshape(-1, self.size)
        out = (mat @ flat.T).T
        return out.reshape(batch + self.shape)

    def d(self, values, k):
        return self.apply(self.d1[k], values)

    def dd(self, values, q, k):
        return self.apply(self.second(q, k), values)


@lru_cache(maxsize=64)
def stencils_for(shape, h, periodic):
    return Stencils(shape, h, periodic)
