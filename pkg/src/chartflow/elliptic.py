"""Per-chart Dirichlet Poisson problems.

The pressure on a chart is split as ``p = p1 + p2``: ``p1`` solves
``Lap p1 = f`` with zero boundary values, ``p2`` is the discrete harmonic
extension of the boundary data ``g``.  The production path is a sparse LU
solve; :func:`assemble_green_matrix` materialises the discrete Green's
function and Poisson kernel so the convolution representation can be
checked against it.

On a fully periodic chart there is no boundary: the problem is the
periodic Poisson equation, solved for the zero-mean solution after the
zero-mean part of ``f`` is removed.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl
from scipy.sparse.csgraph import connected_components

from chartflow.errors import GeometryError, NumericalError
from chartflow.grid import ChartField

__all__ = [
    "DirichletProblem",
    "DirichletSolution",
    "GreenMatrix",
    "PoissonSolver",
    "poisson_solver",
    "solve_dirichlet",
    "assemble_green_matrix",
    "leray_gradient",
    "GREEN_SIZE_LIMIT",
    "OPERATORS",
    "laplacian_matrix",
    "frame_layers",
]

GREEN_SIZE_LIMIT = 10_000
OPERATORS = ("laplacian", "wide")


def laplacian_matrix(chart, operator="laplacian"):
    """Discrete Laplacian of a chart.

    ``"laplacian"`` is the compact (2n+1)-point stencil.  ``"wide"`` is the
    composition ``sum_k D_k D_k`` of the first-derivative stencils, the
    Laplacian that is exactly consistent with the discrete gradient and
    divergence.
    """
    st = chart.stencils
    if operator == "laplacian":
        return st.laplacian()
    if operator == "wide":
        return sum((st.d1[k] @ st.d1[k] for k in range(1, chart.n)), st.d1[0] @ st.d1[0]).tocsr()
    raise ValueError(f"unknown operator '{operator}'")


def frame_layers(operator):
    """Dirichlet frame thickness so every interior row uses central stencils only."""
    return 2 if operator == "wide" else 1


def _divergence_form(chart, coeff):
    """Matrix of ``div(a grad p)`` with face-averaged scalar ``a`` per axis.

    ``coeff`` is either a scalar field (isotropic) or a field of diagonal
    matrices; off-diagonal entries must vanish.
    """
    coeff = np.asarray(coeff, dtype=float)
    n, shape, h = chart.n, chart.shape, chart.spacing
    if coeff.shape == shape:
        diag = [coeff] * n
    elif coeff.shape == shape + (n, n):
        off = coeff - np.einsum("...ii->...i", coeff)[..., None] * np.eye(n)
        if np.any(off):
            raise ValueError("only diagonal diffusion tensors are supported in div(a grad)")
        diag = [coeff[..., k, k] for k in range(n)]
    else:
        raise ValueError(f"coefficient shape {coeff.shape} does not match chart {shape}")
    size = chart.size
    idx = np.arange(size).reshape(shape)
    rows, cols, vals = [], [], []
    for k in range(n):
        a = diag[k]
        for step in (1, -1):
            nb = np.roll(idx, -step, axis=k)
            a_face = 0.5 * (a + np.roll(a, -step, axis=k))
            valid = np.ones(shape, dtype=bool)
            if not chart.periodic[k]:
                sl = [slice(None)] * n
                sl[k] = -1 if step == 1 else 0
                valid[tuple(sl)] = False
            rows += [idx[valid], idx[valid]]
            cols += [nb[valid], idx[valid]]
            vals += [a_face[valid] / h**2, -a_face[valid] / h**2]
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(size, size))


class PoissonSolver:
    """Factorised Dirichlet (or periodic) Poisson operator for one chart."""

    def __init__(self, chart, coeff=None, operator="laplacian"):
        self.chart = chart
        self.operator = operator
        if coeff is None:
            full = laplacian_matrix(chart, operator)
        else:
            full = _divergence_form(chart, coeff)
        self.periodic = not chart.has_boundary
        size = chart.size
        if self.periodic:
            # one null vector per connected component of the stencil graph
            ncomp, labels = connected_components(full, directed=False)
            self._labels, self._ncomp = labels, ncomp
            self._pins = np.array([np.flatnonzero(labels == c)[0] for c in range(ncomp)])
            mat = full.tolil()
            for pin in self._pins:
                mat.rows[pin] = [pin]
                mat.data[pin] = [1.0]
            self.interior = np.arange(size)
            self.boundary = np.array([], dtype=int)
            self._coupling = None
            system = mat.tocsc()
        else:
            self.boundary = chart.frame_index(frame_layers(operator if coeff is None else None))
            self.interior = np.setdiff1d(np.arange(size), self.boundary)
            full = full.tocsr()
            system = full[self.interior][:, self.interior].tocsc()
            self._coupling = full[self.interior][:, self.boundary].tocsr()
        try:
            self._lu = spl.splu(system)
        except RuntimeError as exc:
            raise NumericalError(f"singular Poisson operator: {exc}", chart=chart.chart_id) from exc

    def _solve(self, rhs):
        out = self._lu.solve(np.ascontiguousarray(rhs))
        if not np.all(np.isfinite(out)):
            raise NumericalError("Poisson solve produced non-finite values", chart=self.chart.chart_id)
        return out

    def _batch(self, arr, tail):
        arr = np.asarray(arr, dtype=float)
        batch = arr.shape[: arr.ndim - tail]
        return arr.reshape((-1,) + arr.shape[arr.ndim - tail:]), batch

    def _component_means(self, flat):
        if self._ncomp == 1:
            return flat.mean(axis=1, keepdims=True)
        out = np.empty_like(flat)
        for c in range(self._ncomp):
            sel = self._labels == c
            out[:, sel] = flat[:, sel].mean(axis=1, keepdims=True)
        return out

    def interior_part(self, f):
        """``p1``: ``Lap p1 = f`` inside, ``p1 = 0`` on the boundary (periodic: zero mean)."""
        c = self.chart
        flat, batch = self._batch(f, c.n)
        flat = flat.reshape(flat.shape[0], c.size)
        out = np.zeros_like(flat)
        if self.periodic:
            rhs = flat - self._component_means(flat)
            rhs[:, self._pins] = 0.0
            sol = self._solve(rhs.T).T
            out = sol - self._component_means(sol)
        else:
            out[:, self.interior] = self._solve(flat[:, self.interior].T).T
        return out.reshape(batch + c.shape)

    def boundary_part(self, g):
        """``p2``: discrete harmonic extension of boundary values ``g``."""
        c = self.chart
        flat, batch = self._batch(g, 1)
        out = np.zeros((flat.shape[0], c.size))
        if self.periodic:
            if flat.shape[1]:
                raise GeometryError("periodic chart has no boundary nodes")
            return out.reshape(batch + c.shape)
        if flat.shape[1] != self.boundary.size:
            raise ValueError(f"expected {self.boundary.size} boundary values, got {flat.shape[1]}")
        rhs = -(self._coupling @ flat.T)
        out[:, self.interior] = self._solve(rhs).T
        out[:, self.boundary] = flat
        return out.reshape(batch + c.shape)

    def solve(self, f, g=None):
        p1 = self.interior_part(f)
        if g is None or self.periodic:
            return p1, np.zeros_like(p1)
        return p1, self.boundary_part(g)


@lru_cache(maxsize=256)
def poisson_solver(chart, operator="laplacian"):
    """Cached solver for ``chart`` (charts hash by identity)."""
    return PoissonSolver(chart, operator=operator)


@dataclass(eq=False)
class DirichletProblem:
    """``L p = rhs`` in the chart interior, ``p = boundary`` on the boundary.

    ``operator`` is ``"laplacian"`` (compact stencil), ``"wide"`` (see
    :func:`laplacian_matrix`) or a coefficient field ``a`` selecting
    ``div(a grad p)``.  ``boundary`` lists values at the chart's boundary
    nodes in row-major order: the edge nodes for the compact stencil, the
    two outermost layers for ``"wide"`` (``chart.frame_index(2)``).
    """

    chart: object
    rhs: object
    boundary: object = None
    operator: object = "laplacian"

    def __post_init__(self):
        if self.boundary is not None:
            b = np.asarray(self.boundary, dtype=float)
            layers = frame_layers(self.operator) if isinstance(self.operator, str) else 1
            size = self.chart.frame_index(layers).size
            if b.shape != (size,):
                raise ValueError(f"boundary array has shape {b.shape}, expected ({size},)")


@dataclass(eq=False)
class DirichletSolution:
    p: ChartField
    p1: ChartField
    p2: ChartField


def _solver_for(problem):
    if isinstance(problem.operator, str):
        if problem.operator not in OPERATORS:
            raise ValueError(f"unknown operator '{problem.operator}'")
        return poisson_solver(problem.chart, problem.operator)
    return PoissonSolver(problem.chart, coeff=problem.operator)


def solve_dirichlet(problem):
    """Solve a :class:`DirichletProblem`, returning ``p`` and both parts."""
    chart = problem.chart
    rhs = problem.rhs.values if isinstance(problem.rhs, ChartField) else np.asarray(problem.rhs, float)
    tau = problem.rhs.tau if isinstance(problem.rhs, ChartField) else 0.0
    solver = _solver_for(problem)
    p1, p2 = solver.solve(rhs, problem.boundary)
    cid = chart.chart_id
    return DirichletSolution(
        p=ChartField(cid, "p", p1 + p2, tau),
        p1=ChartField(cid, "p1", p1, tau),
        p2=ChartField(cid, "p2", p2, tau),
    )


@dataclass(eq=False)
class GreenMatrix:
    """Dense discrete Green's function and Poisson kernel of one chart.

    ``interior_block[x, y]`` maps quadrature-weighted interior sources
    ``f(y) h^n`` to interior values; ``boundary_block[x, b]`` maps boundary
    data to interior values.
    """

    chart_id: int
    interior_block: np.ndarray
    boundary_block: np.ndarray
    interior_index: np.ndarray
    boundary_index: np.ndarray
    weight: float

    def apply(self, f, g):
        """Full-grid ``p = int G f + int dG/dnu g`` evaluated through the matrices."""
        f = np.asarray(f, dtype=float).ravel()
        g = np.asarray(g, dtype=float)
        size = self.interior_index.size + self.boundary_index.size
        out = np.zeros(size)
        out[self.interior_index] = (self.interior_block @ (f[self.interior_index] * self.weight)
                                    + self.boundary_block @ g)
        out[self.boundary_index] = g
        return out


def assemble_green_matrix(chart, operator="laplacian"):
    """Materialise the Green's function by solving with unit sources."""
    if not chart.has_boundary:
        raise GeometryError("Green matrix needs a chart with a boundary")
    solver = _solver_for(DirichletProblem(chart, np.zeros(chart.shape), None, operator))
    n_int = solver.interior.size
    if n_int > GREEN_SIZE_LIMIT:
        raise ValueError(f"{n_int} interior nodes exceed the dense Green matrix limit "
                         f"{GREEN_SIZE_LIMIT}")
    weight = chart.spacing ** chart.n
    interior_block = solver._solve(np.eye(n_int)) / weight
    boundary_block = solver._solve(-(solver._coupling @ np.eye(solver.boundary.size)))
    return GreenMatrix(chart.chart_id, interior_block, np.asarray(boundary_block),
                       solver.interior, solver.boundary, weight)


def leray_gradient(pressure, chart):
    """Gradient components ``dp/dx_i`` of a chart pressure."""
    vals = pressure.values if isinstance(pressure, ChartField) else np.asarray(pressure, float)
    grads = [chart.stencils.d(vals, i) for i in range(chart.n)]
    if isinstance(pressure, ChartField):
        return [ChartField(pressure.chart_id, f"dp{i}", g, pressure.tau) for i, g in enumerate(grads)]
    return grads
