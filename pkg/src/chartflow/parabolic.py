"""Parabolic fundamental solutions and the implicit-Euler chart step.

The τ-rescaled momentum equation on a chart reads

    dv/dτ - ρν a:D²v - ρ b·∇v + ρ (w·∇) v = ρ s,

with the convection field ``w`` frozen from a previous iterate.  Production
stepping is implicit Euler on the chart grid; :class:`GaussianKernel` and
:func:`levy_expansion` give the continuous kernels used to check it.
"""

from dataclasses import dataclass
from functools import lru_cache
from math import factorial

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl
from scipy.signal import fftconvolve

from chartflow.errors import NumericalError
from chartflow.grid import ChartField

__all__ = [
    "GaussianKernel",
    "gaussian_eval",
    "LevyKernel",
    "levy_expansion",
    "ParabolicStepProblem",
    "StepResult",
    "parabolic_step",
    "step_operator",
    "levy_term_exact",
]


@dataclass(frozen=True, eq=False)
class GaussianKernel:
    """Fundamental solution of ``dτ - ρν a:D²`` for constant SPD ``a``."""

    n: int
    a: np.ndarray
    rho: float
    nu: float = 1.0

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        if a.shape != (self.n, self.n):
            raise ValueError(f"diffusion matrix must be {self.n}x{self.n}, got {a.shape}")
        if not np.allclose(a, a.T) or np.linalg.eigvalsh(a).min() <= 0:
            raise ValueError("diffusion matrix must be symmetric positive definite")
        if self.rho <= 0 or self.nu <= 0:
            raise ValueError("rho and nu must be positive")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "_inv", np.linalg.inv(a))
        object.__setattr__(self, "_det", float(np.linalg.det(a)))

    @property
    def scale(self):
        return self.rho * self.nu

    def std(self, dt):
        """Largest standard deviation of the kernel at duration ``dt``."""
        return float(np.sqrt(2.0 * self.scale * dt * np.linalg.eigvalsh(self.a).max()))

    def __call__(self, dt, dx):
        if dt <= 0:
            raise ValueError(f"kernel duration must be positive, got {dt}")
        dx = np.asarray(dx, dtype=float)
        if self.n == 1 and (dx.ndim == 0 or dx.shape[-1] != 1):
            dx = dx[..., None]
        quad = np.einsum("...i,ij,...j->...", dx, self._inv, dx)
        norm = self._det ** -0.5 * (4.0 * np.pi * self.scale * dt) ** (-self.n / 2)
        return norm * np.exp(-quad / (4.0 * self.scale * dt))

    def gradient(self, dt, dx):
        """``∇_x`` of the kernel, shape ``dx.shape[:-1] + (n,)``."""
        dx = np.asarray(dx, dtype=float)
        if self.n == 1 and (dx.ndim == 0 or dx.shape[-1] != 1):
            dx = dx[..., None]
        val = self(dt, dx)
        return -(dx @ self._inv.T) / (2.0 * self.scale * dt) * val[..., None]


def gaussian_eval(kernel, dt, dx):
    """Value of ``kernel`` at duration ``dt`` and offset ``dx``."""
    return kernel(dt, dx)


class LevyKernel:
    """Gaussian kernel corrected by a truncated Levy parametrix series.

    For constant drift ``b`` the first correction density is
    ``phi_1 = ρ b·∇N``; higher densities are space-time convolutions
    ``phi_{m+1} = phi_1 * phi_m``.  All integrals use the midpoint rule in
    time and a uniform grid in space.
    """

    def __init__(self, kernel, b, terms, n_sigma=32, points_per_std=4.0, width=8.0):
        if not 0 <= terms <= 3:
            raise ValueError(f"Levy expansion supports 0..3 terms, got {terms}")
        b = np.atleast_1d(np.asarray(b, dtype=float))
        if b.shape != (kernel.n,):
            raise ValueError(f"drift must have {kernel.n} components")
        if not np.all(np.isfinite(b)):
            raise ValueError("drift must be finite")
        self.kernel, self.b, self.terms = kernel, b, int(terms)
        self.n_sigma = int(n_sigma)
        self.points_per_std = float(points_per_std)
        self.width = float(width)

    def _grid(self, dt):
        k = self.kernel
        step = k.std(0.5 * dt / self.n_sigma) / self.points_per_std
        half = self.width * k.std(dt) + k.rho * np.abs(self.b).max() * dt * self.terms
        m = int(np.ceil(half / step))
        axis = step * np.arange(-m, m + 1)
        mesh = np.stack(np.meshgrid(*([axis] * k.n), indexing="ij"), axis=-1)
        return axis, mesh, step

    def _drift_density(self, t, mesh):
        return self.kernel.rho * self.kernel.gradient(t, mesh) @ self.b

    def correction_terms(self, dt, dx):
        """List of the ``terms`` corrections at duration ``dt`` and offsets ``dx``."""
        k = self.kernel
        dx = np.asarray(dx, dtype=float)
        if k.n == 1 and (dx.ndim == 0 or dx.shape[-1] != 1):
            dx = dx[..., None]
        if self.terms == 0:
            return []
        if not np.any(self.b):
            return [np.zeros(dx.shape[:-1]) for _ in range(self.terms)]
        _, mesh, step = self._grid(dt)
        cell = step ** k.n
        dsig = dt / self.n_sigma
        sig = (np.arange(self.n_sigma) + 0.5) * dsig
        drift_lag = {q: self._drift_density(q * dsig, mesh) for q in range(1, self.n_sigma)}
        phi = [self._drift_density(s, mesh) for s in sig]
        out = []
        for term in range(self.terms):
            if term > 0:
                nxt = []
                for q in range(self.n_sigma):
                    acc = np.zeros_like(phi[0])
                    for qq in range(q):
                        acc += fftconvolve(drift_lag[q - qq], phi[qq], mode="same")
                    nxt.append(acc * dsig * cell)
                phi = nxt
            flat_mesh = mesh.reshape(-1, k.n)
            total = np.zeros(dx.shape[:-1])
            for q in range(self.n_sigma):
                offsets = dx[..., None, :] - flat_mesh
                total += np.tensordot(k(dt - sig[q], offsets), phi[q].ravel(), axes=([-1], [0]))
            out.append(total * dsig * cell)
        return out

    def __call__(self, dt, dx):
        base = self.kernel(dt, dx)
        return base + sum(self.correction_terms(dt, dx), np.zeros_like(base))


def levy_expansion(kernel, b, terms, **quadrature):
    """Kernel evaluator ``N + sum_{m<=terms} N * phi_m`` for constant drift ``b``."""
    return LevyKernel(kernel, b, terms, **quadrature)


@dataclass(eq=False)
class ParabolicStepProblem:
    """One unit τ-step of the linear chart equation.

    ``initial`` is a :class:`ChartField` or a sequence of them (components
    sharing the operator).  ``convection`` is ``n`` arrays, each either a
    grid array (constant in τ) or shaped ``(substeps + 1,) + grid``.
    ``source`` and ``boundary`` are per component and defined at every
    τ-level: shapes ``(substeps + 1,) + grid`` and ``(substeps + 1, nb)``.
    The equation's right-hand side is ``ρ * source``.
    """

    chart: object
    initial: object
    rho: float
    nu: float = 1.0
    convection: object = None
    source: object = None
    boundary: object = None
    tau0: float = 0.0
    substeps: int = 16
    coeff_a: object = None
    coeff_b: object = None

    @property
    def chart_id(self):
        return self.chart.chart_id


@dataclass(eq=False)
class StepResult:
    """Solution history; ``values[level, comp]`` is a grid array."""

    chart_id: int
    taus: np.ndarray
    values: np.ndarray
    labels: tuple

    def field(self, level=-1, comp=0):
        return ChartField(self.chart_id, self.labels[comp], self.values[level, comp],
                          float(self.taus[level]))

    def history(self, comp=0):
        return [self.field(k, comp) for k in range(len(self.taus))]


def step_operator(chart, rho, nu, dtau, convection=None, coeff_a=None, coeff_b=None):
    """Sparse ``I - Δτ ρ (ν a:D² + b·∇ - w·∇)`` for one grid."""
    st = chart.stencils
    n = chart.n
    a = chart.coeff_a if coeff_a is None else np.asarray(coeff_a, float)
    b = chart.coeff_b if coeff_b is None else np.asarray(coeff_b, float)
    op = sp.csr_matrix((chart.size, chart.size))
    for q in range(n):
        for k in range(q, n):
            coef = a[..., q, k] if q == k else a[..., q, k] + a[..., k, q]
            if np.any(coef):
                op = op + nu * sp.diags(coef.ravel()) @ st.second(q, k)
    for k in range(n):
        drift = b[..., k].ravel().copy()
        if convection is not None:
            drift = drift - np.broadcast_to(convection[k], chart.shape).ravel()
        if np.any(drift):
            op = op + sp.diags(drift) @ st.d1[k]
    return (sp.identity(chart.size, format="csr") - dtau * rho * op).tocsr()


def _zero_rows(mat, rows, diagonal=None):
    mat = mat.tolil()
    for r in rows:
        mat.rows[r] = [] if diagonal is None else [r]
        mat.data[r] = [] if diagonal is None else [diagonal]
    return mat.tocsr()


class _StepSystem:
    """Implicit-Euler system of one chart, split as ``base + convection``.

    ``base`` (diffusion and drift) is factorised once.  With convection the
    system ``(base + sum_k diag(w_k) Dc_k) x = rhs`` is solved by
    preconditioned Richardson iteration on the base factorisation, which
    converges quickly because the step matrices are close to the identity;
    a direct factorisation is used when the iteration does not settle.
    """

    max_sweeps = 40

    def __init__(self, chart, rho, nu, dtau, dirichlet, coeff_a=None, coeff_b=None):
        self.chart = chart
        base = step_operator(chart, rho, nu, dtau, None, coeff_a, coeff_b)
        conv = [(dtau * rho) * chart.stencils.d1[k] for k in range(chart.n)]
        if dirichlet:
            rows = chart.boundary_index
            base = _zero_rows(base, rows, diagonal=1.0)
            conv = [_zero_rows(c, rows) for c in conv]
        self.base = base.tocsc()
        self.conv = [c.tocsr() for c in conv]
        try:
            self.base_lu = spl.splu(self.base)
        except RuntimeError as exc:
            raise NumericalError(f"parabolic solve failed: {exc}", chart=chart.chart_id) from exc

    def _direct(self, w, rhs):
        mat = self.base + sum(sp.diags(wk) @ ck for wk, ck in zip(w, self.conv))
        try:
            return spl.splu(mat.tocsc()).solve(rhs)
        except RuntimeError as exc:
            raise NumericalError(f"parabolic solve failed: {exc}", chart=self.chart.chart_id) from exc

    def solve(self, rhs, w=None):
        """Solve for ``rhs`` of shape ``(size, ncomp)``; ``w`` is ``n`` flat arrays or None."""
        if w is None:
            return self.base_lu.solve(rhs)
        w = [wk[:, None] for wk in w]

        def apply_conv(x):
            return sum(wk * (ck @ x) for wk, ck in zip(w, self.conv))

        x = self.base_lu.solve(rhs)
        prev = np.inf
        for _ in range(self.max_sweeps):
            nxt = self.base_lu.solve(rhs - apply_conv(x))
            diff = float(np.max(np.abs(nxt - x))) if x.size else 0.0
            x = nxt
            scale = float(np.max(np.abs(x))) if x.size else 0.0
            if diff <= 4 * np.finfo(float).eps * scale or diff == 0.0:
                return x
            if diff >= prev:
                # stalled: accept at the rounding floor, otherwise factorise directly
                if diff <= 1e-13 * max(scale, 1e-300):
                    return x
                break
            prev = diff
        return self._direct([wk[:, 0] for wk in w], rhs)


@lru_cache(maxsize=128)
def _cached_system(chart, rho, nu, dtau, dirichlet):
    return _StepSystem(chart, rho, nu, dtau, dirichlet)


def parabolic_step(problem):
    """Integrate one unit τ-step with ``substeps`` implicit-Euler substeps."""
    pb = problem
    chart = pb.chart
    if pb.substeps < 1:
        raise ValueError("substeps must be at least 1")
    fields = [pb.initial] if isinstance(pb.initial, ChartField) else list(pb.initial)
    labels = tuple(f.component for f in fields)
    ncomp, M, shape = len(fields), int(pb.substeps), chart.shape
    dtau = 1.0 / M
    conv = None
    if pb.convection is not None:
        conv = [np.asarray(c, dtype=float) for c in pb.convection]
        if len(conv) != chart.n:
            raise ValueError(f"convection needs {chart.n} components")
        if any(not np.all(np.isfinite(c)) for c in conv):
            raise NumericalError("non-finite convection field", chart=chart.chart_id)
        conv = [c.reshape(M + 1, -1) if c.shape == (M + 1,) + shape
                else np.broadcast_to(c.ravel(), (M + 1, chart.size)) for c in conv]
    source = None
    if pb.source is not None:
        source = np.asarray(pb.source, dtype=float).reshape((ncomp, M + 1) + shape)
    bnd = None
    if pb.boundary is not None:
        if not chart.has_boundary:
            raise ValueError("boundary data given for a chart without boundary")
        bnd = np.asarray(pb.boundary, dtype=float).reshape(ncomp, M + 1, -1)
        if bnd.shape[2] != chart.boundary_index.size:
            raise ValueError("boundary data length does not match boundary node count")
    if pb.coeff_a is None and pb.coeff_b is None:
        system = _cached_system(chart, float(pb.rho), float(pb.nu), dtau, bnd is not None)
    else:
        system = _StepSystem(chart, pb.rho, pb.nu, dtau, bnd is not None, pb.coeff_a, pb.coeff_b)

    out = np.empty((M + 1, ncomp, chart.size))
    out[0] = np.stack([f.values.ravel() for f in fields])
    for k in range(1, M + 1):
        rhs = out[k - 1].copy()
        if source is not None:
            rhs += dtau * pb.rho * source[:, k].reshape(ncomp, -1)
        if bnd is not None:
            rhs[:, chart.boundary_index] = bnd[:, k]
        w = None if conv is None else [c[k] for c in conv]
        out[k] = system.solve(np.ascontiguousarray(rhs.T), w).T
        if not np.all(np.isfinite(out[k])):
            raise NumericalError(f"non-finite values after substep {k}", chart=chart.chart_id)
    taus = pb.tau0 + np.arange(M + 1) * dtau
    return StepResult(chart.chart_id, taus, out.reshape((M + 1, ncomp) + shape), labels)


def levy_term_exact(kernel, b, order, dt, dx):
    """Closed form ``(ρ dt)^m / m! (b·∇)^m N`` of the m-th term for constant drift (m <= 2)."""
    dx = np.asarray(dx, dtype=float)
    if kernel.n == 1 and (dx.ndim == 0 or dx.shape[-1] != 1):
        dx = dx[..., None]
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if order == 1:
        d = kernel.gradient(dt, dx) @ b
    elif order == 2:
        inv = kernel._inv
        s = 2.0 * kernel.scale * dt
        u = (dx @ inv.T) @ b / s
        d = (u**2 - b @ inv @ b / s) * kernel(dt, dx)
    else:
        raise ValueError("closed form provided for orders 1 and 2")
    return (kernel.rho * dt) ** order / factorial(order) * d
