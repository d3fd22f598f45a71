"""Leray source functional and its per-chart decomposition.

The pressure satisfies ``-Lap p = S`` with

    S = -sum a_{jk,i} D_j D_k v^i - sum b_{k,i} D_k v^i + sum v^i_{,k} v^k_{,i},

and enters the momentum equation as the source ``-grad p``.  On a chart
with boundary the pressure splits into ``p1`` (interior source, zero
boundary values) and ``p2`` (harmonic extension of boundary data).  The
``p1`` part gives the interior source, the ``p2`` part the coupling source,
which is the only channel through which charts talk to each other.

Two prescriptions for the boundary data are provided:

``"pressure"`` (default)
    The partition-weighted blend of the neighbours' pressures from the
    previous coupling iterate.  Iterating this is an overlapping Schwarz
    method for the global pressure and converges to the periodic solution.
``"functional"``
    The literal prescription ``g = -S`` evaluated from the neighbours'
    velocities.  Kept for comparison; it does not reproduce the periodic
    pressure.
"""

from dataclasses import dataclass

import numpy as np

from chartflow.elliptic import frame_layers, poisson_solver
from chartflow.errors import GeometryError, NumericalError
from chartflow.grid import ChartField, assemble_global

__all__ = [
    "LeraySources",
    "COUPLING_MODES",
    "S_FORMS",
    "s_functional",
    "s_interior",
    "s_coupling",
    "boundary_pressure_data",
    "boundary_blend",
    "global_mean",
    "consistent_pressure",
    "leray_sources",
]

COUPLING_MODES = ("pressure", "functional")
S_FORMS = ("product", "conservative")


def _arrays(v):
    return [c.values if isinstance(c, ChartField) else np.asarray(c, dtype=float) for c in v]


def s_functional(v, geometry, nu=1.0, form="product"):
    """Scalar Leray source ``S`` of a velocity given as ``n`` components.

    ``form="product"`` evaluates the quadratic term as
    ``sum v^i_{,k} v^k_{,i}``.  ``form="conservative"`` evaluates it as
    ``sum_i D_i (sum_k v^k D_k v^i)``, which equals the product form for
    divergence-free fields and is the exact discrete divergence of the
    convection term.  The coefficient terms are multiplied by ``nu``, the
    factor in front of the diffusion operator.

    Components may carry leading batch axes (for example τ-levels).
    Returns a :class:`ChartField` when the input components are fields.
    """
    comps = _arrays(v)
    n = geometry.n
    if len(comps) != n:
        raise GeometryError(f"expected {n} velocity components, got {len(comps)}")
    if form not in S_FORMS:
        raise ValueError(f"unknown form '{form}'")
    st = geometry.stencils
    grads = [[st.d(comps[i], k) for k in range(n)] for i in range(n)]
    out = np.zeros_like(comps[0])
    if form == "product":
        for i in range(n):
            for k in range(n):
                out += grads[i][k] * grads[k][i]
    else:
        for i in range(n):
            out += st.d(sum(comps[k] * grads[i][k] for k in range(n)), i)
    a, b = geometry.coeff_a, geometry.coeff_b
    if a is not None and np.ptp(a, axis=tuple(range(n))).any():
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    da = st.d(a[..., j, k], i)
                    if np.any(da):
                        out -= nu * da * st.dd(comps[i], j, k)
    if b is not None and np.any(b):
        for i in range(n):
            for k in range(n):
                db = st.d(b[..., k], i)
                if np.any(db):
                    out -= db * grads[i][k]
    if isinstance(v[0], ChartField):
        return ChartField(v[0].chart_id, "S", out, v[0].tau)
    return out


def _neg_grad(p, chart):
    return [-chart.stencils.d(p, i) for i in range(chart.n)]


def s_interior(v, geometry, mean=0.0, return_pressure=False, operator="laplacian",
               form="product", nu=1.0):
    """Interior source ``-grad p1`` with ``Lap p1 = -(S - mean)``, ``p1 = 0`` on the boundary.

    ``mean`` removes a constant from ``S``; the scheme passes the global
    partition-of-unity mean so the torus problem stays solvable.
    """
    s = s_functional(v, geometry, nu=nu, form=form)
    s = s.values if isinstance(s, ChartField) else s
    mean = np.asarray(mean, dtype=float)
    rhs = -(s - mean.reshape(mean.shape + (1,) * geometry.n))
    p1 = poisson_solver(geometry, operator).interior_part(rhs)
    grads = _neg_grad(p1, geometry)
    if isinstance(v[0], ChartField):
        grads = [ChartField(geometry.chart_id, f"s_int{i}", g, v[0].tau) for i, g in enumerate(grads)]
    return (grads, p1) if return_pressure else grads


class _Blend:
    """Per-boundary-node neighbour lookups of one chart."""

    def __init__(self, atlas, j, layers=1):
        chart = atlas.charts[j]
        self.chart_id = j
        bidx = chart.frame_index(layers)
        coords = np.unravel_index(bidx, chart.shape)
        self.sources = []
        total = np.zeros(bidx.size)
        for k in sorted(atlas.neighbor_sets[j]):
            if k == j:
                continue
            maps = atlas.index_maps[(j, k)]
            local = [maps[ax][coords[ax]] for ax in range(chart.n)]
            inside = np.logical_and.reduce([m >= 0 for m in local])
            if not inside.any():
                continue
            shape_k = atlas.charts[k].shape
            flat_k = np.ravel_multi_index([np.where(inside, m, 0) for m in local], shape_k)
            w = np.where(inside, atlas.bumps[k].ravel()[flat_k], 0.0)
            if not np.any(w):
                continue
            self.sources.append((k, flat_k, w))
            total += w
        if bidx.size and np.any(total <= 0):
            bad = int(bidx[np.argmin(total)])
            raise GeometryError(f"boundary node {bad} of chart {j} is not covered by any "
                                "neighbour chart interior")
        self.sources = [(k, idx, w / np.where(total > 0, total, 1.0)) for k, idx, w in self.sources]
        self.size = bidx.size
        self.shapes = {c.chart_id: c.shape for c in atlas.charts}

    def apply(self, values):
        """Blend neighbour arrays ``values[k]`` (batch + grid) onto the boundary nodes."""
        out = None
        for k, idx, w in self.sources:
            arr = np.asarray(values[k], dtype=float)
            nd = len(self.shapes[k])
            flat = arr.reshape(arr.shape[: arr.ndim - nd] + (-1,))
            contrib = flat[..., idx] * w
            out = contrib if out is None else out + contrib
        return out


_BLEND_CACHE = {}


def boundary_blend(atlas, j, layers=1):
    """Cached :class:`_Blend` for the ``layers``-thick frame of chart ``j``."""
    key = (id(atlas), j, layers)
    hit = _BLEND_CACHE.get(key)
    if hit is None or hit[0] is not atlas:
        hit = (atlas, _Blend(atlas, j, layers))
        _BLEND_CACHE[key] = hit
    return hit[1]


def boundary_pressure_data(neighbor_fields, atlas, j, mode="pressure", operator="laplacian"):
    """Dirichlet data for chart ``j``'s pressure from neighbour charts.

    ``neighbor_fields`` maps chart id to either its pressure array
    (``mode="pressure"``) or its ``n`` velocity component arrays
    (``mode="functional"``); arrays may carry leading batch axes.  The
    frame filled is the one the ``operator`` solver expects.
    """
    if mode not in COUPLING_MODES:
        raise ValueError(f"unknown coupling mode '{mode}'")
    blend = boundary_blend(atlas, j, frame_layers(operator))
    if blend.size == 0 or not blend.sources:
        return np.zeros(0)
    values = {}
    for k, _, _ in blend.sources:
        present = k in neighbor_fields if isinstance(neighbor_fields, dict) else k < len(neighbor_fields)
        if not present or neighbor_fields[k] is None:
            raise GeometryError(f"missing neighbour chart {k} for chart {j}")
        if mode == "pressure":
            values[k] = np.asarray(neighbor_fields[k], dtype=float)
        else:
            values[k] = -np.asarray(s_functional(_arrays(neighbor_fields[k]), atlas.charts[k]))
    return blend.apply(values)


def s_coupling(neighbor_fields, atlas, j, mode="pressure", return_pressure=False,
               operator="laplacian"):
    """Coupling source ``-grad p2`` of chart ``j`` from neighbour data.

    A chart without boundary (single-chart atlas) has no coupling and gets
    zero fields.
    """
    chart = atlas.charts[j]
    solver = poisson_solver(chart, operator)
    blend = boundary_blend(atlas, j, frame_layers(operator))
    if not chart.has_boundary or not blend.sources:
        p2 = np.zeros(chart.shape)
    else:
        g = boundary_pressure_data(neighbor_fields, atlas, j, mode, operator)
        p2 = solver.boundary_part(g)
    grads = _neg_grad(p2, chart)
    return (grads, p2) if return_pressure else grads


def global_mean(atlas, fields):
    """Partition-of-unity quadrature of per-chart scalars over the unit torus.

    Fields may carry leading batch axes; one mean per batch entry is returned.
    """
    total = assemble_global(atlas, fields)
    return total.mean(axis=tuple(range(total.ndim - atlas.n, total.ndim)))


def consistent_pressure(atlas, sources, initial=None, tol=1e-10, max_iter=200,
                        operator="laplacian", strict=True):
    """Overlapping Schwarz solve of ``-Lap p = S`` on the torus.

    ``sources[j]`` is ``S`` on chart ``j`` (batch axes allowed).  Returns
    ``(pressures, iterations)``; the global mean of ``S`` is removed first.
    Convergence is judged on the sweep-to-sweep change with its mean
    removed, since a uniform shift does not affect the gradient.  With
    ``strict=False`` the last sweep is returned instead of raising.
    """
    charts = atlas.charts
    mean = global_mean(atlas, sources)
    mean = np.asarray(mean)
    rhs = [-(np.asarray(s) - mean.reshape(mean.shape + (1,) * atlas.n)) for s in sources]
    p1 = [poisson_solver(c, operator).interior_part(f) for c, f in zip(charts, rhs)]
    if len(charts) == 1 and not charts[0].has_boundary:
        return p1, 1
    p = [np.zeros_like(x) for x in p1] if initial is None else [np.array(x, float) for x in initial]
    grid_axes = tuple(range(-atlas.n, 0))
    for it in range(1, max_iter + 1):
        new = []
        for j, c in enumerate(charts):
            g = boundary_pressure_data(p, atlas, j, "pressure", operator)
            new.append(p1[j] + poisson_solver(c, operator).boundary_part(g))
        delta = [a - b for a, b in zip(new, p)]
        shift = np.mean([d.mean(axis=grid_axes, keepdims=True) for d in delta], axis=0)
        change = max(float(np.max(np.abs(d - shift))) for d in delta)
        p = new
        if change <= tol:
            return p, it
    if not strict:
        return p, max_iter
    raise NumericalError(f"pressure Schwarz iteration did not reach {tol:g} in {max_iter} sweeps")


@dataclass(eq=False)
class LeraySources:
    """Leray sources of every chart.

    ``s_interior[j]`` and ``s_coupling[j]`` hold ``n`` arrays each;
    ``s_raw[j]`` is the scalar ``S`` before any elliptic solve.
    """

    s_interior: list
    s_coupling: list
    s_raw: list
    pressure: list = None


def leray_sources(atlas, fields, neighbor_data=None, mode="pressure", operator="laplacian",
                  form="product", nu=1.0):
    """All per-chart Leray sources for velocity ``fields[j]`` (``n`` arrays each).

    ``neighbor_data`` supplies the previous coupling iterate: pressures in
    ``"pressure"`` mode, velocities in ``"functional"`` mode.  When omitted
    the current fields are used (and, in pressure mode, their static
    Schwarz pressure).
    """
    raw = [s_functional(f, c, nu=nu, form=form) for f, c in zip(fields, atlas.charts)]
    mean = global_mean(atlas, raw)
    if neighbor_data is None:
        neighbor_data = (fields if mode == "functional"
                         else consistent_pressure(atlas, raw, operator=operator)[0])
    s_int, s_coup, press = [], [], []
    for j, c in enumerate(atlas.charts):
        gi, p1 = s_interior(fields[j], c, mean=mean, return_pressure=True, operator=operator,
                            form=form, nu=nu)
        gc, p2 = s_coupling(neighbor_data, atlas, j, mode, return_pressure=True, operator=operator)
        s_int.append(gi)
        s_coup.append(gc)
        press.append(p1 + p2)
    return LeraySources(s_int, s_coup, raw, press)
