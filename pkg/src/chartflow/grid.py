"""Discrete calculus on chart grids.

Fields are plain numpy arrays over a chart grid, wrapped in
:class:`ChartField` at the public boundary.  All operators are linear,
second-order accurate and built from :mod:`chartflow._stencils`.
"""

from dataclasses import dataclass, field, replace
from itertools import combinations_with_replacement

import numpy as np

from chartflow.errors import GeometryError, NumericalError

__all__ = [
    "ChartField",
    "FieldNorms",
    "partial",
    "hessian",
    "divergence",
    "c12_norm",
    "norms_from_history",
    "transfer",
    "assemble_global",
    "restrict_global",
    "overlap_mismatch",
    "multi_indices",
    "dump_field",
    "load_field",
    "format_field",
    "parse_field",
]


@dataclass(eq=False)
class ChartField:
    """Samples of one scalar component on one chart grid.

    ``component`` is a free-form label such as ``"v1"``, ``"r2"`` or ``"p"``;
    ``tau`` is the rescaled time of the snapshot.
    """

    chart_id: int
    component: str
    values: np.ndarray
    tau: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise NumericalError(f"non-finite values in field {self.component}",
                                 chart=self.chart_id)

    @property
    def dims(self):
        return self.values.shape

    def with_values(self, values, component=None):
        return replace(self, values=values,
                       component=self.component if component is None else component)


@dataclass
class FieldNorms:
    """Sup-norms entering the ``|.|_{1,2}`` norm.

    ``sup_grad`` and ``sup_hess`` are sums over all multi-indices of order
    one and two respectively, so ``c12`` is the classical ``C^2`` norm plus
    the sup of the time derivative.
    """

    sup_value: float = 0.0
    sup_grad: float = 0.0
    sup_hess: float = 0.0
    sup_dt: float = 0.0
    per_alpha: dict = field(default_factory=dict)

    @property
    def c12(self):
        return self.sup_value + self.sup_grad + self.sup_hess + self.sup_dt

    @property
    def c2(self):
        """Spatial part only: sum over ``|alpha| <= 2`` of ``sup |D^alpha f|``."""
        return self.sup_value + self.sup_grad + self.sup_hess

    @classmethod
    def combine(cls, norms):
        """Componentwise maximum of several norm records."""
        norms = list(norms)
        if not norms:
            return cls()
        keys = set().union(*(nm.per_alpha for nm in norms))
        return cls(
            sup_value=max(nm.sup_value for nm in norms),
            sup_grad=max(nm.sup_grad for nm in norms),
            sup_hess=max(nm.sup_hess for nm in norms),
            sup_dt=max(nm.sup_dt for nm in norms),
            per_alpha={k: max(nm.per_alpha.get(k, 0.0) for nm in norms) for k in keys},
        )


def multi_indices(n, order):
    """All multi-indices of dimension ``n`` with ``|alpha| == order``."""
    out = []
    for axes in combinations_with_replacement(range(n), order):
        alpha = [0] * n
        for a in axes:
            alpha[a] += 1
        out.append(tuple(alpha))
    return out


def _check_axis(geometry, *axes):
    for k in axes:
        if not 0 <= k < geometry.n:
            raise GeometryError(f"axis {k} out of range for a {geometry.n}-dimensional chart")


def _values(f):
    return f.values if isinstance(f, ChartField) else np.asarray(f, dtype=float)


def _wrap(f, values, label):
    if isinstance(f, ChartField):
        return ChartField(f.chart_id, label, values, f.tau)
    return values


def partial(f, axis, geometry):
    """First partial derivative along ``axis`` (0-based)."""
    _check_axis(geometry, axis)
    vals = geometry.stencils.d(_values(f), axis)
    return _wrap(f, vals, f"d{axis}({getattr(f, 'component', '')})")


def hessian(f, q, k, geometry):
    """Second partial derivative; ``hessian(f, q, k)`` equals ``hessian(f, k, q)`` bitwise."""
    _check_axis(geometry, q, k)
    vals = geometry.stencils.dd(_values(f), q, k)
    return _wrap(f, vals, f"d{min(q, k)}{max(q, k)}({getattr(f, 'component', '')})")


def derivative(values, alpha, geometry):
    """``D^alpha`` for ``|alpha| <= 2`` on raw arrays (leading batch axes allowed)."""
    axes = [k for k, a in enumerate(alpha) for _ in range(a)]
    st = geometry.stencils
    if len(axes) == 0:
        return np.asarray(values, dtype=float)
    if len(axes) == 1:
        return st.d(values, axes[0])
    if len(axes) == 2:
        return st.dd(values, axes[0], axes[1])
    raise ValueError("derivatives above order 2 are not provided")


def divergence(v, geometry):
    """Divergence of a vector field given as ``n`` components.

    Includes the Christoffel term ``sum_{k,i} v^k G^i_{ki}``, which vanishes
    on flat charts.
    """
    comps = [_values(c) for c in v]
    if len(comps) != geometry.n:
        raise GeometryError(f"expected {geometry.n} components, got {len(comps)}")
    shapes = {c.shape[-geometry.n:] for c in comps}
    if shapes != {geometry.shape}:
        raise GeometryError(f"component grids {shapes} do not match chart grid {geometry.shape}")
    st = geometry.stencils
    out = sum(st.d(c, i) for i, c in enumerate(comps))
    gamma = geometry.christoffel
    if gamma is not None and np.any(gamma):
        trace = np.einsum("...iki->...k", gamma)
        out = out + sum(comps[k] * trace[..., k] for k in range(geometry.n))
    if isinstance(v[0], ChartField):
        return ChartField(v[0].chart_id, "div", out, v[0].tau)
    return out


def norms_from_history(values, taus, geometry):
    """:class:`FieldNorms` of a time history ``values[t, ...grid]``.

    Spatial sups run over all nodes and all stored snapshots; the time
    derivative is a forward difference between consecutive snapshots.
    """
    values = np.asarray(values, dtype=float)
    taus = np.asarray(taus, dtype=float)
    if values.shape[0] == 0:
        raise ValueError("empty history")
    per_alpha = {}
    for order in range(3):
        for alpha in multi_indices(geometry.n, order):
            per_alpha[alpha] = float(np.max(np.abs(derivative(values, alpha, geometry))))
    norms = FieldNorms(per_alpha=per_alpha)
    norms.sup_value = per_alpha[(0,) * geometry.n]
    norms.sup_grad = sum(per_alpha[a] for a in multi_indices(geometry.n, 1))
    norms.sup_hess = sum(per_alpha[a] for a in multi_indices(geometry.n, 2))
    if values.shape[0] > 1:
        dt = np.diff(taus)
        if np.any(dt <= 0):
            raise ValueError("snapshot times must be strictly increasing")
        rates = np.diff(values, axis=0) / dt.reshape((-1,) + (1,) * geometry.n)
        norms.sup_dt = float(np.max(np.abs(rates)))
    return norms


def c12_norm(history, geometry):
    """``|.|_{1,2}`` norm record of a time-indexed list of :class:`ChartField`.

    Needs at least two snapshots so that the time derivative is defined.
    """
    history = list(history)
    if len(history) < 2:
        raise ValueError("c12_norm needs at least 2 time samples")
    values = np.stack([h.values for h in history])
    taus = [h.tau for h in history]
    return norms_from_history(values, taus, geometry)


def transfer(f, target, atlas):
    """Copy a field from its chart onto the overlap with chart ``target``.

    Returns ``(field_on_target, mask)``; nodes outside the overlap are zero
    and ``mask`` marks the covered nodes.  Overlaps are grid aligned, so
    this is an exact index shift.
    """
    src = f.chart_id
    if (target, src) not in atlas.index_maps:
        raise GeometryError(f"charts {src} and {target} do not overlap")
    maps = atlas.index_maps[(target, src)]
    mask = atlas.overlap_mask(target, src)
    out = np.zeros(atlas.charts[target].shape)
    sel = np.ix_(*[np.clip(m, 0, None) for m in maps])
    out[mask] = f.values[sel][mask]
    return ChartField(target, f.component, out, f.tau), mask


def _lattice_index(atlas, j):
    return np.ix_(*atlas.lattice_indices(j))


def assemble_global(atlas, fields):
    """Blend per-chart arrays into one lattice array with the partition of unity.

    ``fields[j]`` has shape ``batch + chart_shape``; the result has shape
    ``batch + (resolution,) * n``.
    """
    n, N = atlas.n, atlas.resolution
    first = np.asarray(fields[0])
    batch = first.shape[: first.ndim - n]
    out = np.zeros(batch + (N,) * n)
    for j, f in enumerate(fields):
        idx = (Ellipsis,) + _lattice_index(atlas, j)
        out[idx] += atlas.bumps[j] * np.asarray(f)
    return out


def restrict_global(atlas, values):
    """Sample a lattice array on every chart grid."""
    values = np.asarray(values, dtype=float)
    return [values[(Ellipsis,) + _lattice_index(atlas, j)].copy() for j in range(len(atlas))]


def overlap_mismatch(atlas, fields, mask_fn=None):
    """``max_{j != k} sup |f_j - f_k|`` over shared nodes (batch axes included)."""
    worst = 0.0
    for (j, k), maps in atlas.index_maps.items():
        if j >= k:
            continue
        mask = atlas.overlap_mask(j, k)
        sel = np.ix_(*[np.clip(m, 0, None) for m in maps])
        fj = np.asarray(fields[j])
        fk = np.asarray(fields[k])[(Ellipsis,) + sel]
        diff = np.abs(fj - fk)[..., mask]
        if diff.size:
            worst = max(worst, float(diff.max()))
    return worst


def format_field(f):
    """Text dump: one header line, then row-major float64 values one per line."""
    dims = "x".join(str(d) for d in f.values.shape)
    header = f"CHARTFIELD v1 chart={f.chart_id} comp={f.component} dims={dims} tau={float(f.tau)!r}"
    body = "\n".join(repr(float(x)) for x in f.values.ravel())
    return header + "\n" + body + "\n"


def parse_field(text):
    lines = text.splitlines()
    head = lines[0].split()
    if head[:2] != ["CHARTFIELD", "v1"]:
        raise ValueError("not a CHARTFIELD v1 dump")
    meta = dict(item.split("=", 1) for item in head[2:])
    dims = tuple(int(d) for d in meta["dims"].split("x"))
    vals = np.array([float(x) for x in lines[1:] if x.strip()], dtype=float)
    if vals.size != int(np.prod(dims)):
        raise ValueError(f"expected {int(np.prod(dims))} values, found {vals.size}")
    return ChartField(int(meta["chart"]), meta["comp"], vals.reshape(dims), float(meta["tau"]))


def dump_field(f, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_field(f))


def load_field(path):
    with open(path, encoding="utf-8") as fh:
        return parse_field(fh.read())
