"""Charts, atlases and partitions of unity on the flat torus.

The manifold is the periodic unit torus ``[0, 1)^n``.  A shared global
lattice with ``resolution`` nodes per unit length carries every chart
grid, so chart overlaps are grid aligned and moving a field from one chart
to another is an exact index shift.

Each chart is an axis-aligned box.  With ``charts_per_axis == 1`` the single
chart is the whole torus and all of its axes are periodic; otherwise the
charts are congruent boxes ``[j/K - d, (j+1)/K + d]`` per axis, where
``d = overlap_fraction / K``, and carry non-periodic grids.
"""

import dataclasses
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from chartflow._stencils import stencils_for
from chartflow.errors import GeometryError

__all__ = [
    "ChartGeometry",
    "Atlas",
    "build_torus_atlas",
    "box_chart",
    "christoffel_from_metric",
    "coefficient_preset",
    "smoothstep",
    "min_ellipticity",
]


@dataclass(frozen=True, eq=False)
class ChartGeometry:
    """Geometry and operator coefficients sampled on one chart grid.

    Attributes
    ----------
    chart_id : int
    lower : tuple of float
        Coordinates of grid node 0 (the lower corner of the box).
    shape : tuple of int
        Nodes per axis.
    spacing : float
        Grid spacing, identical on all axes.
    periodic : tuple of bool
        Periodic axes wrap around; their last node is *not* a copy of node 0.
    lattice_origin : tuple of int or None
        Global lattice index of node 0, ``None`` for a standalone chart.
    metric, coeff_a : ndarray, shape ``shape + (n, n)``
    coeff_b : ndarray, shape ``shape + (n,)``
    christoffel : ndarray, shape ``shape + (n, n, n)``
        ``christoffel[..., l, i, j]`` holds the symbol with upper index ``l``.
    """

    chart_id: int
    lower: tuple
    shape: tuple
    spacing: float
    periodic: tuple
    lattice_origin: tuple = None
    metric: np.ndarray = field(default=None, repr=False)
    coeff_a: np.ndarray = field(default=None, repr=False)
    coeff_b: np.ndarray = field(default=None, repr=False)
    christoffel: np.ndarray = field(default=None, repr=False)

    @property
    def n(self):
        return len(self.shape)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def lengths(self):
        return tuple(self.spacing * (m if p else m - 1) for m, p in zip(self.shape, self.periodic))

    @property
    def upper(self):
        return tuple(lo + L for lo, L in zip(self.lower, self.lengths))

    @property
    def stencils(self):
        return stencils_for(self.shape, self.spacing, self.periodic)

    def axis_coords(self, axis):
        return self.lower[axis] + self.spacing * np.arange(self.shape[axis])

    def mesh(self):
        """Node coordinates, one array of shape ``shape`` per axis."""
        return np.meshgrid(*[self.axis_coords(k) for k in range(self.n)], indexing="ij")

    def local_mesh(self):
        """Chart-local coordinates measured from the lower corner."""
        return [x - lo for x, lo in zip(self.mesh(), self.lower)]

    @property
    def boundary_mask(self):
        mask = np.zeros(self.shape, dtype=bool)
        for k, (m, per) in enumerate(zip(self.shape, self.periodic)):
            if per:
                continue
            idx = [slice(None)] * self.n
            idx[k] = 0
            mask[tuple(idx)] = True
            idx[k] = m - 1
            mask[tuple(idx)] = True
        return mask

    @property
    def boundary_index(self):
        """Flat indices of boundary nodes in row-major order."""
        return np.flatnonzero(self.boundary_mask.ravel())

    def frame_index(self, layers=1):
        """Flat indices of nodes within ``layers - 1`` steps of a non-periodic edge."""
        mask = np.zeros(self.shape, dtype=bool)
        for k, (m, per) in enumerate(zip(self.shape, self.periodic)):
            if per:
                continue
            idx = [slice(None)] * self.n
            for i in list(range(layers)) + list(range(m - layers, m)):
                idx[k] = i
                mask[tuple(idx)] = True
        return np.flatnonzero(mask.ravel())

    @property
    def has_boundary(self):
        return not all(self.periodic)


@dataclass(frozen=True, eq=False)
class Atlas:
    """A finite cover of the torus by overlapping charts.

    ``overlaps[(j, k)]`` is the translation taking chart-``j`` local
    coordinates to chart-``k`` local coordinates (to be reduced mod 1);
    ``index_maps[(j, k)]`` gives, per axis, the chart-``k`` node index of
    every chart-``j`` node index, or ``-1`` where chart ``k`` has no node.
    """

    n: int
    resolution: int
    charts_per_axis: int
    overlap_cells: int
    charts: list
    overlaps: dict
    index_maps: dict = field(repr=False)
    neighbor_sets: list = field(repr=False)
    bumps: list = field(repr=False)

    @property
    def spacing(self):
        return 1.0 / self.resolution

    def __len__(self):
        return len(self.charts)

    def with_charts(self, charts):
        return dataclasses.replace(self, charts=list(charts))

    def overlap_mask(self, j, k):
        """Nodes of chart ``j`` that are also nodes of chart ``k``."""
        maps = self.index_maps[(j, k)]
        out = np.ones(tuple(m.size for m in maps), dtype=bool)
        for k, m in enumerate(maps):
            shape = [1] * len(maps)
            shape[k] = m.size
            out = out & (m >= 0).reshape(shape)
        return out

    def lattice_indices(self, j):
        """Per-axis global lattice indices of chart ``j`` nodes."""
        c = self.charts[j]
        return [(c.lattice_origin[k] + np.arange(c.shape[k])) % self.resolution
                for k in range(self.n)]

    def summary(self):
        lines = [f"torus atlas: n={self.n} charts={len(self.charts)} "
                 f"resolution={self.resolution} overlap_cells={self.overlap_cells}"]
        for c in self.charts:
            lo = ", ".join(f"{x:.4f}" for x in c.lower)
            hi = ", ".join(f"{x:.4f}" for x in c.upper)
            supp = np.argwhere(self.bumps[c.chart_id] > 0)
            if supp.size:
                s_lo = [c.lower[k] + supp[:, k].min() * c.spacing for k in range(self.n)]
                s_hi = [c.lower[k] + supp[:, k].max() * c.spacing for k in range(self.n)]
                supp_txt = ("[" + ", ".join(f"{a:.4f}" for a in s_lo) + "] .. ["
                            + ", ".join(f"{b:.4f}" for b in s_hi) + "]")
            else:
                supp_txt = "empty"
            nb = sorted(self.neighbor_sets[c.chart_id])
            lines.append(f"  chart {c.chart_id}: box [{lo}] .. [{hi}] nodes={'x'.join(map(str, c.shape))} "
                         f"periodic={all(c.periodic)} J={nb} bump support {supp_txt}")
        return "\n".join(lines)


def smoothstep(t):
    """C2 quintic ramp: 0 for t <= 0, 1 for t >= 1, ``S(t) + S(1 - t) = 1``."""
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10.0 - 15.0 * t + 6.0 * t**2)


def _flat_metric(shape, n):
    return np.broadcast_to(np.eye(n), tuple(shape) + (n, n)).copy()


def _flat_chart(chart_id, lower, shape, spacing, periodic, lattice_origin=None):
    n = len(shape)
    return ChartGeometry(
        chart_id=chart_id,
        lower=tuple(float(x) for x in lower),
        shape=tuple(int(m) for m in shape),
        spacing=float(spacing),
        periodic=tuple(bool(p) for p in periodic),
        lattice_origin=lattice_origin,
        metric=_flat_metric(shape, n),
        coeff_a=_flat_metric(shape, n),
        coeff_b=np.zeros(tuple(shape) + (n,)),
        christoffel=np.zeros(tuple(shape) + (n, n, n)),
    )


def box_chart(n=2, nodes=17, length=1.0, chart_id=0):
    """A standalone flat chart ``[0, length]^n`` with ``nodes`` nodes per axis."""
    if nodes < 4:
        raise GeometryError(f"box chart needs at least 4 nodes per axis, got {nodes}")
    return _flat_chart(chart_id, (0.0,) * n, (nodes,) * n, length / (nodes - 1), (False,) * n)


def build_torus_atlas(n=2, charts_per_axis=2, overlap_fraction=0.25, resolution=32):
    """Cover the unit torus with ``charts_per_axis**n`` congruent boxes.

    Parameters
    ----------
    n : int
        Dimension, 2 or 3.
    charts_per_axis : int
        Number of charts along each axis.
    overlap_fraction : float
        Overlap half-width as a fraction of the chart core width, in (0, 0.5).
    resolution : int
        Nodes per unit length of the shared lattice (grid spacing
        ``1/resolution``).  A single-chart atlas has exactly ``resolution``
        nodes per axis.

    Returns
    -------
    Atlas
    """
    if n not in (2, 3):
        raise GeometryError(f"dimension must be 2 or 3, got {n}")
    K = int(charts_per_axis)
    N = int(resolution)
    if K < 1:
        raise GeometryError(f"charts_per_axis must be >= 1, got {charts_per_axis}")
    if N < 8:
        raise GeometryError(f"resolution must be >= 8, got {resolution}")
    if N % K:
        raise GeometryError(f"resolution {N} is not divisible by charts_per_axis {K}")
    core = N // K
    h = 1.0 / N

    if K == 1:
        overlap_cells = 0
        charts = [_flat_chart(0, (0.0,) * n, (N,) * n, h, (True,) * n, (0,) * n)]
    else:
        if not 0.0 < overlap_fraction < 0.5:
            raise GeometryError(f"overlap_fraction must lie in (0, 0.5), got {overlap_fraction}")
        overlap_cells = int(round(overlap_fraction * core))
        if overlap_cells < 1:
            raise GeometryError(
                f"overlap too small to cover chart boundaries: overlap_fraction={overlap_fraction} "
                f"gives {overlap_fraction * core:.3f} lattice cells")
        if overlap_cells < 3:
            raise GeometryError(
                f"resolution too coarse for bump smoothness: {overlap_cells} overlap cells, need >= 3")
        nodes = core + 2 * overlap_cells + 1
        if nodes > N:
            raise GeometryError("charts wrap onto themselves; reduce overlap_fraction")
        charts = []
        for cid, multi in enumerate(product(range(K), repeat=n)):
            origin = tuple((c * core - overlap_cells) % N for c in multi)
            lower = tuple((c * core - overlap_cells) * h for c in multi)
            charts.append(_flat_chart(cid, lower, (nodes,) * n, h, (False,) * n, origin))

    index_maps, overlaps = {}, {}
    for cj in charts:
        for ck in charts:
            maps = []
            for k in range(n):
                g = (cj.lattice_origin[k] + np.arange(cj.shape[k])) % N
                local = (g - ck.lattice_origin[k]) % N
                maps.append(np.where(local < ck.shape[k], local, -1))
            if all((m >= 0).any() for m in maps):
                index_maps[(cj.chart_id, ck.chart_id)] = maps
                overlaps[(cj.chart_id, ck.chart_id)] = tuple(
                    (a - b) % 1.0 for a, b in zip(cj.lower, ck.lower))
    neighbor_sets = [frozenset(k for (j, k) in index_maps if j == c.chart_id) for c in charts]

    bumps = _partition_of_unity(charts, N, K, overlap_cells)
    return Atlas(n=n, resolution=N, charts_per_axis=K, overlap_cells=overlap_cells,
                 charts=charts, overlaps=overlaps, index_maps=index_maps,
                 neighbor_sets=neighbor_sets, bumps=bumps)


def _partition_of_unity(charts, N, K, overlap_cells):
    if K == 1:
        return [np.ones(charts[0].shape)]
    d = overlap_cells
    raw = []
    for c in charts:
        factors = []
        for k, m in enumerate(c.shape):
            i = np.arange(m)
            # ramps span nodes 1 .. 2d-1, so node 0 and node m-1 carry zero weight
            up = smoothstep((i - 1) / (2 * d - 2))
            down = smoothstep((m - 2 - i) / (2 * d - 2))
            factors.append(up * down)
        raw.append(np.einsum(",".join("ijk"[: len(c.shape)]) + "->" + "ijk"[: len(c.shape)],
                             *factors))
    total = np.zeros((N,) * len(charts[0].shape))
    for c, w in zip(charts, raw):
        idx = np.ix_(*[(c.lattice_origin[k] + np.arange(c.shape[k])) % N for k in range(c.n)])
        total[idx] += w
    bumps = []
    for c, w in zip(charts, raw):
        idx = np.ix_(*[(c.lattice_origin[k] + np.arange(c.shape[k])) % N for k in range(c.n)])
        bumps.append(w / total[idx])
    return bumps


def christoffel_from_metric(metric, spacing, periodic=None):
    """Christoffel symbols of a sampled metric.

    Evaluates ``G^l_ij = 1/2 g^{kl} (g_jk,i + g_ik,j + g_ij,k)`` with the
    package's central-difference stencils.  Note the ``+ g_ij,k`` term, kept
    exactly as in the source derivation (the textbook formula has a minus).

    Parameters
    ----------
    metric : ndarray, shape ``grid + (n, n)``
    spacing : float
    periodic : sequence of bool, optional
        Defaults to all axes periodic.

    Returns
    -------
    ndarray, shape ``grid + (n, n, n)``, indexed ``[..., l, i, j]``.
    """
    metric = np.asarray(metric, dtype=float)
    n = metric.shape[-1]
    grid = metric.shape[:-2]
    if periodic is None:
        periodic = (True,) * len(grid)
    eig = np.linalg.eigvalsh(metric)
    if not np.all(eig > 0):
        raise GeometryError("metric is not positive definite at every node")
    try:
        inv = np.linalg.inv(metric)
    except np.linalg.LinAlgError as exc:
        raise GeometryError("singular metric") from exc
    st = stencils_for(grid, spacing, tuple(periodic))
    comps = np.moveaxis(metric, (-2, -1), (0, 1))  # (n, n) + grid
    # dg[c][a, b] = d g_ab / dx_c
    dg = np.stack([st.d(comps, c) for c in range(n)])
    dg = np.moveaxis(dg, (0, 1, 2), (-3, -2, -1))  # grid + (c, a, b)
    # bracket[k, i, j] = g_jk,i + g_ik,j + g_ij,k
    bracket = (np.einsum("...ijk->...kij", dg)
               + np.einsum("...jik->...kij", dg)
               + np.einsum("...kij->...kij", dg))
    return 0.5 * np.einsum("...kl,...kij->...lij", inv, bracket)


def min_ellipticity(chart):
    """Smallest eigenvalue of the diffusion matrix over all nodes."""
    return float(np.linalg.eigvalsh(chart.coeff_a).min())


def _parse_preset(name, epsilon):
    name = name.strip().lower()
    if name.startswith("conformal(") and name.endswith(")"):
        return "conformal", float(name[len("conformal("):-1])
    return name, epsilon


def coefficient_preset(name, atlas, epsilon=0.0, min_eigenvalue=0.5):
    """Fill the operator coefficients of every chart.

    ``"euclidean"`` gives ``a = identity, b = 0``; ``"conformal"`` (or
    ``"conformal(eps)"``) gives ``a = (1 + eps sin(2 pi x_1)) identity,
    b = 0`` in global torus coordinates.

    Returns a new :class:`Atlas`.  Raises :class:`GeometryError` when the
    smallest eigenvalue of ``a`` falls below ``min_eigenvalue``.
    """
    kind, eps = _parse_preset(name, epsilon)
    charts = []
    for c in atlas.charts:
        n = c.n
        if kind == "euclidean":
            a = _flat_metric(c.shape, n)
        elif kind == "conformal":
            x1 = c.mesh()[0]
            a = (1.0 + eps * np.sin(2 * np.pi * x1))[..., None, None] * np.eye(n)
        else:
            raise GeometryError(f"unknown coefficient preset '{name}'")
        b = np.zeros(c.shape + (n,))
        lam = float(np.linalg.eigvalsh(a).min())
        if lam < min_eigenvalue:
            raise GeometryError(
                f"ellipticity violated on chart {c.chart_id}: min eigenvalue {lam:.4g} "
                f"< {min_eigenvalue}")
        charts.append(dataclasses.replace(c, coeff_a=a, coeff_b=b))
    return atlas.with_charts(charts)
