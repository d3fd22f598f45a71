import numpy as np
import pytest
import sympy
from hypothesis import given
from hypothesis import strategies as st

from chartflow.errors import GeometryError
from chartflow.geometry import (box_chart, build_torus_atlas, christoffel_from_metric,
                                coefficient_preset, min_ellipticity)


def partition_sum(atlas):
    total = np.zeros((atlas.resolution,) * atlas.n)
    for j, b in enumerate(atlas.bumps):
        total[np.ix_(*atlas.lattice_indices(j))] += b
    return total


def test_single_chart_cover():
    atlas = build_torus_atlas(2, 1, 0.25, 32)
    assert len(atlas.charts) == 1
    assert atlas.charts[0].periodic == (True, True)
    assert np.all(atlas.bumps[0] == 1.0)
    assert atlas.neighbor_sets[0] == frozenset({0})


def test_two_by_two_neighbours_are_everyone():
    atlas = build_torus_atlas(2, 2, 0.25, 32)
    assert len(atlas.charts) == 4
    for j in range(4):
        assert atlas.neighbor_sets[j] == frozenset(range(4))


@given(K=st.integers(1, 4), cells=st.integers(3, 6), core=st.sampled_from([16, 20, 24]))
def test_partition_of_unity(K, cells, core):
    N = K * core
    atlas = build_torus_atlas(2, K, cells / core, N)
    assert np.abs(partition_sum(atlas) - 1.0).max() <= 1e-12
    for c, b in zip(atlas.charts, atlas.bumps):
        assert b.min() >= 0.0
        if c.has_boundary:
            # support strictly inside the chart: every edge node carries zero weight
            assert not np.any(b[c.boundary_mask])


def test_partition_of_unity_3d():
    atlas = build_torus_atlas(3, 2, 0.25, 24)
    assert len(atlas.charts) == 8
    assert np.abs(partition_sum(atlas) - 1.0).max() <= 1e-12


@given(K=st.integers(2, 4))
def test_neighbour_sets_symmetric_and_transitions_exact(K):
    atlas = build_torus_atlas(2, K, 0.25, 16 * K)
    for j, nb in enumerate(atlas.neighbor_sets):
        for k in nb:
            assert j in atlas.neighbor_sets[k]
    for (j, k), maps in atlas.index_maps.items():
        back = atlas.index_maps[(k, j)]
        for ax, m in enumerate(maps):
            sel = m >= 0
            assert np.array_equal(back[ax][m[sel]], np.arange(m.size)[sel])
        shift = atlas.overlaps[(j, k)]
        lower_j, lower_k = atlas.charts[j].lower, atlas.charts[k].lower
        for ax in range(2):
            assert (lower_j[ax] - lower_k[ax] - shift[ax]) % 1.0 in (0.0, pytest.approx(1.0))


def test_chart_boundaries_are_interior_to_neighbours():
    atlas = build_torus_atlas(2, 3, 0.25, 48)
    for j, c in enumerate(atlas.charts):
        coords = np.unravel_index(c.boundary_index, c.shape)
        covered = np.zeros(c.boundary_index.size, dtype=bool)
        for k in atlas.neighbor_sets[j] - {j}:
            maps = atlas.index_maps[(j, k)]
            local = [maps[ax][coords[ax]] for ax in range(2)]
            inside = np.logical_and.reduce([(m > 0) & (m < atlas.charts[k].shape[ax] - 1)
                                            for ax, m in enumerate(local)])
            covered |= inside
        assert covered.all()


@pytest.mark.parametrize("kwargs, match", [
    (dict(n=4), "dimension"),
    (dict(overlap_fraction=0.01), "overlap too small"),
    (dict(overlap_fraction=0.1, resolution=32), "too coarse"),
    (dict(resolution=4), "resolution"),
    (dict(overlap_fraction=0.6), "overlap_fraction"),
])
def test_atlas_errors(kwargs, match):
    args = dict(n=2, charts_per_axis=2, overlap_fraction=0.25, resolution=32)
    args.update(kwargs)
    with pytest.raises(GeometryError, match=match):
        build_torus_atlas(**args)


def test_summary_lists_every_chart():
    text = build_torus_atlas(2, 2, 0.25, 32).summary()
    assert text.count("chart ") == 4 and "bump support" in text


def test_christoffel_identity_and_constant_metric_vanish():
    shape = (12, 12)
    eye = np.broadcast_to(np.eye(2), shape + (2, 2))
    assert not np.any(christoffel_from_metric(eye, 1 / 12))
    const = np.broadcast_to(np.array([[2.0, 0.3], [0.3, 1.5]]), shape + (2, 2))
    assert np.abs(christoffel_from_metric(const, 1 / 12)).max() == 0.0


def _symbolic_christoffel(eps):
    x, y = sympy.symbols("x y")
    X = (x, y)
    f = sympy.exp(2 * eps * sympy.sin(2 * sympy.pi * x))
    g = sympy.Matrix([[f, 0], [0, f]])
    ginv = g.inv()
    # same expression as implemented: all three metric derivatives with a plus sign
    gam = [[[sympy.simplify(sum(sympy.Rational(1, 2) * ginv[k, l]
                                * (sympy.diff(g[j, k], X[i]) + sympy.diff(g[i, k], X[j])
                                   + sympy.diff(g[i, j], X[k])) for k in range(2)))
             for j in range(2)] for i in range(2)] for l in range(2)]
    return sympy.lambdify((x, y), gam, "numpy")


def test_christoffel_matches_symbolic_oracle_to_second_order():
    eps = 0.1
    oracle = _symbolic_christoffel(eps)
    errors = []
    for N in (32, 64):
        x = np.arange(N) / N
        X, Y = np.meshgrid(x, x, indexing="ij")
        f = np.exp(2 * eps * np.sin(2 * np.pi * X))
        metric = np.zeros((N, N, 2, 2))
        metric[..., 0, 0] = metric[..., 1, 1] = f
        gam = christoffel_from_metric(metric, 1.0 / N)
        exact = np.array(oracle(X, Y), dtype=object)
        exact = np.stack([np.stack([np.stack([np.broadcast_to(np.asarray(exact[l][i][j], float), X.shape)
                                              for j in range(2)], -1) for i in range(2)], -2)
                          for l in range(2)], -3)
        errors.append(np.abs(gam - exact).max())
        assert np.array_equal(gam, np.swapaxes(gam, -1, -2))
    assert 3.5 <= errors[0] / errors[1] <= 4.5


def test_christoffel_rejects_singular_metric():
    metric = np.zeros((8, 8, 2, 2))
    with pytest.raises(GeometryError):
        christoffel_from_metric(metric, 1 / 8)


def test_euclidean_preset_has_constant_coefficients():
    atlas = coefficient_preset("euclidean", build_torus_atlas(2, 2, 0.25, 32))
    for c in atlas.charts:
        assert np.array_equal(c.coeff_a, np.broadcast_to(np.eye(2), c.shape + (2, 2)))
        assert not np.any(c.coeff_b)
        for k in range(2):
            assert not np.any(c.stencils.d(c.coeff_a[..., 0, 0], k))


def test_conformal_zero_equals_euclidean():
    base = build_torus_atlas(2, 2, 0.25, 32)
    a = coefficient_preset("conformal(0)", base)
    b = coefficient_preset("euclidean", base)
    for x, y in zip(a.charts, b.charts):
        assert np.array_equal(x.coeff_a, y.coeff_a)


def test_conformal_ellipticity():
    atlas = coefficient_preset("conformal(0.1)", build_torus_atlas(2, 2, 0.25, 32))
    assert min(min_ellipticity(c) for c in atlas.charts) >= 0.9 - 1e-12
    with pytest.raises(GeometryError, match="ellipticity"):
        coefficient_preset("conformal(0.6)", build_torus_atlas(2, 2, 0.25, 32))
    with pytest.raises(GeometryError, match="unknown"):
        coefficient_preset("hyperbolic", build_torus_atlas(2, 1, 0.25, 16))


def test_box_chart_frame_indices():
    c = box_chart(2, 9)
    assert np.array_equal(c.frame_index(1), c.boundary_index)
    assert c.frame_index(2).size == 81 - 25
