import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from chartflow.elliptic import (GREEN_SIZE_LIMIT, DirichletProblem, assemble_green_matrix,
                                frame_layers, laplacian_matrix, leray_gradient, poisson_solver,
                                solve_dirichlet)
from chartflow.errors import GeometryError
from chartflow.geometry import box_chart, build_torus_atlas

PI = np.pi


def boundary_values(chart, fn, layers=1):
    X, Y = chart.mesh()
    return fn(X, Y).ravel()[chart.frame_index(layers)]


def test_zero_data_gives_zero():
    c = box_chart(2, 17)
    sol = solve_dirichlet(DirichletProblem(c, np.zeros(c.shape), np.zeros(c.boundary_index.size)))
    assert not np.any(sol.p.values)


@pytest.mark.parametrize("operator", ["laplacian", "wide"])
def test_manufactured_solution_second_order(operator):
    errors = []
    for N in (16, 32):
        c = box_chart(2, N + 1)
        X, Y = c.mesh()
        exact = np.sin(PI * X) * np.sin(PI * Y)
        g = exact.ravel()[c.frame_index(frame_layers(operator))]
        sol = solve_dirichlet(DirichletProblem(c, -2 * PI ** 2 * exact, g, operator))
        errors.append(np.abs(sol.p.values - exact).max())
    assert errors[1] <= 1e-2
    assert 3.5 <= errors[0] / errors[1] <= 4.5


def test_constant_boundary_reproduces_constant():
    c = box_chart(2, 13)
    sol = solve_dirichlet(DirichletProblem(c, np.zeros(c.shape), np.full(c.boundary_index.size, 2.5)))
    assert np.abs(sol.p.values - 2.5).max() <= 1e-12
    assert not np.any(sol.p1.values)


def test_harmonic_polynomial_is_exact():
    c = box_chart(2, 11)
    fn = lambda X, Y: X * X - Y * Y + 3 * X * Y  # noqa: E731
    sol = solve_dirichlet(DirichletProblem(c, np.zeros(c.shape), boundary_values(c, fn)))
    X, Y = c.mesh()
    assert np.abs(sol.p.values - fn(X, Y)).max() <= 1e-12


@settings(max_examples=20)
@given(hnp.arrays(float, (32,), elements=st.floats(-5, 5)))
def test_discrete_maximum_principle(g):
    c = box_chart(2, 9)
    p = solve_dirichlet(DirichletProblem(c, np.zeros(c.shape), g)).p.values
    assert p.max() <= g.max() + 1e-12
    assert p.min() >= g.min() - 1e-12


@settings(max_examples=20)
@given(hnp.arrays(float, (9, 9), elements=st.floats(-5, 5)),
       hnp.arrays(float, (32,), elements=st.floats(-5, 5)),
       st.floats(-3, 3))
def test_solution_is_linear_in_data(f, g, a):
    c = box_chart(2, 9)
    one = solve_dirichlet(DirichletProblem(c, f, g)).p.values
    two = solve_dirichlet(DirichletProblem(c, a * f, a * g)).p.values
    assert np.allclose(two, a * one, atol=1e-10)


def test_green_matrix_symmetric_and_kernel_rows_sum_to_one():
    c = box_chart(2, 17)
    gm = assemble_green_matrix(c)
    blk = gm.interior_block
    assert np.abs(blk - blk.T).max() <= 1e-10 * np.abs(blk).max()
    assert np.abs(gm.boundary_block.sum(axis=1) - 1.0).max() <= 1e-12


def test_green_path_matches_sparse_path():
    c = box_chart(2, 33)
    rng = np.random.default_rng(7)
    f = rng.standard_normal(c.shape)
    g = rng.standard_normal(c.boundary_index.size)
    sparse = solve_dirichlet(DirichletProblem(c, f, g)).p.values.ravel()
    dense = assemble_green_matrix(c).apply(f, g)
    assert np.abs(sparse - dense).max() <= 1e-10
    grad_sparse = leray_gradient(sparse.reshape(c.shape), c)
    grad_dense = leray_gradient(dense.reshape(c.shape), c)
    for a, b in zip(grad_sparse, grad_dense):
        assert np.abs(a - b).max() <= 1e-8


def test_green_matrix_guards():
    with pytest.raises(ValueError, match="limit"):
        assemble_green_matrix(box_chart(2, int(np.sqrt(GREEN_SIZE_LIMIT)) + 4))
    with pytest.raises(GeometryError):
        assemble_green_matrix(build_torus_atlas(2, 1, 0.25, 16).charts[0])


def test_boundary_length_is_validated():
    c = box_chart(2, 9)
    with pytest.raises(ValueError, match="boundary array"):
        DirichletProblem(c, np.zeros(c.shape), np.zeros(5))
    with pytest.raises(ValueError, match="boundary array"):
        DirichletProblem(c, np.zeros(c.shape), np.zeros(c.boundary_index.size), "wide")
    DirichletProblem(c, np.zeros(c.shape), np.zeros(c.frame_index(2).size), "wide")
    with pytest.raises(ValueError, match="unknown operator"):
        solve_dirichlet(DirichletProblem(c, np.zeros(c.shape), None, "cubic"))


def test_leray_gradient():
    c = box_chart(2, 17)
    assert not np.any(np.abs(leray_gradient(np.full(c.shape, 4.0), c)[0]) > 1e-12)
    errors = []
    for N in (16, 32):
        c = box_chart(2, N + 1)
        X, Y = c.mesh()
        gx, gy = leray_gradient(np.sin(PI * X) * np.sin(PI * Y), c)
        errors.append(np.abs(gx - PI * np.cos(PI * X) * np.sin(PI * Y)).max())
    assert 3.5 <= errors[0] / errors[1] <= 4.5


def test_periodic_solve_recovers_taylor_green_pressure():
    chart = build_torus_atlas(2, 1, 0.25, 64).charts[0]
    X, Y = chart.mesh()
    p = 0.25 * (np.cos(4 * PI * X) + np.cos(4 * PI * Y))
    lap = -4 * PI ** 2 * (np.cos(4 * PI * X) + np.cos(4 * PI * Y))
    p1, p2 = poisson_solver(chart).solve(lap)
    assert not np.any(p2)
    assert abs(p1.mean()) <= 1e-12
    assert np.abs(p1 - p).max() <= 10 * chart.spacing ** 2


def test_periodic_wide_operator_handles_checkerboard_null_space():
    chart = build_torus_atlas(2, 1, 0.25, 16).charts[0]
    rng = np.random.default_rng(2)
    target = rng.standard_normal(chart.shape)
    rhs = (laplacian_matrix(chart, "wide") @ target.ravel()).reshape(chart.shape)
    p1, _ = poisson_solver(chart, "wide").solve(rhs)
    back = (laplacian_matrix(chart, "wide") @ p1.ravel()).reshape(chart.shape)
    assert np.abs(back - rhs).max() <= 1e-9


def test_divergence_form_with_constant_coefficient_reduces_to_laplacian():
    c = box_chart(2, 17)
    X, Y = c.mesh()
    f = np.sin(3 * X) * np.cos(2 * Y)
    g = np.cos(X + Y).ravel()[c.boundary_index]
    ref = solve_dirichlet(DirichletProblem(c, f, g)).p.values
    scaled = solve_dirichlet(DirichletProblem(c, 2.0 * f, g, np.full(c.shape, 2.0))).p.values
    assert np.abs(ref - scaled).max() <= 1e-10
    diag = np.zeros(c.shape + (2, 2))
    diag[..., 0, 0] = diag[..., 1, 1] = 1.0
    tensor = solve_dirichlet(DirichletProblem(c, f, g, diag)).p.values
    assert np.abs(ref - tensor).max() <= 1e-10
    diag[..., 0, 1] = 0.1
    with pytest.raises(ValueError, match="diagonal"):
        solve_dirichlet(DirichletProblem(c, f, g, diag))


def test_divergence_form_variable_coefficient_manufactured():
    errors = []
    for N in (16, 32):
        c = box_chart(2, N + 1)
        X, Y = c.mesh()
        a = 1.0 + 0.3 * X
        exact = np.sin(PI * X) * np.sin(PI * Y)
        # div(a grad u) = a Lap u + a_x u_x
        f = -2 * PI ** 2 * a * exact + 0.3 * PI * np.cos(PI * X) * np.sin(PI * Y)
        sol = solve_dirichlet(DirichletProblem(c, f, exact.ravel()[c.boundary_index], a))
        errors.append(np.abs(sol.p.values - exact).max())
    assert 3.5 <= errors[0] / errors[1] <= 4.5
