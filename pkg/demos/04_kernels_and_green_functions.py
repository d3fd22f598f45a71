"""The continuous and discrete kernels behind the solver.

Three checks that are otherwise buried in the test-suite:

* the Gaussian heat kernel integrates to one even for an anisotropic
  diffusion matrix;
* for a constant drift, adding Levy correction terms moves the kernel
  towards the exactly shifted Gaussian;
* the dense discrete Green's function of a chart reproduces the sparse
  Dirichlet solve.
"""

import numpy as np

from chartflow import DirichletProblem, GaussianKernel, levy_expansion, solve_dirichlet
from chartflow.elliptic import assemble_green_matrix
from chartflow.geometry import box_chart


def main():
    k = GaussianKernel(2, [[2.0, 0.5], [0.5, 1.0]], rho=0.3)
    x = np.linspace(-4, 4, 321)
    mesh = np.stack(np.meshgrid(x, x, indexing="ij"), -1)
    print(f"Gaussian mass: {k(0.2, mesh).sum() * (x[1] - x[0]) ** 2:.12f}")

    k1 = GaussianKernel(1, [[1.0]], rho=0.5)
    pts = np.linspace(-1, 1, 41)[:, None]
    b, dt = 0.6, 0.2
    exact = k1(dt, pts + k1.rho * b * dt)
    for terms in range(3):
        err = np.abs(levy_expansion(k1, [b], terms, n_sigma=64)(dt, pts) - exact).max()
        print(f"Levy terms {terms}: distance to shifted kernel {err:.3e}")

    c = box_chart(2, 33)
    rng = np.random.default_rng(0)
    f, g = rng.standard_normal(c.shape), rng.standard_normal(c.boundary_index.size)
    sparse = solve_dirichlet(DirichletProblem(c, f, g)).p.values.ravel()
    dense = assemble_green_matrix(c).apply(f, g)
    print(f"Green matrix vs sparse solve: {np.abs(sparse - dense).max():.2e}")


if __name__ == "__main__":
    main()
