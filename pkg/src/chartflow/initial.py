"""Initial velocity fields on the periodic lattice.

All generators return lattice arrays of shape ``(n,) + (N,) * n``; use
:func:`chartflow.grid.restrict_global` to sample them on an atlas.
"""

import numpy as np

from chartflow._stencils import stencils_for

__all__ = [
    "lattice_mesh",
    "taylor_green",
    "taylor_green_pressure",
    "random_divfree",
    "zero_field",
    "lattice_divergence",
]


def lattice_mesh(n, resolution):
    x = np.arange(resolution) / resolution
    return np.meshgrid(*([x] * n), indexing="ij")


def taylor_green(n, resolution, amplitude=1.0, nu=0.0, t=0.0):
    """Taylor–Green vortex at physical time ``t``.

    In two dimensions this is the exact decaying solution
    ``A exp(-2 nu (2 pi)^2 t) (sin 2pi x cos 2pi y, -cos 2pi x sin 2pi y)``.
    In three dimensions the classical divergence-free initial field
    ``(sin cos cos, -cos sin cos, 0)`` is returned with the same decay
    factor applied (it is not an exact solution there).
    """
    X = lattice_mesh(n, resolution)
    k = 2 * np.pi
    decay = amplitude * np.exp(-2.0 * nu * k**2 * t)
    if n == 2:
        x, y = X
        return decay * np.stack([np.sin(k * x) * np.cos(k * y), -np.cos(k * x) * np.sin(k * y)])
    if n == 3:
        x, y, z = X
        return decay * np.stack([np.sin(k * x) * np.cos(k * y) * np.cos(k * z),
                                 -np.cos(k * x) * np.sin(k * y) * np.cos(k * z),
                                 np.zeros_like(x)])
    raise ValueError(f"Taylor–Green field defined for n = 2 or 3, got {n}")


def taylor_green_pressure(resolution, amplitude=1.0, nu=0.0, t=0.0):
    """Pressure of the 2D vortex: ``A(t)^2 / 4 (cos 4pi x + cos 4pi y)``."""
    x, y = lattice_mesh(2, resolution)
    a = amplitude * np.exp(-2.0 * nu * (2 * np.pi) ** 2 * t)
    return 0.25 * a**2 * (np.cos(4 * np.pi * x) + np.cos(4 * np.pi * y))


def _random_potential(rng, n, resolution, modes):
    X = lattice_mesh(n, resolution)
    out = np.zeros((resolution,) * n)
    for kv in np.ndindex(*([2 * modes + 1] * n)):
        kvec = np.array(kv) - modes
        if not kvec.any():
            continue
        phase = 2 * np.pi * sum(kk * x for kk, x in zip(kvec, X))
        c, s = rng.standard_normal(2) / np.dot(kvec, kvec)
        out += c * np.cos(phase) + s * np.sin(phase)
    return out


def random_divfree(n, resolution, seed=0, modes=2, sup=None):
    """Random smooth field with vanishing discrete divergence.

    Built as the discrete curl of a random trigonometric potential (stream
    function in 2D, vector potential in 3D) with the same central
    stencils used everywhere else, so ``div`` vanishes to rounding.
    ``sup`` rescales the result to the given sup-norm.
    """
    rng = np.random.default_rng(seed)
    st = stencils_for((resolution,) * n, 1.0 / resolution, (True,) * n)
    if n == 2:
        psi = _random_potential(rng, 2, resolution, modes)
        v = np.stack([st.d(psi, 1), -st.d(psi, 0)])
    elif n == 3:
        A = [_random_potential(rng, 3, resolution, modes) for _ in range(3)]
        v = np.stack([st.d(A[2], 1) - st.d(A[1], 2),
                      st.d(A[0], 2) - st.d(A[2], 0),
                      st.d(A[1], 0) - st.d(A[0], 1)])
    else:
        raise ValueError(f"random field defined for n = 2 or 3, got {n}")
    if sup is not None:
        v *= sup / np.abs(v).max()
    return v


def zero_field(n, resolution):
    return np.zeros((n,) + (resolution,) * n)


def lattice_divergence(v):
    """Central-difference divergence of a lattice vector field."""
    v = np.asarray(v, dtype=float)
    n, N = v.shape[0], v.shape[1]
    st = stencils_for((N,) * n, 1.0 / N, (True,) * n)
    return sum(st.d(v[i], i) for i in range(n))
