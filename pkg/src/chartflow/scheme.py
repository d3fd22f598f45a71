"""The controlled chart scheme.

One unit τ-step (physical duration ``rho``) runs two nested fixed-point
loops:

* the coupling loop over ``m`` refreshes the inter-chart pressure data
  from the previous iterate and stops once successive iterates agree to
  ``tol_m``;
* inside it, the loop over ``p`` solves the linear parabolic problem with
  convection and interior Leray source frozen at iterate ``p - 1``.

After the uncontrolled step from the controlled data ``v_r`` the control
increment ``dr`` is added to both ``v_r`` and ``r``; the physical velocity
is the difference ``v = v_r - r``.
"""

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields as dc_fields, replace

import numpy as np

from chartflow.elliptic import OPERATORS, frame_layers, poisson_solver
from chartflow.errors import ConfigError, ContractionError, NumericalError, StagnationError
from chartflow.grid import (ChartField, FieldNorms, assemble_global, multi_indices,
                            norms_from_history, overlap_mismatch, restrict_global, derivative)
from chartflow.initial import lattice_divergence
from chartflow.leray import (boundary_blend, boundary_pressure_data, consistent_pressure,
                             S_FORMS, global_mean, s_functional, s_interior)
from chartflow.parabolic import ParabolicStepProblem, parabolic_step

__all__ = [
    "VARIANTS",
    "MONITOR_COLUMNS",
    "SchemeConfig",
    "MonitorRecord",
    "StepSummary",
    "GlobalState",
    "ControlIncrement",
    "contraction_rho",
    "data_norm",
    "init",
    "subiterate_p",
    "iterate_m",
    "control_increment_simple",
    "control_increment_switched",
    "time_step",
    "run",
]

VARIANTS = ("none", "simple", "switched")
MONITOR_COLUMNS = ("l", "m", "p", "chart", "comp", "ratio_p", "mismatch_m", "sup_v_r",
                   "sup_r", "sup_v", "c12_v_r", "c12_r", "sup_div", "prop_P")
INDEX_COLUMNS = MONITOR_COLUMNS[:5]


@dataclass
class SchemeConfig:
    """Numerical parameters of the scheme.

    ``rho`` is the physical length of one unit τ-step, ``big_c`` the
    control bound.  ``strict_contraction`` clamps ``rho`` to
    ``1 / (4 n^2 Cbar)`` with ``Cbar`` the measured data norm.

    ``schwarz_sweeps`` caps the inner pressure sweeps done per coupling
    iteration in ``"pressure"`` mode; ``1`` is a single exchange.
    ``boundary_conditions`` imposes blended neighbour velocities on chart
    edges, which is what makes the chart pressure problems consistent.
    """

    rho: float = 1.0 / 320.0
    big_c: float = 20.0
    nu: float = 0.05
    tol_p: float = 1e-9
    tol_m: float = 1e-8
    max_p: int = 40
    max_m: int = 60
    steps_L: int = 10
    control_variant: str = "switched"
    normalize_kernel: bool = True
    rho_decay: bool = False
    substeps: int = 16
    boundary_conditions: bool = True
    pressure_coupling: str = "pressure"
    pressure_operator: str = "wide"
    s_form: str = "conservative"
    synchronize: bool = True
    schwarz_sweeps: int = 50
    strict_contraction: bool = False
    threads: int = 0

    def validate(self, n=2):
        def need(ok, name, msg):
            if not ok:
                raise ConfigError(msg, field=name)

        for name in ("rho", "big_c", "nu", "tol_p", "tol_m"):
            val = getattr(self, name)
            need(isinstance(val, (int, float)) and np.isfinite(val), name, "must be a finite number")
        need(self.rho > 0, "rho", f"must be > 0, got {self.rho}")
        need(self.big_c > 1, "big_c", f"must be > 1, got {self.big_c}")
        need(self.nu > 0, "nu", f"must be > 0, got {self.nu}")
        need(self.tol_p > 0, "tol_p", f"must be > 0, got {self.tol_p}")
        need(self.tol_m > 0, "tol_m", f"must be > 0, got {self.tol_m}")
        for name in ("max_p", "max_m", "substeps", "schwarz_sweeps"):
            need(int(getattr(self, name)) >= 1, name, f"must be >= 1, got {getattr(self, name)}")
        need(int(self.steps_L) >= 0, "steps_L", f"must be >= 0, got {self.steps_L}")
        need(int(self.threads) >= 0, "threads", f"must be >= 0, got {self.threads}")
        need(self.control_variant in VARIANTS, "control_variant",
             f"must be one of {', '.join(VARIANTS)}, got '{self.control_variant}'")
        need(self.pressure_coupling in ("pressure", "functional"), "pressure_coupling",
             f"must be 'pressure' or 'functional', got '{self.pressure_coupling}'")
        need(self.pressure_operator in OPERATORS, "pressure_operator",
             f"must be one of {', '.join(OPERATORS)}, got '{self.pressure_operator}'")
        need(self.s_form in S_FORMS, "s_form",
             f"must be one of {', '.join(S_FORMS)}, got '{self.s_form}'")
        if self.strict_contraction:
            bound = contraction_rho(n, self.big_c)
            need(self.rho <= bound, "rho", f"strict contraction needs rho <= {bound:.6g}, got {self.rho}")
        return self


def contraction_rho(n, cbar):
    """Step scale ``1 / (4 n^2 Cbar)`` below which the p-loop contracts by 1/4."""
    return 1.0 / (4.0 * n * n * cbar)


@dataclass
class MonitorRecord:
    """One monitor event; ``-1`` marks unused indices, ``nan`` unused values."""

    l: int = -1
    m: int = -1
    p: int = -1
    chart: int = -1
    comp: int = -1
    ratio_p: float = float("nan")
    mismatch_m: float = float("nan")
    sup_v_r: float = float("nan")
    sup_r: float = float("nan")
    sup_v: float = float("nan")
    c12_v_r: float = float("nan")
    c12_r: float = float("nan")
    sup_div: float = float("nan")
    prop_P: float = float("nan")

    def as_row(self):
        return [getattr(self, c) for c in MONITOR_COLUMNS]


@dataclass
class StepSummary:
    l: int
    rho: float
    sup_v_r: float
    sup_r: float
    sup_v: float
    norms_v_r: FieldNorms
    norms_r: FieldNorms
    sup_div: float
    prop_p: object
    m_iterations: int
    p_iterations: int
    max_ratio: float
    mismatch: float


@dataclass(eq=False)
class GlobalState:
    """Per-chart fields at an integer step.

    ``v_r[j]``, ``r[j]`` and ``v[j]`` have shape ``(n,) + chart.shape``;
    ``p[j]`` is the chart pressure.  ``v + r == v_r`` holds bitwise.
    """

    atlas: object
    step_l: int
    v_r: list
    r: list
    v: list
    p: list
    monitors: list = field(default_factory=list)
    history: list = field(default_factory=list)

    @property
    def tau(self):
        return float(self.step_l)

    def field(self, name, i, j):
        vals = getattr(self, name)[j]
        return ChartField(j, f"{name}{i + 1}", vals[i] if name != "p" else vals, self.tau)

    def global_field(self, name="v"):
        """Partition-of-unity blend of a stored field on the periodic lattice."""
        return assemble_global(self.atlas, getattr(self, name))


def _reconstruct(v_r, r):
    """Return ``(v, v_r)`` with ``v = v_r - r`` and ``v + r == v_r`` bitwise.

    ``v_r`` is re-rounded as ``v + r``, which changes it by at most one ulp.
    """
    v = v_r - r
    return v, v + r


def _workers(config, tasks):
    n = int(config.threads) or int(os.environ.get("CHARTFLOW_THREADS", "0") or 0)
    if n <= 0:
        n = os.cpu_count() or 1
    return max(1, min(n, tasks))


def _map(config, fn, items):
    items = list(items)
    workers = _workers(config, len(items))
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _spatial_norms(values, chart):
    """Spatial :class:`FieldNorms` of a field at one time."""
    return norms_from_history(values[None], [0.0], chart)


def data_norm(atlas, fields):
    """Measured ``sum_{|alpha|<=2} sup |D^alpha f|`` over charts and components."""
    return FieldNorms.combine(_spatial_norms(f[i], c) for f, c in zip(fields, atlas.charts)
                              for i in range(atlas.n)).c2


def _global_divergence(atlas, fields):
    return float(np.abs(lattice_divergence(assemble_global(atlas, fields))).max())


def init(atlas, h, config, on_divergence="warn"):
    """Initial :class:`GlobalState` from velocity ``h``.

    ``h`` is a lattice array ``(n,) + (N,) * n`` or a list of per-chart
    arrays.  Variant ``none`` starts with ``r = 0``; the controlled
    variants start with ``r = h / C`` and ``v_r = (1 + 1/C) h``.
    """
    config.validate(atlas.n)
    if isinstance(h, np.ndarray) and h.shape == (atlas.n,) + (atlas.resolution,) * atlas.n:
        h = restrict_global(atlas, h)
    h = [np.array(x, dtype=float) for x in h]
    for j, (x, c) in enumerate(zip(h, atlas.charts)):
        if x.shape != (atlas.n,) + c.shape:
            raise ValueError(f"initial field on chart {j} has shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise NumericalError("non-finite initial data", l=0, chart=j)
    div = _global_divergence(atlas, h)
    scale = max(1.0, max(float(np.abs(x).max()) for x in h))
    limit = 10.0 * atlas.spacing**2 * scale
    if div > limit:
        msg = f"initial data divergence {div:.3g} exceeds {limit:.3g}"
        if on_divergence == "raise":
            raise NumericalError(msg, l=0)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    C = config.big_c
    if config.control_variant == "none":
        r = [np.zeros_like(x) for x in h]
        v_r = [x.copy() for x in h]
    else:
        r = [x / C for x in h]
        v_r = [(1.0 + 1.0 / C) * x for x in h]
    pairs = [_reconstruct(a, b) for a, b in zip(v_r, r)]
    state = GlobalState(atlas, 0, [q[1] for q in pairs], r, [q[0] for q in pairs], [])
    state.p = initial_pressure(atlas, state.v_r, config)
    return state


def initial_pressure(atlas, fields, config):
    """Static Schwarz pressure of velocity ``fields`` (warm start for the first step)."""
    raw = [s_functional(list(f), c, nu=config.nu, form=config.s_form)
           for f, c in zip(fields, atlas.charts)]
    return consistent_pressure(atlas, raw, operator=config.pressure_operator)[0]


def subiterate_p(chart, data, coupling, start, mean, config, rho, tau0=0.0,
                 boundary=None, l=None, m=None):
    """Fixed-point loop over ``p`` on one chart.

    Parameters
    ----------
    data : ndarray, shape ``(n,) + chart.shape``
        Initial data at ``tau0``.
    coupling : ndarray, shape ``(M + 1, n) + chart.shape``
        Coupling source, fixed for the whole loop.
    start : ndarray, shape ``(M + 1, n) + chart.shape``
        Iterate ``p = 0``.
    mean : ndarray, shape ``(M + 1,)``
        Constant removed from ``S`` before the interior pressure solve.
    boundary : ndarray, optional
        Velocity Dirichlet data, shape ``(n, M + 1, nb)``.

    Returns
    -------
    values, p1, ratios, iterations
    """
    n, M = chart.n, int(config.substeps)
    taus = tau0 + np.arange(M + 1) / M
    old = np.asarray(start, dtype=float)
    initial = [ChartField(chart.chart_id, f"v{i + 1}", data[i], tau0) for i in range(n)]
    prev_norm, ratios, bad = None, [], 0
    p1 = None
    for p in range(1, int(config.max_p) + 1):
        comps = [old[:, i] for i in range(n)]
        s_int, p1 = s_interior(comps, chart, mean=mean, return_pressure=True,
                               operator=config.pressure_operator, form=config.s_form, nu=config.nu)
        source = np.stack([s_int[i] + coupling[:, i] for i in range(n)])
        problem = ParabolicStepProblem(chart, initial, rho, config.nu, convection=comps,
                                       source=source, boundary=boundary, tau0=tau0, substeps=M)
        try:
            new = parabolic_step(problem).values
        except NumericalError as exc:
            raise NumericalError(str(exc), l=l, m=m, p=p, chart=chart.chart_id) from exc
        delta = new - old
        norm = max(norms_from_history(delta[:, i], taus, chart).c12 for i in range(n))
        if prev_norm is not None and prev_norm > 0:
            ratio = norm / prev_norm
            ratios.append(ratio)
            bad = bad + 1 if ratio >= 1.0 else 0
            if bad >= 3:
                raise ContractionError(
                    f"p-subiteration not contracting (last ratio {ratio:.3g}); "
                    f"reduce rho (currently {rho:.4g})", l=l, m=m, p=p, chart=chart.chart_id)
        prev_norm = norm
        old = new
        if norm <= config.tol_p:
            break
    return old, p1, ratios, p


def _blend_velocity(atlas, j, values):
    blend = boundary_blend(atlas, j)
    n = atlas.n
    return np.stack([blend.apply({k: values[k][:, i] for k, _, _ in blend.sources})
                     for i in range(n)])


def iterate_m(atlas, data, pressure, config, rho, l=1, records=None):
    """Coupling loop for one unit step starting from ``data`` at ``tau = l - 1``.

    ``pressure`` is the chart pressure of the previous step (warm start).
    Returns ``(values, pressures, trace)`` where ``values[j]`` has shape
    ``(M + 1, n) + chart.shape`` and ``pressures[j]`` ``(M + 1,) + chart.shape``.
    """
    charts = atlas.charts
    M, n = int(config.substeps), atlas.n
    tau0 = float(l - 1)
    V = [np.broadcast_to(d, (M + 1,) + d.shape).copy() for d in data]
    P = [np.broadcast_to(q, (M + 1,) + q.shape).copy() for q in pressure]
    coupled = len(charts) > 1
    trace = {"increments": [], "mismatch": [], "ratios": [], "p_iterations": 0}
    records = [] if records is None else records
    for m in range(1, int(config.max_m) + 1):
        S_prev = [s_functional([V[j][:, i] for i in range(n)], c, nu=config.nu, form=config.s_form)
                  for j, c in enumerate(charts)]
        mean = global_mean(atlas, S_prev)
        if coupled and config.pressure_coupling == "pressure":
            P = consistent_pressure(atlas, S_prev, initial=P, tol=config.tol_m,
                                    max_iter=int(config.schwarz_sweeps),
                                    operator=config.pressure_operator, strict=False)[0]

        def chart_task(j):
            c = charts[j]
            if coupled:
                if config.pressure_coupling == "pressure":
                    g = boundary_pressure_data(P, atlas, j, "pressure", config.pressure_operator)
                else:
                    layers = frame_layers(config.pressure_operator)
                    g = boundary_blend(atlas, j, layers).apply(
                        {k: -S_prev[k] for k in range(len(charts))})
                p2 = poisson_solver(c, config.pressure_operator).boundary_part(g)
            else:
                p2 = np.zeros((M + 1,) + c.shape)
            coupling = np.stack([-c.stencils.d(p2, i) for i in range(n)], axis=1)
            bvel = _blend_velocity(atlas, j, V) if (coupled and config.boundary_conditions) else None
            vals, p1, ratios, its = subiterate_p(c, data[j], coupling, V[j], mean, config, rho,
                                                 tau0=tau0, boundary=bvel, l=l, m=m)
            return vals, p1 + p2, ratios, its

        results = _map(config, chart_task, range(len(charts)))
        newV = [res[0] for res in results]
        newP = [res[1] for res in results]
        increment = max(float(np.abs(a - b).max()) for a, b in zip(newV, V))
        mismatch = overlap_mismatch(atlas, newV) if coupled else 0.0
        for j, res in enumerate(results):
            trace["p_iterations"] += res[3]
            trace["ratios"].extend(res[2])
            for p, ratio in enumerate(res[2], start=2):
                records.append(MonitorRecord(l=l, m=m, p=p, chart=j, ratio_p=ratio))
        records.append(MonitorRecord(l=l, m=m, mismatch_m=mismatch))
        trace["increments"].append(increment)
        trace["mismatch"].append(mismatch)
        V, P = newV, newP
        if not coupled or increment <= config.tol_m:
            break
        inc = trace["increments"]
        if len(inc) > 5 and inc[-1] >= inc[-6]:
            raise StagnationError(f"coupling iteration stagnated at increment {increment:.3g}",
                                  l=l, m=m)
    trace["m_iterations"] = m
    return V, P, trace


@dataclass(eq=False)
class ControlIncrement:
    """Control increment over one step: ``dr(tau) = (tau - (l - 1)) * rate``."""

    rate: list
    prop_p: object = None

    def at(self, offset=1.0):
        return [offset * x for x in self.rate]


def _mollify(atlas, sources, config, rho):
    """Smooth per-chart fields by one source-free parabolic step over unit τ."""
    M = int(config.substeps)

    def task(j):
        c = atlas.charts[j]
        src = sources[j]
        fields_ = [ChartField(j, f"q{i}", src[i]) for i in range(src.shape[0])]
        out = parabolic_step(ParabolicStepProblem(c, fields_, rho, config.nu, substeps=M)).values[-1]
        if config.normalize_kernel:
            ones = parabolic_step(ParabolicStepProblem(
                c, [ChartField(j, "one", np.ones(c.shape))], rho, config.nu, substeps=M)).values[-1, 0]
            out = out / ones
        return out

    return _map(config, task, range(len(atlas.charts)))


def control_increment_simple(atlas, v_r, config, rho):
    """Damping increment with source ``-v_r(l - 1) / C``."""
    src = [-x / config.big_c for x in v_r]
    return ControlIncrement(_mollify(atlas, src, config, rho))


def property_p(atlas, r, big_c):
    """True when every ``max_{i,j} sup |D^alpha r|`` with ``|alpha| <= 2`` is at most ``big_c``."""
    for order in range(3):
        for alpha in multi_indices(atlas.n, order):
            worst = max(float(np.abs(derivative(x, alpha, c)).max()) for x, c in zip(r, atlas.charts))
            if worst > big_c:
                return False
    return True


def control_increment_switched(atlas, v_r, r, config, rho):
    """Switch between the ``-v_r / C`` and ``-r / C`` damping sources."""
    flag = property_p(atlas, r, config.big_c)
    base = v_r if flag else r
    src = [-x / config.big_c for x in base]
    return ControlIncrement(_mollify(atlas, src, config, rho), prop_p=flag)


def _step_norms(atlas, before, after, l):
    return FieldNorms.combine(
        norms_from_history(np.stack([b[i], a[i]]), [l - 1.0, float(l)], c)
        for b, a, c in zip(before, after, atlas.charts) for i in range(atlas.n))


def step_rho(config, l):
    return config.rho / l if config.rho_decay else config.rho


def time_step(state, config):
    """Advance ``state`` by one unit τ-step."""
    atlas = state.atlas
    l = state.step_l + 1
    rho = step_rho(config, l)
    if config.strict_contraction:
        rho = min(rho, contraction_rho(atlas.n, max(data_norm(atlas, state.v_r), 1e-300)))
    records = []
    V, P, trace = iterate_m(atlas, state.v_r, state.p, config, rho, l, records)
    end = [x[-1] for x in V]
    if config.control_variant == "none":
        inc = ControlIncrement([np.zeros_like(x) for x in end])
    elif config.control_variant == "simple":
        inc = control_increment_simple(atlas, state.v_r, config, rho)
    else:
        inc = control_increment_switched(atlas, state.v_r, state.r, config, rho)
    dr = inc.at(1.0)
    r_new = [a + b for a, b in zip(state.r, dr)]
    v_r_raw = [e + d for e, d in zip(end, dr)]
    if config.synchronize and len(atlas) > 1:
        v_r_raw = restrict_global(atlas, assemble_global(atlas, v_r_raw))
        r_new = restrict_global(atlas, assemble_global(atlas, r_new))
    pairs = [_reconstruct(a, rn) for a, rn in zip(v_r_raw, r_new)]
    v_new = [q[0] for q in pairs]
    v_r_new = [q[1] for q in pairs]
    for j, (a, b) in enumerate(zip(v_r_new, v_new)):
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise NumericalError("non-finite field after step", l=l, chart=j)
    norms_vr = _step_norms(atlas, state.v_r, v_r_new, l)
    norms_r = _step_norms(atlas, state.r, r_new, l)
    sup = lambda fs: max(float(np.abs(x).max()) for x in fs)
    summary = StepSummary(
        l=l, rho=rho, sup_v_r=sup(v_r_new), sup_r=sup(r_new), sup_v=sup(v_new),
        norms_v_r=norms_vr, norms_r=norms_r, sup_div=_global_divergence(atlas, v_new),
        prop_p=inc.prop_p, m_iterations=trace["m_iterations"], p_iterations=trace["p_iterations"],
        max_ratio=max(trace["ratios"], default=float("nan")), mismatch=trace["mismatch"][-1])
    records.append(MonitorRecord(
        l=l, sup_v_r=summary.sup_v_r, sup_r=summary.sup_r, sup_v=summary.sup_v,
        c12_v_r=norms_vr.c12, c12_r=norms_r.c12, sup_div=summary.sup_div,
        prop_P=float("nan") if inc.prop_p is None else float(inc.prop_p)))
    return GlobalState(atlas, l, v_r_new, r_new, v_new, [q[-1] for q in P],
                       state.monitors + records, state.history + [summary])


def run(state, config, callback=None):
    """Apply ``steps_L`` time steps; ``callback(state)`` runs after each one."""
    config.validate(state.atlas.n)
    for _ in range(int(config.steps_L)):
        state = time_step(state, config)
        if callback is not None:
            callback(state)
    return state


def config_fields():
    return [f.name for f in dc_fields(SchemeConfig)]


def with_config(config, **changes):
    return replace(config, **changes)
