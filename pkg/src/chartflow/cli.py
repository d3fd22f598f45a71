"""Command-line front end: configuration files, runs, checks and convergence studies.

Configuration documents are flat ``key = value`` lines with ``#``
comments.  Every :class:`~chartflow.scheme.SchemeConfig` field is a key,
alongside the atlas, initial-condition and output keys of
:class:`RunConfig`.

Exit codes: 0 success, 2 configuration error, 3 numerical failure or
failed check, 4 I/O error.
"""

import argparse
import csv
import dataclasses
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid

from chartflow.elliptic import DirichletProblem, assemble_green_matrix, solve_dirichlet
from chartflow.errors import ChartflowError, ConfigError, GeometryError, NumericalError
from chartflow.geometry import (box_chart, build_torus_atlas, christoffel_from_metric,
                                coefficient_preset, min_ellipticity)
from chartflow.grid import ChartField, dump_field
from chartflow.initial import random_divfree, taylor_green, zero_field
from chartflow.leray import boundary_blend
from chartflow.parabolic import GaussianKernel
from chartflow.scheme import (INDEX_COLUMNS, MONITOR_COLUMNS, MonitorRecord, SchemeConfig,
                              init, run)

__all__ = [
    "RunConfig",
    "INITIAL_PRESETS",
    "parse_config",
    "serialize_config",
    "build_atlas",
    "initial_field",
    "write_monitors",
    "read_monitors",
    "cmd_run",
    "cmd_validate",
    "cmd_convergence",
    "main",
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_NUMERICAL",
    "EXIT_IO",
]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
INITIAL_PRESETS = ("taylor_green", "random_divfree", "zero")
_SCHEME_KEYS = tuple(f.name for f in dataclasses.fields(SchemeConfig))


@dataclass
class RunConfig:
    """Everything a run needs: scheme parameters plus atlas, data and output settings.

    ``amplitude`` scales the Taylor–Green field; for ``random_divfree`` it
    is the target sup-norm.  ``dump_every`` is the field dump cadence in
    integer steps (0 disables dumps).  ``monitor_verbosity`` selects which
    monitor events reach ``monitors.csv``: 0 step rows only, 1 adds
    coupling-iteration rows, 2 adds every p-ratio row.
    """

    scheme: SchemeConfig = field(default_factory=SchemeConfig)
    n: int = 2
    charts_per_axis: int = 2
    overlap_fraction: float = 0.25
    resolution: int = 32
    coefficients: str = "euclidean"
    ellipticity_min: float = 0.5
    initial: str = "taylor_green"
    amplitude: float = 1.0
    seed: int = 0
    modes: int = 2
    out_dir: str = "out"
    dump_every: int = 1
    monitor_verbosity: int = 2
    levels: int = 2

    def __getattr__(self, name):
        # scheme keys read through, so cfg.rho works like cfg.scheme.rho
        if name in _SCHEME_KEYS:
            return getattr(self.__dict__["scheme"], name)
        raise AttributeError(name)

    @classmethod
    def keys(cls):
        own = [f.name for f in dataclasses.fields(cls) if f.name != "scheme"]
        return list(_SCHEME_KEYS) + own

    def get(self, key):
        return getattr(self.scheme, key) if key in _SCHEME_KEYS else getattr(self, key)

    def set(self, **changes):
        """Copy with ``changes`` applied to either level."""
        scheme = {k: v for k, v in changes.items() if k in _SCHEME_KEYS}
        own = {k: v for k, v in changes.items() if k not in _SCHEME_KEYS}
        return dataclasses.replace(self, scheme=dataclasses.replace(self.scheme, **scheme), **own)

    def validate(self):
        need = _require
        need(self.n in (2, 3), "n", f"must be 2 or 3, got {self.n}")
        need(self.charts_per_axis >= 1, "charts_per_axis", f"must be >= 1, got {self.charts_per_axis}")
        need(0.0 < self.overlap_fraction < 0.5, "overlap_fraction",
             f"must lie in (0, 0.5), got {self.overlap_fraction}")
        need(self.resolution >= 8, "resolution", f"must be >= 8, got {self.resolution}")
        need(self.initial in INITIAL_PRESETS, "initial",
             f"must be one of {', '.join(INITIAL_PRESETS)}, got '{self.initial}'")
        need(math.isfinite(self.amplitude), "amplitude", "must be a finite number")
        need(self.modes >= 1, "modes", f"must be >= 1, got {self.modes}")
        need(self.dump_every >= 0, "dump_every", f"must be >= 0, got {self.dump_every}")
        need(self.monitor_verbosity in (0, 1, 2), "monitor_verbosity",
             f"must be 0, 1 or 2, got {self.monitor_verbosity}")
        need(self.levels >= 2, "levels", f"must be >= 2, got {self.levels}")
        need(self.ellipticity_min > 0, "ellipticity_min", f"must be > 0, got {self.ellipticity_min}")
        name = self.coefficients.strip().lower()
        ok = name == "euclidean" or (name.startswith("conformal(") and name.endswith(")"))
        if ok and name != "euclidean":
            try:
                float(name[len("conformal("):-1])
            except ValueError:
                ok = False
        need(ok, "coefficients", f"must be 'euclidean' or 'conformal(<eps>)', got '{self.coefficients}'")
        self.scheme.validate(self.n)
        return self


def _require(ok, name, msg):
    if not ok:
        raise ConfigError(msg, field=name)


def _default_of(key):
    base = SchemeConfig() if key in _SCHEME_KEYS else RunConfig()
    return getattr(base, key)


def _convert(key, text, line):
    default = _default_of(key)
    raw = text.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError("expected true or false")
            return low == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot read '{raw}' as {type(default).__name__} ({exc})",
                          field=key, line=line) from None
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        return raw[1:-1]
    return raw


def _read_source(source):
    if isinstance(source, Path):
        return source.read_text(encoding="utf-8")
    if "\n" not in source and source.strip() and os.path.isfile(source):
        return Path(source).read_text(encoding="utf-8")
    return source


def parse_config(source):
    """Parse a configuration document (text or path) into a validated :class:`RunConfig`.

    Raises
    ------
    ConfigError
        Malformed lines and unknown or repeated keys carry the line number;
        range violations name the field.
    """
    text = _read_source(source)
    values, seen = {}, {}
    known = set(RunConfig.keys())
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got '{body}'", line=lineno)
        key, _, val = body.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError("missing key before '='", line=lineno)
        if key not in known:
            raise ConfigError("unknown key", field=key, line=lineno)
        if key in seen:
            raise ConfigError(f"repeated key (first set on line {seen[key]})", field=key, line=lineno)
        if not val.strip():
            raise ConfigError("missing value", field=key, line=lineno)
        seen[key] = lineno
        values[key] = _convert(key, val, lineno)
    cfg = RunConfig().set(**values)
    try:
        return cfg.validate()
    except ConfigError as exc:
        if exc.field in seen and exc.line is None:
            raise ConfigError(str(exc).split(": ", 1)[-1], field=exc.field,
                              line=seen[exc.field]) from None
        raise


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return f'"{v}"'
    return str(v)


def serialize_config(cfg):
    """Render every key; ``parse_config(serialize_config(c)) == c``."""
    return "".join(f"{k} = {_format_value(cfg.get(k))}\n" for k in RunConfig.keys())


def build_atlas(cfg):
    atlas = build_torus_atlas(cfg.n, cfg.charts_per_axis, cfg.overlap_fraction, cfg.resolution)
    return coefficient_preset(cfg.coefficients, atlas, min_eigenvalue=cfg.ellipticity_min)


def initial_field(cfg, resolution=None):
    """Lattice velocity of the configured preset."""
    N = cfg.resolution if resolution is None else resolution
    if cfg.initial == "taylor_green":
        return taylor_green(cfg.n, N, amplitude=cfg.amplitude)
    if cfg.initial == "random_divfree":
        return random_divfree(cfg.n, N, seed=cfg.seed, modes=cfg.modes, sup=cfg.amplitude)
    return zero_field(cfg.n, N)


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_monitors(records, path):
    """Write monitor records as CSV with the fixed column header."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MONITOR_COLUMNS)
        for rec in records:
            w.writerow([_fmt(x) for x in rec.as_row()])


def read_monitors(path):
    """Parse a monitors CSV back into :class:`MonitorRecord` objects."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != MONITOR_COLUMNS:
            raise ValueError(f"unexpected monitor header {header}")
        out = []
        for row in reader:
            kw = {c: (int(v) if c in INDEX_COLUMNS else float(v)) for c, v in zip(header, row)}
            out.append(MonitorRecord(**kw))
    return out


def _keep(rec, verbosity):
    if rec.m < 0:
        return True
    if rec.p < 0:
        return verbosity >= 1
    return verbosity >= 2


def _dump_state(state, out_dir):
    step_dir = Path(out_dir) / "fields" / f"step_{state.step_l:04d}"
    step_dir.mkdir(parents=True, exist_ok=True)
    n = state.atlas.n
    for j in range(len(state.atlas.charts)):
        for name in ("v_r", "r", "v"):
            for i in range(n):
                dump_field(state.field(name, i, j), step_dir / f"{name}{i + 1}_chart{j}.txt")
        dump_field(ChartField(j, "p", state.p[j], state.tau), step_dir / f"p_chart{j}.txt")


def cmd_run(cfg, out_dir=None, stream=None):
    """Run the scheme, write ``monitors.csv`` and field dumps; return the exit code."""
    stream = sys.stdout if stream is None else stream
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atlas = build_atlas(cfg)
    state = init(atlas, initial_field(cfg), cfg.scheme)
    every = cfg.dump_every
    if every:
        _dump_state(state, out)

    def on_step(s):
        if every and s.step_l % every == 0:
            _dump_state(s, out)

    state = run(state, cfg.scheme, on_step)
    records = [r for r in state.monitors if _keep(r, cfg.monitor_verbosity)]
    write_monitors(records, out / "monitors.csv")
    max_vr = max([h.sup_v_r for h in state.history], default=_sup(state.v_r))
    max_r = max([h.sup_r for h in state.history], default=_sup(state.r))
    print(f"OK steps={cfg.steps_L} max_sup_v_r={max_vr:.10g} max_sup_r={max_r:.10g}", file=stream)
    return EXIT_OK


def _sup(fields):
    return max(float(np.abs(x).max()) for x in fields)


def _check(name, fn):
    try:
        ok, detail = fn()
    except ChartflowError as exc:
        ok, detail = False, str(exc)
    return name, bool(ok), detail


def _validate_checks(cfg):
    checks = []
    try:
        atlas = build_torus_atlas(cfg.n, cfg.charts_per_axis, cfg.overlap_fraction, cfg.resolution)
    except GeometryError as exc:
        return [("coverage", False, str(exc))]

    def coverage():
        for j, c in enumerate(atlas.charts):
            if c.has_boundary:
                for layers in (1, 2):
                    boundary_blend(atlas, j, layers)
        return True, f"{len(atlas.charts)} charts, every chart boundary node covered"

    def partition():
        total = np.zeros((atlas.resolution,) * atlas.n)
        lo = min(float(b.min()) for b in atlas.bumps)
        for j, b in enumerate(atlas.bumps):
            total[np.ix_(*atlas.lattice_indices(j))] += b
        err = float(np.abs(total - 1.0).max())
        return err <= 1e-12 and lo >= 0.0, f"max |sum - 1| = {err:.2e}, min bump = {lo:.2e}"

    def transitions():
        worst = 0
        for (j, k), maps in atlas.index_maps.items():
            back = atlas.index_maps[(k, j)]
            for ax, m in enumerate(maps):
                sel = m >= 0
                worst = max(worst, int(np.abs(back[ax][m[sel]] - np.arange(m.size)[sel]).max()))
            if j not in atlas.neighbor_sets[k]:
                return False, f"neighbour sets not symmetric for ({j}, {k})"
        return worst == 0, f"{len(atlas.index_maps)} overlap maps round-trip exactly"

    def ellipticity():
        coated = coefficient_preset(cfg.coefficients, atlas, min_eigenvalue=cfg.ellipticity_min)
        lam = min(min_ellipticity(c) for c in coated.charts)
        return lam >= cfg.ellipticity_min, f"min eigenvalue {lam:.4g} >= {cfg.ellipticity_min}"

    def christoffel():
        c = atlas.charts[0]
        gam = christoffel_from_metric(c.metric, c.spacing, c.periodic)
        sym = float(np.abs(gam - np.swapaxes(gam, -1, -2)).max())
        return sym == 0.0 and not np.any(gam), "flat metric gives zero, symmetric symbols"

    def green():
        chart = box_chart(cfg.n if cfg.n == 2 else 2, 17)
        G = assemble_green_matrix(chart)
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(5):
            f = rng.standard_normal(chart.shape)
            g = rng.standard_normal(chart.boundary_index.size)
            direct = solve_dirichlet(DirichletProblem(chart, f, g)).p.values.ravel()
            worst = max(worst, float(np.abs(G.apply(f, g) - direct).max()))
        return worst <= 1e-10, f"Green path vs direct solve: {worst:.2e} on 17^2"

    def kernel_mass():
        k = GaussianKernel(cfg.n, np.eye(cfg.n), cfg.rho, cfg.nu)
        dt = 1.0
        s = k.std(dt)
        x = np.linspace(-8 * s, 8 * s, 81)
        mass = k(dt, np.stack(np.meshgrid(*([x] * cfg.n), indexing="ij"), axis=-1))
        for _ in range(cfg.n):
            mass = trapezoid(mass, x, axis=0)
        return abs(mass - 1.0) <= 1e-6, f"Gaussian mass {float(mass):.9f}"

    for name, fn in (("coverage", coverage), ("partition_of_unity", partition),
                     ("transition_round_trip", transitions), ("ellipticity", ellipticity),
                     ("christoffel", christoffel), ("green_path_equivalence", green),
                     ("kernel_mass", kernel_mass)):
        checks.append(_check(name, fn))
    return checks


def cmd_validate(cfg, out_dir=None, stream=None):
    """Run the invariant checks, print a table and return the exit code."""
    stream = sys.stdout if stream is None else stream
    checks = _validate_checks(cfg)
    try:
        atlas = build_torus_atlas(cfg.n, cfg.charts_per_axis, cfg.overlap_fraction, cfg.resolution)
        print(atlas.summary(), file=stream)
    except GeometryError:
        pass
    width = max(len(c[0]) for c in checks)
    for name, ok, detail in checks:
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {detail}", file=stream)
    failed = [c[0] for c in checks if not c[1]]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=stream)
        return EXIT_NUMERICAL
    print("all checks passed", file=stream)
    return EXIT_OK


def convergence_study(cfg, resolutions=None):
    """Errors of the reconstructed velocity against the exact vortex per level.

    Level ``k`` uses resolution ``resolution * 2**k`` and ``substeps * 4**k``
    τ-substeps, so ``Δτ`` shrinks with ``h^2``.  Returns rows
    ``(level, h, err_sup, order)`` with ``order`` NaN where it is undefined.
    """
    if cfg.initial not in ("taylor_green", "zero"):
        raise ConfigError("convergence needs an initial condition with an exact solution "
                          "(taylor_green or zero)", field="initial")
    if cfg.n != 2 and cfg.initial == "taylor_green":
        raise ConfigError("the exact vortex solution exists only for n = 2", field="n")
    if resolutions is None:
        resolutions = [cfg.resolution * 2**k for k in range(cfg.levels)]
    if len(resolutions) < 2:
        raise ConfigError("need at least two refinement levels", field="levels")
    base_res = resolutions[0]
    steps = int(cfg.steps_L)
    t_end = sum(cfg.rho / (l if cfg.rho_decay else 1) for l in range(1, steps + 1))
    rows, prev = [], None
    for level, N in enumerate(resolutions):
        factor = (N / base_res) ** 2
        substeps = max(1, int(round(cfg.substeps * factor)))
        level_cfg = cfg.set(resolution=N, substeps=substeps)
        atlas = build_atlas(level_cfg)
        state = run(init(atlas, initial_field(level_cfg), level_cfg.scheme), level_cfg.scheme)
        v = state.global_field("v")
        exact = (taylor_green(2, N, cfg.amplitude, cfg.nu, t_end) if cfg.initial == "taylor_green"
                 else zero_field(cfg.n, N))
        err = float(np.abs(v - exact).max())
        h = 1.0 / N
        order = float("nan")
        if prev is not None and prev[1] != h and prev[2] > 0 and err > 0:
            order = math.log(prev[2] / err) / math.log(prev[1] / h)
        rows.append((level, h, err, order))
        prev = (level, h, err)
    return rows


def cmd_convergence(cfg, out_dir=None, resolutions=None, stream=None):
    """Print the refinement table and write ``convergence.csv``."""
    stream = sys.stdout if stream is None else stream
    rows = convergence_study(cfg, resolutions)
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "convergence.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "h", "err_sup", "order"])
        for level, h, err, order in rows:
            w.writerow([level, repr(h), repr(err), "" if math.isnan(order) else repr(order)])
    print(f"{'level':>5} {'h':>12} {'err_sup':>14} {'order':>8}", file=stream)
    for level, h, err, order in rows:
        otxt = "n/a" if math.isnan(order) else f"{order:.3f}"
        print(f"{level:>5} {h:>12.6g} {err:>14.6e} {otxt:>8}", file=stream)
    return EXIT_OK


def _parser():
    ap = argparse.ArgumentParser(prog="chartflow", description="Chart-based incompressible "
                                 "Navier-Stokes solver on flat tori.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in (("run", "run the scheme and write monitors and field dumps"),
                       ("validate", "check atlas and solver invariants"),
                       ("convergence", "refinement study against the exact vortex")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="configuration file (defaults when omitted)")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        if name == "convergence":
            p.add_argument("--levels", help="comma-separated resolutions, e.g. 32,64")
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg = parse_config(Path(args.config) if args.config else "")
        if args.command == "run":
            return cmd_run(cfg, args.out)
        if args.command == "validate":
            return cmd_validate(cfg, args.out)
        resolutions = None
        if args.levels:
            try:
                resolutions = [int(x) for x in args.levels.split(",") if x.strip()]
            except ValueError:
                raise ConfigError(f"cannot read '{args.levels}' as resolutions", field="levels")
        return cmd_convergence(cfg, args.out, resolutions)
    except (ConfigError, GeometryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
