"""Command-line batch surface over the library pipelines.

Every command is a pure function of (config, seed): reruns write
byte-identical files.  Configuration is a flat JSON object; command-line
``key=value`` tokens override config keys one-for-one.  Outputs per run:
data CSVs, JSON reports, and exactly one ``manifest.json`` echoing the
resolved config; failed runs leave ``FAILED.json`` instead of a manifest.

Config schema (all keys optional unless a command says otherwise):
  model        str   hopf | snic | ml3d                       [hopf]
  params       dict  model parameters, e.g. {"D": 0.01}       [{}]
  grid_nx      int   grid nodes in x                          [201]
  grid_ny      int   grid nodes in y                          [201]
  maps         str   asymptotic | mrt | both                  [asymptotic]
  n_traj       int   ensemble size                            [200]
  dt           float integrator step                          [1e-2]
  t_burn       float burn-in time                             [20.0]
  t_end        float total time incl. burn-in                 [220.0]
  n_bins       int   phase bins for reduction/curves          [100]
  smoothing    int   harmonic order for smoothed tables       [8]
  eps          list  pulse displacement vector                [[0.01, 0.0]]
  n_trials     int   pulse trials                             [100000]
  d_sweep      list  D values for the longterm sweep          [[0.01, 0.08]]
  label        str   asymptotic | mrt (longterm phase choice) [asymptotic]
  red_n_traj   int   reduced-MC trajectories                  [10000]
  red_dt       float reduced-MC step                          [5e-3]
  mesh         int   analytic quadrature mesh                 [2048]
  degree       int   gEDMD polynomial total degree            [10]
  m_samples    int   gEDMD fit sample budget                  [100000]
  train_steps  int   gEDMD training-trajectory steps          [4000000]
  train_dt     float gEDMD training step                      [1e-3]
  train_stride int   gEDMD training record stride             [20]
  gedmd_mode   str   ml | hopf-check                          [ml]
  out          str   output directory                         [required]
  seed         int   master seed                              [0]

Exit codes: 0 success, 2 config error, 3 numerical failure,
4 underpowered or refused.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .models import SdeModel, model_from_key

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_REFUSED = 4


class ConfigError(ValueError):
    """Bad or inconsistent run configuration."""


class RefusedError(RuntimeError):
    """Run refused: underpowered budget or inapplicable method."""


_DEFAULTS = dict(
    model="hopf", params={}, grid_nx=201, grid_ny=201, maps="asymptotic",
    n_traj=200, dt=1e-2, t_burn=20.0, t_end=220.0, n_bins=100, smoothing=8,
    eps=[0.01, 0.0], n_trials=100000, d_sweep=[0.01, 0.08],
    label="asymptotic", red_n_traj=10000, red_dt=5e-3, mesh=2048,
    degree=10, m_samples=100000, train_steps=4000000, train_dt=1e-3,
    train_stride=20, gedmd_mode="ml", out=None, seed=0)


@dataclass
class RunConfig:
    model: str = "hopf"
    params: dict = field(default_factory=dict)
    grid_nx: int = 201
    grid_ny: int = 201
    maps: str = "asymptotic"
    n_traj: int = 200
    dt: float = 1e-2
    t_burn: float = 20.0
    t_end: float = 220.0
    n_bins: int = 100
    smoothing: int = 8
    eps: list = field(default_factory=lambda: [0.01, 0.0])
    n_trials: int = 100000
    d_sweep: list = field(default_factory=lambda: [0.01, 0.08])
    label: str = "asymptotic"
    red_n_traj: int = 10000
    red_dt: float = 5e-3
    mesh: int = 2048
    degree: int = 10
    m_samples: int = 100000
    train_steps: int = 4000000
    train_dt: float = 1e-3
    train_stride: int = 20
    gedmd_mode: str = "ml"
    out: str = None
    seed: int = 0

    def validate(self):
        if self.out is None:
            raise ConfigError("output directory required (--out or 'out')")
        if self.maps not in ("asymptotic", "mrt", "both"):
            raise ConfigError("maps must be asymptotic|mrt|both, got %r"
                              % self.maps)
        if self.label not in ("asymptotic", "mrt"):
            raise ConfigError("label must be asymptotic|mrt, got %r"
                              % self.label)
        if self.gedmd_mode not in ("ml", "hopf-check"):
            raise ConfigError("gedmd_mode must be ml|hopf-check, got %r"
                              % self.gedmd_mode)
        for key in ("grid_nx", "grid_ny", "n_traj", "n_bins", "n_trials",
                    "red_n_traj", "mesh", "degree", "m_samples",
                    "train_steps", "train_stride"):
            if int(getattr(self, key)) < 1:
                raise ConfigError("%s must be positive" % key)
        for key in ("dt", "t_end", "red_dt", "train_dt"):
            if float(getattr(self, key)) <= 0:
                raise ConfigError("%s must be positive" % key)
        try:
            self.build_model()
        except KeyError as e:
            raise ConfigError(str(e))

    def build_model(self) -> SdeModel:
        return model_from_key(self.model, dict(self.params))

    def resolved(self):
        return asdict(self)


def load_config(path=None, overrides=(), flags=None):
    """Merge defaults, config file, --flags and key=value overrides."""
    merged = dict(_DEFAULTS)
    if path is not None:
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError("cannot read config %s: %s" % (path, e))
        unknown = set(data) - set(_DEFAULTS)
        if unknown:
            raise ConfigError("unknown config keys: %s" % sorted(unknown))
        merged.update(data)
    for key, value in (flags or {}).items():
        if value is not None:
            merged[key] = value
    for tok in overrides:
        if "=" not in tok:
            raise ConfigError("override %r is not key=value" % tok)
        key, _, raw = tok.partition("=")
        if key == "params" or key.startswith("params."):
            name = key.partition(".")[2]
            if not name:
                raise ConfigError("use params.<name>=value")
            merged.setdefault("params", {})
            merged["params"] = dict(merged["params"])
            merged["params"][name] = _parse_value(raw)
            continue
        if key not in _DEFAULTS:
            raise ConfigError("unknown config key %r" % key)
        merged[key] = _parse_value(raw)
    cfg = RunConfig(**merged)
    cfg.validate()
    return cfg


def _parse_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


#  output plumbing ----------------------------------------------------------

def _ensure_outdir(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    failed = os.path.join(cfg.out, "FAILED.json")
    if os.path.exists(failed):
        os.remove(failed)


def _write_manifest(cfg, command, outputs):
    payload = {"command": command, "version": __version__,
               "config": cfg.resolved(), "outputs": sorted(outputs)}
    with open(os.path.join(cfg.out, "manifest.json"), "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (complex, np.complexfloating)):
        return [float(obj.real), float(obj.imag)]
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _write_json(cfg, name, payload):
    with open(os.path.join(cfg.out, name), "w") as f:
        json.dump(_jsonable(payload), f, indent=1, sort_keys=True)
    return name


def _grid_csv(cfg, name, grid, columns):
    """Node table x,y,<columns>; row-major over the grid, NaN at masked."""
    X, Y = grid.mesh()
    cols = [("x", X), ("y", Y)] + list(columns.items())
    path = os.path.join(cfg.out, name)
    with open(path, "w") as f:
        f.write(",".join(c for c, _ in cols) + "\n")
        flat = [np.asarray(a).ravel() for _, a in cols]
        for row in zip(*flat):
            f.write(",".join("%.17g" % v for v in row) + "\n")
    return name


def _field_pack(model, cfg, seed):
    """Shared eigensolve: grid, operators, P0, slow pair."""
    from . import operators
    grid = operators.Grid2D.from_model(model, cfg.grid_nx, cfg.grid_ny)
    B = operators.assemble_backward(model, grid)
    F = operators.assemble_forward(model, grid)
    P0 = operators.stationary_density(F, grid)
    pair = operators.slowest_mode(B, F)
    return grid, B, F, P0, pair


#  commands -----------------------------------------------------------------

def cmd_spectrum(cfg):
    from . import operators
    model = cfg.build_model()
    if model.dim != 2:
        raise RefusedError("spectrum command requires a 2D model")
    grid = operators.Grid2D.from_model(model, cfg.grid_nx, cfg.grid_ny)
    B = operators.assemble_backward(model, grid)
    spectrum = operators.leading_spectrum(B, count=20)
    path = os.path.join(cfg.out, "spectrum.csv")
    operators.spectrum_to_csv(spectrum, path)
    report = operators.robustly_oscillatory_check(spectrum)
    outputs = ["spectrum.csv", _write_json(cfg, "robustness.json", report)]
    return outputs


def cmd_phase(cfg):
    from . import phasemaps
    model = cfg.build_model()
    if model.dim != 2:
        raise RefusedError("phase command requires a 2D model")
    want_mrt = cfg.maps in ("mrt", "both")
    if want_mrt and model.noise_dim < model.dim:
        raise RefusedError("mrt phase needs nondegenerate noise; %s drives "
                           "%d of %d coordinates" %
                           (model.name, model.noise_dim, model.dim))
    grid, B, F, P0, pair = _field_pack(model, cfg, cfg.seed)
    x_ref = phasemaps.default_x_ref(P0, pair.Q)
    outputs = [_grid_csv(cfg, "p0.csv", grid, {"p0": P0.values})]
    meta = {"x_ref": [float(x_ref[0]), float(x_ref[1])],
            "lambda1": None}
    if cfg.maps in ("asymptotic", "both"):
        field, u = phasemaps.asymptotic_phase(pair, x_ref, model, P0)
        outputs.append(_grid_csv(cfg, "psi.csv", grid,
                                 {"psi": field.psi, "u": u.values}))
        meta["lambda1"] = [pair.lam.real, pair.lam.imag]
    if want_mrt:
        sol = phasemaps.mrt_solve(model, grid)
        theta = phasemaps.mrt_phase(sol, x_ref=x_ref)
        outputs.append(_grid_csv(cfg, "theta.csv", grid,
                                 {"theta": theta.psi}))
        meta["tbar"] = sol.tbar
    outputs.append(_write_json(cfg, "phase_meta.json", meta))
    return outputs


def cmd_reduce(cfg):
    from . import phasemaps, reduction, simulate
    model = cfg.build_model()
    if model.dim != 2:
        raise RefusedError("reduce command requires a 2D model")
    grid, B, F, P0, pair = _field_pack(model, cfg, cfg.seed)
    x_ref = phasemaps.default_x_ref(P0, pair.Q)
    field, _u = phasemaps.asymptotic_phase(pair, x_ref, model, P0)

    rq = reduction.grid_reduce(model, field, P0, n_bins=cfg.n_bins)
    rq = reduction.smooth_periodic(rq, order=cfg.smoothing)
    spec = simulate.EnsembleSpec(n_traj=cfg.n_traj, dt=cfg.dt,
                                 t_burn=cfg.t_burn, t_end=cfg.t_end,
                                 seed=cfg.seed)
    ens = simulate.ensemble(model, spec)
    series = [reduction.full_phase_series(t, field) for t in ens]
    rk = reduction.km_estimate(series, dt=cfg.dt, n_bins=cfg.n_bins)
    rk = reduction.smooth_periodic(rk, order=cfg.smoothing)

    rq.to_csv(os.path.join(cfg.out, "reduced_grid.csv"))
    rk.to_csv(os.path.join(cfg.out, "reduced_km.csv"))

    scale = max(float(np.max(np.abs(rq.a))), 1e-12)
    gap_a = float(np.max(np.abs(rq.a - rk.a))) / scale
    gap_D = float(np.max(np.abs(rq.D - rk.D))) / max(float(np.max(rq.D)), 1e-12)
    zc = int(np.sum(np.diff(np.signbit(
        np.concatenate([rq.a, rq.a[:1]]))).astype(bool)))
    report = {"max_rel_gap_a": gap_a, "max_rel_gap_D": gap_D,
              "zero_crossings_a": zc,
              "agreement_warning": bool(gap_a > 0.1 or gap_D > 0.25)}
    return ["reduced_grid.csv", "reduced_km.csv",
            _write_json(cfg, "reduce_report.json", report)]


def cmd_longterm(cfg):
    from . import longterm, phasemaps, reduction
    base = cfg.build_model()
    if base.dim != 2:
        raise RefusedError("longterm command requires a 2D model")
    rows = []
    flags = {}
    for D in cfg.d_sweep:
        model = model_from_key(cfg.model, {**cfg.params, "D": float(D)})
        grid, B, F, P0, pair = _field_pack(model, cfg, cfg.seed)
        x_ref = phasemaps.default_x_ref(P0, pair.Q)
        field, _u = phasemaps.asymptotic_phase(pair, x_ref, model, P0)
        if cfg.label == "mrt":
            if model.noise_dim < model.dim:
                raise RefusedError("mrt phase needs nondegenerate noise")
            sol = phasemaps.mrt_solve(model, grid)
            field = phasemaps.mrt_phase(sol, x_ref=x_ref)
        full, stats = longterm.full_phase_stats(
            model, field, _spec_for(cfg), n_bins=cfg.n_bins)
        rmodel = reduction.km_from_stats(stats, cfg.dt, label=cfg.label)
        rsm = reduction.smooth_periodic(rmodel, order=cfg.smoothing)
        red = longterm.reduced_mc_stats(rsm, n_traj=cfg.red_n_traj,
                                        t_window=cfg.t_end - cfg.t_burn,
                                        dt=cfg.red_dt, seed=cfg.seed + 1)
        rows.append((cfg.model, cfg.label, D, "full", full))
        rows.append((cfg.model, cfg.label, D, "reduced_mc", red))
        key = "D=%g" % D
        flags[key] = {
            "z_omega": abs(full.omega_eff - red.omega_eff)
            / float(np.hypot(full.stderr_omega, red.stderr_omega)),
            "z_D": abs(full.D_eff - red.D_eff)
            / float(np.hypot(full.stderr_D, red.stderr_D))}
        try:
            ana = longterm.analytic_stats(rsm, mesh=cfg.mesh)
            rows.append((cfg.model, cfg.label, D, "analytic", ana))
            flags[key]["analytic_rel_omega"] = (
                abs(ana.omega_eff - red.omega_eff) / abs(red.omega_eff))
            flags[key]["analytic_rel_D"] = (
                abs(ana.D_eff - red.D_eff) / abs(red.D_eff))
        except longterm.StiffnessError as e:
            flags[key]["analytic_absent"] = str(e)
    path = os.path.join(cfg.out, "longterm.csv")
    longterm.stats_table_csv(path, rows)
    return ["longterm.csv", _write_json(cfg, "longterm_flags.json", flags)]


def _spec_for(cfg):
    from .simulate import EnsembleSpec
    return EnsembleSpec(n_traj=cfg.n_traj, dt=cfg.dt, t_burn=cfg.t_burn,
                        t_end=cfg.t_end, seed=cfg.seed)


def cmd_response(cfg):
    from . import phasemaps, response, simulate
    model = cfg.build_model()
    if model.dim != 2:
        raise RefusedError("response command requires a 2D model")
    eps = np.asarray(cfg.eps, dtype=float)
    if eps.size != 2 or not np.any(eps != 0):
        raise ConfigError("eps must be a nonzero 2-vector, got %r" % cfg.eps)
    grid, B, F, P0, pair = _field_pack(model, cfg, cfg.seed)
    x_ref = phasemaps.default_x_ref(P0, pair.Q)
    field, _u = phasemaps.asymptotic_phase(pair, x_ref, model, P0)
    gradient = phasemaps.phase_gradient(pair)
    curve = response.aiprc_grid(gradient, field, P0, n_bins=cfg.n_bins)
    pulse = response.pulse_experiment(model, field, eps,
                                      n_trials=cfg.n_trials,
                                      n_bins=cfg.n_bins, seed=cfg.seed)
    curve.to_csv(os.path.join(cfg.out, "aiprc_grid.csv"))
    pulse.to_csv(os.path.join(cfg.out, "pulse.csv"))

    pred = curve.values @ (eps / float(np.linalg.norm(eps)))
    comb = np.hypot(pulse.stderr[:, 0],
                    np.linalg.norm(curve.stderr, axis=1))
    z = np.abs(pulse.values[:, 0] - pred) / comb
    vx = curve.values[:, 0]
    report = {
        "bins_within_2sigma": int(np.sum(z < 2)),
        "n_bins": int(cfg.n_bins),
        "max_z": float(np.nanmax(z)),
        "peak_magnitude": curve.peak_magnitude(),
        "positive_fraction_x": float(np.mean(vx > 0)),
        "single_signed_x": bool(np.all(vx > 0) or np.all(vx < 0)),
    }
    return ["aiprc_grid.csv", "pulse.csv",
            _write_json(cfg, "response_report.json", report)]


def cmd_gedmd(cfg):
    from . import gedmd, longterm, reduction, simulate
    if cfg.gedmd_mode == "hopf-check":
        model = model_from_key("hopf", dict(cfg.params))
    else:
        model = cfg.build_model()
    x0 = {"hopf": [1.0, 0.0], "snic": [1.0, 0.0],
          "ml3d": [-20.0, 0.1, 0.1]}[model.name]
    traj = simulate.euler_maruyama(model, x0, dt=cfg.train_dt,
                                   steps=cfg.train_steps, seed=cfg.seed,
                                   record_stride=cfg.train_stride)
    burn = max(1, int(round(cfg.t_burn / (cfg.train_dt * cfg.train_stride))))
    traj = simulate.Trajectory(times=traj.times[burn:],
                               states=traj.states[burn:])
    g = gedmd.fit_gedmd(model, traj, degree=cfg.degree,
                        m_samples=cfg.m_samples)
    g.to_json(os.path.join(cfg.out, "gedmd_model.json"))
    outputs = ["gedmd_model.json"]

    if cfg.gedmd_mode == "hopf-check":
        from . import operators
        grid = operators.Grid2D.from_model(model, cfg.grid_nx, cfg.grid_ny)
        B = operators.assemble_backward(model, grid)
        F = operators.assemble_forward(model, grid)
        pair = operators.slowest_mode(B, F)
        rel = abs(g.lam1 - pair.lam) / abs(pair.lam)
        outputs.append(_write_json(cfg, "lambda1_check.json", {
            "gedmd": [g.lam1.real, g.lam1.imag],
            "fd": [pair.lam.real, pair.lam.imag],
            "rel_error": rel}))
        return outputs

    spec = _spec_for(cfg)
    ens = simulate.ensemble(model, spec, record_stride=cfg.train_stride)
    series = [gedmd.gedmd_phase_series(g, t) for t in ens]
    dt_series = float(series[0].times[1] - series[0].times[0])
    full = longterm.empirical_stats(series, t_window=cfg.t_end - cfg.t_burn)
    rmodel = reduction.km_estimate(series, dt=dt_series, n_bins=cfg.n_bins)
    rsm = reduction.smooth_periodic(rmodel, order=cfg.smoothing)
    rsm.to_csv(os.path.join(cfg.out, "reduced_gedmd.csv"))
    red = longterm.reduced_mc_stats(rsm, n_traj=cfg.red_n_traj,
                                    t_window=cfg.t_end - cfg.t_burn,
                                    dt=cfg.red_dt, seed=cfg.seed + 1)
    comparison = {
        "full": {"omega": full.omega_eff, "D": full.D_eff,
                 "stderr_omega": full.stderr_omega, "stderr_D": full.stderr_D},
        "reduced": {"omega": red.omega_eff, "D": red.D_eff,
                    "stderr_omega": red.stderr_omega, "stderr_D": red.stderr_D},
        "z_omega": abs(full.omega_eff - red.omega_eff)
        / float(np.hypot(full.stderr_omega, red.stderr_omega)),
        "z_D": abs(full.D_eff - red.D_eff)
        / float(np.hypot(full.stderr_D, red.stderr_D)),
        "lambda1": [g.lam1.real, g.lam1.imag]}
    outputs.append(_write_json(cfg, "gedmd_longterm.json", comparison))

    eps = np.zeros(model.dim)
    eps[0] = 1.0
    curve = gedmd.gedmd_response_curve(g, ens, n_bins=max(10, cfg.n_bins // 4))
    rng = np.random.default_rng(cfg.seed + 2)
    idx = rng.choice(traj.states.shape[0],
                     size=min(traj.states.shape[0],
                              int(round(1.25 * cfg.n_trials))),
                     replace=False)
    pulse = gedmd.gedmd_pulse_experiment(
        model, g, eps, n_trials=min(cfg.n_trials, idx.size),
        n_bins=max(10, cfg.n_bins // 4), seed=cfg.seed + 2,
        states=traj.states[np.sort(idx)])
    curve.to_csv(os.path.join(cfg.out, "aiprc_gedmd.csv"))
    pulse.to_csv(os.path.join(cfg.out, "pulse_gedmd.csv"))
    outputs += ["reduced_gedmd.csv", "aiprc_gedmd.csv", "pulse_gedmd.csv"]
    return outputs


def cmd_simulate(cfg):
    from . import simulate
    model = cfg.build_model()
    ens = simulate.ensemble(model, _spec_for(cfg))
    path = os.path.join(cfg.out, "trajectory0.csv")
    t0 = ens[0]
    with open(path, "w") as f:
        f.write("t," + ",".join("x%d" % i for i in range(model.dim)) + "\n")
        for t, row in zip(t0.times, t0.states):
            f.write("%.17g," % t + ",".join("%.17g" % v for v in row) + "\n")
    finals = np.stack([t.states[-1] for t in ens])
    summary = {"n_traj": len(ens),
               "escapes": int(sum(t.escapes for t in ens)),
               "final_mean": [float(v) for v in finals.mean(axis=0)],
               "final_std": [float(v) for v in finals.std(axis=0)]}
    return ["trajectory0.csv", _write_json(cfg, "simulate_summary.json",
                                           summary)]


_COMMANDS = {"spectrum": cmd_spectrum, "phase": cmd_phase,
             "reduce": cmd_reduce, "longterm": cmd_longterm,
             "response": cmd_response, "gedmd": cmd_gedmd,
             "simulate": cmd_simulate}


def _error_payload(exc):
    return {"error": type(exc).__name__, "message": str(exc)}


def _classify(exc):
    from .longterm import StiffnessError, UnderpoweredError as LtUnder
    from .response import UnderpoweredError as RsUnder
    if isinstance(exc, (ConfigError, KeyError)):
        return EXIT_CONFIG
    if isinstance(exc, (RefusedError, LtUnder, RsUnder)):
        return EXIT_REFUSED
    return EXIT_NUMERICAL


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="stochphase",
        description="Phase maps, reduced phase models and response curves "
                    "for stochastic oscillators.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--model", default=None)
        p.add_argument("overrides", nargs="*", metavar="key=value")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, args.overrides,
                          flags={"seed": args.seed, "out": args.out,
                                 "model": args.model})
    except ConfigError as e:
        json.dump(_error_payload(e), sys.stdout)
        sys.stdout.write("\n")
        return EXIT_CONFIG

    _ensure_outdir(cfg)
    try:
        outputs = _COMMANDS[args.command](cfg)
    except Exception as e:
        payload = _error_payload(e)
        json.dump(payload, sys.stdout)
        sys.stdout.write("\n")
        with open(os.path.join(cfg.out, "FAILED.json"), "w") as f:
            json.dump(payload, f, indent=1, sort_keys=True)
        return _classify(e)
    _write_manifest(cfg, args.command, outputs)
    print(json.dumps({"ok": True, "out": cfg.out,
                      "outputs": sorted(outputs)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
