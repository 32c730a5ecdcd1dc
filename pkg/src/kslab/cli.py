"""Batch command-line front end.

Verbs: ``profile`` (compute and certify a stationary profile),
``spectrum`` (eigenpairs of the linearized operator around it),
``evolve`` (one monitored renormalized run), ``shoot`` (bisection of the
unstable amplitude onto the stable set), and ``report`` (aggregate the
artifacts of previous runs into a text summary). Each verb reads an
optional config file (see config.py for the grammar), writes CSV and
JSON artifacts under io.out_dir, and caches expensive payloads under
io.cache_dir keyed by the relevant config subset and code version.

Numbers in CSV files are written as ``%.16e`` (17 significant digits),
which round-trips binary64 exactly; flag columns are plain integers.
Identical config and code version produce byte-identical CSV output.

Exit codes: 0 for success (a monitor exit is a valid scientific result),
2 for configuration or bracket errors, 3 for numerical failures, 4 for a
missing dependency artifact (io.require_cache with a cold cache).
"""

import argparse
import json
import os
import sys

import numpy as np

from .cache import Cache
from .config import AUTO_BRACKETS, load_config, ExperimentConfig
from .errors import (BracketError, CertificationError, ConfigError,
                     DomainError, MissingArtifactError, NonConvergenceError,
                     OutsideTubeError, SingularModulationError)
from .flow import (FlowParams, blowup_extract, build_initial_state,
                   evolve, localized_modes_for, orthogonalize_density,
                   shoot_stable_manifold)
from .grids import (TailedInterpolant, build_measure, make_grid,
                    make_layer_grid)
from .profiles import Profile, find_profile
from .spectrum import EigenPair, SpectrumReport, assemble, eigen_solve
from .transforms import partial_mass

__all__ = ["main"]

_FLOAT_FMT = "%.16e"


# -- artifact writers ----------------------------------------------------------


def _write_csv(path, header, columns, int_cols=()):
    """Write named columns; floats as %.16e, listed columns as integers."""
    n_rows = len(columns[0])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(n_rows):
            cells = []
            for j, col in enumerate(columns):
                if j in int_cols:
                    cells.append("%d" % int(col[i]))
                else:
                    cells.append(_FLOAT_FMT % float(col[i]))
            fh.write(",".join(cells) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_path(cfg, name):
    out_dir = cfg.io["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    if os.path.exists(path) and not cfg.io["overwrite"]:
        raise ConfigError("refusing to overwrite %s; set io.overwrite=true"
                          % path)
    return path


# -- shared pipeline pieces ----------------------------------------------------


def _build_grid(cfg):
    g = cfg.grid
    if g["kind"] == "layer":
        return make_layer_grid(r_max=g["r_max"])
    return make_grid(r_max=g["r_max"], n_points=g["n"], stretch=g["stretch"])


def _refined_operator(profile, cfg):
    """Operator on a grid with half the spacing, for Richardson refinement."""
    g = cfg.grid
    if g["kind"] == "layer":
        fine_grid = make_layer_grid(r_max=g["r_max"], h_inner=6.25e-4 / 2,
                                    h_outer=7.5e-3 / 2)
    else:
        fine_grid = make_grid(r_max=g["r_max"], n_points=2 * g["n"] - 1,
                              stretch=g["stretch"])
    phi_fine = TailedInterpolant(profile.grid, profile.samples)(fine_grid.r)
    return assemble(phi_fine, build_measure(phi_fine, fine_grid))


def _profile_cfg(cfg, n_index=None):
    """Profile config subset, optionally overriding the profile index."""
    subset = cfg.subset("grid", "profile")
    if n_index is not None:
        subset["profile"]["n_index"] = n_index
    return subset


def _get_profile(cfg, cache, use_cache, n_index=None):
    """Profile from cache or fresh compute; returns (profile, from_cache)."""
    subset = _profile_cfg(cfg, n_index)
    n = subset["profile"]["n_index"]
    grid = _build_grid(cfg)
    if use_cache:
        payload = cache.load("profile", subset)
        if payload is not None and np.array_equal(payload["r"], grid.r):
            prof = Profile(n=int(payload["n"]), a_n=float(payload["a_n"]),
                           grid=grid, samples=payload["samples"],
                           tail_c=float(payload["tail_c"]),
                           residual_sup=float(payload["residual_sup"]),
                           meta={"from_cache": True})
            print("cache hit: profile n=%d (%s)"
                  % (n, cache.key("profile", subset)[:12]))
            return prof, True
    if cfg.io["require_cache"]:
        raise MissingArtifactError("profile n=%d is not cached and "
                                   "computation is disabled "
                                   "(io.require_cache)" % n)
    bracket = subset["profile"]["bracket"]
    if bracket is None:
        if n not in AUTO_BRACKETS:
            raise ConfigError("no built-in bracket for profile index %d; "
                              "set profile.bracket" % n)
        bracket = AUTO_BRACKETS[n]
    prof = find_profile(n, bracket, grid, tol=subset["profile"]["tol"])
    if use_cache:
        cache.store("profile", subset,
                    {"r": grid.r, "samples": prof.samples, "n": prof.n,
                     "a_n": prof.a_n, "tail_c": prof.tail_c,
                     "residual_sup": prof.residual_sup})
    return prof, False


def _spectrum_cfg(cfg, n_index=None):
    subset = cfg.subset("grid", "profile", "spectrum")
    if n_index is not None:
        subset["profile"]["n_index"] = n_index
    return subset


def _get_spectrum(cfg, cache, use_cache, profile, n_index=None):
    """Spectrum from cache or fresh solve; the operator is always rebuilt
    fresh (it is cheap and carries live objects the cache cannot hold)."""
    subset = _spectrum_cfg(cfg, n_index)
    op = assemble(profile, build_measure(profile))
    if use_cache:
        payload = cache.load("spectrum", subset)
        if payload is not None:
            pairs = []
            stitches = payload["tail_stitch"]
            for j in range(payload["eigenvalues"].size):
                pair = EigenPair(
                    eigenvalue=float(payload["eigenvalues"][j]),
                    eigenfunction=payload["psis"][j], index=j,
                    residual_matrix=float(payload["residual_matrix"][j]),
                    residual_apply=float(payload["residual_apply"][j]))
                pair.tail_stitch_radius = (None if np.isnan(stitches[j])
                                           else float(stitches[j]))
                pairs.append(pair)
            meta = {"nodes": op.grid.n, "r_max": op.grid.r_max,
                    "operator": op, "from_cache": True}
            if "extrapolated" in payload:
                meta["extrapolated"] = payload["extrapolated"]
            report = SpectrumReport(
                eigenvalues=payload["eigenvalues"], pairs=pairs,
                n_nonpositive=int(payload["n_nonpositive"]),
                gap=float(payload["gap"]), meta=meta)
            print("cache hit: spectrum n=%d (%s)"
                  % (subset["profile"]["n_index"],
                     cache.key("spectrum", subset)[:12]))
            return report, True
    if cfg.io["require_cache"]:
        raise MissingArtifactError("spectrum for n=%d is not cached and "
                                   "computation is disabled "
                                   "(io.require_cache)"
                                   % subset["profile"]["n_index"])
    refine_with = (_refined_operator(profile, cfg)
                   if cfg.spectrum["refine"] else None)
    report = eigen_solve(op, cfg.spectrum["k"], refine_with=refine_with)
    if use_cache:
        arrays = {
            "eigenvalues": report.eigenvalues,
            "psis": np.stack([p.eigenfunction for p in report.pairs]),
            "residual_matrix": np.array([p.residual_matrix
                                         for p in report.pairs]),
            "residual_apply": np.array([p.residual_apply
                                        for p in report.pairs]),
            "tail_stitch": np.array(
                [np.nan if p.tail_stitch_radius is None
                 else p.tail_stitch_radius for p in report.pairs]),
            "n_nonpositive": report.n_nonpositive,
            "gap": report.gap,
        }
        if "extrapolated" in report.meta:
            arrays["extrapolated"] = report.meta["extrapolated"]
        cache.store("spectrum", subset, arrays)
    return report, False


def _build_perturbation(cfg, modes, seed):
    """Initial density perturbation and mode amplitudes from the config.

    bump and noise perturbations are projected onto the admissible set
    (all dual pairings zero, scaling included) and rescaled so that the
    partial-mass deviation has max norm exactly perturbation_amplitude;
    mode perturbations go into the amplitude vector instead.
    """
    fl = cfg.flow
    grid = modes.measure.grid
    n_amp = len(modes.indices) - 1
    a0 = np.zeros(n_amp)
    kind = fl["perturbation"]
    amp = fl["perturbation_amplitude"]
    if kind == "none" or amp == 0.0:
        return np.zeros(grid.n), a0
    if kind == "mode":
        slot = fl["perturbation_mode"] - 2
        if slot >= n_amp:
            raise ConfigError("flow.perturbation_mode=%d exceeds the %d "
                              "retained modes" % (fl["perturbation_mode"],
                                                  n_amp + 1))
        a0[slot] = amp
        return np.zeros(grid.n), a0
    if kind == "bump":
        raw = np.exp(-((grid.r - fl["perturbation_center"])
                       / fl["perturbation_width"]) ** 2)
    else:  # noise
        rng = np.random.default_rng(seed)
        coeff = rng.standard_normal(5)
        centers = rng.uniform(0.5, 6.0, 5)
        widths = rng.uniform(0.5, 1.5, 5)
        raw = np.zeros(grid.n)
        for c, m, w in zip(coeff, centers, widths):
            raw += c * np.exp(-((grid.r - m) / w) ** 2)
    projected = orthogonalize_density(raw, modes, skip_scaling=False)
    sup = float(np.abs(partial_mass(projected, grid)).max())
    if sup < 1e-14:
        raise DomainError("perturbation is annihilated by the gate "
                          "projection; choose another shape")
    return (amp / sup) * projected, a0


def _flow_params(cfg, profile, spectrum):
    fl = cfg.flow
    return FlowParams(n=fl["n_index"], profile=profile, spectrum=spectrum,
                      s0=fl["s0"], ds=fl["ds"], mu=fl["mu"],
                      s_end=fl["s_end"], K=fl["K"], K_prime=fl["K_prime"],
                      K_double_prime=fl["K_double_prime"],
                      delta=fl["delta"], tube_radius=fl["tube_radius"])


def _write_trajectory(path, traj, diag):
    n_amp = traj.a.shape[1]
    header = (["s", "lambda", "lambda_e_s2", "t"]
              + ["a_%d" % (j + 2) for j in range(n_amp)]
              + ["eps_L2rho", "eps_Linf", "weighted_sup", "grad_sup",
                 "exit_flag"])
    flags = np.zeros(traj.s.size, dtype=int)
    if traj.exit is not None:
        flags[-1] = traj.exit["bound"]
    columns = ([traj.s, traj.lam, diag.lambda_e_s2, traj.t]
               + [traj.a[:, j] for j in range(n_amp)]
               + [traj.eps_l2, traj.eps_inf, traj.weighted_sup,
                  traj.grad_sup, flags])
    _write_csv(path, header, columns, int_cols=(len(header) - 1,))


def _exit_payload(traj):
    if traj.exit is None:
        return None
    return {k: traj.exit[k] for k in ("bound", "name", "sign", "s")}


# -- commands ------------------------------------------------------------------


def cmd_profile(cfg, args):
    cache = Cache(cfg.io["cache_dir"])
    prof, hit = _get_profile(cfg, cache, not args.no_cache)
    n = prof.n
    csv_path = _out_path(cfg, "profile_n%d.csv" % n)
    _write_csv(csv_path, ["r", "phi"], [prof.grid.r, prof.samples])
    sidecar = {"n_index": n, "a_n": prof.a_n, "tail_c": prof.tail_c,
               "residual_sup": prof.residual_sup,
               "grid": cfg.subset("grid")["grid"],
               "nodes": prof.grid.n, "from_cache": hit}
    _write_json(_out_path(cfg, "profile_n%d.json" % n), sidecar)
    print("profile n=%d: a_n=%.10g residual=%.3e tail_c=%.6g -> %s"
          % (n, prof.a_n, prof.residual_sup, prof.tail_c, csv_path))
    return 0


def cmd_spectrum(cfg, args):
    cache = Cache(cfg.io["cache_dir"])
    use_cache = not args.no_cache
    prof, _ = _get_profile(cfg, cache, use_cache)
    report, hit = _get_spectrum(cfg, cache, use_cache, prof)
    n = prof.n
    k = report.eigenvalues.size
    refined = report.meta.get("extrapolated", report.eigenvalues)
    csv_path = _out_path(cfg, "spectrum_n%d.csv" % n)
    _write_csv(csv_path,
               ["j", "eigenvalue", "eigenvalue_refined", "residual_matrix",
                "residual_apply"],
               [np.arange(k), report.eigenvalues, refined,
                np.array([p.residual_matrix for p in report.pairs]),
                np.array([p.residual_apply for p in report.pairs])],
               int_cols=(0,))
    sidecar = {"n_index": n, "n_nonpositive": report.n_nonpositive,
               "gap": report.gap, "k": k,
               "eigenvalues": report.eigenvalues,
               "refined": refined, "from_cache": hit}
    dc = cfg.spectrum["r_max_double_check"]
    if dc > 0:
        wide = ExperimentConfig(cfg.subset("grid", "profile", "spectrum",
                                           "flow", "shoot", "io"))
        wide.grid["r_max"] = dc
        if wide.grid["kind"] == "uniform":
            # keep the spacing, not the node count
            ratio = dc / cfg.grid["r_max"]
            wide.grid["n"] = int(round((cfg.grid["n"] - 1) * ratio)) + 1
        wide.spectrum["refine"] = False
        wprof, _ = _get_profile(wide, cache, use_cache)
        wreport, _ = _get_spectrum(wide, cache, use_cache, wprof)
        shift = float(np.abs(wreport.eigenvalues[:k]
                             - report.eigenvalues[:k]).max())
        sidecar["double_check"] = {"r_max": dc, "max_shift": shift}
        print("double check at r_max=%g: max eigenvalue shift %.3e"
              % (dc, shift))
    _write_json(_out_path(cfg, "spectrum_n%d.json" % n), sidecar)
    print("N_%d = %d" % (n, report.n_nonpositive))
    print("gap = %.16g" % report.gap)
    print("spectrum n=%d -> %s" % (n, csv_path))
    return 0


def cmd_evolve(cfg, args):
    cache = Cache(cfg.io["cache_dir"])
    use_cache = not args.no_cache
    n = cfg.flow["n_index"]
    prof, _ = _get_profile(cfg, cache, use_cache, n_index=n)
    spec, _ = _get_spectrum(cfg, cache, use_cache, prof, n_index=n)
    modes = localized_modes_for(prof, spec)
    bar_u0, a0 = _build_perturbation(cfg, modes, args.seed)
    params = _flow_params(cfg, prof, spec)
    state = build_initial_state(prof, spec, modes, bar_u0, a0,
                                s0=params.s0, mu=params.mu,
                                tube_radius=params.tube_radius)
    traj, diag = evolve(state, params)
    csv_path = _out_path(cfg, "trajectory_n%d.csv" % n)
    _write_trajectory(csv_path, traj, diag)
    sidecar = {"n_index": n, "seed": args.seed,
               "perturbation": cfg.subset("flow")["flow"],
               "exit": _exit_payload(traj),
               "s_final": float(traj.s[-1]),
               "lambda_final": float(traj.lam[-1])}
    if traj.exit is None:
        try:
            report = blowup_extract(traj, params)
            sidecar.update({
                "T": report.T, "rate_fit": report.rate_fit,
                "sup_growth": report.sup_growth,
                "u_star_slope": report.u_star["slope"],
                "blowup_meta": report.meta})
            _write_csv(_out_path(cfg, "ustar_n%d.csv" % n), ["x", "u"],
                       [report.u_star["x"], report.u_star["values"]])
            print("evolve n=%d: trapped to s=%.6g, T=%.10g, "
                  "rate_fit=%.6g, sup_growth=%.6g"
                  % (n, traj.s[-1], report.T, report.rate_fit,
                     report.sup_growth))
        except DomainError as exc:
            sidecar["blowup_note"] = str(exc)
            print("evolve n=%d: trapped to s=%.6g (no rate fit: %s)"
                  % (n, traj.s[-1], exc))
    else:
        print("evolve n=%d: exit at s=%.6g via bound %d (%s), sign %+d"
              % (n, traj.exit["s"], traj.exit["bound"],
                 traj.exit["name"], traj.exit["sign"]))
    _write_json(_out_path(cfg, "blowup_n%d.json" % n), sidecar)
    print("trajectory -> %s" % csv_path)
    return 0


def cmd_shoot(cfg, args):
    cache = Cache(cfg.io["cache_dir"])
    use_cache = not args.no_cache
    n = cfg.flow["n_index"]
    prof, _ = _get_profile(cfg, cache, use_cache, n_index=n)
    spec, _ = _get_spectrum(cfg, cache, use_cache, prof, n_index=n)
    modes = localized_modes_for(prof, spec)
    bar_u0, _ = _build_perturbation(cfg, modes, args.seed)
    params = _flow_params(cfg, prof, spec)
    result = shoot_stable_manifold(bar_u0, cfg.shoot["bracket"], params,
                                   modes,
                                   bisect_tol=cfg.shoot["bisect_tol"],
                                   max_runs=cfg.shoot["max_runs"])
    hist_path = _out_path(cfg, "shoot_history.csv")
    _write_csv(hist_path, ["run", "a2", "exit_bound", "exit_sign",
                           "s_final"],
               [np.array([h["run"] for h in result.history]),
                np.array([h["a2"] for h in result.history]),
                np.array([h["bound"] for h in result.history]),
                np.array([h["sign"] for h in result.history]),
                np.array([h["s_final"] for h in result.history])],
               int_cols=(0, 2, 3))
    traj_path = _out_path(cfg, "trajectory_shoot.csv")
    _write_trajectory(traj_path, result.trajectory, result.diagnostics)
    sidecar = {"n_index": n, "a2_star": result.a2_star,
               "bracket": list(result.bracket),
               "bisect_tol": cfg.shoot["bisect_tol"],
               "trapped": result.trapped, "n_runs": result.n_runs,
               "endpoint_exits": list(result.endpoint_exits),
               "exit": _exit_payload(result.trajectory),
               "trapped_duration": float(result.trajectory.s[-1]
                                         - params.s0),
               "seed": args.seed}
    _write_json(_out_path(cfg, "shoot.json"), sidecar)
    print("shoot n=%d: a2*=%.10e after %d runs, trapped=%s, "
          "trapped duration %.4g"
          % (n, result.a2_star, result.n_runs, result.trapped,
             sidecar["trapped_duration"]))
    print("history -> %s" % hist_path)
    print("trapped trajectory -> %s" % traj_path)
    return 0


def cmd_report(cfg, args):
    out_dir = cfg.io["out_dir"]
    names = sorted(os.listdir(out_dir)) if os.path.isdir(out_dir) else []
    sidecars = [f for f in names if f.endswith(".json")]
    if not sidecars:
        raise MissingArtifactError("no artifacts under %s; run profile/"
                                   "spectrum/evolve/shoot first" % out_dir)
    lines = ["artifact report for %s" % out_dir, ""]
    for name in sidecars:
        with open(os.path.join(out_dir, name), encoding="utf-8") as fh:
            data = json.load(fh)
        lines.append("[%s]" % name)
        if name.startswith("profile"):
            lines.append("  a_n = %.16g" % data["a_n"])
            lines.append("  residual_sup = %.3e" % data["residual_sup"])
            lines.append("  tail_c = %.6g" % data["tail_c"])
        elif name.startswith("spectrum"):
            lines.append("  N = %d, gap = %.16g"
                         % (data["n_nonpositive"], data["gap"]))
            lines.append("  eigenvalues = %s"
                         % ", ".join("%.10g" % v
                                     for v in data["eigenvalues"]))
        elif name.startswith("blowup"):
            if data.get("exit"):
                lines.append("  exit: bound %d (%s) at s=%.6g sign %+d"
                             % (data["exit"]["bound"], data["exit"]["name"],
                                data["exit"]["s"], data["exit"]["sign"]))
            if "T" in data:
                lines.append("  T = %.16g, rate_fit = %.6g, "
                             "sup_growth = %.6g"
                             % (data["T"], data["rate_fit"],
                                data["sup_growth"]))
        elif name.startswith("shoot"):
            lines.append("  a2* = %.10e (%d runs, trapped=%s, "
                         "duration %.4g)"
                         % (data["a2_star"], data["n_runs"],
                            data["trapped"], data["trapped_duration"]))
        lines.append("")
    text = "\n".join(lines)
    path = _out_path(cfg, "report.txt")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    sys.stdout.write(text)
    print("report -> %s" % path)
    return 0


# -- entry point ---------------------------------------------------------------


def _resolve_config(args):
    cfg = (load_config(args.config) if args.config
           else ExperimentConfig.defaults().validate())
    if args.out:
        cfg.io["out_dir"] = args.out
    return cfg


def _build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", metavar="PATH",
                        help="configuration file (defaults apply if absent)")
    shared.add_argument("--seed", type=int, default=0, metavar="N",
                        help="seed for stochastic perturbations")
    shared.add_argument("--out", metavar="DIR",
                        help="override io.out_dir")
    shared.add_argument("--no-cache", action="store_true",
                        help="neither read nor write the payload cache")
    parser = argparse.ArgumentParser(
        prog="kslab",
        description="numerical laboratory for radial self-similar collapse")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, func, doc in (
            ("profile", cmd_profile, "compute and certify a profile"),
            ("spectrum", cmd_spectrum, "eigenpairs of the linearization"),
            ("evolve", cmd_evolve, "one monitored renormalized run"),
            ("shoot", cmd_shoot, "bisect the unstable amplitude"),
            ("report", cmd_report, "summarize artifacts in out_dir")):
        p = sub.add_parser(verb, parents=[shared], help=doc)
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        return args.func(cfg, args)
    except (ConfigError, BracketError) as exc:
        print("parameter error: %s" % exc, file=sys.stderr)
        return 2
    except DomainError as exc:
        print("parameter error: %s" % exc, file=sys.stderr)
        return 2
    except (NonConvergenceError, SingularModulationError,
            CertificationError, OutsideTubeError) as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        return 3
    except MissingArtifactError as exc:
        print("missing artifact: %s" % exc, file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
