"""Command-line entry point: ``pseudomodes <subcommand> --config ... --out ...``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
from scipy.integrate import cumulative_trapezoid

from . import io
from .config import ConfigError, RunConfig, bundled_config_path, load_config
from .liouvillian import integrate, spectral_gap, steady_state
from .mapping import MappingError, verify_mapping
from .observables import (heat_currents, mutual_information, negativity, reduced_state, thermo_record)
from .trajectories import convergence_fraction, run_ensemble

DEFAULT_THRESHOLD = 1e-8


def _resolve_config(arg: str) -> Path:
    p = Path(arg)
    if p.exists():
        return p
    bundled = bundled_config_path(arg.removesuffix(".json"))
    if bundled.exists():
        return bundled
    raise ConfigError(f"{arg}: no such file or bundled example (ex1, ex2, toy)")


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set {item!r}: expected key=JSON")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--set {key}: invalid JSON value ({exc.msg})") from exc
    return out


def load_run_config(args) -> RunConfig:
    cfg = load_config(_resolve_config(args.config))
    overrides = _parse_set(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides["mc.seed"] = args.seed
    return cfg.with_overrides(**overrides) if overrides else cfg


def _meta(cfg: RunConfig, **extra) -> dict:
    meta = {"name": cfg.name, "config_sha256": cfg.config_hash()}
    meta["seed"] = cfg.mc.seed if cfg.mc is not None else "none"
    meta.update(extra)
    return meta


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out) if args.out else Path("results") / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# --------------------------------------------------------------------------
# subcommands


def cmd_verify_mapping(args) -> int:
    cfg = load_run_config(args)
    exp = cfg.expansion()
    if exp is None:
        raise ConfigError("verify-mapping needs a bath block to compare against")
    pms = cfg.pseudomodes()
    rate = float(np.min(exp.exponents.real))
    if rate <= 0:
        raise ConfigError("expansion has a non-decaying term; no default grid")
    grid = np.linspace(0.0, 10.0 / rate, 1000)
    rep = verify_mapping(exp, pms, grid)
    threshold = args.threshold
    ok = rep.max_error <= threshold
    out = _out_dir(args, cfg)
    io.write_json(out / "mapping_report.json", {
        "status": "PASS" if ok else "FAIL", "threshold": threshold, "max_adv_error": rep.max_adv_error,
        "max_ret_error": rep.max_ret_error, "t_max": grid[-1], "n_points": len(grid),
        "pseudomodes": rep.assignments, "config_sha256": cfg.config_hash(),
    })
    print(f"{'PASS' if ok else 'FAIL'} max_adv_error={rep.max_adv_error:.3e} "
          f"max_ret_error={rep.max_ret_error:.3e} threshold={threshold:.1e}")
    return 0 if ok else 1


def cmd_run_master(args) -> int:
    cfg = load_run_config(args)
    model = cfg.model()
    out = _out_dir(args, cfg)
    grid = cfg.solver.grid
    o = cfg.outputs
    lay = model.layout
    do_heat = o.heat_currents and model.environments and not model.has_terminator
    do_thermo = o.thermodynamics and do_heat and all(e.beta is not None for e in model.environments)
    rows: dict[str, list] = {"trace": []}
    rows.update({name: [] for name in o.observables})
    currents, corr_neg, corr_mi, states_thermo = [], [], [], []
    rho0 = cfg.initial_state(model)
    final = {}

    def on_state(t, rho):
        rs = reduced_state(rho, lay)
        rows["trace"].append(np.trace(rs))
        for name, op in o.observables.items():
            rows[name].append(np.trace(op @ rs))
        if do_heat:
            currents.append(heat_currents(model, rho, t).per_mode)
        if do_thermo:
            states_thermo.append((t, rho))
        if o.correlations and len(lay) > 1:
            corr_neg.append(negativity(rho, lay))
            try:
                corr_mi.append(mutual_information(rho, lay))
            except np.linalg.LinAlgError:
                corr_mi.append(complex("nan"))
        final["rho"] = rho

    _log(f"integrating {cfg.name}: dimension {lay.total}, {len(grid)} output times")
    t0 = time.time()
    sol = integrate(model, rho0, grid, cfg.solver.rtol, cfg.solver.atol, callback=on_state)
    _log(f"done in {time.time() - t0:.1f}s ({sol.stats.steps} steps)")
    meta = _meta(cfg, dimension=lay.total, rtol=cfg.solver.rtol, atol=cfg.solver.atol)
    cols = {"t": grid, **{k: np.array(v, complex) for k, v in rows.items()}}
    io.write_csv(out / "observables.csv", cols, meta)
    if o.plots:
        from .plotting import plot_series
        plot_series(out / "observables.png", grid, {k: v for k, v in cols.items() if k != "t"}, cfg.name)
    if do_heat:
        q = np.array(currents, complex)
        hc = {"t": grid, **{f"q{n + 1}": q[:, n] for n in range(q.shape[1])}, "q_total": q.sum(axis=1)}
        io.write_csv(out / "heat_currents.csv", hc, meta)
        if o.plots:
            from .plotting import plot_heat_currents
            plot_heat_currents(out / "heat_currents.png", grid, q)
        if do_thermo:
            env_of = np.array([e for e, _, _ in model.mode_sites()], int)
            per_env = np.stack([q[:, env_of == e].sum(axis=1).real for e in range(len(model.environments))], 1)
            integ = cumulative_trapezoid(per_env, grid, axis=0, initial=0.0)
            recs = [thermo_record(model, r, rho0, integ[k], t) for k, (t, r) in enumerate(states_thermo)]
            io.write_csv(out / "thermodynamics.csv", {
                "t": grid, "U": [r.U for r in recs], "power": [r.power for r in recs],
                "entropy_sys": [r.vn_entropy_sys for r in recs], "second_law": [r.second_law_lhs for r in recs],
                "imag_residue": [r.imag_residue for r in recs], "antihermitian": [r.antihermitian for r in recs],
            }, meta)
    if corr_neg:
        io.write_csv(out / "correlations.csv", {"t": grid, "negativity": np.array(corr_neg),
                                                "mutual_information": np.array(corr_mi, complex)}, meta)
        if o.plots:
            from .plotting import plot_series
            plot_series(out / "correlations.png", grid, {"negativity": corr_neg, "|MI|": np.abs(corr_mi)},
                        "correlations", logy=True)
    if o.final_state:
        io.write_state(out / "final_state.bin", final["rho"])
    _log(f"wrote results to {out}")
    return 0


def cmd_run_mc(args) -> int:
    cfg = load_run_config(args)
    if cfg.mc is None:
        raise ConfigError("run-mc needs an mc block")
    mc = cfg.mc
    model = cfg.model()
    out = _out_dir(args, cfg)
    t_final = mc.t_final if mc.t_final is not None else cfg.solver.t_final
    n_points = mc.n_points if mc.n_points is not None else cfg.solver.n_points
    grid = np.linspace(0.0, t_final, n_points)
    n_traj = max([mc.n_traj] + mc.sweep)
    rho0 = cfg.initial_state(model)

    _log(f"deterministic reference for {cfg.name}")
    ref = {name: [] for name in cfg.outputs.observables}
    ref_trace = []

    def on_state(t, rho):
        rs = reduced_state(rho, model.layout)
        ref_trace.append(np.trace(rs))
        for name, op in cfg.outputs.observables.items():
            ref[name].append(np.trace(op @ rs))

    integrate(model, rho0, grid, cfg.solver.rtol, cfg.solver.atol, callback=on_state)

    _log(f"{n_traj} trajectories ({mc.strategy}, {mc.method}) on {args.threads} worker(s)")
    t0 = time.time()
    est = run_ensemble(model, rho0, grid, n_traj, mc.seed, mc.strategy, mc.method, cfg.outputs.observables,
                       dt=mc.dt, workers=args.threads, chunk_size=mc.chunk_size, block_size=mc.block_size,
                       progress=lambda i, n: _log(f"  chunk {i}/{n}"))
    _log(f"done in {time.time() - t0:.1f}s")

    cols: dict[str, np.ndarray] = {"t": grid}
    for i, name in enumerate(est.names):
        cols[f"mean_{name}"] = est.mean[i]
        cols[f"se_re_{name}"] = est.stderr_re[i]
        cols[f"se_im_{name}"] = est.stderr_im[i]
        cols[f"det_{name}"] = np.array(ref_trace if name == "trace" else ref[name], complex)
    meta = _meta(cfg, n_traj=n_traj, strategy=mc.strategy, method=mc.method)
    io.write_csv(out / "mc.csv", cols, meta)

    summary = {"config_sha256": cfg.config_hash(), "seed": mc.seed, "n_traj": n_traj, "strategy": mc.strategy,
               "method": mc.method, "mean_jumps": float(est.jump_counts.mean()),
               "fallback_events": int(est.fallback_counts.sum())}
    if cfg.outputs.observables:
        first = next(iter(cfg.outputs.observables))
        counts = sorted({n for n in mc.sweep + [mc.n_traj] if n % mc.block_size == 0 and n <= n_traj})
        fracs = [convergence_fraction(est, first, np.array(ref[first]), mc.delta, n) for n in counts]
        summary["convergence"] = {"observable": first, "delta": mc.delta, "window": [0.0, t_final],
                                  "n_traj": counts, "fraction": fracs}
        if cfg.outputs.plots and counts:
            from .plotting import plot_convergence
            plot_convergence(out / "convergence.png", np.array(counts), {mc.strategy: np.array(fracs)})
    io.write_json(out / "mc_summary.json", summary)
    if cfg.outputs.plots:
        from .plotting import plot_series
        series = {n: est.mean[i] for i, n in enumerate(est.names)}
        se = {n: est.stderr_re[i] for i, n in enumerate(est.names)}
        refs = {"trace": np.array(ref_trace), **{k: np.array(v) for k, v in ref.items()}}
        plot_series(out / "mc.png", grid, series, f"{cfg.name}: {n_traj} trajectories", stderr=se, reference=refs)
    _log(f"wrote results to {out}")
    return 0


def _gibbs(H: np.ndarray, beta: float) -> np.ndarray:
    w, v = np.linalg.eigh(H)
    p = np.exp(-beta * (w - w.min()))
    return (v * (p / p.sum())) @ v.conj().T


def cmd_steady(args) -> int:
    cfg = load_run_config(args)
    model = cfg.model()
    out = _out_dir(args, cfg)
    try:
        rho = steady_state(model)
    except np.linalg.LinAlgError as exc:
        print(f"FAIL steady state: {exc}")
        return 1
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    io.write_state(out / "state.bin", rho)
    rs = reduced_state(rho, model.layout)
    summary = {"config_sha256": cfg.config_hash(), "dimension": model.layout.total,
               "reduced_state": rs, "spectral_gap": spectral_gap(model),
               "observables": {name: complex(np.trace(op @ rs)) for name, op in cfg.outputs.observables.items()}}
    if model.environments and not model.has_terminator:
        q = heat_currents(model, rho)
        summary["heat_currents"] = q.per_mode
        summary["heat_current_total"] = q.total
    coupled = any(abs(pm.lambda_sq) > 0 for pm in model.pms)
    if cfg.bath is None or not coupled:
        summary["gibbs_trace_distance"] = "not applicable"
    else:
        d = rs - _gibbs(model.h_sys.at(0.0), cfg.bath.beta)
        summary["gibbs_trace_distance"] = 0.5 * float(np.sum(np.abs(np.linalg.eigvals(0.5 * (d + d.conj().T)))))
    io.write_json(out / "steady_summary.json", summary)
    if "heat_current_total" in summary:
        print(f"steady state written; total heat current {summary['heat_current_total']:.3e}")
    else:
        print("steady state written")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pseudomodes", description="Pseudomode master equations and trajectories.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="config file or bundled example name (ex1, ex2, toy)")
        sp.add_argument("--out", help="output directory (default results/<name>)")
        sp.add_argument("--set", action="append", metavar="KEY=JSON",
                        help="override a config entry by dotted path, e.g. bath.omega_reg=10")
        return sp

    vm = common(sub.add_parser("verify-mapping", help="compare pseudomode and bath correlation functions"))
    vm.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    vm.set_defaults(func=cmd_verify_mapping)
    common(sub.add_parser("run-master", help="integrate the master equation")).set_defaults(func=cmd_run_master)
    mc = common(sub.add_parser("run-mc", help="Monte Carlo trajectories with a deterministic reference"))
    mc.add_argument("--threads", type=int, default=1, help="worker processes (results do not depend on it)")
    mc.add_argument("--seed", type=int, help="master seed (overrides mc.seed)")
    mc.set_defaults(func=cmd_run_mc)
    common(sub.add_parser("steady", help="null-space steady state")).set_defaults(func=cmd_steady)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, MappingError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
