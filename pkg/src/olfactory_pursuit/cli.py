"""Command-line front end.

Subcommands::

    mdp              precompute value-iteration tables for every tau_p in the sweep
    calibrate        estimate the 9-state lattice model of the continuous target
    run              sweep (tau_p, w) with the hybrid policy -> sweep.csv, best.csv, ccdf.csv
    random-baseline  sweep (tau_p, alpha) with the persistent random walk
    plotdata         normalize a sweep.csv into a tidy table of search-time ratios

Exit codes: 0 success, 1 invalid configuration or arguments, 2 failure while running.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, artifact_version, config_hash, load_config, to_ini
from .episode import PolicySpec, build_context, run_batch
from .policy import cached_value_iteration, export_qtable_csv, qtable_filename
from .target import (
    ContinuousRTParams,
    DiscreteRTParams,
    calibrated_transition,
    discrete_transition_matrix,
    is_d4_invariant,
)

log = logging.getLogger("olfactory_pursuit")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
PERSISTENCE_WARN = 5.0  # continuous run time (in agent steps) above which the lattice model is lossy

SWEEP_FIELDS = ["environment", "tau_p", "speed_ratio", "policy", "w", "alpha", "mean_T", "stderr",
                "capture_fraction", "n_truncated", "n_collapses", "n"]


class RunError(RuntimeError):
    pass


def _header(cfg: ExperimentConfig) -> str:
    return f"# artifact=olfactory_pursuit version={artifact_version()} config_hash={config_hash(cfg)}\n"


def _write_csv(path: Path, cfg: ExperimentConfig, fieldnames, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(_header(cfg))
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _transition(cfg: ExperimentConfig, tau_p: float, build: bool = True):
    g = cfg.grid
    if cfg.environment == "discrete":
        return discrete_transition_matrix(DiscreteRTParams.from_persistence(tau_p))
    p = ContinuousRTParams(cfg.speed, tau_p, cfg.emission_dt)
    if p.run_time > PERSISTENCE_WARN:
        log.warning("run time %g exceeds %g steps: the one-step lattice model underestimates "
                    "the persistence of the continuous target", p.run_time, PERSISTENCE_WARN)
    if not build:
        name = (f"transition_Tp{p.run_time!r}_U{p.speed!r}_L{g.L}_dx{g.dx!r}"
                f"_n{cfg.calibration_steps}_s{cfg.calibration_seed}.txt")
        if not (Path(cfg.cache_dir) / name).exists():
            raise RunError(f"missing transition matrix cache {name}; run 'calibrate' first")
    return calibrated_transition(p, g, cfg.calibration_steps, cfg.calibration_seed, cfg.cache_dir)


def cmd_mdp(cfg: ExperimentConfig, args) -> int:
    for tp in cfg.tau_p:
        P = _transition(cfg, tp)
        Q, hit = cached_value_iteration(P, cfg.grid, cfg.gamma, cfg.cache_dir)
        path = Path(cfg.cache_dir) / qtable_filename(cfg.grid, P, cfg.gamma)
        print(f"tau_p={tp:g}: {'cache hit' if hit else 'computed'} {path} "
              f"(iterations={Q.iterations}, residual={Q.residual:.2e})")
        if args.export_csv:
            export_qtable_csv(path.with_suffix(".csv"), Q, P.alphabet)
    return EXIT_OK


def cmd_calibrate(cfg: ExperimentConfig, args) -> int:
    if cfg.environment != "continuous":
        raise ConfigError("calibrate needs environment = continuous")
    for tp in cfg.tau_p:
        P = _transition(cfg, tp)
        if not is_d4_invariant(P, atol=1e-15):
            raise RunError("calibrated matrix is not D4-invariant")
        print(f"T_p={tp:g}: K={P.size} digest={P.digest} in {cfg.cache_dir}")
    return EXIT_OK


def _points(cfg: ExperimentConfig, policies):
    ratios = cfg.speed_ratio if cfg.environment == "continuous" else (None,)
    for tp in cfg.tau_p:
        for r in ratios:
            yield tp, r, policies


def _sweep(cfg: ExperimentConfig, args, policies, prefix: str) -> int:
    out = Path(cfg.out)
    rows, ccdf_rows, summary = [], [], []
    for tp, ratio, pols in _points(cfg, policies):
        base = cfg.episode_config(tp, pols[0], speed_ratio=ratio)
        if pols[0].uses_odor and args.require_cache:
            P = _transition(cfg, tp, build=False)
            if not (Path(cfg.cache_dir) / qtable_filename(cfg.grid, P, cfg.gamma)).exists():
                raise RunError(f"missing Q-table cache for tau_p={tp:g}; run 'mdp' first")
        ctx = build_context(base, with_q=any(p.needs_q for p in pols))
        for pol in pols:
            ec = cfg.episode_config(tp, pol, speed_ratio=ratio)
            stats, records = run_batch(ec, cfg.n_episodes, cfg.seed, cfg.jobs, ctx=ctx)
            row = {"environment": cfg.environment, "tau_p": tp,
                   "speed_ratio": "" if ratio is None else ratio, "policy": pol.kind,
                   "w": pol.w if pol.uses_odor else "", "alpha": "" if pol.uses_odor else pol.alpha,
                   **{k: v for k, v in stats.as_dict().items() if k in SWEEP_FIELDS}}
            rows.append(row)
            summary.append({**row, "quasi_static_ratio": ec.quasi_static_ratio(),
                            "max_steps": stats.max_steps})
            knob = f"w={pol.w:g}" if pol.uses_odor else f"alpha={pol.alpha:g}"
            where = f"tau_p={tp:g}" + ("" if ratio is None else f" U*tau_d/lambda={ratio:g}")
            print(f"{where} {pol.kind} {knob}: <T>={stats.mean_T:.2f} +- {stats.stderr:.2f}",
                  flush=True)
            for t, p in zip(stats.ccdf_T, stats.ccdf_p):
                ccdf_rows.append({"tau_p": tp, "speed_ratio": row["speed_ratio"], "policy": pol.kind,
                                  "w": row["w"], "alpha": row["alpha"], "T": int(t), "ccdf": p})
            if args.records:
                name = f"{prefix}_episodes_tp{tp:g}_{pol.kind}_w{pol.w:g}_a{pol.alpha:g}.csv"
                _write_csv(out / name, cfg, ["episode_id", "seed", "outcome", "T", "n_detections",
                                             "final_distance", "n_collapses"],
                           [r.__dict__ for r in records])
    _write_csv(out / f"{prefix}.csv", cfg, SWEEP_FIELDS, rows)
    _write_csv(out / f"{prefix}_ccdf.csv", cfg,
               ["tau_p", "speed_ratio", "policy", "w", "alpha", "T", "ccdf"], ccdf_rows)
    _write_csv(out / f"{prefix}_best.csv", cfg, ["role"] + SWEEP_FIELDS, best_rows(rows))
    (out / f"{prefix}_summary.json").write_text(json.dumps(
        {"config_hash": config_hash(cfg), "version": artifact_version(), "config": to_ini(cfg),
         "points": summary}, indent=2))
    (out / "config.ini").write_text(to_ini(cfg))
    return EXIT_OK


def best_rows(rows: list[dict]) -> list[dict]:
    """Per (tau_p, speed_ratio): the lowest-<T> row, plus the w=0 row for olfactory sweeps."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["tau_p"], r["speed_ratio"]), []).append(r)
    out = []
    for key in sorted(groups, key=lambda k: (float(k[0]), str(k[1]))):
        g = groups[key]
        out.append({"role": "best", **min(g, key=lambda r: float(r["mean_T"]))})
        for r in g:
            if r["policy"] != "random" and float(r["w"]) == 0.0:
                out.append({"role": "infotaxis", **r})
    return out


def cmd_run(cfg: ExperimentConfig, args) -> int:
    return _sweep(cfg, args, [PolicySpec("hybrid", w) for w in cfg.w], "sweep")


def cmd_random(cfg: ExperimentConfig, args) -> int:
    return _sweep(cfg, args, [PolicySpec("random", alpha=a) for a in cfg.alpha], "random")


class PlotDataError(ValueError):
    pass


def read_sweep(path) -> list[dict]:
    """Parse a sweep CSV, skipping ``#`` comments.  Malformed rows raise with their line number."""
    rows, header = [], None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cells = next(csv.reader([line]))
        if header is None:
            header = cells
            missing = {"tau_p", "w", "mean_T", "stderr", "policy"} - set(header)
            if missing:
                raise PlotDataError(f"line {lineno}: header lacks {sorted(missing)}")
            continue
        if len(cells) != len(header):
            raise PlotDataError(f"line {lineno}: expected {len(header)} fields, got {len(cells)}")
        row = dict(zip(header, cells))
        try:
            row["tau_p"] = float(row["tau_p"])
            row["mean_T"] = float(row["mean_T"])
            row["stderr"] = float(row["stderr"])
            row["w"] = float(row["w"]) if row["w"] != "" else None
        except ValueError as exc:
            raise PlotDataError(f"line {lineno}: {exc}") from exc
        if not np.isfinite(row["mean_T"]) or row["mean_T"] <= 0:
            raise PlotDataError(f"line {lineno}: mean_T must be positive")
        rows.append(row)
    if header is None:
        raise PlotDataError("no header row")
    return rows


def plot_table(rows: list[dict]) -> list[dict]:
    """Add ``ratio_to_best`` and ``ratio_to_infotaxis`` per (tau_p, speed_ratio) group."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["tau_p"], r.get("speed_ratio", "")), []).append(r)
    out = []
    for key in sorted(groups, key=lambda k: (k[0], str(k[1]))):
        g = groups[key]
        info = [r for r in g if r["policy"] != "random" and r["w"] == 0.0]
        if not info:
            raise PlotDataError(f"no Infotaxis baseline (w=0 row) for tau_p={key[0]:g}")
        best = min(r["mean_T"] for r in g)
        t_info = info[0]["mean_T"]
        for r in g:
            out.append({"tau_p": r["tau_p"], "speed_ratio": r.get("speed_ratio", ""),
                        "policy": r["policy"], "w": "" if r["w"] is None else r["w"],
                        "mean_T": r["mean_T"], "stderr": r["stderr"],
                        "ratio_to_best": r["mean_T"] / best,
                        "ratio_to_infotaxis": r["mean_T"] / t_info})
    return out


def cmd_plotdata(args) -> int:
    rows = plot_table(read_sweep(args.sweep))
    out = Path(args.output) if args.output else Path(args.sweep).with_name("plotdata.csv")
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="olfactory-pursuit", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--jobs", type=int, help="worker processes")
        p.add_argument("--out", help="output directory")
        p.add_argument("--episodes", type=int, help="episodes per sweep point")
        p.add_argument("--cache-dir", help="directory for Q-table and transition caches")
        return p

    common(sub.add_parser("mdp", help="precompute Q tables")).add_argument(
        "--export-csv", action="store_true", help="also write each table as CSV")
    common(sub.add_parser("calibrate", help="estimate the lattice model of the continuous target"))
    for name in ("run", "random-baseline"):
        p = common(sub.add_parser(name))
        p.add_argument("--records", action="store_true", help="write per-episode CSVs")
        p.add_argument("--require-cache", action="store_true",
                       help="fail instead of building missing caches")
    p = sub.add_parser("plotdata", help="tidy ratios from a sweep CSV")
    p.add_argument("sweep")
    p.add_argument("-o", "--output")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "plotdata":
            return cmd_plotdata(args)
        cfg = load_config(args.config, seed=args.seed, jobs=args.jobs, out=args.out,
                          n_episodes=args.episodes, cache_dir=args.cache_dir)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PlotDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    commands = {"mdp": cmd_mdp, "calibrate": cmd_calibrate, "run": cmd_run,
                "random-baseline": cmd_random}
    try:
        return commands[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
