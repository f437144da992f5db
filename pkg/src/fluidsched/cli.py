"""Command-line entry point.

Verbs: ``solve``, ``schedule``, ``simulate``, ``compare`` and ``gap-study``.
Every command writes its artifacts plus a ``manifest.json`` recording the
resolved configuration, input digests and code version, and is a pure
function of its inputs and seed.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 data error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .admm import SolverError
from .config import Config, ConfigError, load_config, parse_config
from .data import CompareSettings, DataError, build_empirical, compare_policies, ingest
from .distributions import service_for_rate
from .fluid import Grid, zu_optimal
from .qp import assemble_qp, recover_control, solve
from .scheduling import Schedule, extract_schedule
from .simulation import fluid_scaled_gap, simulate_many

log = logging.getLogger("fluidsched")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_DATA = 0, 2, 3, 4


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _manifest(out: Path, command: str, cfg: Config | None, inputs: dict, extra=None) -> None:
    doc = {"command": command, "version": __version__,
           "config": cfg.model_dump(mode="json") if cfg is not None else None,
           "inputs": {k: {"path": str(v), "sha256": _digest(v)} for k, v in inputs.items()}}
    if extra:
        doc.update(extra)
    _write_json(out / "manifest.json", doc)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> tuple[Config, Path]:
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config)
    updates = {}
    if getattr(args, "resolution", None) is not None:
        updates["grid"] = cfg.grid.model_copy(update={"K": args.resolution})
    sim = {}
    if getattr(args, "seed", None) is not None:
        sim["seed"] = args.seed
    if getattr(args, "replications", None) is not None:
        sim["replications"] = args.replications
    if sim:
        updates["simulate"] = cfg.simulate.model_copy(update=sim)
        updates["compare"] = cfg.compare.model_copy(update=sim)
    if updates:
        # re-validate so command-line overrides obey the same bounds
        data = cfg.model_dump(mode="json")
        for k, v in updates.items():
            data[k] = v.model_dump(mode="json")
        cfg = parse_config(data)
    return cfg, Path(args.config).resolve().parent


# ---------------------------------------------------------------------------
# control files
# ---------------------------------------------------------------------------

def write_control(path, grid: Grid, a) -> None:
    t = grid.nodes
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "t_k", "t_next", "a_k"])
        for k in range(grid.K):
            w.writerow([k, repr(float(t[k])), repr(float(t[k + 1])), repr(float(a[k]))])


def read_control(path) -> tuple[Grid, np.ndarray]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read control file {path}: {exc}") from exc
    try:
        a = np.array([float(r["a_k"]) for r in rows])
        horizon = float(rows[-1]["t_next"])
    except (KeyError, ValueError, IndexError) as exc:
        raise DataError(f"{path}: not a control file ({exc})") from exc
    return Grid(a.size, horizon), a


def write_profile(path, grid: Grid, a) -> None:
    A = grid.cumulative(a)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "t_k", "A"])
        for k, (t, v) in enumerate(zip(grid.nodes, A)):
            w.writerow([k, repr(float(t)), repr(float(v))])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _solve_one(cfg: Config, base: Path, out: Path, r: float | None):
    problem = cfg.fluid_problem(base, r)
    grid = Grid(cfg.grid.K, problem.horizon)
    s = cfg.solver
    sol = solve(assemble_qp(problem, grid), s.tol_primal, s.tol_dual, s.max_iter)
    rec = recover_control(sol)
    out.mkdir(parents=True, exist_ok=True)
    write_control(out / "control.csv", grid, rec.a)
    write_profile(out / "profile.csv", grid, rec.a)
    result = {"r": problem.costs.r, "K": grid.K, "value": sol.value,
              "recovered_value": rec.value, "drift": rec.drift,
              "primal_residual": sol.primal_residual, "dual_residual": sol.dual_residual,
              "iterations": sol.iterations, "polished": sol.polished,
              "total_mass": float(rec.a.sum()), "upper_bound": zu_optimal(problem).value}
    _write_json(out / "solution.json", result)
    return result


def cmd_solve(args) -> int:
    cfg, base = _load(args)
    out = _out_dir(args)
    if cfg.problem.rewards:
        results = [_solve_one(cfg, base, out / f"r_{r:g}", r) for r in cfg.problem.rewards]
        _write_json(out / "sweep.json", results)
    else:
        _solve_one(cfg, base, out, None)
    _manifest(out, "solve", cfg, {"config": args.config})
    return EXIT_OK


def cmd_schedule(args) -> int:
    grid, a = read_control(args.control)
    if np.any(a < 0):
        raise DataError("control file has negative mass")
    scale = args.scale
    sched = extract_schedule(a, grid, scale)
    out = _out_dir(args)
    sched.write(out / "schedule.txt")
    _manifest(out, "schedule", None, {"control": args.control}, {"scale": scale, "m": sched.m})
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg, base = _load(args)
    try:
        sched = Schedule.read(args.schedule)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read schedule {args.schedule}: {exc}") from exc
    problem = cfg.fluid_problem(base)
    if not math.isclose(sched.horizon, problem.horizon):
        raise DataError(f"schedule horizon {sched.horizon} differs from the configured "
                        f"{problem.horizon}")
    s = cfg.simulate
    if s.scale != 1.0:
        # the n-th system: capacity and idle/overtime rates grow with the scale
        problem = problem.scaled(s.scale)
    svc = service_for_rate(s.service, problem.mu, s.log_sd)
    report = simulate_many(sched, problem.unpunctuality, svc, problem.costs, s.replications,
                           s.seed, s.level)
    out = _out_dir(args)
    report.write_csv(out / "replications.csv")
    _write_json(out / "summary.json", report.summary())
    _manifest(out, "simulate", cfg, {"config": args.config, "schedule": args.schedule})
    return EXIT_OK


def cmd_gap_study(args) -> int:
    cfg, base = _load(args)
    problem = cfg.fluid_problem(base)
    grid = Grid(cfg.grid.K, problem.horizon)
    s = cfg.solver
    sol = solve(assemble_qp(problem, grid), s.tol_primal, s.tol_dual, s.max_iter)
    rec = recover_control(sol)
    sim = cfg.simulate
    groups = np.random.SeedSequence(sim.seed).spawn(sim.seed_groups)
    rows = []
    for g, child in enumerate(groups):
        seeds = child.generate_state(len(sim.scales))
        for n, seed in zip(sim.scales, seeds):
            res = fluid_scaled_gap(problem, rec.a, grid, n, sim.replications, int(seed),
                                   reference=sol.value, service=sim.service, log_sd=sim.log_sd)
            rows.append((g, n, res.scaled_mean, res.reference, res.gap, res.normalized))
    out = _out_dir(args)
    with open(out / "gap.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "n", "scaled_mean", "reference", "gap", "gap_sqrt_n"])
        for row in rows:
            w.writerow([row[0], repr(float(row[1]))] + [repr(float(v)) for v in row[2:]])
    _write_json(out / "summary.json", gap_summary(rows, sim.scales, sim.seed_groups))
    _manifest(out, "gap-study", cfg, {"config": args.config})
    return EXIT_OK


def gap_summary(rows, scales, n_groups) -> dict:
    """Per-scale mean gaps, the decreasing-in-n vote and the sqrt(n) spread."""
    gaps = np.array([[r[4] for r in rows if r[0] == g] for g in range(n_groups)])
    decreasing = [bool(np.all(np.diff(row) < 0)) for row in gaps]
    mean_gap = gaps.mean(axis=0)
    norm = mean_gap * np.sqrt(np.asarray(scales, dtype=float))
    return {"scales": list(scales), "mean_gap": mean_gap.tolist(),
            "decreasing_votes": int(sum(decreasing)), "groups": n_groups,
            "majority_decreasing": sum(decreasing) * 2 > n_groups,
            "sqrt_n_ratio": float(norm.max() / norm.min()) if norm.min() > 0 else math.inf}


def cmd_compare(args) -> int:
    cfg, base = _load(args)
    c = cfg.compare
    report = ingest(args.data, strict=args.strict)
    data = build_empirical(report.records, c.clinic, c.doctor, c.min_patients_per_day,
                           c.bucket_edges)
    model = data.model if c.model == "empirical" else cfg.unpunctuality(base)
    settings = CompareSettings(tuple(c.c_i), c.overtime_ratio, c.r, c.c_w, c.service, c.log_sd,
                               c.replications, c.seed, c.K, c.reference_mu, tuple(c.policies),
                               c.level, c.family_size, cfg.solver.tol_primal)
    table = compare_policies(data.days, model, settings)
    out = _out_dir(args)
    table.to_csv(out / "table.csv")
    (out / "table.txt").write_text(table.to_text())
    table.write_replications(out / "replications.csv", data.days)
    _write_json(out / "ingest.json", {
        "records": len(report.records), "days": len(data.days),
        "skipped": [{"line": n, "reason": r} for n, r in report.skipped],
        "excluded_days": [{"day": list(k), "reason": r} for k, r in data.excluded]})
    _manifest(out, "compare", cfg, {"config": args.config, "data": args.data})
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fluidsched", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=False):
        p.add_argument("--out-dir", default=".", help="directory for artifacts")
        if seed:
            p.add_argument("--seed", type=int, help="override the configured seed")
            p.add_argument("--replications", type=int, help="override the replication count")

    p = sub.add_parser("solve", help="solve the discretized fluid problem")
    p.add_argument("--config", required=True)
    p.add_argument("--resolution", type=int, help="override grid K")
    common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("schedule", help="extract appointment times from a control file")
    p.add_argument("control")
    p.add_argument("--scale", type=float, default=1.0)
    common(p)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("simulate", help="simulate a schedule")
    p.add_argument("schedule")
    p.add_argument("--config", required=True)
    common(p, seed=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="paired policy comparison on appointment data")
    p.add_argument("data")
    p.add_argument("--config", required=True)
    p.add_argument("--strict", action="store_true", help="fail on any malformed row")
    common(p, seed=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gap-study", help="simulated gap to the fluid value over scales")
    p.add_argument("--config", required=True)
    p.add_argument("--resolution", type=int, help="override grid K")
    common(p, seed=True)
    p.set_defaults(func=cmd_gap_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SolverError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
