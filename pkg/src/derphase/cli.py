"""Command-line entry point: ``derphase <command> [options]``.

Every command writes ``run_manifest.json`` into ``--out-dir`` with the argument
vector it ran with; ``derphase replay --manifest <file>`` reruns it.
Exit status: 0 on success, 2 on invalid input, 3 on a numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from derphase import __version__
from derphase.costs import DEFAULT_PRICE_EUR_KWH, Tariff
from derphase.curtail import VoltageLimits
from derphase.errors import NumericFailure, ParseError, ValidationError
from derphase.netmodel import (
    DEFAULT_DT_HOURS,
    PhaseLoadSeries,
    current_assignment,
    load_ders,
    load_network,
    load_series,
    save_ders,
    save_network,
    save_series,
)
from derphase.optim import GaConfig
from derphase.pflow import SolverOptions
from derphase.scenario import (
    SCENARIO_GA,
    ScenarioConfig,
    SyntheticInputs,
    perturb_ders,
    perturb_series,
    run_scenario,
)
from derphase.selection import (
    DEFAULT_SWITCH_COST_EUR,
    HorizonSimulator,
    decide,
    global_select,
    individual_select,
)

logger = logging.getLogger("derphase")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
PATH_OPTIONS = ("network", "loads", "ders", "pv_series")
MANIFEST = "run_manifest.json"


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out-dir", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dt-hours", type=float, default=DEFAULT_DT_HOURS)
    p.add_argument("--horizon", type=int, default=None, help="use only the first N steps")
    p.add_argument("-v", "--verbose", action="store_true")


def _economics(p: argparse.ArgumentParser) -> None:
    p.add_argument("--price-eur-kwh", type=float, default=DEFAULT_PRICE_EUR_KWH)
    p.add_argument("--switch-cost-eur", type=float, default=DEFAULT_SWITCH_COST_EUR)
    p.add_argument("--ov-pct", type=float, default=5.0)
    p.add_argument("--uv-pct", type=float, default=10.0)


def _ga(p: argparse.ArgumentParser, pop: int, gens: int) -> None:
    p.add_argument("--ga-pop", type=int, default=pop)
    p.add_argument("--ga-gens", type=int, default=gens)
    p.add_argument("--ga-stall", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="derphase", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic feeder, its loads and a PV profile")
    _common(p)
    p.add_argument("--n-customers", type=int, default=128)
    p.add_argument("--days", type=int, default=30)
    p.add_argument("--start-day", type=int, default=152)
    p.add_argument("--pv-seed", type=int, default=1)

    p = sub.add_parser("simulate", help="cost of the DER units on their current phases")
    _common(p)
    _economics(p)
    p.add_argument("--network", required=True, type=Path)
    p.add_argument("--loads", required=True, type=Path)
    p.add_argument("--ders", type=Path, help="unit,node,phase,p_max_w")
    p.add_argument("--pv-series", type=Path, help="t,unit,p_w production of the units")

    p = sub.add_parser("select", help="decide the phase of one new unit")
    _common(p)
    _economics(p)
    _ga(p, SCENARIO_GA.population, SCENARIO_GA.generations)
    p.add_argument("--network", required=True, type=Path)
    p.add_argument("--loads", required=True, type=Path)
    p.add_argument("--ders", required=True, type=Path)
    p.add_argument("--pv-series", required=True, type=Path)
    p.add_argument("--new-unit", default=None, help="id of the new unit (default: last listed)")

    p = sub.add_parser("scenario", help="run the sequential installation experiment")
    _common(p)
    _economics(p)
    _ga(p, SCENARIO_GA.population, SCENARIO_GA.generations)
    p.add_argument("--network", type=Path, help="with --loads and --pv-series; otherwise a feeder is generated")
    p.add_argument("--loads", type=Path)
    p.add_argument("--pv-series", type=Path, help="t,p_pu output of one unit per unit of capacity")
    p.add_argument("--n-customers", type=int, default=128)
    p.add_argument("--feeder-seed", type=int, default=42)
    p.add_argument("--days", type=int, default=30)
    p.add_argument("--start-day", type=int, default=152)
    p.add_argument("--pv-seed", type=int, default=1)
    p.add_argument("--initial-fraction", type=float, default=0.35)
    p.add_argument("--initial-count", type=int, default=45)
    p.add_argument("--additions", type=int, default=5)
    p.add_argument("--unit-p-max-w", type=float, default=13 * 290.0)
    p.add_argument("--load-sigma", type=float, default=0.30)
    p.add_argument("--pv-sigma", type=float, default=0.05)
    p.add_argument("--no-noise", action="store_true")

    p = sub.add_parser("perturb", help="multiply loads and/or production by N(1, sigma) noise")
    _common(p)
    p.add_argument("--network", required=True, type=Path)
    p.add_argument("--loads", type=Path)
    p.add_argument("--ders", type=Path)
    p.add_argument("--pv-series", type=Path)
    p.add_argument("--load-sigma", type=float, default=0.30)
    p.add_argument("--pv-sigma", type=float, default=0.05)

    p = sub.add_parser("replay", help="rerun the command recorded in a manifest")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out-dir", type=Path, default=None, help="default: the recorded one")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _absolute_argv(argv: list[str]) -> list[str]:
    """Rewrite path arguments as absolute paths so a manifest replays from anywhere."""
    out = list(argv)
    flags = {"--" + name.replace("_", "-") for name in PATH_OPTIONS} | {"--out-dir"}
    for i, tok in enumerate(out[:-1]):
        if tok in flags:
            out[i + 1] = str(Path(out[i + 1]).resolve())
    return out


def _inputs(args: argparse.Namespace) -> dict:
    found = {}
    for name in PATH_OPTIONS:
        path = getattr(args, name, None)
        if path is not None:
            found[name] = {"path": str(Path(path).resolve()), "sha256": _sha256(path)}
    return found


def _write_manifest(out: Path, args: argparse.Namespace, argv: list[str], **extra) -> None:
    doc = {"command": args.command, "version": __version__, "argv": argv, "status": "ok",
           "inputs": _inputs(args), **extra}
    with open(out / MANIFEST, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _tariff_limits(args, v_nominal: float) -> tuple[Tariff, VoltageLimits]:
    return (Tariff(args.price_eur_kwh, args.dt_hours),
            VoltageLimits.from_nominal(v_nominal, args.ov_pct, args.uv_pct))


def _check_dt(args, dt_hours: float) -> None:
    if dt_hours != args.dt_hours:
        raise ValidationError(f"series step is {dt_hours} h but --dt-hours is {args.dt_hours}")


def _truncate_units(units, horizon):
    return [u.with_production(u.production[:horizon]) for u in units]


def _read_network_inputs(args):
    graph = load_network(args.network)
    loads = load_series(args.loads, graph)
    _check_dt(args, loads.dt_hours)
    units = []
    if getattr(args, "ders", None) is not None:
        if args.pv_series is None:
            raise ValidationError("--ders needs --pv-series with the unit production")
        units = load_ders(args.ders, args.pv_series, graph)
        for u in units:
            if u.production.shape[0] != loads.horizon:
                raise ValidationError(f"unit {u.id} has {u.production.shape[0]} steps, loads have {loads.horizon}")
    if args.horizon is not None:
        if not 1 <= args.horizon <= loads.horizon:
            raise ValidationError(f"--horizon must lie in [1, {loads.horizon}]")
        loads = PhaseLoadSeries(args.horizon, loads.dt_hours, loads.entries, loads.s[:, : args.horizon])
        units = _truncate_units(units, args.horizon)
    return graph, loads, units


def save_profile(pv: np.ndarray, path: Path, dt_hours: float) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"#horizon={pv.size},dt_hours={dt_hours!r}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "p_pu"])
        for t, x in enumerate(pv):
            w.writerow([t, repr(float(x))])


def load_profile(path: Path) -> tuple[np.ndarray, float]:
    with open(path) as fh:
        first = fh.readline().strip()
    try:
        fields = dict(item.split("=", 1) for item in first.lstrip("#").split(","))
        horizon, dt_hours = int(fields["horizon"]), float(fields["dt_hours"])
        df = pd.read_csv(path, skiprows=1, float_precision="round_trip")
    except (KeyError, ValueError, pd.errors.ParserError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if list(df.columns) != ["t", "p_pu"]:
        raise ParseError(f"{path}: expected header t,p_pu")
    pv = np.zeros(horizon)
    t = df["t"].to_numpy()
    if t.size and (t.min() < 0 or t.max() >= horizon):
        raise ValidationError(f"{path}: timestep outside horizon {horizon}")
    pv[t] = df["p_pu"].to_numpy(dtype=float)
    return pv, dt_hours


def _ga_config(args) -> GaConfig:
    stall = args.ga_stall if args.ga_stall is not None else SCENARIO_GA.stall_generations
    return GaConfig(population=args.ga_pop, generations=args.ga_gens, stall_generations=stall, seed=args.seed)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args, argv) -> None:
    recipe = SyntheticInputs(args.n_customers, args.seed, args.start_day, args.days, args.dt_hours, args.pv_seed)
    graph, loads, pv = recipe.build()
    if args.horizon is not None:
        raise ValidationError("gen takes --days rather than --horizon")
    save_network(graph, args.out_dir / "network.json")
    save_series(loads, args.out_dir / "loads.csv")
    save_profile(pv, args.out_dir / "pv_profile.csv", args.dt_hours)
    _write_manifest(args.out_dir, args, argv, recipe=recipe.to_dict())


def cmd_simulate(args, argv) -> None:
    graph, loads, units = _read_network_inputs(args)
    tariff, limits = _tariff_limits(args, graph.v_nominal)
    res = HorizonSimulator(graph, loads, units, limits, tariff).evaluate(current_assignment(units))
    res.breakdown.to_csv(args.out_dir / "costs.csv")
    summary = {
        "total_eur": res.breakdown.total,
        "loss_eur": res.breakdown.loss_total,
        "curtail_eur": res.breakdown.curtail_total,
        "curtailed_steps": int(res.curtailed.sum()),
        "undervoltage_steps": int((res.steps.vmin < limits.v_under).sum()),
        "nonconverged_steps": int((~res.steps.converged).sum()),
    }
    _write_manifest(args.out_dir, args, argv, summary=summary)


def cmd_select(args, argv) -> None:
    graph, loads, units = _read_network_inputs(args)
    if not units:
        raise ValidationError("--ders lists no units")
    ids = [u.id for u in units]
    new_id = args.new_unit or ids[-1]
    if new_id not in ids:
        raise ValidationError(f"new unit {new_id!r} not found in {args.ders}")
    new = units[ids.index(new_id)]
    existing = [u for u in units if u.id != new_id]
    tariff, limits = _tariff_limits(args, graph.v_nominal)
    opts = SolverOptions()
    sim = HorizonSimulator(graph, loads, existing + [new], limits, tariff, opts)
    is_res = individual_select(graph, loads, existing, new, limits, tariff, opts, simulator=sim)
    seeded = existing + [new.with_phase(is_res.phase)]
    go_res = global_select(graph, loads, seeded, limits, tariff, opts, _ga_config(args), simulator=sim)
    outcome = decide(is_res, go_res, current_assignment(existing), args.switch_cost_eur)
    (args.out_dir / "decision.json").write_text(outcome.report.to_json())
    with open(args.out_dir / "final_assignment.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit", "phase"])
        for uid in ids:
            w.writerow([uid, outcome.final_assignment[uid]])
    if outcome.cost_series is not None:
        outcome.cost_series.to_csv(args.out_dir / "costs.csv")
    _write_manifest(args.out_dir, args, argv)


def cmd_scenario(args, argv) -> None:
    given = [args.network, args.loads, args.pv_series]
    if any(given) and not all(given):
        raise ValidationError("--network, --loads and --pv-series go together")
    if all(given):
        graph = load_network(args.network)
        loads = load_series(args.loads, graph)
        pv, pv_dt = load_profile(args.pv_series)
        _check_dt(args, loads.dt_hours)
        _check_dt(args, pv_dt)
        inputs = {"files": _inputs(args)}
    else:
        recipe = SyntheticInputs(args.n_customers, args.feeder_seed, args.start_day, args.days,
                                 args.dt_hours, args.pv_seed)
        graph, loads, pv = recipe.build()
        inputs = {"synthetic": recipe.to_dict()}
    cfg = ScenarioConfig(
        initial_der_fraction=args.initial_fraction,
        initial_der_count=None if args.initial_count < 0 else args.initial_count,
        n_additions=args.additions,
        unit_p_max=args.unit_p_max_w,
        horizon=args.horizon,
        seed=args.seed,
        noise_load_sigma=args.load_sigma,
        noise_pv_sigma=args.pv_sigma,
        with_noise=not args.no_noise,
        price_eur_kwh=args.price_eur_kwh,
        over_pct=args.ov_pct,
        under_pct=args.uv_pct,
        switch_unit_cost=args.switch_cost_eur,
        ga_config=_ga_config(args),
    )
    inputs["argv"] = argv
    run_scenario(cfg, graph, loads, pv, out_dir=args.out_dir, inputs=inputs)
    # the scenario writes its own manifest; add the replay fields at top level
    path = args.out_dir / MANIFEST
    doc = json.loads(path.read_text())
    doc["argv"] = argv
    path.write_text(json.dumps(doc, indent=2) + "\n")


def cmd_perturb(args, argv) -> None:
    graph = load_network(args.network)
    if args.loads is None and args.ders is None:
        raise ValidationError("perturb needs --loads and/or --ders with --pv-series")
    if args.loads is not None:
        loads = load_series(args.loads, graph)
        save_series(perturb_series(loads, args.load_sigma, [args.seed, 1]), args.out_dir / "loads.csv")
    if args.ders is not None:
        if args.pv_series is None:
            raise ValidationError("--ders needs --pv-series")
        units = load_ders(args.ders, args.pv_series, graph)
        save_ders(perturb_ders(units, args.pv_sigma, [args.seed, 2]), args.out_dir / "ders.csv",
                  args.out_dir / "pv_series.csv", args.dt_hours)
    _write_manifest(args.out_dir, args, argv)


COMMANDS = {
    "gen": cmd_gen,
    "simulate": cmd_simulate,
    "select": cmd_select,
    "scenario": cmd_scenario,
    "perturb": cmd_perturb,
}


def _replay_argv(args) -> list[str]:
    try:
        doc = json.loads(Path(args.manifest).read_text())
        argv = list(doc["argv"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"{args.manifest}: not a run manifest ({exc})") from exc
    if args.out_dir is not None:
        i = argv.index("--out-dir")
        argv[i + 1] = str(args.out_dir)
    return argv


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "replay":
            argv = _replay_argv(args)
            args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.out_dir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, _absolute_argv(argv))
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
