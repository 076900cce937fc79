"""Command-line interface: certify, simulate, sweep, and monitor.

Exit codes: 0 on success, 1 on configuration errors, 2 when a
certification is infeasible, 3 when a run violates its certificate.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import netsim, scenarios
from .errors import CertificationError, ConfigError, PetnetError
from .monitor import verdict

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INFEASIBLE = 2
EXIT_VIOLATION = 3


def _load_config(args) -> dict:
    if args.config:
        try:
            with open(args.config) as fh:
                return json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    if args.example == 1:
        return scenarios.example1_config(schedule_seed=args.seed, delay_seed=args.seed + 1)
    if args.example == 2:
        return scenarios.example2_config(schedule_seed=args.seed, delay_seed=args.seed + 1)
    raise ConfigError("either --config or --example is required")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _certification_payload(built) -> dict:
    channels = []
    for cert in built.certifications:
        k = cert.constants
        channels.append(
            {
                "period": cert.period,
                "feasible": cert.feasible,
                "margin": cert.margin,
                "grid_step": cert.grid_step,
                "gains": cert.gains.tolist(),
                "constants": {
                    "rho_bar": k.rho_bar,
                    "rho_hat": k.rho_hat,
                    "rho_tilde": k.rho_tilde,
                    "phi_floor": k.phi_floor,
                    "phi_ceil": k.phi_ceil,
                    "gamma_floor": k.gamma_floor,
                    "gamma_ceil": k.gamma_ceil,
                    "pi": k.pi,
                    "varpi_floor": k.varpi_floor,
                },
            }
        )
    return {"scenario": built.name, "channels": channels}


def _write_phi_csv(path: Path, built):
    with open(path, "w") as fh:
        fh.write("channel,level,tau,phi\n")
        for i, cert in enumerate(built.certifications):
            for l, traj in enumerate(cert.trajectories):
                for k, value in enumerate(traj.values):
                    fh.write(
                        f"{i},{l},{format(k * traj.step, '.15g')},{format(value, '.15g')}\n"
                    )


def cmd_certify(args) -> int:
    out = _out_dir(args)
    if args.preset == "table2":
        rows = []
        feasible_all = True
        for eps_check in scenarios.TABLE2_EPS_CHECK:
            for madns in scenarios.TABLE2_MADNS:
                cfg = scenarios.example1_config(eps_check=eps_check, madns=madns, horizon=0.0)
                built = scenarios.build_from_config(cfg)
                cert = built.certifications[0]
                rows.append(
                    {
                        "eps_check": eps_check,
                        "madns": madns,
                        "period": cert.period,
                        "margin": cert.margin,
                        "grid_step": cert.grid_step,
                    }
                )
                feasible_all = feasible_all and cert.feasible
        _write_json(out / "table2.json", {"rows": rows})
        with open(out / "table2.csv", "w") as fh:
            fh.write("eps_check,madns,period,margin,grid_step\n")
            for r in rows:
                fh.write(
                    f"{r['eps_check']},{r['madns']},{format(r['period'], '.15g')},"
                    f"{format(r['margin'], '.15g')},{format(r['grid_step'], '.15g')}\n"
                )
        print(f"wrote {out / 'table2.json'} and {out / 'table2.csv'}")
        return EXIT_OK if feasible_all else EXIT_INFEASIBLE
    config = _load_config(args)
    built = scenarios.build_from_config(config)
    payload = _certification_payload(built)
    _write_json(out / "certify.json", payload)
    _write_phi_csv(out / "phi_trajectories.csv", built)
    print(f"wrote {out / 'certify.json'} and {out / 'phi_trajectories.csv'}")
    return EXIT_OK if all(c["feasible"] for c in payload["channels"]) else EXIT_INFEASIBLE


def cmd_simulate(args) -> int:
    out = _out_dir(args)
    config = _load_config(args)
    built = scenarios.build_from_config(config)
    try:
        trace, metrics = netsim.run(built)
    except CertificationError as exc:
        print(f"runtime certificate violation: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    trace.to_csv(out / "trace.csv")
    trace.events_csv(out / "events.csv")
    _write_json(out / "metrics.json", metrics.to_dict())
    print(f"wrote {out / 'trace.csv'}, {out / 'events.csv'}, {out / 'metrics.json'}")
    if trace.violations:
        print(f"{len(trace.violations)} recorded certificate violations", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_sweep(args) -> int:
    out = _out_dir(args)
    if args.preset == "table3":
        base = scenarios.example1_config(horizon=4.0, record_flow=False)
        grid = [
            {"certificates": {"params": {"eps_check": v}}}
            for v in scenarios.TABLE3_EPS_CHECK
        ]
        result = netsim.sweep(
            base,
            grid,
            seeds_per_cell=args.seeds_per_cell,
            jobs=args.jobs,
            master_seed=args.seed,
            x0_box=[[-10.0, -10.0], [10.0, 10.0]],
        )
    else:
        base = _load_config(args)
        grid = [{}]
        result = netsim.sweep(
            base,
            grid,
            seeds_per_cell=args.seeds_per_cell,
            jobs=args.jobs,
            master_seed=args.seed,
        )
    result.to_csv(out / "sweep.csv")
    print(f"wrote {out / 'sweep.csv'}")
    for cell in result.cells:
        label = ",".join(f"{k}={v}" for k, v in cell.overrides.items()) or "base"
        print(f"  {label}: mean AIET {np.round(cell.aiet_mean, 6).tolist()} "
              f"({cell.replicates_ok} ok, {len(cell.errors)} failed)")
    return EXIT_OK


def cmd_monitor(args) -> int:
    out = _out_dir(args)
    config = _load_config(args)
    built = scenarios.build_from_config(config)
    trace = netsim.Trace.from_csv(args.trace)
    disturbed = built.disturbance_active
    ceiling = config.get("output", {}).get("monitor_ceiling")
    result = verdict(trace, built.monitor, disturbed=disturbed, ceiling=ceiling)
    _write_json(out / "monitor.json", result)
    print(f"wrote {out / 'monitor.json'}")
    if result.get("vacuous"):
        print(f"warning: {result['warning']}", file=sys.stderr)
    return EXIT_OK if result["passed"] else EXIT_VIOLATION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="petnet",
        description="Event-triggered networked control: certify, simulate, sweep, monitor.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, help="scenario config JSON path")
        p.add_argument("--example", type=int, choices=(1, 2), help="built-in scenario")
        p.add_argument("--seed", type=int, default=0, help="master seed")
        p.add_argument("--out", type=str, default="out", help="output directory")

    p = sub.add_parser("certify", help="compute/validate sampling-period bounds")
    common(p)
    p.add_argument("--preset", choices=("table2",), help="built-in certification grid")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("simulate", help="run one closed-loop scenario")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="run a seeded grid of scenarios")
    common(p)
    p.add_argument("--preset", choices=("table3",), help="built-in sweep grid")
    p.add_argument("--seeds-per-cell", type=int, default=50)
    p.add_argument("--jobs", type=int, default=1, help="parallel workers")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("monitor", help="check a trace against its certificate")
    common(p)
    p.add_argument("--trace", type=str, required=True, help="trace CSV to check")
    p.set_defaults(func=cmd_monitor)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CertificationError as exc:
        print(f"certification failed: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except PetnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
