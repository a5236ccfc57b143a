"""Command-line front end.

Subcommands share ``--network``/``--demand``/``--delays`` for inputs and
write into ``--out``.  Every JSON output uses sorted keys and carries no
timestamps, so reruns with the same seed are byte-identical.

Exit codes: 0 success, 2 input error, 3 non-convergence, 4 budget
exceeded, 5 spillback.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from . import io
from .elimination import METHODS, RemovalReport, RemovalStep, SolverSettings
from .equilibrium import DEFAULT_TOL, result_from_dict, solve_network
from .errors import (BudgetExceeded, InsufficientData, NetworkError, NonConvergence,
                     SpillbackDetected, ConnectivityViolation, NoRouteForDemand)
from .mesosim import SimConfig
from .network import Network, remove_routes
from . import pipeline

log = logging.getLogger("braess_routes")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NONCONVERGENCE = 3
EXIT_BUDGET = 4
EXIT_SPILLBACK = 5


class InputError(Exception):
    pass


@dataclass(frozen=True)
class RunManifest:
    network: Path
    out: Path
    demand: Optional[Path] = None
    delays: Optional[Path] = None
    obs_dir: Optional[Path] = None
    synthetic: bool = False
    method: str = "greedy-route"
    max_set_size: int = 2
    budget: int = 10_000
    tol: float = DEFAULT_TOL
    seed: int = 0
    injection: str = "poisson"
    horizon: float = 3600.0
    scales: tuple = (0.5, 0.75, 1.0, 1.25)

    @classmethod
    def from_args(cls, args) -> RunManifest:
        fields = {k: getattr(args, k) for k in cls.__dataclass_fields__ if hasattr(args, k)}
        for key in ("network", "out", "demand", "delays", "obs_dir"):
            if fields.get(key) is not None:
                fields[key] = Path(fields[key])
        if "scales" in fields:
            fields["scales"] = tuple(fields["scales"])
        manifest = cls(**fields)
        manifest.check()
        return manifest

    def check(self) -> None:
        for key in ("network", "demand", "delays", "obs_dir"):
            path = getattr(self, key)
            if path is not None and not path.exists():
                raise InputError(f"--{key.replace('_', '-')}: {path} does not exist")
        if self.tol <= 0:
            raise InputError("--tol must be positive")
        if self.budget < 1:
            raise InputError("--budget must be at least 1")

    @property
    def settings(self) -> SolverSettings:
        return SolverSettings(tolerance=self.tol, budget=self.budget)

    @property
    def sim_config(self) -> SimConfig:
        return SimConfig(horizon=self.horizon, seed=self.seed, injection=self.injection)

    def load_network(self) -> Network:
        net = io.load_network(self.network)
        if self.demand is not None:
            net = io.apply_demand(net, io.load_demand(self.demand))
        if self.delays is not None:
            net = io.attach_delays(net, io.load_delays(self.delays))
        return net


def _print(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def cmd_calibrate(m: RunManifest) -> int:
    net = m.load_network()
    if m.obs_dir is not None:
        obs = io.load_observations(m.obs_dir, net)
    else:
        obs = {}
    if not obs and not m.synthetic:
        raise InputError("no observations found; pass --obs-dir with CSV files or --synthetic")
    if m.synthetic:
        generated = pipeline.synthesize_observations(net, seed=m.seed)
        generated.update(obs)
        obs = generated
        io.save_observations(m.out / "observations", obs)
    result = pipeline.calibrate(net, obs)
    io.write_json(m.out / "delays.json", io.delays_to_dict(result.delays, result.diagnostics))
    lines = [f"{'link':<16} {'status':<16} parameters"]
    for lid, d in sorted(result.diagnostics.items()):
        if d["kind"] == "physical":
            params = f"a={d['a']:.4g} b={d['b']:.4g} cap={d['cap']:.6g}"
            if "inherited_from" in d:
                params += f" (from {d['inherited_from']})"
        else:
            params = f"s={d['s']:.6g} d0={3600 * d['d0']:.4g}s alpha={d['alpha']:.4g}"
        lines.append(f"{lid:<16} {d['status']:<16} {params}")
    lines.append(f"inherited: {result.inherited} of {result.physical_links} physical links "
                 f"({100 * result.inherited_fraction:.1f}%; reference quality bar 2%)")
    _print("\n".join(lines))
    return EXIT_OK


def cmd_solve(m: RunManifest) -> int:
    net = m.load_network()
    eq = solve_network(net, m.tol).raise_for_convergence()
    io.write_json(m.out / "equilibrium.json", eq.to_dict())
    _print(f"Y = {eq.total_delay:.6g} veh*h/h, {3600 * eq.delay_per_vehicle:.2f} s per vehicle, "
           f"gap {eq.gap:.2e} after {eq.iterations} iterations")
    return EXIT_OK


def _write_detection(m: RunManifest, det: pipeline.Detection) -> None:
    io.write_json(m.out / "equilibrium_before.json", det.before.to_dict())
    io.write_json(m.out / "equilibrium_after.json", det.after.to_dict())
    io.write_json(m.out / "removal_report.json", det.report.to_dict())
    io.write_text(m.out / "removal_report.txt", det.report.summary() + "\n")


def _detect(m: RunManifest, net: Network) -> pipeline.Detection:
    return pipeline.detect(net, m.method, m.settings, m.max_set_size)


def cmd_detect(m: RunManifest) -> int:
    det = _detect(m, m.load_network())
    _write_detection(m, det)
    _print(det.report.summary())
    return EXIT_OK


def _load_detection(m: RunManifest, net: Network) -> pipeline.Detection:
    """Rebuild a detection from files written by ``detect``, or run it afresh."""
    paths = [m.out / n for n in ("equilibrium_before.json", "equilibrium_after.json",
                                 "removal_report.json")]
    if not all(p.exists() for p in paths):
        det = _detect(m, net)
        _write_detection(m, det)
        return det
    before, after = (result_from_dict(io.read_json(p)) for p in paths[:2])
    rep = io.read_json(paths[2])
    final = remove_routes(net, rep["removed_routes"]) if rep["removed_routes"] else net
    steps = [RemovalStep(s["kind"], tuple(s["removed"]), tuple(s["removed_routes"]),
                         s["value"], s["y_before"], s["y_after"]) for s in rep["steps"]]
    report = RemovalReport(rep["method"], net, final, rep["y_original"], rep["y_final"],
                           steps=steps, shortcut=rep["shortcut"],
                           evaluations=rep["evaluations"])
    return pipeline.Detection(net, before, after, report)


def _write_validation(m: RunManifest, rows, name: str) -> None:
    io.write_json(m.out / f"{name}.json", {"rows": [r.to_dict() for r in rows],
                                          "seed": m.seed, "injection": m.injection,
                                          "horizon": m.horizon})
    io.write_csv(m.out / f"{name}.csv", pipeline.TABLE_HEADER, pipeline.table_rows(rows))
    io.write_text(m.out / f"{name}.txt", pipeline.format_table(rows))


def cmd_validate(m: RunManifest) -> int:
    net = m.load_network()
    det = _load_detection(m, net)
    row = pipeline.validate(det, m.sim_config)
    _write_validation(m, [row], "validation")
    _print(pipeline.format_table([row]))
    if row.spillback:
        log.error("spillback on link %s; lower the demand", row.spillback)
        return EXIT_SPILLBACK
    return EXIT_OK


def cmd_report(m: RunManifest) -> int:
    from . import plotting

    base = m.load_network()
    rows = []
    for scale in m.scales:
        det = _detect(m, base.scaled(scale))
        rows.append(pipeline.validate(det, m.sim_config))
    _write_validation(m, rows, "report")
    plotting.write_report_figures(rows, m.out)
    _print(pipeline.format_table(rows))
    return EXIT_OK


def cmd_fixture(args) -> int:
    from . import fixtures

    if args.name == "diamond":
        net = fixtures.classic_diamond(args.demand or 4000.0)
    else:
        net = fixtures.physical_diamond(args.demand or 3000.0,
                                        signalized=args.name == "signalized-diamond")
    out = Path(args.out)
    io.save_network(out / "network.json", net)
    io.save_demand(out / "demand.csv", net)
    _print(f"wrote {out / 'network.json'} and {out / 'demand.csv'}")
    return EXIT_OK


COMMANDS = {
    "calibrate": cmd_calibrate,
    "solve": cmd_solve,
    "detect": cmd_detect,
    "validate": cmd_validate,
    "report": cmd_report,
}


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="braess-routes",
        description="Detect and remove Braess routes; check the result by simulation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--network", required=True, help="network JSON")
    common.add_argument("--demand", help="demand CSV (od_id,origin,destination,demand_vph)")
    common.add_argument("--delays", help="delay parameter JSON written by calibrate")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--tol", type=float, default=DEFAULT_TOL, help="relative gap tolerance")
    common.add_argument("--seed", type=int, default=0)

    elim = argparse.ArgumentParser(add_help=False)
    elim.add_argument("--method", choices=sorted(METHODS), default="greedy-route")
    elim.add_argument("--max-set-size", type=int, default=2)
    elim.add_argument("--budget", type=int, default=10_000, help="maximum equilibrium solves")

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--injection", choices=("poisson", "deterministic"), default="poisson")
    sim.add_argument("--horizon", type=float, default=3600.0, help="measured seconds")

    p = sub.add_parser("calibrate", parents=[common], help="fit delay functions")
    p.add_argument("--obs-dir", help="directory of <link_id>.csv observation files")
    p.add_argument("--synthetic", action="store_true",
                   help="generate observations with the simulator")
    sub.add_parser("solve", parents=[common], help="solve the equilibrium")
    sub.add_parser("detect", parents=[common, elim], help="find and remove Braess routes")
    sub.add_parser("validate", parents=[common, elim, sim],
                   help="simulate the assignments before and after removal")
    p = sub.add_parser("report", parents=[common, elim, sim],
                       help="validation table and figures over a demand ladder")
    p.add_argument("--scales", type=_float_list, default=[0.5, 0.75, 1.0, 1.25],
                   help="demand multipliers, comma separated")

    p = sub.add_parser("fixture", help="write a built-in example network")
    p.add_argument("name", choices=("diamond", "physical-diamond", "signalized-diamond"))
    p.add_argument("--demand", type=float)
    p.add_argument("--out", required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        if args.command == "fixture":
            return cmd_fixture(args)
        return COMMANDS[args.command](RunManifest.from_args(args))
    except NonConvergence as exc:
        log.error("%s", exc)
        return EXIT_NONCONVERGENCE
    except BudgetExceeded as exc:
        log.error("%s", exc)
        return EXIT_BUDGET
    except SpillbackDetected as exc:
        log.error("%s", exc)
        return EXIT_SPILLBACK
    except (InputError, NetworkError, InsufficientData, ConnectivityViolation,
            NoRouteForDemand, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
