"""Command-line front end: ``hypermerton {solve,oracle,compare,simulate} --config FILE``.

Exit codes: 0 success, 2 invalid config, 3 solver non-convergence or failure,
4 oracle boundary contact above 1 %, 5 partial comparison report.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import analysis as an
from . import discount as disc
from . import market as mk
from . import mpe_oracle as mo
from . import simulator as sim
from .closed_policies import AgentKind, ConstantRate, Policy
from .errors import (
    ConfigError,
    DomainError,
    HypermertonError,
    NonConvergenceError,
    SolverError,
)
from .soph_solver import SolverConfig

log = logging.getLogger("hypermerton")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_BOUNDARY, EXIT_PARTIAL = 0, 2, 3, 4, 5
AGENTS = ("constant", "precommitment", "naive", "sophisticated")
BOUNDARY_LIMIT = 0.01


class ConfigFailure(Exception):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


@dataclass
class ExperimentConfig:
    problem: an.ComparisonProblem
    agents: tuple
    solver: SolverConfig
    oracle: Optional[dict]
    simulation: Optional[dict]
    out_dir: Path
    formats: tuple = ("json", "csv")
    raw: dict = field(default_factory=dict, repr=False)
    text: str = field(default="", repr=False)


def _line_of(text: str, key: str) -> Optional[int]:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def load_config(path, out_override=None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigFailure(f"cannot read config: {exc}")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigFailure(f"invalid JSON: {exc.msg}", exc.lineno)
    try:
        cfg = _validate(raw, out_override)
        cfg.text = text
        return cfg
    except (HypermertonError, ValueError, TypeError, KeyError) as exc:
        msg = str(exc).strip("'\"")
        fieldname = re.match(r"([A-Za-z_][\w.]*)\s*:", msg)
        key = fieldname.group(1).split(".")[-1] if fieldname else None
        if key is None and isinstance(exc, KeyError):
            key = exc.args[0]
            msg = f"missing field {key!r}"
        raise ConfigFailure(msg, _line_of(text, key) if key else None)


def _validate(raw: dict, out_override) -> ExperimentConfig:
    if "problem" not in raw:
        raise ConfigError("problem: block is required")
    p = raw["problem"]
    discount = disc.from_json(p["discount"])
    market = mk.from_json(p["market"])
    utility = mk.utility_from_json(p["utility"])
    T = float(p["T"])
    if not T > 0:
        raise ConfigError("T: horizon must be positive")
    W0 = float(p.get("W0", 1.0))
    rho = p.get("constant_rho")
    problem = an.ComparisonProblem(discount, market, utility, T, W0, None if rho is None else float(rho))
    agents = tuple(raw.get("agents", AGENTS))
    bad = [a for a in agents if a not in AGENTS]
    if bad:
        raise ConfigError(f"agents: unknown agent(s) {bad}")
    solver = SolverConfig.from_json(raw.get("solver", {}))
    oracle = raw.get("oracle")
    if oracle is not None:
        extra = set(oracle) - {"n_steps", "steps", "q", "n_nodes", "span", "mode"}
        if extra:
            raise ConfigError(f"oracle: unknown field(s) {sorted(extra)}")
        if int(oracle.get("n_steps", 64)) < 2:
            raise ConfigError("n_steps: oracle needs at least 2 steps")
        if int(oracle.get("q", 7)) < 3:
            raise ConfigError("q: Hermite order must be >= 3")
    simulation = raw.get("simulation")
    if simulation is not None:
        spec_fields = {k: v for k, v in simulation.items() if k not in ("agent", "policy_file")}
        sim.SimulationSpec.from_json(spec_fields)
        if simulation.get("agent", "naive") not in AGENTS:
            raise ConfigError("agent: unknown simulation agent")
    out = raw.get("output", {})
    out_dir = Path(out_override or out.get("directory", "out"))
    formats = tuple(out.get("formats", ("json", "csv")))
    return ExperimentConfig(problem, agents, solver, oracle, simulation, out_dir, formats, raw)


def _kind(name: str, problem: an.ComparisonProblem) -> AgentKind:
    return an._agent_kind(name, problem)


def _write_json(path: Path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)


# --- commands ------------------------------------------------------------------

def cmd_solve(cfg: ExperimentConfig, args) -> int:
    pb = cfg.problem
    status = EXIT_OK
    for name in cfg.agents:
        try:
            policy = an.build_policy(pb.utility, _kind(name, pb), pb.discount, pb.market, pb.T, cfg.solver)
        except NonConvergenceError as exc:
            _write_json(cfg.out_dir / f"diagnostics_{name}.json",
                        {"error": str(exc), "iterations": len(exc.residuals), "residuals": list(exc.residuals)})
            log.error("%s: %s", name, exc)
            status = EXIT_SOLVER
            continue
        except SolverError as exc:
            _write_json(cfg.out_dir / f"diagnostics_{name}.json", {"error": str(exc), **(exc.diagnostics or {})})
            log.error("%s: %s", name, exc)
            status = EXIT_SOLVER
            continue
        _write_json(cfg.out_dir / f"policy_{name}.json", policy.to_json())
        if name == "sophisticated" and policy.meta.get("solution") is not None:
            policy.meta["solution"].write_diagnostics(cfg.out_dir / f"diagnostics_{name}.json")
        if "csv" in cfg.formats:
            tt = [pb.T * k / 10 for k in range(10)]
            policy.write_table(cfg.out_dir / f"policy_{name}.csv", tt, [pb.W0])
    return status


def _reference_c0(cfg: ExperimentConfig) -> float:
    pb = cfg.problem
    policy = an.build_policy(pb.utility, AgentKind("sophisticated"), pb.discount, pb.market, pb.T, cfg.solver)
    return float(policy.consumption(pb.W0, 0.0))


def cmd_oracle(cfg: ExperimentConfig, args) -> int:
    if cfg.oracle is None:
        raise ConfigFailure("oracle: block is required for the oracle command")
    pb = cfg.problem
    o = cfg.oracle
    N = int(o.get("n_steps", 64))
    steps = [int(s) for s in o.get("steps", [N, 2 * N])]
    mode = o.get("mode", "sophisticated")
    problem = mo.Problem(pb.discount, pb.market, pb.utility, pb.T, pb.W0)
    ref = _reference_c0(cfg)
    kwargs = {k: o[k] for k in ("q", "n_nodes", "span") if k in o}
    rows, results = mo.convergence_study(problem, steps, reference=ref, mode=mode, grid_kwargs=kwargs)
    with open(cfg.out_dir / "oracle_convergence.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["N", "c0_oracle", "c0_closed_form", "gap", "ratio", "richardson"])
        for r in rows:
            wr.writerow([r["N"], f"{r['c0']:.17g}", f"{ref:.17g}", f"{r['error']:.17g}",
                         f"{r['ratio']:.17g}" if "ratio" in r else "",
                         f"{r['richardson']:.17g}" if "richardson" in r else ""])
    for res in results:
        res.to_csv(cfg.out_dir / f"oracle_N{res.grid.n_steps}.csv")
    worst = max(r.diagnostics["boundary_contact_fraction"] for r in results)
    _write_json(cfg.out_dir / "oracle_diagnostics.json",
                {"runs": [r.diagnostics for r in results], "convergence": rows, "reference_c0": ref})
    if worst > BOUNDARY_LIMIT:
        log.warning("boundary contact fraction %.3g exceeds %.0f%%", worst, 100 * BOUNDARY_LIMIT)
        return EXIT_BOUNDARY
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig, args) -> int:
    if not cfg.agents:
        raise ConfigFailure("agents: list is empty", _line_of(cfg.text, "agents"))
    o = cfg.oracle
    steps = None
    if o is not None:
        N = int(o.get("n_steps", 64))
        steps = tuple(int(s) for s in o.get("steps", [N, 2 * N]))
    conf = an.CompareConfig(agents=cfg.agents, solver=cfg.solver, oracle_steps=steps)
    report = an.compare_agents(cfg.problem, conf)
    report.write_json(cfg.out_dir / "comparison.json")
    u = cfg.problem.utility
    name = "table1.csv" if isinstance(u, mk.LogUtility) else "table2.csv" if isinstance(u, mk.PowerUtility) \
        else "table_exponential.csv"
    report.write_csv(cfg.out_dir / name)
    for agent, msg in report.omissions.items():
        log.error("%s omitted: %s", agent, msg)
    return EXIT_PARTIAL if report.partial else EXIT_OK


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    if cfg.simulation is None:
        raise ConfigFailure("simulation: block is required for the simulate command")
    pb = cfg.problem
    s = dict(cfg.simulation)
    agent = s.pop("agent", "naive")
    policy_file = s.pop("policy_file", None)
    if args.seed_override is not None:
        s["seed"] = args.seed_override
    s.setdefault("W0", pb.W0)
    spec = sim.SimulationSpec.from_json(s)
    if policy_file:
        with open(policy_file) as fh:
            policy = Policy.from_json(json.load(fh))
    else:
        policy = an.build_policy(pb.utility, _kind(agent, pb), pb.discount, pb.market, pb.T, cfg.solver)
    threads = args.threads or os.cpu_count() or 1
    res = sim.simulate(policy, pb.market, spec, threads=threads)
    res.to_csv(cfg.out_dir / "simulation.csv")
    if spec.keep_paths:
        res.dump_paths(cfg.out_dir / "paths.bin")
    t, m = sim.mean_wealth_ode(policy, pb.market, spec.W0, n_points=spec.n_steps + 1)
    with open(cfg.out_dir / "mean_wealth_ode.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "mean_W"])
        for a, b in zip(t, m):
            wr.writerow([f"{a:.17g}", f"{b:.17g}"])
    mean, se = res.terminal_mean()
    _write_json(cfg.out_dir / "simulation_summary.json",
                {"terminal_mean": mean, "standard_error": se, "ode_terminal_mean": float(m[-1]),
                 "z_score": (mean - float(m[-1])) / se if se > 0 else 0.0,
                 "bankrupt_paths": res.diagnostics["bankrupt_paths"], "threads": threads})
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "oracle": cmd_oracle, "compare": cmd_compare, "simulate": cmd_simulate}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hypermerton", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="experiment JSON file")
    ap.add_argument("--out", help="output directory (overrides output.directory)")
    ap.add_argument("--seed-override", type=int, help="replace simulation.seed")
    ap.add_argument("--threads", type=int, help="worker cap for simulation blocks (default: all cores)")
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.out)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except ConfigFailure as exc:
        where = f"{args.config}:{exc.line}: " if exc.line else f"{args.config}: "
        print(f"{where}{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergenceError as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (SolverError, DomainError, HypermertonError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
