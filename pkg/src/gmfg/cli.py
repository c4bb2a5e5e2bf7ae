"""Command line entry point: ``gmfg <subcommand> --config cfg.yaml --out dir``.

Every run writes its artifacts plus ``manifest.json`` (config hash, versions,
residuals, artifact checksums, wall time) into ``--out`` and prints a one-line
JSON summary.  Failures print a one-line JSON error to stderr: exit code 2 for
configuration problems, 1 for solver or verification failures.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config
from .dynamics import DomainError, closed_loop, population_mass, propagate, write_trajectory_csv
from .graphon import PopulationStructure, reference_graphons
from .grid import GridBudgetError, MeanFieldGrid
from .model import ModelDefinitionError, check_assumptions
from .nsim import mf_gap, sample_network, simulate
from .policy_io import PolicyFileError, load_policy, save_policy
from .solver_finite import FixedPointError, solve_finite
from .solver_infinite import NonConvergenceError, solve_infinite, stationary_mean_field
from .verify import converse_scan, equilibrium_gap


class VerificationFailed(RuntimeError):
    pass


def _fmt(v):
    return repr(float(v))


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


class Run:
    def __init__(self, args):
        self.args = args
        self.cfg = load_config(args.config)
        if args.threads is not None:
            self.cfg.solver = dataclasses.replace(self.cfg.solver, threads=args.threads)
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts = []
        self.results = {}

    def path(self, name):
        p = self.out / name
        self.artifacts.append(p)
        return p

    def structure(self, graphon=None):
        return PopulationStructure.from_graphon(graphon or self.cfg.graphon, model=self.cfg.model, reduce=self.cfg.reduce)

    def grid(self, structure):
        return MeanFieldGrid.for_model(self.cfg.model, structure, self.cfg.resolution)

    def solve(self, structure, infinite=None):
        cfg, model = self.cfg, self.cfg.model
        infinite = model.horizon is None if infinite is None else infinite
        if infinite:
            return solve_infinite(model, structure, self.grid(structure), cfg.solver, cfg.infinite)
        return solve_finite(model, structure, self.grid(structure), cfg.solver)

    def policy(self, structure, infinite=None):
        if self.args.policy_in:
            return load_policy(self.args.policy_in, self.cfg.model)
        return self.solve(structure, infinite)

    def save(self, policy):
        target = Path(self.args.policy_out) if self.args.policy_out else self.out / "policy.csv"
        save_policy(policy, target)
        self.artifacts.append(target)

    def manifest(self, wall):
        m = {
            "subcommand": self.args.command,
            "config": str(self.args.config),
            "config_hash": self.cfg.hash,
            "model_hash": self.cfg.model.hash(),
            "seed": self.cfg.seed,
            "versions": {"gmfg": __version__, "numpy": np.__version__, "python": platform.python_version()},
            "results": self.results,
            "artifacts": {str(p.name): hashlib.sha256(p.read_bytes()).hexdigest() for p in self.artifacts},
            "wall_time": wall,
        }
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(m, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _policy_summary(policy):
    if policy.infinite:
        return {
            "horizon": "infinite",
            "sweeps": policy.iterations,
            "value_residual": policy.value_residual,
            "prescription_residual": policy.prescription_residual,
            "multiple_equilibria_points": policy.diagnostics.get("multiple_equilibria_points", 0),
            "a5_ties": len(policy.diagnostics.get("a5_ties", [])),
        }
    d = policy.diagnostics
    return {
        "horizon": policy.horizon,
        "max_residual": d.get("max_residual"),
        "max_iterations": d.get("max_iterations"),
        "multiple_equilibria_points": d.get("multiple_equilibria_points"),
        "a5_ties": len(d.get("a5_ties", [])),
    }


def _infected(model):
    return model.states.index("infected") if "infected" in model.states else model.n_states - 1


def _repair(model):
    return model.actions.index("repair") if "repair" in model.actions else model.n_actions - 1


def cmd_solve(run: Run, infinite):
    model = run.cfg.model
    if infinite and model.horizon is not None:
        model = model.with_(horizon=None)
        run.cfg.model = model
    if not infinite and model.horizon is None:
        raise ConfigError("horizon", "solve-finite needs a finite horizon")
    st = run.structure()
    policy = run.solve(st, infinite)
    run.save(policy)
    run.results.update(_policy_summary(policy))
    run.results["groups"] = st.K
    run.results["grid_nodes"] = policy.grid.size
    ties = policy.diagnostics.get("a5_ties", [])
    run.results["assumptions"] = check_assumptions(model, st, ties)
    if infinite:
        res = stationary_mean_field(model, st, policy, run.cfg.initial_state(st))
        rows = [[st.graphon.label, k, model.states[x], _fmt(res.mu[k, x])] for k in range(st.K) for x in range(model.n_states)]
        _write_rows(run.path("stationary.csv"), ["graphon", "class", "state", "mass"], rows)
        run.results["stationary"] = {"converged": res.converged, "steps": res.steps, "residual": res.residual,
                                     "cycle_period": res.cycle_period}


def cmd_verify(run: Run):
    model = run.cfg.model
    st = run.structure()
    policy = run.policy(st)
    st = policy.structure
    rep = equilibrium_gap(model, st, policy, run.cfg.initial_state(st), run.cfg.tail_tol)
    rep.write_csv(run.path("gap.csv"))
    viol = converse_scan(model, st, policy)
    _write_rows(run.path("violations.csv"), ["t", "node", "class", "state", "kind", "amount"],
                [[v.t, v.node, v.klass, model.states[v.state], v.kind, _fmt(v.amount)] for v in viol])
    tol = 10 * policy.cfg.tol
    run.results.update(json.loads(rep.summary(tol)))
    run.results["violations"] = len(viol)
    if not rep.within(tol) or viol:
        raise VerificationFailed(f"equilibrium audit failed: max gap {rep.max_gap:.3g}, {len(viol)} fixed-point violations")


def _steps(run: Run, policy):
    if run.args.steps is not None:
        return run.args.steps
    return policy.horizon if not policy.infinite else run.cfg.figures.steps


def cmd_trajectory(run: Run):
    model = run.cfg.model
    st = run.structure()
    policy = run.policy(st)
    path, _ = closed_loop(model, policy.structure, run.cfg.initial_state(policy.structure), policy, _steps(run, policy))
    write_trajectory_csv(run.path("trajectory.csv"), model, path)
    run.results["steps"] = len(path) - 1
    run.results["final_mass"] = [float(v) for v in np.asarray(path[-1]).ravel()]


def cmd_nsim(run: Run):
    model, ns = run.cfg.model, run.cfg.nsim
    st = run.structure()
    policy = run.policy(st)
    st = policy.structure
    T = ns.T if policy.infinite else min(ns.T, policy.horizon)
    net = sample_network(run.cfg.graphon, ns.N, run.cfg.seed, ns.placement)
    mu0 = run.cfg.mu0 if run.cfg.mu0 is not None else np.full(model.n_states, 1.0 / model.n_states)
    sim = simulate(model, net, policy, mu0, T, run.cfg.seed, st)
    sim.write_csv(run.path("nsim_paths.csv"), aggregate_only=ns.aggregate_only)
    mf, _ = closed_loop(model, st, np.tile(sim.mu_hat[0][0], (st.K, 1)) if st.K == 1 else sim.mu_hat[0], policy, T)
    gaps = mf_gap(sim, np.array(mf))
    _write_rows(run.path("nsim_gap.csv"), ["t", "mf_gap"], [[t, _fmt(g)] for t, g in enumerate(gaps)])
    run.results.update({"N": ns.N, "T": T, "edge_density": net.density, "max_mf_gap": float(gaps.max())})


def cmd_figures(run: Run):
    cfg, model = run.cfg, run.cfg.model
    graphons = list(cfg.figures.graphons) or reference_graphons(cfg.graphon.grid_size)
    inf, rep = _infected(model), _repair(model)
    grid_mu = np.linspace(0.0, 1.0, cfg.figures.mu_points)
    f1, f2, f3 = [], [], []
    summary = {}
    for g in graphons:
        st = run.structure(g)
        policy = run.solve(st)
        w = st.weights / st.weights.sum()
        for m in grid_mu:
            dist = np.zeros(model.n_states)
            dist[inf] = m
            dist[0 if inf != 0 else 1] += 1.0 - m
            mu = np.tile(dist, (st.K, 1))
            gamma = policy.prescription(1, mu)
            f1.append([_fmt(m), g.label, _fmt(np.dot(w, gamma[:, inf, rep]))])
            f2.append([_fmt(m), g.label, _fmt(population_mass(st, propagate(model, st, mu, gamma), inf))])
        steps = policy.horizon if not policy.infinite else cfg.figures.steps
        path, _ = closed_loop(model, st, cfg.initial_state(st), policy, steps)
        for t, mu in enumerate(path):
            f3.append([t, g.label, _fmt(population_mass(st, mu, inf))])
        summary[g.label] = {"final_infected": population_mass(st, path[-1], inf), **_policy_summary(policy)}
    _write_rows(run.path("fig1_policy.csv"), ["mu_infected", "graphon", "action_prob"], f1)
    _write_rows(run.path("fig2_mean_field_map.csv"), ["mu_t", "graphon", "mu_t1"], f2)
    _write_rows(run.path("fig3_trajectories.csv"), ["t", "graphon", "mu_infected"], f3)
    run.results["graphons"] = summary


COMMANDS = {
    "solve-finite": lambda r: cmd_solve(r, False),
    "solve-infinite": lambda r: cmd_solve(r, True),
    "verify": cmd_verify,
    "trajectory": cmd_trajectory,
    "nsim": cmd_nsim,
    "figures": cmd_figures,
}


def build_parser():
    p = argparse.ArgumentParser(prog="gmfg", description="Graphon mean-field equilibrium solver")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--out", default="out")
        s.add_argument("--threads", type=int, default=None)
        s.add_argument("--policy-out", default=None)
        s.add_argument("--policy-in", default=None)
        if name in ("trajectory",):
            s.add_argument("--steps", type=int, default=None)
    return p


def _fail(kind, message, code, **extra):
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    if not hasattr(args, "steps"):
        args.steps = None
    t0 = time.perf_counter()
    try:
        run = Run(args)
        COMMANDS[args.command](run)
    except ConfigError as exc:
        return _fail("config", exc.message, 2, field=exc.field)
    except (ModelDefinitionError, GridBudgetError, PolicyFileError) as exc:
        return _fail(type(exc).__name__, str(exc), 2)
    except (FixedPointError, NonConvergenceError, DomainError, VerificationFailed) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    run.manifest(round(time.perf_counter() - t0, 3))
    print(json.dumps({"command": args.command, "out": str(run.out), **run.results}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
