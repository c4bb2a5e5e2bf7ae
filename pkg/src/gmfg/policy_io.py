"""Versioned CSV-compatible policy files.

Layout: ``#``-prefixed header lines ``# key: <json>`` (format version, model
hash, graphon, population structure, grid, horizon, discount, solver config),
then a CSV table with one row per (t, node, group, state)::

    t,node,class,state,value,p_<action>...

Finite horizons carry ``t = 1..T`` plus terminal rows ``t = T + 1`` with empty
probabilities; stationary solutions use ``t = 0``.  Floats are written with
``repr`` so a round trip is exact.
"""

from __future__ import annotations

import csv
import json

import numpy as np

from .graphon import AgentClassGrid, Graphon, PopulationStructure
from .grid import MeanFieldGrid
from .solver_finite import FixedPointConfig, PolicyTable
from .solver_infinite import StationarySolution

FORMAT = "gmfg-policy/1"


class PolicyFileError(ValueError):
    pass


def _header(policy):
    model, st = policy.model, policy.structure
    return {
        "format": FORMAT,
        "model_hash": model.hash(),
        "model": model.name,
        "graphon": st.graphon.describe() if st.graphon is not None else None,
        "structure": {"coupling": st.coupling.tolist(), "weights": st.weights.tolist(), "groups": [list(g) for g in st.groups]},
        "grid": policy.grid.describe(),
        "horizon": "infinite" if policy.infinite else policy.horizon,
        "discount": model.discount,
        "cfg": {k: v for k, v in policy.cfg.to_dict().items() if k != "threads"},  # results do not depend on it
    }


def save_policy(policy, path):
    model = policy.model
    head = _header(policy)
    with open(path, "w", newline="") as fh:
        for k, v in head.items():
            fh.write(f"# {k}: {json.dumps(v, sort_keys=True)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "node", "class", "state", "value"] + [f"p_{a}" for a in model.actions])
        if policy.infinite:
            stages = [(0, policy.gamma, policy.values)]
            terminal = None
        else:
            stages = [(t, policy.gammas[t - 1], policy.values[t - 1]) for t in range(1, policy.horizon + 1)]
            terminal = (policy.horizon + 1, policy.values[policy.horizon])
        for t, gamma, value in stages:
            P, K, nx = value.shape
            for p in range(P):
                for k in range(K):
                    for x in range(nx):
                        w.writerow([t, p, k, model.states[x], repr(float(value[p, k, x]))]
                                   + [repr(float(v)) for v in gamma[p, k, x]])
        if terminal is not None:
            t, value = terminal
            P, K, nx = value.shape
            blank = [""] * model.n_actions
            for p in range(P):
                for k in range(K):
                    for x in range(nx):
                        w.writerow([t, p, k, model.states[x], repr(float(value[p, k, x]))] + blank)


def read_header(path):
    head = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, val = line[1:].strip().partition(":")
            head[key.strip()] = json.loads(val)
    if head.get("format") != FORMAT:
        raise PolicyFileError(f"{path}: not a {FORMAT} policy file")
    return head


def _structure_from_header(head):
    s = head["structure"]
    g = head.get("graphon")
    graphon = grid = None
    if g is not None:
        if g["kind"] == "custom":
            graphon = Graphon.custom(np.array(g["table"]))
        else:
            graphon = Graphon(g["kind"], g["params"], g["grid_size"])
        grid = AgentClassGrid(graphon.grid_size)
    groups = tuple(tuple(grp) for grp in s["groups"])
    return PopulationStructure(np.array(s["coupling"]), np.array(s["weights"]), groups, graphon, grid)


def load_policy(path, model, check_hash=True):
    """Read a policy file for ``model``; the stored model hash must match."""
    head = read_header(path)
    if check_hash and head["model_hash"] != model.hash():
        raise PolicyFileError(f"{path}: policy was computed for model hash {head['model_hash']}, not {model.hash()}")
    structure = _structure_from_header(head)
    gd = head["grid"]
    grid = MeanFieldGrid(gd["n_groups"], gd["n_states"], gd["resolution"], max(gd["size"], 1))
    cfg = FixedPointConfig(**head["cfg"])
    P, K, nx, na = grid.size, structure.K, model.n_states, model.n_actions
    sidx = {s: i for i, s in enumerate(model.states)}
    with open(path, newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    body = rows[1:]
    infinite = head["horizon"] == "infinite"
    T = 0 if infinite else int(head["horizon"])
    n_t = 1 if infinite else T + 1
    values = np.full((n_t, P, K, nx), np.nan)
    gammas = np.full((max(T, 1), P, K, nx, na), np.nan)
    for r in body:
        t, p, k, x = int(r[0]), int(r[1]), int(r[2]), sidx[r[3]]
        ti = 0 if infinite else t - 1
        values[ti, p, k, x] = float(r[4])
        if r[5] != "":
            gammas[ti, p, k, x] = [float(v) for v in r[5 : 5 + na]]
    if np.isnan(values).any() or np.isnan(gammas).any():
        raise PolicyFileError(f"{path}: policy table is incomplete")
    if infinite:
        return StationarySolution(model, structure, grid, cfg, gammas[0], values[0], float("nan"), float("nan"), 0)
    return PolicyTable(model, structure, grid, cfg, gammas, values, {"loaded_from": str(path)})
