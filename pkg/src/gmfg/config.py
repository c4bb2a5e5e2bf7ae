"""Experiment configuration files (YAML).

Required keys: ``states``, ``actions``, ``discount``, ``horizon`` (integer or
``infinite``), ``graphon {kind, params}``, and either ``builtin: {malware:
{q, k, lambda}}`` or the tabulated ``f``, ``f0``, ``reward``, ``kernel_rule``.
Optional: ``grid_size``, ``seed``, ``resolution``, ``mu0``, ``solver``,
``infinite``, ``verify``, ``nsim``, ``figures``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .graphon import Graphon, load_graphon
from .model import AffineKernel, LinearReward, ModelSpec, malware_model
from .solver_finite import FixedPointConfig
from .solver_infinite import InfiniteConfig


class ConfigError(ValueError):
    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name
        self.message = message


REQUIRED = ("states", "actions", "discount", "horizon", "graphon")


@dataclass(frozen=True)
class NsimSettings:
    N: int = 1000
    T: int = 10
    placement: str = "uniform"
    aggregate_only: bool = True


@dataclass(frozen=True)
class FigureSettings:
    graphons: tuple = ()
    steps: int = 50
    mu_points: int = 101


@dataclass
class ExperimentConfig:
    model: ModelSpec
    graphon: Graphon
    seed: int = 0
    reduce: bool = True
    resolution: int | None = None
    mu0: np.ndarray | None = None
    solver: FixedPointConfig = field(default_factory=FixedPointConfig)
    infinite: InfiniteConfig = field(default_factory=InfiniteConfig)
    tail_tol: float = 1e-8
    nsim: NsimSettings = field(default_factory=NsimSettings)
    figures: FigureSettings = field(default_factory=FigureSettings)
    horizon: int | None = None
    raw: dict = field(default_factory=dict)
    base_dir: Path | None = None

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True, default=str).encode()).hexdigest()[:16]

    def initial_state(self, structure):
        mu0 = self.mu0 if self.mu0 is not None else np.full(self.model.n_states, 1.0 / self.model.n_states)
        return np.tile(mu0, (structure.K, 1))


def _arr(raw, key, shape=None):
    try:
        a = np.asarray(raw[key], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, f"not a numeric array ({exc})") from exc
    if shape is not None and a.shape != shape:
        raise ConfigError(key, f"expected shape {shape}, got {a.shape}")
    return a


def _dataclass_from(cls, raw, key, **extra):
    raw = dict(raw or {})
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{key}.{sorted(unknown)[0]}", "unknown setting")
    try:
        return cls(**raw, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from exc


def _build_model(raw, horizon):
    states, actions = list(raw["states"]), list(raw["actions"])
    nx, na = len(states), len(actions)
    disc = raw["discount"]
    if not isinstance(disc, (int, float)) or isinstance(disc, bool):
        raise ConfigError("discount", "must be a number")
    builtin = raw.get("builtin")
    try:
        if builtin is not None:
            if not isinstance(builtin, dict) or "malware" not in builtin:
                raise ConfigError("builtin", "only the 'malware' builtin model is available")
            p = dict(builtin["malware"] or {})
            m = malware_model(q=p.get("q", 0.9), k=p.get("k", 0.3), lam=p.get("lambda", 0.2), discount=float(disc), horizon=horizon)
            if (nx, na) != (2, 2):
                raise ConfigError("states", "the malware model has two states and two actions")
            return m.with_(states=tuple(states), actions=tuple(actions))
        for key in ("f", "f0", "reward", "kernel_rule"):
            if key not in raw:
                raise ConfigError(key, "required when no builtin model is given")
        f = _arr(raw, "f", (nx, na, nx))
        f0 = _arr(raw, "f0", (nx, na))
        rule = raw["kernel_rule"]
        if not isinstance(rule, dict) or rule.get("type", "affine") != "affine":
            raise ConfigError("kernel_rule", "expected {type: affine, base, slope}")
        kern = AffineKernel(_arr(rule, "base", (nx, na, nx)), _arr(rule, "slope", (nx, na, nx)))
        rew = raw["reward"]
        if isinstance(rew, dict):
            reward = LinearReward(_arr(rew, "base", (nx, na)),
                                  _arr(rew, "drive_coef", (nx, na)) if "drive_coef" in rew else None,
                                  _arr(rew, "mu_coef", (nx, na, nx)) if "mu_coef" in rew else None)
        else:
            reward = LinearReward(_arr(raw, "reward", (nx, na)))
        return ModelSpec(tuple(states), tuple(actions), f, f0, kern, reward, float(disc), horizon, raw.get("name", "custom"))
    except ConfigError:
        raise
    except ValueError as exc:
        msg = str(exc)
        name = "discount" if "discount" in msg else "horizon" if "horizon" in msg else "model"
        raise ConfigError(name, msg) from exc


def parse_config(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    for key in REQUIRED:
        if key not in raw:
            raise ConfigError(key, "missing required field")
    hz = raw["horizon"]
    if hz in ("infinite", "inf", None):
        horizon = None
    elif isinstance(hz, int) and not isinstance(hz, bool) and hz >= 1:
        horizon = hz
    else:
        raise ConfigError("horizon", "must be a positive integer or 'infinite'")
    model = _build_model(raw, horizon)
    gspec = raw["graphon"]
    if not isinstance(gspec, dict) or "kind" not in gspec:
        raise ConfigError("graphon", "expected {kind, params}")
    try:
        graphon = load_graphon({**gspec, "grid_size": raw.get("grid_size", 64)}, base_dir)
    except (KeyError, ValueError, OSError) as exc:
        raise ConfigError("graphon", str(exc)) from exc
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed", "must be an integer")
    solver = _dataclass_from(FixedPointConfig, raw.get("solver"), "solver", **({} if "seed" in (raw.get("solver") or {}) else {"seed": seed}))
    icfg = _dataclass_from(InfiniteConfig, raw.get("infinite"), "infinite")
    nsim = _dataclass_from(NsimSettings, raw.get("nsim"), "nsim")
    figs = dict(raw.get("figures") or {})
    fig_graphons = []
    for i, gs in enumerate(figs.pop("graphons", [])):
        try:
            fig_graphons.append(load_graphon({**gs, "grid_size": raw.get("grid_size", 64)}, base_dir))
        except (KeyError, ValueError, OSError, TypeError) as exc:
            raise ConfigError(f"figures.graphons[{i}]", str(exc)) from exc
    figures = _dataclass_from(FigureSettings, figs, "figures", graphons=tuple(fig_graphons))
    mu0 = None
    if "mu0" in raw:
        mu0 = _arr(raw, "mu0", (model.n_states,))
        if mu0.min() < 0 or abs(mu0.sum() - 1) > 1e-12:
            raise ConfigError("mu0", "must be a distribution over states")
    res = raw.get("resolution")
    if res is not None and (not isinstance(res, int) or res < 2):
        raise ConfigError("resolution", "must be an integer >= 2")
    tail = float((raw.get("verify") or {}).get("tail_tol", 1e-8))
    return ExperimentConfig(model, graphon, seed, bool(raw.get("reduce", True)), res, mu0, solver, icfg, tail, nsim,
                            figures, horizon, raw, base_dir)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError("<file>", str(exc)) from exc
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"YAML parse error: {exc}") from exc
    return parse_config(raw, path.parent)
