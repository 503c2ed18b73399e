"""Run configuration: JSON ingestion with eager, exhaustive validation.

Every problem found is collected with its field path (``model.beta``,
``grids.dx``, ...) and reported together in a single :class:`ConfigError`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Union

import numpy as np

from mcam.lattice import AlignmentError, Grid, build_grid
from mcam.model import ModelParams, RegimeParams, model_errors
from mcam.refine import TrainConfig
from mcam.sim import SimConfig, SimConfigError

MODES = ("rvi", "refine", "simulate", "eval-policy", "full")
VARIANTS = ("semi_mdp", "paper")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass(frozen=True)
class Tolerances:
    epsilon1: float = 1e-4  # outer loop, sum |V^k - V^{k-1}|
    epsilon2: float = 1e-6  # RVI sup-norm
    epsilon3: float = 1e-6  # fit loss change
    epsilon4: float = 1e-7  # ascent objective change
    w1: int = 20  # outer round cap


@dataclass(frozen=True)
class SolverOptions:
    resolution: tuple = (11, 11, 11)
    max_sweeps: int = 100_000
    variant: str = "semi_mdp"
    centering: str = "per_regime"
    boundary: str = "reflect"


@dataclass(frozen=True)
class RunConfig:
    model: ModelParams
    dx: float
    dy: float
    tolerances: Tolerances = field(default_factory=Tolerances)
    solver: SolverOptions = field(default_factory=SolverOptions)
    train: TrainConfig = field(default_factory=TrainConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    mode: str = "full"

    @property
    def coarse_grid(self) -> Grid:
        return build_grid(self.model.B, self.dy, self.model.K)

    @property
    def fine_grid(self) -> Grid:
        return build_grid(self.model.B, self.dx, self.model.K)


def shipped_config(name: str = "table1.cfg") -> Path:
    return Path(str(resources.files("mcam") / "configs" / name))


# --------------------------------------------------------------------------
# helpers that record errors instead of raising


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


class _Reader:
    def __init__(self):
        self.errors: list[str] = []

    def section(self, doc: dict, path: str, required: tuple, optional: tuple = ()) -> dict:
        if not isinstance(doc, dict):
            self.errors.append(f"{path}: expected an object")
            return {}
        for k in required:
            if k not in doc:
                self.errors.append(f"{path}.{k}: missing field")
        for k in doc:
            if k not in required and k not in optional:
                self.errors.append(f"{path}.{k}: unknown field")
        return doc

    def number(self, doc: dict, key: str, path: str, default=None, integer: bool = False):
        if key not in doc:
            return default
        v = doc[key]
        if not _is_number(v) or (integer and not float(v).is_integer()):
            self.errors.append(f"{path}.{key}: expected {'an integer' if integer else 'a finite number'}, got {v!r}")
            return default
        return int(v) if integer else float(v)

    def choice(self, doc: dict, key: str, path: str, options, default):
        if key not in doc:
            return default
        v = doc[key]
        if v not in options:
            self.errors.append(f"{path}.{key}: must be one of {list(options)}, got {v!r}")
            return default
        return v


_MODEL_KEYS = ("regimes", "Q", "EY", "EY2", "rho", "beta", "r2", "K", "B", "Ma", "Ms", "Ml")


def _read_model(rd: _Reader, doc: dict):
    doc = rd.section(doc, "model", _MODEL_KEYS)
    regimes = []
    raw = doc.get("regimes", [])
    if not isinstance(raw, list) or not raw:
        rd.errors.append("model.regimes: expected a non-empty list")
        raw = []
    for k, reg in enumerate(raw):
        path = f"model.regimes[{k}]"
        reg = rd.section(reg, path, ("lambda", "r1", "sigma_S"))
        vals = [rd.number(reg, key, path) for key in ("lambda", "r1", "sigma_S")]
        if None not in vals:
            regimes.append(RegimeParams(*vals))
    Q = doc.get("Q")
    try:
        Q = np.array(Q, dtype=float)
        if Q.ndim != 2 or not np.all(np.isfinite(Q)):
            raise ValueError
    except (TypeError, ValueError):
        if "Q" in doc:
            rd.errors.append("model.Q: expected a square matrix of finite numbers")
        Q = None
    scalars = {k: rd.number(doc, k, "model") for k in _MODEL_KEYS[2:]}
    n_before = len(rd.errors)
    if Q is None or None in scalars.values() or len(regimes) != len(raw):
        return None
    # bypass __post_init__ so that the rule violations can be collected with paths
    params = object.__new__(ModelParams)
    for name, value in dict(regimes=tuple(regimes), Q=Q, constant_reward=None, **scalars).items():
        object.__setattr__(params, name, value)
    rd.errors.extend(model_errors(params, prefix="model."))
    if len(rd.errors) > n_before:
        return None
    return ModelParams(regimes=tuple(regimes), Q=Q, **scalars)


def _grid_errors(model: ModelParams, dx: float, dy: float) -> list[str]:
    errs = []
    if dx <= 0 or dy <= 0:
        return ["grids: dx and dy must be > 0"]
    k = dy / dx
    if abs(k - round(k)) > 1e-9 * k or round(k) < 2:
        errs.append(f"grids.dy: must be an integer multiple k >= 2 of dx (dy/dx = {k:.6g})")
    for name, h in (("dx", dx), ("dy", dy)):
        try:
            build_grid(model.B, h, model.K)
        except AlignmentError as exc:
            errs.append(f"grids.{name}: {exc}")
    return errs


def _dataclass_from(rd: _Reader, cls, doc: dict, path: str, spec: dict):
    """Build ``cls`` from the keys in ``spec`` (name -> kind) present in ``doc``."""
    doc = rd.section(doc, path, (), tuple(spec))
    kwargs = {}
    for key, kind in spec.items():
        if key not in doc:
            continue
        if kind in ("float", "int"):
            v = rd.number(doc, key, path, integer=kind == "int")
            if v is not None:
                kwargs[key] = v
        elif isinstance(kind, tuple):
            v = rd.choice(doc, key, path, kind, None)
            if v is not None:
                kwargs[key] = v
        else:
            kwargs[key] = doc[key]
    return kwargs


def parse_config_dict(doc: Any) -> RunConfig:
    rd = _Reader()
    doc = rd.section(doc, "config", ("model", "grids"), ("mode", "tolerances", "solver", "train", "sim"))
    model = _read_model(rd, doc.get("model", {})) if "model" in doc else None

    g = rd.section(doc.get("grids", {}), "grids", ("dx", "dy"))
    dx, dy = rd.number(g, "dx", "grids"), rd.number(g, "dy", "grids")
    if model is not None and dx is not None and dy is not None:
        rd.errors.extend(_grid_errors(model, dx, dy))

    tol_kw = _dataclass_from(
        rd, Tolerances, doc.get("tolerances", {}), "tolerances",
        {"epsilon1": "float", "epsilon2": "float", "epsilon3": "float", "epsilon4": "float", "w1": "int"},
    )
    for k, v in tol_kw.items():
        if v <= 0:
            rd.errors.append(f"tolerances.{k}: must be > 0")
    solver_kw = _dataclass_from(
        rd, SolverOptions, doc.get("solver", {}), "solver",
        {
            "resolution": "list",
            "max_sweeps": "int",
            "variant": VARIANTS,
            "centering": ("per_regime", "scalar"),
            "boundary": ("reflect", "extrapolate"),
        },
    )
    if "resolution" in solver_kw:
        res = solver_kw["resolution"]
        if not (isinstance(res, list) and len(res) == 3 and all(isinstance(r, int) and r >= 2 for r in res)):
            rd.errors.append("solver.resolution: expected three integers >= 2")
        else:
            solver_kw["resolution"] = tuple(res)
    train_kw = _dataclass_from(
        rd, TrainConfig, doc.get("train", {}), "train",
        {
            "h1": "float", "fit_lr": "float", "fit_epochs": "int", "ascend_epochs": "int",
            "window": "int", "width": "int", "seed": "int", "optimizer": ("adam", "sgd"),
        },
    )
    sim_kw = _dataclass_from(
        rd, SimConfig, doc.get("sim", {}), "sim",
        {
            "dt": "float", "T": "float", "burn_in": "float", "n_paths": "int", "seed": "int",
            "reflection": ("mirror", "clamp"), "dynamics": ("sde", "chain"), "x0": "float",
            "regime0": "int", "lookup_h": "float", "trace_every": "float",
        },
    )
    mode = rd.choice(doc, "mode", "config", MODES, "full")

    # epsilon3/4 live on TrainConfig
    for k in ("epsilon3", "epsilon4"):
        if k in tol_kw:
            train_kw[k] = tol_kw[k]
    built = {}
    for name, cls, kw in (("train", TrainConfig, train_kw), ("sim", SimConfig, sim_kw)):
        try:
            built[name] = cls(**kw)
        except (ValueError, SimConfigError) as exc:
            rd.errors.extend(f"{name}.{line.strip()}" for line in str(exc).splitlines()[1:] or [str(exc)])
    if model is not None and "sim" in built:
        rate = float(np.max(np.abs(np.diag(model.Q))))
        if built["sim"].dt * rate >= 0.1:
            rd.errors.append("sim.dt: dt * max|q_jj| must be below 0.1")
        if not 0 <= built["sim"].regime0 < model.m0:
            rd.errors.append("sim.regime0: out of range")
        if abs(built["sim"].x0) > model.B:
            rd.errors.append("sim.x0: must lie in [-B, B]")

    if rd.errors:
        raise ConfigError(rd.errors)
    return RunConfig(
        model=model,
        dx=dx,
        dy=dy,
        tolerances=Tolerances(**tol_kw),
        solver=SolverOptions(**solver_kw),
        train=built["train"],
        sim=built["sim"],
        mode=mode,
    )


def parse_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([f"config: file not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config: not valid JSON ({exc})"]) from None
    return parse_config_dict(doc)


def config_to_dict(cfg: RunConfig) -> dict:
    """Inverse of :func:`parse_config_dict`, used to record the effective settings."""
    m = cfg.model
    return {
        "mode": cfg.mode,
        "model": {
            "regimes": [{"lambda": r.lam, "r1": r.r1, "sigma_S": r.sigma_S} for r in m.regimes],
            "Q": m.Q.tolist(),
            **{k: getattr(m, k) for k in _MODEL_KEYS[2:]},
        },
        "grids": {"dx": cfg.dx, "dy": cfg.dy},
        "tolerances": {f.name: getattr(cfg.tolerances, f.name) for f in fields(Tolerances)},
        "solver": {**{f.name: getattr(cfg.solver, f.name) for f in fields(SolverOptions)},
                   "resolution": list(cfg.solver.resolution)},
        "train": {k: getattr(cfg.train, k) for k in
                  ("h1", "fit_lr", "fit_epochs", "ascend_epochs", "window", "width", "seed", "optimizer")},
        "sim": {k: getattr(cfg.sim, k) for k in
                ("dt", "T", "burn_in", "n_paths", "seed", "reflection", "dynamics", "x0", "regime0",
                 "lookup_h", "trace_every")},
    }
