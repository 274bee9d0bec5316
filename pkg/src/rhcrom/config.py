"""Experiment configuration files.

A configuration is an INI file with the sections ``mesh``, ``time``,
``physics``, ``cost``, ``actuators``, ``rhc``, ``solver``, ``study``,
``output`` and ``run``. Every key is optional and defaults to the
full-scale experiment; unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import sympy

from .fem import X1_SYM, X2_SYM, ActuatorLayout, Box, Discretization, PhysicalParams, assemble, build_mesh, \
    default_layout
from .ocp import CostSpec, SolverOptions
from .rhc import RHCConfig


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class MeshSection:
    n_per_side: int = 61
    actuator_method: str = "exact"


@dataclass(frozen=True)
class TimeSection:
    T_inf: float = 10.0
    K: int = 801

    @property
    def tau(self) -> float:
        return self.T_inf / (self.K - 1)


@dataclass(frozen=True)
class PhysicsSection:
    nu: float = 0.1
    reaction: str = "-2 - 0.8*Abs(sin(t))"
    velocity_x1: str = "-0.01*(x1 + x2)"
    velocity_x2: str = "0.2*x1*x2"
    y0: str = "3*sin(pi*x1)*sin(pi*x2)"
    advection: str = "convective"


@dataclass(frozen=True)
class CostSection:
    lam: float = 1e-3
    beta: float = 1e-4
    # "example": J = 1/2 int |y|^2 + lam/2 |u|_2^2 + beta/2 |u|_1^2 dt (overall factor 1/2)
    # "plain":   J = int 1/2 |y|^2 + lam/2 |u|_2^2 + beta/2 |u|_1^2 dt
    convention: str = "example"


@dataclass(frozen=True)
class ActuatorSection:
    layout: str = "default"     # "default" or "xmin xmax ymin ymax; ..."
    area: float = 0.0106
    corner_x: float = 0.74
    corner_y: float = 0.75


@dataclass(frozen=True)
class RHCSection:
    delta: float = 0.28
    T: float = 0.8
    alpha_tilde: float = 0.35
    index_variant: str = "mixed"
    r_max: int = 100
    energy_eps: float = 1 - 1e-13
    max_updates: int = 10
    validation_mode: bool = False


@dataclass(frozen=True)
class SolverSection:
    max_iter: int = 1000
    abs_tol: float = 1e-13
    rel_tol: float = 1e-13
    stall_iter: int = 30


@dataclass(frozen=True)
class StudySection:
    horizons: tuple = (0.8, 1.0, 1.2)
    lambdas: tuple = (1.0, 1e-1, 1e-2, 1e-3)
    r_values: tuple = (5, 10, 15, 20, 25, 30, 35, 40)
    r_pod_max: int = 100
    alphas: tuple = (0.35, 0.58, 0.73)   # paired with ``horizons`` for RHC sweeps


@dataclass(frozen=True)
class OutputSection:
    directory: str = "runs"
    basis_cache: bool = True
    export_matrices: bool = False


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    threads: int = 1


_SECTIONS = {
    "mesh": MeshSection, "time": TimeSection, "physics": PhysicsSection, "cost": CostSection,
    "actuators": ActuatorSection, "rhc": RHCSection, "solver": SolverSection, "study": StudySection,
    "output": OutputSection, "run": RunSection,
}


def _convert(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            s = raw.strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in raw.replace(",", " ").split())
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    mesh: MeshSection = field(default_factory=MeshSection)
    time: TimeSection = field(default_factory=TimeSection)
    physics: PhysicsSection = field(default_factory=PhysicsSection)
    cost: CostSection = field(default_factory=CostSection)
    actuators: ActuatorSection = field(default_factory=ActuatorSection)
    rhc: RHCSection = field(default_factory=RHCSection)
    solver: SolverSection = field(default_factory=SolverSection)
    study: StudySection = field(default_factory=StudySection)
    output: OutputSection = field(default_factory=OutputSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self):
        if self.mesh.n_per_side < 3:
            raise ConfigError("mesh.n_per_side must be at least 3")
        if self.time.K < 2 or self.time.T_inf <= 0:
            raise ConfigError("time.K must be >= 2 and time.T_inf positive")
        if self.cost.convention not in ("example", "plain"):
            raise ConfigError("cost.convention must be 'example' or 'plain'")
        if self.cost.lam <= 0 or self.cost.beta < 0:
            raise ConfigError("cost.lam must be positive and cost.beta non-negative")
        if self.study.alphas and len(self.study.alphas) != len(self.study.horizons):
            raise ConfigError("study.alphas must pair up with study.horizons")
        try:
            PhysicalParams(self.physics.nu, self.physics.reaction,
                           (self.physics.velocity_x1, self.physics.velocity_x2),
                           advection=self.physics.advection)
            self.rhc_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- io -----------------------------------------------------------------
    @classmethod
    def from_parser(cls, parser: configparser.ConfigParser) -> "ExperimentConfig":
        kwargs = {}
        for name in parser.sections():
            if name not in _SECTIONS:
                raise ConfigError(f"unknown section [{name}]")
            sec_cls = _SECTIONS[name]
            defaults = {f.name: f.default_factory() if f.default is dataclasses.MISSING else f.default
                        for f in dataclasses.fields(sec_cls)}
            values = {}
            for key, raw in parser.items(name):
                if key not in defaults:
                    raise ConfigError(f"unknown key {name}.{key}")
                values[key] = _convert(raw, defaults[key], f"{name}.{key}")
            kwargs[name] = sec_cls(**values)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"configuration file {path} not found")
        parser = _parser()
        try:
            parser.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        return cls.from_parser(parser)

    @classmethod
    def builtin(cls, name: str) -> "ExperimentConfig":
        """One of the shipped configurations: ``paper_full`` or ``desk``."""
        res = resources.files("rhcrom") / "configs" / f"{name}.cfg"
        if not res.is_file():
            raise ConfigError(f"no built-in configuration named {name!r}")
        parser = _parser()
        parser.read_string(res.read_text(), source=name)
        return cls.from_parser(parser)

    def to_parser(self) -> configparser.ConfigParser:
        parser = _parser()
        for name in _SECTIONS:
            sec = getattr(self, name)
            parser[name] = {}
            for f in dataclasses.fields(sec):
                v = getattr(sec, f.name)
                parser[name][f.name] = ", ".join(repr(x) for x in v) if isinstance(v, tuple) else str(v)
        return parser

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some section fields changed, e.g. ``replace(rhc={"T": 1.0})``."""
        new = {name: dataclasses.replace(getattr(self, name), **vals) for name, vals in sections.items()}
        return dataclasses.replace(self, **new)

    # -- builders -------------------------------------------------------------
    def physical_params(self) -> PhysicalParams:
        p = self.physics
        return PhysicalParams(p.nu, p.reaction, (p.velocity_x1, p.velocity_x2), advection=p.advection)

    def layout(self) -> ActuatorLayout:
        a = self.actuators
        if a.layout.strip().lower() == "default":
            return default_layout(a.area, (a.corner_x, a.corner_y))
        boxes = []
        for item in a.layout.split(";"):
            if item.strip():
                vals = [float(v) for v in item.split()]
                if len(vals) != 4:
                    raise ConfigError(f"actuator box needs 'xmin xmax ymin ymax', got {item!r}")
                boxes.append(Box(*vals))
        try:
            return ActuatorLayout(tuple(boxes))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def discretization(self) -> Discretization:
        return assemble(build_mesh(self.mesh.n_per_side), self.physical_params(), self.layout(),
                        self.mesh.actuator_method)

    def initial_state(self, disc: Discretization) -> np.ndarray:
        expr = sympy.sympify(self.physics.y0, locals={"x1": X1_SYM, "x2": X2_SYM})
        f = sympy.lambdify((X1_SYM, X2_SYM), expr, modules="numpy")
        X = disc.mesh.nodes[disc.mesh.interior_dofs]
        return np.broadcast_to(np.asarray(f(X[:, 0], X[:, 1]), dtype=float), (len(X),)).copy()

    def cost_spec(self, lam: float | None = None, beta: float | None = None) -> CostSpec:
        """Weights of the running cost ``1/2|y|^2 + lam/2|u|^2 + beta/2|u|_1^2`` actually optimised."""
        lam = self.cost.lam if lam is None else lam
        beta = self.cost.beta if beta is None else beta
        scale = 0.5 if self.cost.convention == "example" else 1.0
        return CostSpec(scale * lam, scale * beta)

    def solver_options(self) -> SolverOptions:
        s = self.solver
        return SolverOptions(max_iter=s.max_iter, abs_tol=s.abs_tol, rel_tol=s.rel_tol, stall_iter=s.stall_iter)

    def rhc_config(self, T: float | None = None, alpha_tilde: float | None = None,
                   index_variant: str | None = None, validation_mode: bool | None = None) -> RHCConfig:
        r = self.rhc
        return RHCConfig(
            T_inf=self.time.T_inf, tau=self.time.tau, delta=r.delta, T=r.T if T is None else T,
            alpha_tilde=r.alpha_tilde if alpha_tilde is None else alpha_tilde,
            index_variant=r.index_variant if index_variant is None else index_variant,
            r_max=r.r_max, energy_eps=r.energy_eps, max_updates=r.max_updates,
            validation_mode=r.validation_mode if validation_mode is None else validation_mode,
            cost=self.cost_spec(), solver=self.solver_options())

    def resolved(self, disc: Discretization | None = None) -> configparser.ConfigParser:
        """The configuration plus derived quantities (snapped times, eta_H), for audit."""
        parser = self.to_parser()
        rc = self.rhc_config()
        cs = self.cost_spec()
        parser["derived"] = {
            "tau": repr(self.time.tau), "n_total": str(rc.n_total),
            "delta_snapped": repr(rc.delta_snapped), "n_delta": str(rc.n_delta),
            "T_snapped": repr(rc.T_snapped), "n_horizon": str(rc.n_horizon),
            "lam_effective": repr(cs.lam), "beta_effective": repr(cs.beta),
        }
        if disc is not None:
            parser["derived"].update({"eta_H": repr(disc.eta_H), "eta_V": repr(disc.eta_V),
                                      "B_dualnorm": repr(disc.B_dualnorm), "n_dofs": str(disc.n)})
        return parser


def _parser() -> configparser.ConfigParser:
    p = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    p.optionxform = str  # keys are case sensitive (T, T_inf, K)
    return p
