"""Declarative run configuration (JSON, ``"schema": 1``).

Complex numbers are two-element arrays [re, im]; plain numbers are accepted
for real values.  Matrices are nested arrays of such entries, or a named
operator {"named": "sigma_x", "scale": 0.5}.  Unknown keys are errors.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .baths import CFExpansion, drude_lorentz_expansion, underdamped_expansion
from .liouvillian import (SIGMA_MINUS, SIGMA_PLUS, SIGMA_X, SIGMA_Y, SIGMA_Z, Constant, Environment,
                          HamiltonianSchedule, PseudoLindbladModel, PulseSchedule)
from .mapping import PseudomodeParams, assign_cutoffs, map_expansion

SCHEMA_VERSION = 1

NAMED = {
    "sigma_x": SIGMA_X, "sigma_y": SIGMA_Y, "sigma_z": SIGMA_Z,
    "sigma_minus": SIGMA_MINUS, "sigma_plus": SIGMA_PLUS,
}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# primitive readers


def _keys(block: Any, path: str, required: set[str], optional: set[str] = frozenset()) -> dict:
    if not isinstance(block, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = set(block) - required - set(optional)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
    missing = required - set(block)
    if missing:
        raise ConfigError(f"{path}: missing key(s) {sorted(missing)}")
    return block


def read_complex(v: Any, path: str) -> complex:
    if isinstance(v, bool):
        raise ConfigError(f"{path}: expected a number or [re, im]")
    if isinstance(v, (int, float)):
        return complex(v)
    if isinstance(v, list) and len(v) == 2 and all(isinstance(x, (int, float)) and not isinstance(x, bool)
                                                   for x in v):
        return complex(v[0], v[1])
    raise ConfigError(f"{path}: expected a number or [re, im]")


def write_complex(z: complex) -> list[float]:
    z = complex(z)
    return [z.real, z.imag]


def read_float(v: Any, path: str, positive: bool = False) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{path}: expected a finite number")
    if positive and v <= 0:
        raise ConfigError(f"{path}: must be positive")
    return float(v)


def read_int(v: Any, path: str, minimum: int | None = None) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{path}: expected an integer")
    if minimum is not None and v < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}")
    return v


def read_matrix(v: Any, path: str, dim: int | None = None) -> np.ndarray:
    if isinstance(v, dict):
        _keys(v, path, {"named"}, {"scale"})
        name = v["named"]
        if name == "identity":
            if dim is None:
                raise ConfigError(f"{path}: identity needs a known dimension")
            m = np.eye(dim, dtype=complex)
        elif name == "zero":
            if dim is None:
                raise ConfigError(f"{path}: zero needs a known dimension")
            m = np.zeros((dim, dim), complex)
        elif name in NAMED:
            m = NAMED[name].copy()
        else:
            raise ConfigError(f"{path}.named: unknown operator {name!r}; known: "
                              f"{sorted(NAMED) + ['identity', 'zero']}")
        m = m * read_complex(v.get("scale", 1.0), f"{path}.scale")
    elif isinstance(v, list) and v and all(isinstance(row, list) for row in v):
        m = np.array([[read_complex(x, f"{path}[{i}][{j}]") for j, x in enumerate(row)]
                      for i, row in enumerate(v)], dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ConfigError(f"{path}: matrix must be square")
    else:
        raise ConfigError(f"{path}: expected a matrix (nested [re, im] arrays) or a named operator")
    if dim is not None and m.shape != (dim, dim):
        raise ConfigError(f"{path}: expected a {dim}x{dim} matrix, got {m.shape}")
    return m


def write_matrix(m: np.ndarray) -> list:
    return [[write_complex(x) for x in row] for row in np.asarray(m)]


def read_state(v: Any, path: str, dim: int) -> np.ndarray:
    """Density matrix, or {"ket": [...]} for a pure state."""
    if isinstance(v, dict) and "ket" in v:
        _keys(v, path, {"ket"})
        ket = np.array([read_complex(x, f"{path}.ket[{i}]") for i, x in enumerate(v["ket"])], complex)
        if ket.size != dim:
            raise ConfigError(f"{path}.ket: expected {dim} entries")
        nrm = np.linalg.norm(ket)
        if nrm == 0:
            raise ConfigError(f"{path}.ket: zero vector")
        ket = ket / nrm
        return np.outer(ket, ket.conj())
    rho = read_matrix(v, path, dim)
    if abs(np.trace(rho) - 1) > 1e-10:
        raise ConfigError(f"{path}: initial state must have unit trace")
    return rho


# --------------------------------------------------------------------------
# configuration objects


@dataclass
class BathConfig:
    kind: str
    lam: float
    gamma: float
    beta: float
    k_max: int
    omega0: float | None = None
    omega_reg: float | None = None

    def expansion(self) -> CFExpansion:
        if self.kind == "underdamped":
            return underdamped_expansion(self.lam, self.gamma, self.omega0, self.beta, self.k_max)
        return drude_lorentz_expansion(self.lam, self.gamma, self.beta, self.k_max, self.omega_reg)

    def to_json(self) -> dict:
        d = {"kind": self.kind, "lambda": self.lam, "gamma": self.gamma, "beta": self.beta, "k_max": self.k_max}
        if self.omega0 is not None:
            d["omega0"] = self.omega0
        if self.omega_reg is not None:
            d["omega_reg"] = self.omega_reg
        return d


@dataclass
class SolverConfig:
    t_final: float
    n_points: int
    rtol: float = 1e-8
    atol: float = 1e-10

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.t_final, self.n_points)


@dataclass
class MCConfig:
    n_traj: int
    seed: int
    strategy: str = "optimal"
    method: str = "gillespie"
    dt: float | None = None
    rtol: float = 1e-6
    atol: float = 1e-9
    chunk_size: int = 200
    block_size: int = 100
    t_final: float | None = None
    n_points: int | None = None
    sweep: list[int] = field(default_factory=list)
    delta: float = 0.05


@dataclass
class OutputConfig:
    observables: dict[str, np.ndarray] = field(default_factory=dict)
    heat_currents: bool = False
    thermodynamics: bool = False
    correlations: bool = False
    final_state: bool = False
    plots: bool = True


@dataclass
class RunConfig:
    name: str
    system_dim: int
    H0: np.ndarray
    drives: list            # (operator, schedule)
    Q: np.ndarray | None
    rho_sys: np.ndarray
    system_channels: list   # (rate, operator)
    bath: BathConfig | None
    cutoffs: list[int] | int | None
    manual_pms: list[PseudomodeParams] | None
    terminator: tuple[complex, complex] | None
    solver: SolverConfig
    mc: MCConfig | None
    outputs: OutputConfig
    raw: dict

    # ---- derived objects

    def expansion(self) -> CFExpansion | None:
        return self.bath.expansion() if self.bath is not None else None

    def pseudomodes(self) -> list[PseudomodeParams]:
        if self.manual_pms is not None:
            pms = list(self.manual_pms)
            return assign_cutoffs(pms, self.cutoffs) if self.cutoffs is not None else pms
        if self.bath is None:
            return []
        return map_expansion(self.expansion(), self.cutoffs)

    def model(self, pms: list[PseudomodeParams] | None = None, drives: bool = True) -> PseudoLindbladModel:
        pms = self.pseudomodes() if pms is None else pms
        h = HamiltonianSchedule(self.H0, tuple(self.drives) if drives else ())
        envs = ()
        if pms or self.terminator is not None:
            if self.Q is None:
                raise ConfigError("model.coupling is required when pseudomodes are present")
            beta = self.bath.beta if self.bath is not None else None
            envs = (Environment(self.Q, tuple(pms), self.terminator, beta, "bath"),)
        return PseudoLindbladModel(h, envs, tuple(self.system_channels))

    def initial_state(self, model: PseudoLindbladModel | None = None) -> np.ndarray:
        model = model or self.model()
        return model.initial_state(self.rho_sys)

    def config_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_overrides(self, **changes) -> "RunConfig":
        """Copy with dotted-path overrides applied to the raw JSON and re-parsed."""
        raw = copy.deepcopy(self.raw)
        for key, value in changes.items():
            node = raw
            parts = key.split(".")
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            if value is None:
                node.pop(parts[-1], None)
            else:
                node[parts[-1]] = value
        return parse_config(raw)


# --------------------------------------------------------------------------
# parsing


def _parse_schedule(v: Any, path: str):
    _keys(v, path, {"kind"}, {"V", "tau", "tau_p", "gap", "amplitude"})
    kind = v["kind"]
    if kind == "constant":
        _keys(v, path, {"kind"}, {"amplitude"})
        return Constant(read_float(v.get("amplitude", 1.0), f"{path}.amplitude"))
    if kind == "pulses":
        V = read_float(v.get("V"), f"{path}.V", positive=True)
        if "gap" in v:
            if "tau" in v or "tau_p" in v:
                raise ConfigError(f"{path}: give either gap (pi pulses) or tau and tau_p")
            return PulseSchedule.pi_pulses(V, read_float(v["gap"], f"{path}.gap", positive=True))
        try:
            return PulseSchedule(V, read_float(v.get("tau"), f"{path}.tau", positive=True),
                                 read_float(v.get("tau_p"), f"{path}.tau_p", positive=True))
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    raise ConfigError(f"{path}.kind: unknown schedule kind {kind!r} (constant, pulses)")


def _parse_bath(v: Any, path: str) -> BathConfig:
    kind = v.get("kind") if isinstance(v, dict) else None
    if kind == "underdamped":
        _keys(v, path, {"kind", "lambda", "gamma", "omega0", "beta", "k_max"})
    elif kind == "drude_lorentz":
        _keys(v, path, {"kind", "lambda", "gamma", "beta", "k_max"}, {"omega_reg"})
    else:
        raise ConfigError(f"{path}.kind: expected 'underdamped' or 'drude_lorentz'")
    bc = BathConfig(
        kind, read_float(v["lambda"], f"{path}.lambda", True), read_float(v["gamma"], f"{path}.gamma", True),
        read_float(v["beta"], f"{path}.beta", True), read_int(v["k_max"], f"{path}.k_max", 0),
        omega0=read_float(v["omega0"], f"{path}.omega0", True) if "omega0" in v else None,
        omega_reg=read_float(v["omega_reg"], f"{path}.omega_reg", True) if v.get("omega_reg") is not None else None,
    )
    try:
        bc.expansion()
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return bc


def _parse_pm(v: Any, path: str) -> PseudomodeParams:
    _keys(v, path, {"Omega", "Gamma", "N", "lambda_sq"}, {"cutoff"})
    try:
        return PseudomodeParams(read_complex(v["Omega"], f"{path}.Omega"), read_complex(v["Gamma"], f"{path}.Gamma"),
                                read_complex(v["N"], f"{path}.N"), read_complex(v["lambda_sq"], f"{path}.lambda_sq"),
                                read_int(v.get("cutoff", 2), f"{path}.cutoff", 2))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def pm_to_config(pm: PseudomodeParams) -> dict:
    return {"Omega": write_complex(pm.Omega), "Gamma": write_complex(pm.Gamma), "N": write_complex(pm.N),
            "lambda_sq": write_complex(pm.lambda_sq), "cutoff": pm.cutoff}


def parse_config(raw: dict) -> RunConfig:
    raw = copy.deepcopy(raw)
    _keys(raw, "config", {"schema", "model", "solver"}, {"name", "bath", "pseudomodes", "mc", "outputs"})
    if raw["schema"] != SCHEMA_VERSION:
        raise ConfigError(f"config.schema: unsupported version {raw['schema']!r} (expected {SCHEMA_VERSION})")
    name = raw.get("name", "run")
    if not isinstance(name, str):
        raise ConfigError("config.name: expected a string")

    m = _keys(raw["model"], "model", {"system_dim", "hamiltonian", "initial_state"},
              {"coupling", "system_channels"})
    d = read_int(m["system_dim"], "model.system_dim", 1)
    h = _keys(m["hamiltonian"], "model.hamiltonian", {"H0"}, {"drives"})
    H0 = read_matrix(h["H0"], "model.hamiltonian.H0", d)
    drives = []
    for i, dv in enumerate(h.get("drives", [])):
        p = f"model.hamiltonian.drives[{i}]"
        _keys(dv, p, {"operator", "schedule"})
        drives.append((read_matrix(dv["operator"], f"{p}.operator", d), _parse_schedule(dv["schedule"], f"{p}.schedule")))
    Q = read_matrix(m["coupling"], "model.coupling", d) if "coupling" in m else None
    rho_sys = read_state(m["initial_state"], "model.initial_state", d)
    chans = []
    for i, cv in enumerate(m.get("system_channels", [])):
        p = f"model.system_channels[{i}]"
        _keys(cv, p, {"rate", "operator"})
        chans.append((read_complex(cv["rate"], f"{p}.rate"), read_matrix(cv["operator"], f"{p}.operator", d)))

    bath = _parse_bath(raw["bath"], "bath") if "bath" in raw else None
    cutoffs = manual = terminator = None
    if "pseudomodes" in raw:
        pb = _keys(raw["pseudomodes"], "pseudomodes", set(), {"cutoffs", "manual", "terminator"})
        if "cutoffs" in pb:
            cv = pb["cutoffs"]
            if isinstance(cv, int) and not isinstance(cv, bool):
                cutoffs = read_int(cv, "pseudomodes.cutoffs", 2)
            elif isinstance(cv, list):
                cutoffs = [read_int(c, f"pseudomodes.cutoffs[{i}]", 2) for i, c in enumerate(cv)]
            else:
                raise ConfigError("pseudomodes.cutoffs: expected an integer or a list of integers")
        if "manual" in pb:
            manual = [_parse_pm(x, f"pseudomodes.manual[{i}]") for i, x in enumerate(pb["manual"])]
        if "terminator" in pb:
            tv = _keys(pb["terminator"], "pseudomodes.terminator", {"gamma_adv", "gamma_ret"})
            terminator = (read_complex(tv["gamma_adv"], "pseudomodes.terminator.gamma_adv"),
                          read_complex(tv["gamma_ret"], "pseudomodes.terminator.gamma_ret"))
    if (bath is not None or manual) and Q is None:
        raise ConfigError("model.coupling: required when a bath or pseudomodes are given")

    s = _keys(raw["solver"], "solver", {"t_final", "n_points"}, {"rtol", "atol"})
    solver = SolverConfig(read_float(s["t_final"], "solver.t_final", True), read_int(s["n_points"], "solver.n_points", 2),
                          read_float(s.get("rtol", 1e-8), "solver.rtol", True),
                          read_float(s.get("atol", 1e-10), "solver.atol", True))

    mc = None
    if "mc" in raw:
        mv = _keys(raw["mc"], "mc", {"n_traj", "seed"},
                   {"strategy", "method", "dt", "rtol", "atol", "chunk_size", "block_size", "t_final", "n_points",
                    "sweep", "delta"})
        strategy = mv.get("strategy", "optimal")
        if strategy not in ("optimal", "bkp", "norm_product"):
            raise ConfigError("mc.strategy: expected optimal, bkp or norm_product")
        method = mv.get("method", "gillespie")
        if method not in ("gillespie", "euler", "martingale"):
            raise ConfigError("mc.method: expected gillespie, euler or martingale")
        if method == "euler" and mv.get("dt") is None:
            raise ConfigError("mc.dt: required for the euler method")
        mc = MCConfig(
            read_int(mv["n_traj"], "mc.n_traj", 2), read_int(mv["seed"], "mc.seed", 0), strategy, method,
            read_float(mv["dt"], "mc.dt", True) if mv.get("dt") is not None else None,
            read_float(mv.get("rtol", 1e-6), "mc.rtol", True), read_float(mv.get("atol", 1e-9), "mc.atol", True),
            read_int(mv.get("chunk_size", 200), "mc.chunk_size", 1), read_int(mv.get("block_size", 100), "mc.block_size", 1),
            read_float(mv["t_final"], "mc.t_final", True) if "t_final" in mv else None,
            read_int(mv["n_points"], "mc.n_points", 2) if "n_points" in mv else None,
            [read_int(x, f"mc.sweep[{i}]", 2) for i, x in enumerate(mv.get("sweep", []))],
            read_float(mv.get("delta", 0.05), "mc.delta", True),
        )
        if mc.chunk_size % mc.block_size:
            raise ConfigError("mc.chunk_size: must be a multiple of mc.block_size")

    out = OutputConfig()
    if "outputs" in raw:
        ov = _keys(raw["outputs"], "outputs", set(),
                   {"observables", "heat_currents", "thermodynamics", "correlations", "final_state", "plots"})
        obs = {}
        for i, o in enumerate(ov.get("observables", [])):
            p = f"outputs.observables[{i}]"
            _keys(o, p, {"name", "operator"})
            if not isinstance(o["name"], str) or not o["name"].isidentifier():
                raise ConfigError(f"{p}.name: expected an identifier-like string")
            if o["name"] == "trace" or o["name"] in obs:
                raise ConfigError(f"{p}.name: duplicate or reserved name {o['name']!r}")
            obs[o["name"]] = read_matrix(o["operator"], f"{p}.operator", d)
        flags = {}
        for k in ("heat_currents", "thermodynamics", "correlations", "final_state", "plots"):
            if k in ov:
                if not isinstance(ov[k], bool):
                    raise ConfigError(f"outputs.{k}: expected true or false")
                flags[k] = ov[k]
        out = OutputConfig(obs, **flags)

    return RunConfig(name, d, H0, drives, Q, rho_sys, chans, bath, cutoffs, manual, terminator, solver, mc, out, raw)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    text = path.read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    try:
        return parse_config(raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def bundled_config_path(name: str) -> Path:
    """Path of a bundled example configuration (``ex1``, ``ex2``, ``toy``)."""
    ref = resources.files("pseudomodes") / "data" / f"{name}.json"
    return Path(str(ref))


def load_example(name: str) -> RunConfig:
    return load_config(bundled_config_path(name))
