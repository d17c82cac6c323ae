"""Run configuration: parsing of the sectioned key=value file format,
validation against the discretisation constraints, and canonical emission.

Sections are [problem], [discretization], [verify] and [output]; lines are
``key = value`` with ``#`` comments.  Unknown keys, type mismatches and
constraint violations report the offending line number.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

from .constitutive import ConstitutiveLaw
from .assembly import ProblemConfig
from .problems import FORCING_PRESETS, INITIAL_PRESETS


class ConfigError(Exception):
    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


_BOOLS = {"true": True, "false": False, "yes": True, "no": False,
          "1": True, "0": False}


@dataclass
class RunConfig:
    """User-facing configuration mirrored by CLI flags."""

    # [problem]
    law: str = "newtonian"
    p: float = 2.0
    K: float = 1.0
    Gamma: float = 1.0
    nu: float = 1.0
    tau_yield: float = 0.0
    law_a: float = 1.0
    law_b: float = 1.0
    law_c: float = 1.0
    law_q: float = -1.0
    law_eps: float = 1e-10
    forcing: str = "zero"
    initial: str = "zero"
    T: float = 1.0
    heat_mode: bool = False
    convection: bool = True
    allow_nonmonotone: bool = False
    # [discretization]
    nx: int = 2
    ny: int = 2
    pattern: str = "right-diagonal"
    mesh_file: str = ""
    k_u: int = 1
    k_pi: int = 1
    k_t: int = 1
    alpha: float = 10.0
    lifting_degree: int = -1          # -1 means the default k_u - 1
    gradient_mode: str = "ldg"
    stabilisation_mode: str = "standard"
    quadrature_mode: str = "gauss-radau"
    pressure_stab_boundary: bool = False
    n_tau: int = 4
    theta: float = 1.0
    quad_bump: int = 3
    newton_tol: float = 1e-10
    newton_max_iter: int = 25
    # [verify]
    levels: int = 3
    samples: int = 100
    seed: int = 1234
    vp: float = 2.0
    vq: float = 2.0
    vs: float = 4.0
    base_n: int = 2
    base_slabs: int = 4
    max_drift: float = 0.0            # 0 disables drift assertions
    # [output]
    directory: str = "out"


_SECTIONS = {
    "problem": ["law", "p", "K", "Gamma", "nu", "tau_yield", "law_a", "law_b",
                "law_c", "law_q", "law_eps", "forcing", "initial", "T",
                "heat_mode", "convection", "allow_nonmonotone"],
    "discretization": ["nx", "ny", "pattern", "mesh_file", "k_u", "k_pi",
                       "k_t", "alpha", "lifting_degree", "gradient_mode",
                       "stabilisation_mode", "quadrature_mode",
                       "pressure_stab_boundary", "n_tau", "theta", "quad_bump",
                       "newton_tol", "newton_max_iter"],
    "verify": ["levels", "samples", "seed", "vp", "vq", "vs", "base_n",
               "base_slabs", "max_drift"],
    "output": ["directory"],
}

_KEY_SECTION = {k: s for s, keys in _SECTIONS.items() for k in keys}
_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str, lineno=None):
    typ = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if typ == "bool":
            if raw.lower() not in _BOOLS:
                raise ValueError(f"expected boolean, got {raw!r}")
            return _BOOLS[raw.lower()]
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: {exc}", lineno) from None


def validate(cfg: RunConfig, lineno_of=None) -> RunConfig:
    """Apply the same constraints the solver enforces; cite the source line."""
    def loc(key):
        return None if lineno_of is None else lineno_of.get(key)

    if cfg.law not in ("newtonian", "power-law-explicit", "power-law-dual",
                       "bingham", "non-monotone"):
        raise ConfigError(f"unknown law {cfg.law!r}", loc("law"))
    if cfg.p <= 1.0:
        raise ConfigError("power-law index p must exceed 1", loc("p"))
    if cfg.k_u < 1:
        raise ConfigError("k_u must be at least 1", loc("k_u"))
    if cfg.k_pi > cfg.k_u:
        raise ConfigError(f"k_pi = {cfg.k_pi} with k_u = {cfg.k_u} violates "
                          f"the constraint k_pi <= k_u", loc("k_pi"))
    if cfg.k_t < 0:
        raise ConfigError("k_t must be nonnegative", loc("k_t"))
    if cfg.alpha <= 0:
        raise ConfigError("alpha must be positive", loc("alpha"))
    if cfg.pattern not in ("right-diagonal", "crisscross"):
        raise ConfigError(f"unknown pattern {cfg.pattern!r}", loc("pattern"))
    if cfg.gradient_mode not in ("ldg", "iidg"):
        raise ConfigError(f"unknown gradient mode {cfg.gradient_mode!r}",
                          loc("gradient_mode"))
    if cfg.stabilisation_mode not in ("standard", "sip"):
        raise ConfigError(f"unknown stabilisation mode "
                          f"{cfg.stabilisation_mode!r}", loc("stabilisation_mode"))
    if cfg.quadrature_mode not in ("gauss-radau", "exact-time"):
        raise ConfigError(f"unknown quadrature mode {cfg.quadrature_mode!r}",
                          loc("quadrature_mode"))
    if cfg.forcing not in FORCING_PRESETS:
        raise ConfigError(f"unknown forcing preset {cfg.forcing!r}; options: "
                          f"{sorted(FORCING_PRESETS)}", loc("forcing"))
    if cfg.initial not in INITIAL_PRESETS:
        raise ConfigError(f"unknown initial preset {cfg.initial!r}; options: "
                          f"{sorted(INITIAL_PRESETS)}", loc("initial"))
    if cfg.T <= 0:
        raise ConfigError("final time T must be positive", loc("T"))
    if cfg.n_tau < 1:
        raise ConfigError("n_tau must be at least 1", loc("n_tau"))
    if not (0.0 < cfg.theta <= 1.0):
        raise ConfigError("theta must lie in (0, 1]", loc("theta"))
    if cfg.nx < 1 or cfg.ny < 1:
        raise ConfigError("nx and ny must be positive", loc("nx"))
    if cfg.samples < 1:
        raise ConfigError("samples must be positive", loc("samples"))
    if cfg.levels < 1:
        raise ConfigError("levels must be positive", loc("levels"))
    return cfg


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    lineno_of = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        cut = raw.find("#")
        line = (raw[:cut] if cut >= 0 else raw).strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        key, _, raw_val = line.partition("=")
        key = key.strip()
        if section is None:
            raise ConfigError(f"key {key!r} outside any section", lineno)
        if key not in _SECTIONS[section]:
            raise ConfigError(f"unknown key {key!r} in section [{section}]",
                              lineno)
        setattr(cfg, key, _convert(key, raw_val, lineno))
        lineno_of[key] = lineno
    return validate(cfg, lineno_of)


def emit_config(cfg: RunConfig) -> str:
    out = []
    for section, keys in _SECTIONS.items():
        out.append(f"[{section}]")
        for key in keys:
            val = getattr(cfg, key)
            if isinstance(val, bool):
                val = "true" if val else "false"
            elif isinstance(val, float):
                val = f"{val:.17g}"
            out.append(f"{key} = {val}")
        out.append("")
    return "\n".join(out)


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(emit_config(cfg).encode()).hexdigest()[:12]


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    for key, raw in overrides.items():
        if key not in _KEY_SECTION:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _convert(key, raw))
    return validate(cfg)


def make_law(cfg: RunConfig) -> ConstitutiveLaw:
    return ConstitutiveLaw(kind=cfg.law, p=cfg.p, K=cfg.K, Gamma=cfg.Gamma,
                           nu=cfg.nu, tau=cfg.tau_yield, a=cfg.law_a,
                           b=cfg.law_b, c=cfg.law_c, q=cfg.law_q,
                           eps=cfg.law_eps)


def make_problem_config(cfg: RunConfig) -> ProblemConfig:
    return ProblemConfig(
        law=make_law(cfg), k_u=cfg.k_u, k_pi=cfg.k_pi, k_t=cfg.k_t,
        alpha=cfg.alpha, gradient_mode=cfg.gradient_mode,
        stabilisation_mode=cfg.stabilisation_mode,
        lifting_degree=None if cfg.lifting_degree < 0 else cfg.lifting_degree,
        quadrature_mode=cfg.quadrature_mode,
        pressure_stab_boundary=cfg.pressure_stab_boundary,
        forcing=FORCING_PRESETS[cfg.forcing],
        initial=INITIAL_PRESETS[cfg.initial],
        final_time=cfg.T, n_slabs=cfg.n_tau, newton_tol=cfg.newton_tol,
        newton_max_iter=cfg.newton_max_iter, quad_bump=cfg.quad_bump,
        heat_mode=cfg.heat_mode, convection=cfg.convection,
        allow_nonmonotone=cfg.allow_nonmonotone)


def make_mesh(cfg: RunConfig):
    from .mesh import build_structured_mesh, read_mesh
    if cfg.mesh_file:
        with open(cfg.mesh_file) as fh:
            return read_mesh(fh.read())
    return build_structured_mesh(cfg.nx, cfg.ny, cfg.pattern)


def make_grid(cfg: RunConfig):
    """Quasi-uniform partition: uniform for theta = 1, otherwise alternating
    steps with min/max ratio theta."""
    import numpy as np
    from .time_dg import TimeGrid
    if cfg.theta >= 1.0:
        return TimeGrid.uniform(cfg.T, cfg.n_tau)
    steps = np.array([1.0 if i % 2 == 0 else cfg.theta
                      for i in range(cfg.n_tau)])
    steps *= cfg.T / steps.sum()
    return TimeGrid(np.concatenate([[0.0], np.cumsum(steps)]))
