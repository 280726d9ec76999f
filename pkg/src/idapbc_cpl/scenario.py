"""Scenario files: a TOML description of one experiment.

A scenario bundles circuit constants, the controller and estimator settings,
the event schedule, the simulator configuration and optional sweep lists::

    name = "boost_step"

    [converter]
    L = 216.8e-6
    C = 1380e-6
    E = 15.0

    [controller]
    kind = "ida-pbc"      # or "pi"
    k1 = 0.1

    [estimator]
    gamma = 20.0

    [schedule]
    P = [[0.0, 20.0], [1.0, 30.0]]
    x2_star = [[0.0, 25.0]]

    [sim]
    mode = "averaged"
    t_end = 2.0

Only ``name``, ``converter``, ``schedule.P`` and ``schedule.x2_star`` are
required; everything else has defaults (see :class:`Scenario`).
"""
from __future__ import annotations

import dataclasses
import re
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .model import ConverterParams, ModelDomainError, PiecewiseConstant, PowerSchedule, State
from .sim import EventSchedule, SimConfig

BUNDLED = ("fig2_gain_sweep", "fig4_phase", "fig4_phase_example_design", "fig5_pi",
           "fig7_boost_step", "fig8_buck_step", "fig9_line_reg", "fig10_load_reg")

_SWEEP_KEYS = ("k1", "gamma", "x2_0", "E", "P", "x2_star", "modes")
_SECTIONS = {
    "converter": ("L", "C", "E"),
    "controller": ("kind", "k1", "safety_margin", "kp", "ki"),
    "estimator": ("gamma", "initial_error", "bypass"),
    "schedule": ("P", "x2_star", "E"),
    "sim": tuple(f.name for f in dataclasses.fields(SimConfig)),
    "initial": ("x1", "x2"),
    "sweep": _SWEEP_KEYS,
}
_TOP = ("name", "description", "seed")


class ScenarioError(ValueError):
    """Malformed scenario; ``field`` and ``line`` locate the problem when known."""

    def __init__(self, message, field=None, line=None, source=None):
        where = []
        if source:
            where.append(str(source))
        if line:
            where.append(f"line {line}")
        if field:
            where.append(f"field '{field}'")
        prefix = ", ".join(where) + ": " if where else ""
        super().__init__(prefix + message)
        self.detail = message
        self.field = field
        self.line = line


@dataclass(frozen=True)
class Scenario:
    """One experiment definition.

    Parameters
    ----------
    controller
        ``"ida-pbc"`` or ``"pi"``.
    k1, safety_margin
        Gain-synthesis request for IDA-PBC; ``k1`` must already clear the
        certified bound times ``safety_margin`` at every operating point.
    P_hat_error
        Initial estimate minus true initial load power [W].
    estimator_bypass
        Feed the true ``P`` to the duty law (known-load controller).
    x0
        Initial plant state; defaults to the equilibrium of the first
        operating point.
    sweep
        Lists consumed by the sweep commands (keys: k1, gamma, x2_0, E, P,
        x2_star, modes).
    """

    name: str
    params: ConverterParams
    schedule: EventSchedule
    sim: SimConfig = field(default_factory=SimConfig)
    controller: str = "ida-pbc"
    k1: float = 0.1
    safety_margin: float = 1.0
    kp: float = 0.002
    ki: float = 0.001
    gamma: float = 20.0
    P_hat_error: float = 0.0
    estimator_bypass: bool = False
    x0: State | None = None
    sweep: dict = field(default_factory=dict)
    description: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.controller not in ("ida-pbc", "pi"):
            raise ScenarioError(f"unknown controller {self.controller!r}", "controller.kind")
        if not self.k1 > 0:
            raise ScenarioError("k1 must be positive", "controller.k1")
        if self.safety_margin < 1:
            raise ScenarioError("safety_margin must be >= 1", "controller.safety_margin")
        if self.kp < 0 or self.ki < 0:
            raise ScenarioError("PI gains must be non-negative", "controller.kp")
        if not self.gamma > 0:
            raise ScenarioError("gamma must be positive", "estimator.gamma")
        if self.x0 is not None and not self.x0.is_positive:
            raise ScenarioError("initial state must be positive", "initial")

    # convenience ------------------------------------------------------------
    def replace(self, **kw) -> "Scenario":
        return dataclasses.replace(self, **kw)

    def replace_sim(self, **kw) -> "Scenario":
        return dataclasses.replace(self, sim=dataclasses.replace(self.sim, **kw))

    # serialization ------------------------------------------------------------
    def to_dict(self) -> dict:
        d = {"name": self.name}
        if self.description:
            d["description"] = self.description
        d["seed"] = self.seed
        d["converter"] = {"L": self.params.L, "C": self.params.C, "E": self.params.E}
        d["controller"] = {"kind": self.controller, "k1": self.k1,
                           "safety_margin": self.safety_margin, "kp": self.kp, "ki": self.ki}
        d["estimator"] = {"gamma": self.gamma, "initial_error": self.P_hat_error,
                          "bypass": self.estimator_bypass}
        sch = {"P": [list(b) for b in self.schedule.P.breakpoints],
               "x2_star": [list(b) for b in self.schedule.x2_star.breakpoints]}
        if self.schedule.E is not None:
            sch["E"] = [list(b) for b in self.schedule.E.breakpoints]
        d["schedule"] = sch
        d["sim"] = {k: v for k, v in dataclasses.asdict(self.sim).items() if v is not None}
        if self.x0 is not None:
            d["initial"] = {"x1": self.x0.x1, "x2": self.x0.x2}
        if self.sweep:
            d["sweep"] = {k: list(v) for k, v in self.sweep.items()}
        return d

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


def _key_line(text: str, section: str | None, key: str) -> int | None:
    """Best-effort line number of ``key`` inside ``[section]``."""
    current = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.match(r"^\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            continue
        if current == section and re.match(rf"^{re.escape(key)}\s*=", line):
            return n
    return None


def _timeline(value, cls, fieldname):
    try:
        return cls(value)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"invalid timeline ({exc}); expected [[t, value], ...]", fieldname) from None


def from_dict(d: dict, text: str = "", source=None) -> Scenario:
    """Build a :class:`Scenario` from parsed TOML, with field-level diagnostics."""

    def err(msg, section, key=None):
        fieldname = f"{section}.{key}" if (section and key) else (section or key)
        line = _key_line(text, section, key) if key else None
        return ScenarioError(msg, fieldname, line, source)

    for k, v in d.items():
        if k in _SECTIONS:
            if not isinstance(v, dict):
                raise err("expected a table", None, k)
            for kk in v:
                if kk not in _SECTIONS[k]:
                    raise err(f"unknown key (allowed: {', '.join(_SECTIONS[k])})", k, kk)
        elif k not in _TOP:
            raise err("unknown top-level key", None, k)

    def get(section, key, default=dataclasses.MISSING, kind=float):
        tbl = d.get(section, {}) if section else d
        if key not in tbl:
            if default is dataclasses.MISSING:
                raise err("missing required field", section, key)
            return default
        v = tbl[key]
        if kind is float:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise err(f"expected a number, got {v!r}", section, key)
            return float(v)
        if not isinstance(v, kind):
            raise err(f"expected {kind.__name__}, got {v!r}", section, key)
        return v

    name = get(None, "name", kind=str)
    try:
        params = ConverterParams(get("converter", "L"), get("converter", "C"), get("converter", "E"))
    except ModelDomainError as exc:
        raise err(str(exc), "converter") from None

    sch = d.get("schedule", {})
    if "P" not in sch:
        raise err("missing required field", "schedule", "P")
    if "x2_star" not in sch:
        raise err("missing required field", "schedule", "x2_star")
    try:
        schedule = EventSchedule(
            P=_timeline(sch["P"], PowerSchedule, "schedule.P"),
            x2_star=_timeline(sch["x2_star"], PiecewiseConstant, "schedule.x2_star"),
            E=_timeline(sch["E"], PiecewiseConstant, "schedule.E") if "E" in sch else None,
        )
    except ScenarioError as exc:
        sec, key = exc.field.split(".")
        raise err(exc.detail, sec, key) from None

    sim_kw = {}
    for key, v in d.get("sim", {}).items():
        if key == "mode":
            sim_kw[key] = get("sim", key, kind=str)
        else:
            sim_kw[key] = get("sim", key)
    try:
        sim = SimConfig(**sim_kw)
    except ValueError as exc:
        raise err(str(exc), "sim") from None

    x0 = None
    if "initial" in d:
        x0 = State(get("initial", "x1"), get("initial", "x2"))

    sweep = {}
    for key, v in d.get("sweep", {}).items():
        if not isinstance(v, list) or not v:
            raise err("expected a non-empty list", "sweep", key)
        if key == "modes":
            if any(m not in ("averaged", "switched") for m in v):
                raise err("modes must be 'averaged' or 'switched'", "sweep", key)
            sweep[key] = [str(m) for m in v]
        else:
            if any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in v):
                raise err("expected a list of numbers", "sweep", key)
            sweep[key] = [float(x) for x in v]

    seed = d.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise err("expected an integer", None, "seed")

    try:
        return Scenario(
            name=name,
            description=get(None, "description", "", kind=str),
            seed=seed,
            params=params,
            schedule=schedule,
            sim=sim,
            controller=get("controller", "kind", "ida-pbc", kind=str),
            k1=get("controller", "k1", 0.1),
            safety_margin=get("controller", "safety_margin", 1.0),
            kp=get("controller", "kp", 0.002),
            ki=get("controller", "ki", 0.001),
            gamma=get("estimator", "gamma", 20.0),
            P_hat_error=get("estimator", "initial_error", 0.0),
            estimator_bypass=get("estimator", "bypass", False, kind=bool),
            x0=x0,
            sweep=sweep,
        )
    except ScenarioError as exc:
        if exc.field and "." in exc.field:
            sec, key = exc.field.split(".", 1)
            raise err(exc.detail, sec, key) from None
        raise


def loads(text: str, source=None) -> Scenario:
    try:
        d = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ScenarioError(f"TOML syntax error: {exc}", line=int(m.group(1)) if m else None,
                            source=source) from None
    return from_dict(d, text, source)


def load(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file: {exc.strerror}", source=path) from None
    return loads(text, source=path)


def bundled_path(name: str):
    return resources.files("idapbc_cpl") / "scenarios" / f"{name}.toml"


def load_bundled(name: str) -> Scenario:
    """Load one of the scenarios shipped with the package (see :data:`BUNDLED`)."""
    if name not in BUNDLED:
        raise ScenarioError(f"unknown bundled scenario {name!r}; choose from {', '.join(BUNDLED)}")
    ref = bundled_path(name)
    return loads(ref.read_text(), source=name)


def resolve(spec: str) -> Scenario:
    """Load a scenario from a path, or by bundled name."""
    if spec in BUNDLED and not Path(spec).exists():
        return load_bundled(spec)
    return load(spec)
