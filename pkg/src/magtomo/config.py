"""Experiment configuration: YAML with expression strings, validated with positions.

Every error raised while reading a file carries the line and column of the
offending node so the CLI can point at it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from functools import cached_property

import yaml

from .expr import ExpressionError, as_matrix, parse
from .fields import AttenuationPair, SMFunction
from .geometry import MagneticSystem, Surface

SCHEMA_VERSION = 1
DEFAULT_DT = 1e-3
DEFAULT_GRID = (129, 129, 64)
DEFAULT_FAN = 128
VERIFY_SUITES = ("structure", "commutator", "energy", "hilbert", "parts", "lemma52", "lemma54", "intfactor")
PROBE_SUITES = ("kernel", "gauge", "tensor", "degree", "nullspace")

_SCHEMA = {
    "schema_version": None,
    "surface": {"phi": None, "description": None},
    "magnetic": {"lambda": None, "max_flow_time": None},
    "attenuation": {"n": None, "A_x": None, "A_y": None, "Phi": None},
    "numerics": {"dt": None, "grid": None, "fan_size": None, "seed": None},
    "integrand": None,
    "suites": None,
}


class ConfigParseError(ValueError):
    def __init__(self, message, line=None, column=None, path=None):
        self.line, self.column, self.path = line, column, path
        where = ""
        if line is not None:
            where = f"{path or '<config>'}:{line}:{column}: "
        super().__init__(where + message)


def _err(node, message, path=None):
    mark = getattr(node, "start_mark", None)
    if mark is None:
        return ConfigParseError(message, path=path)
    return ConfigParseError(message, mark.line + 1, mark.column + 1, path)


def _to_python(node, schema, path, trail=""):
    """Convert a composed YAML node to python objects, rejecting unknown keys."""
    if isinstance(node, yaml.MappingNode):
        out, marks = {}, {}
        for key_node, value_node in node.value:
            key = key_node.value
            if isinstance(schema, dict):
                if key not in schema:
                    raise _err(key_node, f"unknown key {trail + key!r}", path)
                sub = schema[key]
            else:
                sub = None
            if key in out:
                raise _err(key_node, f"duplicate key {trail + key!r}", path)
            out[key], marks[key] = _to_python(value_node, sub, path, trail + key + ".")
        return out, (node, marks)
    if isinstance(schema, dict):
        raise _err(node, f"{trail.rstrip('.') or 'config'} must be a mapping", path)
    if isinstance(node, yaml.SequenceNode):
        items = [_to_python(v, None, path, trail) for v in node.value]
        return [i[0] for i in items], (node, [i[1] for i in items])
    value = yaml.safe_load(yaml.serialize(node)) if node.tag != "tag:yaml.org,2002:str" else node.value
    return value, (node, None)


def _node(marks, *keys):
    cur = marks
    for k in keys:
        node, sub = cur
        if isinstance(sub, dict) and k in sub:
            cur = sub[k]
        elif isinstance(sub, list) and isinstance(k, int) and k < len(sub):
            cur = sub[k]
        else:
            return node
    return cur[0]


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    phi: str = "0"
    description: str = ""
    lam: str = "0"
    max_flow_time: float = 50.0
    n: int = 1
    A_x: list = None
    A_y: list = None
    Phi: list = None
    dt: float = DEFAULT_DT
    grid: tuple = DEFAULT_GRID
    fan_size: int = DEFAULT_FAN
    seed: int = 0
    integrand: list = field(default_factory=lambda: ["1"])
    suites: list = field(default_factory=list)

    def __post_init__(self):
        zero = [["0"] * self.n for _ in range(self.n)]
        for name in ("A_x", "A_y", "Phi"):
            if getattr(self, name) is None:
                setattr(self, name, [row[:] for row in zero])

    # --- derived objects ---
    @cached_property
    def surface(self) -> Surface:
        return Surface(parse(self.phi), self.description)

    @cached_property
    def system(self) -> MagneticSystem:
        return MagneticSystem(self.surface, parse(self.lam), self.max_flow_time)

    @cached_property
    def pair(self) -> AttenuationPair:
        return AttenuationPair(as_matrix(self.A_x), as_matrix(self.A_y), as_matrix(self.Phi))

    @cached_property
    def integrand_function(self) -> SMFunction:
        return SMFunction([parse(c, allow_theta=True) for c in self.integrand])

    def canonical(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "surface": {"phi": str(self.phi), "description": self.description},
            "magnetic": {"lambda": str(self.lam), "max_flow_time": self.max_flow_time},
            "attenuation": {"n": self.n, "A_x": self.A_x, "A_y": self.A_y, "Phi": self.Phi},
            "numerics": {"dt": self.dt, "grid": list(self.grid), "fan_size": self.fan_size,
                         "seed": self.seed},
            "integrand": list(self.integrand),
            "suites": list(self.suites),
        }

    @property
    def config_hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def with_overrides(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self


def _number(value, node, path, kind=float, positive=False):
    try:
        if isinstance(value, bool):
            raise ValueError
        out = kind(float(value)) if kind is int else kind(value)
        if kind is int and float(value) != out:
            raise ValueError
    except (TypeError, ValueError):
        raise _err(node, f"expected a {kind.__name__}, got {value!r}", path) from None
    if positive and not out > 0:
        raise _err(node, f"expected a positive value, got {value!r}", path)
    return out


def _expr_text(value, node, path, allow_theta=False):
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        value = repr(value)
    if not isinstance(value, str):
        raise _err(node, f"expected an expression string, got {value!r}", path)
    try:
        parse(value, allow_theta=allow_theta)
    except ExpressionError as exc:
        raise _err(node, str(exc), path) from None
    return value


def _matrix(value, marks, keys, n, path):
    node = _node(marks, *keys)
    if not isinstance(value, list) or len(value) != n or any(
            not isinstance(r, list) or len(r) != n for r in value):
        raise _err(node, f"{'.'.join(keys)} must be an {n}x{n} list of expression strings", path)
    return [[_expr_text(v, _node(marks, *keys, i, j), path) for j, v in enumerate(row)]
            for i, row in enumerate(value)]


def parse_config(text: str, path: str | None = None) -> ExperimentConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            raise ConfigParseError(f"YAML syntax error: {exc.problem}", mark.line + 1,
                                   mark.column + 1, path) from None
        raise ConfigParseError(f"YAML syntax error: {exc}", path=path) from None
    if root is None:
        raw, marks = {}, (None, {})
    else:
        raw, marks = _to_python(root, _SCHEMA, path)
    cfg = {}
    if "schema_version" in raw:
        v = _number(raw["schema_version"], _node(marks, "schema_version"), path, int)
        if v != SCHEMA_VERSION:
            raise _err(_node(marks, "schema_version"),
                       f"unsupported schema_version {v} (expected {SCHEMA_VERSION})", path)
        cfg["schema_version"] = v
    surf = raw.get("surface", {})
    if "phi" in surf:
        cfg["phi"] = _expr_text(surf["phi"], _node(marks, "surface", "phi"), path)
    if "description" in surf:
        cfg["description"] = str(surf["description"])
    mag = raw.get("magnetic", {})
    if "lambda" in mag:
        cfg["lam"] = _expr_text(mag["lambda"], _node(marks, "magnetic", "lambda"), path)
    if "max_flow_time" in mag:
        cfg["max_flow_time"] = _number(mag["max_flow_time"], _node(marks, "magnetic", "max_flow_time"),
                                       path, positive=True)
    att = raw.get("attenuation", {})
    n = 1
    if "n" in att:
        n = _number(att["n"], _node(marks, "attenuation", "n"), path, int)
        if n not in (1, 2, 3):
            raise _err(_node(marks, "attenuation", "n"), "rank n must be 1, 2 or 3", path)
    cfg["n"] = n
    for name in ("A_x", "A_y", "Phi"):
        if name in att:
            cfg[name] = _matrix(att[name], marks, ("attenuation", name), n, path)
    num = raw.get("numerics", {})
    if "dt" in num:
        cfg["dt"] = _number(num["dt"], _node(marks, "numerics", "dt"), path, positive=True)
    if "grid" in num:
        g = num["grid"]
        node = _node(marks, "numerics", "grid")
        if not isinstance(g, list) or len(g) != 3:
            raise _err(node, "grid must be [NX, NY, NTHETA]", path)
        cfg["grid"] = tuple(_number(v, _node(marks, "numerics", "grid", i), path, int, True)
                            for i, v in enumerate(g))
    if "fan_size" in num:
        cfg["fan_size"] = _number(num["fan_size"], _node(marks, "numerics", "fan_size"), path, int, True)
    if "seed" in num:
        cfg["seed"] = _number(num["seed"], _node(marks, "numerics", "seed"), path, int)
    if "integrand" in raw:
        items = raw["integrand"]
        items = items if isinstance(items, list) else [items]
        cfg["integrand"] = [_expr_text(v, _node(marks, "integrand", i) if isinstance(raw["integrand"], list)
                                       else _node(marks, "integrand"), path, allow_theta=True)
                            for i, v in enumerate(items)]
    if "suites" in raw:
        s = raw["suites"]
        s = s if isinstance(s, list) else [s]
        known = VERIFY_SUITES + PROBE_SUITES
        for i, name in enumerate(s):
            if name not in known:
                raise _err(_node(marks, "suites", i) if isinstance(raw["suites"], list)
                           else _node(marks, "suites"), f"unknown suite {name!r}", path)
        cfg["suites"] = list(s)
    out = ExperimentConfig(**cfg)
    if len(out.integrand) not in (1, out.n):
        raise _err(_node(marks, "integrand"), f"integrand needs 1 or {out.n} components", path)
    return out


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text, str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.canonical(), sort_keys=False)

