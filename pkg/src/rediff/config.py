"""Run configuration: ``[section]`` headers with ``key = value`` lines.

Values are resolved in the order defaults, config file, ``REDIFF_*``
environment variables, command-line flags.  Unknown sections or keys are
errors at every level.
"""
from __future__ import annotations

import configparser
import copy
import dataclasses
import hashlib
import io
import os

from .env import EnvSpec, SpecError

ENV_PREFIX = "REDIFF_"


class ConfigError(SpecError):
    pass


def _cpu_count() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def _env_schema():
    out = {}
    for f in dataclasses.fields(EnvSpec):
        t = f.type if isinstance(f.type, str) else f.type.__name__
        out[f.name] = (t, f.default)
    return out


# key -> (type, default); types: int, float, str, bool, floats, optfloat
SCHEMA = {
    "run": {
        "subcommand": ("str", "oned"),
        "mode": ("str", ""),
        "seed": ("int", 0),
        "workers": ("int", _cpu_count()),
    },
    "env": _env_schema(),
    "geometry": {
        "L": ("float", 5.0),
        "Ltilde": ("optfloat", None),
        "L0": ("float", 4.0),
        "x": ("floats", (0.0,)),
        "a_grid": ("floats", (0.25, 0.5, 1.0)),
        "L_list": ("floats", (5.0, 10.0, 15.0)),
        "b_back": ("float", 0.1),
        "N": ("int", 4),
        "levels": ("int", 3),
        "k_max": ("int", 0),
        "n_window": ("int", 100),
        "s": ("float", 0.6),
        "transverse_extent": ("float", 0.0),
    },
    "budgets": {
        "n_env": ("int", 30),
        "n_path": ("int", 200),
        "dt": ("optfloat", None),
        "max_time": ("optfloat", None),
        "quad_step": ("float", 1e-3),
        "horizon": ("float", 4000.0),
    },
    "constants": {
        "kappa": ("optfloat", None),
        "a": ("float", 0.5),
        "c3": ("float", 1.0),
        "c7": ("float", 1.0),
        "c12": ("float", 1.0),
        "c17": ("float", 1.0),
        "c20": ("float", 1.0),
        "tol": ("float", 1e-10),
        "alpha": ("float", 0.01),
    },
}

# keys that do not change any emitted number
_UNHASHED = {("run", "workers")}


def _parse(typ, text, where):
    text = text.strip()
    try:
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
        if typ == "optfloat":
            return None if text in ("", "none", "None") else float(text)
        if typ == "floats":
            return tuple(float(t) for t in text.replace(",", " ").split())
        if typ == "bool":
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
    except ValueError:
        raise ConfigError(f"cannot parse {where} = {text!r} as {typ}") from None
    return text


def _render(typ, value):
    if value is None:
        return ""
    if typ == "bool":
        return "true" if value else "false"
    if typ == "float" or typ == "optfloat":
        return repr(float(value))
    if typ == "floats":
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


class RunConfig:
    """Resolved configuration, one dict per section."""

    def __init__(self, values: dict | None = None):
        self.values = {s: {k: v[1] for k, v in keys.items()} for s, keys in SCHEMA.items()}
        for sec, items in (values or {}).items():
            for k, v in items.items():
                self.set(sec, k, v)

    def __getitem__(self, section):
        return self.values[section]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def copy(self) -> "RunConfig":
        return copy.deepcopy(self)

    def _lookup(self, section, key):
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        return SCHEMA[section][key][0]

    def set(self, section, key, value):
        typ = self._lookup(section, key)
        if isinstance(value, str):
            value = _parse(typ, value, f"{section}.{key}")
        elif typ == "floats":
            value = tuple(float(v) for v in value)
        self.values[section][key] = value

    def set_text(self, assignment: str):
        """Apply ``section.key=value``."""
        if "=" not in assignment or "." not in assignment.split("=", 1)[0]:
            raise ConfigError(f"expected section.key=value, got {assignment!r}")
        lhs, rhs = assignment.split("=", 1)
        sec, key = lhs.strip().split(".", 1)
        self.set(sec, key, rhs)

    def render(self, hashed_only: bool = False) -> str:
        lines = []
        for sec, keys in SCHEMA.items():
            lines.append(f"[{sec}]")
            for k, (typ, _) in keys.items():
                if hashed_only and (sec, k) in _UNHASHED:
                    continue
                lines.append(f"{k} = {_render(typ, self.values[sec][k])}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.render(hashed_only=True).encode()).hexdigest()[:16]

    def env_spec(self) -> EnvSpec:
        return EnvSpec(**self.values["env"])

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None, strict=True,
                                       inline_comment_prefixes=("#",), default_section="\0")
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        cfg = cls()
        for sec in cp.sections():
            for k, v in cp.items(sec):
                cfg.set(sec, k, v)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def apply_environ(self, environ=None):
        """Apply ``REDIFF_<SECTION>_<KEY>`` overrides (key matched case-insensitively)."""
        environ = os.environ if environ is None else environ
        for name, value in sorted(environ.items()):
            if not name.startswith(ENV_PREFIX):
                continue
            rest = name[len(ENV_PREFIX):]
            sec, _, key = rest.partition("_")
            sec = sec.lower()
            if sec not in SCHEMA:
                raise ConfigError(f"{name}: unknown section {sec!r}")
            match = [k for k in SCHEMA[sec] if k.lower() == key.lower()]
            if not match:
                raise ConfigError(f"{name}: unknown key {key!r} in [{sec}]")
            self.set(sec, match[0], value)
        return self


def schema_text() -> str:
    """Every key with its type and default, as a commented config file."""
    buf = io.StringIO()
    for sec, keys in SCHEMA.items():
        buf.write(f"[{sec}]\n")
        for k, (typ, default) in keys.items():
            buf.write(f"# {typ}\n{k} = {_render(typ, default)}\n")
        buf.write("\n")
    return buf.getvalue()
