"""Flat ``key = value`` experiment configuration.

Grammar: one ``key = value`` pair per line; ``#`` starts a comment; blank
lines are ignored; keys are lower-case identifiers; list values are comma
separated. Unknown keys and malformed values raise
:class:`~symbranch.core.ConfigurationError`.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from .core import ConfigurationError

KINDS = ("critical-curve", "exit-dist", "nonspatial-moments", "lattice-moments", "dual-moments",
         "self-duality", "lyapunov", "interface-speed")

_KEY = re.compile(r"^[a-z_][a-z0-9_]*$")


def _float(s):
    try:
        x = float(s)
    except ValueError:
        raise ConfigurationError(f"not a number: {s!r}") from None
    if math.isnan(x):
        raise ConfigurationError("NaN is not a valid value")
    return x


def _int(s):
    try:
        return int(s)
    except ValueError:
        raise ConfigurationError(f"not an integer: {s!r}") from None


def _bool(s):
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {s!r}")


def _floats(s):
    parts = [p.strip() for p in s.split(",") if p.strip()]
    if not parts:
        raise ConfigurationError("empty list")
    return tuple(_float(p) for p in parts)


def _str(s):
    return s.strip()


# key -> (parser, default). A default of None means "per-kind default".
SCHEMA = {
    "kind": (_str, None),
    "seed": (_int, 0),
    "out": (_str, "out"),
    "replicas": (_int, None),
    "rho": (_float, 0.0),
    "kappa": (_float, 1.0),
    "rhos": (_floats, None),
    "kappas": (_floats, None),
    "d": (_int, 1),
    "side": (_int, None),
    "mode": (_str, "discrete"),
    "h": (_float, 1.0),
    "t": (_float, 1.0),
    "times": (_floats, None),
    "dt": (_float, None),
    "u0": (_float, 1.0),
    "v0": (_float, 1.0),
    "n": (_int, 2),
    "m": (_int, 0),
    "estimator": (_str, "gillespie"),
    "flip_rule": (_str, "uniform"),
    "scheme": (_str, None),
    "threshold": (_float, 1e-12),
    "window": (_float, 0.5),
    "decay_bounds": (_floats, None),
    "tol_z": (_float, 3.0),
    "tol_ks": (_float, 0.02),
    "tol_rel": (_float, 0.02),
    "svg": (_bool, False),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment settings; ``values`` maps every schema key to its value."""

    values: dict = field(default_factory=dict)

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    @property
    def kind(self) -> str:
        return self.values["kind"]

    def canonical(self) -> str:
        """Sorted ``key=value`` lines over every key; the hash input."""
        lines = []
        for k in sorted(self.values):
            v = self.values[k]
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def as_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.values.items())}

    def with_overrides(self, **kw) -> "ExperimentConfig":
        raw = dict(self.values)
        raw.update({k: v for k, v in kw.items() if v is not None})
        return build_config(raw, parsed=True)


def parse_config_text(text: str) -> dict:
    """Parse the flat grammar into a dict of raw string values."""
    out = {}
    for no, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigurationError(f"line {no}: expected 'key = value'")
        key, val = (s.strip() for s in body.split("=", 1))
        key = key.lower()
        if not _KEY.match(key):
            raise ConfigurationError(f"line {no}: bad key {key!r}")
        if key in out:
            raise ConfigurationError(f"line {no}: duplicate key {key!r}")
        if not val:
            raise ConfigurationError(f"line {no}: empty value for {key!r}")
        out[key] = val
    return out


def _validate(v: dict):
    kind = v["kind"]
    if kind not in KINDS:
        raise ConfigurationError(f"unknown experiment kind {kind!r}; expected one of {KINDS}")
    if not -1.0 <= v["rho"] <= 1.0:
        raise ConfigurationError("rho must lie in [-1, 1]")
    if not v["kappa"] > 0:
        raise ConfigurationError("kappa must be positive")
    for key in ("rhos",):
        if v[key] is not None and any(not -1.0 <= r <= 1.0 for r in v[key]):
            raise ConfigurationError("every entry of rhos must lie in [-1, 1]")
    if v["kappas"] is not None and any(k <= 0 for k in v["kappas"]):
        raise ConfigurationError("every entry of kappas must be positive")
    if v["seed"] < 0:
        raise ConfigurationError("seed must be nonnegative")
    if v["replicas"] is not None and v["replicas"] < 1:
        raise ConfigurationError("replicas must be >= 1")
    if v["d"] not in (1, 2, 3):
        raise ConfigurationError("d must be 1, 2 or 3")
    if v["side"] is not None and v["side"] < 1:
        raise ConfigurationError("side must be positive")
    if v["mode"] not in ("discrete", "continuum"):
        raise ConfigurationError("mode must be 'discrete' or 'continuum'")
    if not v["h"] > 0:
        raise ConfigurationError("h must be positive")
    if v["t"] < 0:
        raise ConfigurationError("t must be nonnegative")
    if v["times"] is not None:
        ts = v["times"]
        if any(t < 0 for t in ts) or any(b < a for a, b in zip(ts, ts[1:])):
            raise ConfigurationError("times must be nonnegative and sorted")
    if v["dt"] is not None and not v["dt"] > 0:
        raise ConfigurationError("dt must be positive")
    if v["n"] < 0 or v["m"] < 0:
        raise ConfigurationError("moment orders must be nonnegative")
    if v["estimator"] not in ("gillespie", "conditional"):
        raise ConfigurationError("estimator must be 'gillespie' or 'conditional'")
    if v["flip_rule"] not in ("uniform", "first"):
        raise ConfigurationError("flip_rule must be 'uniform' or 'first'")
    if v["scheme"] is not None and v["scheme"] not in ("euler", "feller"):
        raise ConfigurationError("scheme must be 'euler' or 'feller'")
    if not 0 < v["window"] <= 1:
        raise ConfigurationError("window must lie in (0, 1]")
    if v["decay_bounds"] is not None and len(v["decay_bounds"]) != 2:
        raise ConfigurationError("decay_bounds takes two numbers: low, high")
    if not v["threshold"] >= 0:
        raise ConfigurationError("threshold must be nonnegative")
    for key in ("tol_z", "tol_ks", "tol_rel"):
        if not v[key] > 0:
            raise ConfigurationError(f"{key} must be positive")
    if kind in ("exit-dist",) and not (v["u0"] > 0 and v["v0"] > 0):
        raise ConfigurationError("exit-dist needs a start strictly inside the quadrant")


def build_config(raw: dict, parsed: bool = False) -> ExperimentConfig:
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    if "kind" not in raw:
        raise ConfigurationError("config needs a 'kind'")
    vals = {}
    for key, (parse, default) in SCHEMA.items():
        if key in raw:
            val = raw[key]
            vals[key] = val if parsed and not isinstance(val, str) else parse(str(val) if not isinstance(val, str) else val)
        else:
            vals[key] = default
    _validate(vals)
    return ExperimentConfig(vals)


def load_config(path=None, text: str | None = None, **overrides) -> ExperimentConfig:
    """Read a config file (or text) and apply overrides (``None`` values are ignored)."""
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    if text is not None:
        raw = parse_config_text(text)
    for k, v in overrides.items():
        if v is not None:
            raw[k] = v if isinstance(v, str) else json.dumps(v) if isinstance(v, bool) else str(v)
    return build_config(raw)
