"""Experiment configuration: INI-style sections with typed, validated keys.

Numbers may be written as rationals (``3/2``) or quadratic surds
(``1+sqrt(2)``) wherever an exact value is expected.  Every key is checked
against a schema before anything is computed; unknown sections or keys raise
:class:`ConfigError`.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .errors import ConfigError
from .frequencies import (BeamModel, FrequencyModel, NLSModel, PlaneWaveModel, Potential,
                          QHDModel, sample_potential)
from .lattice import Metric, QuadScalar, parse_quad

TASKS = ("resonance-scan", "cluster-build", "normal-form", "simulate", "plane-wave",
         "measure-mc", "tame-check")
MODEL_KINDS = ("nls", "beam", "qhd", "planewave")


# ---------------------------------------------------------------------------
# value parsers


def parse_rational(text: str) -> Fraction:
    try:
        return Fraction(text.strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ValueError(f"not a rational number: {text!r}") from exc


def _float(text):
    return float(parse_rational(text))


def _int(text):
    v = parse_rational(text)
    if v.denominator != 1:
        raise ValueError(f"not an integer: {text!r}")
    return int(v)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(item):
    def parse(text):
        parts = [p for p in text.replace(";", ",").split(",") if p.strip()]
        return [item(p) for p in parts]
    return parse


def _choice(*options):
    def parse(text):
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {t!r}")
        return t
    return parse


def parse_metric(text: str) -> Metric:
    """Rows separated by ``;``, entries by ``,``: ``"1, 0; 0, sqrt(2)"``."""
    rows = [[parse_quad(x) for x in row.split(",")] for row in text.split(";") if row.strip()]
    return Metric(rows)


_str = str.strip

# (parser, default); default None means optional, REQUIRED must be given
REQUIRED = object()

SCHEMA: dict[str, dict[str, tuple]] = {
    "session": {
        "d": (_int, 2),
        "D": (_int, 0),
        "N": (_int, REQUIRED),
        "M": (_int, 8),
        "slist": (_list(_float), [0.0, 1.0]),
        "seed": (_int, 0),
        "threads": (_int, 1),
        "out": (_str, None),
    },
    "model": {
        "kind": (_choice(*MODEL_KINDS), REQUIRED),
        "metric": (parse_metric, None),
        "potential": (_choice("none", "sampled"), "none"),
        "potential_n": (_int, 2),
        "potential_N": (_int, None),
        "potential_seed": (_int, None),
        "beta": (parse_quad, QuadScalar(1)),
        "m": (parse_quad, QuadScalar(1)),
        "hbar": (parse_quad, QuadScalar(1)),
        "pprime": (parse_quad, QuadScalar(1)),
        "a": (parse_quad, QuadScalar(1)),
        "fprime": (parse_quad, QuadScalar(0)),
        "truncation": (_int, None),
        "K": (_float, None),
        "fcoeffs": (_list(_float), None),
    },
    "resonance-scan": {
        "r": (_int, 3),
        "engine": (_choice("auto", "lattice", "enumerate"), "auto"),
        "budget": (_int, 2 * 10 ** 8),
        "nr2": (_bool, True),
    },
    "cluster-build": {
        "C0": (_float, 1.0),
        "delta": (_float, 0.3),
        "C1_origin": (_float, 4.0),
        "C2_max": (_float, 4.0),
        "C3_min": (_float, None),
        "check_separation": (_bool, True),
    },
    "normal-form": {
        "rbar": (_int, 5),
        "N_nf": (_float, None),
        "R": (_float, 0.01),
        "tol_div": (_float, None),
        "mu_max": (_float, None),
        "C0": (_float, 1.0),
        "delta": (_float, 0.3),
    },
    "simulate": {
        "dt": (_float, 0.01),
        "steps": (_int, 1000),
        "sample_every": (_int, 100),
        "epsilon": (_float, 1e-2),
        "support": (_int, 2),
        "decay": (_float, 2.0),
        "escape_factor": (_float, None),
        "s_escape": (_float, 1.0),
        "classes": (_bool, True),
    },
    "plane-wave": {
        "mvec": (_list(_int), REQUIRED),
        "dt": (_float, 0.01),
        "steps": (_int, 1000),
        "sample_every": (_int, 100),
        "epsilon": (_float, 1e-2),
        "support": (_int, 2),
        "decay": (_float, 2.0),
        "l2_tol": (_float, 0.1),
    },
    "measure-mc": {
        "r": (_int, 3),
        "trials": (_int, 500),
        "gammas": (_list(_float), [1e-1, 1e-2, 1e-3, 1e-4]),
        "tau": (_float, 0.0),
        "n": (_int, 2),
    },
    "tame-check": {
        "sizes": (_list(_int), [8, 16]),
        "s": (_float, 2.0),
        "s0": (_float, 1.5),
        "samples": (_int, 100),
        "decay": (_float, 2.5),
        "stable_factor": (_float, 2.0),
    },
}


@dataclass
class ExperimentConfig:
    session: dict
    model_block: dict
    tasks: dict = field(default_factory=dict)
    text: str = ""

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def task(self, name: str) -> dict:
        if name not in TASKS:
            raise ConfigError(f"unknown task {name!r}")
        return self.tasks.get(name) or _fill(name, {})

    def build_model(self) -> FrequencyModel:
        return build_model(self.model_block, self.session)

    def fcoeffs(self) -> list[float]:
        fc = self.model_block.get("fcoeffs")
        if fc is not None:
            return fc
        kind = self.model_block["kind"]
        if kind == "nls":
            return [0.0, 1.0]
        if kind == "beam":
            return [0.0, 0.0, 0.0, 0.0, 1.0]
        if kind == "qhd":
            return [0.0, float(self.model_block["pprime"])]
        return [0.0, float(self.model_block["fprime"])]

    def as_json(self) -> dict:
        def enc(v):
            if isinstance(v, (QuadScalar, Metric)):
                return v.to_json()
            return v
        return {"session": {k: enc(v) for k, v in self.session.items()},
                "model": {k: enc(v) for k, v in self.model_block.items()},
                "tasks": self.tasks}


def _fill(section: str, raw: dict) -> dict:
    schema = SCHEMA[section]
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    out = {}
    for key, (parse, default) in schema.items():
        if key in raw:
            try:
                out[key] = parse(raw[key])
            except (ValueError, TypeError, ZeroDivisionError) as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
        elif default is REQUIRED:
            raise ConfigError(f"[{section}] missing required key {key!r}")
        else:
            out[key] = default
    return out


def parse_config(text: str) -> ExperimentConfig:
    # ";" separates metric rows, so only "#" starts an inline comment
    cp = configparser.ConfigParser(interpolation=None, default_section="\x00unused",
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str                 # keys are case sensitive (N vs n)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    unknown = [s for s in cp.sections() if s not in SCHEMA]
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    for required in ("session", "model"):
        if not cp.has_section(required):
            raise ConfigError(f"missing section [{required}]")
    session = _fill("session", dict(cp["session"]))
    model = _fill("model", dict(cp["model"]))
    tasks = {name: _fill(name, dict(cp[name])) for name in TASKS if cp.has_section(name)}
    cfg = ExperimentConfig(session, model, tasks, text)
    _validate(cfg)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def _validate(cfg: ExperimentConfig):
    s, m = cfg.session, cfg.model_block
    if s["d"] < 1:
        raise ConfigError("[session] d must be positive")
    if s["N"] < 1 or s["M"] < 1:
        raise ConfigError("[session] N and M must be positive")
    if s["threads"] < 1:
        raise ConfigError("[session] threads must be >= 1")
    metric = m["metric"]
    if metric is not None:
        if metric.d != s["d"]:
            raise ConfigError(f"[model] metric is {metric.d}x{metric.d} but d={s['d']}")
        fields = {x.D for row in metric.entries for x in row} - {0}
        if s["D"] and fields - {s["D"]}:
            raise ConfigError(f"[model] metric entries leave the field Q(sqrt({s['D']}))")
        if not s["D"] and fields:
            raise ConfigError("[model] irrational metric needs [session] D")
    for name in ("beta", "m", "hbar", "pprime", "a", "fprime"):
        D = m[name].D
        if D and D != s["D"]:
            raise ConfigError(f"[model] {name} lies outside Q(sqrt({s['D']}))")
    if m["potential"] == "sampled" and m["kind"] != "nls":
        raise ConfigError("[model] potentials apply to the nls model only")
    try:
        build_model(m, s)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[model] {exc}") from exc
    fc = cfg.fcoeffs()
    if m["kind"] == "beam" and any(fc[:3]):
        raise ConfigError("[model] beam fcoeffs must vanish below degree 3")


def build_model(m: dict, s: dict) -> FrequencyModel:
    g = m["metric"] if m["metric"] is not None else Metric.identity(s["d"])
    kind = m["kind"]
    if kind == "nls":
        if m["potential"] == "sampled":
            seed = s["seed"] if m["potential_seed"] is None else m["potential_seed"]
            V = sample_potential(seed, m["potential_n"], m["potential_N"] or s["N"], s["d"])
        else:
            V = Potential()
        return NLSModel(g, V)
    if kind == "beam":
        return BeamModel(g, m["beta"], m["m"])
    if kind == "qhd":
        return QHDModel(g, m["beta"], m["m"], m["hbar"], m["pprime"])
    trunc = m["truncation"] if m["truncation"] is not None else max(s["M"], s["N"])
    return PlaneWaveModel(g, m["a"], m["fprime"], trunc, m["K"])
