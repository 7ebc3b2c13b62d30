"""Scenario configuration files (TOML) to and from ScenarioSpec.

Components are numbered from 1 in files; the Python API numbers them from 0.

    [model]
    d = 2
    horizon = 5.0

    [baseline]
    1 = { constant = 0.8 }
    2 = { knots = [[0.0, 0.2], [5.0, 0.6]] }

    [marks]
    1 = { family = "exponential", rate = 1.0 }
    2 = { family = "lognormal", mu = 0.0, sigma = 0.5 }

    [excitation]
    "1,2" = { profile = { family = "exponential", alpha = 0.4, beta = 2.0 }, modulator = { family = "identity" } }

    [payoff]
    preset = "counting"          # or "loss", or "i,k" entries like [excitation]

    [grid]
    step = 0.001

    [run]
    seed = 7
    n_paths = 100000
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib
import tomli_w

from . import kernels as kn
from . import marks as mk
from .errors import NotSubcritical, ParseError, ValidationError
from .simulator import ConstantBaseline, PiecewiseLinearBaseline, ScenarioSpec

SECTIONS = {
    "model": {"d", "horizon"},
    "baseline": None,
    "marks": None,
    "excitation": None,
    "payoff": None,
    "grid": {"step"},
    "run": {"seed", "n_paths"},
}


@dataclass(frozen=True)
class RunOptions:
    step: float | None = None
    seed: int = 0
    n_paths: int = 10_000
    spectral_radius: float = 0.0


class _Locator:
    """Map (section, key) to a 1-based line number of the source text."""

    def __init__(self, text: str):
        self.lines = text.splitlines()

    def section(self, name: str) -> int | None:
        pat = re.compile(r"^\s*\[\s*" + re.escape(name) + r"\s*\]\s*(#.*)?$")
        for n, line in enumerate(self.lines, 1):
            if pat.match(line):
                return n
        return None

    def key(self, section: str, key: str) -> int | None:
        start = self.section(section)
        if start is None:
            return None
        pat = re.compile(r"^\s*(\"" + re.escape(key) + r"\"|'" + re.escape(key) + r"'|" + re.escape(key) + r")\s*=")
        for n in range(start, len(self.lines)):
            line = self.lines[n]
            if re.match(r"^\s*\[", line):
                break
            if pat.match(line):
                return n + 1
        return start


def _index(key: str, d: int, loc: int | None) -> int:
    try:
        i = int(key)
    except ValueError:
        raise ParseError(loc, f"component key {key!r} is not an integer") from None
    if not 1 <= i <= d:
        raise ParseError(loc, f"component {i} outside 1..{d}")
    return i - 1


def _pair(key: str, d: int, loc: int | None) -> tuple[int, int]:
    parts = key.split(",")
    if len(parts) != 2:
        raise ParseError(loc, f"kernel entry key {key!r} must look like \"i,k\"")
    return _index(parts[0].strip(), d, loc), _index(parts[1].strip(), d, loc)


def _check_keys(table: dict, allowed: set, loc: int | None, what: str) -> None:
    extra = set(table) - allowed
    if extra:
        raise ParseError(loc, f"unknown key(s) {sorted(extra)} in {what}")


def _family(table: dict, registry: dict, loc: int | None, what: str):
    if not isinstance(table, dict):
        raise ParseError(loc, f"{what} must be a table")
    fam = table.get("family")
    if fam not in registry:
        raise ParseError(loc, f"unknown {what} family {fam!r}; expected one of {sorted(registry)}")
    _check_keys(table, registry[fam] | {"family"}, loc, f"{what} ({fam})")


def _build(fn, table, loc):
    try:
        return fn(table)
    except (ValueError, TypeError, KeyError) as exc:
        raise ParseError(loc, str(exc)) from None


def _kernel_entries(table: dict, d: int, locator: _Locator, section: str) -> tuple:
    rows = [[None] * d for _ in range(d)]
    for key, entry in table.items():
        loc = locator.key(section, key)
        i, k = _pair(key, d, loc)
        if not isinstance(entry, dict):
            raise ParseError(loc, "kernel entry must be a table with profile and modulator")
        _check_keys(entry, {"profile", "modulator"}, loc, f"[{section}] entry {key}")
        if "profile" not in entry:
            raise ParseError(loc, f"kernel entry {key} has no profile")
        _family(entry["profile"], kn.PROFILE_KEYS, loc, "profile")
        prof = _build(kn.profile_from_dict, entry["profile"], loc)
        mod_t = entry.get("modulator", {"family": "constant", "c": 1.0})
        _family(mod_t, mk.FUNCTIONAL_KEYS, loc, "modulator")
        mod = _build(mk.functional_from_dict, mod_t, loc)
        rows[i][k] = kn.Separable(prof, mod)
    return tuple(tuple(r) for r in rows)


def loads(text: str) -> tuple[ScenarioSpec, RunOptions]:
    """Parse configuration text into a validated spec and run options."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ParseError(int(m.group(1)) if m else None, str(exc)) from None
    loc = _Locator(text)
    for sec in doc:
        if sec not in SECTIONS:
            raise ParseError(loc.section(sec), f"unknown section [{sec}]")
        if not isinstance(doc[sec], dict):
            raise ParseError(loc.key(sec, sec), f"{sec} must be a section")
        allowed = SECTIONS[sec]
        if allowed is not None:
            for key in doc[sec]:
                if key not in allowed:
                    raise ParseError(loc.key(sec, key), f"unknown key {key!r} in [{sec}]")

    model = doc.get("model")
    if model is None or "d" not in model or "horizon" not in model:
        raise ParseError(loc.section("model"), "[model] needs d and horizon")
    d, T = model["d"], model["horizon"]
    if not isinstance(d, int) or isinstance(d, bool) or d < 1:
        raise ParseError(loc.key("model", "d"), f"d must be a positive integer, got {d!r}")
    if not isinstance(T, (int, float)) or isinstance(T, bool) or not (math.isfinite(T) and T > 0):
        raise ParseError(loc.key("model", "horizon"), f"horizon must be a positive number, got {T!r}")

    base = [None] * d
    for key, val in doc.get("baseline", {}).items():
        at = loc.key("baseline", key)
        i = _index(key, d, at)
        if isinstance(val, (int, float)) and not isinstance(val, bool):
            val = {"constant": val}
        if not isinstance(val, dict) or len(val) != 1 or not ({"constant", "knots"} & set(val)):
            raise ParseError(at, "baseline entry must be { constant = c } or { knots = [[t, v], ...] }")
        if "constant" in val:
            base[i] = _build(lambda v: ConstantBaseline(float(v["constant"])), val, at)
        else:
            base[i] = _build(lambda v: PiecewiseLinearBaseline(tuple(tuple(p) for p in v["knots"])), val, at)
    missing = [i + 1 for i, b in enumerate(base) if b is None]
    if missing:
        raise ParseError(loc.section("baseline"), f"baseline missing for component(s) {missing}")

    laws = [None] * d
    for key, val in doc.get("marks", {}).items():
        at = loc.key("marks", key)
        i = _index(key, d, at)
        _family(val, mk.LAW_KEYS, at, "mark law")
        laws[i] = _build(mk.law_from_dict, val, at)
    missing = [i + 1 for i, b in enumerate(laws) if b is None]
    if missing:
        raise ParseError(loc.section("marks"), f"mark law missing for component(s) {missing}")

    phi = kn.DKernel(_kernel_entries(doc.get("excitation", {}), d, loc, "excitation"), True)

    pay = doc.get("payoff", {"preset": "counting"})
    if "preset" in pay:
        if len(pay) != 1:
            raise ParseError(loc.key("payoff", "preset"), "payoff preset cannot be combined with entries")
        presets = {"counting": kn.DKernel.counting, "loss": kn.DKernel.loss}
        if pay["preset"] not in presets:
            raise ParseError(loc.key("payoff", "preset"), f"unknown payoff preset {pay['preset']!r}")
        zeta = presets[pay["preset"]](d)
    else:
        zeta = kn.DKernel(_kernel_entries(pay, d, loc, "payoff"))

    grid = doc.get("grid", {})
    step = grid.get("step")
    if step is not None and not (isinstance(step, (int, float)) and step > 0):
        raise ParseError(loc.key("grid", "step"), f"step must be > 0, got {step!r}")
    run = doc.get("run", {})
    seed = run.get("seed", 0)
    if not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        raise ParseError(loc.key("run", "seed"), f"seed must be an unsigned 64-bit integer, got {seed!r}")
    n_paths = run.get("n_paths", 10_000)
    if not isinstance(n_paths, int) or n_paths < 1:
        raise ParseError(loc.key("run", "n_paths"), f"n_paths must be a positive integer, got {n_paths!r}")

    try:
        spec = ScenarioSpec(d, float(T), tuple(base), phi, zeta, tuple(laws), seed)
    except NotSubcritical as exc:
        raise ValidationError(f"excitation is not subcritical: spectral radius {exc.radius:.6g} >= 1") from None
    return spec, RunOptions(None if step is None else float(step), seed, n_paths, float(spec.spectral_radius))


def load(path) -> tuple[ScenarioSpec, RunOptions]:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(None, f"config is not UTF-8: {exc}") from None
    return loads(text)


def _entries_to_dict(kernel: kn.DKernel) -> dict:
    out = {}
    for i, k, e in kernel.nonzero():
        out[f"{i + 1},{k + 1}"] = {"profile": kn.profile_to_dict(e.profile),
                                   "modulator": mk.functional_to_dict(e.modulator)}
    return out


def to_dict(spec: ScenarioSpec, options: RunOptions | None = None) -> dict:
    doc = {"model": {"d": spec.d, "horizon": spec.horizon}, "baseline": {}, "marks": {}}
    for i, b in enumerate(spec.baseline):
        if isinstance(b, ConstantBaseline):
            doc["baseline"][str(i + 1)] = {"constant": b.c}
        else:
            doc["baseline"][str(i + 1)] = {"knots": [list(p) for p in b.knots]}
    for i, law in enumerate(spec.marks):
        doc["marks"][str(i + 1)] = mk.law_to_dict(law)
    doc["excitation"] = _entries_to_dict(spec.excitation)
    if spec.payoff == kn.DKernel.counting(spec.d):
        doc["payoff"] = {"preset": "counting"}
    elif spec.payoff == kn.DKernel.loss(spec.d):
        doc["payoff"] = {"preset": "loss"}
    else:
        doc["payoff"] = _entries_to_dict(spec.payoff)
    if options is not None and options.step is not None:
        doc["grid"] = {"step": options.step}
    doc["run"] = {"seed": spec.seed, "n_paths": options.n_paths if options else 10_000}
    return doc


def dumps(spec: ScenarioSpec, options: RunOptions | None = None) -> str:
    return tomli_w.dumps(to_dict(spec, options))
