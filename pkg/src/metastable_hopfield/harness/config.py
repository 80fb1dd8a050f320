"""Experiment configuration: TOML in, validated dataclasses out.

Schema (every key optional unless marked)::

    [disorder]                       # exactly one of: patterns | types
    patterns = [{support = [-1, 1], probabilities = [0.45, 0.55]}]
    seed = 0                         # used with patterns
    types = [[-1], [1]]              # explicit type table ...
    frequencies = [0.45, 0.55]       # ... with counts round(q_a n) (last type takes the rest)
    counts = [50, 50]                # ... or fixed counts (then n = sum)
    rate_probabilities = "quenched"  # or "annealed" (landscape exploration only)

    [potential]
    kind = "hopfield"                # hopfield | random_field | polynomial
    field = 1.0                      # random_field only
    terms = [{exponents = [2], coefficient = 1.0}]   # polynomial only

    [model]
    beta = 1.0                       # required
    n = [50, 100, 200, 400]          # int or list

    [asymptotics]
    mode = "exact"                   # exact | paper
    gate_dir = "w"                   # w | v1
    el_norm = "step"                 # step | unit
    start_minimum = "shallowest"     # shallowest | list of coordinates near m
    grid_step = 0.0                  # 0 selects a default per dimension
    multistart = 5
    mirror_types = []                # two type indices exchanged by a symmetry of the model

    [boundary]                       # optional explicit A / B as X-points
    A = [[-0.9575]]
    B = [[0.9575]]

    [solver]
    method = "direct"                # direct | lu | cg
    prune = true
    prune_threshold = 1e-300
    cg_tol = 1e-12
    state_budget = 5000000

    [mc]
    trajectories = 0                 # 0 disables Monte Carlo
    seed = 1
    step_budget = 2e9                # predicted total steps allowed

    [output]
    dir = ""
    cache = ""
    workers = 1
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import tomli

from ..disorder import PatternDistribution, TypeTable, fixed_type_table, sample_patterns, type_decomposition
from ..model import HopfieldModel, PolynomialPotential, hopfield_potential, random_field_potential


class ConfigError(ValueError):
    """Invalid experiment configuration."""


SCHEMA: dict[str, dict[str, Any]] = {
    "disorder": {"patterns": None, "seed": 0, "types": None, "frequencies": None, "counts": None,
                 "rate_probabilities": "quenched"},
    "potential": {"kind": "hopfield", "field": 1.0, "terms": None},
    "model": {"beta": None, "n": None},
    "asymptotics": {"mode": "exact", "gate_dir": "w", "el_norm": "step", "start_minimum": "shallowest",
                    "grid_step": 0.0, "multistart": 5, "mirror_types": []},
    "boundary": {"A": None, "B": None},
    "solver": {"method": "direct", "prune": True, "prune_threshold": 1e-300, "cg_tol": 1e-12,
               "state_budget": 5_000_000},
    "mc": {"trajectories": 0, "seed": 1, "step_budget": 2e9},
    "output": {"dir": "", "cache": "", "workers": 1},
}

CHOICES = {
    ("disorder", "rate_probabilities"): ("quenched", "annealed"),
    ("potential", "kind"): ("hopfield", "random_field", "polynomial"),
    ("asymptotics", "mode"): ("exact", "paper"),
    ("asymptotics", "gate_dir"): ("w", "v1"),
    ("asymptotics", "el_norm"): ("step", "unit"),
    ("solver", "method"): ("direct", "lu", "cg"),
}


@dataclass
class ExperimentConfig:
    raw: dict
    source: str = "<dict>"

    # -- convenient views --------------------------------------------------
    def section(self, name: str) -> dict:
        return self.raw[name]

    @property
    def beta(self) -> float:
        return float(self.raw["model"]["beta"])

    @property
    def n_values(self) -> list[int]:
        n = self.raw["model"]["n"]
        return [int(v) for v in (n if isinstance(n, list) else [n])]

    def with_overrides(self, **over) -> "ExperimentConfig":
        """Copy with ``section__key`` overrides applied and re-validated."""
        raw = copy.deepcopy(self.raw)
        for k, v in over.items():
            if v is None:
                continue
            sec, key = k.split("__")
            raw[sec][key] = v
        return validate(raw, self.source)

    # -- builders ----------------------------------------------------------
    def potential(self, p: int) -> PolynomialPotential:
        pot = self.raw["potential"]
        if pot["kind"] == "hopfield":
            return hopfield_potential(p)
        if pot["kind"] == "random_field":
            return random_field_potential(p, float(pot["field"]))
        terms = {tuple(int(e) for e in t["exponents"]): float(t["coefficient"]) for t in pot["terms"]}
        return PolynomialPotential.from_terms(p, terms)

    def distributions(self) -> list[PatternDistribution]:
        return [PatternDistribution(tuple(d["support"]), tuple(d["probabilities"]))
                for d in self.raw["disorder"]["patterns"]]

    def type_table(self, n: int) -> TypeTable:
        d = self.raw["disorder"]
        if d["patterns"] is not None:
            return type_decomposition(sample_patterns(self.distributions(), n, int(d["seed"])))
        types = d["types"]
        if d["counts"] is not None:
            counts = [int(c) for c in d["counts"]]
            if sum(counts) != n:
                raise ConfigError(f"fixed counts sum to {sum(counts)} but n = {n}")
        else:
            counts = counts_from_frequencies(d["frequencies"], n)
        keep = [i for i, c in enumerate(counts) if c > 0]
        return fixed_type_table([types[i] for i in keep], [counts[i] for i in keep])

    def model(self, n: int) -> HopfieldModel:
        table = self.type_table(n)
        return HopfieldModel(table, self.potential(table.p), self.beta)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def counts_from_frequencies(freq, n: int) -> list[int]:
    """n_a = floor(q_a n + 1/2) for all but the last type, which takes the remainder."""
    head = [int(math.floor(float(q) * n + 0.5)) for q in freq[:-1]]
    last = n - sum(head)
    if last < 0:
        raise ConfigError("frequencies produce negative counts")
    return head + [last]


def _err(source, msg):
    return ConfigError(f"{source}: {msg}")


def validate(raw: dict, source: str = "<dict>") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise _err(source, "configuration must be a table")
    unknown = set(raw) - set(SCHEMA)
    if unknown:
        raise _err(source, f"unknown section(s) {sorted(unknown)}")
    out = {}
    for sec, defaults in SCHEMA.items():
        given = raw.get(sec, {})
        if not isinstance(given, dict):
            raise _err(source, f"[{sec}] must be a table")
        bad = set(given) - set(defaults)
        if bad:
            raise _err(source, f"unknown key(s) {sorted(bad)} in [{sec}]")
        merged = copy.deepcopy(defaults)
        merged.update(copy.deepcopy(given))
        out[sec] = merged
    for (sec, key), allowed in CHOICES.items():
        if out[sec][key] not in allowed:
            raise _err(source, f"[{sec}] {key} must be one of {allowed}, got {out[sec][key]!r}")
    m = out["model"]
    if m["beta"] is None or m["n"] is None:
        raise _err(source, "[model] beta and n are required")
    try:
        beta = float(m["beta"])
    except (TypeError, ValueError):
        raise _err(source, "[model] beta must be a number") from None
    if not beta >= 0:
        raise _err(source, "[model] beta must be non-negative")
    ns = m["n"] if isinstance(m["n"], list) else [m["n"]]
    if not ns or any(not isinstance(v, int) or isinstance(v, bool) or v < 1 for v in ns):
        raise _err(source, "[model] n must be a positive integer or a list of them")
    d = out["disorder"]
    if (d["patterns"] is None) == (d["types"] is None):
        raise _err(source, "[disorder] needs exactly one of 'patterns' or 'types'")
    if d["patterns"] is not None:
        try:
            for p in d["patterns"]:
                if set(p) != {"support", "probabilities"}:
                    raise _err(source, "each pattern needs exactly 'support' and 'probabilities'")
                PatternDistribution(tuple(p["support"]), tuple(p["probabilities"]))
        except (TypeError, ValueError) as exc:
            raise _err(source, f"[disorder] invalid pattern distribution: {exc}") from None
    else:
        if (d["frequencies"] is None) == (d["counts"] is None):
            raise _err(source, "[disorder] with 'types' needs exactly one of 'frequencies' or 'counts'")
        spec = d["frequencies"] if d["frequencies"] is not None else d["counts"]
        if len(spec) != len(d["types"]):
            raise _err(source, "[disorder] types and frequencies/counts differ in length")
        if d["frequencies"] is not None and abs(sum(float(q) for q in spec) - 1) > 1e-12:
            raise _err(source, "[disorder] frequencies must sum to 1")
        if len({tuple(np.atleast_1d(t).tolist()) for t in d["types"]}) != len(d["types"]):
            raise _err(source, "[disorder] duplicate types")
    pot = out["potential"]
    if pot["kind"] == "polynomial":
        if not pot["terms"]:
            raise _err(source, "[potential] polynomial kind needs 'terms'")
        for t in pot["terms"]:
            if set(t) != {"exponents", "coefficient"}:
                raise _err(source, "each potential term needs 'exponents' and 'coefficient'")
    a = out["asymptotics"]
    if not (a["start_minimum"] == "shallowest" or isinstance(a["start_minimum"], list)):
        raise _err(source, "[asymptotics] start_minimum must be 'shallowest' or a coordinate list")
    mt = a["mirror_types"]
    if mt and (len(mt) != 2 or len(set(mt)) != 2 or any(not isinstance(i, int) for i in mt)):
        raise _err(source, "[asymptotics] mirror_types must list two distinct type indices")
    b = out["boundary"]
    if (b["A"] is None) != (b["B"] is None):
        raise _err(source, "[boundary] give both A and B or neither")
    if int(out["mc"]["trajectories"]) < 0:
        raise _err(source, "[mc] trajectories must be >= 0")
    s = out["solver"]
    if not 0 < float(s["prune_threshold"]) < 1:
        raise _err(source, "[solver] prune_threshold must lie in (0, 1)")
    return ExperimentConfig(out, source)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return validate(raw, str(path))


def dump_toml(raw: dict) -> str:
    """Serialise a validated config back to TOML (used to embed resolved configs)."""
    lines = []

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if isinstance(v, dict):
            return "{" + ", ".join(f"{k} = {fmt(x)}" for k, x in v.items()) + "}"
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    for sec, body in raw.items():
        lines.append(f"[{sec}]")
        for k, v in body.items():
            if v is not None:
                lines.append(f"{k} = {fmt(v)}")
        lines.append("")
    return "\n".join(lines)
