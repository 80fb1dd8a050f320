"""Built-in experiment configurations used by the demos and the acceptance suite."""
from __future__ import annotations

import copy

from .config import ExperimentConfig, validate

# p = 1, v = x^2, beta = 1, two-point pattern on {-1, 1} with probabilities 0.45 / 0.55
BENCHMARK_1D = {
    "disorder": {"types": [[-1], [1]], "frequencies": [0.45, 0.55]},
    "potential": {"kind": "hopfield"},
    "model": {"beta": 1.0, "n": [50, 100, 200, 400]},
}

CURIE_WEISS = {
    "disorder": {"types": [[1]], "frequencies": [1.0]},
    "potential": {"kind": "hopfield"},
    "model": {"beta": 1.0, "n": 100},
}

# balanced random field: types (1, 1), (1, -1) in equal numbers
RANDOM_FIELD_CW = {
    "disorder": {"types": [[1, 1], [1, -1]], "frequencies": [0.5, 0.5]},
    "potential": {"kind": "random_field", "field": 0.1},
    "model": {"beta": 1.5, "n": 100},
}

# v = 1.7 |x|^2 - 2 |x|^4 + 0.1 (x1^2 - x2^2) + 0.03 x1 on the balanced random-field disorder.
# Mirror symmetric under x2 -> -x2 (which swaps the two types), so the exit from the
# shallow well at x1 < 0 runs through two mirror saddles of equal height.
TWO_GATE = {
    "disorder": {"types": [[1, 1], [1, -1]], "frequencies": [0.5, 0.5]},
    "potential": {"kind": "polynomial", "terms": [
        {"exponents": [2, 0], "coefficient": 1.8},
        {"exponents": [0, 2], "coefficient": 1.6},
        {"exponents": [4, 0], "coefficient": -2.0},
        {"exponents": [2, 2], "coefficient": -4.0},
        {"exponents": [0, 4], "coefficient": -2.0},
        {"exponents": [1, 0], "coefficient": 0.03},
    ]},
    "model": {"beta": 1.0, "n": [100, 200, 400, 800]},
    "asymptotics": {"mirror_types": [0, 1]},
}

PRESETS = {
    "benchmark-1d": BENCHMARK_1D,
    "curie-weiss": CURIE_WEISS,
    "random-field": RANDOM_FIELD_CW,
    "two-gate": TWO_GATE,
}


def preset(name: str, **model_overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    raw = copy.deepcopy(PRESETS[name])
    raw["model"].update(model_overrides)
    return validate(raw, f"preset:{name}")
