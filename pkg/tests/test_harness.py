import csv
import json
import textwrap
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metastable_hopfield.harness import cli, pipeline
from metastable_hopfield.harness.cache import CACHE_ENV, NpzCache
from metastable_hopfield.harness.config import (ConfigError, counts_from_frequencies, dump_toml, load_config,
                                                validate)
from metastable_hopfield.harness.presets import PRESETS, preset
from metastable_hopfield.potential import BoundaryProblem, solve_harmonic

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

MINIMAL = {"disorder": {"types": [[1]], "frequencies": [1.0]}, "model": {"beta": 1.0, "n": 20}}


def _write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(text))
    return p


def _run(argv, capsys, caplog=None):
    """Exit code, standard output and logged messages of one CLI call."""
    if caplog is not None:
        caplog.clear()
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, caplog.text if caplog is not None else out.err


# -- configuration ----------------------------------------------------------

@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.toml")), ids=lambda p: p.stem)
def test_shipped_configs_validate(path):
    cfg = load_config(path)
    assert cfg.n_values and cfg.beta > 0


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_validate_and_round_trip_through_toml(name, tmp_path):
    cfg = preset(name)
    p = tmp_path / "x.toml"
    p.write_text(dump_toml(cfg.to_dict()))
    assert load_config(p).to_dict() == cfg.to_dict()


@pytest.mark.parametrize("raw, fragment", [
    ({**MINIMAL, "extra": {}}, "unknown section"),
    ({**MINIMAL, "model": {"beta": 1.0, "n": 20, "colour": 3}}, "unknown key"),
    ({**MINIMAL, "solver": {"method": "gauss"}}, "method"),
    ({"disorder": MINIMAL["disorder"], "model": {"n": 20}}, "required"),
    ({"disorder": MINIMAL["disorder"], "model": {"beta": -1.0, "n": 20}}, "non-negative"),
    ({"disorder": MINIMAL["disorder"], "model": {"beta": 1.0, "n": [10, 0]}}, "positive integer"),
    ({"disorder": {"types": [[1], [1]], "frequencies": [0.5, 0.5]}, "model": MINIMAL["model"]}, "duplicate"),
    ({"disorder": {"types": [[1], [-1]], "frequencies": [0.5, 0.6]}, "model": MINIMAL["model"]}, "sum to 1"),
    ({"disorder": {"types": [[1]]}, "model": MINIMAL["model"]}, "exactly one"),
    ({**MINIMAL, "boundary": {"A": [[0.5]]}}, "both A and B"),
    ({**MINIMAL, "potential": {"kind": "polynomial"}}, "terms"),
    ({**MINIMAL, "mc": {"trajectories": -1}}, "trajectories"),
    ({**MINIMAL, "asymptotics": {"mirror_types": [0, 0]}}, "mirror_types"),
])
def test_invalid_configs_are_rejected(raw, fragment):
    with pytest.raises(ConfigError, match=fragment):
        validate(raw)


def test_overrides_are_validated():
    cfg = validate(MINIMAL)
    assert cfg.with_overrides(model__beta=2.0).beta == 2.0
    assert cfg.with_overrides(model__beta=None).beta == 1.0
    with pytest.raises(ConfigError):
        cfg.with_overrides(asymptotics__mode="fancy")


@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=5), st.integers(1, 2000))
def test_frequency_counts_add_up(weights, n):
    q = [w / sum(weights) for w in weights]
    q[-1] = 1.0 - sum(q[:-1])
    try:
        counts = counts_from_frequencies(q, n)
    except ConfigError:
        return
    assert sum(counts) == n and min(counts) >= 0
    assert all(abs(c - qa * n) <= 0.5 for c, qa in zip(counts[:-1], q[:-1]))


def test_fixed_counts_must_match_n():
    cfg = validate({"disorder": {"types": [[1], [-1]], "counts": [10, 5]}, "model": {"beta": 1.0, "n": 20}})
    with pytest.raises(ConfigError):
        cfg.type_table(20)
    assert sorted(cfg.type_table(15).counts.tolist()) == [5, 10]


# -- cache ------------------------------------------------------------------

def test_npz_cache_round_trip_and_corruption(tmp_path):
    c = NpzCache(tmp_path)
    assert c.get("ab" * 32) is None
    c.put("ab" * 32, {"x": np.arange(3.0)})
    assert np.array_equal(c.get("ab" * 32)["x"], np.arange(3.0))
    path = tmp_path / "ab" / f"{'ab' * 32}.npz"
    path.write_bytes(b"not a zip file")
    assert c.get("ab" * 32) is None
    assert not path.exists()
    assert (c.hits, c.misses) == (1, 2)


def test_solver_cache_hit_skips_the_solve(tmp_path):
    inst = pipeline.Instance(preset("benchmark-1d"), 60)
    g = inst.chain.graph()
    A, B = inst.boundary
    cache = NpzCache(tmp_path)
    first = solve_harmonic(BoundaryProblem(g, A, B), method="cg", cache=cache)
    second = solve_harmonic(BoundaryProblem(g, A, B), method="cg", cache=cache)
    assert not first.stats.cache_hit and first.stats.iterations > 0
    assert second.stats.cache_hit and second.stats.iterations == 0
    assert np.array_equal(first.log_phi, second.log_phi)
    # a different temperature is a different problem
    g2 = pipeline.Instance(preset("benchmark-1d", beta=1.1), 60).chain.graph()
    third = solve_harmonic(BoundaryProblem(g2, A, B), method="cg", cache=cache)
    assert not third.stats.cache_hit


# -- command line -------------------------------------------------------------

def test_unknown_key_exits_with_validation_error(tmp_path, capsys, caplog):
    p = _write(tmp_path, """
        [model]
        beta = 1.0
        n = 40
        colour = 3
    """)
    code, _, err = _run(["gate", "--config", str(p)], capsys, caplog)
    assert code == 2 and "colour" in err


def test_missing_config_exits_with_validation_error(tmp_path, capsys):
    code, _, _ = _run(["gate", "--config", str(tmp_path / "absent.toml")], capsys)
    assert code == 2


def test_bad_n_flag_exits_with_validation_error(capsys):
    code, _, _ = _run(["gate", "--preset", "curie-weiss", "--n", "ten"], capsys)
    assert code == 2


def test_overlapping_boundary_exits_with_validation_error(tmp_path, capsys, caplog):
    p = _write(tmp_path, """
        [disorder]
        types = [[1]]
        frequencies = [1.0]
        [model]
        beta = 1.0
        n = 40
        [boundary]
        A = [[0.5]]
        B = [[0.5]]
    """)
    code, _, err = _run(["capacity", "--config", str(p), "--no-cache"], capsys, caplog)
    assert code == 2 and "overlap" in err


def test_monte_carlo_over_budget_exits_with_validation_error(tmp_path, capsys, caplog):
    p = _write(tmp_path, """
        [disorder]
        types = [[-1], [1]]
        frequencies = [0.45, 0.55]
        [model]
        beta = 1.0
        n = 60
        [mc]
        trajectories = 100
        step_budget = 1e6
    """)
    code, _, err = _run(["hit-time", "--config", str(p), "--no-cache"], capsys, caplog)
    assert code == 2 and "budget" in err


def test_missing_deeper_minimum_exits_with_numerical_failure(tmp_path, capsys, caplog):
    p = _write(tmp_path, """
        [disorder]
        types = [[1]]
        frequencies = [1.0]
        [model]
        beta = 0.3
        n = 40
    """)
    code, _, err = _run(["gate", "--config", str(p)], capsys, caplog)
    assert code == 3 and "numerical failure" in err


def _strip_timestamp(text):
    d = json.loads(text)
    d.pop("timestamp")
    return d


def test_capacity_json_is_reproducible_and_cache_independent(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "cache"))
    args = ["capacity", "--preset", "benchmark-1d", "--n", "50"]
    c1, cold, _ = _run(args, capsys)
    c2, warm, _ = _run(args, capsys)
    c3, none, _ = _run(args + ["--no-cache"], capsys)
    assert c1 == c2 == c3 == 0
    cold, warm, none = map(_strip_timestamp, (cold, warm, none))
    assert cold["results"][0]["solver"]["cache_hit"] is False
    assert warm["results"][0]["solver"]["cache_hit"] is True
    assert warm["results"][0]["solver"]["iterations"] == 0
    for d in (warm, none):
        d["results"][0]["solver"]["cache_hit"] = False
    assert cold == warm == none
    assert any((tmp_path / "cache").rglob("*.npz"))


def test_identical_runs_give_identical_json_apart_from_timestamp(capsys):
    args = ["critical-points", "--preset", "curie-weiss", "--n", "60"]
    _, a, _ = _run(args, capsys)
    _, b, _ = _run(args, capsys)
    assert _strip_timestamp(a) == _strip_timestamp(b)
    assert [ln for ln in a.splitlines() if "timestamp" not in ln] == \
           [ln for ln in b.splitlines() if "timestamp" not in ln]


def test_report_embeds_the_resolved_config(capsys):
    _, out, _ = _run(["gate", "--preset", "curie-weiss", "--n", "30", "--mode", "paper", "--seed", "9"], capsys)
    d = json.loads(out)
    assert d["config"]["model"]["n"] == 30
    assert d["config"]["asymptotics"]["mode"] == "paper"
    assert d["config"]["mc"]["seed"] == 9 and d["config"]["disorder"]["seed"] == 9
    assert "[model]" in d["config_toml"]
    assert {"numpy", "scipy", "package_version"} <= set(d["environment"])


def test_solver_choice_is_reported(capsys):
    _, out, _ = _run(["capacity", "--preset", "benchmark-1d", "--n", "40", "--no-cache", "--solver", "lu"], capsys)
    assert json.loads(out)["results"][0]["solver"]["method"] == "lu"


def test_rate_surface_csv(tmp_path, capsys):
    code, _, _ = _run(["rate-surface", "--preset", "curie-weiss", "--grid-step", "0.25",
                       "--out", str(tmp_path)], capsys)
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "rate_surface.csv").open()))
    assert [float(r["x1"]) for r in rows] == [-1.0, -0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0]
    vals = {float(r["x1"]): float(r["I"]) for r in rows}
    assert vals[0.5] == pytest.approx(vals[-0.5], abs=1e-12)
    assert min(vals, key=vals.get) in (-0.75, 0.75, -1.0, 1.0)


def test_capacity_writes_phi_csv(tmp_path, capsys):
    code, _, _ = _run(["capacity", "--preset", "benchmark-1d", "--n", "30", "--no-cache",
                       "--out", str(tmp_path)], capsys)
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "phi_n30.csv").open()))
    assert len(rows) == json.loads((tmp_path / "capacity.json").read_text())["results"][0]["states"]
    assert {"state", "k0", "k1", "log_phi", "log_weight"} <= set(rows[0])


def test_hit_time_with_monte_carlo_writes_samples(tmp_path, capsys):
    code, _, _ = _run(["hit-time", "--config", str(CONFIGS / "mc_small.toml"), "--mc-trajectories", "200",
                       "--no-cache", "--out", str(tmp_path)], capsys)
    assert code == 0
    r = json.loads((tmp_path / "hit_time.json").read_text())["results"][0]
    assert r["mc"]["trajectories"] == 200
    assert abs(r["mc_deviation_in_stderr"]) < 4
    rows = list(csv.reader((tmp_path / "hit_time_samples_n16.csv").open()))
    assert rows[0] == ["trajectory", "tau"] and len(rows) == 201


def test_sweep_writes_table(tmp_path, capsys):
    code, _, _ = _run(["sweep", "--preset", "benchmark-1d", "--n", "40,60", "--no-cache",
                       "--out", str(tmp_path)], capsys)
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "sweep.csv").open()))
    assert [int(r["n"]) for r in rows] == [40, 60]
    assert set(pipeline.SWEEP_COLUMNS) == set(rows[0])
    rep = json.loads((tmp_path / "sweep.json").read_text())
    assert rep["command"] == "sweep" and "summary" in rep["results"]


def test_verify_passes(capsys):
    code, out, _ = _run(["verify", "--preset", "random-field", "--n", "8"], capsys)
    assert code == 0
    checks = json.loads(out)["results"][0]["checks"]
    assert any("spin" in c["name"] for c in checks) and all(c["pass"] for c in checks)
