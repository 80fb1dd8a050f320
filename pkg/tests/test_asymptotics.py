import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import ndtr

from metastable_hopfield.asymptotics import (AssumptionFailure, asymptotic_capacity, find_critical_points, find_gate,
                                             g_function, harmonic_diagnostic, lift_point, max_principle_check,
                                             minimum_eigendata, prefactor_cn, quadratic_dirichlet_of_g,
                                             saddle_eigendata, variational_upper_bound)
from metastable_hopfield.chain import LatticeChain
from metastable_hopfield.disorder import fixed_type_table
from metastable_hopfield.ldp import RateModel
from metastable_hopfield.model import HopfieldModel, PolynomialPotential, random_field_potential
from metastable_hopfield.potential import BoundaryProblem, capacity, solve_harmonic

from conftest import M_STAR, benchmark_model, curie_weiss, random_field_cw, two_gate


def _landscape(model):
    rate = RateModel.quenched(model)
    cps = find_critical_points(rate)
    m = max((c for c in cps if c.kind == "minimum"), key=lambda c: (c.value, tuple(-c.x)))
    return rate, cps, m


@lru_cache(maxsize=None)
def benchmark_instance(n):
    model = benchmark_model(n)
    rate, cps, m = _landscape(model)
    gate = find_gate(cps, rate, m)
    chain = LatticeChain(model)
    lz = lift_point(gate.Z[0].x, chain, rate)
    sd = saddle_eigendata(lz.center, chain, rate, toward=m.x)
    A = chain.nearest_fiber(m.x)
    B = chain.nearest_fiber(gate.M[0].x)
    sol = solve_harmonic(BoundaryProblem(chain.graph(), A, B))
    return dict(model=model, rate=rate, cps=cps, m=m, gate=gate, chain=chain, sd=sd, A=A, B=B, sol=sol)


# --------------------------------------------------------------------------- critical points

@pytest.mark.parametrize("model", [benchmark_model(100), curie_weiss(40), random_field_cw(40), two_gate(40)],
                         ids=["benchmark", "curie-weiss", "random-field", "two-gate"])
def test_critical_points_are_stationary_and_classified(model):
    _, cps, _ = _landscape(model)
    assert any(c.kind == "minimum" for c in cps)
    for c in cps:
        assert c.grad_norm <= 1e-9
        neg = int(np.sum(c.eigenvalues < 0))
        if c.kind == "minimum":
            assert neg == 0
        elif c.kind == "saddle":
            assert neg == 1 and c.index == 1
    xs = np.array([c.x for c in cps])
    d = np.linalg.norm(xs[:, None] - xs[None], axis=-1)
    assert np.all(d[~np.eye(len(cps), dtype=bool)] > 1e-6)


def test_curie_weiss_wells_solve_the_mean_field_equation():
    _, cps, _ = _landscape(curie_weiss(40))
    minima = sorted(c.x[0] for c in cps if c.kind == "minimum")
    saddles = [c.x[0] for c in cps if c.kind == "saddle"]
    assert minima == pytest.approx([-M_STAR, M_STAR], abs=1e-9)
    assert saddles == pytest.approx([0.0], abs=1e-12)


def test_high_temperature_has_a_single_minimum():
    _, cps, _ = _landscape(curie_weiss(40, beta=0.3))
    assert [c.kind for c in cps] == ["minimum"]
    assert cps[0].x[0] == pytest.approx(0.0, abs=1e-12)


def test_balanced_field_keeps_the_wells_tied():
    _, cps, _ = _landscape(random_field_cw(40))
    minima = [c for c in cps if c.kind == "minimum"]
    assert len(minima) == 2
    assert minima[0].value == pytest.approx(minima[1].value, abs=1e-12)
    assert minima[0].x[0] == pytest.approx(-minima[1].x[0], abs=1e-9)


def test_unbalanced_field_breaks_the_tie_between_wells():
    model = HopfieldModel(fixed_type_table([(1, 1), (1, -1)], [24, 16]), random_field_potential(2, 0.1), 1.5)
    _, cps, _ = _landscape(model)
    minima = [c for c in cps if c.kind == "minimum"]
    assert len(minima) == 2
    assert abs(minima[0].value - minima[1].value) > 1e-3


# --------------------------------------------------------------------------- gate

def test_gate_of_one_dimensional_double_well_is_the_interior_maximum():
    inst = benchmark_instance(100)
    gate, cps = inst["gate"], inst["cps"]
    (z,) = gate.Z
    saddles = [c for c in cps if c.kind == "saddle"]
    assert len(saddles) == 1 and np.allclose(z.x, saddles[0].x)
    assert gate.gate_value == z.value > inst["m"].value
    assert all(gate.gate_value > M.value for M in gate.M)


def test_gate_value_does_not_depend_on_the_grid_step():
    rate, cps, m = _landscape(random_field_cw(40))
    coarse = find_gate(cps, rate, m, h=0.02)
    fine = find_gate(cps, rate, m, h=0.01)
    assert abs(coarse.gate_value - fine.gate_value) < 1e-6
    assert abs(coarse.grid_gate_value - coarse.gate_value) <= 0.05


def test_symmetric_model_has_two_mirror_saddles():
    rate, cps, m = _landscape(two_gate(40))
    gate = find_gate(cps, rate, m)
    assert len(gate.Z) == 2
    a, b = gate.Z
    assert a.x[0] == pytest.approx(b.x[0], abs=1e-9)
    assert a.x[1] == pytest.approx(-b.x[1], abs=1e-9)
    assert abs(a.value - b.value) <= 1e-9
    assert all(z.index == 1 for z in gate.Z)


def test_gate_rejects_the_global_minimum():
    model = HopfieldModel(fixed_type_table([(1, 1), (1, -1)], [24, 16]), random_field_potential(2, 0.1), 1.5)
    rate, cps, _ = _landscape(model)
    deepest = min((c for c in cps if c.kind == "minimum"), key=lambda c: c.value)
    with pytest.raises(AssumptionFailure):
        find_gate(cps, rate, deepest)


def test_boundary_flag_tracks_the_value_of_I_on_the_hull():
    # x^2 - x^4 makes the corners of the hull expensive; pure x^2 makes them cheap
    quartic = HopfieldModel(fixed_type_table([(1,)], [40]), PolynomialPotential.from_terms(1, {(2,): 1.0, (4,): -1.0}),
                            1.0)
    rate, cps, m = _landscape(quartic)
    gate = find_gate(cps, rate, m)
    assert gate.boundary_min > gate.gate_value and not gate.flags
    rate, cps, m = _landscape(curie_weiss(40))
    gate = find_gate(cps, rate, m)
    assert gate.boundary_min < gate.gate_value
    assert any("boundary" in f for f in gate.flags)


# --------------------------------------------------------------------------- saddle data

def test_descent_direction_and_negative_lambda():
    for n in (50, 100):
        sd = benchmark_instance(n)["sd"]
        H = sd.V @ np.diag(sd.gammas) @ sd.V.T
        assert sd.lam < 0
        assert sd.w @ H @ sd.w < 0
        assert np.all(sd.rates > 0)


def test_single_type_lambda_reduces_to_the_curvature_of_I():
    model = curie_weiss(200)
    rate, cps, m = _landscape(model)
    chain = LatticeChain(model)
    z = next(c for c in cps if c.kind == "saddle")
    K = lift_point(z.x, chain, rate, mode="paper").center
    sd = saddle_eigendata(K, chain, rate, mode="paper", el_norm="unit")
    curv = rate.rate_I_derivatives(sd.x)[2][0, 0]
    # the two directions move x by -+2/n; in unit normalisation the non-zero
    # eigenvalue of the 2x2 form is (r_+ + r_-) * 2 I''(x)
    assert sd.lam == pytest.approx(2 * sd.rates.sum() * curv, rel=1e-8)


def test_gamma_set_drops_the_kernel_in_pullback_mode():
    inst = benchmark_instance(100)
    chain, rate = inst["chain"], inst["rate"]
    K = lift_point(inst["gate"].Z[0].x, chain, rate, mode="paper").center
    sd = saddle_eigendata(K, chain, rate, mode="paper", toward=inst["m"].x)
    kernel = np.abs(sd.gammas) <= 1e-8 * np.abs(sd.gammas).max()
    on_kernel = np.abs(sd.V.T @ sd.w) <= 1e-8
    assert np.array_equal(~sd.gamma_mask, kernel & on_kernel)


# --------------------------------------------------------------------------- g

def test_g_known_values():
    z = np.array([0.1, -0.2])
    w = np.array([0.6, 0.8])
    n, lam = 100, -0.7
    assert g_function(z, z, lam, w, n) == 0.5
    Y = z + w * 3 / math.sqrt(n * abs(lam))
    assert g_function(Y, z, lam, w, n) == pytest.approx(0.9986501019683699, abs=1e-12)
    assert g_function(Y, z, lam, w, n) == pytest.approx(ndtr(3.0), rel=1e-14)


@given(st.lists(st.floats(-0.3, 0.3), min_size=2, max_size=2), st.floats(-5, -1e-3), st.integers(10, 4000))
def test_g_is_odd_bounded_and_monotone(d, lam, n):
    z = np.array([0.05, 0.1])
    w = np.array([0.6, -0.8])
    Y = z + np.array(d)
    assert g_function(Y, z, lam, w, n) + g_function(2 * z - Y, z, lam, w, n) == pytest.approx(1.0, abs=1e-12)
    ts = np.linspace(-1, 1, 21)
    vals = g_function(z + ts[:, None] * w, z, lam, w, n)
    assert np.all((vals >= 0) & (vals <= 1)) and np.all(np.diff(vals) >= 0)


# --------------------------------------------------------------------------- formulas

def test_asymptotic_capacity_equals_the_bound_bit_for_bit():
    sd = benchmark_instance(100)["sd"]
    assert asymptotic_capacity([sd], 100) == variational_upper_bound([sd], 100)


@pytest.mark.parametrize("n", [50, 100, 200])
def test_exact_capacity_stays_below_the_bound(n):
    inst = benchmark_instance(n)
    assert capacity(inst["sol"]) <= variational_upper_bound([inst["sd"]], n)


def test_doubling_beta_lowers_the_bound():
    bounds = []
    for beta in (1.0, 2.0):
        model = curie_weiss(100, beta)
        rate, cps, m = _landscape(model)
        gate = find_gate(cps, rate, m)
        chain = LatticeChain(model)
        lz = lift_point(gate.Z[0].x, chain, rate)
        bounds.append(variational_upper_bound([saddle_eigendata(lz.center, chain, rate, toward=m.x)], 100))
    assert bounds[1] < bounds[0]


def test_two_saddles_add_up():
    model = two_gate(60)
    rate, cps, m = _landscape(model)
    gate = find_gate(cps, rate, m)
    chain = LatticeChain(model)
    sds = [saddle_eigendata(lift_point(z.x, chain, rate).center, chain, rate, toward=m.x) for z in gate.Z]
    both = asymptotic_capacity(sds, 60)
    singles = [asymptotic_capacity([s], 60) for s in sds]
    assert singles[0] == pytest.approx(singles[1], abs=1e-9)
    assert both == pytest.approx(np.logaddexp(*singles), abs=1e-12)


def test_prefactor_structure_with_frozen_eigendata():
    inst = benchmark_instance(100)
    chain, rate, m, gate, sd = inst["chain"], inst["rate"], inst["m"], inst["gate"], inst["sd"]
    md = minimum_eigendata(lift_point(m.x, chain, rate).center, chain, rate)
    Iz = gate.gate_value
    a = prefactor_cn(md, [sd], rate, 100, m.value, Iz)
    b = prefactor_cn(md, [sd], rate, 130, m.value, Iz)
    assert a.exponent == pytest.approx(100 * (Iz - m.value), rel=1e-14)
    assert a.log_prediction == pytest.approx(a.log_cn + a.exponent, abs=1e-12)
    drift = rate.rate_I(md.x) - rate.rate_I(sd.x) + Iz - m.value
    assert b.log_prediction - a.log_prediction == pytest.approx(math.log(100 / 130) + 30 * drift, abs=1e-9)


@pytest.mark.parametrize("n", [100, 200])
def test_quadratic_dirichlet_form_of_g_matches_the_closed_form(n):
    sd = benchmark_instance(n)["sd"]
    chain = benchmark_instance(n)["chain"]
    ratio = math.exp(quadratic_dirichlet_of_g(sd, chain) - asymptotic_capacity([sd], n))
    assert ratio == pytest.approx(1.0, abs=0.05)


# --------------------------------------------------------------------------- maximum-principle bound

def _path(N):
    i = np.arange(N - 1)
    return np.r_[i, i + 1], np.r_[i + 1, i]


def test_bound_checker_trivial_case():
    ei, ej = _path(12)
    B0 = np.zeros(12, bool)
    B0[[0, 11]] = True
    v = max_principle_check(np.zeros(12), ei, ej, np.ones(ei.size), B0)
    assert v.holds and v.max_abs == 0.0 and v.bound == 0.0


def test_bound_checker_on_a_ramp_is_tight():
    N, s = 15, 0.3
    ei, ej = _path(N)
    B0 = np.zeros(N, bool)
    B0[0] = True
    F = s * np.arange(N)
    v = max_principle_check(F, ei, ej, np.ones(ei.size), B0)
    assert v.delta == pytest.approx(s) and v.C == N - 1 and v.epsilon == 0.0
    assert v.holds and v.max_abs == pytest.approx(v.bound, rel=1e-12)


def test_bound_checker_reports_a_parabola_that_exceeds_it():
    # a constant Laplacian on a path pinned at both ends grows quadratically
    # in the length, faster than the linear bound: the checker must say so
    N, delta = 21, 0.1
    ei, ej = _path(N)
    B0 = np.zeros(N, bool)
    B0[[0, N - 1]] = True
    k = np.arange(N)
    F = delta * k * (N - 1 - k) / 2
    v = max_principle_check(F, ei, ej, np.ones(ei.size), B0)
    assert v.delta == pytest.approx(delta)
    assert not v.holds and v.max_abs > v.bound


def test_bound_checker_requires_every_component_to_meet_B0():
    ei, ej = np.array([0, 1, 2, 3]), np.array([1, 0, 3, 2])
    B0 = np.array([True, False, False, False])
    with pytest.raises(ValueError):
        max_principle_check(np.zeros(4), ei, ej, np.ones(4), B0)


@pytest.mark.parametrize("n", [50, 100, 200])
def test_harmonic_diagnostic_holds_on_the_dice(n):
    inst = benchmark_instance(n)
    diag = harmonic_diagnostic(inst["sd"], inst["chain"])
    assert diag.max_principle.holds
    assert diag.inner_states > 0 and diag.outer_states > diag.inner_states
    assert diag.scaled_error < 0.2


def test_scaled_harmonic_error_does_not_grow():
    errs = [harmonic_diagnostic(benchmark_instance(n)["sd"], benchmark_instance(n)["chain"]).scaled_error
            for n in (50, 100, 200)]
    assert all(b / a <= 1.2 for a, b in zip(errs, errs[1:]))
