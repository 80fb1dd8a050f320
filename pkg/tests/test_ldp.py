import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import brentq

from metastable_hopfield.disorder import ensemble_from_table, fixed_type_table
from metastable_hopfield.ldp import (LumpedMeasure, RateModel, binary_entropy_rate, kappa_hat, log_kappa_hat,
                                    rate_hat_and_hessian)
from metastable_hopfield.model import (HopfieldModel, Lattice, LatticePoint, PolynomialPotential, hopfield_potential,
                                       order_params, projection_matrix, random_field_potential, counts_to_y)

from conftest import M_STAR, random_field_cw

ZERO = PolynomialPotential.from_terms(1, {(0,): 0.0})


def fair(beta=1.0, pot=None):
    table = fixed_type_table([(-1,), (1,)], [50, 50])
    return RateModel.quenched(HopfieldModel(table, pot or hopfield_potential(1), beta))


def test_log_moment_values():
    r = fair()
    Lv, g, H = r.log_moment([0.0])
    assert Lv == 0.0 and g.tolist() == [0.0]
    assert r.log_moment([1.0])[0] == pytest.approx(0.4337808304830271, abs=1e-15)
    single = RateModel(1.0, hopfield_potential(1), np.array([[-0.6]]), np.array([1.0]))
    assert single.log_moment([1.1])[0] == pytest.approx(math.log(math.cosh(0.6 * 1.1)), rel=1e-14)


def test_binary_entropy_closed_form():
    r = fair()
    for x in np.linspace(-0.999, 0.999, 401):
        assert abs(r.legendre([x]).value - binary_entropy_rate(x)) <= 1e-10
    assert r.legendre([0.0]).value == 0.0
    # 0.75 log 1.5 + 0.25 log 0.5
    assert binary_entropy_rate(0.5) == pytest.approx(0.1308120359411, abs=1e-12)
    assert r.legendre([0.5]).value == pytest.approx(0.75 * math.log(1.5) + 0.25 * math.log(0.5), abs=1e-12)


def test_outside_hull_flagged_infinite():
    r = fair()
    res = r.legendre([1.2])
    assert not res.finite and res.value == np.inf
    assert r.rate_I([1.0]) == np.inf
    two = RateModel.quenched(random_field_cw(20))
    assert not two.legendre([0.9, 0.2]).finite  # |x1| + |x2| <= 1 is the hull for types (1, +-1)
    assert two.legendre([0.5, 0.3]).finite


def _probe_models():
    yield fair()
    yield RateModel.quenched(random_field_cw(40))
    t3 = fixed_type_table([(1, 0.5), (-0.5, 1), ("0.2", "-0.9")], [10, 20, 30])
    yield RateModel.quenched(HopfieldModel(t3, hopfield_potential(2), 0.8))


def test_fenchel_and_duality_on_random_probes(rng):
    """10^4 probes: L*(x) + L(t) >= <t, x>, and grad L(t*) = x at the maximiser."""
    probes = 0
    worst_fenchel = np.inf
    worst_dual = 0.0
    for r in _probe_models():
        p = r.p
        for _ in range(3400):
            # points of the zonotope sum_a q_a [-1, 1] a, shrunk slightly towards 0
            s = rng.uniform(-1, 1, size=r.q.size) * rng.uniform(0, 0.98)
            x = (r.q * s) @ r.types
            t = rng.normal(scale=3.0, size=p)
            res = r.legendre(x)
            assert res.finite and res.converged
            worst_fenchel = min(worst_fenchel, res.value + r.log_moment(t)[0] - t @ x)
            worst_dual = max(worst_dual, float(np.linalg.norm(r.grad_L(res.t) - x)))
            probes += 1
    assert probes >= 10_000
    assert worst_fenchel >= -1e-12
    assert worst_dual <= 1e-9


def test_batch_matches_scalar(rng):
    r = RateModel.quenched(random_field_cw(40))
    X = rng.uniform(-0.6, 0.6, size=(50, 2))
    vals, T = r.free_energy_batch(X)
    for x, v, t in zip(X, vals, T):
        assert v == pytest.approx(r.free_energy(x), abs=1e-11)
        np.testing.assert_allclose(t, r.legendre(x).t, atol=1e-9)


def test_rate_normalisation_and_symmetry():
    r = fair()
    assert r.rate_I(r.x_min) == pytest.approx(0.0, abs=1e-13)
    for x in [0.1, 0.4, 0.8]:
        assert r.rate_I([x]) == pytest.approx(r.rate_I([-x]), abs=1e-12)
    m = brentq(lambda x: x - math.tanh(2 * x), 0.5, 1.0, xtol=1e-15)
    assert m == pytest.approx(M_STAR, abs=1e-14)
    assert r.rate_I([m]) == pytest.approx(0.0, abs=1e-12)
    _, g, H, _ = r.rate_I_derivatives([m])
    assert abs(g[0]) < 1e-10 and H[0, 0] > 0
    assert r.rate_I([0.0]) - r.rate_I([m]) > 0.3


def test_zero_beta_single_minimum_at_mean():
    # without interaction the spins are unbiased, so the mean overlap is 0 whatever the type frequencies
    table = fixed_type_table([(-1,), (1,)], [45, 55])
    r = RateModel.quenched(HopfieldModel(table, hopfield_potential(1), 0.0))
    assert r.x_min[0] == pytest.approx(0.0, abs=1e-10)
    xs = np.linspace(-0.95, 0.95, 39)
    vals = [r.rate_I([x]) for x in xs]
    assert min(vals) >= -1e-12
    assert np.all(np.diff(np.sign(np.diff(vals))) >= 0)  # one turning point


def test_derivatives_against_finite_differences():
    r = RateModel.quenched(random_field_cw(40))
    x = np.array([0.3, -0.2])
    val, g, H, _ = r.rate_I_derivatives(x)
    h = 1e-5
    fd = np.array([(r.rate_I(x + h * e) - r.rate_I(x - h * e)) / (2 * h) for e in np.eye(2)])
    np.testing.assert_allclose(g, fd, atol=1e-8)
    fdh = np.array([(r.rate_I_derivatives(x + h * e)[1] - r.rate_I_derivatives(x - h * e)[1]) / (2 * h)
                    for e in np.eye(2)])
    np.testing.assert_allclose(H, fdh, atol=1e-6)


def test_lumped_weight_small_binomial():
    t = fixed_type_table([(1,)], [2])
    meas = LumpedMeasure(HopfieldModel(t, ZERO, 3.0))
    assert meas.log_weight(np.array([1])) - meas.log_weight(np.array([0])) == pytest.approx(math.log(2), abs=1e-15)
    assert meas.raw_log_weight(np.array([0])) == 0.0
    assert meas.raw_log_weight(np.array([2])) == 0.0


def _brute_force_lumped(model, lattice):
    ens = ensemble_from_table(model.table)
    n = ens.n
    codes = np.arange(2 ** n)
    spins = np.where((codes[:, None] >> np.arange(n)) & 1, 1, -1)
    logw = n * model.beta * model.potential.value(order_params(spins, ens))
    from metastable_hopfield.model import lift_counts, site_types
    idx = lift_counts(spins, site_types(ens, model.table), model.table.n_types) @ lattice.strides
    w = np.bincount(idx, weights=np.exp(logw - logw.max()), minlength=lattice.size)
    return w / w.sum()


@pytest.mark.parametrize("model", [
    HopfieldModel(fixed_type_table([(1,)], [6]), hopfield_potential(1), 1.0),
    HopfieldModel(fixed_type_table([(1, 1), (1, -1)], [3, 3]), random_field_potential(2, 0.4), 1.2),
    HopfieldModel(fixed_type_table([("0.5",), ("-1",)], [2, 4]), hopfield_potential(1), 2.0),
])
def test_lumped_weights_match_enumeration(model):
    lat = Lattice(model.table)
    meas = LumpedMeasure(model, lat)
    ref = _brute_force_lumped(model, lat)
    np.testing.assert_allclose(np.exp(meas.log_weights), ref, rtol=1e-12)


def test_kappa_consistency():
    model = HopfieldModel(fixed_type_table([(1, 1), (1, -1)], [4, 4]), random_field_potential(2, 0.2), 1.1)
    r = RateModel.quenched(model)
    meas = LumpedMeasure(model)
    lat = meas.lattice
    for i in range(lat.size):
        K = lat.counts[i]
        interior = np.all((K > 0) & (K < model.table.counts))
        if not interior:
            continue
        x = lat.x[i]
        lhs = -model.n * r.rate_I(x) + log_kappa_hat(LatticePoint(tuple(K), model.table), r, meas)
        assert math.exp(lhs - meas.log_weights[i]) == pytest.approx(1.0, abs=1e-10)


def test_kappa_stirling_scaling_without_potential():
    for n in (200, 1000, 4000):
        model = HopfieldModel(fixed_type_table([(1,)], [n]), ZERO, 1.0)
        r = RateModel.quenched(model)
        meas = LumpedMeasure(model)
        k = kappa_hat(LatticePoint((n // 2,), model.table), r, meas)
        assert k / math.sqrt(2 / (math.pi * n)) == pytest.approx(1.0, abs=1.0 / n)


def test_single_element_fiber_kappa_depends_only_on_x():
    model = HopfieldModel(fixed_type_table([(1,)], [30]), hopfield_potential(1), 1.0)
    r = RateModel.quenched(model)
    meas = LumpedMeasure(model)
    Y = LatticePoint((20,), model.table)
    assert log_kappa_hat(Y, r, meas) == pytest.approx(meas.log_weights[20] + 30 * r.rate_I([1 / 3]), abs=1e-12)


def test_pullback_mode_hessian_has_a_kernel():
    model = random_field_cw(40)
    table = model.table
    r = RateModel.quenched(model)
    Y = counts_to_y(np.array([12, 9]), table)
    _, _, Hp = rate_hat_and_hessian(Y, r, table, "paper")
    J = projection_matrix(table)
    _, _, HI, _ = r.rate_I_derivatives(J @ Y)
    np.testing.assert_allclose(Hp, J.T @ HI @ J, atol=1e-12)
    eig = np.linalg.eigvalsh(Hp)
    small = np.sum(np.abs(eig) <= 1e-8 * np.abs(eig).max())
    assert small == table.L - np.linalg.matrix_rank(J.T @ HI @ J)
    one = HopfieldModel(fixed_type_table([(1,)], [40]), hopfield_potential(1), 1.0)
    r1 = RateModel.quenched(one)
    y1 = counts_to_y(np.array([25]), one.table)
    _, _, H1 = rate_hat_and_hessian(y1, r1, one.table, "paper")
    x1 = projection_matrix(one.table) @ y1
    assert H1[0, 0] == pytest.approx(r1.rate_I_derivatives(x1)[2][0, 0], rel=1e-12)  # J = [1, -1]


def test_exact_mode_hessian_finite_differences_and_entropy_correction():
    model = random_field_cw(60)
    table = model.table
    r = RateModel.quenched(model)
    meas = LumpedMeasure(model)
    K = np.array([22.0, 17.0])
    y = counts_to_y(K, table)
    val, g, H = rate_hat_and_hessian(y, r, table, "exact", meas)
    # value is -(1/n) log Q̂ at real counts
    assert val == pytest.approx(-float(meas.log_weight(K)) / table.n, rel=1e-12)
    # second derivative of -(1/n) log Q̂ along a tangent step direction, in Y units
    for a in range(table.n_types):
        d = np.zeros(table.n_types)
        d[a] = 1.0
        h = 1e-2
        f = lambda s: -float(meas.log_weight(K + s * d)) / table.n
        second = (f(h) - 2 * f(0) + f(-h)) / h ** 2 * table.n ** 2  # per unit of Y_a^+
        e = np.zeros(table.L)
        e[2 * a], e[2 * a + 1] = 1.0, -1.0
        assert e @ H @ e == pytest.approx(second, rel=1e-4)
    with pytest.raises(ValueError):
        rate_hat_and_hessian(counts_to_y(np.array([0.0, 17.0]), table), r, table, "exact", meas)


def test_annealed_rate_product_law():
    from metastable_hopfield.disorder import PatternDistribution
    d = [PatternDistribution.uniform([-1, 1]), PatternDistribution((-1, 1), (0.2, 0.8))]
    r = RateModel.annealed(d, 1.0, hopfield_potential(2))
    assert r.types.shape == (4, 2)
    assert r.q.sum() == pytest.approx(1.0)
    assert sorted(np.round(r.q, 12).tolist()) == [0.1, 0.1, 0.4, 0.4]


def test_rate_model_requires_spanning_types():
    t = fixed_type_table([(1, 1), (-1, -1)], [3, 3])
    with pytest.raises(ValueError):
        RateModel.quenched(HopfieldModel(t, hopfield_potential(2), 1.0))


@given(st.floats(-0.95, 0.95), st.floats(-0.95, 0.95))
def test_rate_function_nonnegative(x1, x2):
    r = _RFCW_RATE
    x = np.array([x1, x2])
    v = r.rate_I(x)
    assert v >= -1e-10


_RFCW_RATE = RateModel.quenched(random_field_cw(40))


def test_exact_minus_pullback_hessian_at_fiber_optimum():
    """At the max-entropy point of a fibre the exact Hessian dominates the contracted one up to O(1/n).

    The max-entropy point has Y_a^+ = q_a (1 + tanh<t*, a>) / 2 with t* the Legendre dual of x.
    With three types in two dimensions the fibre is a segment and the surplus curvature along it is O(1).
    """
    three = [(1, 1), (1, -1), (-1, 0)]
    scaled = {}
    for n in (210, 2100):
        for model in (random_field_cw(n), HopfieldModel(fixed_type_table(three, [n // 3] * 3),
                                                        hopfield_potential(2), 1.0)):
            r = RateModel.quenched(model)
            t = r.legendre(np.array([0.3, -0.2])).t
            K = model.table.counts * (1 + np.tanh(model.table.types @ t)) / 2
            y = counts_to_y(K, model.table)
            np.testing.assert_allclose(projection_matrix(model.table) @ y, [0.3, -0.2], atol=1e-12)
            _, _, He = rate_hat_and_hessian(y, r, model.table, "exact")
            _, _, Hp = rate_hat_and_hessian(y, r, model.table, "paper")
            eig = np.linalg.eigvalsh(He - Hp)
            assert n * eig.min() >= -100.0
            scaled.setdefault(model.table.n_types, []).append(n * eig.min())
            if model.table.n_types == 3:
                assert eig.max() > 0.5
    for vals in scaled.values():  # the negative part is a genuine 1/n term, not O(1)
        assert vals[1] == pytest.approx(vals[0], rel=0.05)
