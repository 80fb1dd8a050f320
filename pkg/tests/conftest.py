import math

import numpy as np
import pytest
from hypothesis import settings

from metastable_hopfield.chain import LatticeChain
from metastable_hopfield.disorder import fixed_type_table
from metastable_hopfield.model import HopfieldModel, PolynomialPotential, hopfield_potential, random_field_potential

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def benchmark_model(n: int, beta: float = 1.0) -> HopfieldModel:
    """p = 1, v = x^2, pattern -1 / +1 with frequencies 0.45 / 0.55."""
    n0 = int(math.floor(0.45 * n + 0.5))
    return HopfieldModel(fixed_type_table([(-1,), (1,)], [n0, n - n0]), hopfield_potential(1), beta)


def curie_weiss(n: int, beta: float = 1.0) -> HopfieldModel:
    return HopfieldModel(fixed_type_table([(1,)], [n]), hopfield_potential(1), beta)


def random_field_cw(n: int, beta: float = 1.5, h: float = 0.1) -> HopfieldModel:
    return HopfieldModel(fixed_type_table([(1, 1), (1, -1)], [n // 2, n - n // 2]),
                         random_field_potential(2, h), beta)


TWO_GATE_TERMS = {(2, 0): 1.8, (0, 2): 1.6, (4, 0): -2.0, (2, 2): -4.0, (0, 4): -2.0, (1, 0): 0.03}


def two_gate(n: int) -> HopfieldModel:
    return HopfieldModel(fixed_type_table([(1, 1), (1, -1)], [n // 2, n // 2]),
                         PolynomialPotential.from_terms(2, TWO_GATE_TERMS), 1.0)


# well bottom of the fair 1D model: root of x = tanh(2x)
M_STAR = 0.9575040240772687


@pytest.fixture(scope="session")
def bench_chain_50():
    return LatticeChain(benchmark_model(50))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240611)
