import numpy as np
import pytest

from wlattice.decay import ExcitedSites, LatticeGeometry, make_decay_function
from wlattice.manifold import solve_manifold
from wlattice.models import RotorSaddle
from wlattice.splitting import compute_splitting, estimate_rates
from wlattice.torus import initial_torus, solve_invariant_torus

GOLDEN = (np.sqrt(5) - 1) / 2
NONLIN = {"x": [[2, 0, 1.0]], "y": [[0, 2, 0.5]]}


def rotor_model(eps, R=4, lam=0.5, omega=(GOLDEN,), nonlinearity=NONLIN, alpha=1.0, p=2.0):
    geo = LatticeGeometry(1, R)
    gamma = make_decay_function(alpha, p, geo)
    exc = ExcitedSites.from_list([[0]], geo)
    return RotorSaddle(gamma, lam, list(omega), eps, exc, nonlinearity=nonlinearity)


class Run:
    """Torus, splitting, rates and manifold of one rotor-saddle configuration."""

    def __init__(self, eps, R=4, N_theta=32, L=5, style="polynomial_P"):
        self.model = rotor_model(eps, R)
        self.gamma = self.model.gamma
        self.excited = self.model.excited
        self.K = solve_invariant_torus(self.model, initial_torus(self.model, N_theta))
        self.spl = compute_splitting(self.model, self.K)
        self.rates = estimate_rates(self.spl)
        self.pair = solve_manifold(self.model, self.K, self.spl, L=L, style=style)


@pytest.fixture(scope="session")
def run0():
    return Run(0.0)


@pytest.fixture(scope="session")
def run5():
    return Run(0.005)


@pytest.fixture(scope="session")
def run5_R8():
    return Run(0.005, R=8)
