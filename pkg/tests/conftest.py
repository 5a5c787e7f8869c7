import numpy as np
import pytest

from hyperstab.kernels import (TriGrid, solve_control_kernels,
                               solve_coupling_terms, solve_observer_kernels)
from hyperstab.model import PlantModel
from hyperstab.numerics import SampledFunction


def make_scalar_model(**overrides):
    """n = m = p = q = 1 test plant with mild in-domain coupling."""
    base = dict(
        lam=[1.0], mu=[1.0],
        Sigma_pp=SampledFunction.zeros((1, 1)),
        Sigma_pm=SampledFunction.constant([[0.3]]),
        Sigma_mp=SampledFunction.constant([[0.25]]),
        Sigma_mm=SampledFunction.zeros((1, 1)),
        A0=[[0.3]], E0=[[0.5]], C0=[[1.0]], A1=[[-0.4]],
        E1=[[0.8]], C1=[[0.4]], R=[[0.6]], Q=[[0.5]],
    )
    base.update(overrides)
    return PlantModel(**base)


def make_demo_model(**overrides):
    """n = 2, m = 1, p = q = 1 plant with an unstable actuator ODE."""
    base = dict(
        lam=[1.0, 2.0], mu=[1.0],
        Sigma_pp=SampledFunction.constant([[0.0, 0.15], [-0.1, 0.0]]),
        Sigma_pm=SampledFunction.constant([[0.3], [-0.2]]),
        Sigma_mp=SampledFunction.constant([[0.2, 0.1]]),
        Sigma_mm=SampledFunction.zeros((1, 1)),
        A0=[[0.5]], E0=[[0.4]], C0=[[0.5], [0.2]], A1=[[-0.5]],
        E1=[[0.6, 0.3]], C1=[[0.5]], R=[[0.5, 0.4]], Q=[[0.4], [0.3]],
    )
    base.update(overrides)
    return PlantModel(**base)


def random_target_state(model, grid, rng, unit_norm=True):
    """Smooth random target-coordinate state (seeded Fourier modes)."""
    from hyperstab.kernels import TargetState
    from hyperstab.model import PlantState, chi_norm

    xs = grid.xs

    def field(dim):
        vals = np.zeros((xs.size, dim))
        for k in range(1, 4):
            amp = rng.standard_normal((2, dim)) / k
            vals += (amp[0] * np.cos(np.pi * k * xs[:, None])
                     + amp[1] * np.sin(np.pi * k * xs[:, None]))
        return SampledFunction(xs, vals)

    state = TargetState(xi=rng.standard_normal(model.p),
                        alpha=field(model.n), beta=field(model.m),
                        X1=rng.standard_normal(model.q))
    if unit_norm:
        as_plant = PlantState(X0=state.xi, u=state.alpha, v=state.beta,
                              X1=state.X1)
        scale = 1.0 / chi_norm(as_plant)
        state = TargetState(
            xi=scale * state.xi,
            alpha=SampledFunction(xs, scale * state.alpha.values),
            beta=SampledFunction(xs, scale * state.beta.values),
            X1=scale * state.X1)
    return state


@pytest.fixture(scope="session")
def scalar_model():
    return make_scalar_model()


@pytest.fixture(scope="session")
def demo_model():
    return make_demo_model()


@pytest.fixture(scope="session")
def grid201():
    return TriGrid(201)


@pytest.fixture(scope="session")
def scalar_kernels(scalar_model, grid201):
    return solve_observer_kernels(scalar_model, grid201)


@pytest.fixture(scope="session")
def scalar_couplings(scalar_model, scalar_kernels, grid201):
    return solve_coupling_terms(scalar_model, scalar_kernels, grid201)


@pytest.fixture(scope="session")
def scalar_control(scalar_model, scalar_couplings, grid201):
    return solve_control_kernels(scalar_couplings, scalar_model, grid201)


@pytest.fixture(scope="session")
def demo_kernels(demo_model, grid201):
    return solve_observer_kernels(demo_model, grid201)


@pytest.fixture(scope="session")
def demo_couplings(demo_model, demo_kernels, grid201):
    return solve_coupling_terms(demo_model, demo_kernels, grid201)


@pytest.fixture(scope="session")
def demo_control(demo_model, demo_couplings, grid201):
    return solve_control_kernels(demo_couplings, demo_model, grid201)
