import numpy as np
import pytest

from hyperstab.kernels import (TargetState, TriGrid, apply_T, apply_T1,
                               build_transform_ops, invert_T, invert_T1,
                               solve_control_kernels, solve_coupling_terms,
                               solve_observer_kernels)
from hyperstab.model import PlantState, chi_norm
from hyperstab.numerics import SampledFunction, trapezoid_weights

from conftest import make_demo_model, make_scalar_model, random_target_state


def _chi_of_target(state):
    return chi_norm(PlantState(X0=state.xi, u=state.alpha, v=state.beta,
                               X1=state.X1))


# ---------------------------------------------------------------------------
# observer kernels: closed forms
# ---------------------------------------------------------------------------

def test_zero_coupling_zero_kernels():
    model = make_scalar_model(
        Sigma_pm=SampledFunction.zeros((1, 1)),
        Sigma_mp=SampledFunction.zeros((1, 1)),
        A1=[[0.0]], E0=[[0.0]])
    grid = TriGrid(51)
    ks = solve_observer_kernels(model, grid)
    assert np.max(np.abs(ks.L)) <= 1e-12
    assert np.max(np.abs(ks.gamma_alpha.values)) <= 1e-12
    assert np.allclose(ks.gamma_beta.values, model.C1, atol=1e-12)
    assert np.max(np.abs(ks.L1.values)) <= 1e-12


def test_zero_sigma_L2_exponential():
    model = make_scalar_model(
        Sigma_pm=SampledFunction.zeros((1, 1)),
        Sigma_mp=SampledFunction.zeros((1, 1)),
        A0=[[0.7]], E0=[[0.5]], mu=[1.3])
    grid = TriGrid(201)
    ks = solve_observer_kernels(model, grid)
    xs = grid.xs
    mu = 1.3
    exact = (0.5 / mu) * np.exp(-0.7 * xs / mu)
    assert np.max(np.abs(ks.L2.values[:, 0, 0] - exact)) <= 1e-6
    assert np.max(np.abs(ks.L)) <= 1e-10  # no in-domain coupling, no kernel


def test_jump_condition_residual(demo_model, demo_kernels):
    assert demo_kernels.jump_residual(demo_model) <= 1e-6


def test_scalar_jump_condition_residual(scalar_model, scalar_kernels):
    assert scalar_kernels.jump_residual(scalar_model) <= 1e-6


def test_scalar_kernel_grid_refinement_self_oracle():
    # constant plus-minus coupling only; compare against a 4x finer solve
    sigma = 0.5
    model = make_scalar_model(
        Sigma_pm=SampledFunction.constant([[sigma]]),
        Sigma_mp=SampledFunction.zeros((1, 1)))
    coarse = solve_observer_kernels(model, TriGrid(101))
    fine = solve_observer_kernels(model, TriGrid(401))
    # compare Lab on the coarse nodes
    step = 4
    diff = np.abs(coarse.Lab[:, :, 0, 0]
                  - fine.Lab[::step, ::step, 0, 0])
    iu = np.triu_indices(101)
    assert np.max(diff[iu]) <= 4e-3 * sigma


@pytest.mark.slow
def test_kernel_first_order_convergence():
    model = make_scalar_model()
    ref = solve_observer_kernels(model, TriGrid(801))
    errs = []
    for num, step in ((101, 8), (201, 4)):
        ks = solve_observer_kernels(model, TriGrid(num))
        iu = np.triu_indices(num)
        diff = np.abs(ks.L[:, :, 0, 1] - ref.L[::step, ::step, 0, 1])
        errs.append(np.max(diff[iu]))
    assert errs[0] / errs[1] >= 1.8


# ---------------------------------------------------------------------------
# coupling terms
# ---------------------------------------------------------------------------

def test_couplings_zero_sigma_zero_A1():
    model = make_demo_model(
        Sigma_pp=SampledFunction.zeros((2, 2)),
        Sigma_pm=SampledFunction.zeros((2, 1)),
        Sigma_mp=SampledFunction.zeros((1, 2)),
        A1=[[0.0]], E0=[[0.0]])
    grid = TriGrid(101)
    ks = solve_observer_kernels(model, grid)
    cp = solve_coupling_terms(model, ks, grid)
    assert np.max(np.abs(cp.G1.values)) <= 1e-10
    # G2 = -gamma_beta E1 = -C1 E1
    assert np.allclose(cp.G2.values, -(model.C1 @ model.E1), atol=1e-10)
    assert np.max(np.abs(cp.F_alpha.values)) <= 1e-10


def test_couplings_f_alpha_all_terms_vanish():
    model = make_scalar_model(
        Sigma_pm=SampledFunction.zeros((1, 1)),
        Sigma_mp=SampledFunction.zeros((1, 1)),
        Q=[[0.0]], C0=[[0.0]])
    grid = TriGrid(51)
    ks = solve_observer_kernels(model, grid)
    cp = solve_coupling_terms(model, ks, grid)
    assert np.max(np.abs(cp.F_alpha.values)) <= 1e-12


def test_f_alpha_strictly_lower(demo_couplings):
    vals = demo_couplings.F_alpha.values
    iu, ju = np.triu_indices(vals.shape[1])
    assert np.max(np.abs(vals[:, iu, ju])) == 0.0


def test_g_equation_residual_on_finer_grid(scalar_model, scalar_kernels,
                                           scalar_couplings):
    # re-evaluate the Volterra identity for (G1; G2) at the original nodes
    # with quadrature refined to a 2x finer grid
    model, ks, cp = scalar_model, scalar_kernels, scalar_couplings
    xs = ks.grid.xs
    fine = np.linspace(0.0, 1.0, 2 * xs.size - 1)
    G = np.concatenate([cp.G1.values, cp.G2.values], axis=1)
    Gfn = SampledFunction(xs, G)
    Lam_p = np.diag(model.lam)
    Lam_m = np.diag(model.mu)
    n = model.n

    res = np.zeros_like(G)
    for k in range(xs.size - 1):
        nus = fine[2 * k:]
        Lrow = SampledFunction(xs[k:], ks.L[k, k:]).at(nus)
        w = trapezoid_weights(nus)
        integral = np.einsum("a,aij,ajc->ic", w, Lrow, Gfn.at(nus))
        L_at_1 = ks.L[k, -1]
        ga = ks.gamma_alpha.values[k]
        gb = ks.gamma_beta.values[k]
        forcing = np.concatenate([
            -L_at_1[:n, :n] @ Lam_p + L_at_1[:n, n:] @ Lam_m @ model.R
            - ga @ model.E1,
            -L_at_1[n:, :n] @ Lam_p + L_at_1[n:, n:] @ Lam_m @ model.R
            - gb @ model.E1])
        res[k] = G[k] - integral - forcing
    assert np.max(np.abs(res)) <= 1e-5


# ---------------------------------------------------------------------------
# control kernels
# ---------------------------------------------------------------------------

def test_control_kernels_zero_G1(demo_model, demo_couplings):
    grid = TriGrid(101)
    ks = solve_observer_kernels(demo_model, grid)
    cp = solve_coupling_terms(demo_model, ks, grid)
    from hyperstab.kernels import CouplingFunctions
    cp0 = CouplingFunctions(
        G1=SampledFunction(grid.xs, np.zeros_like(cp.G1.values)),
        G2=cp.G2, G3=cp.G3, G4=cp.G4, F_alpha=cp.F_alpha, F_beta=cp.F_beta)
    ck = solve_control_kernels(cp0, demo_model, grid)
    assert np.max(np.abs(ck.L_check)) <= 1e-12
    assert np.max(np.abs(ck.G_check.values)) <= 1e-12
    assert np.max(np.abs(ck.L_bar)) <= 1e-12
    assert np.max(np.abs(ck.G5.values)) <= 1e-12
    assert np.allclose(ck.F_alpha_bar.values, cp.F_alpha.values, atol=1e-12)


def test_control_kernels_scalar_degenerate(scalar_model, scalar_couplings,
                                           scalar_control):
    ck = scalar_control
    assert np.max(np.abs(ck.G_check.values)) == 0.0
    assert np.max(np.abs(ck.L_bar)) == 0.0
    # datum-only transport: Lcheck(x, y) = G1(x + (1-y)) / lambda
    xs = ck.grid.xs
    g1 = scalar_couplings.G1.values[:, 0, 0]
    ix, iy = 30, 120
    expected = np.interp(xs[ix] + (1 - xs[iy]), xs, g1) / 1.0
    assert np.isclose(ck.L_check[ix, iy, 0, 0], expected, atol=1e-12)


def test_control_triangular_structure(demo_control):
    ck = demo_control
    n = ck.n
    for i in range(n):
        for j in range(i + 1, n):
            assert np.max(np.abs(ck.L_check[:, :, i, j])) == 0.0
    for i in range(n):
        for j in range(i + 1):
            assert np.max(np.abs(ck.L_bar[:, :, i, j])) == 0.0
            assert np.max(np.abs(ck.G_check.values[:, i, j])) == 0.0
            assert np.max(np.abs(ck.G5.values[:, i, j])) == 0.0
    # L_bar(1, y) = 0
    assert np.max(np.abs(ck.L_bar[-1])) == 0.0


def test_g_check_residual_on_finer_grid(demo_model):
    # n = 2 with constant G1: the G_check Volterra identity re-evaluated at
    # the original nodes with 2x finer quadrature
    from hyperstab.kernels import CouplingFunctions
    grid = TriGrid(201)
    xs = grid.xs
    G1c = np.array([[0.2, 0.3], [0.1, -0.2]])
    cp = CouplingFunctions(
        G1=SampledFunction.constant(G1c, num=xs.size),
        G2=SampledFunction.zeros((1, 2), num=xs.size),
        G3=np.zeros((1, 2)), G4=np.zeros((1, 1)),
        F_alpha=SampledFunction.zeros((2, 2), num=xs.size),
        F_beta=SampledFunction.zeros((2, 1), num=xs.size))
    ck = solve_control_kernels(cp, demo_model, grid)
    fine = np.linspace(0.0, 1.0, 2 * xs.size - 1)
    gfn = SampledFunction(xs, ck.G_check.values[:, 0, 1])
    res = []
    for k in range(xs.size - 1):
        nus = fine[2 * k:]
        lrow = SampledFunction(xs[k:], ck.L_check[k, k:, 0, 0]).at(nus)
        w = trapezoid_weights(nus)
        res.append(gfn.values[k] - G1c[0, 1] - np.sum(w * lrow * gfn.at(nus)))
    assert np.max(np.abs(res)) <= 1e-6


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def test_transform_identity_with_zero_kernels():
    model = make_scalar_model(
        Sigma_pm=SampledFunction.zeros((1, 1)),
        Sigma_mp=SampledFunction.zeros((1, 1)),
        A1=[[0.0]], E0=[[0.0]], C1=[[0.0]])
    grid = TriGrid(51)
    ks = solve_observer_kernels(model, grid)
    rng = np.random.default_rng(0)
    state = random_target_state(model, grid, rng)
    phys = apply_T(ks, state)
    assert np.allclose(phys.u.values, state.alpha.values, atol=1e-10)
    assert np.allclose(phys.v.values, state.beta.values, atol=1e-10)
    assert np.allclose(phys.X0, state.xi, atol=1e-10)


def test_transform_linearity_zero_state(scalar_kernels, scalar_model):
    grid = scalar_kernels.grid
    zero = TargetState(xi=np.zeros(1),
                       alpha=SampledFunction.zeros((1,), num=grid.n_points),
                       beta=SampledFunction.zeros((1,), num=grid.n_points),
                       X1=np.zeros(1))
    phys = apply_T(scalar_kernels, zero)
    assert chi_norm(phys) == 0.0


@pytest.mark.parametrize("which", ["scalar", "demo"])
def test_transform_round_trip(which, request):
    model = request.getfixturevalue(f"{which}_model")
    ks = request.getfixturevalue(f"{which}_kernels")
    ops = build_transform_ops(ks)
    rng = np.random.default_rng(42)
    for _ in range(5):
        state = random_target_state(model, ks.grid, rng)
        phys = apply_T(ks, state, ops)
        back = invert_T(ks, phys, ops)
        err = _chi_of_target(TargetState(
            xi=back.xi - state.xi,
            alpha=SampledFunction(ks.grid.xs,
                                  back.alpha.values - state.alpha.values),
            beta=SampledFunction(ks.grid.xs,
                                 back.beta.values - state.beta.values),
            X1=back.X1 - state.X1))
        assert err <= 1e-6


def test_invert_T_picard_matches_dense(scalar_model, scalar_kernels):
    rng = np.random.default_rng(5)
    state = random_target_state(scalar_model, scalar_kernels.grid, rng)
    phys = apply_T(scalar_kernels, state)
    a = invert_T(scalar_kernels, phys)
    b = invert_T(scalar_kernels, phys, use_picard=True)
    assert np.max(np.abs(a.alpha.values - b.alpha.values)) <= 1e-8
    assert np.max(np.abs(a.xi - b.xi)) <= 1e-8


def test_T1_round_trip_demo(demo_model, demo_kernels, demo_control):
    ops = build_transform_ops(demo_kernels, demo_control)
    rng = np.random.default_rng(7)
    for _ in range(5):
        state = random_target_state(demo_model, demo_kernels.grid, rng)
        fwd = apply_T1(demo_control, state, ops)
        back = invert_T1(demo_control, fwd, ops)
        assert np.max(np.abs(back.alpha.values - state.alpha.values)) <= 1e-6
        back2 = apply_T1(demo_control, invert_T1(demo_control, state, ops),
                         ops)
        assert np.max(np.abs(back2.alpha.values - state.alpha.values)) <= 1e-6
        # xi, beta, X1 pass through untouched
        assert np.array_equal(fwd.beta.values, state.beta.values)
        assert np.array_equal(fwd.xi, state.xi)


def test_T1_identity_scalar(scalar_model, scalar_control):
    # n = 1: the Fredholm part is empty, pure Volterra transform
    assert np.max(np.abs(scalar_control.L_bar)) == 0.0
