"""Backstepping kernels on the triangular domain and the state transforms.

The observer-side kernel family (the big coupled block kernel L, the ODE
injection kernels L1/L2 and the boundary kernels gamma) satisfies a Goursat
problem on the triangle x <= nu <= 1: transport along straight
characteristics with a matrix source Sigma(x) L, data prescribed on the
diagonal (jump condition), on x = 0 (closure / free data) and on nu = 1
(free data).  It is solved by Picard iteration over the source coupling:
each sweep re-marches every scalar component along its characteristic
family, one grid column per step, with linear interpolation of off-grid
foot points and trapezoidal source accumulation along the trace.

The control-side family (L_check / G_check / L_bar / G5) is triangular in
the component indices and is computed by the constructive column sweep:
explicit characteristics for the transport parts and second-kind Volterra
solves for the coupled columns.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from hyperstab.model import PlantModel, PlantState, model_to_json
from hyperstab.numerics import (ConvergenceError, SampledFunction,
                                trapezoid_weights, volterra2_solve)

__all__ = [
    "TriGrid",
    "KernelSetObserver",
    "CouplingFunctions",
    "KernelSetControl",
    "TargetState",
    "solve_observer_kernels",
    "solve_coupling_terms",
    "solve_control_kernels",
    "apply_T",
    "invert_T",
    "apply_T1",
    "invert_T1",
    "TransformOps",
    "build_transform_ops",
    "export_observer_kernels_csv",
    "export_control_kernels_csv",
]


@dataclass(frozen=True)
class TriGrid:
    """Uniform grid with N points per axis covering {0 <= x <= nu <= 1}."""

    n_points: int

    def __post_init__(self):
        if self.n_points < 3:
            raise ValueError("TriGrid needs at least 3 points per axis")

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_points)

    @property
    def h(self) -> float:
        return 1.0 / (self.n_points - 1)


@dataclass(frozen=True)
class KernelSetObserver:
    """Solution of the observer-side kernel equations on a TriGrid.

    `L` holds the (n+m) x (n+m) block kernel with index layout
    L[ix, inu, I, J] valid on ix <= inu.  `gamma` stacks (gamma_alpha;
    gamma_beta); `L1`, `L2` are the ODE back-injection kernels; `Laa0`
    etc. are the x = 0 traces used by boundary couplings (closure values
    on the upper-triangular components).
    """

    grid: TriGrid
    n: int
    m: int
    L: np.ndarray
    gamma: SampledFunction
    L1: SampledFunction
    L2: SampledFunction
    Laa0: SampledFunction
    Lab0: SampledFunction
    Lba0: SampledFunction
    Lbb0: SampledFunction
    sweeps: int

    @property
    def Laa(self) -> np.ndarray:
        return self.L[:, :, : self.n, : self.n]

    @property
    def Lab(self) -> np.ndarray:
        return self.L[:, :, : self.n, self.n:]

    @property
    def Lba(self) -> np.ndarray:
        return self.L[:, :, self.n:, : self.n]

    @property
    def Lbb(self) -> np.ndarray:
        return self.L[:, :, self.n:, self.n:]

    @property
    def gamma_alpha(self) -> SampledFunction:
        return SampledFunction(self.gamma.grid, self.gamma.values[:, : self.n])

    @property
    def gamma_beta(self) -> SampledFunction:
        return SampledFunction(self.gamma.grid, self.gamma.values[:, self.n:])

    def jump_residual(self, model: PlantModel) -> float:
        """max_x | Lambda L(x,x) - L(x,x) Lambda - Sigma(x) |_max."""
        xs = self.grid.xs
        spd = model.speeds
        diag = self.L[np.arange(xs.size), np.arange(xs.size)]
        res = spd[None, :, None] * diag - diag * spd[None, None, :]
        res -= model.sigma(xs)
        return float(np.max(np.abs(res)))


@dataclass(frozen=True)
class CouplingFunctions:
    """Derived couplings of the boundary-relocated target system."""

    G1: SampledFunction          # (n, n)
    G2: SampledFunction          # (m, n)
    G3: np.ndarray               # (p, n)
    G4: np.ndarray               # (p, q)
    F_alpha: SampledFunction     # (n, n), strictly lower triangular
    F_beta: SampledFunction      # (n, m)

    def zero_sources(self) -> "CouplingFunctions":
        """Copy with G1 = G2 = 0 (the autonomous estimation-error system)."""
        return CouplingFunctions(
            G1=SampledFunction(self.G1.grid, np.zeros_like(self.G1.values)),
            G2=SampledFunction(self.G2.grid, np.zeros_like(self.G2.values)),
            G3=self.G3, G4=self.G4,
            F_alpha=self.F_alpha, F_beta=self.F_beta)


@dataclass(frozen=True)
class KernelSetControl:
    """Solution of the control-side kernel equations.

    L_check is lower triangular in its component indices on the triangle,
    L_bar strictly upper triangular on the full unit square, G_check and G5
    strictly upper triangular sampled functions.
    """

    grid: TriGrid
    n: int
    L_check: np.ndarray          # (N, N, n, n) on x <= y
    G_check: SampledFunction     # (n, n)
    L_bar: np.ndarray            # (N, N, n, n) on the full square
    G5: SampledFunction          # (n, n)
    F_alpha_bar: SampledFunction  # (n, n)


@dataclass(frozen=True)
class TargetState:
    """Target-coordinate snapshot (xi, alpha, beta, X1)."""

    xi: np.ndarray
    alpha: SampledFunction
    beta: SampledFunction
    X1: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "xi",
                           np.atleast_1d(np.asarray(self.xi, dtype=float)))
        object.__setattr__(self, "X1",
                           np.atleast_1d(np.asarray(self.X1, dtype=float)))


# ---------------------------------------------------------------------------
# observer kernel solver
# ---------------------------------------------------------------------------

def _march_component(vals, S, xs, a, b, upstream_plus, march_forward,
                     diag_data, x0_data, top_zero):
    """One marching pass of a scalar kernel component along its family.

    vals, S : (N, N) arrays indexed [ix, inu], valid on ix <= inu
    a, b    : signed characteristic speeds in x and nu
    upstream_plus : sign of the accumulated source term
    march_forward : process columns left->right (dependence one column back)
                    or right->left (one column forward)
    diag_data : (N,) datum on the diagonal, or None
    x0_data   : (N,) datum on x = 0 (only for forward marches), or None
    top_zero  : nu = 1 carries zero free data (only for backward marches)
    """
    N = xs.size
    h = xs[1] - xs[0]
    out = vals
    if diag_data is not None:
        idx = np.arange(N)
        out[idx, idx] = diag_data
    if x0_data is not None:
        lo = 0 if diag_data is None else 1
        out[0, lo:] = x0_data[lo:]
    if top_zero:
        out[: N - 1, N - 1] = 0.0

    Sdiag = S[np.arange(N), np.arange(N)]
    if march_forward:
        c = b / a  # both speeds positive or both negative: c >= 1 here
        for ix in range(1, N):
            x = xs[ix]
            lo = ix if diag_data is None else ix + 1
            if lo >= N:
                continue
            nus = xs[lo:]
            nu_dep = nus - c * h
            col = out[ix - 1, ix - 1:]
            scol = S[ix - 1, ix - 1:]
            crossed = nu_dep < xs[ix - 1] - 1e-13
            dep_val = np.interp(nu_dep, xs[ix - 1:], col)
            dep_S = np.interp(nu_dep, xs[ix - 1:], scol)
            dx = np.full(nus.shape, h)
            if np.any(crossed):
                # characteristic met the diagonal between columns
                t_star = (nus[crossed] - x) / (c - 1.0)
                x_star = x - t_star
                dep_val[crossed] = np.interp(x_star, xs, diag_data)
                dep_S[crossed] = np.interp(x_star, xs, Sdiag)
                dx[crossed] = t_star
            ds = dx / abs(a)
            node_S = S[ix, lo:]
            out[ix, lo:] = dep_val + upstream_plus * ds * 0.5 * (dep_S + node_S)
    else:
        c = b / abs(a)  # c < 1 (may be negative)
        for ix in range(N - 2, -1, -1):
            x = xs[ix]
            lo = ix if diag_data is None else ix + 1
            hi = N - 1 if top_zero else N
            if lo >= hi:
                continue
            nus = xs[lo:hi]
            nu_dep = nus + c * h
            col = out[ix + 1, ix + 1:]
            scol = S[ix + 1, ix + 1:]
            dep_val = np.interp(nu_dep, xs[ix + 1:], col)
            dep_S = np.interp(nu_dep, xs[ix + 1:], scol)
            dx = np.full(nus.shape, h)
            with np.errstate(divide="ignore", invalid="ignore"):
                t_diag = np.where(c < 1.0, (nus - x) / (1.0 - c), np.inf)
                t_top = np.where(c > 0.0, (1.0 - nus) / c, np.inf)
            t_star = np.minimum(t_diag, t_top)
            crossed = t_star < h - 1e-13
            if np.any(crossed):
                hit_diag = crossed & (t_diag <= t_top)
                if np.any(hit_diag):
                    x_star = x + t_diag[hit_diag]
                    dval = (np.interp(x_star, xs, diag_data)
                            if diag_data is not None else
                            np.zeros(x_star.shape))
                    dep_val[hit_diag] = dval
                    dep_S[hit_diag] = np.interp(x_star, xs, Sdiag)
                hit_top = crossed & ~(t_diag <= t_top)
                if np.any(hit_top):
                    dep_val[hit_top] = 0.0
                    x_star = x + t_top[hit_top]
                    dep_S[hit_top] = np.interp(x_star, xs, S[:, N - 1])
                dx[crossed] = t_star[crossed]
            ds = dx / abs(a)
            node_S = S[ix, lo:hi]
            out[ix, lo:hi] = dep_val + upstream_plus * ds * 0.5 * (dep_S + node_S)
    return out


def _rk4_path(f, y0, xs, forward=True):
    """RK4 integration of y' = f(x, y) along the grid xs."""
    ys = np.empty((xs.size,) + np.shape(y0))
    order = range(xs.size) if forward else range(xs.size - 1, -1, -1)
    idxs = list(order)
    ys[idxs[0]] = y0
    for k in range(len(idxs) - 1):
        i0, i1 = idxs[k], idxs[k + 1]
        x0, x1 = xs[i0], xs[i1]
        hstep = x1 - x0
        y = ys[i0]
        k1 = f(x0, y)
        k2 = f(x0 + hstep / 2, y + hstep / 2 * k1)
        k3 = f(x0 + hstep / 2, y + hstep / 2 * k2)
        k4 = f(x1, y + hstep * k3)
        ys[i1] = y + hstep / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return ys


def solve_observer_kernels(model: PlantModel, grid: TriGrid,
                           tol: float = 1e-9,
                           max_sweeps: int = 300) -> KernelSetObserver:
    """Solve the coupled observer kernel equations by Picard sweeps.

    Free boundary data (upper x=0 components of the minus-minus block and
    the strictly-lower nu=1 components of the same-speed blocks) are set to
    zero.  Raises ConvergenceError if the sweep budget is exhausted.
    """
    n, m, p, q = model.n, model.m, model.p, model.q
    K = n + m
    N = grid.n_points
    xs = grid.xs
    spd = model.speeds
    sigma_grid = model.sigma(xs)                       # (N, K, K)

    # gamma decouples from everything else: one backward RK4 solve
    gamma_end = np.vstack([np.zeros((n, q)), model.C1])
    inv_lambda = 1.0 / spd

    def gamma_rhs(x, g):
        return inv_lambda[:, None] * (model.sigma(x) @ g - g @ model.A1)

    gamma_vals = _rk4_path(gamma_rhs, gamma_end, xs, forward=False)
    gamma = SampledFunction(xs, gamma_vals)

    # diagonal jump data (fixed): (s_I - s_J) L_IJ(x,x) = Sigma_IJ(x)
    diag_data = np.zeros((N, K, K))
    for I in range(K):
        for J in range(K):
            if abs(spd[I] - spd[J]) > 1e-14:
                diag_data[:, I, J] = sigma_grid[:, I, J] / (spd[I] - spd[J])

    L = np.zeros((N, N, K, K))
    L1 = np.zeros((N, p, n))
    L2 = np.zeros((N, p, m))
    inv_lam_plus = 1.0 / model.lam
    inv_lam_minus = 1.0 / model.mu

    sweeps = 0
    change = np.inf
    for sweep in range(max_sweeps):
        sweeps = sweep + 1
        S = np.einsum("xab,xybc->xyac", sigma_grid, L)
        Lba0_prev = SampledFunction(xs, L[0, :, n:, :n].copy())
        Lbb0_prev = _bb_x0_trace(L, xs, n, m)

        # ODE kernels, driven by the previous iterate's x=0 traces
        def l1_rhs(x, y):
            return (model.A0 @ y + model.E0 @ Lba0_prev.at(x)) * inv_lam_plus

        def l2_rhs(x, y):
            return -(model.A0 @ y + model.E0 @ Lbb0_prev.at(x)) * inv_lam_minus

        L1_new = _rk4_path(l1_rhs, np.zeros((p, n)), xs, forward=True)
        L2_new = _rk4_path(l2_rhs, model.E0 * inv_lam_minus, xs, forward=True)

        # closure data on x = 0 for the upper plus-plus components
        closure = (np.einsum("ab,xbj->xaj", model.Q, L[0, :, n:, :n])
                   + np.einsum("ab,xbj->xaj", model.C0, L1_new))

        L_new = L.copy()
        for I in range(K):
            for J in range(K):
                a, b = spd[I], spd[J]
                dd = diag_data[:, I, J] if abs(a - b) > 1e-14 else None
                if a > 0 and b > 0:
                    if a <= b:   # i <= j: forward march from x=0 closure
                        x0 = closure[:, I, J]
                        _march_component(L_new[:, :, I, J], S[:, :, I, J],
                                         xs, a, b, +1.0, True, dd, x0, False)
                    else:        # i > j: backward march from nu=1 / diagonal
                        _march_component(L_new[:, :, I, J], S[:, :, I, J],
                                         xs, a, b, -1.0, False, dd, None, True)
                elif a > 0 and b < 0:    # plus-minus: diagonal datum, exit side
                    _march_component(L_new[:, :, I, J], S[:, :, I, J],
                                     xs, a, b, -1.0, False, dd, None, False)
                elif a < 0 and b > 0:    # minus-plus: diagonal datum, entry side
                    _march_component(L_new[:, :, I, J], S[:, :, I, J],
                                     xs, a, b, +1.0, False, dd, None, False)
                else:                    # minus-minus
                    if abs(a) <= abs(b):  # i <= j: zero data on x=0
                        x0 = np.zeros(N)
                        _march_component(L_new[:, :, I, J], S[:, :, I, J],
                                         xs, a, b, -1.0, True, dd, x0, False)
                    else:                 # i > j: zero data on nu=1
                        _march_component(L_new[:, :, I, J], S[:, :, I, J],
                                         xs, a, b, +1.0, False, dd, None, True)

        change = max(float(np.max(np.abs(L_new - L))),
                     float(np.max(np.abs(L1_new - L1))),
                     float(np.max(np.abs(L2_new - L2))))
        L, L1, L2 = L_new, L1_new, L2_new
        if change <= tol:
            break
    else:
        raise ConvergenceError(
            f"kernel Picard sweeps did not converge (last change {change:.3e})",
            change)

    # x = 0 traces; upper plus-plus components take the closure limit
    Laa0_vals = L[0, :, :n, :n].copy()
    closure = (np.einsum("ab,xbj->xaj", model.Q, L[0, :, n:, :n])
               + np.einsum("ab,xbj->xaj", model.C0, L1))
    iu, ju = np.triu_indices(n)
    Laa0_vals[:, iu, ju] = closure[:, :n, :n][:, iu, ju]

    return KernelSetObserver(
        grid=grid, n=n, m=m, L=L, gamma=gamma,
        L1=SampledFunction(xs, L1), L2=SampledFunction(xs, L2),
        Laa0=SampledFunction(xs, Laa0_vals),
        Lab0=SampledFunction(xs, L[0, :, :n, n:].copy()),
        Lba0=SampledFunction(xs, L[0, :, n:, :n].copy()),
        Lbb0=_bb_x0_trace(L, xs, n, m),
        sweeps=sweeps)


def _bb_x0_trace(L, xs, n, m) -> SampledFunction:
    """x = 0 trace of the minus-minus block; at the corner the upper
    components take the zero free datum rather than the jump value."""
    vals = L[0, :, n:, n:].copy()
    iu, ju = np.triu_indices(m)
    vals[0, iu, ju] = 0.0
    return SampledFunction(xs, vals)


# ---------------------------------------------------------------------------
# coupling functions of the first target system
# ---------------------------------------------------------------------------

def solve_coupling_terms(model: PlantModel, kernels: KernelSetObserver,
                         grid: TriGrid) -> CouplingFunctions:
    """Assemble G1, G2 (stacked Volterra system), G3, G4 and F_alpha/F_beta."""
    n, m = model.n, model.m
    N = grid.n_points
    xs = grid.xs
    Lam_plus = np.diag(model.lam)
    Lam_minus = np.diag(model.mu)

    L_at_1 = kernels.L[:, N - 1]                     # L(x, 1), (N, K, K)
    ga = kernels.gamma_alpha.values                  # (N, n, q)
    gb = kernels.gamma_beta.values
    forcing = np.concatenate([
        -L_at_1[:, :n, :n] @ Lam_plus + L_at_1[:, :n, n:] @ Lam_minus @ model.R
        - ga @ model.E1,
        -L_at_1[:, n:, :n] @ Lam_plus + L_at_1[:, n:, n:] @ Lam_minus @ model.R
        - gb @ model.E1,
    ], axis=1)
    G = volterra2_solve(kernels.L, SampledFunction(xs, forcing),
                        bounds="upper")
    G1 = SampledFunction(xs, G.values[:, :n])
    G2 = SampledFunction(xs, G.values[:, n:])

    L1v, L2v = kernels.L1.values, kernels.L2.values
    inner = SampledFunction(xs, L1v @ G1.values + L2v @ G2.values)
    G3 = (L2v[-1] @ Lam_minus @ model.R - L1v[-1] @ Lam_plus
          + inner.integral())
    G4 = model.E0 @ kernels.gamma_beta.at(0.0)

    Fa = (kernels.Laa0.values
          - np.einsum("ab,xbj->xaj", model.Q, kernels.Lba0.values)
          - np.einsum("ab,xbj->xaj", model.C0, L1v))
    iu, ju = np.triu_indices(n)
    worst = float(np.max(np.abs(Fa[:, iu, ju]))) if iu.size else 0.0
    if worst > 1e-8:
        raise ConvergenceError(
            f"F_alpha upper-triangular residual {worst:.3e} exceeds 1e-8; "
            "kernel solve is inconsistent", worst)
    Fa[:, iu, ju] = 0.0

    Fb = (kernels.Lab0.values
          - np.einsum("ab,xbj->xaj", model.Q, kernels.Lbb0.values)
          - np.einsum("ab,xbj->xaj", model.C0, L2v))

    return CouplingFunctions(G1=G1, G2=G2, G3=np.atleast_2d(G3),
                             G4=np.atleast_2d(G4),
                             F_alpha=SampledFunction(xs, Fa),
                             F_beta=SampledFunction(xs, Fb))


# ---------------------------------------------------------------------------
# control-side kernels
# ---------------------------------------------------------------------------

def solve_control_kernels(couplings: CouplingFunctions, model: PlantModel,
                          grid: TriGrid) -> KernelSetControl:
    """Column sweep for L_check/G_check, then explicit L_bar, G5, F_alpha_bar.

    Column j of L_check takes its y = 1 datum from the already-known columns
    of G_check, is propagated along its straight characteristics (constant
    values; zero on paths that exit through the diagonal), after which the
    next G_check column follows from a second-kind Volterra solve.
    """
    n = model.n
    N = grid.n_points
    xs = grid.xs
    lam = model.lam
    W_upper = np.zeros((N, N))
    for i in range(N - 1):
        W_upper[i, i:] = trapezoid_weights(xs[i:])

    Lc = np.zeros((N, N, n, n))
    Gc = np.zeros((N, n, n))
    G1v = couplings.G1.values
    ix_grid, iy_grid = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
    tri = ix_grid <= iy_grid
    xv = xs[ix_grid[tri]]
    yv = xs[iy_grid[tri]]

    for j in range(n):
        if j > 0:
            # G_check column j couples its rows through L_check cols < j
            try:
                forcing = SampledFunction(xs, G1v[:, :j, j])
                col = volterra2_solve(Lc[:, :, :j, :j], forcing,
                                      bounds="upper")
            except ConvergenceError as err:
                raise ConvergenceError(
                    f"G_check column {j} did not converge", err.residual)
            Gc[:, :j, j] = col.values
        # y = 1 datum of L_check column j, rows i >= j
        datum = G1v[:, :, j] / lam[j]
        if j > 0:
            integrand = np.einsum("xyik,yk->xyi", Lc[:, :, :, :j],
                                  Gc[:, :j, j])
            datum = datum + np.einsum("xy,xyi->xi", W_upper,
                                      integrand) / lam[j]
        for i in range(j, n):
            s_top = (1.0 - yv) / lam[j]
            x_hit = np.minimum(xv + lam[i] * s_top, 1.0)
            vals = np.interp(x_hit, xs, datum[:, i])
            if lam[i] > lam[j]:
                s_diag = (yv - xv) / (lam[i] - lam[j])
                vals = np.where(s_diag < s_top, 0.0, vals)
            Lc[:, :, i, j][tri] = vals

    # L_bar on the full square: zero on paths exiting through x = 1,
    # G_check datum on y = 1
    Lbar = np.zeros((N, N, n, n))
    xg, yg = np.meshgrid(xs, xs, indexing="ij")
    for i in range(n):
        for j in range(i + 1, n):
            s_top = (1.0 - yg) / lam[j]
            s_right = (1.0 - xg) / lam[i]
            x_hit = np.minimum(xg + lam[i] * s_top, 1.0)
            vals = np.interp(x_hit.ravel(), xs,
                             Gc[:, i, j] / lam[j]).reshape(N, N)
            # ties exit through the corner; the x = 1 edge condition wins
            Lbar[:, :, i, j] = np.where(s_right <= s_top, 0.0, vals)
            Lbar[:, N - 1, i, j] = Gc[:, i, j] / lam[j]
            Lbar[N - 1, :, i, j] = 0.0

    G5_forcing = SampledFunction(xs, Lbar[:, 0] @ np.diag(lam))
    G5 = volterra2_solve(Lbar, G5_forcing, bounds="full")

    # Boundary weight after both alpha-transforms.  With
    # Phi(y) = F_alpha(y) - int_0^y F_alpha(nu) L_check(nu, y) dnu and
    # Psi = L_check(0, .) + Phi, the second target system's boundary
    # integral weight is Psi pushed through the Fredholm transform:
    # F_alpha_bar(y) = L_bar(0, y) + Psi(y) - int_0^1 Psi(eta) L_bar(eta, y).
    Fa = couplings.F_alpha.values
    W_lower = np.zeros((N, N))
    for i in range(1, N):
        W_lower[i, : i + 1] = trapezoid_weights(xs[: i + 1])
    phi = Fa - np.einsum("yv,vab,vybc->yac", W_lower, Fa, Lc)
    psi = Lc[0] + phi
    w_full = trapezoid_weights(xs)
    fbar = Lbar[0] + psi - np.einsum("e,eab,eybc->yac", w_full, psi, Lbar)

    return KernelSetControl(grid=grid, n=n, L_check=Lc,
                            G_check=SampledFunction(xs, Gc),
                            L_bar=Lbar, G5=G5,
                            F_alpha_bar=SampledFunction(xs, fbar))


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransformOps:
    """Pre-assembled dense forms of the transforms on one grid.

    A_T maps stacked target PDE values (alpha; beta) to physical (u; v)
    minus the gamma X1 shift; B_T recovers the ODE shift; A_check/A_bar are
    the two alpha-coordinate maps of the second transform family.
    """

    grid: TriGrid
    n: int
    m: int
    A_T: np.ndarray
    A_T_lu: tuple
    B_T: np.ndarray
    gamma_stack: np.ndarray
    A_check: np.ndarray | None
    A_bar: np.ndarray | None
    A_T1: np.ndarray | None
    A_T1_lu: tuple | None


def _upper_quad_operator(L: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Dense matrix for w(x_i) -> int_{x_i}^1 L(x_i, nu) w(nu) dnu."""
    N = xs.size
    K = L.shape[2]
    W = np.zeros((N, N))
    for i in range(N - 1):
        W[i, i:] = trapezoid_weights(xs[i:])
    op = (W[:, :, None, None] * L).transpose(0, 2, 1, 3).reshape(N * K, N * K)
    return op


def _full_quad_operator(L: np.ndarray, xs: np.ndarray) -> np.ndarray:
    N = xs.size
    K = L.shape[2]
    w = trapezoid_weights(xs)
    op = (w[None, :, None, None] * L).transpose(0, 2, 1, 3).reshape(N * K,
                                                                    N * K)
    return op


def build_transform_ops(kernels: KernelSetObserver,
                        control: KernelSetControl | None = None
                        ) -> TransformOps:
    """Assemble and factor the dense transform operators once per grid."""
    xs = kernels.grid.xs
    N = xs.size
    n, m = kernels.n, kernels.m
    K = n + m
    A_T = np.eye(N * K) - _upper_quad_operator(kernels.L, xs)
    w = trapezoid_weights(xs)
    L12 = np.concatenate([kernels.L1.values, kernels.L2.values], axis=2)
    B_T = (w[:, None, None] * L12).transpose(1, 0, 2).reshape(
        kernels.L1.values.shape[1], N * K)
    gamma_stack = kernels.gamma.values.reshape(N * K, -1)

    A_check = A_bar = A_T1 = A_T1_lu = None
    if control is not None:
        A_check = np.eye(N * n) - _upper_quad_operator(control.L_check, xs)
        A_bar = np.eye(N * n) - _full_quad_operator(control.L_bar, xs)
        A_T1 = A_check @ A_bar
        A_T1_lu = scipy.linalg.lu_factor(A_T1)
    return TransformOps(grid=kernels.grid, n=n, m=m, A_T=A_T,
                        A_T_lu=scipy.linalg.lu_factor(A_T), B_T=B_T,
                        gamma_stack=gamma_stack, A_check=A_check,
                        A_bar=A_bar, A_T1=A_T1, A_T1_lu=A_T1_lu)


def _stack_fields(alpha: SampledFunction, beta: SampledFunction) -> np.ndarray:
    return np.concatenate([alpha.values, beta.values], axis=1).reshape(-1)


def _unstack_fields(w: np.ndarray, xs, n, m):
    vals = w.reshape(xs.size, n + m)
    return (SampledFunction(xs, vals[:, :n].copy()),
            SampledFunction(xs, vals[:, n:].copy()))


def apply_T(kernels: KernelSetObserver, target: TargetState,
            ops: TransformOps | None = None) -> PlantState:
    """Map target coordinates (xi, alpha, beta, X1) to the physical state."""
    xs = kernels.grid.xs
    if target.alpha.grid.size != xs.size:
        raise ValueError("state grid does not match the kernel grid")
    ops = ops or build_transform_ops(kernels)
    w = _stack_fields(target.alpha, target.beta)
    uv = ops.A_T @ w + ops.gamma_stack @ target.X1
    u, v = _unstack_fields(uv, xs, kernels.n, kernels.m)
    X0 = target.xi - ops.B_T @ w
    return PlantState(X0=X0, u=u, v=v, X1=target.X1)


def invert_T(kernels: KernelSetObserver, physical: PlantState,
             ops: TransformOps | None = None,
             use_picard: bool = False) -> TargetState:
    """Recover target coordinates from a physical state.

    The stacked PDE block is a second-kind Volterra system; by default it is
    solved with the pre-factored dense operator, `use_picard=True` routes it
    through the generic Picard solver instead (identical fixed point).
    """
    xs = kernels.grid.xs
    if physical.u.grid.size != xs.size:
        raise ValueError("state grid does not match the kernel grid")
    gamma = kernels.gamma.values
    f = np.concatenate([physical.u.values, physical.v.values], axis=1) \
        - gamma @ physical.X1
    if use_picard:
        g = volterra2_solve(kernels.L, SampledFunction(xs, f), bounds="upper")
        w = g.values.reshape(-1)
        ops = ops or build_transform_ops(kernels)
    else:
        ops = ops or build_transform_ops(kernels)
        w = scipy.linalg.lu_solve(ops.A_T_lu, f.reshape(-1))
    alpha, beta = _unstack_fields(w, xs, kernels.n, kernels.m)
    xi = physical.X0 + ops.B_T @ w
    return TargetState(xi=xi, alpha=alpha, beta=beta, X1=physical.X1)


def apply_T1(control: KernelSetControl, state: TargetState,
             ops: TransformOps | None = None) -> TargetState:
    """Map second-target coordinates (xi, alpha_bar, beta, X1) to the first
    target coordinates; only the rightward field changes."""
    xs = control.grid.xs
    N = xs.size
    n = control.n
    if ops is not None and ops.A_T1 is not None:
        alpha = ops.A_T1 @ state.alpha.values.reshape(-1)
    else:
        w_full = trapezoid_weights(xs)
        abar = state.alpha.values
        acheck = abar - np.einsum("e,xeab,eb->xa", w_full,
                                  control.L_bar, abar)
        W = np.zeros((N, N))
        for i in range(N - 1):
            W[i, i:] = trapezoid_weights(xs[i:])
        alpha = acheck - np.einsum("xe,xeab,eb->xa", W, control.L_check,
                                   acheck)
        alpha = alpha.reshape(-1)
    return TargetState(xi=state.xi,
                       alpha=SampledFunction(xs, alpha.reshape(N, n)),
                       beta=state.beta, X1=state.X1)


def invert_T1(control: KernelSetControl, state: TargetState,
              ops: TransformOps | None = None) -> TargetState:
    """Recover second-target coordinates from first-target coordinates.

    The Volterra part is inverted by the second-kind solver; the strictly
    triangular Fredholm part by its finite Neumann series (length n).
    """
    xs = control.grid.xs
    N = xs.size
    n = control.n
    if ops is not None and ops.A_T1_lu is not None:
        abar = scipy.linalg.lu_solve(ops.A_T1_lu,
                                     state.alpha.values.reshape(-1))
        abar = abar.reshape(N, n)
    else:
        acheck = volterra2_solve(control.L_check, state.alpha,
                                 bounds="upper").values
        w_full = trapezoid_weights(xs)
        abar = acheck.copy()
        for _ in range(n + 1):
            nxt = acheck + np.einsum("e,xeab,eb->xa", w_full,
                                     control.L_bar, abar)
            if np.max(np.abs(nxt - abar)) <= 1e-14:
                abar = nxt
                break
            abar = nxt
    return TargetState(xi=state.xi, alpha=SampledFunction(xs, abar),
                       beta=state.beta, X1=state.X1)


# ---------------------------------------------------------------------------
# CSV export and caching
# ---------------------------------------------------------------------------

def _write_tri_csv(path: Path, xs: np.ndarray, block: np.ndarray,
                   triangular: bool):
    rows = ["x,nu," + ",".join(
        f"k{i}{j}" for i in range(block.shape[2])
        for j in range(block.shape[3]))]
    N = xs.size
    for ix in range(N):
        lo = ix if triangular else 0
        for inu in range(lo, N):
            vals = ",".join(repr(float(v))
                            for v in block[ix, inu].reshape(-1))
            rows.append(f"{xs[ix]!r},{xs[inu]!r},{vals}")
    path.write_text("\n".join(rows) + "\n")


def _write_fn_csv(path: Path, fn: SampledFunction):
    flat = fn.values.reshape(fn.grid.size, -1)
    rows = ["x," + ",".join(f"v{k}" for k in range(flat.shape[1]))]
    for x, v in zip(fn.grid, flat):
        rows.append(f"{x!r}," + ",".join(repr(float(y)) for y in v))
    path.write_text("\n".join(rows) + "\n")


def export_observer_kernels_csv(kernels: KernelSetObserver, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    xs = kernels.grid.xs
    for name, blk in (("Laa", kernels.Laa), ("Lab", kernels.Lab),
                      ("Lba", kernels.Lba), ("Lbb", kernels.Lbb)):
        _write_tri_csv(out / f"kernel_{name}.csv", xs, blk, True)
    for name, fn in (("gamma", kernels.gamma), ("L1", kernels.L1),
                     ("L2", kernels.L2)):
        _write_fn_csv(out / f"kernel_{name}.csv", fn)


def export_control_kernels_csv(control: KernelSetControl, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    xs = control.grid.xs
    _write_tri_csv(out / "kernel_Lcheck.csv", xs, control.L_check, True)
    _write_tri_csv(out / "kernel_Lbar.csv", xs, control.L_bar, False)
    for name, fn in (("Gcheck", control.G_check), ("G5", control.G5),
                     ("Falphabar", control.F_alpha_bar)):
        _write_fn_csv(out / f"kernel_{name}.csv", fn)


def kernel_cache_key(model: PlantModel, n_points: int) -> str:
    doc = json.dumps(model_to_json(model), sort_keys=True)
    return hashlib.sha256(f"{doc}|{n_points}".encode()).hexdigest()[:24]
