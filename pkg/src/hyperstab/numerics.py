"""Dense linear algebra and integral-equation utilities shared by the toolkit.

Everything here operates on plain ``numpy`` arrays.  Matrix-valued functions
of one spatial variable are carried around as :class:`SampledFunction` objects
(a grid plus one value array per grid point, linearly interpolated in
between), which is all the regularity the transport-dominated solvers in the
rest of the package can exploit anyway.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

__all__ = [
    "SampledFunction",
    "ConvergenceError",
    "StabilizationError",
    "expm",
    "eigenvalues",
    "stabilizing_gain",
    "volterra2_solve",
    "trapezoid",
    "trapezoid_weights",
]


class ConvergenceError(RuntimeError):
    """An iterative solver failed to reach its tolerance within budget."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class StabilizationError(RuntimeError):
    """No stabilizing gain exists; carries the offending eigenvalues."""

    def __init__(self, message: str, eigenvalues: np.ndarray):
        super().__init__(message)
        self.eigenvalues = np.asarray(eigenvalues)


@dataclass(frozen=True)
class SampledFunction:
    """A matrix- or vector-valued function sampled on an increasing grid.

    Parameters
    ----------
    grid : ndarray, shape (K,)
        Strictly increasing abscissae covering a closed interval.
    values : ndarray, shape (K, ...) with K >= 2
        One value per grid point; trailing dimensions give the value shape.
    """

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.ascontiguousarray(np.asarray(self.grid, dtype=float))
        values = np.ascontiguousarray(np.asarray(self.values, dtype=float))
        if grid.ndim != 1 or grid.size < 2:
            raise ValueError("grid must be 1-D with at least 2 points")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if values.shape[0] != grid.size:
            raise ValueError("values must provide one entry per grid point")
        if not np.all(np.isfinite(values)):
            raise ValueError("values must be finite")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @property
    def value_shape(self) -> tuple[int, ...]:
        return self.values.shape[1:]

    @property
    def interval(self) -> tuple[float, float]:
        return float(self.grid[0]), float(self.grid[-1])

    @classmethod
    def constant(cls, value, a: float = 0.0, b: float = 1.0,
                 num: int = 2) -> "SampledFunction":
        value = np.asarray(value, dtype=float)
        grid = np.linspace(a, b, num)
        return cls(grid, np.broadcast_to(value, (num,) + value.shape).copy())

    @classmethod
    def zeros(cls, shape: tuple[int, ...], a: float = 0.0, b: float = 1.0,
              num: int = 2) -> "SampledFunction":
        return cls.constant(np.zeros(shape), a, b, num)

    def at(self, xs) -> np.ndarray:
        """Linear interpolation at `xs` (clamped to the interval ends)."""
        xs = np.asarray(xs, dtype=float)
        scalar = xs.ndim == 0
        pts = np.atleast_1d(xs)
        idx = np.clip(np.searchsorted(self.grid, pts, side="right") - 1,
                      0, self.grid.size - 2)
        x0 = self.grid[idx]
        w = np.clip((pts - x0) / (self.grid[idx + 1] - x0), 0.0, 1.0)
        w = w.reshape(w.shape + (1,) * (self.values.ndim - 1))
        out = (1.0 - w) * self.values[idx] + w * self.values[idx + 1]
        return out[0] if scalar else out

    def __call__(self, x: float) -> np.ndarray:
        return self.at(x)

    def integral(self) -> np.ndarray:
        """Composite-trapezoid integral over the whole interval."""
        return np.trapezoid(self.values, self.grid, axis=0)

    def map_values(self, fn) -> "SampledFunction":
        return SampledFunction(self.grid, fn(self.values))


def trapezoid(values: SampledFunction) -> np.ndarray:
    """Composite trapezoid integral of a sampled function over its interval."""
    return values.integral()


def trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    """Quadrature weights w with sum(w*f) = trapezoid integral of f on grid."""
    grid = np.asarray(grid, dtype=float)
    w = np.zeros_like(grid)
    d = np.diff(grid)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


def expm(A: np.ndarray, t: float = 1.0) -> np.ndarray:
    """Matrix exponential e^{A t} (scaling-and-squaring Pade, via scipy)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"expm requires a square matrix, got {A.shape}")
    return scipy.linalg.expm(A * float(t))


def eigenvalues(A: np.ndarray) -> np.ndarray:
    """All eigenvalues of a square matrix (LAPACK QR iteration)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"eigenvalues requires a square matrix, got {A.shape}")
    return np.linalg.eigvals(A)


def _uncontrollable_unstable_modes(A, B, margin):
    """Eigenvalues of A with Re >= -margin failing the PBH rank test."""
    A = np.atleast_2d(A)
    n = A.shape[0]
    bad = []
    for lam in np.linalg.eigvals(A):
        if lam.real < -margin:
            continue
        pencil = np.hstack([A - lam * np.eye(n), B])
        if np.linalg.matrix_rank(pencil, tol=1e-9 * max(1.0, np.linalg.norm(A))) < n:
            bad.append(lam)
    return np.asarray(bad)


def stabilizing_gain(A: np.ndarray, B: np.ndarray,
                     margin: float = 0.1) -> np.ndarray:
    """Feedback gain K with max Re eig(A + B K) <= -margin.

    Solves the continuous algebraic Riccati equation with identity weights
    (Hamiltonian deflating-subspace method) and returns K = -B^T P.  If the
    plain solution misses the requested margin, the equation is re-solved on
    the shifted matrix A + margin*I, which pushes the closed-loop spectrum
    left of -margin.

    Raises
    ------
    StabilizationError
        If the pair has unstabilizable modes with Re >= -margin; the
        exception carries those eigenvalues.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B.reshape(-1, 1)
    n = A.shape[0]
    if A.shape[0] != A.shape[1] or B.shape[0] != n:
        raise ValueError(f"incompatible shapes A{A.shape}, B{B.shape}")
    Q = np.eye(n)
    R = np.eye(B.shape[1])

    def _solve(Ashift):
        P = scipy.linalg.solve_continuous_are(Ashift, B, Q, R)
        return -B.T @ P

    def _max_real(K):
        return float(np.max(np.linalg.eigvals(A + B @ K).real))

    try:
        K = _solve(A)
        if _max_real(K) <= -margin + 1e-10:
            return K
        K = _solve(A + margin * np.eye(n))
        if _max_real(K) <= -margin + 1e-8:
            return K
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
        pass
    bad = _uncontrollable_unstable_modes(A, B, margin)
    raise StabilizationError(
        f"pair is not stabilizable with margin {margin}", bad)


def volterra2_solve(kernel: np.ndarray, forcing: SampledFunction,
                    bounds: str = "upper", tol: float = 1e-10,
                    max_iter: int = 500) -> SampledFunction:
    """Solve g(x) = f(x) + int K(x,nu) g(nu) dnu by Picard iteration.

    Parameters
    ----------
    kernel : ndarray, shape (K, K, d, d)
        K(x_i, nu_j) sampled on the forcing grid squared.  Only the entries
        on the integration side of the diagonal are used.
    forcing : SampledFunction with values (K, d) or (K, d, b)
    bounds : {"upper", "lower", "full"}
        Integration range per x: [x, 1] ("upper"), [0, x] ("lower") or the
        whole interval ("full"; converges for nilpotent/contractive kernels).

    Returns
    -------
    SampledFunction on the forcing grid.

    Raises
    ------
    ConvergenceError
        If the sup-norm update still exceeds `tol` after `max_iter` sweeps.
    """
    grid = forcing.grid
    K = grid.size
    kernel = np.asarray(kernel, dtype=float)
    if kernel.shape[:2] != (K, K):
        raise ValueError("kernel must be sampled on grid x grid")
    f = forcing.values
    vec_input = f.ndim == 2
    fv = f[:, :, None] if vec_input else f

    # Row i of W holds trapezoid weights for the nu-range of x_i.
    W = np.zeros((K, K))
    for i in range(K):
        if bounds == "upper":
            W[i, i:] = trapezoid_weights(grid[i:]) if i < K - 1 else 0.0
        elif bounds == "lower":
            W[i, : i + 1] = trapezoid_weights(grid[: i + 1]) if i > 0 else 0.0
        elif bounds == "full":
            W[i, :] = trapezoid_weights(grid)
        else:
            raise ValueError(f"unknown bounds {bounds!r}")
    WK = W[:, :, None, None] * kernel

    g = fv.copy()
    last = np.inf
    for _ in range(max_iter):
        g_new = fv + np.einsum("ijab,jbc->iac", WK, g)
        last = float(np.max(np.abs(g_new - g)))
        g = g_new
        if last <= tol:
            out = g[:, :, 0] if vec_input else g
            return SampledFunction(grid, out)
    raise ConvergenceError(
        f"Picard iteration did not converge (last update {last:.3e})", last)
