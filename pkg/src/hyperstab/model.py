"""Plant description, structural validation, and the open-loop reflection
stability check.

The plant couples n rightward and m leftward transport PDEs on [0, 1] with a
p-dimensional ODE at the actuated boundary x = 0 and a q-dimensional ODE at
x = 1.  The measurement is the rightward state at x = 1 (anti-collocated
with the input).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hyperstab.numerics import SampledFunction

__all__ = [
    "PlantModel",
    "PlantState",
    "Assumption1Report",
    "validate",
    "chi_norm",
    "check_assumption1",
    "model_from_json",
    "model_to_json",
]

SCHEMA_NAME = "hyperstab-model-v1"


@dataclass(frozen=True)
class PlantModel:
    """All constant matrices, velocities and in-domain couplings of the plant.

    Shapes: lam (n,), mu (m,), A0 (p,p), E0 (p,m), C0 (n,p), A1 (q,q),
    E1 (q,n), C1 (m,q), R (m,n), Q (n,m); the four Sigma blocks are sampled
    functions on [0,1] with value shapes (n,n), (n,m), (m,n), (m,m).
    """

    lam: np.ndarray
    mu: np.ndarray
    Sigma_pp: SampledFunction
    Sigma_pm: SampledFunction
    Sigma_mp: SampledFunction
    Sigma_mm: SampledFunction
    A0: np.ndarray
    E0: np.ndarray
    C0: np.ndarray
    A1: np.ndarray
    E1: np.ndarray
    C1: np.ndarray
    R: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        for name in ("lam", "mu"):
            object.__setattr__(self, name,
                               np.atleast_1d(np.asarray(getattr(self, name),
                                                        dtype=float)))
        for name in ("A0", "E0", "C0", "A1", "E1", "C1", "R", "Q"):
            object.__setattr__(self, name,
                               np.atleast_2d(np.asarray(getattr(self, name),
                                                        dtype=float)))

    @property
    def n(self) -> int:
        return self.lam.size

    @property
    def m(self) -> int:
        return self.mu.size

    @property
    def p(self) -> int:
        return self.A0.shape[0]

    @property
    def q(self) -> int:
        return self.A1.shape[0]

    @property
    def tau(self) -> float:
        """Round-trip horizon 1/lambda_1 + 1/mu_1 of the slowest reflection."""
        return 1.0 / self.lam[0] + 1.0 / self.mu[0]

    def sigma(self, x) -> np.ndarray:
        """Full (n+m) x (n+m) in-domain coupling matrix at x."""
        top = np.concatenate([self.Sigma_pp.at(x), self.Sigma_pm.at(x)],
                             axis=-1)
        bot = np.concatenate([self.Sigma_mp.at(x), self.Sigma_mm.at(x)],
                             axis=-1)
        return np.concatenate([top, bot], axis=-2)

    @property
    def speeds(self) -> np.ndarray:
        """Signed transport speeds diag(Lambda) = (lam..., -mu...)."""
        return np.concatenate([self.lam, -self.mu])


@dataclass(frozen=True)
class PlantState:
    """One snapshot (X0, u, v, X1) of the plant state."""

    X0: np.ndarray
    u: SampledFunction
    v: SampledFunction
    X1: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "X0",
                           np.atleast_1d(np.asarray(self.X0, dtype=float)))
        object.__setattr__(self, "X1",
                           np.atleast_1d(np.asarray(self.X1, dtype=float)))
        if not np.array_equal(self.u.grid, self.v.grid):
            raise ValueError("u and v must share one grid")
        if not (np.all(np.isfinite(self.X0)) and np.all(np.isfinite(self.X1))):
            raise ValueError("ODE states must be finite")


def validate(model: PlantModel) -> list[str]:
    """Return every violated structural invariant (empty list = valid)."""
    out: list[str] = []
    n, m, p, q = model.n, model.m, model.p, model.q

    if np.any(model.lam <= 0) or np.any(np.diff(model.lam) <= 0):
        out.append("velocity ordering violated: lambda must satisfy "
                   "0 < lambda_1 < ... < lambda_n")
    if np.any(model.mu <= 0) or np.any(np.diff(model.mu) <= 0):
        out.append("velocity ordering violated: mu must satisfy "
                   "0 < mu_1 < ... < mu_m")

    for name, blk, shape in (("Sigma_pp", model.Sigma_pp, (n, n)),
                             ("Sigma_pm", model.Sigma_pm, (n, m)),
                             ("Sigma_mp", model.Sigma_mp, (m, n)),
                             ("Sigma_mm", model.Sigma_mm, (m, m))):
        if blk.value_shape != shape:
            out.append(f"{name} has value shape {blk.value_shape}, "
                       f"expected {shape}")
        lo, hi = blk.interval
        if not (abs(lo) < 1e-12 and abs(hi - 1.0) < 1e-12):
            out.append(f"{name} must be sampled on [0, 1]")

    for name in ("Sigma_pp", "Sigma_mm"):
        blk: SampledFunction = getattr(model, name)
        if blk.value_shape[0] == blk.value_shape[1]:
            diags = np.einsum("kii->ki", blk.values)
            if np.any(np.abs(diags) > 0):
                out.append(f"nonzero diagonal in {name}")

    for name, mat, shape in (("A0", model.A0, (p, p)), ("E0", model.E0, (p, m)),
                             ("C0", model.C0, (n, p)), ("A1", model.A1, (q, q)),
                             ("E1", model.E1, (q, n)), ("C1", model.C1, (m, q)),
                             ("R", model.R, (m, n)), ("Q", model.Q, (n, m))):
        if mat.shape != shape:
            out.append(f"{name} has shape {mat.shape}, expected {shape}")
        elif not np.all(np.isfinite(mat)):
            out.append(f"{name} has non-finite entries")
    return out


def chi_norm(state: PlantState) -> float:
    """Product-space norm sqrt(|X0|^2 + |u|_L2^2 + |v|_L2^2 + |X1|^2)."""
    u2 = np.trapezoid(np.sum(state.u.values ** 2, axis=-1), state.u.grid)
    v2 = np.trapezoid(np.sum(state.v.values ** 2, axis=-1), state.v.grid)
    return float(np.sqrt(np.dot(state.X0, state.X0) + u2 + v2
                         + np.dot(state.X1, state.X1)))


@dataclass(frozen=True)
class Assumption1Report:
    passed: bool
    sup_radius: float
    norm_bound: float
    grid_searched: bool
    num_samples: int

    def __bool__(self) -> bool:  # allows `if check_assumption1(...)`
        return self.passed


def _reflection_matrix(Q: np.ndarray, R: np.ndarray,
                       phases: np.ndarray) -> np.ndarray:
    """n x n boundary reflection matrix for one phase vector theta_(k,l)."""
    n, m = Q.shape[0], Q.shape[1]
    theta = phases.reshape(m, n)
    M = np.zeros((n, n), dtype=complex)
    for k in range(m):
        M += np.outer(Q[:, k], R[k, :] * np.exp(1j * theta[k, :]))
    return M


def check_assumption1(model: PlantModel,
                      theta_grid_points: int = 24,
                      num_random: int = 1000,
                      seed: int = 0) -> Assumption1Report:
    """Check the open-loop boundary-reflection stability condition.

    Evaluates the supremum over the phase torus of the spectral radius of the
    reflection matrix sum_k Q_(.,k) R_(k,l) e^{j theta_(k,l)} on a uniform
    per-phase grid plus `num_random` random phase vectors, and reports pass
    iff the supremum stays below 1 - 1e-6 (slack against grid points sitting
    exactly on the boundary).  The product of induced 2-norms |Q| |R| is
    reported alongside as a cheap sufficient certificate.

    The per-phase grid is skipped (random sampling only, flagged in the
    report) when n*m > 8, where the tensor grid blows up combinatorially.
    """
    if theta_grid_points < 8:
        raise ValueError("theta_grid_points must be >= 8")
    Q, R = model.Q, model.R
    n, m = model.n, model.m
    n_phases = n * m

    sup_radius = 0.0
    grid_searched = n_phases <= 8
    if grid_searched:
        axes = [np.linspace(0.0, 2.0 * np.pi, theta_grid_points,
                            endpoint=False)] * n_phases
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"),
                        axis=-1).reshape(-1, n_phases)
        for phases in mesh:
            M = _reflection_matrix(Q, R, phases)
            sup_radius = max(sup_radius,
                             float(np.max(np.abs(np.linalg.eigvals(M)))))

    rng = np.random.default_rng(seed)
    samples = rng.uniform(0.0, 2.0 * np.pi, size=(num_random, n_phases))
    for phases in samples:
        M = _reflection_matrix(Q, R, phases)
        sup_radius = max(sup_radius,
                         float(np.max(np.abs(np.linalg.eigvals(M)))))

    norm_bound = float(np.linalg.norm(Q, 2) * np.linalg.norm(R, 2))
    return Assumption1Report(passed=sup_radius < 1.0 - 1e-6,
                             sup_radius=sup_radius,
                             norm_bound=norm_bound,
                             grid_searched=grid_searched,
                             num_samples=num_random)


# ---------------------------------------------------------------------------
# JSON serialization (schema "hyperstab-model-v1")
# ---------------------------------------------------------------------------

def _sigma_to_json(blk: SampledFunction):
    if np.all(blk.values == 0.0):
        return "zero"
    if np.all(blk.values == blk.values[0]):
        return blk.values[0].tolist()
    return {"grid": blk.grid.tolist(),
            "values": [v.tolist() for v in blk.values]}


def _sigma_from_json(node, shape) -> SampledFunction:
    if node == "zero" or node is None:
        return SampledFunction.zeros(shape)
    if isinstance(node, dict):
        values = np.asarray(node["values"], dtype=float)
        return SampledFunction(np.asarray(node["grid"], dtype=float), values)
    return SampledFunction.constant(np.asarray(node, dtype=float))


def model_to_json(model: PlantModel) -> dict:
    return {
        "schema": SCHEMA_NAME,
        "n": model.n, "m": model.m, "p": model.p, "q": model.q,
        "lambda": model.lam.tolist(),
        "mu": model.mu.tolist(),
        "A0": model.A0.tolist(), "E0": model.E0.tolist(),
        "C0": model.C0.tolist(), "A1": model.A1.tolist(),
        "E1": model.E1.tolist(), "C1": model.C1.tolist(),
        "R": model.R.tolist(), "Q": model.Q.tolist(),
        "Sigma_pp": _sigma_to_json(model.Sigma_pp),
        "Sigma_pm": _sigma_to_json(model.Sigma_pm),
        "Sigma_mp": _sigma_to_json(model.Sigma_mp),
        "Sigma_mm": _sigma_to_json(model.Sigma_mm),
    }


def model_from_json(doc: dict | str | Path) -> PlantModel:
    """Build a PlantModel from a schema document, dict, JSON text or path."""
    if isinstance(doc, (str, Path)):
        path = Path(doc)
        if path.exists():
            doc = json.loads(path.read_text())
        else:
            doc = json.loads(str(doc))
    if doc.get("schema") != SCHEMA_NAME:
        raise ValueError(f"unsupported schema {doc.get('schema')!r}, "
                         f"expected {SCHEMA_NAME!r}")
    lam = np.asarray(doc["lambda"], dtype=float)
    mu = np.asarray(doc["mu"], dtype=float)
    n, m = lam.size, mu.size
    return PlantModel(
        lam=lam, mu=mu,
        Sigma_pp=_sigma_from_json(doc.get("Sigma_pp"), (n, n)),
        Sigma_pm=_sigma_from_json(doc.get("Sigma_pm"), (n, m)),
        Sigma_mp=_sigma_from_json(doc.get("Sigma_mp"), (m, n)),
        Sigma_mm=_sigma_from_json(doc.get("Sigma_mm"), (m, m)),
        A0=np.asarray(doc["A0"], dtype=float),
        E0=np.asarray(doc["E0"], dtype=float),
        C0=np.asarray(doc["C0"], dtype=float),
        A1=np.asarray(doc["A1"], dtype=float),
        E1=np.asarray(doc["E1"], dtype=float),
        C1=np.asarray(doc["C1"], dtype=float),
        R=np.asarray(doc["R"], dtype=float),
        Q=np.asarray(doc["Q"], dtype=float),
    )
