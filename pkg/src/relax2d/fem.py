"""Bilinear finite elements on [-1, 1]^2 and a trust-region energy minimizer.

The deformation is ``phi(x) = F0 x + theta(x)`` with ``theta`` bilinear on
each quadrilateral and zero on the boundary. Energies are integrated with
the 2x2 Gauss rule. The minimizer is a trust-region Newton method whose
subproblem is solved exactly through an eigendecomposition of the
(finite-difference) Hessian, which handles the indefinite curvature of the
homogeneous saddle directly.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq

from .constants import GRADIENT_FD_STEP
from .energy import EnergyDensity, PenaltyConfig, as_mat2, det2, get_energy
from .io import write_csv, write_vtk_quads

__all__ = [
    "NonFiniteEnergyError",
    "QuadMesh",
    "DisplacementField",
    "SolverOptions",
    "SolveReport",
    "FemConfig",
    "gradients_at_quadrature",
    "assemble_energy",
    "assemble_hessian",
    "diagnostics",
    "minimize",
    "export_csv",
    "export_vtk",
]

_G = 1.0 / np.sqrt(3.0)
# reference Gauss points, counter-clockwise, all with weight 1
GAUSS_POINTS = np.array([(-_G, -_G), (_G, -_G), (_G, _G), (-_G, _G)])
# reference node positions of the bilinear quad, counter-clockwise
_XI = np.array([-1.0, 1.0, 1.0, -1.0])
_ETA = np.array([-1.0, -1.0, 1.0, 1.0])


class NonFiniteEnergyError(FloatingPointError):
    """Energy density evaluated to inf/nan; ``element`` is the first offender."""

    def __init__(self, element: int, value: float):
        super().__init__(f"non-finite energy {value!r} in element {element}")
        self.element = element
        self.value = value


def _reference_derivatives() -> np.ndarray:
    """dN_a/d(xi, eta) at each Gauss point, shape (4 points, 4 nodes, 2)."""
    out = np.empty((4, 4, 2))
    for g, (s, t) in enumerate(GAUSS_POINTS):
        out[g, :, 0] = _XI * (1.0 + _ETA * t) / 4.0
        out[g, :, 1] = _ETA * (1.0 + _XI * s) / 4.0
    return out


@dataclass(frozen=True)
class QuadMesh:
    """Uniform ``n x n`` grid of bilinear quadrilaterals on [-1, 1]^2.

    Nodes are numbered row by row with x varying fastest; element corners
    are listed counter-clockwise.
    """

    n_per_side: int = 20
    coords: np.ndarray = field(init=False, repr=False)
    elements: np.ndarray = field(init=False, repr=False)
    boundary: np.ndarray = field(init=False, repr=False)
    dN: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = int(self.n_per_side)
        if n < 2:
            raise ValueError("need at least 2 elements per side")
        x = np.linspace(-1.0, 1.0, n + 1)
        X, Y = np.meshgrid(x, x, indexing="xy")
        coords = np.column_stack([X.ravel(), Y.ravel()])
        idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
        elements = np.column_stack(
            [idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel(), idx[1:, 1:].ravel(), idx[1:, :-1].ravel()]
        )
        edge = (np.abs(coords) >= 1.0 - 1e-12).any(axis=1)
        # physical shape-function gradients and quadrature weights per element
        ref = _reference_derivatives()
        J = np.einsum("eai,gaj->egij", coords[elements], ref)
        detJ = det2(J)
        if np.any(detJ <= 0.0):
            raise ValueError("undeformed mesh has an inverted element")
        Jinv = np.linalg.inv(J)
        dN = np.einsum("gak,egkj->egaj", ref, Jinv)
        object.__setattr__(self, "n_per_side", n)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "boundary", np.flatnonzero(edge))
        object.__setattr__(self, "dN", dN)
        object.__setattr__(self, "weights", detJ)

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def free(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary] = False
        return np.flatnonzero(mask)

    @property
    def area(self) -> float:
        return float(self.weights.sum())

    def quadrature_points(self) -> np.ndarray:
        """Physical Gauss point positions, shape (n_elements, 4, 2)."""
        s, t = GAUSS_POINTS[:, 0], GAUSS_POINTS[:, 1]
        N = np.stack([(1 + s * xa) * (1 + t * ea) / 4.0 for xa, ea in zip(_XI, _ETA)], axis=1)
        return np.einsum("ga,eai->egi", N, self.coords[self.elements])


@dataclass
class DisplacementField:
    """Nodal deviation ``theta`` from the affine map ``F0 x``."""

    mesh: QuadMesh
    F0: np.ndarray
    theta: np.ndarray = None

    def __post_init__(self):
        self.F0 = as_mat2(self.F0)
        if self.F0.shape != (2, 2):
            raise ValueError("F0 must be a single 2x2 matrix")
        if self.theta is None:
            self.theta = np.zeros((self.mesh.n_nodes, 2))
        self.theta = np.asarray(self.theta, dtype=float).reshape(self.mesh.n_nodes, 2)
        if np.any(self.theta[self.mesh.boundary] != 0.0):
            raise ValueError("theta must vanish on the boundary")

    @property
    def phi(self) -> np.ndarray:
        return self.mesh.coords @ self.F0.T + self.theta

    def free_values(self) -> np.ndarray:
        return self.theta[self.mesh.free].ravel()

    def with_free_values(self, v: np.ndarray) -> "DisplacementField":
        theta = np.zeros_like(self.theta)
        theta[self.mesh.free] = np.asarray(v).reshape(-1, 2)
        return DisplacementField(self.mesh, self.F0, theta)


def gradients_at_quadrature(field: DisplacementField) -> np.ndarray:
    """Deformation gradients, shape (n_elements, 4, 2, 2)."""
    mesh = field.mesh
    return np.einsum("eai,egaj->egij", field.phi[mesh.elements], mesh.dN)


def assemble_energy(mesh: QuadMesh, field: DisplacementField, W: EnergyDensity) -> Tuple[float, np.ndarray]:
    """Total energy and its nodal gradient (boundary rows zeroed)."""
    Fq = gradients_at_quadrature(field)
    dens = W(Fq)
    bad = ~np.isfinite(dens)
    if np.any(bad):
        e = int(np.flatnonzero(bad.any(axis=1))[0])
        raise NonFiniteEnergyError(e, float(dens[bad][0]))
    w = mesh.weights
    energy = float(np.sum(dens * w))
    P = W.grad(Fq) * w[..., None, None]
    ge = np.einsum("egij,egaj->eai", P, mesh.dN)
    grad = np.zeros((mesh.n_nodes, 2))
    np.add.at(grad, mesh.elements, ge)
    grad[mesh.boundary] = 0.0
    return energy, grad


def _free_dof_map(mesh: QuadMesh) -> np.ndarray:
    dof = -np.ones((mesh.n_nodes, 2), dtype=np.int64)
    dof[mesh.free] = np.arange(2 * len(mesh.free)).reshape(-1, 2)
    return dof[mesh.elements].reshape(mesh.n_elements, 8)


def assemble_hessian(mesh: QuadMesh, field: DisplacementField, W: EnergyDensity,
                     h: float = GRADIENT_FD_STEP * 0.1) -> sp.csr_matrix:
    """Stiffness matrix over the free degrees of freedom.

    The material tangent ``dP/dF`` is obtained by central differences of the
    density gradient at every quadrature point and symmetrized.
    """
    Fq = gradients_at_quadrature(field)
    A = np.empty(Fq.shape + (2, 2))
    for k in range(2):
        for l in range(2):
            Fp = Fq.copy()
            Fm = Fq.copy()
            Fp[..., k, l] += h
            Fm[..., k, l] -= h
            A[..., k, l] = (W.grad(Fp) - W.grad(Fm)) / (2.0 * h)
    A = 0.5 * (A + np.einsum("egijkl->egklij", A))
    A *= mesh.weights[..., None, None, None, None]
    Ke = np.einsum("egijkl,egaj,egbl->eaibk", A, mesh.dN, mesh.dN).reshape(mesh.n_elements, 8, 8)
    edofs = _free_dof_map(mesh)
    rows = np.repeat(edofs, 8, axis=1).ravel()
    cols = np.tile(edofs, (1, 8)).ravel()
    keep = (rows >= 0) & (cols >= 0)
    n = 2 * len(mesh.free)
    return sp.csr_matrix((Ke.ravel()[keep], (rows[keep], cols[keep])), shape=(n, n))


def diagnostics(mesh: QuadMesh, field: DisplacementField) -> dict:
    """Determinant statistics over all quadrature points."""
    d = det2(gradients_at_quadrature(field))
    return {
        "min_det": float(d.min()),
        "max_det": float(d.max()),
        "negative_det_count": int(np.count_nonzero(d < 0.0)),
        "orientation_violating": bool(np.any(d <= 0.0)),
    }


@dataclass
class SolverOptions:
    """Trust-region settings.

    ``restarts`` adds starts along the lowest-curvature directions of the
    Hessian at the homogeneous state; the lowest final energy wins.
    """

    max_iters: int = 500
    grad_tol: float = 1e-8
    initial_radius: float = 1.0
    max_radius: float = 100.0
    step_tol: float = 1e-8
    eta: float = 1e-4
    amplitude: float = 1e-3
    seed: int = 0
    restarts: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if not (self.grad_tol > 0 and self.initial_radius > 0 and self.max_radius >= self.initial_radius):
            raise ValueError("tolerances and radii must be positive with max_radius >= initial_radius")
        if not 0.0 <= self.eta < 0.25:
            raise ValueError("eta must lie in [0, 0.25)")
        if self.restarts < 0:
            raise ValueError("restarts must be non-negative")


@dataclass
class SolveReport:
    energy: float
    iterations: int
    grad_norm: float
    min_det: float
    max_det: float
    negative_det_count: int
    orientation_violating: bool
    wall_time: float
    status: str
    start: str = "random"
    history: List[float] = field(default_factory=list, repr=False)

    @property
    def converged(self) -> bool:
        return self.status in ("gradient_tolerance", "step_tolerance")

    def energy_density(self, area: float = 4.0) -> float:
        return self.energy / area

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("history")
        return d


def _solve_subproblem(g: np.ndarray, H: np.ndarray, radius: float) -> np.ndarray:
    """Global minimizer of ``g.p + p.H.p / 2`` over ``|p| <= radius``."""
    lam, Q = np.linalg.eigh(H)
    gt = Q.T @ g

    def norm_at(mu):
        return float(np.linalg.norm(gt / (lam + mu)))

    if lam[0] > 0.0 and norm_at(0.0) <= radius:
        return -Q @ (gt / lam)
    lo = max(0.0, -lam[0])
    lo += 1e-12 * max(1.0, abs(lo))
    if norm_at(lo) <= radius:
        # hard case: move to the boundary along the lowest eigenvector
        p = -Q @ (gt / (lam + lo))
        tau = np.sqrt(max(radius**2 - p @ p, 0.0))
        return p + tau * Q[:, 0]
    hi = lo + np.linalg.norm(g) / radius + 1.0
    while norm_at(hi) > radius:
        hi *= 2.0
    mu = brentq(lambda m: norm_at(m) - radius, lo, hi, xtol=1e-14, rtol=1e-12)
    return -Q @ (gt / (lam + mu))


def _trust_region(mesh, W, start: DisplacementField, opts: SolverOptions, label: str):
    t0 = time.perf_counter()
    free = mesh.free
    field_ = start
    f, G = assemble_energy(mesh, field_, W)
    g = G[free].ravel()
    radius = opts.initial_radius
    history = [f]
    status = "iteration_cap"
    it = 0
    while it < opts.max_iters:
        if np.linalg.norm(g) <= opts.grad_tol:
            status = "gradient_tolerance"
            break
        if radius < opts.step_tol:
            status = "step_tolerance"
            break
        it += 1
        H = assemble_hessian(mesh, field_, W).toarray()
        p = _solve_subproblem(g, H, radius)
        pred = -(g @ p + 0.5 * p @ H @ p)
        trial = field_.with_free_values(field_.free_values() + p)
        try:
            ft, Gt = assemble_energy(mesh, trial, W)
        except NonFiniteEnergyError:
            radius *= 0.25
            continue
        rho = (f - ft) / pred if pred > 0.0 else -np.inf
        pnorm = np.linalg.norm(p)
        if rho < 0.25:
            radius = 0.25 * pnorm
        elif rho > 0.75 and pnorm > 0.99 * radius:
            radius = min(2.0 * radius, opts.max_radius)
        if rho > opts.eta and ft <= f:
            field_, f, g = trial, ft, Gt[free].ravel()
            assert not np.any(field_.theta[mesh.boundary]), "boundary nodes moved"
            history.append(f)
    diag = diagnostics(mesh, field_)
    report = SolveReport(
        energy=f,
        iterations=it,
        grad_norm=float(np.linalg.norm(g)),
        wall_time=time.perf_counter() - t0,
        status=status,
        start=label,
        history=history,
        **diag,
    )
    return field_, report


def _starting_fields(mesh: QuadMesh, W: EnergyDensity, F0, opts: SolverOptions):
    rng = np.random.default_rng(opts.seed)
    base = DisplacementField(mesh, F0)
    ndof = 2 * len(mesh.free)
    yield "random", base.with_free_values(opts.amplitude * rng.standard_normal(ndof))
    if opts.restarts:
        H = assemble_hessian(mesh, base, W).toarray()
        lam, Q = np.linalg.eigh(H)
        for j in range(min(opts.restarts, ndof)):
            v = Q[:, j]
            sign = 1.0 if rng.random() < 0.5 else -1.0
            yield f"curvature_mode_{j}", base.with_free_values(sign * opts.amplitude * v / np.abs(v).max())


def minimize(mesh: QuadMesh, W: EnergyDensity, F0, opts: Optional[SolverOptions] = None,
             initial: Optional[DisplacementField] = None) -> Tuple[DisplacementField, SolveReport]:
    """Minimize the total energy over fields with fixed boundary values.

    Without ``initial`` the search starts from a seeded random kick of size
    ``opts.amplitude`` (the homogeneous state is a saddle point), plus
    ``opts.restarts`` kicks along the most negative curvature directions.
    Non-convergence is reported in ``SolveReport.status``; the best field
    found is still returned.
    """
    opts = opts or SolverOptions()
    F0 = as_mat2(F0)
    t0 = time.perf_counter()
    if initial is not None:
        starts = [("given", initial)]
    else:
        starts = _starting_fields(mesh, W, F0, opts)
    best = None
    for label, start in starts:
        fld, rep = _trust_region(mesh, W, start, opts, label)
        if best is None or rep.energy < best[1].energy:
            best = (fld, rep)
    best[1].wall_time = time.perf_counter() - t0
    return best


@dataclass
class FemConfig:
    """JSON-serializable run description."""

    n_per_side: int = 20
    f0: List[float] = field(default_factory=lambda: [0.4, 0.0, 0.0, 0.4])
    energy: str = "dist"
    penalty: Optional[dict] = None
    max_iters: int = 500
    grad_tol: float = 1e-8
    seed: int = 0
    restarts: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "FemConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown FEM config keys: {sorted(unknown)}")
        cfg = cls(**known)
        if len(cfg.f0) != 4 or not np.all(np.isfinite(cfg.f0)):
            raise ValueError("f0 must be 4 finite numbers")
        return cfg

    @classmethod
    def from_json(cls, path) -> "FemConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def density(self) -> EnergyDensity:
        pen = None if self.penalty is None else PenaltyConfig(**self.penalty)
        return get_energy(self.energy, pen)

    def options(self) -> SolverOptions:
        return SolverOptions(max_iters=self.max_iters, grad_tol=self.grad_tol, seed=self.seed,
                             restarts=self.restarts)

    def F0(self) -> np.ndarray:
        return np.asarray(self.f0, dtype=float).reshape(2, 2)


def export_csv(path, field: DisplacementField) -> Path:
    mesh = field.mesh
    phi = field.phi
    rows = ((i, *mesh.coords[i], *phi[i]) for i in range(mesh.n_nodes))
    return write_csv(path, ["node", "X", "Y", "x", "y"], rows)


def export_vtk(path, field: DisplacementField) -> Path:
    """Deformed mesh with the mean and minimum quadrature determinant per cell."""
    mesh = field.mesh
    d = det2(gradients_at_quadrature(field))
    pts = np.column_stack([field.phi, np.zeros(mesh.n_nodes)])
    return write_vtk_quads(path, pts, mesh.elements,
                           {"det_grad_phi": d.mean(axis=1), "det_grad_phi_min": d.min(axis=1)})
