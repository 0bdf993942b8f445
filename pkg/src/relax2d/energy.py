"""Biot-type energy densities and their closed-form relaxations in 2-D.

All functions accept either a single 2x2 matrix or a stack of matrices with
shape ``(..., 2, 2)`` and broadcast over the leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, NamedTuple, Optional

import numpy as np

from .constants import GRADIENT_FD_STEP, NONSMOOTH_TOL

__all__ = [
    "DomainError",
    "SingularPair",
    "EnergyDensity",
    "PenaltyConfig",
    "as_mat2",
    "det2",
    "cof2",
    "frob2",
    "singular_values",
    "w_biot",
    "w_dist",
    "seth_hill_energy",
    "penalize",
    "q_biot_unconstrained",
    "q_dist_unconstrained",
    "q_glp",
    "q_biot_pipkin_oracle",
    "dist_so2_bruteforce",
    "rotation",
    "BIOT",
    "DIST",
    "get_energy",
]


class DomainError(ValueError):
    """Raised when an energy is evaluated outside its domain of definition."""


class SingularPair(NamedTuple):
    lambda1: np.ndarray
    lambda2: np.ndarray


def as_mat2(F) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    if F.shape[-2:] != (2, 2):
        if F.shape[-1:] == (4,):
            F = F.reshape(F.shape[:-1] + (2, 2))
        else:
            raise ValueError(f"expected trailing shape (2, 2), got {F.shape}")
    if not np.all(np.isfinite(F)):
        raise ValueError("matrix entries must be finite")
    return F


def det2(F):
    return F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]


def cof2(F):
    """Cofactor matrix, i.e. the derivative of ``det`` with respect to F."""
    out = np.empty_like(F)
    out[..., 0, 0] = F[..., 1, 1]
    out[..., 0, 1] = -F[..., 1, 0]
    out[..., 1, 0] = -F[..., 0, 1]
    out[..., 1, 1] = F[..., 0, 0]
    return out


def frob2(F):
    return np.sum(F * F, axis=(-2, -1))


def rotation(alpha):
    c, s = np.cos(alpha), np.sin(alpha)
    return np.array([[c, s], [-s, c]])


def singular_values(F) -> SingularPair:
    """Singular values of 2x2 matrices, sorted descending.

    Uses ``lambda1 + lambda2 = sqrt(|F|^2 + 2|det F|)`` and
    ``lambda1 - lambda2 = sqrt(|F|^2 - 2|det F|)``; the smaller value is
    recovered as ``|det F| / lambda1`` to avoid cancellation.
    """
    F = as_mat2(F)
    n2 = frob2(F)
    adet = np.abs(det2(F))
    s = np.sqrt(n2 + 2.0 * adet)
    d = np.sqrt(np.maximum(n2 - 2.0 * adet, 0.0))
    lam1 = 0.5 * (s + d)
    with np.errstate(invalid="ignore", divide="ignore"):
        lam2 = np.where(lam1 > 0.0, adet / np.where(lam1 > 0.0, lam1, 1.0), 0.0)
    return SingularPair(lam1, lam2)


def w_biot(F):
    """Biot energy ``|sqrt(F^T F) - id|^2 = (lambda1-1)^2 + (lambda2-1)^2``."""
    lam1, lam2 = singular_values(F)
    return (lam1 - 1.0) ** 2 + (lam2 - 1.0) ** 2


def _grad_w_biot(F):
    F = as_mat2(F)
    d = det2(F)
    sigma = np.where(d >= 0.0, 1.0, -1.0)
    lam1, lam2 = singular_values(F)
    trU = lam1 + lam2
    safe = np.where(trU > 0.0, trU, 1.0)[..., None, None]
    P = (F + sigma[..., None, None] * cof2(F)) / safe
    # F = 0: take the limit along F = t id
    P = np.where((trU > 0.0)[..., None, None], P, np.eye(2))
    return 2.0 * F - 2.0 * P


def w_dist(F):
    """Squared distance to SO(2): ``|F|^2 - 2 sqrt(|F|^2 + 2 det F) + 2``."""
    F = as_mat2(F)
    q = np.maximum(frob2(F) + 2.0 * det2(F), 0.0)
    return frob2(F) - 2.0 * np.sqrt(q) + 2.0


def _grad_w_dist(F):
    F = as_mat2(F)
    q = np.maximum(frob2(F) + 2.0 * det2(F), 0.0)
    rq = np.sqrt(q)
    safe = np.where(rq > 0.0, rq, 1.0)[..., None, None]
    corr = np.where((rq > 0.0)[..., None, None], (F + cof2(F)) / safe, 0.0)
    return 2.0 * F - 2.0 * corr


def _seth_hill_f(x, m):
    if m == 0:
        return np.log(x)
    m = float(m)
    return (x ** (2.0 * m) - 1.0) / (2.0 * m)


def seth_hill_energy(F, m):
    """Squared Frobenius norm of the Seth-Hill strain tensor of order ``m``.

    ``m`` may be any rational (``Fraction``, int or float). ``m = 1/2`` is the
    Biot energy, ``m = 0`` the Hencky energy ``|log U|^2`` and ``m = 1`` the
    Green-strain energy ``|(C - id)/2|^2``.
    """
    m = Fraction(m).limit_denominator(10**6) if not isinstance(m, Fraction) else m
    lam1, lam2 = singular_values(F)
    if m <= 0 and np.any(np.minimum(lam1, lam2) <= 0.0):
        raise DomainError(f"Seth-Hill energy with m={m} needs nonzero singular values")
    return _seth_hill_f(lam1, m) ** 2 + _seth_hill_f(lam2, m) ** 2


def q_biot_unconstrained(F):
    """Relaxation of the Biot energy over all 2x2 matrices: sum of [lambda_k - 1]_+^2."""
    lam1, lam2 = singular_values(F)
    return np.maximum(lam1 - 1.0, 0.0) ** 2 + np.maximum(lam2 - 1.0, 0.0) ** 2


def _grad_q_biot(F):
    F = as_mat2(F)
    U, s, Vt = np.linalg.svd(F)
    coeff = 2.0 * np.maximum(s - 1.0, 0.0)
    return np.einsum("...ik,...k,...kj->...ij", U, coeff, Vt)


def q_dist_unconstrained(F):
    """Relaxation of ``dist^2(., SO(2))`` over all 2x2 matrices.

    ``1 - 2 det F`` inside the set ``|F|^2 + 2 det F < 1`` and
    ``(sqrt(|F|^2 + 2 det F) - 1)^2 + 1 - 2 det F`` outside it.
    """
    F = as_mat2(F)
    d = det2(F)
    q = np.maximum(frob2(F) + 2.0 * d, 0.0)
    convex_part = np.where(q < 1.0, 0.0, (np.sqrt(q) - 1.0) ** 2)
    return convex_part + 1.0 - 2.0 * d


def _grad_q_dist(F):
    F = as_mat2(F)
    q = np.maximum(frob2(F) + 2.0 * det2(F), 0.0)
    inside = (q < 1.0)[..., None, None]
    return np.where(inside, -2.0 * cof2(F), _grad_w_dist(F))


def q_glp(F):
    """Relaxation of the Biot energy restricted to det F > 0.

    Coincides with :func:`q_dist_unconstrained` on GL+(2) and is undefined
    elsewhere.
    """
    F = as_mat2(F)
    if np.any(det2(F) <= 0.0):
        raise DomainError("constrained envelope is only defined for det F > 0")
    return q_dist_unconstrained(F)


def q_biot_pipkin_oracle(F):
    """Relaxed Biot energy via minimisation over C + S, S positive semidefinite.

    Independent route: the eigenvalues ``c_ii`` of ``C = F^T F`` are computed
    directly and each term of ``j_C(s11, s22)`` is minimised by case
    analysis, ``c < 1`` lifting to ``c + s = 1`` (zero contribution) and
    ``c >= 1`` keeping ``s = 0``.
    """
    F = as_mat2(F)
    C = np.swapaxes(F, -1, -2) @ F
    a, b, d = C[..., 0, 0], C[..., 0, 1], C[..., 1, 1]
    half_tr = 0.5 * (a + d)
    disc = np.sqrt(0.25 * (a - d) ** 2 + b * b)
    total = 0.0
    for c in (half_tr + disc, half_tr - disc):
        c = np.maximum(c, 0.0)
        s_opt = np.where(c < 1.0, 1.0 - c, 0.0)
        total = total + (np.sqrt(c + s_opt) - 1.0) ** 2
    return total


def dist_so2_bruteforce(F, n: int):
    """Minimum of ``|F - R(alpha)|^2`` over ``n`` equispaced angles in (-pi, pi]."""
    if n < 3:
        raise ValueError("need at least 3 angles")
    F = as_mat2(F)
    alpha = -np.pi + 2.0 * np.pi * np.arange(1, n + 1) / n
    c, s = np.cos(alpha), np.sin(alpha)
    F = F[..., None, :, :]
    dist2 = (
        (F[..., 0, 0] - c) ** 2
        + (F[..., 0, 1] - s) ** 2
        + (F[..., 1, 0] + s) ** 2
        + (F[..., 1, 1] - c) ** 2
    )
    return dist2.min(axis=-1)


def finite_difference_gradient(func, F, h=GRADIENT_FD_STEP):
    """Central differences of a matrix function, vectorised over the stack."""
    F = as_mat2(F)
    g = np.empty_like(F)
    for i in range(2):
        for j in range(2):
            Fp = F.copy()
            Fm = F.copy()
            Fp[..., i, j] += h
            Fm[..., i, j] -= h
            g[..., i, j] = (func(Fp) - func(Fm)) / (2.0 * h)
    return g


@dataclass(frozen=True)
class EnergyDensity:
    """An energy density ``W(F)`` with an optional analytic gradient.

    ``nonsmooth`` returns a distance-like measure to the set where the
    analytic gradient is only one-sided; points closer than
    ``NONSMOOTH_TOL`` are differentiated numerically instead.
    """

    name: str
    value: Callable
    gradient: Optional[Callable] = None
    nonsmooth: Optional[Callable] = None

    def __call__(self, F):
        return self.value(as_mat2(F))

    def grad(self, F):
        F = as_mat2(F)
        if self.gradient is None:
            return finite_difference_gradient(self.value, F)
        g = self.gradient(F)
        if self.nonsmooth is not None:
            near = np.asarray(self.nonsmooth(F)) < NONSMOOTH_TOL
            if np.any(near):
                Fn = F[near] if F.ndim > 2 else F
                gn = finite_difference_gradient(self.value, Fn)
                if F.ndim > 2:
                    g[near] = gn
                else:
                    g = gn
        return g


@dataclass(frozen=True)
class PenaltyConfig:
    """Determinant penalty ``k [-det F]_+^exponent``."""

    k: float = 1e5
    exponent: int = 1

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("penalty stiffness k must be positive")
        if self.exponent not in (1, 2):
            raise ValueError("penalty exponent must be 1 or 2")


def penalize(W: EnergyDensity, cfg: PenaltyConfig) -> EnergyDensity:
    k, e = float(cfg.k), int(cfg.exponent)

    def value(F):
        neg = np.maximum(-det2(F), 0.0)
        return W.value(F) + k * neg**e

    gradient = None
    if W.gradient is not None:

        def gradient(F):
            neg = np.maximum(-det2(F), 0.0)
            coeff = -k * e * neg ** (e - 1) * (neg > 0.0)
            return W.gradient(F) + coeff[..., None, None] * cof2(F)

    def nonsmooth(F):
        dist = np.abs(det2(F)) if e == 1 else np.full(det2(F).shape, np.inf)
        if W.nonsmooth is not None:
            dist = np.minimum(dist, W.nonsmooth(F))
        return dist

    return EnergyDensity(f"{W.name}_penalized(k={k:g},e={e})", value, gradient, nonsmooth)


BIOT = EnergyDensity("biot", w_biot, _grad_w_biot, lambda F: np.abs(det2(F)))
DIST = EnergyDensity(
    "dist", w_dist, _grad_w_dist, lambda F: np.maximum(frob2(F) + 2.0 * det2(F), 0.0)
)
Q_BIOT = EnergyDensity("q_biot", q_biot_unconstrained, _grad_q_biot)
Q_DIST = EnergyDensity("q_dist", q_dist_unconstrained, _grad_q_dist)


def get_energy(name: str, penalty: Optional[PenaltyConfig] = None) -> EnergyDensity:
    """Look up a density by the names used in run configurations.

    Recognised: ``biot``, ``dist``, ``biot_penalized`` (default k=1e5,
    exponent 1) and ``seth_hill:<m>`` with ``m`` a rational such as ``1/2``.
    """
    if name == "biot":
        W = BIOT
    elif name == "dist":
        W = DIST
    elif name == "biot_penalized":
        return penalize(BIOT, penalty or PenaltyConfig())
    elif name.startswith("seth_hill:"):
        m = Fraction(name.split(":", 1)[1])
        W = EnergyDensity(f"seth_hill({m})", lambda F, m=m: seth_hill_energy(F, m))
    else:
        raise KeyError(f"unknown energy {name!r}")
    if penalty is not None:
        W = penalize(W, penalty)
    return W
