"""One-dimensional convex envelopes of sampled functions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

from .energy import as_mat2, singular_values

__all__ = [
    "SampledCurve",
    "ConvexEnvelope1D",
    "lower_convex_hull",
    "hull_indices",
    "even_extension",
    "vl_envelope",
]


@numba.njit(cache=True, nogil=True)
def hull_indices(ts, vs, n, out):
    """Lower convex hull of the first ``n`` samples by a monotone scan.

    Writes the indices of the hull vertices into ``out`` and returns their
    count. A point is popped when the turn it makes is not strictly convex,
    so collinear points never survive. Endpoints are always kept.
    """
    m = 0
    for i in range(n):
        while m >= 2:
            o = out[m - 2]
            a = out[m - 1]
            cross = (ts[a] - ts[o]) * (vs[i] - vs[o]) - (vs[a] - vs[o]) * (ts[i] - ts[o])
            if cross <= 0.0:
                m -= 1
            else:
                break
        out[m] = i
        m += 1
    return m


@dataclass(frozen=True)
class SampledCurve:
    ts: np.ndarray
    vs: np.ndarray

    def __post_init__(self):
        ts = np.ascontiguousarray(self.ts, dtype=float)
        vs = np.ascontiguousarray(self.vs, dtype=float)
        if ts.ndim != 1 or ts.shape != vs.shape:
            raise ValueError("ts and vs must be 1-D arrays of equal length")
        if len(ts) < 1:
            raise ValueError("a sampled curve needs at least one point")
        if np.any(np.diff(ts) <= 0.0):
            raise ValueError("abscissae must be strictly increasing")
        object.__setattr__(self, "ts", ts)
        object.__setattr__(self, "vs", vs)


@dataclass(frozen=True)
class ConvexEnvelope1D:
    hull_ts: np.ndarray
    hull_vs: np.ndarray
    vertex_index: np.ndarray = field(repr=False, default=None)

    def __call__(self, t):
        return np.interp(t, self.hull_ts, self.hull_vs)

    def as_curve(self) -> SampledCurve:
        return SampledCurve(self.hull_ts, self.hull_vs)


def lower_convex_hull(curve: SampledCurve) -> ConvexEnvelope1D:
    """Convex envelope of a sampled curve (Graham's scan on sorted abscissae)."""
    if not isinstance(curve, SampledCurve):
        curve = SampledCurve(*curve)
    out = np.empty(len(curve.ts), dtype=np.int64)
    m = hull_indices(curve.ts, curve.vs, len(curve.ts), out)
    idx = out[:m].copy()
    return ConvexEnvelope1D(curve.ts[idx], curve.vs[idx], idx)


def even_extension(h: Callable, radius: float, step: float) -> SampledCurve:
    """Sample ``t -> h(|t|)`` on a grid symmetric about zero."""
    n = int(np.floor(radius / step + 1e-9))
    ts = step * np.arange(-n, n + 1)
    vs = np.asarray(h(np.abs(ts)), dtype=float)
    if vs.shape != ts.shape:
        vs = np.array([h(abs(t)) for t in ts], dtype=float)
    return SampledCurve(ts, vs)


def vl_envelope(h: Callable, F, sampling=(4.0, 1e-3)):
    """Relaxation of a Valanis-Landel energy ``sum_k h(lambda_k)``.

    The even continuation of ``h`` is sampled on ``[-radius, radius]``,
    convexified, and evaluated at both singular values of ``F``. ``F`` may
    be a stack of matrices; the hull is built once.

    Raises
    ------
    ValueError
        If a singular value exceeds the sampling radius.
    """
    radius, step = sampling
    F = as_mat2(F)
    lam1, lam2 = singular_values(F)
    if np.any(lam1 > radius):
        raise ValueError(
            f"sampling radius {radius} is below the largest singular value {np.max(lam1):.6g}"
        )
    env = lower_convex_hull(even_extension(h, radius, step))
    return env(lam1) + env(lam2)
