"""Grid-based rank-one convexification by sequential lamination.

The energy is sampled on the lattice ``delta * Z^{2x2}`` inside a box. Each
iteration convexifies the sampled values along every lattice line in the
direction set and keeps, per node, the lowest value found. Because the
directions are integer matrices ``a (x) b``, lines through lattice nodes
stay on the lattice and no interpolation is needed inside the iteration;
off-lattice queries use multilinear interpolation.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numba
import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .constants import DEFAULT_MEMORY_BUDGET, HULL_SLACK, ROC_EPSILON, ROC_TIE_EPS
from .convexify import SampledCurve, hull_indices
from .energy import EnergyDensity, as_mat2, det2

logger = logging.getLogger(__name__)

# the system TBB is often too old for numba; avoid the warning it triggers
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

__all__ = [
    "ResourceLimitError",
    "RocConfig",
    "Grid4",
    "DirectionSet",
    "RocResult",
    "build_grid",
    "directions",
    "line_points",
    "roc_iterate",
    "roc_iterate_reference",
    "estimate_memory",
]

# bytes per node and iteration for recorded splits: int8 dir, 2x int16, bool tie
_RECORD_BYTES = 6


class ResourceLimitError(MemoryError):
    """A requested grid would exceed the configured memory budget."""


@dataclass
class RocConfig:
    """Parameters of a rank-one convexification run.

    ``bounds`` holds one closed interval per component in the order
    (a11, a12, a21, a22); when omitted every component ranges over
    ``[-radius, radius]``. Bounds must lie on the lattice.
    """

    delta: float = 0.1
    radius: float = 2.0
    bounds: Optional[Sequence[Tuple[float, float]]] = None
    order: int = 1
    k_max: int = 10
    constrained: bool = False
    epsilon: float = ROC_EPSILON
    record: bool = True
    memory_budget: int = DEFAULT_MEMORY_BUDGET

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.k_max < 1:
            raise ValueError("k_max must be at least 1")
        if self.order < 1:
            raise ValueError("direction order must be at least 1")

    @classmethod
    def compression_box(cls, delta: float = 0.1, **kwargs) -> "RocConfig":
        """Box ``[delta, 1]`` on the diagonal, ``[-1, 1]`` off it, det-constrained."""
        b = [(delta, 1.0), (-1.0, 1.0), (-1.0, 1.0), (delta, 1.0)]
        kwargs.setdefault("constrained", True)
        return cls(delta=delta, bounds=b, **kwargs)

    def resolved_bounds(self) -> List[Tuple[float, float]]:
        if self.bounds is None:
            return [(-self.radius, self.radius)] * 4
        b = [tuple(map(float, iv)) for iv in self.bounds]
        if len(b) != 4 or any(lo > hi for lo, hi in b):
            raise ValueError(f"invalid bounds {self.bounds}")
        return b

    def lattice_range(self) -> Tuple[np.ndarray, np.ndarray]:
        """Integer lattice coordinates of the lower corner and the axis lengths."""
        lo, n = [], []
        for a, b in self.resolved_bounds():
            ka = math.ceil(a / self.delta - 1e-9)
            kb = math.floor(b / self.delta + 1e-9)
            if kb < ka:
                raise ValueError(f"interval [{a}, {b}] contains no lattice point")
            lo.append(ka)
            n.append(kb - ka + 1)
        return np.array(lo, dtype=np.int64), np.array(n, dtype=np.int64)


def estimate_memory(cfg: RocConfig) -> int:
    """Bytes needed by a run: three value arrays plus recorded splits."""
    _, n = cfg.lattice_range()
    nodes = int(np.prod(n))
    per_node = 3 * 8
    if cfg.record:
        per_node += _RECORD_BYTES * cfg.k_max
    return nodes * per_node


@dataclass
class Grid4:
    """Energy values on the lattice ``delta * (lo + i)`` for a 4-index ``i``."""

    delta: float
    lo: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.int64)
        if self.values.ndim != 4:
            raise ValueError("grid values must be a 4-D array")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    @property
    def shape(self):
        return self.values.shape

    @property
    def axes(self) -> List[np.ndarray]:
        return [self.delta * (self.lo[k] + np.arange(self.shape[k])) for k in range(4)]

    @property
    def bounds(self) -> List[Tuple[float, float]]:
        return [(self.delta * self.lo[k], self.delta * (self.lo[k] + self.shape[k] - 1)) for k in range(4)]

    def matrix(self, index) -> np.ndarray:
        m = self.lo + np.asarray(index, dtype=np.int64)
        return (self.delta * m).reshape(2, 2)

    def index_of(self, F, tol: float = 1e-9) -> Optional[Tuple[int, int, int, int]]:
        """Lattice index of ``F`` or ``None`` when ``F`` is off-lattice or outside."""
        f = as_mat2(F).reshape(4) / self.delta - self.lo
        idx = np.rint(f)
        if np.any(np.abs(f - idx) > tol) or np.any(idx < 0) or np.any(idx >= self.shape):
            return None
        return tuple(int(i) for i in idx)

    def contains(self, F, slack: float = HULL_SLACK) -> np.ndarray:
        F = as_mat2(F).reshape(-1, 4)
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return np.all((F >= lo - slack) & (F <= hi + slack), axis=-1)

    def interpolate(self, F):
        """Multilinear interpolation of the grid values at ``F`` (single or stacked)."""
        F = as_mat2(F)
        pts = F.reshape(-1, 4)
        if not np.all(self.contains(pts)):
            raise ValueError("interpolation point outside the grid box")
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        pts = np.clip(pts, lo, hi)
        # degenerate axes (a single lattice value) are handled by dropping them
        keep = [k for k in range(4) if self.shape[k] > 1]
        vals = self.values.reshape([self.shape[k] for k in keep]) if keep else self.values.reshape(())
        if not keep:
            out = np.full(len(pts), float(vals))
        else:
            interp = RegularGridInterpolator([self.axes[k] for k in keep], vals, method="linear")
            out = interp(pts[:, keep])
        return out.reshape(F.shape[:-2]) if F.ndim > 2 else float(out[0])

    def lattice_matrices(self, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        """Matrices for flat node indices ``start:stop`` in row-major order."""
        stop = self.values.size if stop is None else stop
        idx = np.stack(np.unravel_index(np.arange(start, stop), self.shape), axis=-1)
        return (self.delta * (self.lo + idx)).reshape(-1, 2, 2)


@dataclass(frozen=True)
class DirectionSet:
    """Pairwise non-parallel integer rank-one matrices ``a (x) b``."""

    integer: np.ndarray
    delta: float

    def __len__(self):
        return len(self.integer)

    @property
    def matrices(self) -> np.ndarray:
        return self.delta * self.integer


def _normal_form(M: np.ndarray) -> Tuple[int, ...]:
    flat = M.ravel()
    g = np.gcd.reduce(np.abs(flat))
    flat = flat // g
    first = flat[np.flatnonzero(flat)[0]]
    if first < 0:
        flat = -flat
    return tuple(int(v) for v in flat)


def directions(l: int = 1, delta: float = 0.1) -> DirectionSet:
    """All ``a (x) b`` with integer ``a, b`` of sup-norm at most ``l``, up to sign and scale."""
    if l < 1:
        raise ValueError("l must be at least 1")
    rng = range(-l, l + 1)
    vecs = [np.array([i, j]) for i in rng for j in rng if (i, j) != (0, 0)]
    seen = {}
    for a in vecs:
        for b in vecs:
            key = _normal_form(np.outer(a, b))
            if key not in seen:
                seen[key] = np.array(key, dtype=np.int64).reshape(2, 2)
    return DirectionSet(np.stack(list(seen.values())), float(delta))


def build_grid(W: EnergyDensity, cfg: RocConfig) -> Grid4:
    """Sample ``W`` on every lattice node of the configured box."""
    need = estimate_memory(cfg)
    if need > cfg.memory_budget:
        lo, n = cfg.lattice_range()
        raise ResourceLimitError(
            f"grid with shape {tuple(int(v) for v in n)} ({int(np.prod(n))} nodes) needs "
            f"{need / 2**20:.1f} MiB, budget is {cfg.memory_budget / 2**20:.1f} MiB"
        )
    lo, n = cfg.lattice_range()
    values = np.empty(int(np.prod(n)))
    grid = Grid4(cfg.delta, lo, np.zeros(tuple(int(v) for v in n)))
    chunk = 1 << 18
    for s in range(0, values.size, chunk):
        e = min(s + chunk, values.size)
        values[s:e] = W(grid.lattice_matrices(s, e))
    grid.values = values.reshape(grid.shape)
    if not np.all(np.isfinite(grid.values)):
        raise ValueError(f"energy {W.name} is not finite on the whole grid")
    return grid


def line_points(F, R, grid: Grid4, constrained: bool = False) -> SampledCurve:
    """Energy values along ``F + l * delta * R`` for integer ``l`` inside the grid box.

    ``R`` is the unscaled rank-one matrix. In constrained mode only the
    connected run of positive determinants that contains ``l = 0`` is kept;
    if ``F`` itself violates the constraint the result is the single point
    ``l = 0``.
    """
    F = as_mat2(F)
    R = np.asarray(R, dtype=float).reshape(2, 2)
    if abs(det2(R)) > 1e-12 or not np.any(R):
        raise ValueError("direction must have rank one")
    if not grid.contains(F)[0]:
        raise ValueError("F lies outside the grid box")
    step = grid.delta * R
    lmax = int(np.ceil(max(hi - lo for lo, hi in grid.bounds) / (grid.delta * np.abs(R).max()))) + 1
    ls = np.arange(-lmax, lmax + 1)
    pts = F + ls[:, None, None] * step
    inside = grid.contains(pts)
    # the box is convex, so the admissible set is a contiguous run around l = 0
    zero = lmax
    keep = _run_containing(inside, zero)
    if constrained:
        # lattice determinants are exact multiples of delta^2; absorb rounding
        keep &= _run_containing(det2(pts) > 1e-12, zero)
    if not keep[zero]:
        return SampledCurve(np.array([0.0]), np.array([grid.interpolate(F)]))
    ls, pts = ls[keep], pts[keep]
    return SampledCurve(ls.astype(float), grid.interpolate(pts))


def _run_containing(mask: np.ndarray, i: int) -> np.ndarray:
    out = np.zeros_like(mask)
    if not mask[i]:
        return out
    lo = i
    while lo > 0 and mask[lo - 1]:
        lo -= 1
    hi = i
    while hi < len(mask) - 1 and mask[hi + 1]:
        hi += 1
    out[lo : hi + 1] = True
    return out


@dataclass
class SplitRecord:
    """Best split found for every node during one iteration.

    ``direction[n] = -1`` means the node was not updated. Otherwise the new
    value is ``lam * W(F + l1 delta R) + (1 - lam) * W(F + l2 delta R)``
    with ``lam = l2 / (l2 - l1)``.
    """

    direction: np.ndarray
    l1: np.ndarray
    l2: np.ndarray
    tie: np.ndarray


@dataclass
class RocResult:
    grid: Grid4
    initial: Grid4
    dirs: DirectionSet
    config: RocConfig
    trace: List[dict] = field(default_factory=list)
    records: List[SplitRecord] = field(default_factory=list)

    def value_at(self, F) -> float:
        return self.grid.interpolate(F)


def _line_starts(shape, step) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for k in range(4):
        if step[k] == 0:
            continue
        sl = [None] * 4
        sl[k] = slice(None)
        # a line starts where stepping backwards leaves the grid
        ax = np.zeros(shape[k], dtype=bool)
        m = min(abs(int(step[k])), shape[k])
        if step[k] > 0:
            ax[:m] = True
        else:
            ax[shape[k] - m:] = True
        mask |= ax[tuple(sl)]
    return np.flatnonzero(mask)


@numba.njit(parallel=True, cache=True)
def _sweep_direction(old, new, shape, lo, step, d, starts, constrained, tie_eps,
                     rec_dir, rec_l1, rec_l2, rec_tie, record):
    strides = np.empty(4, dtype=np.int64)
    strides[3] = 1
    for k in range(2, -1, -1):
        strides[k] = strides[k + 1] * shape[k + 1]
    maxlen = 0
    for k in range(4):
        if shape[k] > maxlen:
            maxlen = shape[k]
    for s in numba.prange(starts.shape[0]):
        flat = np.empty(maxlen, dtype=np.int64)
        ts = np.empty(maxlen)
        vs = np.empty(maxlen)
        ok = np.empty(maxlen, dtype=np.bool_)
        hull = np.empty(maxlen, dtype=np.int64)
        idx = np.empty(4, dtype=np.int64)
        rem = starts[s]
        for k in range(4):
            idx[k] = rem // strides[k]
            rem -= idx[k] * strides[k]
        n = 0
        while True:
            inside = True
            for k in range(4):
                if idx[k] < 0 or idx[k] >= shape[k]:
                    inside = False
            if not inside:
                break
            f = 0
            for k in range(4):
                f += idx[k] * strides[k]
            flat[n] = f
            vs[n] = old[f]
            if constrained:
                # exact sign of det from integer lattice coordinates
                m0 = lo[0] + idx[0]
                m1 = lo[1] + idx[1]
                m2 = lo[2] + idx[2]
                m3 = lo[3] + idx[3]
                ok[n] = m0 * m3 - m1 * m2 > 0
            else:
                ok[n] = True
            n += 1
            for k in range(4):
                idx[k] += step[k]
        i = 0
        while i < n:
            if not ok[i]:
                i += 1
                continue
            j = i
            while j + 1 < n and ok[j + 1]:
                j += 1
            m = j - i + 1
            if m >= 2:
                for t in range(m):
                    ts[t] = t
                nh = hull_indices(ts, vs[i : j + 1], m, hull)
                for h in range(nh - 1):
                    ja = hull[h]
                    jb = hull[h + 1]
                    va = vs[i + ja]
                    vb = vs[i + jb]
                    for p in range(ja + 1, jb):
                        val = va + (vb - va) * (p - ja) / (jb - ja)
                        node = flat[i + p]
                        if val < new[node] - tie_eps:
                            new[node] = val
                            if record:
                                rec_dir[node] = d
                                rec_l1[node] = ja - p
                                rec_l2[node] = jb - p
                                rec_tie[node] = False
                        elif record and rec_dir[node] >= 0 and abs(val - new[node]) <= tie_eps:
                            rec_tie[node] = True
            i = j + 1


def roc_iterate(grid: Grid4, dirs: DirectionSet, cfg: RocConfig, threads: Optional[int] = None) -> RocResult:
    """Run up to ``k_max`` lamination iterations.

    Every iteration reads only the previous iterate, so node updates are
    independent; lines of one direction are processed in parallel. Stops
    early once the largest nodewise decrease falls below ``cfg.epsilon``.
    """
    if len(dirs) == 0:
        raise ValueError("empty direction set")
    if threads:
        numba.set_num_threads(int(threads))
    shape = np.array(grid.shape, dtype=np.int64)
    steps = dirs.integer.reshape(-1, 4)
    starts = [_line_starts(grid.shape, st) for st in steps]
    initial = Grid4(grid.delta, grid.lo.copy(), grid.values.copy())
    old = grid.values.ravel().copy()
    result = RocResult(grid=None, initial=initial, dirs=dirs, config=cfg)
    dummy8 = np.empty(0, dtype=np.int8)
    dummy16 = np.empty(0, dtype=np.int16)
    dummyb = np.empty(0, dtype=np.bool_)
    for k in range(cfg.k_max):
        t0 = time.perf_counter()
        new = old.copy()
        if cfg.record:
            rec = SplitRecord(
                np.full(old.size, -1, dtype=np.int8),
                np.zeros(old.size, dtype=np.int16),
                np.zeros(old.size, dtype=np.int16),
                np.zeros(old.size, dtype=np.bool_),
            )
        for d, st in enumerate(steps):
            if cfg.record:
                _sweep_direction(old, new, shape, grid.lo, st, d, starts[d], cfg.constrained,
                                 ROC_TIE_EPS, rec.direction, rec.l1, rec.l2, rec.tie, True)
            else:
                _sweep_direction(old, new, shape, grid.lo, st, d, starts[d], cfg.constrained,
                                 ROC_TIE_EPS, dummy8, dummy16, dummy16, dummyb, False)
        decrease = float(np.max(old - new))
        if cfg.record:
            result.records.append(rec)
        result.trace.append(
            {
                "iteration": k + 1,
                "max_decrease": decrease,
                "updated_nodes": int(np.count_nonzero(new < old)),
                "seconds": time.perf_counter() - t0,
            }
        )
        logger.info("ROC iteration %d: max decrease %.3e", k + 1, decrease)
        old = new
        if decrease < cfg.epsilon:
            break
    result.grid = Grid4(grid.delta, grid.lo.copy(), old.reshape(grid.shape))
    return result


def roc_iterate_reference(grid: Grid4, dirs: DirectionSet, cfg: RocConfig) -> Grid4:
    """Slow node-by-node version built on :func:`line_points` and the 1-D hull.

    Kept as an independent check of :func:`roc_iterate` on small grids.
    """
    from .convexify import lower_convex_hull

    values = grid.values.copy()
    for _ in range(cfg.k_max):
        cur = Grid4(grid.delta, grid.lo, values)
        new = values.copy()
        for index in np.ndindex(grid.shape):
            F = cur.matrix(index)
            best = values[index]
            for R in dirs.integer:
                curve = line_points(F, R, cur, cfg.constrained)
                if len(curve.ts) < 2:
                    continue
                best = min(best, float(lower_convex_hull(curve)(0.0)))
            new[index] = best
        decrease = np.max(values - new)
        values = new
        if decrease < cfg.epsilon:
            break
    return Grid4(grid.delta, grid.lo, values)
