"""Lamination trees extracted from a ROC run and their microstructures."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy.optimize import brentq
from shapely.geometry import Polygon, box
from shapely.ops import unary_union

from .constants import TREE_TOL
from .energy import EnergyDensity, as_mat2, det2
from .io import write_csv, write_vtk_structured
from .roc import RocResult

__all__ = [
    "CorruptTreeError",
    "LaminationNode",
    "LaminationTree",
    "extract_laminates",
    "Microstructure",
    "reconstruct_microstructure",
]


class CorruptTreeError(ValueError):
    """Children of a node are not a rank-one splitting of it."""


@dataclass
class LaminationNode:
    F: np.ndarray
    weight: float = 1.0
    children: List["LaminationNode"] = field(default_factory=list)
    direction: Optional[np.ndarray] = None
    ambiguous: bool = False

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def to_dict(self) -> dict:
        return {
            "F": [float(v) for v in np.ravel(self.F)],
            "weight": float(self.weight),
            "direction": None if self.direction is None else [float(v) for v in np.ravel(self.direction)],
            "children": [c.to_dict() for c in self.children],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LaminationNode":
        direction = d.get("direction")
        return cls(
            F=np.asarray(d["F"], dtype=float).reshape(2, 2),
            weight=float(d["weight"]),
            children=[cls.from_dict(c) for c in d.get("children", [])],
            direction=None if direction is None else np.asarray(direction, dtype=float).reshape(2, 2),
        )


@dataclass
class LaminationTree:
    """Binary tree of rank-one splits rooted at the macroscopic gradient.

    ``weight`` on a node is its share of the parent; the volume fraction of
    a leaf is the product of weights along its path.
    """

    root: LaminationNode
    ties: int = 0

    def leaves(self) -> List[Tuple[float, np.ndarray]]:
        out = []

        def walk(node, frac):
            if node.is_leaf:
                out.append((frac, node.F))
            for c in node.children:
                walk(c, frac * c.weight)

        walk(self.root, 1.0)
        return out

    def nodes(self) -> List[LaminationNode]:
        out, stack = [], [self.root]
        while stack:
            n = stack.pop()
            out.append(n)
            stack.extend(n.children)
        return out

    @property
    def depth(self) -> int:
        def d(n):
            return 0 if n.is_leaf else 1 + max(d(c) for c in n.children)

        return d(self.root)

    def energy(self, W: EnergyDensity) -> float:
        return float(sum(frac * W(F) for frac, F in self.leaves()))

    def mean_gradient(self) -> np.ndarray:
        return sum(frac * F for frac, F in self.leaves())

    def check(self, tol: float = TREE_TOL) -> None:
        """Raise :class:`CorruptTreeError` unless every split is a rank-one average."""
        for node in self.nodes():
            if node.is_leaf:
                continue
            if len(node.children) != 2:
                raise CorruptTreeError("internal nodes must have exactly two children")
            c1, c2 = node.children
            if abs(c1.weight + c2.weight - 1.0) > tol or not (0.0 < c1.weight <= 1.0 and 0.0 < c2.weight <= 1.0):
                raise CorruptTreeError(f"child weights {c1.weight}, {c2.weight} do not form a convex split")
            scale = max(1.0, np.abs(node.F).max())
            if np.abs(c1.weight * c1.F + c2.weight * c2.F - node.F).max() > tol * scale:
                raise CorruptTreeError("weighted children do not average to the parent")
            D = c1.F - c2.F
            if abs(det2(D)) > tol * max(1.0, np.sum(D * D)):
                raise CorruptTreeError("children do not differ by a rank-one matrix")
            if node.direction is not None:
                R = node.direction
                cross = np.sum(D * D) * np.sum(R * R) - np.sum(D * R) ** 2
                if cross > tol * max(1.0, np.sum(D * D) * np.sum(R * R)):
                    raise CorruptTreeError("children difference is not parallel to the recorded direction")
        total = sum(frac for frac, _ in self.leaves())
        if abs(total - 1.0) > tol:
            raise CorruptTreeError(f"leaf volume fractions sum to {total}")

    def to_json(self, path=None, **kwargs) -> str:
        text = json.dumps(self.root.to_dict(), **kwargs)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text_or_path) -> "LaminationTree":
        text = str(text_or_path)
        if not text.lstrip().startswith("{"):
            text = Path(text_or_path).read_text()
        return cls(LaminationNode.from_dict(json.loads(text)))


def extract_laminates(result: RocResult, F0) -> LaminationTree:
    """Expand ``F0`` through the splits recorded during :func:`roc_iterate`.

    When a node's best split was tied with another direction the node is
    marked ``ambiguous`` and counted in ``tree.ties``; the first split found
    is kept.
    """
    if not result.records:
        raise ValueError("ROC run did not record minimizers")
    grid = result.grid
    index = grid.index_of(F0)
    if index is None:
        raise ValueError("F0 must be a lattice point of the ROC grid")
    steps = result.dirs.integer.reshape(-1, 4)
    ties = 0

    def expand(idx, k, weight):
        nonlocal ties
        flat = np.ravel_multi_index(idx, grid.shape)
        node = LaminationNode(F=grid.matrix(idx), weight=weight)
        for kk in range(k, 0, -1):
            rec = result.records[kk - 1]
            d = int(rec.direction[flat])
            if d < 0:
                continue
            l1, l2 = int(rec.l1[flat]), int(rec.l2[flat])
            lam = l2 / (l2 - l1)
            node.direction = grid.delta * result.dirs.integer[d].astype(float)
            if rec.tie[flat]:
                node.ambiguous = True
                ties += 1
            i1 = tuple(int(v) for v in np.asarray(idx) + l1 * steps[d])
            i2 = tuple(int(v) for v in np.asarray(idx) + l2 * steps[d])
            node.children = [expand(i1, kk - 1, lam), expand(i2, kk - 1, 1.0 - lam)]
            break
        return node

    root = expand(index, len(result.records), 1.0)
    return LaminationTree(root, ties)


def _split_vectors(node: LaminationNode, tol: float = TREE_TOL):
    """Amplitude ``a`` and unit normal ``n`` with ``F_c1 - F_c2 = a (x) n``."""
    c1, c2 = node.children
    D = c1.F - c2.F
    U, s, Vt = np.linalg.svd(D)
    if s[0] == 0.0 or s[1] > tol * max(1.0, s[0]):
        raise CorruptTreeError("children do not differ by a rank-one matrix")
    return s[0] * U[:, 0], Vt[0]


@dataclass
class Microstructure:
    """Piecewise affine deformation on [-1, 1]^2 realising a lamination tree.

    ``phi`` holds deformed positions on a ``resolution x resolution`` node
    grid, ``det`` the determinant of the local laminate gradient at those
    nodes. ``phases`` lists ``(F, area)`` per leaf region; the exact phase
    areas give ``mean_gradient``.
    """

    x: np.ndarray
    y: np.ndarray
    phi: np.ndarray
    det: np.ndarray
    phases: List[Tuple[np.ndarray, float]]
    frequency: int

    @property
    def mean_gradient(self) -> np.ndarray:
        area = sum(a for _, a in self.phases)
        return sum(a * F for F, a in self.phases) / area

    @property
    def has_negative_det(self) -> bool:
        return any(det2(F) <= 0.0 and a > 0.0 for F, a in self.phases)

    def rows(self):
        u = self.phi - np.stack([self.x, self.y], axis=-1)
        for i in range(self.x.size):
            yield (self.x.flat[i], self.y.flat[i], u.reshape(-1, 2)[i, 0], u.reshape(-1, 2)[i, 1], self.det.flat[i])

    def to_csv(self, path):
        return write_csv(path, ["x", "y", "u1", "u2", "det_grad_phi"], self.rows())

    def to_vtk(self, path):
        n = self.x.shape
        pts = np.column_stack([self.phi.reshape(-1, 2), np.zeros(self.x.size)])
        u = self.phi - np.stack([self.x, self.y], axis=-1)
        disp = np.column_stack([u.reshape(-1, 2), np.zeros(self.x.size)])
        return write_vtk_structured(path, pts, (n[1], n[0], 1), {"det_grad_phi": self.det.ravel()}, {"displacement": disp})


def _halfplane(n, t, extent=10.0):
    """Polygon ``{x : x . n <= t}`` clipped to a large box."""
    tvec = np.array([-n[1], n[0]])
    p0 = t * n
    far = extent * 4
    corners = [p0 + far * tvec, p0 - far * tvec, p0 - far * tvec - far * n, p0 + far * tvec - far * n]
    return Polygon(corners)


def _slab(n, ta, tb, extent=10.0):
    tvec = np.array([-n[1], n[0]])
    far = extent * 4
    return Polygon([ta * n + far * tvec, ta * n - far * tvec, tb * n - far * tvec, tb * n + far * tvec])


def _layer_boundaries(region, n, lam, frequency):
    """Positions along ``n`` splitting ``region`` into ``frequency`` periods whose
    first part holds exactly the fraction ``lam`` of each period's area."""
    coords = []
    geoms = getattr(region, "geoms", [region])
    for g in geoms:
        coords.append(np.asarray(g.exterior.coords))
    proj = np.concatenate(coords) @ n
    tmin, tmax = proj.min(), proj.max()
    total = region.area

    def frac(t):
        return region.intersection(_halfplane(n, t)).area / total

    def solve(target):
        if target <= 0.0:
            return tmin
        if target >= 1.0:
            return tmax
        return brentq(lambda t: frac(t) - target, tmin, tmax, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)

    bounds = []
    for j in range(frequency):
        bounds.append((solve(j / frequency), solve((j + lam) / frequency)))
    return tmin, tmax, bounds


def reconstruct_microstructure(tree: LaminationTree, frequency: int = 10, resolution: int = 101) -> Microstructure:
    """Layered deformation whose gradient takes the leaf values of ``tree``.

    Each split of a region ``P`` with normal ``n`` cuts ``P`` into
    ``frequency`` layer pairs positioned so that the first child occupies
    exactly its weight of the area; deeper splits repeat the construction
    inside their parent's layers. The deformation is
    ``phi(x) = F0 x + sum_v a_v s_v(x . n_v)`` summed over the splits whose
    region contains ``x``, with ``s_v`` the sawtooth of slopes ``1 - lam``
    and ``-lam``. Continuity across interfaces holds for the first level;
    boundary values match ``F0 x`` only in the limit of infinite frequency.
    """
    if frequency < 1:
        raise ValueError("frequency must be at least 1")
    tree.check()
    xs = np.linspace(-1.0, 1.0, resolution)
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    P = np.stack([X, Y], axis=-1).reshape(-1, 2)
    F0 = as_mat2(tree.root.F)
    phi = P @ F0.T
    det = np.empty(len(P))
    phases = []

    def visit(node, region, mask):
        if node.is_leaf:
            phases.append((node.F, region.area))
            det[mask] = det2(node.F)
            return
        a, n = _split_vectors(node)
        lam = node.children[0].weight
        tmin, tmax, layers = _layer_boundaries(region, n, lam, frequency)
        # sawtooth s(t): slope 1-lam inside first-child layers, -lam elsewhere
        knots = [tmin]
        for ta, tb in layers:
            knots += [ta, tb]
        knots.append(tmax)
        knots = np.array(knots)
        slopes = np.empty(len(knots) - 1)
        slopes[0::2] = -lam
        slopes[1::2] = 1.0 - lam
        svals = np.concatenate([[0.0], np.cumsum(slopes * np.diff(knots))])
        t = P[mask] @ n
        phi[mask] += np.interp(t, knots, svals)[:, None] * a
        in_first = np.zeros(len(t), dtype=bool)
        for ta, tb in layers:
            in_first |= (t >= ta) & (t < tb)
        first_region = region.intersection(unary_union([_slab(n, ta, tb) for ta, tb in layers]))
        second_region = region.difference(first_region)
        m1 = mask.copy()
        m1[mask] = in_first
        m2 = mask.copy()
        m2[mask] = ~in_first
        visit(node.children[0], first_region, m1)
        visit(node.children[1], second_region, m2)

    visit(tree.root, box(-1.0, -1.0, 1.0, 1.0), np.ones(len(P), dtype=bool))
    return Microstructure(X, Y, phi.reshape(X.shape + (2,)), det.reshape(X.shape), phases, frequency)
