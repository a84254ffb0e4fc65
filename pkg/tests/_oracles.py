"""Independent reference implementations used only by the test suite.

Each oracle deliberately avoids the code path it checks: IoU is estimated
by Monte Carlo rasterisation, transport plans come from scipy's LP solver,
gradients from central finite differences.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import linprog

from orientsemi.geometry import RotatedBox


def mc_intersection_area(a: RotatedBox, b: RotatedBox, pool: np.ndarray) -> float:
    """Monte Carlo estimate of the intersection area of two rotated boxes.

    ``pool`` is an (N, 2) array of uniform samples in [0, 1)^2, rescaled to
    the overlap of the two axis-aligned bounding boxes.  Box areas are exact,
    so only the intersection carries sampling noise.
    """
    ax0, ay0, ax1, ay1 = a.aabb()
    bx0, by0, bx1, by1 = b.aabb()
    x0, y0 = max(ax0, bx0), max(ay0, by0)
    x1, y1 = min(ax1, bx1), min(ay1, by1)
    if x0 >= x1 or y0 >= y1:
        return 0.0
    region_area = (x1 - x0) * (y1 - y0)
    px = x0 + pool[:, 0] * (x1 - x0)
    py = y0 + pool[:, 1] * (y1 - y0)
    inside = _points_in_box(px, py, a) & _points_in_box(px, py, b)
    return region_area * float(np.count_nonzero(inside)) / pool.shape[0]


def _points_in_box(px: np.ndarray, py: np.ndarray, box: RotatedBox) -> np.ndarray:
    dx = px - box.cx
    dy = py - box.cy
    c = math.cos(box.angle)
    s = math.sin(box.angle)
    local_x = dx * c + dy * s
    local_y = -dx * s + dy * c
    return (np.abs(local_x) <= 0.5 * box.w) & (np.abs(local_y) <= 0.5 * box.h)


def mc_iou(a: RotatedBox, b: RotatedBox, pool: np.ndarray) -> float:
    inter = mc_intersection_area(a, b, pool)
    union = a.area + b.area - inter
    return inter / union if inter > 0.0 else 0.0


class MonteCarloIoU:
    """Budget Monte-Carlo IoU estimator for large sample counts.

    Samples are drawn once and rescaled per pair into the overlap of the
    two axis-aligned bounding boxes, so every sample is spent where the
    intersection can live; the union uses exact rectangle areas.  All
    buffers are float32 and preallocated, which is what makes 10^7
    samples per pair affordable.
    """

    def __init__(self, n_samples: int, rng: np.random.Generator) -> None:
        self.n = n_samples
        self.pool = rng.random((2, n_samples), dtype=np.float32)
        self._px = np.empty(n_samples, dtype=np.float32)
        self._py = np.empty(n_samples, dtype=np.float32)
        self._dx = np.empty(n_samples, dtype=np.float32)
        self._dy = np.empty(n_samples, dtype=np.float32)
        self._bu = np.empty(n_samples, dtype=np.float32)
        self._bv = np.empty(n_samples, dtype=np.float32)
        self._fs = np.empty(n_samples, dtype=np.float32)
        self._ma = np.empty(n_samples, dtype=bool)
        self._mb = np.empty(n_samples, dtype=bool)
        self._mt = np.empty(n_samples, dtype=bool)

    def _inside(self, box: RotatedBox, out: np.ndarray) -> np.ndarray:
        c = np.float32(math.cos(box.angle))
        s = np.float32(math.sin(box.angle))
        np.subtract(self._px, np.float32(box.cx), out=self._dx)
        np.subtract(self._py, np.float32(box.cy), out=self._dy)
        np.multiply(self._dx, c, out=self._bu)
        np.multiply(self._dy, s, out=self._fs)
        np.add(self._bu, self._fs, out=self._bu)
        np.multiply(self._dx, -s, out=self._bv)
        np.multiply(self._dy, c, out=self._fs)
        np.add(self._bv, self._fs, out=self._bv)
        np.abs(self._bu, out=self._bu)
        np.abs(self._bv, out=self._bv)
        np.less_equal(self._bu, np.float32(box.w / 2), out=out)
        np.less_equal(self._bv, np.float32(box.h / 2), out=self._mt)
        np.logical_and(out, self._mt, out=out)
        return out

    def iou(self, a: RotatedBox, b: RotatedBox) -> float:
        ax0, ay0, ax1, ay1 = a.aabb()
        bx0, by0, bx1, by1 = b.aabb()
        x0, y0 = max(ax0, bx0), max(ay0, by0)
        x1, y1 = min(ax1, bx1), min(ay1, by1)
        if x0 >= x1 or y0 >= y1:
            return 0.0
        np.multiply(self.pool[0], np.float32(x1 - x0), out=self._px)
        np.add(self._px, np.float32(x0), out=self._px)
        np.multiply(self.pool[1], np.float32(y1 - y0), out=self._py)
        np.add(self._py, np.float32(y0), out=self._py)
        in_a = self._inside(a, self._ma)
        in_b = self._inside(b, self._mb)
        np.logical_and(in_a, in_b, out=in_a)
        inter = np.count_nonzero(in_a) / self.n * (x1 - x0) * (y1 - y0)
        union = a.w * a.h + b.w * b.h - inter
        return inter / union


def vertex_transport_cost(cost: np.ndarray, source: np.ndarray, target: np.ndarray) -> float:
    """Exact optimal transport cost by enumerating polytope vertices.

    Every vertex of the transportation polytope is a basic feasible
    solution: pick ``n + m - 1`` cells, solve the marginal equations
    restricted to them, and keep the solution if all mass is
    non-negative.  A linear objective over a bounded polytope attains
    its minimum at a vertex, so the minimum over all bases is exact.
    Only practical for tiny problems (n, m <= 3 means at most C(9, 5)
    = 126 candidate bases).
    """
    from itertools import combinations

    n, m = cost.shape
    n_cells = n * m
    # Marginal constraint matrix over all cells; the last row is
    # redundant because both marginals sum to the same total.
    full = np.zeros((n + m, n_cells))
    for k in range(n_cells):
        full[k // m, k] = 1.0
        full[n + k % m, k] = 1.0
    rhs = np.concatenate([source, target])
    best = math.inf
    for basis in combinations(range(n_cells), n + m - 1):
        basis = list(basis)
        square = full[:-1][:, basis]
        try:
            mass = np.linalg.solve(square, rhs[:-1])
        except np.linalg.LinAlgError:
            continue
        if np.any(mass < -1e-10):
            continue
        if not np.allclose(full[:, basis] @ mass, rhs, atol=1e-9):
            continue
        value = float(cost.ravel()[basis] @ mass)
        best = min(best, value)
    assert math.isfinite(best), "no feasible basis found"
    return best


def lp_transport(cost: np.ndarray, source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, float]:
    """Exact (unregularised) optimal transport via linear programming.

    Returns the optimal plan and its transport cost.  Feasible because
    ``source`` and ``target`` both sum to 1.
    """
    n, m = cost.shape
    a_eq = []
    for i in range(n):
        row = np.zeros(n * m)
        row[i * m : (i + 1) * m] = 1.0
        a_eq.append(row)
    for j in range(m):
        col = np.zeros(n * m)
        col[j::m] = 1.0
        a_eq.append(col)
    b_eq = np.concatenate([source, target])
    result = linprog(cost.ravel(), A_eq=np.array(a_eq), b_eq=b_eq, bounds=(0, None), method="highs")
    assert result.status == 0, f"LP solve failed: {result.message}"
    return result.x.reshape(n, m), float(result.fun)


def fd_gradient(fn, x: np.ndarray, step: float = 1e-6, indices=None) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a vector.

    With ``indices``, differentiates only those flat coordinates and
    returns a vector of the same length as ``indices``.
    """
    x = np.asarray(x, dtype=float)
    which = range(x.size) if indices is None else list(indices)
    grad = np.zeros(len(which) if indices is not None else x.size)
    for slot, i in enumerate(which):
        bumped = x.copy()
        bumped.flat[i] += step
        hi = fn(bumped)
        bumped.flat[i] -= 2.0 * step
        lo = fn(bumped)
        grad[slot] = (hi - lo) / (2.0 * step)
    return grad


def random_box_pair(rng: np.random.Generator) -> tuple[RotatedBox, RotatedBox]:
    """A pair of boxes spanning aspects 1-8, all relative angles, and a mix
    of heavy, light, and zero overlap."""
    scale = rng.uniform(0.5, 3.0)
    boxes = []
    for _ in range(2):
        aspect = rng.uniform(1.0, 8.0)
        h = scale * rng.uniform(0.5, 1.5)
        w = h * aspect
        angle = rng.uniform(-math.pi / 2, math.pi / 2)
        boxes.append((w, h, angle))
    (w1, h1, a1), (w2, h2, a2) = boxes
    spread = 0.5 * (w1 + h1 + w2 + h2) / 2.0
    offset_r = rng.uniform(0.0, spread)
    offset_t = rng.uniform(0.0, 2.0 * math.pi)
    cx2 = offset_r * math.cos(offset_t)
    cy2 = offset_r * math.sin(offset_t)
    return (
        RotatedBox(0.0, 0.0, w1, h1, a1),
        RotatedBox(cx2, cy2, w2, h2, a2),
    )
