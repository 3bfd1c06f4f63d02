"""Graph-based optic nerve segmentation.

Rebuilds each optic nerve as a tube around a centerline obtained as the
minimum-cost monotone path (Dijkstra) between an eye-side landmark and a
chiasm-side landmark, so the result is guaranteed to connect the eye to
the optic chiasm. Node costs combine the predicted label, the distance to
the predicted nerve border and the distance to the target landmark;
hyperintense orbital fat is excluded beforehand with a quantile threshold.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import (
    BinaryMask,
    Point3,
    Volume3D,
    barycenter,
    largest_component,
    require_same_geometry,
)


@dataclass(frozen=True)
class NerveParams:
    """Tuning constants of the nerve reconstruction.

    Radii are in voxels, the landmark-merge threshold in millimeters.
    """

    p: int = 30  # landmark barycenter sample size
    c_label: float = 100.0  # penalty for stepping on a negative voxel
    c_dist: float = 0.001  # weight of the distance-to-target tiebreaker
    r_eye: float = 7.0  # search/tube radius at the eye end
    r_chiasm: float = 3.0  # search/tube radius at the chiasm end
    r1: float = 2.5  # unconditional inner tube radius
    fat_quantile: float = 0.98
    fat_factor: float = 0.80
    fat_box_halfwidth: int = 7
    close_landmark_threshold_mm: float = 3.0

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.c_label <= 0:
            raise ValueError("c_label must be > 0")
        if not self.r_eye >= self.r_chiasm >= 1:
            raise ValueError("radii must satisfy r_eye >= r_chiasm >= 1")
        if not 0 < self.fat_factor <= 1:
            raise ValueError("fat_factor must be in (0, 1]")
        if not 0 < self.fat_quantile < 1:
            raise ValueError("fat_quantile must be in (0, 1)")
        if self.r1 <= 0:
            raise ValueError("r1 must be > 0")


@dataclass(frozen=True)
class NerveLandmarks:
    """Endpoints of one optic nerve in voxel coordinates."""

    eye_end: Point3
    chiasm_end: Point3
    side: str = "left"

    def __post_init__(self):
        object.__setattr__(self, "eye_end", tuple(int(v) for v in self.eye_end))
        object.__setattr__(self, "chiasm_end", tuple(int(v) for v in self.chiasm_end))


@dataclass(frozen=True)
class NodeCost:
    """Additive cost of entering one graph node."""

    c_label: float
    c_border: float
    c_distance: float

    @property
    def total(self) -> float:
        return self.c_label + self.c_border + self.c_distance


@dataclass(frozen=True)
class CenterlinePath:
    """Voxel path from the eye landmark to the chiasm landmark.

    Consecutive points advance y by a constant +-1 (anatomically +1,
    anterior to posterior) and move x and z by at most one voxel.
    """

    points: tuple[Point3, ...]
    total_cost: float = 0.0

    def __post_init__(self):
        points = tuple(tuple(int(v) for v in p) for p in self.points)
        object.__setattr__(self, "points", points)
        if not points:
            raise ValueError("centerline must have at least one point")
        steps = {b[1] - a[1] for a, b in zip(points, points[1:])}
        if steps and steps not in ({1}, {-1}):
            raise ValueError("centerline y coordinate must be strictly monotone")
        for a, b in zip(points, points[1:]):
            if abs(b[0] - a[0]) > 1 or abs(b[2] - a[2]) > 1:
                raise ValueError("centerline x/z steps must be at most one voxel")


def _distances_to_set_mm(points: np.ndarray, target: BinaryMask) -> np.ndarray:
    """Exact mm distance from each query point to the nearest target voxel.

    Works on the joint bounding box of the target and the query points, so
    large grids stay cheap.
    """
    target_coords = np.argwhere(target.bits)
    lo = np.minimum(points.min(axis=0), target_coords.min(axis=0))
    hi = np.maximum(points.max(axis=0), target_coords.max(axis=0)) + 1
    box = tuple(slice(int(l), int(h)) for l, h in zip(lo, hi))
    dist = ndimage.distance_transform_edt(
        ~target.bits[box], sampling=target.geometry.spacing
    )
    local = points - lo
    return dist[tuple(local.T)]


def _nearest_voxel_to(mask: BinaryMask, point: tuple[float, float, float]) -> Point3:
    coords = np.argwhere(mask.bits)
    spacing = np.asarray(mask.geometry.spacing)
    d2 = (((coords - np.asarray(point)) * spacing) ** 2).sum(axis=1)
    return tuple(int(v) for v in coords[int(np.argmin(d2))])


def _rounded_barycenter(coords: np.ndarray) -> Point3:
    return tuple(int(v) for v in np.rint(coords.mean(axis=0)))


def detect_landmarks(
    nerve_pred: BinaryMask,
    eye: BinaryMask,
    chiasm_side: BinaryMask,
    p: int = 30,
    side: str = "left",
) -> NerveLandmarks:
    """Locate the eye-side and chiasm-side endpoints of one nerve.

    The eye end is the rounded barycenter of the p predicted nerve voxels
    nearest the eye; the chiasm end the rounded barycenter of the p
    chiasm-half voxels nearest the nerve prediction. With no nerve
    prediction at all, falls back to the mutually nearest surface voxels
    of the eye and the chiasm half.
    """
    require_same_geometry(nerve_pred, eye, chiasm_side)
    if eye.is_empty or chiasm_side.is_empty:
        raise ValueError("missing prerequisite organ")

    nerve_coords = np.argwhere(nerve_pred.bits)
    if nerve_coords.size == 0:
        eye_end = _nearest_voxel_to(eye, barycenter(chiasm_side))
        chiasm_end = _nearest_voxel_to(chiasm_side, barycenter(eye))
        return NerveLandmarks(eye_end, chiasm_end, side)

    dist_eye = _distances_to_set_mm(nerve_coords, eye)
    take = min(p, len(nerve_coords))
    nearest = nerve_coords[np.argsort(dist_eye, kind="stable")[:take]]
    eye_end = _rounded_barycenter(nearest)

    chiasm_coords = np.argwhere(chiasm_side.bits)
    dist_nerve = _distances_to_set_mm(chiasm_coords, nerve_pred)
    take = min(p, len(chiasm_coords))
    nearest = chiasm_coords[np.argsort(dist_nerve, kind="stable")[:take]]
    chiasm_end = _rounded_barycenter(nearest)
    return NerveLandmarks(eye_end, chiasm_end, side)


def too_close(
    left: NerveLandmarks,
    right: NerveLandmarks,
    spacing: tuple[float, float, float],
    threshold_mm: float = 3.0,
) -> bool:
    """True iff the two chiasm landmarks are closer than the threshold."""
    delta = (np.asarray(left.chiasm_end) - np.asarray(right.chiasm_end)) * np.asarray(spacing)
    return bool(math.sqrt(float((delta**2).sum())) < threshold_mm)


def refine_by_intensity(
    nerve_pred: BinaryMask,
    intensities: Volume3D,
    eye_end: Point3,
    params: NerveParams | None = None,
) -> BinaryMask:
    """Drop predicted nerve voxels that look like hyperintense fat.

    The fat intensity range is estimated as the fat_quantile of the box
    around the eye-side landmark; prediction voxels brighter than
    fat_factor times that value are cleared. If the threshold would not
    spare even the darkest voxel of the box (degenerate, e.g. constant
    intensities), the prediction is returned unchanged.
    """
    params = params or NerveParams()
    require_same_geometry(nerve_pred, intensities)
    h = params.fat_box_halfwidth
    sizes = intensities.geometry.sizes
    window = tuple(
        slice(max(0, c - h), min(n, c + h + 1)) for c, n in zip(eye_end, sizes)
    )
    box = np.sort(intensities.values[window], axis=None)
    rank = math.ceil(params.fat_quantile * box.size)
    quantile = box[rank - 1]
    threshold = params.fat_factor * quantile
    if threshold <= box[0]:
        return nerve_pred
    return BinaryMask(nerve_pred.geometry, nerve_pred.bits & ~(intensities.values > threshold))


def node_cost(
    label: int,
    d_border: float,
    d_target_mm: float,
    r: float,
    params: NerveParams | None = None,
) -> NodeCost:
    """Cost of entering a node: label penalty + border term + target pull.

    Positive voxels pay r - min(d_border, r) so centered voxels are free;
    negative voxels pay the flat c_label penalty instead. The target-
    distance term is a tiebreaker proportional to the mm distance left.
    """
    params = params or NerveParams()
    if label:
        c_label = 0.0
        c_border = r - min(d_border, r)
    else:
        c_label = params.c_label
        c_border = 0.0
    return NodeCost(c_label=c_label, c_border=c_border, c_distance=params.c_dist * d_target_mm)


def _roi_bounds(eye_end: Point3, chiasm_end: Point3, sizes, pad: int):
    x0 = max(0, min(eye_end[0], chiasm_end[0]) - pad)
    x1 = min(sizes[0] - 1, max(eye_end[0], chiasm_end[0]) + pad)
    z0 = max(0, min(eye_end[2], chiasm_end[2]) - pad)
    z1 = min(sizes[2] - 1, max(eye_end[2], chiasm_end[2]) + pad)
    return x0, x1, z0, z1


def centerline_cost_field(
    refined: BinaryMask, landmarks: NerveLandmarks, params: NerveParams | None = None
):
    """Node costs over the search region, one layer per y between landmarks.

    Returns (cost, x0, z0, ys): cost has shape (layers, width, height or
    rather depth) with cost[k, i, j] the cost of node (x0+i, ys[k], z0+j).
    The search radius interpolates linearly from r_eye at the first layer
    to r_chiasm at the last; the border distance is the chessboard
    (breadth-first) distance to the nearest negative voxel inside the
    region, capped at the layer radius.
    """
    params = params or NerveParams()
    eye_end, chiasm_end = landmarks.eye_end, landmarks.chiasm_end
    dy = chiasm_end[1] - eye_end[1]
    if (
        dy == 0
        or abs(chiasm_end[0] - eye_end[0]) > abs(dy)
        or abs(chiasm_end[2] - eye_end[2]) > abs(dy)
    ):
        raise ValueError("landmarks not connectable")
    sizes = refined.geometry.sizes
    sx, sy, sz = refined.geometry.spacing
    step = 1 if dy > 0 else -1
    layers = abs(dy) + 1
    ys = [eye_end[1] + k * step for k in range(layers)]
    x0, x1, z0, z1 = _roi_bounds(eye_end, chiasm_end, sizes, int(math.ceil(params.r_eye)))

    pos = refined.bits[x0 : x1 + 1, ys, z0 : z1 + 1]  # (width, layers, depth)
    pos = np.ascontiguousarray(np.moveaxis(pos, 1, 0))  # (layers, width, depth)

    if pos.all():
        d_border = np.full(pos.shape, np.inf)
    else:
        d_border = ndimage.distance_transform_cdt(pos, metric="chessboard").astype(np.float64)

    radius = params.r_eye + (params.r_chiasm - params.r_eye) * (
        np.arange(layers, dtype=np.float64) / max(1, layers - 1)
    )
    radius = radius[:, None, None]

    xs_mm = (np.arange(x0, x1 + 1, dtype=np.float64) - chiasm_end[0]) * sx
    ys_mm = (np.asarray(ys, dtype=np.float64) - chiasm_end[1]) * sy
    zs_mm = (np.arange(z0, z1 + 1, dtype=np.float64) - chiasm_end[2]) * sz
    d_target = np.sqrt(
        ys_mm[:, None, None] ** 2 + xs_mm[None, :, None] ** 2 + zs_mm[None, None, :] ** 2
    )

    cost = np.where(pos, radius - np.minimum(d_border, radius), params.c_label)
    cost += params.c_dist * d_target
    return cost, x0, z0, ys


def shortest_centerline(
    refined: BinaryMask, landmarks: NerveLandmarks, params: NerveParams | None = None
) -> CenterlinePath:
    """Minimum-cost monotone path between the two landmarks (Dijkstra).

    The graph is layered along y: the children of (x, y, z) are
    (x+dx, y+step, z+dz) with dx, dz in {-1, 0, 1}. Edges entering a node
    cost that node's cost; the start node itself is free. The path total
    is the sum of entered-node costs.
    """
    params = params or NerveParams()
    eye_end, chiasm_end = landmarks.eye_end, landmarks.chiasm_end
    if eye_end == chiasm_end:
        return CenterlinePath((eye_end,), total_cost=0.0)
    cost, x0, z0, ys = centerline_cost_field(refined, landmarks, params)
    layers, width, depth = cost.shape

    start = (0, eye_end[0] - x0, eye_end[2] - z0)
    target = (layers - 1, chiasm_end[0] - x0, chiasm_end[2] - z0)

    dist = np.full(cost.shape, np.inf)
    move = np.full(cost.shape, -1, dtype=np.int8)  # index of (dx, dz) used to enter
    deltas = [(dx, dz) for dx in (-1, 0, 1) for dz in (-1, 0, 1)]
    dist[start] = 0.0
    heap = [(0.0, start)]
    while heap:
        d, node = heapq.heappop(heap)
        if node == target:
            break
        if d > dist[node]:
            continue
        k, i, j = node
        if k + 1 >= layers:
            continue
        for idx, (dx, dz) in enumerate(deltas):
            ni, nj = i + dx, j + dz
            if not (0 <= ni < width and 0 <= nj < depth):
                continue
            nd = d + cost[k + 1, ni, nj]
            if nd < dist[k + 1, ni, nj]:
                dist[k + 1, ni, nj] = nd
                move[k + 1, ni, nj] = idx
                heapq.heappush(heap, (nd, (k + 1, ni, nj)))

    total = float(dist[target])
    if not math.isfinite(total):
        raise ValueError("landmarks not connectable")

    points: list[Point3] = []
    k, i, j = target
    while True:
        points.append((x0 + i, ys[k], z0 + j))
        if k == 0:
            break
        dx, dz = deltas[move[k, i, j]]
        k, i, j = k - 1, i - dx, j - dz
    points.reverse()
    return CenterlinePath(tuple(points), total_cost=total)


def tube_radius(index: int, n_points: int, params: NerveParams) -> float:
    """Search/tube radius at centerline point ``index`` of ``n_points``."""
    frac = index / (n_points - 1) if n_points > 1 else 0.0
    return params.r_eye + (params.r_chiasm - params.r_eye) * frac


def reconstruct_tube(
    centerline: CenterlinePath, refined: BinaryMask, params: NerveParams | None = None
) -> BinaryMask:
    """Grow the nerve back around the centerline with two radii.

    Voxels within r1 (voxel units) of any centerline point are always
    set; voxels within the interpolated outer radius are kept only where
    the refined prediction was positive; everything else stays unset.
    """
    params = params or NerveParams()
    sizes = refined.geometry.sizes
    bits = np.zeros(sizes, dtype=bool)
    n = len(centerline.points)
    r1_sq = params.r1**2
    for index, (px, py, pz) in enumerate(centerline.points):
        radius = tube_radius(index, n, params)
        reach = int(math.ceil(radius))
        window = tuple(
            slice(max(0, c - reach), min(size, c + reach + 1))
            for c, size in zip((px, py, pz), sizes)
        )
        gx, gy, gz = np.ogrid[window]
        d_sq = (gx - px) ** 2 + (gy - py) ** 2 + (gz - pz) ** 2
        inner = d_sq <= r1_sq
        outer = d_sq <= radius**2
        bits[window] |= inner | (outer & refined.bits[window])
    return BinaryMask(refined.geometry, bits)


def _open_1d(bits: np.ndarray, axis: int) -> np.ndarray:
    """Binary opening with a 2-voxel line element along one axis.

    Equivalent closed form: a voxel survives iff it has a set neighbor
    along the axis, which removes 1-voxel runs and keeps longer runs
    intact.
    """
    has_prev = np.zeros_like(bits)
    has_next = np.zeros_like(bits)
    src = [slice(None)] * bits.ndim
    dst = [slice(None)] * bits.ndim
    src[axis], dst[axis] = slice(1, None), slice(None, -1)
    has_next[tuple(dst)] = bits[tuple(src)]
    has_prev[tuple(src)] = bits[tuple(dst)]
    return bits & (has_prev | has_next)


def prune_morphology(mask: BinaryMask) -> BinaryMask:
    """1D openings along x, y, z, then the largest connected component."""
    bits = mask.bits
    for axis in range(3):
        bits = _open_1d(bits, axis)
    return largest_component(BinaryMask(mask.geometry, bits))


def segment_optic_nerve(
    fused_nerve: BinaryMask,
    eye: BinaryMask,
    chiasm_half: BinaryMask,
    intensities: Volume3D,
    params: NerveParams | None = None,
    landmarks: NerveLandmarks | None = None,
) -> BinaryMask:
    """Full nerve reconstruction for one side.

    Landmarks may be passed in when the caller already detected them (the
    postprocessing pipeline does, to decide whether the two sides must be
    merged); otherwise they are detected here.
    """
    params = params or NerveParams()
    require_same_geometry(fused_nerve, eye, chiasm_half, intensities)
    if landmarks is None:
        landmarks = detect_landmarks(fused_nerve, eye, chiasm_half, params.p)
    refined = refine_by_intensity(fused_nerve, intensities, landmarks.eye_end, params)
    centerline = shortest_centerline(refined, landmarks, params)
    tube = reconstruct_tube(centerline, refined, params)
    return prune_morphology(tube)
