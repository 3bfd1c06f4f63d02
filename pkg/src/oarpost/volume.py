"""Core 3D grid types, connected components and preprocessing operations.

Conventions used throughout the package: voxel indices are zero-based
``(x, y, z)`` with x running right-to-left, y anterior-to-posterior and
z inferior-to-superior. Arrays are indexed ``a[x, y, z]`` and physical
coordinates are ``index * spacing`` in millimeters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

Point3 = tuple[int, int, int]

CONNECTIVITY_3D = (6, 18, 26)
CONNECTIVITY_2D = (4, 8)


@dataclass(frozen=True)
class GridGeometry:
    """Voxel counts and physical spacing (mm per voxel) of a 3D grid."""

    sizes: tuple[int, int, int]
    spacing: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(n) for n in self.sizes))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.sizes) != 3 or len(self.spacing) != 3:
            raise ValueError("geometry must be three-dimensional")
        if any(n < 1 for n in self.sizes):
            raise ValueError("all sizes must be >= 1")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("all spacings must be > 0")

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.sizes
        return nx * ny * nz

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def contains(self, point) -> bool:
        return all(0 <= int(p) < n for p, n in zip(point, self.sizes))


def _check_array(geometry: GridGeometry, arr: np.ndarray, what: str) -> None:
    if arr.shape != geometry.sizes:
        raise ValueError(
            f"{what} shape {arr.shape} does not match geometry sizes {geometry.sizes}"
        )


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Dense scalar intensity grid with physical spacing."""

    geometry: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        _check_array(self.geometry, values, "volume")
        if not np.all(np.isfinite(values)):
            raise ValueError("volume values must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Single-class segmentation: one membership bit per voxel."""

    geometry: GridGeometry
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        _check_array(self.geometry, bits, "mask")
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @classmethod
    def empty(cls, geometry: GridGeometry) -> "BinaryMask":
        return cls(geometry, np.zeros(geometry.sizes, dtype=bool))

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    @property
    def is_empty(self) -> bool:
        return not self.bits.any()


@dataclass(frozen=True)
class BoundingBox3D:
    """Axis-aligned voxel-index box, inclusive on both ends."""

    min: Point3
    max: Point3

    def __post_init__(self):
        object.__setattr__(self, "min", tuple(int(v) for v in self.min))
        object.__setattr__(self, "max", tuple(int(v) for v in self.max))
        if any(lo > hi for lo, hi in zip(self.min, self.max)):
            raise ValueError("bounding box min must be <= max componentwise")

    @property
    def sizes(self) -> Point3:
        return tuple(hi - lo + 1 for lo, hi in zip(self.min, self.max))

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.sizes
        return nx * ny * nz


@dataclass(frozen=True, eq=False)
class ComponentLabeling:
    """Connected-component labels, 0 = background, component ids 1..K."""

    labels: np.ndarray
    component_sizes: dict[int, int]
    connectivity: int

    @property
    def count(self) -> int:
        return len(self.component_sizes)


def require_same_geometry(*objs) -> GridGeometry:
    """Raise unless all arguments share one GridGeometry; return it."""
    geometry = objs[0].geometry
    for other in objs[1:]:
        if other.geometry != geometry:
            raise ValueError(
                f"geometry mismatch: {other.geometry} vs {geometry}"
            )
    return geometry


def bounding_box(mask: BinaryMask) -> Optional[BoundingBox3D]:
    """Tightest box containing all set voxels, or None for an empty mask."""
    coords = np.argwhere(mask.bits)
    if coords.size == 0:
        return None
    return BoundingBox3D(tuple(coords.min(axis=0)), tuple(coords.max(axis=0)))


def _structure(ndim: int, connectivity: int) -> np.ndarray:
    table = {2: {4: 1, 8: 2}, 3: {6: 1, 18: 2, 26: 3}}[ndim]
    if connectivity not in table:
        raise ValueError(f"invalid {ndim}D connectivity {connectivity}")
    return ndimage.generate_binary_structure(ndim, table[connectivity])


def _label(arr: np.ndarray, connectivity: int) -> ComponentLabeling:
    labels, count = ndimage.label(arr, structure=_structure(arr.ndim, connectivity))
    sizes = np.bincount(labels.ravel(), minlength=count + 1)
    return ComponentLabeling(
        labels=labels,
        component_sizes={i: int(sizes[i]) for i in range(1, count + 1)},
        connectivity=connectivity,
    )


def connected_components_3d(mask: BinaryMask, connectivity: int = 26) -> ComponentLabeling:
    """Label 26-, 18- or 6-connected foreground components of a 3D mask."""
    return _label(mask.bits, connectivity)


def connected_components_2d(plane: np.ndarray, connectivity: int = 4) -> ComponentLabeling:
    """Label 4- or 8-connected components of a 2D bit plane."""
    plane = np.asarray(plane, dtype=bool)
    if plane.ndim != 2:
        raise ValueError("plane must be two-dimensional")
    return _label(plane, connectivity)


def largest_component(mask: BinaryMask, connectivity: int = 26) -> BinaryMask:
    """Keep only the maximum-size connected component; empty stays empty.

    Size ties break toward the component whose minimal (z, y, x) voxel is
    lexicographically smallest, so the result is deterministic.
    """
    labeling = connected_components_3d(mask, connectivity)
    if not labeling.component_sizes:
        return mask
    best_size = max(labeling.component_sizes.values())
    candidates = [i for i, n in labeling.component_sizes.items() if n == best_size]
    if len(candidates) == 1:
        chosen = candidates[0]
    else:
        def seed_key(component_id: int):
            coords = np.argwhere(labeling.labels == component_id)
            return min(map(tuple, coords[:, ::-1]))  # (z, y, x) triples

        chosen = min(candidates, key=seed_key)
    return BinaryMask(mask.geometry, labeling.labels == chosen)


def barycenter(mask: BinaryMask) -> tuple[float, float, float]:
    """Arithmetic mean of the set-voxel index triples."""
    coords = np.argwhere(mask.bits)
    if coords.size == 0:
        raise ValueError("empty mask")
    return tuple(float(c) for c in coords.mean(axis=0))


def physical_volume(mask: BinaryMask) -> float:
    """Physical volume of the set voxels in mm^3."""
    return mask.count * mask.geometry.voxel_volume_mm3


def _interp_linear_axis(arr: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    lo = np.clip(np.floor(coords).astype(np.intp), 0, n - 1)
    hi = np.minimum(lo + 1, n - 1)
    frac = np.clip(coords - lo, 0.0, 1.0)
    shape = [1, 1, 1]
    shape[axis] = coords.size
    frac = frac.reshape(shape)
    return np.take(arr, lo, axis=axis) * (1.0 - frac) + np.take(arr, hi, axis=axis) * frac


def _interp_nearest_axis(arr: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    idx = np.clip(np.rint(coords).astype(np.intp), 0, n - 1)
    return np.take(arr, idx, axis=axis)


def resample(volume, target_spacing, mode: str = "trilinear"):
    """Resample onto a new spacing covering the same physical extent.

    Output sizes are round(size * spacing / target_spacing), at least 1.
    Sample points are node-centered (voxel i sits at physical i*spacing)
    and interpolation clamps at the grid borders. ``mode`` is "trilinear"
    for intensity volumes and "nearest" for masks; a BinaryMask input
    requires "nearest" and yields a BinaryMask.
    """
    target_spacing = tuple(float(t) for t in target_spacing)
    if any(t <= 0 for t in target_spacing):
        raise ValueError("target spacing must be > 0")
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown resample mode {mode!r}")

    is_mask = isinstance(volume, BinaryMask)
    if is_mask and mode != "nearest":
        raise ValueError("masks must be resampled with nearest mode")

    geometry = volume.geometry
    new_sizes = tuple(
        max(1, int(math.floor(n * s / t + 0.5)))
        for n, s, t in zip(geometry.sizes, geometry.spacing, target_spacing)
    )
    arr = volume.bits.astype(np.float64) if is_mask else volume.values
    interp = _interp_linear_axis if mode == "trilinear" else _interp_nearest_axis
    for axis in range(3):
        scale = target_spacing[axis] / geometry.spacing[axis]
        coords = np.arange(new_sizes[axis], dtype=np.float64) * scale
        arr = interp(arr, coords, axis)

    new_geometry = GridGeometry(new_sizes, target_spacing)
    if is_mask:
        return BinaryMask(new_geometry, arr > 0.5)
    return Volume3D(new_geometry, arr)


def crop_or_pad(volume: Volume3D, target_sizes, fill: float = 0.0) -> Volume3D:
    """Crop or pad to the target sizes, keeping the superior end of z.

    x and y are centered; z is anchored at the top (high index, superior)
    so padding appends fill slices at the inferior end and cropping drops
    inferior slices. Out-of-range voxels take the fill value.
    """
    target_sizes = tuple(int(n) for n in target_sizes)
    geometry = volume.geometry
    out = np.full(target_sizes, float(fill), dtype=np.float64)

    # offset maps output index j to input index j + offset per axis
    offsets = [
        (geometry.sizes[0] - target_sizes[0]) // 2,
        (geometry.sizes[1] - target_sizes[1]) // 2,
        geometry.sizes[2] - target_sizes[2],
    ]
    src = []
    dst = []
    for axis, off in enumerate(offsets):
        lo = max(0, -off)
        hi = min(target_sizes[axis], geometry.sizes[axis] - off)
        if hi <= lo:
            return Volume3D(GridGeometry(target_sizes, geometry.spacing), out)
        dst.append(slice(lo, hi))
        src.append(slice(lo + off, hi + off))
    out[tuple(dst)] = volume.values[tuple(src)]
    return Volume3D(GridGeometry(target_sizes, geometry.spacing), out)


def normalize_intensity(
    volume: Volume3D, constant: float = 100.0, percentile: float | None = None
) -> Volume3D:
    """Divide by the volume maximum and multiply by a fixed constant.

    ``percentile`` switches the reference from the exact maximum to the
    given intensity percentile (robust variant, off by default).
    """
    if percentile is None:
        reference = float(volume.values.max())
    else:
        reference = float(np.percentile(volume.values, percentile))
    if reference <= 0:
        raise ValueError("degenerate intensity range")
    return Volume3D(volume.geometry, volume.values / reference * float(constant))
