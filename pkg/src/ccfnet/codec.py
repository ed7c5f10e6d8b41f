"""Target-map encoding and prediction decoding for the 11 lumbar objects.

Maps are stored as ``[object k][row j][column i]``: column index ``i`` pairs
with the x coordinate and row index ``j`` with y. A grid index ``z`` is
anchored at pixel ``t(z) = (z - align) * stride``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

VERTEBRAE = ("L1", "L2", "L3", "L4", "L5")
DISCS = ("T12-L1", "L1-L2", "L2-L3", "L3-L4", "L4-L5", "L5-S1")
# Top to bottom along the spine.
OBJECT_IDS = (
    "T12-L1", "L1", "L1-L2", "L2", "L2-L3", "L3",
    "L3-L4", "L4", "L4-L5", "L5", "L5-S1",
)  # fmt: skip
NUM_OBJECTS = len(OBJECT_IDS)
DISC_INDEX = np.array([i for i, o in enumerate(OBJECT_IDS) if o in DISCS])
VERTEBRA_INDEX = np.array([i for i, o in enumerate(OBJECT_IDS) if o in VERTEBRAE])


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    image_h: int = 128
    image_w: int = 128
    stride: int = 16
    align: float = 0.5
    sigma: float | None = None  # defaults to the stride
    tau: float = 0.6

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.map_h < 1 or self.map_w < 1:
            raise ValueError(f"image {self.image_h}x{self.image_w} smaller than stride {self.stride}")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.gaussian_sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def map_h(self) -> int:
        return self.image_h // self.stride

    @property
    def map_w(self) -> int:
        return self.image_w // self.stride

    @property
    def gaussian_sigma(self) -> float:
        return float(self.stride if self.sigma is None else self.sigma)


@dataclass(frozen=True)
class ObjectAnnotation:
    id: str
    x: float
    y: float
    diseased: bool


@dataclass(frozen=True)
class SpineAnnotation:
    objects: tuple
    spacing_mm: float = 0.5

    def __post_init__(self):
        ids = tuple(o.id for o in self.objects)
        if ids != OBJECT_IDS:
            raise AnnotationError(f"expected objects {OBJECT_IDS}, got {ids}")

    @classmethod
    def from_arrays(cls, xy, diseased, spacing_mm: float = 0.5) -> "SpineAnnotation":
        xy = np.asarray(xy, dtype=float)
        objs = tuple(
            ObjectAnnotation(oid, float(xy[k, 0]), float(xy[k, 1]), bool(diseased[k]))
            for k, oid in enumerate(OBJECT_IDS)
        )
        return cls(objs, spacing_mm)

    @property
    def xy(self) -> np.ndarray:
        return np.array([[o.x, o.y] for o in self.objects])

    @property
    def labels(self) -> np.ndarray:
        return np.array([o.diseased for o in self.objects], dtype=bool)


@dataclass
class TargetMaps:
    heatmap: np.ndarray  # [K, H', W'] in (0, 1]
    fine_x: np.ndarray
    fine_y: np.ndarray
    category: np.ndarray  # [K, H', W'] in {0, 1}
    omega: np.ndarray  # bool


@dataclass(frozen=True)
class Detection:
    id: str
    x: float
    y: float
    prob: float


def to_highres(z, grid: GridSpec):
    return (np.asarray(z, dtype=float) - grid.align) * grid.stride


def nearest_grid(x: float, extent: int, grid: GridSpec) -> int:
    """Grid index whose anchor is closest to pixel coordinate ``x`` (ties go low)."""
    d = np.abs(to_highres(np.arange(extent), grid) - x)
    return int(np.argmin(d))


def encode_targets_batch(xy: np.ndarray, diseased: np.ndarray, grid: GridSpec, dtype=np.float64) -> TargetMaps:
    """Vectorized encoder over a leading object (or batch×object) axis.

    ``xy`` is ``[..., 2]`` and ``diseased`` ``[...]``; outputs are
    ``[..., H', W']``.
    """
    xy = np.asarray(xy, dtype=np.float64)
    tx = to_highres(np.arange(grid.map_w), grid)  # anchors along columns i
    ty = to_highres(np.arange(grid.map_h), grid)  # anchors along rows j
    dx = tx - xy[..., 0, None]  # [..., W']
    dy = ty - xy[..., 1, None]  # [..., H']
    s2 = 2.0 * grid.gaussian_sigma**2
    heat = np.exp(-(dy[..., :, None] ** 2 + dx[..., None, :] ** 2) / s2)
    shape = heat.shape
    fine_x = np.broadcast_to(dx[..., None, :] / grid.stride, shape)
    fine_y = np.broadcast_to(dy[..., :, None] / grid.stride, shape)
    cat = np.broadcast_to(np.asarray(diseased, dtype=np.float64)[..., None, None], shape)
    omega = heat >= grid.tau
    flat = heat.reshape(*shape[:-2], -1)
    arg = flat.argmax(axis=-1)
    om = omega.reshape(flat.shape)
    np.put_along_axis(om, arg[..., None], True, axis=-1)
    return TargetMaps(
        heat.astype(dtype),
        fine_x.astype(dtype),
        fine_y.astype(dtype),
        cat.astype(dtype),
        om.reshape(shape),
    )


def encode_targets(ann: SpineAnnotation, grid: GridSpec, dtype=np.float64) -> TargetMaps:
    xy = ann.xy
    bad = (xy[:, 0] < 0) | (xy[:, 0] >= grid.image_w) | (xy[:, 1] < 0) | (xy[:, 1] >= grid.image_h)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise AnnotationError(f"{OBJECT_IDS[k]} at {tuple(xy[k])} outside {grid.image_w}x{grid.image_h} image")
    return encode_targets_batch(xy, ann.labels, grid, dtype)


def decode_arrays(heat, fine_x, fine_y, category, grid: GridSpec):
    """Array form of :func:`decode_predictions`; works on ``[..., K, H', W']``.

    Returns ``(xy [..., K, 2], prob [..., K])``.
    """
    heat = np.asarray(heat)
    W = heat.shape[-1]
    flat = heat.reshape(*heat.shape[:-2], -1)
    arg = flat.argmax(axis=-1)[..., None]
    j, i = np.divmod(arg[..., 0], W)

    def pick(m):
        return np.take_along_axis(np.asarray(m).reshape(flat.shape), arg, axis=-1)[..., 0].astype(np.float64)

    x = to_highres(i, grid) - pick(fine_x) * grid.stride
    y = to_highres(j, grid) - pick(fine_y) * grid.stride
    return np.stack([x, y], axis=-1), pick(category)


def decode_predictions(heat, fine_x, fine_y, category, grid: GridSpec) -> list[Detection]:
    for m in (heat, fine_x, fine_y, category):
        if np.shape(m) != (NUM_OBJECTS, grid.map_h, grid.map_w):
            raise ValueError(f"expected maps of shape {(NUM_OBJECTS, grid.map_h, grid.map_w)}, got {np.shape(m)}")
    xy, prob = decode_arrays(heat, fine_x, fine_y, category, grid)
    return [Detection(oid, float(xy[k, 0]), float(xy[k, 1]), float(prob[k])) for k, oid in enumerate(OBJECT_IDS)]


def detections_to_arrays(dets: Sequence[Detection]):
    return np.array([[d.x, d.y] for d in dets]), np.array([d.prob for d in dets])
