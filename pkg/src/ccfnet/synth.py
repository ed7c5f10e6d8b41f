"""Deterministic synthetic sagittal spine images with 11 annotated objects.

Vertebral bodies are soft rounded rectangles and discs soft ellipses laid
out along a seeded sinusoidal curve. A diseased vertebra is darker and
speckled with bony spurs at its anterior corners; a diseased disc is
thinner and darker and bulges toward the canal. Every sample is a pure
function of ``(global_seed, index)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.special import expit

from .codec import NUM_OBJECTS, SpineAnnotation


class SynthConfigError(ValueError):
    pass


class AugmentError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 128
    spacing_mm: float = 0.5
    disease_rate: float = 0.3
    curve_amplitude: tuple = (3.0, 10.0)  # pixels at 128 px, scaled with image_size
    vertebra_width: tuple = (20.0, 26.0)
    disc_width: tuple = (17.0, 22.0)
    noise_sigma: float = 0.03
    spur_length: float = 6.0  # 0 disables the vertebral spurs
    bulge_length: float = 7.0  # 0 disables the disc bulge
    global_seed: int = 0
    grid_stride: int = 16

    def validate(self) -> None:
        if self.image_size % self.grid_stride:
            raise SynthConfigError(f"image_size {self.image_size} not divisible by stride {self.grid_stride}")
        if self.image_size < 64:
            raise SynthConfigError(f"image_size {self.image_size} too small to fit 11 objects")
        if not 0.0 <= self.disease_rate <= 1.0:
            raise SynthConfigError("disease_rate must lie in [0, 1]")
        if self.spacing_mm <= 0:
            raise SynthConfigError("spacing_mm must be positive")


@dataclass
class Sample:
    image: np.ndarray  # [1, H, W] float32 in [0, 1]
    annotation: SpineAnnotation
    sample_id: int


def _soft(inside: np.ndarray, sharpness: float = 6.0) -> np.ndarray:
    """Map a signed "1 − radius" field to a soft [0, 1] mask."""
    return expit(sharpness * inside)


def generate_sample(cfg: SynthConfig, index: int) -> Sample:
    if index < 0:
        raise ValueError("sample index must be >= 0")
    cfg.validate()
    rng = np.random.default_rng([cfg.global_seed, index])
    n = cfg.image_size
    scale = n / 128.0

    top = rng.uniform(0.11, 0.16) * n
    bottom = rng.uniform(0.84, 0.89) * n
    pitch = (bottom - top) / (NUM_OBJECTS - 1)
    ys = top + pitch * np.arange(NUM_OBJECTS) + rng.uniform(-0.06, 0.06, NUM_OBJECTS) * pitch
    amp = rng.uniform(*cfg.curve_amplitude) * scale
    freq = rng.uniform(0.3, 0.8)
    phase = rng.uniform(0, 2 * math.pi)
    cx = n / 2 + rng.uniform(-0.06, 0.06) * n

    def curve(y):
        u = (y - top) / (bottom - top)
        return cx + amp * np.sin(2 * math.pi * freq * u + phase)

    def slope(y):
        u = (y - top) / (bottom - top)
        return amp * 2 * math.pi * freq / (bottom - top) * np.cos(2 * math.pi * freq * u + phase)

    xs = curve(ys)
    diseased = rng.random(NUM_OBJECTS) < cfg.disease_rate

    Y, X = np.mgrid[0:n, 0:n].astype(np.float64)
    img = 0.06 + 0.08 * (Y / n) + 0.04 * rng.random() * (X / n)

    # spinal canal: faint stripe behind the bodies
    canal_x = curve(Y) + 16 * scale
    img = img + 0.12 * _soft(1.0 - np.abs(X - canal_x) / (3.0 * scale), 4.0)

    def local(x0, y0):
        th = math.atan(float(slope(y0)))
        u = (X - x0) * math.cos(th) - (Y - y0) * math.sin(th)
        v = (X - x0) * math.sin(th) + (Y - y0) * math.cos(th)
        return u, v

    body_layer = np.zeros_like(img)
    # unlabeled T12 and S1 bodies give the end objects context
    ends = [(ys[0] - pitch, False), (ys[-1] + pitch, False)]
    bodies = [(ys[k], diseased[k], k) for k in range(1, NUM_OBJECTS, 2)]
    for y0, sick, k in [(y, s, None) for y, s in ends] + bodies:
        x0 = float(curve(y0)) if k is None else xs[k]
        a = rng.uniform(*cfg.vertebra_width) * scale / 2
        b = 0.62 * pitch / 2 * rng.uniform(0.95, 1.1)
        u, v = local(x0, y0)
        r = (np.abs(u / a) ** 4 + np.abs(v / b) ** 4) ** 0.25
        mask = _soft(1.0 - r, 8.0)
        level = rng.uniform(0.68, 0.8)
        if sick:
            level = rng.uniform(0.38, 0.5)
            speckle = np.maximum(1.0 + 0.35 * rng.standard_normal(img.shape), 0.0)
            body_layer = np.maximum(body_layer, level * mask * speckle)
            if cfg.spur_length:
                # anterior osteophytes: bright spurs off both anterior corners
                L = cfg.spur_length * scale
                for sv in (-1.0, 1.0):
                    du, dv = u + a + 0.3 * L, v - sv * b * 0.9
                    rr = np.sqrt((du / (0.7 * L)) ** 2 + (dv / (0.22 * L)) ** 2)
                    body_layer = np.maximum(body_layer, 0.9 * _soft(1.0 - rr, 5.0))
        else:
            body_layer = np.maximum(body_layer, level * mask)

    disc_layer = np.zeros_like(img)
    for k in range(0, NUM_OBJECTS, 2):
        a = rng.uniform(*cfg.disc_width) * scale / 2
        b = 0.3 * pitch / 2 * rng.uniform(0.9, 1.1)
        level = rng.uniform(0.82, 0.95)
        if diseased[k]:
            b *= 0.55
            level = rng.uniform(0.35, 0.45)
        u, v = local(xs[k], ys[k])
        r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        disc_layer = np.maximum(disc_layer, level * _soft(1.0 - r, 5.0))
        if diseased[k] and cfg.bulge_length:
            # posterior herniation toward the canal
            L = cfg.bulge_length * scale
            rr = np.sqrt(((u - a) / L) ** 2 + (v / (0.45 * L)) ** 2)
            disc_layer = np.maximum(disc_layer, 0.95 * _soft(1.0 - rr, 5.0))

    img = np.maximum(img, np.maximum(body_layer, disc_layer))
    img = img + cfg.noise_sigma * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    xy = np.stack([xs, ys], axis=1)
    if xy.min() < 0 or xy.max() > n - 1:
        raise SynthConfigError("spine does not fit in the image; reduce curve_amplitude")
    ann = SpineAnnotation.from_arrays(xy, diseased, cfg.spacing_mm)
    return Sample(img[None], ann, index)


def generate_dataset(cfg: SynthConfig, n: int, start: int = 0) -> list[Sample]:
    return [generate_sample(cfg, i) for i in range(start, start + n)]


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    rotation_deg: float = 15.0
    translation_frac: float = 0.1
    crop_scale: tuple = (0.85, 1.0)
    flip_prob: float = 0.5
    noise_sigma: float = 0.02
    output_size: Optional[int] = None
    max_retries: int = 20

    def validate(self) -> None:
        if not 0 <= self.rotation_deg <= 15:
            raise SynthConfigError("rotation bound must lie in [0, 15] degrees to keep object order")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise SynthConfigError("crop scale range must satisfy 0 < lo <= hi <= 1")
        if not 0 <= self.flip_prob <= 1:
            raise SynthConfigError("flip_prob must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(0.0, 0.0, (1.0, 1.0), 0.0, 0.0)


def affine_matrix(w, h, angle_deg, shift, scale, flip, out_w=None, out_h=None) -> np.ndarray:
    """3×3 map from input pixel (x, y) to output pixel (x, y).

    Rotation and zoom act about the image center; a crop of relative size
    ``scale`` is resized to the full frame, so content grows by ``1/scale``.
    """
    out_w = out_w or w
    out_h = out_h or h
    c = np.array([(w - 1) / 2, (h - 1) / 2])
    th = math.radians(angle_deg)
    R = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]]) / scale
    A = np.eye(3)
    A[:2, :2] = R
    A[:2, 2] = c - R @ c + np.asarray(shift, dtype=float)
    if flip:
        A = np.array([[-1.0, 0, w - 1], [0, 1, 0], [0, 0, 1]]) @ A
    rx, ry = out_w / w, out_h / h
    resize = np.array([[rx, 0, 0.5 * rx - 0.5], [0, ry, 0.5 * ry - 0.5], [0, 0, 1]])
    return resize @ A


def warp_image(image: np.ndarray, A: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of a [1, H, W] image under the (x, y) affine ``A``."""
    inv = np.linalg.inv(A)
    # ndimage works in (row, col) = (y, x)
    m = np.array([[inv[1, 1], inv[1, 0]], [inv[0, 1], inv[0, 0]]])
    off = np.array([inv[1, 2], inv[0, 2]])
    out = ndimage.affine_transform(image[0].astype(np.float64), m, off, (out_h, out_w), order=1, mode="constant")
    return out[None].astype(image.dtype)


def augment(sample: Sample, policy: AugmentPolicy, rng: np.random.Generator) -> Sample:
    """Random rotation, translation, crop, flip, resize, then additive noise."""
    policy.validate()
    _, h, w = sample.image.shape
    out = policy.output_size or w
    xy = sample.annotation.xy
    for _ in range(policy.max_retries):
        angle = rng.uniform(-policy.rotation_deg, policy.rotation_deg)
        shift = rng.uniform(-policy.translation_frac, policy.translation_frac, 2) * np.array([w, h])
        scale = rng.uniform(*policy.crop_scale)
        flip = rng.random() < policy.flip_prob
        A = affine_matrix(w, h, angle, shift, scale, flip, out, out)
        new_xy = xy @ A[:2, :2].T + A[:2, 2]
        if new_xy.min() >= 0 and new_xy.max() <= out - 1:
            break
    else:
        raise AugmentError(f"no valid augmentation for sample {sample.sample_id} after {policy.max_retries} draws")
    img = warp_image(sample.image, A, out, out)
    if policy.noise_sigma > 0:
        img = np.clip(img + rng.normal(0, policy.noise_sigma, img.shape), 0.0, 1.0).astype(img.dtype)
    ann = SpineAnnotation.from_arrays(new_xy, sample.annotation.labels, sample.annotation.spacing_mm * w / out)
    return replace(sample, image=img, annotation=ann)


# ---------------------------------------------------------------------------
# Cross-validation splits
# ---------------------------------------------------------------------------


def kfold_split(n: int, folds: int, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded k-fold partition; the first ``n % folds`` folds get one extra item."""
    if folds < 2 or n < folds:
        raise ValueError(f"need folds >= 2 and n >= folds, got n={n}, folds={folds}")
    perm = np.random.default_rng(seed).permutation(n)
    base, extra = divmod(n, folds)
    out, start = [], 0
    for f in range(folds):
        size = base + (1 if f < extra else 0)
        val = np.sort(perm[start : start + size])
        train = np.sort(np.concatenate([perm[:start], perm[start + size :]]))
        out.append((train, val))
        start += size
    return out
