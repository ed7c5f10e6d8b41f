"""Built-in self-checks: the gradient-check suite and the codec round trip.

Both back the ``gradcheck`` and ``roundtrip`` CLI commands and the
acceptance tests. Gradient checks run in float64.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .codec import NUM_OBJECTS, GridSpec, decode_arrays, encode_targets_batch
from .gradcheck import GradCheckReport, finite_diff_check
from .loss import category_loss, coarse_loss, fine_loss
from .network import MSC, CCFNet, EncoderConfig, MSCConfig
from .tensor import BatchNormState, Tensor

TOLERANCE = 1e-3


def _param(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _conv_case(dilation: int, stride: int = 1):
    def build(rng):
        x, w, b = _param(rng, 2, 3, 7, 7), _param(rng, 4, 3, 3, 3), _param(rng, 4)
        n = T.conv_output_size(7, 3, stride, dilation, dilation)
        R = rng.standard_normal((2, 4, n, n))
        return (lambda: T.tsum(T.conv2d(x, w, b, stride, dilation, dilation) * R)), [x, w, b]

    return build


def _maxpool_case(rng):
    x = _param(rng, 2, 3, 8, 8)
    R = rng.standard_normal((2, 3, 4, 4))
    return (lambda: T.tsum(T.maxpool2d(x, 3, 2, 1) * R)), [x]


def _upsample_case(rng):
    x = _param(rng, 2, 3, 4, 4)
    R = rng.standard_normal((2, 3, 8, 8))
    return (lambda: T.tsum(T.upsample_nearest(x, 2) * R)), [x]


def _batchnorm_case(mode: str):
    def build(rng):
        x = _param(rng, 4, 3, 5, 5)
        st = BatchNormState.create(3, np.float64)
        st.gamma.data = 1.0 + 0.3 * rng.standard_normal(3)
        st.beta.data = 0.3 * rng.standard_normal(3)
        st.running_mean[...] = 0.2 * rng.standard_normal(3)
        st.running_var[...] = 1.0 + 0.5 * rng.random(3)
        R = rng.standard_normal((4, 3, 5, 5))
        return (lambda: T.tsum(T.batchnorm2d(x, st, mode) * R)), [x, st.gamma, st.beta]

    return build


def _msc_case(rng):
    cfg = MSCConfig(fuse_channels=8, bottleneck_reduction=2)
    block = MSC(np.random.default_rng(rng.integers(1 << 31)), 4, cfg).astype(np.float64)
    x = _param(rng, 2, 4, 4, 4)
    R = rng.standard_normal((2, 8, 4, 4))
    params = [p for _, p in block.named_parameters()]
    return (lambda: T.tsum(block(x, "train") * R)), [x] + params


def _coarse_loss_case(rng):
    p = _param(rng, 2, 3, 4, 4)
    target = rng.random((2, 3, 4, 4))
    return (lambda: coarse_loss(p, target)), [p]


def _fine_loss_case(rng):
    # Offsets spread over both smooth-L1 branches; |d| = 1 has probability zero.
    px, py = Tensor(2 * rng.standard_normal((2, 3, 4, 4)), requires_grad=True), _param(rng, 2, 3, 4, 4)
    tx, ty = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 4, 4))
    omega = rng.random((2, 3, 4, 4)) < 0.4
    omega[0, 0, 0, 0] = True

    def fn():
        lx, ly = fine_loss(px, tx, py, ty, omega)
        return lx + 2.0 * ly

    return fn, [px, py]


def _category_loss_case(rng):
    logits = _param(rng, 2, 3, 4, 4)
    target = (rng.random((2, 3, 4, 4)) < 0.3).astype(np.float64)
    omega = rng.random((2, 3, 4, 4)) < 0.4
    omega[0, 0, 0, 0] = True
    return (lambda: category_loss(T.sigmoid(logits), target, omega)), [logits]


def gradcheck_network(
    seed: int,
    mode: str = "train",
    use_msc: bool = True,
    coords_per_tensor: int = 3,
    input_coords: int = 24,
    n_tensors: Optional[int] = None,
) -> GradCheckReport:
    """Whole-network check on one 1×1×32×32 image.

    At 32×32 the stride-16 map is 2×2, so the MSC pool strides are reduced
    to (1, 2) to keep the map divisible. Checking every coordinate is too
    expensive: ``input_coords`` pixels and ``coords_per_tensor`` entries of
    each parameter are sampled, optionally from only ``n_tensors`` randomly
    chosen parameter tensors.
    """
    rng = np.random.default_rng([seed, 0x6E7])
    cfg = EncoderConfig(use_msc=use_msc, msc=MSCConfig(pool_strides=(1, 2)), plain_channels=32)
    net = CCFNet(cfg, seed=seed).astype(np.float64)
    x = Tensor(rng.standard_normal((1, 1, 32, 32)), requires_grad=True)
    R = rng.standard_normal((1, 4 * NUM_OBJECTS, 2, 2))
    params = [p for _, p in net.named_parameters()]
    if n_tensors is not None and n_tensors < len(params):
        params = [params[i] for i in np.sort(rng.choice(len(params), n_tensors, replace=False))]

    def fn():
        return T.tsum(net.forward(x, mode).raw * R)

    report = finite_diff_check(fn, [x], TOLERANCE, max_coords=input_coords, rng=rng)
    preport = finite_diff_check(fn, params, TOLERANCE, max_coords=coords_per_tensor, rng=rng)
    return GradCheckReport(
        max(report.max_rel_error, preport.max_rel_error),
        report.passed and preport.passed,
        report.n_checked + preport.n_checked,
        report.failures + preport.failures,
        report.n_kinks + preport.n_kinks,
    )


CASES: dict[str, Callable] = {
    "conv2d[dilation=1]": _conv_case(1),
    "conv2d[dilation=2]": _conv_case(2),
    "conv2d[dilation=3]": _conv_case(3),
    "conv2d[stride=2]": _conv_case(1, 2),
    "maxpool2d": _maxpool_case,
    "upsample_nearest": _upsample_case,
    "batchnorm2d[train]": _batchnorm_case("train"),
    "batchnorm2d[eval]": _batchnorm_case("eval"),
    "msc_block": _msc_case,
    "coarse_loss": _coarse_loss_case,
    "fine_loss": _fine_loss_case,
    "category_loss": _category_loss_case,
}


def gradcheck_op(name: str, seed: int, max_coords: Optional[int] = None) -> GradCheckReport:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    fn, inputs = CASES[name](rng)
    return finite_diff_check(fn, inputs, TOLERANCE, max_coords=max_coords, rng=rng)


def gradcheck_suite(seed: int = 0, network: bool = True, quick: bool = False) -> dict[str, GradCheckReport]:
    """One trial of every per-operation check plus, optionally, the whole network.

    ``quick`` samples coordinates instead of checking them all, for running
    many seeded trials.
    """
    op_coords = 32 if quick else None
    net_kw = dict(coords_per_tensor=1, input_coords=8, n_tensors=24) if quick else {}
    out = {name: gradcheck_op(name, seed, op_coords) for name in CASES}
    if network:
        out["network[train]"] = gradcheck_network(seed, "train", **net_kw)
        out["network[eval]"] = gradcheck_network(seed, "eval", **net_kw)
    return out


@dataclass
class RoundTripReport:
    n: int
    max_error_px: float
    categories_exact: bool
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error_px <= 1e-4 and self.categories_exact


def random_annotations(n: int, grid: GridSpec, rng: np.random.Generator):
    """``n`` random in-bounds coordinate sets ``[n, K, 2]`` with random disease flags."""
    xy = rng.uniform(0.0, 1.0, (n, NUM_OBJECTS, 2)) * [grid.image_w - 1, grid.image_h - 1]
    labels = rng.random((n, NUM_OBJECTS)) < 0.5
    return xy, labels


def roundtrip_check(n: int = 1000, seed: int = 0, grid: GridSpec = GridSpec()) -> RoundTripReport:
    rng = np.random.default_rng(seed)
    xy, labels = random_annotations(n, grid, rng)
    t0 = time.perf_counter()
    maps = encode_targets_batch(xy, labels, grid)
    dec_xy, prob = decode_arrays(maps.heatmap, maps.fine_x, maps.fine_y, maps.category, grid)
    elapsed = time.perf_counter() - t0
    err = float(np.abs(dec_xy - xy).max())
    return RoundTripReport(n, err, bool(np.array_equal(prob == 1.0, labels)), elapsed)
