"""
Checking the engine's gradients
===============================

Every layer in the network is a handful of numpy operations with a
hand-written backward. Central differences confirm them, op by op and then
through the whole network on a 32×32 image.
"""

import numpy as np

from ccfnet import tensor as T
from ccfnet.gradcheck import finite_diff_check
from ccfnet.selfcheck import gradcheck_network, gradcheck_suite

rng = np.random.default_rng(0)

# A dilated convolution followed by max pooling, reduced to a scalar.
x = T.Tensor(rng.standard_normal((1, 2, 9, 9)), requires_grad=True)
w = T.Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
R = rng.standard_normal((1, 3, 5, 5))


def f():
    y = T.conv2d(x, w, None, stride=1, padding=2, dilation=2)
    return T.tsum(T.maxpool2d(y, 3, 2, 1) * R)


rep = finite_diff_check(f, [x, w])
print(f"conv+pool: {rep.n_checked} coordinates, max relative error {rep.max_rel_error:.1e}, kinks {rep.n_kinks}")

# The built-in suite covers each op and loss term.
for name, r in gradcheck_suite(seed=1, network=False).items():
    print(f"{name:<22} {r.max_rel_error:.1e}")

# Whole network, both batch-norm modes.
for mode in ("train", "eval"):
    r = gradcheck_network(seed=1, mode=mode)
    print(f"network[{mode}] {r.n_checked} coordinates, max relative error {r.max_rel_error:.1e}")
