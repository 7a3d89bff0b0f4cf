"""
Checking the hand-written backward passes
=========================================

Every primitive in ``renas.autograd`` records a closure on a tape. Here we
compare those gradients against central finite differences.
"""

import numpy as np

from renas.autograd import Tensor, conv2d, dw_separable_conv, finite_diff_check, mul, relu, tensor_sum

rng = np.random.default_rng(0)

# a random projection keeps the loss linear in the op output, so FD roundoff stays small
x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
proj = Tensor(rng.normal(size=(2, 4, 3, 3)))


def loss():
    return tensor_sum(mul(relu(conv2d(x, w, stride=2, pad=1)), proj))


# finite_diff_check runs the tape itself, then perturbs every entry by +-1e-5
print("conv2d  max rel err wrt w:", finite_diff_check(loss, w))
print("conv2d  max rel err wrt x:", finite_diff_check(loss, x))

# depthwise-separable: per-channel kxk conv, then 1x1 mixing
wd = Tensor(rng.normal(size=(3, 1, 5, 5)), requires_grad=True)
wp = Tensor(rng.normal(size=(4, 3, 1, 1)), requires_grad=True)
proj2 = Tensor(rng.normal(size=(2, 4, 6, 6)))


def loss2():
    return tensor_sum(mul(dw_separable_conv(x, wd, wp, pad=2), proj2))


print("dwsep5  max rel err wrt depthwise w:", finite_diff_check(loss2, wd))
print("dwsep5  max rel err wrt pointwise w:", finite_diff_check(loss2, wp))
