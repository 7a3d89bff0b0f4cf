"""
Two-path sampling and the alpha gradient
========================================

Each alpha step draws two distinct ops for a node from softmax(alpha). Only
those two alphas receive a gradient, computed from the two-way softmax over the
pair. The estimator sums to zero across the pair by construction.
"""

import numpy as np

from renas.search import TwoPathSample, alpha_grad, sample_two_paths

# the hand case: p = (0.6, 0.4) and the loss only sees the first path
s = TwoPathSample(op_m=0, op_n=1, p_m=0.6, p_n=0.4)
print("hand case:", alpha_grad(s, (1.0, 0.0)))

# pair frequencies for a 3-op node match p_m * p_n / (1 - p_m)
rng = np.random.default_rng(0)
alpha = np.log([1.0, 2.0, 3.0])
p = np.exp(alpha) / np.exp(alpha).sum()
counts = np.zeros((3, 3))
for _ in range(20000):
    d = sample_two_paths(alpha, rng)
    counts[d.op_m, d.op_n] += 1
expected = np.array([[p[m] * p[n] / (1 - p[m]) if m != n else 0.0 for n in range(3)] for m in range(3)])
print("empirical pair frequencies:\n", np.round(counts / counts.sum(), 3))
print("expected:\n", np.round(expected, 3))
