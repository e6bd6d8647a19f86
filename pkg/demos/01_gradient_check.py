"""Check the autodiff engine against central finite differences on a small conv net."""

import numpy as np

from steerlab.autodiff import Conv2d, Linear, backward, finite_difference_oracle, relative_error
from steerlab.autodiff import functional as F

rng = np.random.default_rng(0)
conv = Conv2d(3, 4, rng).astype(np.float64)
head = Linear(4, 2, rng).astype(np.float64)
x = rng.standard_normal((2, 6, 6, 3))
target = rng.standard_normal((2, 2))


def loss():
    h = F.silu(F.group_norm(conv(x), 2)).mean(axis=(1, 2))
    return F.mse_loss(head(h), target)


backward(loss())
params = [p for _, p in conv.named_parameters()] + [p for _, p in head.named_parameters()]
analytic = [p.grad.copy() for p in params]


def f(arrays):
    for p, a in zip(params, arrays):
        p.data = a
    return float(loss().data)


originals = [p.data.copy() for p in params]
probes = [(i, j) for i in range(len(params)) for j in range(min(4, params[i].size))]
fd = finite_difference_oracle(f, originals, h=1e-5, probes=probes)
for p, a in zip(params, originals):
    p.data = a
worst = max(relative_error(analytic[i].ravel()[j], fd[i].ravel()[j]) for i, j in probes)
print(f"{len(probes)} probed coordinates, worst relative error {worst:.2e}")
