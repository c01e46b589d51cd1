"""
Reverse-mode gradients on a small tensor graph
==============================================

The model is built on a compact reverse-mode engine.  This script builds a
tiny expression, asks for its gradient and compares it with central finite
differences.
"""

import numpy as np

from evolvecast import autodiff as ad
from evolvecast.autodiff import Parameter, Tensor

rng = np.random.default_rng(0)

# A weight matrix and an input batch.  Only the Parameter tracks gradients.
W = Parameter(rng.normal(size=(3, 4)), "W")
x = Tensor(rng.normal(size=(5, 3)))


def objective():
    h = ad.sigmoid(ad.matmul(x, W))
    return ad.mean(ad.huber(h - Tensor(np.full((5, 4), 0.5)), 1.0))


loss = objective()
loss.backward()
print("loss", float(loss.data))

# Nudge one coordinate each way and compare slopes.
for idx in [(0, 0), (1, 2), (2, 3)]:
    numeric = ad.numerical_gradient(lambda: float(objective().data), W, idx)
    print(idx, "analytic %.8f  numeric %.8f" % (W.grad[idx], numeric))

# Einsum is differentiable too; here it contracts a batch of matrices.
A = Parameter(rng.normal(size=(2, 3, 3)), "A")
trace_sum = ad.sum_(ad.einsum("bij,bjk->bik", A, A))
trace_sum.backward()
print("einsum grad shape", A.grad.shape)
