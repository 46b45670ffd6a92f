"""
The tape-based tensor engine
============================

Every model in ``sessrec`` runs on a few dozen lines of reverse-mode
autodiff over numpy arrays.  This script walks through it by hand.
"""

import numpy as np

from sessrec.tensor import Tape, Tensor, cosine_rows, grad_check, matmul, softmax

# a tensor is a float64 array plus an optional gradient slot
x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
w = Tensor([[0.5], [-1.0]], requires_grad=True)
print(x)
print(x.data)

# ops are only recorded while a tape is active
with Tape() as tape:
    y = matmul(x, w)  # 2x1
    loss = (y * y).sum()
    tape.backward(loss)

print("loss", loss.item())
print("dloss/dw", w.grad.ravel())  # 2 * x^T y
print("check   ", (2 * x.data.T @ y.data).ravel())

# outside a tape nothing is recorded, so evaluation costs no memory
p = softmax(Tensor([[1.0, 2.0, 3.0]]), axis=1)
print("softmax", p.data.round(4), "sums to", p.data.sum())

# cosine scores between every row pair, clipped to [-1, 1]
a = Tensor(np.eye(2))
b = Tensor([[1.0, 1.0], [0.0, -2.0]])
print(cosine_rows(a, b).data.round(4))

# central differences confirm the tape's gradient
rng = np.random.default_rng(0)
target = rng.normal(size=(3, 4))
err = grad_check(lambda t: cosine_rows(t, Tensor(target)).sum(), rng.normal(size=(2, 4)))
print(f"max relative gradient error {err:.1e}")
