"""
Reverse-mode gradients on a tape
================================

The model is built on a small array engine.  Every operation run inside a
``Tape`` is recorded, and ``backward`` walks the record in reverse.
"""
import numpy as np

from stdemand import diffcore as dc
from stdemand.diffcore import DiffArray

# a leaf that wants gradients
x = DiffArray(np.array([1.0, 2.0, 3.0]), requires_grad=True)

with dc.Tape() as tape:
    loss = (x * x).sum()
    print("ops recorded:", len(tape))
    dc.backward(loss)
print("d/dx sum(x*x) =", x.grad)   # [2, 4, 6]

# softmax and layer norm are single fused nodes
print("softmax(ln [1,2,3]) =", dc.softmax_last_axis(DiffArray(np.log([1.0, 2.0, 3.0]))).data)
print("layer_norm([1,3])   =", dc.layer_norm(DiffArray([1.0, 3.0]), np.ones(2), np.zeros(2)).data)

# central differences confirm the analytic gradient of a small network
rng = np.random.default_rng(0)
w1 = DiffArray(rng.normal(size=(4, 8)), requires_grad=True)
w2 = DiffArray(rng.normal(size=(8, 1)), requires_grad=True)
inputs = rng.normal(size=(5, 4))


def loss_fn():
    hidden = dc.gelu(dc.matmul(DiffArray(inputs), w1))
    return dc.softmax_last_axis(dc.swap_last(hidden @ w2)).sum() + (hidden * hidden).mean()


print("max relative gradient error:", dc.grad_check(loss_fn, [w1, w2]))
