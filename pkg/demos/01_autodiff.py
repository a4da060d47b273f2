"""
Reverse-mode gradients on a tape
================================

A two-layer network written with the library's tensor ops, differentiated
once by the tape and once by central differences.
"""

import numpy as np

from flowsteer import autodiff as ad
from flowsteer.autodiff import Tensor

rng = np.random.default_rng(0)

# float64 makes the finite-difference comparison meaningful
with ad.precision(np.float64):
    x = Tensor(rng.normal(size=(5, 3)))
    w1 = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    b1 = Tensor(np.zeros(8), requires_grad=True)
    w2 = Tensor(rng.normal(size=(8, 1)), requires_grad=True)
    y = rng.normal(size=(5, 1))

    def loss_of(w1_arr):
        h = ad.tanh(ad.dense(x, Tensor(w1_arr), b1))
        return ad.mean(ad.square(ad.matmul(h, w2) - Tensor(y)))

    with ad.Tape() as tape:
        h = ad.tanh(ad.dense(x, w1, b1))
        loss = ad.mean(ad.square(ad.matmul(h, w2) - Tensor(y)))
    grads = ad.backward(tape, loss, [w1, b1, w2])
    print("loss", loss.item())

    # central differences on every entry of w1
    fd = np.zeros_like(w1.data)
    eps = 1e-6
    for idx in np.ndindex(*w1.shape):
        up, down = w1.data.copy(), w1.data.copy()
        up[idx] += eps
        down[idx] -= eps
        fd[idx] = (loss_of(up).item() - loss_of(down).item()) / (2 * eps)

print("max |tape - finite differences|:", np.abs(grads[w1].data - fd).max())

# non-finite values are reported rather than propagated
try:
    ad.log(Tensor([-1.0]))
except ad.NumericError as err:
    print("caught:", err)
