# The autodiff core: tensors, a taped forward pass, reverse-mode
# gradients, and the finite-difference checker used all over the tests.

import numpy as np

from tsekit import autodiff as ad
from tsekit.autodiff import Tensor

# A tiny convolutional regression: y = conv(x, w), loss = mean((y - t)^2)
rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(1, 32)))
w = Tensor(rng.normal(size=(4, 1, 5)), requires_grad=True)
target = Tensor(rng.normal(size=(4, 28)))

y = ad.conv1d(x, w)
err = ad.sub(y, target)
loss = ad.mean(ad.mul(err, err))
print(f"forward: conv {x.shape} * {w.shape} -> {y.shape}, loss {loss.item():.4f}")

ad.backward(loss)
print(f"tape recorded {len(ad.tape())} ops; dL/dw has shape {w.grad.shape}, "
      f"|grad| max {np.abs(w.grad).max():.4f}")

# Independent check: analytic gradient vs central differences
ad.tape().clear()
w2 = Tensor(w.data.copy())


def f(t):
    e = ad.sub(ad.conv1d(x, t), target)
    return ad.mean(ad.mul(e, e))


print(f"finite-difference max relative error: {ad.check_gradient(f, w2):.2e}")

# The same machinery drives whole networks; `tsekit gradcheck` runs the
# full per-op and end-to-end suite.
