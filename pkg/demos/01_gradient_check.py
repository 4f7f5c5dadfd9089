"""Backpropagation against central finite differences on a tiny MLP.

Run: python3 demos/01_gradient_check.py
"""

import numpy as np

from fedlex.nn import Batch, MlpModel, backward, finite_diff_grad, forward_loss

rng = np.random.default_rng(0)

# a 2-4-3 network and a batch of five random points
model = MlpModel.create((2, 4, 3), seed=0)
batch = Batch(rng.standard_normal((5, 2)), rng.integers(0, 3, size=5))

loss, cache = forward_loss(model, batch)
analytic = backward(model, cache)
numeric = finite_diff_grad(model, batch, epsilon=1e-5)
print(f"loss {loss:.6f} over {len(model.params)} parameters")

# compare tensor by tensor
for (name, a), (_, n) in zip(analytic.tensors().items(), numeric.tensors().items()):
    rel = np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))
    print(f"{name:>3} {str(a.shape):>7}  max relative error {rel.max():.2e}")

# with all weights at zero every class is equally likely, so the loss is ln(classes)
zero = model.with_params(model.params.with_values(np.zeros(len(model.params))))
print(f"zero weights: loss {forward_loss(zero, batch)[0]:.6f}, ln 3 = {np.log(3):.6f}")
