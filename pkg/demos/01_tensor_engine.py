"""A tour of the tensor engine: taped forward math and reverse-mode grads.

Run: python3 demos/01_tensor_engine.py
"""

import numpy as np

from chronomodal import Tape, Tensor, backward, gradient_check
from chronomodal import autodiff as ad

rng = np.random.default_rng(0)

# --- forward math records onto a tape ---------------------------------------
x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
targets = Tensor((rng.random((4, 2)) < 0.5).astype(float))

with Tape() as tape:
    logits = ad.matmul(ad.gelu(x), w)
    loss = ad.bce_with_logits(logits, targets)
    backward(tape, loss)

print(f"loss = {loss.item():.4f}")
print(f"dloss/dw has shape {w.grad.shape}, norm {np.linalg.norm(w.grad):.4f}")

# --- every gradient is checked against central differences ------------------
err = gradient_check(lambda t: ad.bce_with_logits(ad.matmul(ad.gelu(t), w),
                                                  targets), x)
print(f"finite-difference agreement: max relative error {err:.2e}")

# --- masked softmax: masked entries are exactly zero -------------------------
scores = Tensor(rng.normal(size=(2, 5)))
mask = np.array([[True, True, True, False, False],
                 [True, False, True, True, True]])
attn = ad.softmax_last(scores, mask)
print("masked softmax rows:")
print(np.round(attn.data, 3))
print("row sums:", attn.data.sum(axis=1))
