"""How chart-time offsets become positional signals.

Offsets (hours before the anchor study) are min-max normalized, then
either added to tokens (sine-cosine / learnable table) or rotated into
the attention queries and keys (rotary). Rotary inner products depend
only on the *difference* of two positions, which is what makes
normalized offsets meaningful as relative times.

Run: python3 demos/02_time_positions.py
"""

import numpy as np

from chronomodal import Tensor, normalize_offsets, rope_apply, sincos_table

# three historical reports: 10 days, 2 days, and 6 hours before the scan
offsets_hours = [240.0, 48.0, 6.0, 0.0]
normed = normalize_offsets(offsets_hours)
print("offsets (h):", offsets_hours)
print("normalized :", [round(v, 3) for v in normed])

# rotary encoding preserves vector norms ...
rng = np.random.default_rng(1)
q = rng.normal(size=(1, 8))
rotated = rope_apply(Tensor(q), [0.7], scale=49.0).data
print(f"\nnorm before/after rotation: {np.linalg.norm(q):.6f} "
      f"/ {np.linalg.norm(rotated):.6f}")

# ... and shifts both positions by the same amount without changing
# their interaction
k = rng.normal(size=(1, 8))
def score(p_q, p_k):
    return float(rope_apply(Tensor(q), [p_q], scale=49.0).data
                 @ rope_apply(Tensor(k), [p_k], scale=49.0).data.T)

print(f"score(0.2, 0.9)         = {score(0.2, 0.9):.10f}")
print(f"score(0.2+d, 0.9+d)     = {score(0.45, 1.15):.10f}   (d = 0.25)")

# the additive table, for comparison
table = sincos_table(normed, d=8, scale=49.0)
print("\nsine-cosine rows (one per report):")
print(np.round(table.data, 3))
