"""How the interaction matrix W shapes a CFLoRA update.

Three sources of W are compared on the same A and B. With W = I the update
is plain LoRA. A block-diagonal W scales groups of rank-1 components, which
is how a mixture of LoRA experts looks from this angle. A projected W lets
every column of B talk to every row of A, and changes from sample to sample.

Run: python demos/cflora_lattice.py
"""

import numpy as np

from rellax.adapter import InteractionSource, cflora_delta_composite, make_interaction_matrix
from rellax.numerics import Mlp2

rng = np.random.default_rng(0)
r, d = 4, 6
A = rng.normal(size=(r, d))
B = rng.normal(size=(d, r))

lora = B @ A
identity = make_interaction_matrix(InteractionSource("identity", r))
print("identity W reproduces B @ A:", np.allclose(cflora_delta_composite(A, B, identity), lora))

alphas = np.array([0.25, 2.0])
block = make_interaction_matrix(InteractionSource("block_diagonal", r, n_blocks=2, alphas=alphas))
print("\nblock-diagonal W with two sets of rank 2:")
print(np.round(block, 3))
by_hand = 0.25 * B[:, :2] @ A[:2] + 2.0 * B[:, 2:] @ A[2:]
print("equals the weighted sum of the two sets:", np.allclose(cflora_delta_composite(A, B, block), by_hand))

# a projected W depends on the per-sample CRM representation h
proj = Mlp2.init(rng, 5, 8, r * r)
src = InteractionSource("projected", r, projector=proj)
for name in ("user a", "user b"):
    h = rng.normal(size=5)
    W = make_interaction_matrix(src, h)
    off = np.abs(W - np.diag(np.diag(W))).sum()
    print(f"\n{name}: off-diagonal mass of W {off:.3f}")
    print(np.round(W, 3))
