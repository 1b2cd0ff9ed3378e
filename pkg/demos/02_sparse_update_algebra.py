"""
Composable sparse updates
=========================

Update matrices are sparse parameter differences taken against one base.
They add coordinate-wise, negate, and apply or revert exactly.
"""

import numpy as np

from cmlab.model import ModelConfig, build_model
from cmlab.sparse import SparseUpdate, apply_sparse_update, compose_sparse_updates, revert_sparse_update

model = build_model(ModelConfig(vocab_size=40, n_tags=4, n_classes=2, n_layers=1, d_model=16, n_heads=2,
                                d_ffn=32, b_dim=4), seed=0)
store = model.store
fp = store.fingerprint()
print("base fingerprint", fp[:16])

w = "layer0.ffn.in.w"
u1 = SparseUpdate.from_entries(fp, {(w, 3): 0.5})
u2 = SparseUpdate.from_entries(fp, {(w, 3): -0.2, (w, 7): 0.1})
print("u1 + u2 =", (u1 + u2).entries())
print("u1 + (-u1) has", len(u1 + (-u1)), "entries")

# apply then revert restores every bit
handle = apply_sparse_update(store, u1 + u2)
print("after apply  ", store.fingerprint()[:16])
revert_sparse_update(store, handle)
print("after revert ", store.fingerprint()[:16], store.fingerprint() == fp)

# composition does not depend on order
rng = np.random.default_rng(0)
ups = [SparseUpdate.from_entries(fp, {(w, int(rng.integers(0, 64))): float(rng.normal())}) for _ in range(10)]
print("order independent:", compose_sparse_updates(ups) == compose_sparse_updates(ups[::-1]))
