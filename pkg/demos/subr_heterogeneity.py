"""Retrieving relevant behaviors instead of recent ones.

Builds the planted synthetic corpus, encodes every movie with the toy LM,
reduces the vectors with PCA and then compares, for each K, how many
distinct genres appear in the K most recent behaviors versus the K behaviors
most similar to the target. Fewer genres means an easier sequence to read.

Run: python demos/subr_heterogeneity.py [output_dir]
Takes about ten seconds the first time, the stages are cached afterwards.
"""

import sys
import tempfile

from rellax.config import RunConfig
from rellax.subr import heterogeneity_table, retrieve_top_k
from rellax.workspace import Workspace

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="rellax-demo-")
ws = Workspace(out, RunConfig(seed=0))
samples = ws.samples()
index, pca = ws.index()
print(f"{len(samples)} samples, item vectors reduced to {pca.d_q} dims")

ks = [5, 10, 15, 20]
recent = heterogeneity_table(samples, ks, "recent")
relevant = heterogeneity_table(samples, ks, "retrieved", index)
print("\n K   recent  retrieved  sequences")
for a, b in zip(recent, relevant):
    print(f"{a.k:>2}   {a.mean:6.3f}  {b.mean:9.3f}  {a.n_sequences:>9}")

s = next(s for s in ws.test_set() if len(s.history) >= 20)
k = 5
print(f"\ntarget: {s.target.title} {dict(s.target.attributes)['genres']}")
print("most recent:")
for it in s.history_items[-k:]:
    print("   ", it.title, dict(it.attributes)["genres"])
print("most relevant:")
for it in retrieve_top_k(s.history_items, s.target, k, index):
    print("   ", it.title, dict(it.attributes)["genres"])
