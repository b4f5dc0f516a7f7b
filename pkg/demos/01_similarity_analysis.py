"""Demo: inspect subspace similarity between two fine-tunes of one base.

Builds a toy base checkpoint plus two fine-tunes whose deltas share a
dominant right-singular direction on some layers, then prints the
per-layer corresponding-angle profile and which layers the default
threshold would select.

Run: python3 demos/01_similarity_analysis.py
"""

import numpy as np

from ipmerge import NamedTensorMap, SelectionConfig, align_layers, analyze_pair

rng = np.random.default_rng(0)
hidden = 64
base, mllm, llm = NamedTensorMap(), NamedTensorMap(), NamedTensorMap()

for i in range(4):
    name = f"model.layers.{i}.mlp.up_proj.weight"
    w0 = rng.normal(size=(hidden, hidden))
    if i % 2 == 0:
        # even layers: both deltas concentrated on the same right direction
        v = rng.normal(size=hidden)
        v /= np.linalg.norm(v)
        d_mllm = np.outer(rng.normal(size=hidden), v)
        d_llm = 6.0 * np.outer(rng.normal(size=hidden), v)
    else:
        # odd layers: unrelated dense deltas
        d_mllm = rng.normal(size=(hidden, hidden))
        d_llm = rng.normal(size=(hidden, hidden))
    base.add(name, w0)
    mllm.add(name, w0 + d_mllm)
    llm.add(name, w0 + d_llm)

cfg = SelectionConfig(threshold=0.3)
for t in align_layers(base, mllm, [llm]):
    profile = analyze_pair(t.llm[0] - t.base, t.mllm - t.base, cfg, layer=t.canonical_name)
    marker = "SELECTED" if profile.selected else "skipped "
    print(
        f"{marker}  {t.canonical_name}  "
        f"s1={profile.s1:.4f}  lambda={profile.lam:.4f}  "
        f"top-3 angles={np.round(profile.s[:3], 4).tolist()}"
    )
