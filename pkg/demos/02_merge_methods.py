"""Demo: merge one toy checkpoint triple with all four engines.

Shows how far each method moves the target checkpoint, measured as the
Frobenius norm of the change per layer.

Run: python3 demos/02_merge_methods.py
"""

import numpy as np

from ipmerge import (
    MergeRecipe,
    NamedTensorMap,
    SelectionConfig,
    align_layers,
    merge_checkpoints,
)

rng = np.random.default_rng(1)
hidden = 48
base, mllm, llm = NamedTensorMap(), NamedTensorMap(), NamedTensorMap()
for i in range(3):
    name = f"model.layers.{i}.self_attn.q_proj.weight"
    w0 = rng.normal(size=(hidden, hidden))
    v = rng.normal(size=hidden)
    v /= np.linalg.norm(v)
    base.add(name, w0)
    mllm.add(name, w0 + 0.2 * np.outer(rng.normal(size=hidden), v))
    llm.add(name, w0 + 3.0 * np.outer(rng.normal(size=hidden), v))

triples = align_layers(base, mllm, [llm])
recipes = {
    "subspace projection": MergeRecipe(method="ip", selection=SelectionConfig(threshold=0.3)),
    "task arithmetic":     MergeRecipe(method="task_arithmetic", alphas=[0.4]),
    "ties":                MergeRecipe(method="ties", alphas=[0.7], ties_retain_fraction=0.2),
    "emr":                 MergeRecipe(method="emr"),
}

for label, recipe in recipes.items():
    merged, report = merge_checkpoints(base, mllm, [llm], triples, recipe)
    moves = [float(np.linalg.norm(merged[t.canonical_name] - t.mllm)) for t in triples]
    print(f"{label:22s} selected {report.selected_count}/{report.eligible_count}  "
          f"per-layer |merged - target|_F = {np.round(moves, 3).tolist()}")
