"""Per-layer task vectors (fine-tuned minus base weights) and their diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import AlignmentError, LayerTriple, NamedTensorMap
from .linalg import require_finite


@dataclass
class TaskVector:
    """Ordered map of per-layer weight deltas with source provenance."""

    deltas: dict[str, np.ndarray] = field(default_factory=dict)
    source_id: str = ""
    base_id: str = ""

    def names(self) -> list[str]:
        return sorted(self.deltas)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.deltas[name]

    def __contains__(self, name: str) -> bool:
        return name in self.deltas

    def __len__(self) -> int:
        return len(self.deltas)


def compute_task_vector(
    ft: NamedTensorMap,
    base: NamedTensorMap,
    triples: list[LayerTriple],
    source_id: str = "",
    base_id: str = "",
) -> TaskVector:
    """delta[n] = ft[n] - base[n] for every merge-eligible layer."""
    deltas: dict[str, np.ndarray] = {}
    for triple in triples:
        name = triple.canonical_name
        w_ft = ft[name]
        w_base = base[name]
        if w_ft.shape != w_base.shape:
            raise AlignmentError(
                f"shape mismatch for '{name}': {w_ft.shape} vs {w_base.shape}"
            )
        deltas[name] = w_ft - w_base
    return TaskVector(deltas=deltas, source_id=source_id, base_id=base_id)


def trace_value(delta: np.ndarray) -> float:
    """tr(delta^T delta), i.e. the squared Frobenius norm of the update."""
    delta = np.asarray(delta, dtype=np.float64)
    require_finite(delta)
    return float(np.sum(delta * delta))
