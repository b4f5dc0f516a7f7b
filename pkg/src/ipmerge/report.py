"""Diagnostic analysis reports: per-layer spectra, similarity profiles and
selection flags, emitted as plot-ready CSV with a JSON mirror."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import LayerTriple
from .linalg import svd
from .subspace import SelectionConfig, analyze_from_svds
from .taskvector import trace_value


@dataclass
class AnalysisRow:
    layer: str
    kind: str
    donor: int
    trace_mllm: float
    trace_math: float
    s1: float
    lam: float
    selected: bool
    sigma_mllm: list[float] = field(default_factory=list)
    sigma_math: list[float] = field(default_factory=list)
    s: list[float] = field(default_factory=list)


@dataclass
class AnalysisReport:
    rows: list[AnalysisRow]
    top_k: int
    config: dict

    def to_dict(self) -> dict:
        return {
            "top_k": self.top_k,
            "config": self.config,
            "rows": [
                {
                    "layer": r.layer,
                    "kind": r.kind,
                    "donor": r.donor,
                    "trace_mllm": r.trace_mllm,
                    "trace_math": r.trace_math,
                    "s1": r.s1,
                    "lambda": r.lam,
                    "selected": r.selected,
                    "sigma_mllm": r.sigma_mllm,
                    "sigma_math": r.sigma_math,
                    "s": r.s,
                }
                for r in self.rows
            ],
        }

    def save_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def save_csv(self, path: str) -> None:
        """One row per (layer, donor); spectra columns beyond the layer's
        rank are left empty."""
        k = self.top_k
        header = (
            ["layer", "kind", "donor", "trace_mllm", "trace_math", "s1", "lambda", "selected"]
            + [f"sigma_mllm_{i + 1}" for i in range(k)]
            + [f"sigma_math_{i + 1}" for i in range(k)]
            + [f"s_{i + 1}" for i in range(k)]
        )

        def fmt(x: float) -> str:
            return format(x, ".17g")

        def pad(vals: list[float]) -> list[str]:
            return [fmt(v) for v in vals] + [""] * (k - len(vals))

        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for r in self.rows:
                writer.writerow(
                    [r.layer, r.kind, str(r.donor), fmt(r.trace_mllm), fmt(r.trace_math),
                     fmt(r.s1), fmt(r.lam), str(int(r.selected))]
                    + pad(r.sigma_mllm)
                    + pad(r.sigma_math)
                    + pad(r.s)
                )


def analyze_triples(
    triples: list[LayerTriple],
    cfg: SelectionConfig,
    top_k: int = 100,
    trace_metric: str = "frobenius_sq",
) -> AnalysisReport:
    """Per-layer, per-donor diagnostics for the aligned triples.

    ``trace_metric`` selects the update-magnitude scalar: squared Frobenius
    norm (default) or the nuclear norm of the delta.
    """
    if trace_metric not in ("frobenius_sq", "nuclear"):
        raise ValueError(f"unknown trace metric '{trace_metric}'")

    def magnitude(delta: np.ndarray, sigma: np.ndarray) -> float:
        if trace_metric == "frobenius_sq":
            return trace_value(delta)
        return float(np.sum(sigma))

    rows: list[AnalysisRow] = []
    for triple in triples:
        delta_mllm = triple.mllm - triple.base
        svd_mllm = svd(delta_mllm, rank_limit=cfg.rank_limit, name=triple.canonical_name)
        for i, donor in enumerate(triple.llm):
            delta_math = donor - triple.base
            svd_math = svd(delta_math, rank_limit=cfg.rank_limit, name=triple.canonical_name)
            profile = analyze_from_svds(svd_math, svd_mllm, cfg, layer=triple.canonical_name)
            rows.append(
                AnalysisRow(
                    layer=triple.canonical_name,
                    kind=triple.kind,
                    donor=i,
                    trace_mllm=magnitude(delta_mllm, svd_mllm.sigma),
                    trace_math=magnitude(delta_math, svd_math.sigma),
                    s1=profile.s1,
                    lam=profile.lam,
                    selected=profile.selected,
                    sigma_mllm=[float(x) for x in svd_mllm.sigma[:top_k]],
                    sigma_math=[float(x) for x in svd_math.sigma[:top_k]],
                    s=[float(x) for x in profile.s[:top_k]],
                )
            )
    return AnalysisReport(
        rows=rows,
        top_k=top_k,
        config={
            "threshold": cfg.threshold,
            "gamma_mode": cfg.gamma_mode,
            "rank_limit": cfg.rank_limit,
            "trace_metric": trace_metric,
        },
    )
