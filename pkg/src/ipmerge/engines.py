"""The four merging engines behind one interface.

Each engine takes the aligned layer triples and produces a merged
NamedTensorMap; everything that is not merge-eligible is copied from the
target checkpoint bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import LayerTriple, NamedTensorMap, serialize_checkpoint
from .linalg import nuclear_norm, svd, weighted_right_projector
from .subspace import (
    SelectionConfig,
    SimilarityProfile,
    analyze_from_svds,
)
from .taskvector import TaskVector

METHODS = ("ip", "task_arithmetic", "ties", "emr")


class MergeError(RuntimeError):
    """A merge run produced invalid output or was misconfigured."""


@dataclass
class MergeRecipe:
    """Declarative description of one merge run."""

    method: str = "ip"
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    alphas: list[float] = field(default_factory=lambda: [1.0])
    ties_retain_fraction: float = 0.2
    multi_donor_mode: str = "independent_sum"
    dtype_policy: str = "preserve"
    threads: int = 1

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise MergeError(f"unknown merge method '{self.method}'")
        if not 0.0 < self.ties_retain_fraction <= 1.0:
            raise MergeError(
                f"ties retain fraction must lie in (0, 1], got {self.ties_retain_fraction}"
            )
        if self.multi_donor_mode != "independent_sum":
            raise MergeError(f"unknown multi-donor mode '{self.multi_donor_mode}'")

    @classmethod
    def from_json(cls, path: str) -> "MergeRecipe":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "MergeRecipe":
        sel = doc.get("selection", {})
        return cls(
            method=doc.get("method", "ip"),
            selection=SelectionConfig(
                threshold=sel.get("threshold", 0.3),
                gamma_mode=sel.get("gamma_mode", "softmax_maxnorm"),
                rank_limit=sel.get("rank_limit"),
                gamma_exponent=sel.get("gamma_exponent", 2),
            ),
            alphas=list(doc.get("alphas", [1.0])),
            ties_retain_fraction=doc.get("ties_retain_fraction", 0.2),
            multi_donor_mode=doc.get("multi_donor_mode", "independent_sum"),
            dtype_policy=doc.get("dtype_policy", "preserve"),
            threads=doc.get("threads", 1),
        )

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "selection": {
                "threshold": self.selection.threshold,
                "gamma_mode": self.selection.gamma_mode,
                "rank_limit": self.selection.rank_limit,
                "gamma_exponent": self.selection.gamma_exponent,
            },
            "alphas": list(self.alphas),
            "ties_retain_fraction": self.ties_retain_fraction,
            "multi_donor_mode": self.multi_donor_mode,
            "dtype_policy": self.dtype_policy,
        }


@dataclass
class LayerRecord:
    name: str
    kind: str
    selected: bool
    s1: float
    lam: float
    method: str
    nuclear_mllm_delta: float
    nuclear_math_delta: float
    nuclear_merged_delta: float
    donors: list[dict] = field(default_factory=list)


@dataclass
class MergeReport:
    method: str
    layers: list[LayerRecord]
    selected_count: int
    eligible_count: int
    recipe: dict
    content_hash: str

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "selected_count": self.selected_count,
            "eligible_count": self.eligible_count,
            "recipe": self.recipe,
            "content_hash": self.content_hash,
            "layers": [
                {
                    "name": r.name,
                    "kind": r.kind,
                    "selected": r.selected,
                    "s1": r.s1,
                    "lambda": r.lam,
                    "method": r.method,
                    "nuclear_mllm_delta": r.nuclear_mllm_delta,
                    "nuclear_math_delta": r.nuclear_math_delta,
                    "nuclear_merged_delta": r.nuclear_merged_delta,
                    "donors": r.donors,
                }
                for r in self.layers
            ],
        }

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "MergeReport":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        layers = [
            LayerRecord(
                name=d["name"],
                kind=d["kind"],
                selected=d["selected"],
                s1=d["s1"],
                lam=d["lambda"],
                method=d["method"],
                nuclear_mllm_delta=d["nuclear_mllm_delta"],
                nuclear_math_delta=d["nuclear_math_delta"],
                nuclear_merged_delta=d["nuclear_merged_delta"],
                donors=d.get("donors", []),
            )
            for d in doc["layers"]
        ]
        return cls(
            method=doc["method"],
            layers=layers,
            selected_count=doc["selected_count"],
            eligible_count=doc["eligible_count"],
            recipe=doc["recipe"],
            content_hash=doc["content_hash"],
        )


def content_hash(tmap: NamedTensorMap, dtype_policy: str = "preserve") -> str:
    return hashlib.sha256(serialize_checkpoint(tmap, dtype_policy)).hexdigest()


def _check_finite_output(name: str, merged: np.ndarray) -> None:
    if not np.all(np.isfinite(merged)):
        raise MergeError(f"merge produced non-finite values in layer '{name}'")


# ---------------------------------------------------------------------------
# IP merge


def _ip_merge_layer(
    triple: LayerTriple, cfg: SelectionConfig
) -> tuple[np.ndarray | None, LayerRecord, list[SimilarityProfile]]:
    """Merge one layer; returns None for the tensor when nothing was selected."""
    delta_mllm = triple.mllm - triple.base
    svd_mllm = svd(delta_mllm, rank_limit=cfg.rank_limit, name=triple.canonical_name)

    projected = np.zeros_like(delta_mllm)
    profiles: list[SimilarityProfile] = []
    donor_records: list[dict] = []
    any_selected = False
    nuclear_math = 0.0
    for delta_donor_src in triple.llm:
        delta_math = delta_donor_src - triple.base
        svd_math = svd(delta_math, rank_limit=cfg.rank_limit, name=triple.canonical_name)
        profile = analyze_from_svds(svd_math, svd_mllm, cfg, layer=triple.canonical_name)
        profiles.append(profile)
        donor_records.append(
            {"s1": profile.s1, "lambda": profile.lam, "selected": profile.selected}
        )
        nuclear_math = max(nuclear_math, nuclear_norm(svd_math.sigma))
        if profile.selected:
            any_selected = True
            if cfg.gamma_exponent == 2:
                proj = weighted_right_projector(svd_mllm.vt, profile.gamma_applied)
            else:
                proj = (svd_mllm.vt.T * profile.gamma_applied**cfg.gamma_exponent) @ svd_mllm.vt
            projected += profile.lam * (delta_math @ proj)

    nuclear_mllm = nuclear_norm(svd_mllm.sigma)
    if any_selected:
        merged = triple.base + delta_mllm + projected
        _check_finite_output(triple.canonical_name, merged)
        merged_delta = merged - triple.base
    else:
        merged = None  # keep the target tensor bit-exactly
        merged_delta = delta_mllm

    first = profiles[0] if profiles else None
    record = LayerRecord(
        name=triple.canonical_name,
        kind=triple.kind,
        selected=any_selected,
        s1=first.s1 if first else 0.0,
        lam=first.lam if first else 0.0,
        method="ip",
        nuclear_mllm_delta=nuclear_mllm,
        nuclear_math_delta=nuclear_math,
        nuclear_merged_delta=nuclear_norm(svd(merged_delta).sigma),
        donors=donor_records,
    )
    return merged, record, profiles


def ip_merge(
    base: NamedTensorMap,
    mllm: NamedTensorMap,
    llm_donors: list[NamedTensorMap],
    triples: list[LayerTriple],
    recipe: MergeRecipe,
) -> tuple[NamedTensorMap, MergeReport]:
    """Subspace-projected merge: select by similarity, rescale by nuclear-norm
    ratio, project the donor delta onto the target's weighted right subspace.

    With multiple donors, each projected delta is computed independently
    against the same target delta and summed.
    """
    if recipe.method != "ip":
        raise MergeError(f"recipe method is '{recipe.method}', expected 'ip'")
    cfg = recipe.selection

    out = mllm.copy()
    threads = max(1, recipe.threads)
    if threads > 1 and len(triples) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda t: _ip_merge_layer(t, cfg), triples))
    else:
        results = [_ip_merge_layer(t, cfg) for t in triples]

    records: list[LayerRecord] = []
    for triple, (merged, record, _) in zip(triples, results):
        if merged is not None:
            out.set_values(triple.canonical_name, merged)
        records.append(record)

    report = MergeReport(
        method="ip",
        layers=records,
        selected_count=sum(r.selected for r in records),
        eligible_count=len(records),
        recipe=recipe.to_dict(),
        content_hash=content_hash(out, recipe.dtype_policy),
    )
    return out, report


# ---------------------------------------------------------------------------
# Baseline engines


def task_arithmetic_merge(
    base: NamedTensorMap,
    deltas: list[TaskVector],
    alphas: list[float],
) -> NamedTensorMap:
    """W = W0 + sum_t alpha_t * Delta_t on every layer covered by a delta."""
    if len(alphas) != len(deltas):
        raise MergeError(f"{len(alphas)} alphas for {len(deltas)} task vectors")
    out = base.copy()
    names = sorted(set().union(*[set(d.deltas) for d in deltas])) if deltas else []
    for name in names:
        acc = np.array(base[name], dtype=np.float64, copy=True)
        for alpha, tv in zip(alphas, deltas):
            if name in tv:
                if tv[name].shape != acc.shape:
                    raise MergeError(f"shape mismatch for '{name}'")
                acc += alpha * tv[name]
        _check_finite_output(name, acc)
        out.set_values(name, acc)
    return out


def _trim(delta: np.ndarray, retain_fraction: float) -> np.ndarray:
    """Keep the top fraction of entries by magnitude, zero the rest."""
    flat = delta.reshape(-1)
    n = flat.size
    k = min(n, max(1, int(round(retain_fraction * n))))
    if k == n:
        return delta.copy()
    order = np.argsort(-np.abs(flat), kind="stable")
    trimmed = np.zeros_like(flat)
    keep = order[:k]
    trimmed[keep] = flat[keep]
    return trimmed.reshape(delta.shape)


def ties_merge(
    base: NamedTensorMap,
    deltas: list[TaskVector],
    retain_fraction: float,
    alpha: float = 1.0,
) -> NamedTensorMap:
    """Trim / elect sign / disjoint merge.

    Sign ties (summed trimmed values cancel exactly) resolve to the first
    donor, in list order, with a nonzero trimmed entry at that coordinate.
    """
    if not 0.0 < retain_fraction <= 1.0:
        raise MergeError(f"retain fraction must lie in (0, 1], got {retain_fraction}")
    out = base.copy()
    names = sorted(set().union(*[set(d.deltas) for d in deltas])) if deltas else []
    for name in names:
        stack = [
            _trim(tv[name], retain_fraction)
            for tv in deltas
            if name in tv
        ]
        total = np.sum(stack, axis=0)
        elected = np.sign(total)
        for trimmed in stack:
            tie = (elected == 0) & (trimmed != 0)
            elected = np.where(tie, np.sign(trimmed), elected)
        merged = np.zeros_like(total)
        count = np.zeros_like(total)
        for trimmed in stack:
            agrees = (np.sign(trimmed) == elected) & (trimmed != 0)
            merged += np.where(agrees, trimmed, 0.0)
            count += agrees
        merged = merged / np.maximum(count, 1)
        result = base[name] + alpha * merged
        _check_finite_output(name, result)
        out.set_values(name, result)
    return out


def emr_merge(
    base: NamedTensorMap,
    mllm_delta: TaskVector,
    donor_deltas: list[TaskVector],
) -> NamedTensorMap:
    """Unified task vector + target-task sign mask + magnitude rescaler,
    reconstructed for the target (MLLM) task.
    """
    if not donor_deltas:
        raise MergeError("emr merge needs at least one donor task vector")
    out = base.copy()
    all_deltas = [mllm_delta] + donor_deltas
    for name in mllm_delta.names():
        stack = np.stack([tv[name] for tv in all_deltas if name in tv])
        total = stack.sum(axis=0)
        uni_sign = np.sign(total)
        for layer_delta in stack:
            tie = (uni_sign == 0) & (layer_delta != 0)
            uni_sign = np.where(tie, np.sign(layer_delta), uni_sign)
        agreeing = np.where(np.sign(stack) == uni_sign, np.abs(stack), 0.0)
        tau_uni = uni_sign * agreeing.max(axis=0)

        target = mllm_delta[name]
        mask = (np.sign(target) == uni_sign) & (uni_sign != 0)
        masked_uni = np.where(mask, tau_uni, 0.0)
        denom = np.mean(np.abs(masked_uni))
        rescaler = float(np.mean(np.abs(target)) / denom) if denom > 0 else 0.0
        result = base[name] + rescaler * masked_uni
        _check_finite_output(name, result)
        out.set_values(name, result)
    return out


# ---------------------------------------------------------------------------
# Orchestration and verification


def merge_checkpoints(
    base: NamedTensorMap,
    mllm: NamedTensorMap,
    llm_donors: list[NamedTensorMap],
    triples: list[LayerTriple],
    recipe: MergeRecipe,
) -> tuple[NamedTensorMap, MergeReport]:
    """Run the recipe's engine over the aligned triples.

    Pass-through tensors (everything without a triple) come from the target
    checkpoint bit-exactly, for every engine.
    """
    if recipe.method == "ip":
        return ip_merge(base, mllm, llm_donors, triples, recipe)

    mllm_tv = TaskVector(
        deltas={t.canonical_name: t.mllm - t.base for t in triples}, source_id="mllm"
    )
    donor_tvs = [
        TaskVector(
            deltas={t.canonical_name: t.llm[i] - t.base for t in triples},
            source_id=f"donor-{i}",
        )
        for i in range(len(llm_donors))
    ]

    if recipe.method == "task_arithmetic":
        alphas = list(recipe.alphas)
        if len(alphas) != len(donor_tvs):
            raise MergeError(f"{len(alphas)} alphas for {len(donor_tvs)} donors")
        partial = task_arithmetic_merge(base, [mllm_tv] + donor_tvs, [1.0] + alphas)
    elif recipe.method == "ties":
        alpha = recipe.alphas[0] if recipe.alphas else 1.0
        partial = ties_merge(
            base, [mllm_tv] + donor_tvs, recipe.ties_retain_fraction, alpha
        )
    else:  # emr
        partial = emr_merge(base, mllm_tv, donor_tvs)

    out = mllm.copy()
    records: list[LayerRecord] = []
    for triple in triples:
        name = triple.canonical_name
        merged = partial[name]
        _check_finite_output(name, merged)
        out.set_values(name, merged)
        delta_mllm = triple.mllm - triple.base
        records.append(
            LayerRecord(
                name=name,
                kind=triple.kind,
                selected=True,
                s1=0.0,
                lam=0.0,
                method=recipe.method,
                nuclear_mllm_delta=nuclear_norm(svd(delta_mllm).sigma),
                nuclear_math_delta=0.0,
                nuclear_merged_delta=nuclear_norm(svd(merged - triple.base).sigma),
            )
        )
    report = MergeReport(
        method=recipe.method,
        layers=records,
        selected_count=len(records),
        eligible_count=len(records),
        recipe=recipe.to_dict(),
        content_hash=content_hash(out, recipe.dtype_policy),
    )
    return out, report


@dataclass
class VerificationSummary:
    checks: list[dict]

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": self.checks}


def verify_merge(
    output: NamedTensorMap,
    report: MergeReport,
    mllm: NamedTensorMap,
    dtype_policy: str | None = None,
) -> VerificationSummary:
    """Re-check the structural guarantees of a finished merge.

    Failures are reported, never raised.
    """
    checks: list[dict] = []
    eligible = {r.name for r in report.layers}

    bad = [
        name
        for name, e in output.items()
        if name not in eligible
        and (
            name not in mllm
            or e.dtype != mllm.entry(name).dtype
            or e.values.shape != mllm[name].shape
            or not np.array_equal(e.values, mllm[name])
        )
    ]
    checks.append(
        {
            "name": "passthrough_bit_equality",
            "passed": not bad,
            "detail": f"{len(bad)} pass-through tensors differ from target"
            + (f" (first: {bad[0]})" if bad else ""),
        }
    )

    nonfinite = [name for name, e in output.items() if not np.all(np.isfinite(e.values))]
    checks.append(
        {
            "name": "finiteness",
            "passed": not nonfinite,
            "detail": f"{len(nonfinite)} tensors contain non-finite values",
        }
    )

    norm_bad = []
    if report.method == "ip":
        for r in report.layers:
            for donor in r.donors:
                if not donor["selected"]:
                    continue
                scaled = donor["lambda"] * (
                    r.nuclear_math_delta if len(r.donors) == 1 else 0.0
                )
                if len(r.donors) == 1 and r.nuclear_mllm_delta > 0:
                    rel = abs(scaled - r.nuclear_mllm_delta) / r.nuclear_mllm_delta
                    if rel > 1e-6:
                        norm_bad.append(r.name)
    checks.append(
        {
            "name": "nuclear_norm_transfer",
            "passed": not norm_bad,
            "detail": f"{len(norm_bad)} selected layers violate the nuclear-norm match",
        }
    )

    policy = dtype_policy or report.recipe.get("dtype_policy", "preserve")
    recomputed = content_hash(output, policy)
    checks.append(
        {
            "name": "content_hash",
            "passed": recomputed == report.content_hash,
            "detail": f"report {report.content_hash[:12]}.. vs checkpoint {recomputed[:12]}..",
        }
    )
    return VerificationSummary(checks=checks)
