"""Subspace similarity, layer selection, rescaling and importance scoring.

This is everything the projection-based merge computes per layer before it
touches the weights: SVDs of both task vectors, the corresponding-angle
similarity between their right-singular bases, the nuclear-norm rescale
factor and the softmax importance scores over the retained directions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .linalg import SvdResult, nuclear_norm, svd

GAMMA_MODES = ("softmax_raw", "softmax_maxnorm", "uniform_ones")


@dataclass
class SelectionConfig:
    threshold: float = 0.3
    gamma_mode: str = "softmax_maxnorm"
    rank_limit: int | None = None
    # Exponent applied to gamma inside the projector; 2 corresponds to
    # weighting both V factors (column-scaling reading), 1 to a single
    # application.
    gamma_exponent: int = 2

    def __post_init__(self) -> None:
        # thresholds above 1 are allowed: they disable selection entirely
        if self.threshold < 0.0:
            raise ValueError(f"threshold must be non-negative, got {self.threshold}")
        if self.gamma_mode not in GAMMA_MODES:
            raise ValueError(f"unknown gamma mode '{self.gamma_mode}'")


@dataclass
class SimilarityProfile:
    layer: str
    s: np.ndarray  # cosine of corresponding angles, descending sigma order
    u_similarity: np.ndarray  # left-singular analogue, reported only
    lam: float
    gamma: np.ndarray
    gamma_applied: np.ndarray
    selected: bool

    @property
    def s1(self) -> float:
        return float(self.s[0]) if self.s.size else 0.0


def corresponding_angles(svd_math: SvdResult, svd_mllm: SvdResult) -> np.ndarray:
    """Absolute cosine between index-paired right-singular vectors.

    Pairs are matched by singular-value rank.  The absolute value makes the
    score invariant to the sign ambiguity of singular vectors.
    """
    if svd_math.vt.shape[1] != svd_mllm.vt.shape[1]:
        raise ValueError(
            f"right-singular bases not comparable: {svd_math.vt.shape} vs {svd_mllm.vt.shape}"
        )
    k = min(svd_math.k, svd_mllm.k)
    a, b = svd_math.vt[:k], svd_mllm.vt[:k]
    dots = np.abs(np.sum(a * b, axis=1))
    norms = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(norms > 0, dots / norms, 0.0)
    return np.clip(s, 0.0, 1.0)


def select_layers(profiles: list[SimilarityProfile], threshold: float) -> np.ndarray:
    """Boolean mask: layer n is kept iff its top similarity reaches the threshold."""
    return np.array([p.s1 >= threshold and p.lam > 0 for p in profiles], dtype=bool)


def rescale_factor(sigma_mllm: np.ndarray, sigma_math: np.ndarray) -> float:
    """Ratio of nuclear norms: target update magnitude over donor magnitude."""
    num = nuclear_norm(sigma_mllm)
    den = nuclear_norm(sigma_math)
    if den == 0.0:
        warnings.warn(
            "zero donor delta: rescale factor set to 0 and layer treated as unselected",
            RuntimeWarning,
            stacklevel=2,
        )
        return 0.0
    return num / den


def importance_scores(s: np.ndarray, mode: str = "softmax_maxnorm") -> tuple[np.ndarray, np.ndarray]:
    """Softmax of the similarity scores, plus the weights actually applied.

    ``softmax_raw`` uses the literal softmax; over thousands of directions
    every weight collapses to ~1/k, which squares to nearly nothing inside
    the projector, so ``softmax_maxnorm`` divides by the maximum to keep the
    top direction at unit gain.  ``uniform_ones`` disables the weighting.
    """
    if mode not in GAMMA_MODES:
        raise ValueError(f"unknown gamma mode '{mode}'")
    s = np.asarray(s, dtype=np.float64)
    e = np.exp(s - (s.max() if s.size else 0.0))
    gamma = e / e.sum() if s.size else e
    if mode == "softmax_raw":
        applied = gamma
    elif mode == "softmax_maxnorm":
        applied = gamma / gamma.max() if s.size else gamma
    else:
        applied = np.ones_like(gamma)
    return gamma, applied


def analyze_pair(
    delta_math: np.ndarray,
    delta_mllm: np.ndarray,
    cfg: SelectionConfig,
    layer: str = "",
) -> SimilarityProfile:
    """Full per-layer profile: SVDs, similarity, rescale factor, importance."""
    if delta_math.shape != delta_mllm.shape:
        raise ValueError(
            f"shape mismatch for '{layer}': {delta_math.shape} vs {delta_mllm.shape}"
        )
    svd_math = svd(delta_math, rank_limit=cfg.rank_limit, name=f"{layer} (donor delta)")
    svd_mllm = svd(delta_mllm, rank_limit=cfg.rank_limit, name=f"{layer} (target delta)")
    return analyze_from_svds(svd_math, svd_mllm, cfg, layer=layer)


def analyze_from_svds(
    svd_math: SvdResult,
    svd_mllm: SvdResult,
    cfg: SelectionConfig,
    layer: str = "",
) -> SimilarityProfile:
    s = corresponding_angles(svd_math, svd_mllm)
    k = min(svd_math.k, svd_mllm.k)
    u_dots = np.abs(np.sum(svd_math.u[:, :k] * svd_mllm.u[:, :k], axis=0))
    if nuclear_norm(svd_math.sigma) == 0.0:
        lam = 0.0
    else:
        lam = rescale_factor(svd_mllm.sigma, svd_math.sigma)
    gamma, gamma_applied = importance_scores(s, cfg.gamma_mode)
    selected = bool(s.size and s[0] >= cfg.threshold and lam > 0)
    return SimilarityProfile(
        layer=layer,
        s=s,
        u_similarity=np.clip(u_dots, 0.0, 1.0),
        lam=lam,
        gamma=gamma,
        gamma_applied=gamma_applied,
        selected=selected,
    )


def profile_to_dict(profile: SimilarityProfile, top_k: int | None = None) -> dict:
    """JSON-ready view of a profile (exported schema)."""
    k = profile.s.size if top_k is None else min(top_k, profile.s.size)
    return {
        "layer": profile.layer,
        "s": [float(x) for x in profile.s[:k]],
        "u_similarity": [float(x) for x in profile.u_similarity[:k]],
        "s1": profile.s1,
        "lambda": profile.lam,
        "gamma": [float(x) for x in profile.gamma[:k]],
        "gamma_applied": [float(x) for x in profile.gamma_applied[:k]],
        "selected": profile.selected,
    }
