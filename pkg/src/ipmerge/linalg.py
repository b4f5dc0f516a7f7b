"""Dense matrix primitives: SVD, norms and weighted projectors.

All computation is done in float64 regardless of the storage precision of
the checkpoints, so singular-vector signs and orderings are stable enough
to make layer selection reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Singular values below this fraction of sigma_max are treated as numerical
# noise and clamped to zero, so they cannot inflate rescale factors or
# importance scores.
SIGMA_CLIP_REL = 1e-12


class NonFiniteError(ValueError):
    """Raised when a tensor containing NaN/Inf enters the merge math."""


def require_finite(a: np.ndarray, name: str = "matrix") -> None:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite values in tensor '{name}'")


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD A = U @ diag(sigma) @ Vt with sigma sorted descending."""

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    @property
    def k(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt


def svd(a: np.ndarray, rank_limit: int | None = None, name: str = "matrix") -> SvdResult:
    """Thin SVD with deterministic singular-vector signs.

    Each right-singular vector is flipped so its largest-magnitude entry is
    positive (the matching left vector is flipped too), resolving the sign
    ambiguity of degenerate or repeated singular values.  With ``rank_limit``
    only the top-r singular triples are kept.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"svd expects a 2-D matrix, got shape {a.shape} for '{name}'")
    require_finite(a, name)
    if rank_limit is not None and rank_limit > min(a.shape):
        raise ValueError(
            f"rank_limit {rank_limit} exceeds min(rows, cols)={min(a.shape)} for '{name}'"
        )

    u, s, vt = np.linalg.svd(a, full_matrices=False)

    # Fix signs: largest-|entry| of each right-singular vector made positive.
    k = s.shape[0]
    if k:
        idx = np.argmax(np.abs(vt), axis=1)
        signs = np.sign(vt[np.arange(k), idx])
        signs[signs == 0] = 1.0
        vt = vt * signs[:, None]
        u = u * signs[None, :]

    if k and s[0] > 0:
        s = np.where(s < SIGMA_CLIP_REL * s[0], 0.0, s)

    if rank_limit is not None:
        u, s, vt = u[:, :rank_limit], s[:rank_limit], vt[:rank_limit]
    return SvdResult(u=u, sigma=s, vt=vt)


def nuclear_norm(sigma: np.ndarray) -> float:
    """Sum of singular values."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.size and sigma.min() < 0:
        raise ValueError("singular values must be non-negative")
    return float(np.sum(sigma))


def spectral_norm(a: np.ndarray) -> float:
    """Largest singular value of ``a``."""
    a = np.asarray(a, dtype=np.float64)
    require_finite(a)
    if a.size == 0:
        return 0.0
    return float(np.linalg.svd(a, compute_uv=False)[0])


def weighted_right_projector(vt: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Projector P = V @ diag(gamma)^2 @ Vt onto the weighted row space.

    ``vt`` holds the retained right-singular vectors as rows; ``gamma`` is
    one weight in [0, 1] per retained vector.  With all weights 1 and a
    full-rank V, P is the identity.
    """
    vt = np.asarray(vt, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.ndim != 1 or gamma.shape[0] != vt.shape[0]:
        raise ValueError(
            f"gamma length {gamma.shape} does not match {vt.shape[0]} retained vectors"
        )
    if gamma.size and (gamma.min() < 0 or gamma.max() > 1):
        raise ValueError("gamma entries must lie in [0, 1]")
    return (vt.T * gamma**2) @ vt
