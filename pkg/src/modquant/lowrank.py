"""Truncated SVD and gated low-rank branch construction.

Both auxiliary branches (weight smoothing and activation compensation) are
anchored to the dominant singular subspace of the main-path weight: the left
factor is transformed by the path's inverse transform, and learnability is
confined to a diagonal gate reweighting the singular directions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import transform as tr
from .tensor import as_matrix


@dataclass(frozen=True)
class SvdFactors:
    u: np.ndarray        # rows x r, orthonormal columns
    sigma: np.ndarray    # length r, descending, nonnegative
    vt: np.ndarray       # r x cols, orthonormal rows


def truncated_svd(w: np.ndarray, r: int) -> SvdFactors:
    """Best rank-r factors of w (Eckart-Young optimal in Frobenius norm).

    Sign convention: the first nonzero entry of each left singular vector is
    made positive, so results are deterministic across runs.
    """
    w = as_matrix(w)
    if not 1 <= r <= min(w.shape):
        raise ValueError(f"rank {r} out of range for shape {w.shape}")
    u, s, vt = np.linalg.svd(w, full_matrices=False)
    u, s, vt = u[:, :r].copy(), s[:r].copy(), vt[:r].copy()
    for j in range(r):
        col = u[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            u[:, j] = -col
            vt[j] = -vt[j]
    return SvdFactors(u, s, vt)


@dataclass(frozen=True)
class LowRankBranch:
    """Gated rank-r branch: effective product is u_star @ diag(gate) @ v_base."""

    u_star: np.ndarray   # path_width x r
    v_base: np.ndarray   # r x d_out, holds sigma_r * vt_r
    gate: np.ndarray     # length r, learnable

    @property
    def rank(self) -> int:
        return self.u_star.shape[1]

    def effective_v(self) -> np.ndarray:
        return self.gate[:, None] * self.v_base

    def product(self) -> np.ndarray:
        return self.u_star @ self.effective_v()

    def with_gate(self, gate: np.ndarray) -> "LowRankBranch":
        gate = np.asarray(gate, dtype=np.float64)
        if gate.shape != (self.rank,) or not np.all(np.isfinite(gate)):
            raise ValueError("gate must be a finite vector of length rank")
        return replace(self, gate=gate)


def build_branch(w_m: np.ndarray, p_m: tr.Transform, r: int) -> LowRankBranch:
    """Anchor a branch to the rank-r SVD of the untransformed weight.

    With the gate at its all-ones init, the branch product equals the
    inverse-transformed rank-r approximation of w_m.
    """
    w_m = as_matrix(w_m)
    if p_m.dim != w_m.shape[0]:
        raise ValueError(
            f"transform dim {p_m.dim} does not match weight rows {w_m.shape[0]}"
        )
    factors = truncated_svd(w_m, r)
    u_star = tr.apply_inv_left(factors.u, p_m)
    v_base = factors.sigma[:, None] * factors.vt
    return LowRankBranch(u_star, v_base, np.ones(r))


def default_rank(ratio: float, path_width: int, d_out: int) -> int:
    """Rank from a ratio of the full weight rank, at least 1 on nonempty paths."""
    full = min(path_width, d_out)
    if full == 0:
        return 0
    return max(1, int(np.floor(ratio * full + 0.5)))


def gate_gradient(
    branch: LowRankBranch, target: np.ndarray
) -> np.ndarray:
    """Analytic gradient of ||u_star diag(g) v_base - target||_F^2 w.r.t. g."""
    target = as_matrix(target)
    resid = branch.product() - target
    # d/dg_k = 2 * u_star[:,k]^T resid v_base[k,:]^T
    return 2.0 * np.einsum("jk,jo,ko->k", branch.u_star, resid, branch.v_base)
