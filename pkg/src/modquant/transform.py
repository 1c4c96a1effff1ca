"""Invertible per-path transformations and the reconstruction-loss objective.

A transform P rewrites a linear layer as Y = (X P)(P^-1 W) without changing
its output; applying it before quantization redistributes outliers between
activations and weights.  Two families are supported: per-channel diagonal
scaling (stored as log-scales so learning cannot cross zero) and small dense
invertible matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import as_matrix

DIAG_EPS = 1e-6
DIAG_MAX = 1e6
DENSE_INVERSE_TOL = 1e-8
SMOOTHING_ALPHA = 0.5


@dataclass(frozen=True)
class Transform:
    """Either a diagonal scaling (log_scale set) or a dense invertible matrix."""

    dim: int
    log_scale: np.ndarray | None = None
    dense: np.ndarray | None = None
    dense_inv: np.ndarray | None = field(default=None, repr=False)

    @property
    def is_diagonal(self) -> bool:
        return self.log_scale is not None

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)


def diagonal_transform(scale: np.ndarray) -> Transform:
    scale = np.asarray(scale, dtype=np.float64)
    if scale.ndim != 1:
        raise ValueError("diagonal scale must be 1-D")
    mag = np.abs(scale)
    if np.any(mag < DIAG_EPS) or np.any(mag > DIAG_MAX):
        raise ValueError(f"diagonal magnitudes must lie in [{DIAG_EPS}, {DIAG_MAX}]")
    if np.any(scale <= 0):
        raise ValueError("diagonal scales must be positive (log parameterization)")
    return Transform(dim=scale.shape[0], log_scale=np.log(scale))


def dense_transform(p: np.ndarray) -> Transform:
    """Construct a dense transform; rejects badly conditioned matrices."""
    p = as_matrix(p)
    if p.shape[0] != p.shape[1]:
        raise ValueError("dense transform must be square")
    try:
        p_inv = np.linalg.inv(p)
    except np.linalg.LinAlgError as exc:
        raise ValueError("dense transform is singular") from exc
    residual = np.max(np.abs(p @ p_inv - np.eye(p.shape[0])))
    if not np.isfinite(residual) or residual > DENSE_INVERSE_TOL:
        raise ValueError(
            f"inverse residual {residual:.3e} exceeds {DENSE_INVERSE_TOL:.0e}"
        )
    return Transform(dim=p.shape[0], dense=p, dense_inv=p_inv)


def identity_transform(dim: int) -> Transform:
    return diagonal_transform(np.ones(dim)) if dim > 0 else Transform(0, np.zeros(0))


def init_transform(
    dim: int, kind: str = "diagonal", x_calib: np.ndarray | None = None
) -> Transform:
    """Identity init, or activation-magnitude smoothing init when calibration
    data is given: d_i = max(eps, max_rows |X[:, i]|) ** alpha."""
    if kind == "dense":
        return dense_transform(np.eye(dim))
    if kind != "diagonal":
        raise ValueError(f"unknown transform kind {kind!r}")
    if dim == 0:
        return Transform(0, np.zeros(0))
    if x_calib is None or x_calib.size == 0:
        return diagonal_transform(np.ones(dim))
    x_calib = as_matrix(x_calib, cols=dim)
    col_max = np.max(np.abs(x_calib), axis=0)
    d = np.maximum(col_max, DIAG_EPS) ** SMOOTHING_ALPHA
    return diagonal_transform(np.clip(d, DIAG_EPS, DIAG_MAX))


def apply_right(x: np.ndarray, t: Transform) -> np.ndarray:
    """X -> X P (diagonal: column-wise scaling)."""
    x = as_matrix(x)
    if x.shape[1] != t.dim:
        raise ValueError(f"matrix has {x.shape[1]} cols, transform dim {t.dim}")
    if t.dim == 0:
        return x.copy()
    if t.is_diagonal:
        return x * t.scale[np.newaxis, :]
    return x @ t.dense


def apply_inv_left(w: np.ndarray, t: Transform) -> np.ndarray:
    """W -> P^-1 W (diagonal: row-wise scaling by 1/d)."""
    w = as_matrix(w)
    if w.shape[0] != t.dim:
        raise ValueError(f"matrix has {w.shape[0]} rows, transform dim {t.dim}")
    if t.dim == 0:
        return w.copy()
    if t.is_diagonal:
        return w / t.scale[:, np.newaxis]
    return t.dense_inv @ w


def recon_loss(y_hat: np.ndarray, y_ref: np.ndarray) -> float:
    """Mean squared error over all elements."""
    y_hat = as_matrix(y_hat)
    y_ref = as_matrix(y_ref)
    if y_hat.shape != y_ref.shape:
        raise ValueError(f"shape mismatch: {y_hat.shape} vs {y_ref.shape}")
    return float(np.mean((y_hat - y_ref) ** 2))
