"""Uniform affine fake quantization.

Simulates integer quantization in float64 via quantize-dequantize round
trips: Q(x) = (clamp(round(x/S) + z, q_min, q_max) - z) * S.  Rounding is
half-away-from-zero so independent implementations agree bit-exactly.

``bits=None`` is the identity-quantizer sentinel used by exact-cancellation
tests: fake_quantize then returns its input untouched.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .tensor import as_matrix


class Granularity(enum.Enum):
    PER_TENSOR = "per_tensor"
    PER_CHANNEL = "per_channel"  # one group per column
    PER_TOKEN = "per_token"      # one group per row


@dataclass(frozen=True)
class QuantSpec:
    bits: int | None
    symmetric: bool
    granularity: Granularity

    def __post_init__(self):
        if self.bits is not None and not 2 <= self.bits <= 16:
            raise ValueError(f"bits must be in [2, 16] or None, got {self.bits}")

    @property
    def is_identity(self) -> bool:
        return self.bits is None

    @property
    def q_min(self) -> int:
        if self.symmetric:
            return -(2 ** (self.bits - 1)) + 1
        return 0

    @property
    def q_max(self) -> int:
        if self.symmetric:
            return 2 ** (self.bits - 1) - 1
        return 2**self.bits - 1

    def with_floor(self, min_bits: int) -> "QuantSpec":
        """Raise the bit width to ``min_bits`` (identity stays identity)."""
        if self.bits is None or self.bits >= min_bits:
            return self
        return replace(self, bits=min_bits)


@dataclass(frozen=True)
class QuantParams:
    """Per-group scale/zero-point, one entry per group along the granularity axis."""

    scales: np.ndarray
    zero_points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "scales", np.asarray(self.scales, dtype=np.float64))
        object.__setattr__(
            self, "zero_points", np.asarray(self.zero_points, dtype=np.int64)
        )
        if np.any(self.scales <= 0):
            raise ValueError("scales must be positive")


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _group_count(shape: tuple[int, int], granularity: Granularity) -> int:
    if granularity is Granularity.PER_TENSOR:
        return 1
    if granularity is Granularity.PER_CHANNEL:
        return shape[1]
    return shape[0]


def _reduce(m: np.ndarray, granularity: Granularity, fn) -> np.ndarray:
    if granularity is Granularity.PER_TENSOR:
        return np.atleast_1d(fn(m))
    axis = 0 if granularity is Granularity.PER_CHANNEL else 1
    return fn(m, axis=axis)


def _broadcast(v: np.ndarray, granularity: Granularity) -> np.ndarray:
    # Shape group values so they broadcast over the full matrix.
    if granularity is Granularity.PER_TENSOR:
        return v.reshape(1, 1)
    if granularity is Granularity.PER_CHANNEL:
        return v.reshape(1, -1)
    return v.reshape(-1, 1)


def compute_params(m: np.ndarray, spec: QuantSpec) -> QuantParams:
    """Derive per-group scale/zero-point from the data range.

    Degenerate groups (constant, including all-zero) get parameters that
    reconstruct the constant exactly.
    """
    m = as_matrix(m)
    g = spec.granularity
    if spec.is_identity:
        n = _group_count(m.shape, g)
        return QuantParams(np.ones(n), np.zeros(n, dtype=np.int64))
    if m.size == 0:
        n = _group_count(m.shape, g)
        return QuantParams(np.ones(n), np.zeros(n, dtype=np.int64))
    q_min, q_max = spec.q_min, spec.q_max
    if spec.symmetric:
        absmax = _reduce(np.abs(m), g, np.max)
        scales = np.where(absmax > 0, absmax / q_max, 1.0)
        zps = np.zeros_like(scales, dtype=np.int64)
        return QuantParams(scales, zps)
    lo = _reduce(m, g, np.min)
    hi = _reduce(m, g, np.max)
    span = hi - lo
    # Constant groups: widen the range to include zero so the constant maps
    # onto an exact grid point; all-zero groups fall back to S=1, z=0.
    const = span == 0
    lo = np.where(const, np.minimum(lo, 0.0), lo)
    hi = np.where(const, np.maximum(hi, 0.0), hi)
    span = hi - lo
    scales = np.where(span > 0, span / (q_max - q_min), 1.0)
    zps = np.clip(round_half_away(-lo / scales), q_min, q_max).astype(np.int64)
    return QuantParams(scales, zps)


def _check_groups(m: np.ndarray, params: QuantParams, spec: QuantSpec) -> None:
    expected = _group_count(m.shape, spec.granularity)
    if params.scales.shape[0] != expected or params.zero_points.shape[0] != expected:
        raise ValueError(
            f"params have {params.scales.shape[0]} groups, expected {expected}"
        )


def fake_quantize(m: np.ndarray, params: QuantParams, spec: QuantSpec) -> np.ndarray:
    """Quantize-dequantize per group; identity specs return the input copy."""
    m = as_matrix(m)
    if spec.is_identity:
        return m.copy()
    _check_groups(m, params, spec)
    s = _broadcast(params.scales, spec.granularity)
    z = _broadcast(params.zero_points.astype(np.float64), spec.granularity)
    q = np.clip(round_half_away(m / s) + z, spec.q_min, spec.q_max)
    return (q - z) * s


def clamp_mask(m: np.ndarray, params: QuantParams, spec: QuantSpec) -> np.ndarray:
    """Elementwise straight-through mask: 1 where round(x/S)+z stays in range."""
    m = as_matrix(m)
    if spec.is_identity:
        return np.ones_like(m)
    _check_groups(m, params, spec)
    s = _broadcast(params.scales, spec.granularity)
    z = _broadcast(params.zero_points.astype(np.float64), spec.granularity)
    q = round_half_away(m / s) + z
    return ((q >= spec.q_min) & (q <= spec.q_max)).astype(np.float64)


def quantize(m: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Convenience: fresh params from the data, then fake-quantize."""
    return fake_quantize(m, compute_params(m, spec), spec)


def quant_error(m: np.ndarray, params: QuantParams, spec: QuantSpec) -> np.ndarray:
    """Quantization error operator: M - Q(M)."""
    return as_matrix(m) - fake_quantize(m, params, spec)
