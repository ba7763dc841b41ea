"""Uniform quantization: RTN, the uniform mapping, FlexRound's transform,
and the AWQ / OmniQuant transform pairs.

Functions accept a single group ``(g,)`` or a batch of groups ``(n, g)``.
Per-group scalars (delta, zero-point, s_r) are 0-d or shape ``(n,)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class QuantError(ValueError):
    pass


class ClippingStrategy(str, enum.Enum):
    FIXED_MIN = "fixed-minimum"
    FIXED_MAX = "fixed-maximum"
    BALANCED = "balanced"


def round_half_away(x):
    """Round to nearest, ties away from zero (exact, no ``+0.5`` drift)."""
    x = np.asarray(x, dtype=np.float64)
    t = np.trunc(x)
    return t + np.where(np.abs(x - t) >= 0.5, np.sign(x), 0.0)


def _col(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)[..., None]


def _check_bits(k: int):
    if k < 2:
        raise QuantError(f"unsupported bit-width k={k}; need k >= 2")


@dataclass(frozen=True)
class UQParams:
    delta: np.ndarray | float
    zero_point: np.ndarray | float

    def __post_init__(self):
        if np.any(np.asarray(self.delta) <= 0):
            raise QuantError("delta must be positive")


@dataclass(frozen=True)
class FlexParams:
    uq: UQParams
    s: np.ndarray
    s_r: np.ndarray | float

    @classmethod
    def initial(cls, uq: UQParams, g: int):
        """s = 1, s_r = 1 for the batch shape of ``uq``."""
        lead = np.shape(uq.delta)
        return cls(uq, np.ones(lead + (g,)), np.ones(lead))


@dataclass(frozen=True)
class ClipCandidate:
    w_min_c: float
    w_max_c: float
    gamma: float = 1.0

    def __post_init__(self):
        if not np.all(np.asarray(self.w_min_c) < np.asarray(self.w_max_c)):
            raise QuantError("clip range must satisfy w_min_c < w_max_c")


@dataclass(frozen=True)
class AWQTransformParams:
    delta_a: float
    z_a: float
    s_a: np.ndarray


@dataclass(frozen=True)
class OmniTransformParams:
    beta: float
    gamma_o: float


def derive_rtn_params(clip: ClipCandidate, k: int) -> UQParams:
    _check_bits(k)
    delta = (np.asarray(clip.w_max_c, dtype=np.float64) - clip.w_min_c) / (2**k - 1)
    return UQParams(delta, round_half_away(-np.asarray(clip.w_min_c) / delta))


def clip_range(w_min, w_max, gamma, strategy: ClippingStrategy):
    """Clipping endpoints for scale ratio ``gamma`` under ``strategy``."""
    strategy = ClippingStrategy(strategy)
    span = gamma * (w_max - w_min)
    if strategy is ClippingStrategy.FIXED_MIN:
        return w_min, w_min + span
    if strategy is ClippingStrategy.FIXED_MAX:
        return w_max - span, w_max
    return gamma * w_min, gamma * w_max


def map_uniform(w_bar, k: int) -> np.ndarray:
    _check_bits(k)
    return np.clip(round_half_away(w_bar), 0, 2**k - 1)


def transform_rtn(w, p: UQParams) -> np.ndarray:
    return np.asarray(w, dtype=np.float64) / _col(p.delta) + _col(p.zero_point)


def detransform_rtn(w_tilde, p: UQParams) -> np.ndarray:
    return _col(p.delta) * (np.asarray(w_tilde, dtype=np.float64) - _col(p.zero_point))


def transform_flex(w, p: FlexParams) -> np.ndarray:
    scale = np.asarray(p.s, dtype=np.float64) * _col(p.s_r)
    if np.any(scale <= 0):
        raise QuantError("element-wise and row-wise scales must be positive")
    return np.asarray(w, dtype=np.float64) / (_col(p.uq.delta) * scale) + _col(p.uq.zero_point)


@dataclass
class RTNResult:
    mapped: np.ndarray
    params: UQParams
    error: np.ndarray | float


def quantize_rtn(w, k: int, grid_iters: int = 100,
                 strategy: ClippingStrategy = ClippingStrategy.FIXED_MIN) -> RTNResult:
    """Grid-search the clipping range and round to nearest.

    Candidates are ``gamma = 1/G, 2/G, ..., 1``; the first candidate with the
    strictly lowest squared error wins.
    """
    _check_bits(k)
    if grid_iters < 1:
        raise QuantError("grid_iters must be >= 1")
    w = np.asarray(w, dtype=np.float64)
    single = w.ndim == 1
    wb = w[None] if single else w
    w_min = wb.min(axis=-1, keepdims=True)
    w_max = wb.max(axis=-1, keepdims=True)
    degenerate = w_max == w_min

    best_err = np.full(w_min.shape, np.inf)
    best_delta = np.ones_like(w_min)
    best_zp = np.zeros_like(w_min)
    for i in range(1, grid_iters + 1):
        gamma = i / grid_iters
        lo, hi = clip_range(w_min, w_max, gamma, strategy)
        delta = np.where(degenerate, 1.0, (hi - lo) / (2**k - 1))
        zp = round_half_away(-np.where(degenerate, w_min, lo) / delta)
        mapped = map_uniform(wb / delta + zp, k)
        err = np.sum((wb - delta * (mapped - zp)) ** 2, axis=-1, keepdims=True)
        better = err < best_err
        best_err = np.where(better, err, best_err)
        best_delta = np.where(better, delta, best_delta)
        best_zp = np.where(better, zp, best_zp)

    squeeze = (lambda a: a[0, 0]) if single else (lambda a: a[:, 0])
    params = UQParams(squeeze(best_delta), squeeze(best_zp))
    mapped = map_uniform(transform_rtn(w, params), k)
    return RTNResult(mapped, params, squeeze(best_err))


def transform_awq(w, p: AWQTransformParams) -> np.ndarray:
    return np.asarray(w, dtype=np.float64) * p.s_a / p.delta_a + p.z_a


def detransform_awq(w_tilde, p: AWQTransformParams) -> np.ndarray:
    return p.delta_a * (np.asarray(w_tilde, dtype=np.float64) - p.z_a) / p.s_a


def omni_params(w_min: float, w_max: float, k: int, p: OmniTransformParams):
    """Scale and zero-point implied by learnable clipping factors beta, gamma."""
    _check_bits(k)
    hi, lo = p.gamma_o * w_max, p.beta * w_min
    if not hi > lo:
        raise QuantError(f"degenerate clipping range: gamma*w_max={hi} <= beta*w_min={lo}")
    delta = (hi - lo) / (2**k - 1)
    return delta, -float(round_half_away(lo / delta))


def transform_omni(w, w_min, w_max, k, p: OmniTransformParams) -> np.ndarray:
    delta, zp = omni_params(w_min, w_max, k, p)
    return np.asarray(w, dtype=np.float64) / delta + zp


def detransform_omni(w_tilde, w_min, w_max, k, p: OmniTransformParams) -> np.ndarray:
    delta, zp = omni_params(w_min, w_max, k, p)
    return delta * (np.asarray(w_tilde, dtype=np.float64) - zp)
