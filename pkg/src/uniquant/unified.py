"""The unified quantizer: FlexRound's transform around a BCQ mapping.

    w_hat = D_R( M_B( T_F(w; delta, z_U, s, s_r); alpha, z_B ); delta, z_U )

BCQ parameters live in the transformed space. After optimization
:func:`fold` turns ``(delta, z_U, alpha, z_B)`` into plain BCQ parameters in
the original weight space so deployment needs a single reconstruction.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import bcq
from .bcq import BCQParams
from .uq import ClippingStrategy, FlexParams, QuantError, UQParams, detransform_rtn, round_half_away, transform_flex


@dataclass(frozen=True)
class UnifiedParams:
    flex: FlexParams
    bcq: BCQParams

    @property
    def uq(self) -> UQParams:
        return self.flex.uq


def adjust_clipping(w_m, w_M, gamma: float, k: int,
                    strategy: ClippingStrategy = ClippingStrategy.FIXED_MIN) -> UQParams:
    """Scale and (unrounded) zero-point for one grid candidate.

    A group with ``w_M == w_m`` gets ``delta = 1`` and ``z_U = round(-w_m)``.
    """
    if not 0 < gamma <= 1:
        raise QuantError(f"gamma must lie in (0, 1], got {gamma}")
    w_m = np.asarray(w_m, dtype=np.float64)
    w_M = np.asarray(w_M, dtype=np.float64)
    if np.any(w_M < w_m):
        raise QuantError("w_M must not be below w_m")
    degenerate = w_M == w_m
    top = 2**k - 1
    delta = np.where(degenerate, 1.0, gamma * (w_M - w_m) / top)
    strategy = ClippingStrategy(strategy)
    with np.errstate(divide="ignore", invalid="ignore"):
        if strategy is ClippingStrategy.FIXED_MIN:
            zp = -w_m / delta
        elif strategy is ClippingStrategy.FIXED_MAX:
            zp = top - w_M / delta
        else:
            zp = -gamma * w_m / delta
    zp = np.where(degenerate, round_half_away(-w_m), zp)
    return UQParams(delta, zp)


@dataclass(frozen=True)
class MappingState:
    """Per-weight mapping held between refreshes.

    ``code_id`` is the held code (row of :func:`bcq.sign_patterns`);
    ``index`` is its 0-based position in the current sorted level table, so
    ``d == index + 1``.
    """

    code_id: np.ndarray
    index: np.ndarray
    w_tilde: np.ndarray
    step: int = 0
    period: int = 1

    @property
    def d(self) -> np.ndarray:
        return self.index + 1

    def codes(self, k: int) -> np.ndarray:
        return bcq.sign_patterns(k)[self.code_id]


def map_full(w_bar, p: BCQParams, period: int = 1) -> MappingState:
    """Nearest level over the whole table for every weight."""
    if period < 1:
        raise ValueError("period must be >= 1")
    table = bcq.build_level_table(p)
    idx = bcq.nearest_index(w_bar, table.levels)
    code_id = np.take_along_axis(table.code_ids, idx, axis=-1)
    return MappingState(code_id, idx, np.take_along_axis(table.levels, idx, axis=-1), 0, period)


def map_local_periodic(w_bar, p: BCQParams, state: MappingState, window: int | None = 1) -> MappingState:
    """Advance the mapping by one optimization step.

    On steps where ``step % period == 0`` each weight may move to the nearest
    of the levels within ``window`` sorted positions of its current one
    (``window=None`` searches the whole table). Otherwise the held codes are
    kept and re-evaluated against the current parameters.
    """
    table = bcq.build_level_table(p)
    n_levels = table.levels.shape[-1]
    code_id = state.code_id
    if state.step % state.period == 0:
        current = np.take_along_axis(table.rank, code_id, axis=-1)
        if window is None or window >= n_levels:
            idx = bcq.nearest_index(w_bar, table.levels)
        else:
            offsets = np.arange(-window, window + 1)
            cand = np.clip(current[..., None] + offsets, 0, n_levels - 1)
            lead = cand.shape[:-2]
            flat = cand.reshape(lead + (-1,))
            cand_levels = np.take_along_axis(table.levels, flat, axis=-1).reshape(cand.shape)
            pick = np.argmin((np.asarray(w_bar)[..., None] - cand_levels) ** 2, axis=-1)
            idx = np.take_along_axis(cand, pick[..., None], axis=-1)[..., 0]
        code_id = np.take_along_axis(table.code_ids, idx, axis=-1)
    index = np.take_along_axis(table.rank, code_id, axis=-1)
    w_tilde = np.take_along_axis(bcq.code_levels(p), code_id, axis=-1)
    return replace(state, code_id=code_id, index=index, w_tilde=w_tilde, step=state.step + 1)


def quantize_unified(w, p: UnifiedParams, state: MappingState, window: int | None = 1):
    """One forward pass of the unified quantizer.

    Returns ``(w_hat, w_bar, new_state)``; ``w_bar`` feeds the gradient filter.
    """
    w_bar = transform_flex(w, p.flex)
    state = map_local_periodic(w_bar, p.bcq, state, window)
    return detransform_rtn(state.w_tilde, p.uq), w_bar, state


def unified_error(w, p: UnifiedParams) -> np.ndarray:
    """``||w - Q(w)||^2`` per group with a full (global nearest) mapping."""
    w_bar = transform_flex(w, p.flex)
    w_hat = detransform_rtn(map_full(w_bar, p.bcq).w_tilde, p.uq)
    return np.sum((np.asarray(w) - w_hat) ** 2, axis=-1)


@dataclass
class UnifiedInit:
    params: UnifiedParams
    error: np.ndarray
    gamma: np.ndarray


def init_unified(w, k: int, G: int = 30, T: int = 15,
                 strategy: ClippingStrategy = ClippingStrategy.FIXED_MIN) -> UnifiedInit:
    """Grid search over clipping ratios with an alternating fit per candidate.

    ``z_B`` starts at the centre ``(2^k - 1) / 2`` of the transformed range
    and is only refit when ``G == 1``. Candidates are scored by squared
    error in the original weight space.
    """
    if G < 1 or T < 1:
        raise ValueError("G and T must be >= 1")
    w = np.asarray(w, dtype=np.float64)
    lead = w.shape[:-1]
    w_m, w_M = w.min(axis=-1), w.max(axis=-1)
    z_b0 = np.full(lead, (2**k - 1) / 2)
    ones_s, ones_sr = np.ones(w.shape), np.ones(lead)

    best_err = np.full(lead, np.inf)
    best = dict(delta=np.ones(lead), zp=np.zeros(lead), alpha=np.zeros(lead + (k,)), z_b=z_b0, gamma=np.ones(lead))
    for i in range(1, G + 1):
        gamma = i / G
        uq = adjust_clipping(w_m, w_M, gamma, k, strategy)
        flex = FlexParams(uq, ones_s, ones_sr)
        alt = bcq.general_alternating(transform_flex(w, flex), k, T, G, z_b_init=z_b0)
        err = unified_error(w, UnifiedParams(flex, alt.params))
        better = err < best_err
        best_err = np.where(better, err, best_err)
        for key, val in (("delta", uq.delta), ("zp", uq.zero_point), ("z_b", alt.params.z_b), ("gamma", gamma)):
            best[key] = np.where(better, val, best[key])
        best["alpha"] = np.where(better[..., None], alt.params.alpha, best["alpha"])

    uq = UQParams(best["delta"], best["zp"])
    params = UnifiedParams(FlexParams(uq, ones_s, ones_sr), BCQParams(best["alpha"], best["z_b"]))
    return UnifiedInit(params, best_err, best["gamma"])


def fold(p: UnifiedParams) -> BCQParams:
    """Merge the detransform into BCQ: alpha* = delta*alpha, z_B* = delta*(z_B - z_U)."""
    delta = np.asarray(p.uq.delta, dtype=np.float64)
    return BCQParams(delta[..., None] * p.bcq.alpha, delta * (p.bcq.z_b - p.uq.zero_point))


def assign_codes(w, folded: BCQParams) -> np.ndarray:
    """Final binary codes: nearest folded level to each original weight."""
    C, _ = bcq.best_codes(w, bcq.build_level_table(folded))
    return C
