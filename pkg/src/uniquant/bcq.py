"""Binary-coding quantization: levels ``z_B + sum_j c_j * alpha_j``.

As in :mod:`uniquant.uq`, everything works on one group ``(g,)`` or a batch
``(n, g)``. Batched ``alpha`` is ``(n, k)`` and ``z_b`` is ``(n,)``.
"""
from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field

import numpy as np

from .uq import UQParams


class SingularCodesError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class BCQParams:
    alpha: np.ndarray
    z_b: np.ndarray | float

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=np.float64))
        object.__setattr__(self, "z_b", np.asarray(self.z_b, dtype=np.float64))

    @property
    def k(self) -> int:
        return self.alpha.shape[-1]


@functools.lru_cache(maxsize=None)
def sign_patterns(k: int) -> np.ndarray:
    """All ``2**k`` codes, lexicographic with +1 ordered before -1."""
    arr = np.array(list(itertools.product((1.0, -1.0), repeat=k)))
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LevelTable:
    """Sorted levels; ``codes[..., i, :]`` reconstructs ``levels[..., i]``.

    ``code_ids`` are row indices into :func:`sign_patterns` and ``rank`` is
    the inverse permutation (code id -> sorted position).
    """

    levels: np.ndarray
    codes: np.ndarray
    code_ids: np.ndarray
    rank: np.ndarray = field(repr=False)


def _combine(C, alpha, z_b) -> np.ndarray:
    """``z_b + sum_j C[..., j] * alpha_j`` summed in a fixed order, so table
    lookups and reconstructions agree bit for bit."""
    acc = np.zeros(np.broadcast_shapes(C.shape[:-1], alpha.shape[:-1] + (1,)))
    for j in range(C.shape[-1]):
        acc = acc + C[..., j] * alpha[..., j, None]
    return acc + z_b[..., None]


def code_levels(p: BCQParams) -> np.ndarray:
    """Levels in code-enumeration order, shape ``(..., 2**k)``."""
    return _combine(sign_patterns(p.k), p.alpha, p.z_b)


def build_level_table(p: BCQParams) -> LevelTable:
    raw = code_levels(p)
    order = np.argsort(raw, axis=-1, kind="stable")
    levels = np.take_along_axis(raw, order, axis=-1)
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(raw.shape[-1]), raw.shape), axis=-1)
    return LevelTable(levels, sign_patterns(p.k)[order], order, rank)


def nearest_index(w, levels) -> np.ndarray:
    """0-based sorted-level index of the nearest level; ties go to the lower index."""
    w = np.asarray(w, dtype=np.float64)
    dist = (w[..., :, None] - levels[..., None, :]) ** 2
    return np.argmin(dist, axis=-1)


def gather_codes(codes, idx) -> np.ndarray:
    return np.take_along_axis(codes, idx[..., None], axis=-2)


def best_codes(w, table: LevelTable):
    """Per-weight nearest level. Returns ``(C, d)`` with ``d`` 1-based."""
    idx = nearest_index(w, table.levels)
    return gather_codes(table.codes, idx), idx + 1


def reconstruct(C, p: BCQParams) -> np.ndarray:
    return _combine(np.asarray(C, dtype=np.float64), p.alpha, p.z_b)


def greedy_init(w, k: int, z_b=0.0):
    """Residual binarization, one bit at a time; sign(0) is +1."""
    r = np.asarray(w, dtype=np.float64) - np.asarray(z_b, dtype=np.float64)[..., None]
    alphas, cols = [], []
    for _ in range(k):
        a = np.mean(np.abs(r), axis=-1)
        c = np.where(r >= 0, 1.0, -1.0)
        r = r - a[..., None] * c
        alphas.append(a)
        cols.append(c)
    return np.stack(alphas, axis=-1), np.stack(cols, axis=-1)


def lsq_alpha(w, C, z_b, fallback=None):
    """Least-squares scales for fixed codes.

    Groups whose ``C^T C`` is singular take their row from ``fallback``; with
    no fallback a :class:`SingularCodesError` is raised. Returns
    ``(alpha, singular_mask)``.
    """
    C = np.asarray(C, dtype=np.float64)
    target = np.asarray(w, dtype=np.float64) - np.asarray(z_b, dtype=np.float64)[..., None]
    gram = np.einsum("...gk,...gj->...kj", C, C)
    rhs = np.einsum("...gk,...g->...k", C, target)
    singular = np.linalg.matrix_rank(gram) < C.shape[-1]
    if np.any(singular) and fallback is None:
        raise SingularCodesError("C^T C is singular")
    safe = np.where(singular[..., None, None], np.eye(C.shape[-1]), gram)
    alpha = np.linalg.solve(safe, rhs[..., None])[..., 0]
    if np.any(singular):
        alpha = np.where(singular[..., None], fallback, alpha)
    return alpha, singular


def update_zb(w, C, alpha) -> np.ndarray:
    return np.mean(np.asarray(w, dtype=np.float64) - np.einsum("...gk,...k->...g", C, alpha), axis=-1)


def bcq_error(w, C, p: BCQParams) -> np.ndarray:
    return np.sum((np.asarray(w, dtype=np.float64) - reconstruct(C, p)) ** 2, axis=-1)


@dataclass
class AlternatingResult:
    params: BCQParams
    codes: np.ndarray
    errors: np.ndarray  # (T + 1, ...) greedy error first, then one per iteration
    singular_fallbacks: int = 0

    @property
    def error(self):
        return self.errors[-1]


def general_alternating(w, k: int, T: int = 15, G: int = 1, z_b_init=0.0,
                        update_zb_flag: bool | None = None) -> AlternatingResult:
    """Greedy start, then T rounds of {alpha by least squares, codes, z_B}.

    ``z_B`` is refit only when ``G == 1`` unless ``update_zb_flag`` overrides.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    w = np.asarray(w, dtype=np.float64)
    learn_zb = (G == 1) if update_zb_flag is None else update_zb_flag
    z_b = np.broadcast_to(np.asarray(z_b_init, dtype=np.float64), w.shape[:-1]).copy()
    alpha, C = greedy_init(w, k, z_b)
    errors = [bcq_error(w, C, BCQParams(alpha, z_b))]
    fallbacks = 0
    for _ in range(T):
        alpha, singular = lsq_alpha(w, C, z_b, fallback=alpha)
        fallbacks += int(np.sum(singular))
        C, _ = best_codes(w, build_level_table(BCQParams(alpha, z_b)))
        if learn_zb:
            z_b = update_zb(w, C, alpha)
        errors.append(bcq_error(w, C, BCQParams(alpha, z_b)))
    return AlternatingResult(BCQParams(alpha, z_b), C, np.stack(errors), fallbacks)


def embed_uq(p: UQParams, k: int) -> BCQParams:
    """BCQ parameters whose levels are exactly ``delta * (m - z_U)``, m = 0..2^k-1."""
    delta = np.asarray(p.delta, dtype=np.float64)
    zp = np.asarray(p.zero_point, dtype=np.float64)
    alpha = delta[..., None] * 2.0 ** (k - 2 - np.arange(k))
    return BCQParams(alpha, delta * ((2**k - 1) / 2 - zp))


def uq_codes(mapped, k: int) -> np.ndarray:
    """Codes matching :func:`embed_uq` for integer levels ``mapped``; bit 0 is the MSB."""
    m = np.asarray(mapped).astype(np.int64)
    bits = (m[..., None] >> (k - 1 - np.arange(k))) & 1
    return np.where(bits == 1, 1.0, -1.0)
