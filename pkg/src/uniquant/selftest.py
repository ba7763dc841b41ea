"""Quick oracle checks run by ``uniquant selftest``."""
from __future__ import annotations

import numpy as np

from . import bcq, fileformat as ff
from .bcq import BCQParams
from .harness import oracle_global_bcq, scan_nearest
from .unified import UnifiedParams, fold, init_unified, map_full, map_local_periodic, unified_error
from .uq import FlexParams, UQParams, detransform_rtn


def _fold_identity(rng):
    worst = 0.0
    for k in (2, 3, 4):
        C = bcq.sign_patterns(k)[rng.integers(0, 2**k, size=(50, 16))]
        p = BCQParams(rng.normal(size=(50, k)), rng.normal(size=50))
        uq = UQParams(rng.uniform(0.01, 2, 50), rng.normal(0, 4, 50))
        folded = fold(UnifiedParams(FlexParams.initial(uq, 16), p))
        worst = max(worst, np.abs(bcq.reconstruct(C, folded) - detransform_rtn(bcq.reconstruct(C, p), uq)).max())
    return worst < 1e-12, f"max deviation {worst:.2e}"


def _nearest_scan(rng):
    for k in (2, 3, 4):
        p = BCQParams(rng.normal(size=k), rng.normal())
        w = rng.normal(0, 2, 500)
        table = bcq.build_level_table(p)
        if not np.array_equal(bcq.nearest_index(w, table.levels), scan_nearest(w, table.levels)):
            return False, f"mismatch at k={k}"
    return True, "1500 weights"


def _local_full_window(rng):
    p = BCQParams(rng.normal(size=(4, 3)), rng.normal(size=4))
    w = rng.normal(size=(4, 16))
    state = map_full(w, p)
    for _ in range(10):
        p = BCQParams(p.alpha + 0.1 * rng.normal(size=p.alpha.shape), p.z_b + 0.1 * rng.normal(size=4))
        w = w + 0.1 * rng.normal(size=w.shape)
        state = map_local_periodic(w, p, state, window=None)
        if not np.array_equal(state.code_id, map_full(w, p).code_id):
            return False, "diverged from the full mapping"
    return True, "10 steps"


def _alternating(rng):
    for _ in range(10):
        w = rng.normal(size=8)
        res = bcq.general_alternating(w, 2, T=15)
        if np.any(np.diff(res.errors) > 1e-9):
            return False, "error increased"
        oracle, *_ = oracle_global_bcq(w, 2)
        if res.error < oracle - 1e-9:
            return False, "beat the exhaustive optimum"
    return True, "10 instances"


def _embed(rng):
    for k in (2, 3, 4):
        uq = UQParams(rng.uniform(0.01, 2), rng.normal(0, 4))
        levels = np.sort(bcq.code_levels(bcq.embed_uq(uq, k)))
        want = uq.delta * (np.arange(2**k) - uq.zero_point)
        if np.abs(levels - want).max() > 1e-12:
            return False, f"k={k}"
    return True, "k=2,3,4"


def _init_argmin(rng):
    w = rng.normal(size=(5, 16))
    init = init_unified(w, 3, G=10, T=5)
    ok = np.all(init.error <= unified_error(w, init.params) + 1e-12)
    return bool(ok), "5 groups"


def _format(rng):
    k, g = 3, 10
    shape = (3, 25)
    n = ff.group_count(shape, g)
    widths = ff.group_widths(shape, g) * 3
    codes = [np.where(rng.random((w, k)) < 0.5, 1, -1).astype(np.int8) for w in widths]
    art = ff.PackedArtifact(k, g, shape, ff.to_half(rng.normal(size=(n, k))), ff.to_half(rng.normal(size=n)), codes)
    blob = ff.encode_packed(art)
    ok = ff.encode_packed(ff.decode_packed(blob)) == blob and ff.group_bits(4096, 3) == 12352
    return ok, f"{len(blob)} bytes"


CHECKS = [
    ("fold identity", _fold_identity),
    ("nearest level vs scan", _nearest_scan),
    ("full-window local mapping", _local_full_window),
    ("alternating monotone and bounded", _alternating),
    ("uniform levels embed in BCQ", _embed),
    ("unified init argmin", _init_argmin),
    ("packed round trip", _format),
]


def run(emit=print, seed: int = 0) -> int:
    """Run every check, report one line each, return the number of failures."""
    rng = np.random.default_rng(seed)
    failures = 0
    for name, check in CHECKS:
        try:
            ok, detail = check(rng)
        except Exception as exc:  # a crash is a failed check, not a crashed selftest
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        failures += not ok
        emit(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return failures
