"""Acceptance criteria 1-10, one test each.

Every test records a PASS/FAIL line (printed in the terminal summary) and
asserts the same condition at the stated tolerance and time budget.
"""
import time

import numpy as np

from conftest import SEEDS, run_desk_matrix
from oracles import gradient_check
from uniquant import bcq, fileformat as ff
from uniquant.bcq import BCQParams
from uniquant.harness import oracle_global_bcq, scan_nearest
from uniquant.unified import UnifiedParams, fold, init_unified, map_full, map_local_periodic
from uniquant.uq import ClippingStrategy, FlexParams, UQParams, detransform_rtn, transform_rtn


def test_criterion_01_fold_equivalence(criterion):
    rng = np.random.default_rng(101)
    start, worst, g, n = time.perf_counter(), 0.0, 16, 1000
    for k in (2, 3, 4):
        C = bcq.sign_patterns(k)[rng.integers(0, 2**k, (n, g))]
        theta_b = BCQParams(rng.normal(size=(n, k)), rng.normal(0, 2, n))
        theta_r = UQParams(rng.uniform(1e-3, 1.0, n), rng.uniform(-4, 2**k + 4, n))
        one_step = bcq.reconstruct(C, fold(UnifiedParams(FlexParams.initial(theta_r, g), theta_b)))
        two_step = detransform_rtn(bcq.reconstruct(C, theta_b), theta_r)
        worst = max(worst, float(np.abs(one_step - two_step).max()))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-12 and elapsed < 10
    criterion(1, ok, f"max |one-step - two-step| = {worst:.2e} over 3000 instances in {elapsed:.2f}s")
    assert ok


def test_criterion_02_mapping_oracles(criterion):
    rng = np.random.default_rng(102)
    start, mismatches = time.perf_counter(), 0
    for k in (2, 3, 4):
        p = BCQParams(rng.normal(size=k), rng.normal())
        w = rng.normal(0, 2, 10_000)
        table = bcq.build_level_table(p)
        want = scan_nearest(w, table.levels)
        C, d = bcq.best_codes(w, table)
        mismatches += int(np.sum(d - 1 != want))
        mismatches += int(np.sum(bcq.reconstruct(C, p) != table.levels[want]))
        mismatches += int(np.sum(map_full(w, p).index != want))
    steps = 0
    for _ in range(100):
        k = int(rng.integers(2, 5))
        p = BCQParams(rng.normal(size=(4, k)), rng.normal(size=4))
        w = rng.normal(size=(4, 16))
        state = map_full(w, p)  # period 1: every step refreshes
        for _ in range(10):
            p = BCQParams(p.alpha + 0.1 * rng.normal(size=p.alpha.shape), p.z_b + 0.1 * rng.normal(size=4))
            w = w + 0.1 * rng.normal(size=w.shape)
            state = map_local_periodic(w, p, state, window=None)
            full = map_full(w, p)
            mismatches += int(np.sum(state.code_id != full.code_id)) + int(np.sum(state.w_tilde != full.w_tilde))
            steps += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 30
    criterion(2, ok, f"{mismatches} mismatches over 3x10^4 weights and 100 trajectories ({steps} steps) "
                     f"in {elapsed:.2f}s")
    assert ok


def test_criterion_03_alternating_monotone_and_bounded(criterion):
    rng = np.random.default_rng(103)
    start, rises, worst_rise = time.perf_counter(), 0, 0.0
    for g, k in ((16, 2), (32, 3), (64, 4)):
        res = bcq.general_alternating(rng.normal(size=(100, g)), k, T=15)
        diffs = np.diff(res.errors, axis=0)
        rises += int(np.sum(diffs > 1e-9))
        worst_rise = max(worst_rise, float(diffs.max()))
    below_oracle = above_greedy = 0
    shapes = [(4, 2), (5, 2), (8, 2), (3, 3), (5, 3), (2, 4), (4, 4), (8, 1), (12, 1), (16, 1)]
    for i in range(50):
        g, k = shapes[i % len(shapes)]
        w = rng.normal(size=g)
        res = bcq.general_alternating(w, k, T=15)
        oracle, *_ = oracle_global_bcq(w, k)
        below_oracle += float(res.error) < oracle - 1e-9
        above_greedy += float(res.error) > float(res.errors[0]) + 1e-9
    elapsed = time.perf_counter() - start
    ok = rises == 0 and below_oracle == 0 and above_greedy == 0 and elapsed < 60
    criterion(3, ok, f"{rises} rises (largest increase {worst_rise:.1e}); tiny instances: {below_oracle} below "
                     f"oracle, {above_greedy} above greedy; {elapsed:.2f}s")
    assert ok


def test_criterion_04_uq_embeds_in_bcq(criterion):
    rng = np.random.default_rng(104)
    worst = 0.0
    for k in (2, 3, 4):
        for _ in range(100):
            uq = UQParams(rng.uniform(1e-3, 2.0), rng.uniform(-4, 2**k + 4))
            got = np.sort(bcq.code_levels(bcq.embed_uq(uq, k)))
            want = uq.delta * (np.arange(2**k) - uq.zero_point)
            worst = max(worst, float(np.abs(got - want).max()))
    ok = worst < 1e-12
    criterion(4, ok, f"max level-set deviation {worst:.2e} over 300 (delta, z_U)")
    assert ok


def test_criterion_05_gradients(criterion):
    start = time.perf_counter()
    errors, kept = gradient_check(seed=5, n_in=8, n_out=8, k=3, samples=4)
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    ok = worst < 1e-4 and elapsed < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    criterion(5, ok, f"rel. err {detail}; mask keeps {kept:.0%}; {elapsed:.2f}s")
    assert ok


def _desk_means(runs):
    def mean(method, preset="full"):
        return float(np.mean([runs[s, method, preset][0].final_recon_error for s in SEEDS]))
    return {"uniquanf": mean("uniquanf"), "flexround": mean("flexround"),
            "alternating-star": mean("alternating-star"), "no-remapping": mean("uniquanf", "no-remapping")}


def test_criterion_06_desk_ordering(desk_matrix, criterion):
    runs, elapsed = desk_matrix
    m = _desk_means(runs)
    ok = (m["uniquanf"] <= m["flexround"] and m["uniquanf"] <= m["alternating-star"]
          and m["uniquanf"] <= m["no-remapping"] and elapsed < 600)
    criterion(6, ok, "mean final error " + ", ".join(f"{k} {v:.4g}" for k, v in m.items()) + f"; {elapsed:.0f}s")
    assert ok


def candidate_error(w, k, gamma, strategy, T):
    """Re-evaluate one grid candidate from scratch: clipping, alternating fit, scan mapping."""
    w_m, w_M, top = w.min(), w.max(), 2**k - 1
    delta = gamma * (w_M - w_m) / top
    zp = {"fixed-minimum": -w_m / delta, "fixed-maximum": top - w_M / delta,
          "balanced": -gamma * w_m / delta}[strategy]
    uq = UQParams(delta, zp)
    w_bar = transform_rtn(w, uq)
    fit = bcq.general_alternating(w_bar, k, T, G=30, z_b_init=top / 2)
    levels = np.sort(bcq.code_levels(fit.params))
    return float(np.sum((w - detransform_rtn(levels[scan_nearest(w_bar, levels)], uq)) ** 2))


def test_criterion_07_unified_init_argmin(criterion):
    rng = np.random.default_rng(107)
    start, violations, G, T, k = time.perf_counter(), 0, 30, 15, 3
    for strategy in ClippingStrategy:
        W = rng.normal(size=(50, 32))
        init = init_unified(W, k, G=G, T=T, strategy=strategy)
        for i in range(50):
            best = min(candidate_error(W[i], k, j / G, strategy.value, T) for j in range(1, G + 1))
            violations += float(init.error[i]) > best + 1e-12
    elapsed = time.perf_counter() - start
    ok = violations == 0 and elapsed < 60
    criterion(7, ok, f"{violations} groups above their best re-evaluated candidate (150 groups x 30) "
                     f"in {elapsed:.2f}s")
    assert ok


def test_criterion_08_format_suite(criterion):
    rng = np.random.default_rng(108)
    start, problems = time.perf_counter(), []
    for k, g, shape in [(2, 8, (4, 16)), (3, 64, (8, 200)), (4, 5, (3, 2, 9)), (3, 4096, (1, 4096))]:
        n = ff.group_count(shape, g)
        row = ff.group_widths(shape, g)
        widths = row * (n // len(row))
        codes = [np.where(rng.random((w, k)) < 0.5, 1, -1).astype(np.int8) for w in widths]
        art = ff.PackedArtifact(k, g, shape, ff.to_half(rng.normal(size=(n, k))),
                                ff.to_half(rng.normal(size=n)), codes)
        blob = ff.encode_packed(art)
        if ff.encode_packed(ff.decode_packed(blob)) != blob:
            problems.append(f"round trip k={k} g={g}")
        # payload = per group (k+1) halves plus whole code bytes; equals g*k + 16(k+1) bits when g*k % 8 == 0
        payload = len(blob) - (4 + 1 + 1 + 4 + 4 + 1 + 4 * len(shape))
        if payload != sum(2 * (k + 1) + -(-w * k // 8) for w in widths):
            problems.append(f"payload size k={k} g={g}")
        if g * k % 8 == 0 and payload * 8 != sum(w * k + 16 * (k + 1) for w in widths):
            problems.append(f"bit budget k={k} g={g}")
        want = np.concatenate([C.astype(np.float64) @ art.alpha[i].astype(np.float64) + float(art.z_b[i])
                               for i, C in enumerate(art.codes)]).reshape(shape)
        if np.abs(ff.dequantize_artifact(ff.decode_packed(blob)) - want).max() > 1e-12:
            problems.append(f"dequantize k={k} g={g}")
    elapsed = time.perf_counter() - start
    ok = not problems and elapsed < 5
    criterion(8, ok, f"{'; '.join(problems) or 'round trips byte-identical, 12352 bits/group at k=3 g=4096, '}"
                     f"dequantize matches; {elapsed:.2f}s")
    assert ok


def test_criterion_09_index_stability(desk_matrix, criterion):
    runs, _ = desk_matrix
    rep, res = runs[0, "uniquanf", "full"]
    zero = rep.index_changes["per_step"]["0"]
    ok = zero > 0.95
    criterion(9, ok, f"per-refresh bucket 0 = {zero:.4%} over {rep.index_changes['steps']} refresh intervals "
                     f"(buckets {rep.index_changes['per_step']})")
    assert ok


def test_criterion_10_determinism(desk_matrix, criterion):
    first, _ = desk_matrix
    second, _ = run_desk_matrix()
    curve_diffs = artifact_diffs = 0
    for key, (rep, res) in first.items():
        rep2, res2 = second[key]
        curve_diffs += rep.loss_curve != rep2.loss_curve or rep.final_recon_error != rep2.final_recon_error
        for a, b in zip(res.layers, res2.layers):
            artifact_diffs += ff.encode_packed(ff.artifact_from_layer(a)) != ff.encode_packed(ff.artifact_from_layer(b))
    ok = curve_diffs == 0 and artifact_diffs == 0
    criterion(10, ok, f"{len(first)} runs repeated: {curve_diffs} loss curves and {artifact_diffs} artifacts differ")
    assert ok
