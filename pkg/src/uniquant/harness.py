"""Desk-scale models, seeded data, exhaustive oracles and baseline runs."""
from __future__ import annotations

import enum
import itertools
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import bcq
from .bcq import BCQParams
from .optimizer import METHODS, Block, BlockResult, OptimizerConfig, quantize_block

DEFAULT_DIMS = (64, 256, 64)


class AblationPreset(str, enum.Enum):
    FULL = "full"
    NO_REMAPPING = "no-remapping"
    NO_UNIFIED_INIT_FLEX = "no-unified-init-flex"
    NO_UNIFIED_INIT_BCQ = "no-unified-init-bcq"

    def apply(self, cfg: OptimizerConfig) -> OptimizerConfig:
        if self is AblationPreset.NO_REMAPPING:
            return replace(cfg, remap=False)
        if self is AblationPreset.NO_UNIFIED_INIT_FLEX:
            return replace(cfg, unified_init_flex=False)
        if self is AblationPreset.NO_UNIFIED_INIT_BCQ:
            return replace(cfg, unified_init_bcq=False)
        return cfg


@dataclass
class ToyBlock(Block):
    dims: tuple = ()
    seed: int = 0


def make_toy_block(dims=DEFAULT_DIMS, seed: int = 0) -> ToyBlock:
    """Layers ``dims[i] -> dims[i+1]`` with N(0, 1/fan_in) weights and small biases."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2:
        raise ValueError("need at least one layer (two dims)")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in))
        biases.append(0.1 * rng.standard_normal(fan_out))
    return ToyBlock(weights, biases, dims, seed)


def sample_inputs(count: int, dim: int, seed: int = 0, tokens: int = 16, scale: float = 1.0) -> list[np.ndarray]:
    """``count`` samples, each a ``(tokens, dim)`` matrix of N(0, scale^2) rows."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed + 1_000_003)
    return [scale * rng.standard_normal((tokens, dim)) for _ in range(count)]


# -------------------------------------------------------------------- oracles

def oracle_global_bcq(w, k: int):
    """Best BCQ fit by enumerating every code matrix (g*k <= 16).

    For each C, alpha and z_B come from one least-squares solve on ``[C, 1]``.
    Returns ``(error, BCQParams, C)``.
    """
    w = np.asarray(w, dtype=np.float64)
    g = w.shape[0]
    if g * k > 16:
        raise ValueError(f"instance too large for enumeration: g*k={g * k} > 16")
    patterns = bcq.sign_patterns(k)
    best = (np.inf, None, None)
    for rows in itertools.product(range(len(patterns)), repeat=g):
        C = patterns[list(rows)]
        A = np.hstack([C, np.ones((g, 1))])
        sol, *_ = np.linalg.lstsq(A, w, rcond=None)
        err = float(np.sum((w - A @ sol) ** 2))
        if err < best[0]:
            best = (err, BCQParams(sol[:k], sol[k]), C)
    return best


def scan_nearest(w, levels) -> np.ndarray:
    """Per-weight nearest level by an explicit scalar scan (lowest index on ties)."""
    out = np.empty(len(w), dtype=np.int64)
    for i, x in enumerate(w):
        best, best_d = 0, None
        for j, q in enumerate(levels):
            d = (x - q) * (x - q)
            if best_d is None or d < best_d:
                best, best_d = j, d
        out[i] = best
    return out


def index_change_report(trace) -> dict:
    """Histograms of ``|change in d|`` in buckets 0, 1, 2, >2.

    ``per_step`` pools consecutive pairs of the trace; ``cumulative``
    compares the first and last entries.
    """
    trace = [np.asarray(t).ravel() for t in trace]
    if not trace:
        raise ValueError("trace is empty")

    def hist(diff):
        diff = np.abs(diff)
        n = max(diff.size, 1)
        return {"0": float(np.sum(diff == 0) / n), "1": float(np.sum(diff == 1) / n),
                "2": float(np.sum(diff == 2) / n), ">2": float(np.sum(diff > 2) / n)}

    if len(trace) == 1:
        zero = hist(np.zeros(trace[0].size))
        return {"per_step": zero, "cumulative": zero, "steps": 0}
    steps = np.concatenate([b.astype(np.int64) - a.astype(np.int64) for a, b in zip(trace[:-1], trace[1:])])
    return {"per_step": hist(steps),
            "cumulative": hist(trace[-1].astype(np.int64) - trace[0].astype(np.int64)),
            "steps": len(trace) - 1}


# ------------------------------------------------------------------ baselines

@dataclass
class Report:
    method: str
    seed: int
    k: int
    group_size: int
    init_recon_error: float
    final_recon_error: float
    group_error_mean: float
    group_error_max: float
    loss_curve: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    preset: str = "full"
    code_discrepancy: int = 0
    index_changes: dict | None = None

    def to_json(self, with_curve=True) -> str:
        d = asdict(self)
        if not with_curve:
            d.pop("loss_curve")
        return json.dumps(d, sort_keys=True)


LABELS = {
    "rtn": "RTN (grid-searched clipping)",
    "alternating": "Alternating (BCQ, init only)",
    "flexround": "FlexRound-style (flex transform + uniform rounding, this optimizer)",
    "alternating-star": "Alternating* (alpha trained on block reconstruction)",
    "uniquanf": "UniQuanF",
}


def run_baseline(method: str, block: Block, data, cfg: OptimizerConfig,
                 preset: AblationPreset = AblationPreset.FULL, result_out: list | None = None) -> Report:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    preset = AblationPreset(preset)
    cfg = preset.apply(replace(cfg, method=method))
    res: BlockResult = quantize_block(block, data, data, cfg)
    if result_out is not None:
        result_out.append(res)
    errs = np.concatenate([layer.group_errors for layer in res.layers])
    return Report(
        method=method, seed=cfg.seed, k=cfg.k, group_size=cfg.group_size,
        init_recon_error=res.init_recon_error, final_recon_error=res.final_recon_error,
        group_error_mean=float(errs.mean()), group_error_max=float(errs.max()),
        loss_curve=list(res.loss_curve), wall_clock_s=res.wall_clock, preset=preset.value,
        code_discrepancy=res.code_discrepancy,
        index_changes=index_change_report(res.trace) if res.trace else None,
    )


@dataclass
class DeskSetup:
    dims: tuple = DEFAULT_DIMS
    samples: int = 32
    tokens: int = 16
    input_scale: float = 1.0


def desk_config(seed: int = 0, **overrides) -> OptimizerConfig:
    """Reference configuration for the desk-scale runs (k=3, G=30)."""
    base = dict(k=3, group_size=64, epochs=20, batch_size=1, lr_flex=0.005, lr_bcq=0.0005,
                G=30, T=15, p=2, seed=seed)
    base.update(overrides)
    return OptimizerConfig(**base)


def desk_problem(seed: int, setup: DeskSetup = DeskSetup()):
    block = make_toy_block(setup.dims, seed)
    data = sample_inputs(setup.samples, setup.dims[0], seed, setup.tokens, setup.input_scale)
    return block, data


def compare(seeds=(0, 1, 2), methods=("rtn", "alternating", "flexround", "alternating-star", "uniquanf"),
            presets=(AblationPreset.NO_REMAPPING,), setup: DeskSetup = DeskSetup(), **cfg_overrides) -> list[Report]:
    """Run the baseline matrix (plus ablation presets of UniQuanF) on every seed."""
    reports = []
    for seed in seeds:
        block, data = desk_problem(seed, setup)
        for method in methods:
            cfg = desk_config(seed, record_trace=(method == "uniquanf"), **cfg_overrides)
            reports.append(run_baseline(method, block, data, cfg))
        for preset in presets:
            cfg = desk_config(seed, **cfg_overrides)
            reports.append(run_baseline("uniquanf", block, data, cfg, preset))
    return reports


def summary_table(reports: list[Report]) -> str:
    """Mean final reconstruction error per (method, preset) across seeds."""
    rows = {}
    for r in reports:
        rows.setdefault((r.method, r.preset), []).append(r)
    lines = [f"{'method':<18}{'preset':<22}{'init':>12}{'final':>12}{'seeds':>7}"]
    for (method, preset), rs in rows.items():
        lines.append(f"{method:<18}{preset:<22}{np.mean([r.init_recon_error for r in rs]):>12.5g}"
                     f"{np.mean([r.final_recon_error for r in rs]):>12.5g}{len(rs):>7}")
    return "\n".join(lines)
