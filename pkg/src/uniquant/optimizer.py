"""Block-wise reconstruction: train quantization parameters so a quantized
block reproduces the outputs of the original one, then fold and emit codes.

Every weight matrix is cut into groups of ``group_size`` consecutive entries
along each row; a short tail at the end of a row becomes its own group.
Groups of equal width are handled together as one *bank*.
"""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import bcq, numerics as nx
from .bcq import BCQParams
from .unified import MappingState, UnifiedParams, assign_codes, fold, init_unified, map_full, map_local_periodic
from .uq import ClippingStrategy, FlexParams, UQParams, map_uniform, quantize_rtn, transform_flex

log = logging.getLogger(__name__)

METHODS = ("rtn", "alternating", "flexround", "alternating-star", "uniquanf")
TRAINABLE = {"flexround", "alternating-star", "uniquanf"}
NO_REMAP_PERIOD = 2**62


class OptimizationError(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    k: int = 3
    group_size: int = 64
    epochs: int = 20
    batch_size: int = 1
    lr_flex: float = 0.005
    lr_bcq: float = 0.0005
    G: int = 30
    T: int = 15
    p: int = 2
    strategy: ClippingStrategy = ClippingStrategy.FIXED_MIN
    seed: int = 0
    method: str = "uniquanf"
    # ablations / baseline knobs
    remap: bool = True
    unified_init_flex: bool = True
    unified_init_bcq: bool = True
    window: int | None = 1
    rtn_grid: int = 100
    alt_learn_zb: bool = False
    record_trace: bool = False
    # "flex": final codes for w / (s * s_r), keeping flexible mappings; "raw": for w itself
    final_codes: str = "flex"
    optimizer: str = "sgd"
    # learn log(delta) instead of delta, which keeps the scale positive
    log_delta: bool = True
    # deploy the parameters with the lowest block error seen at init or an epoch end
    keep_best: bool = True

    def __post_init__(self):
        self.strategy = ClippingStrategy(self.strategy)
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        for name in ("k", "group_size", "batch_size", "G", "T", "p"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_flex <= 0 or self.lr_bcq <= 0:
            raise ValueError("learning rates must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.final_codes not in ("flex", "raw"):
            raise ValueError("final_codes must be 'flex' or 'raw'")


def thread_count() -> int:
    n = int(os.environ.get("UNIQUANT_THREADS", "0") or 0)
    return n if n > 0 else (os.cpu_count() or 1)


# --------------------------------------------------------------------- layout

class GroupLayout:
    def __init__(self, shape, group_size: int):
        if len(shape) != 2:
            raise ValueError(f"expected a 2-D weight matrix, got shape {shape}")
        self.shape = tuple(shape)
        self.group_size = group_size
        rows, cols = shape
        full = cols // group_size * group_size
        self.banks = []
        if full:
            self.banks.append((0, full, group_size))
        if full < cols:
            self.banks.append((full, cols, cols - full))

    @property
    def n_groups(self) -> int:
        return sum(self.shape[0] * (hi - lo) // width for lo, hi, width in self.banks)

    def split(self, W) -> list[np.ndarray]:
        W = np.asarray(W, dtype=np.float64)
        return [W[:, lo:hi].reshape(-1, width) for lo, hi, width in self.banks]

    def join(self, parts) -> np.ndarray:
        rows = self.shape[0]
        return np.concatenate([np.asarray(p).reshape(rows, hi - lo) for p, (lo, hi, _) in zip(parts, self.banks)], axis=1)

    def join_nodes(self, parts: list[nx.Node]) -> nx.Node:
        rows = self.shape[0]
        return nx.concat_cols([nx.reshape(p, (rows, hi - lo)) for p, (lo, hi, _) in zip(parts, self.banks)])


# ---------------------------------------------------------------------- rules

class SGD:
    """Plain SGD: ``x -= lr * grad``."""

    def __init__(self):
        pass

    def delta(self, key, grad, lr):
        return lr * grad


class Adam:
    """Adam with bias correction, one moment pair per parameter array."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, {}

    def delta(self, key, grad, lr):
        m = self.beta1 * self.m.get(key, 0.0) + (1 - self.beta1) * grad
        v = self.beta2 * self.v.get(key, 0.0) + (1 - self.beta2) * grad * grad
        t = self.t.get(key, 0) + 1
        self.m[key], self.v[key], self.t[key] = m, v, t
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        return lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_rule(name: str):
    return {"sgd": SGD, "adam": Adam}[name]()


# ---------------------------------------------------------------------- banks

class Bank:
    """Quantization state for a stack of equal-width groups ``w`` (n, g).

    Learnable arrays live in ``values``; ``families`` names the learning
    rate each one uses (``"flex"`` or ``"bcq"``). Per-group scalars are
    stored as ``(n,)`` and enter the graph as ``(n, 1)`` columns.
    """

    trainable = False
    families: dict = {}

    def __init__(self, w, cfg: OptimizerConfig):
        self.w = np.asarray(w, dtype=np.float64)
        self.cfg = cfg
        self.n, self.g = self.w.shape
        self.values: dict[str, np.ndarray] = {}
        self._nodes: dict[str, nx.Node] = {}

    def node(self, name) -> nx.Node:
        v = self.values[name]
        node = nx.parameter(v[:, None] if v.ndim == 1 else v)
        self._nodes[name] = node
        return node

    def forward(self) -> nx.Node:
        w_hat, _ = self.deploy_weights()
        return nx.constant(w_hat)

    def gradients(self) -> dict:
        """Gradients from the last backward pass, shaped like ``values``."""
        return {name: node.grad.reshape(self.values[name].shape)
                for name, node in self._nodes.items() if node.grad is not None}

    def apply(self, rule, lrs: dict):
        """Step every learnable array from the gradients of the last backward pass."""
        new = {}
        for name, grad in self.gradients().items():
            if not np.all(np.isfinite(grad)):
                raise OptimizationError(f"non-finite gradient for {name}")
            new[name] = self.values[name] - rule.delta((id(self), name), grad, lrs[self.families[name]])
        if "delta" in new and np.any(new["delta"] <= 0):
            raise OptimizationError("scale factor delta left the positive range; lower lr_flex or rescale inputs")
        self.values.update(new)
        self._nodes = {}

    def snapshot(self):
        return {k: v.copy() for k, v in self.values.items()}, getattr(self, "_state", None)

    def restore(self, snap):
        values, state = snap
        self.values = {k: v.copy() for k, v in values.items()}
        if state is not None:
            self._state = state

    def deploy(self) -> tuple[np.ndarray, BCQParams]:
        raise NotImplementedError

    def deploy_weights(self):
        codes, params = self.deploy()
        return bcq.reconstruct(codes, params), (codes, params)

    @property
    def state(self) -> MappingState | None:
        return None


class RTNBank(Bank):
    def __init__(self, w, cfg):
        super().__init__(w, cfg)
        self.rtn = quantize_rtn(self.w, cfg.k, cfg.rtn_grid, cfg.strategy)

    def deploy(self):
        return bcq.uq_codes(self.rtn.mapped, self.cfg.k), bcq.embed_uq(self.rtn.params, self.cfg.k)


class AlternatingBank(Bank):
    """BCQ directly on the weights; with ``trainable`` only alpha learns."""

    families = {"alpha": "bcq"}

    def __init__(self, w, cfg, trainable=False):
        super().__init__(w, cfg)
        self.trainable = trainable
        res = bcq.general_alternating(self.w, cfg.k, cfg.T, G=1, z_b_init=0.0, update_zb_flag=cfg.alt_learn_zb)
        self.values["alpha"] = res.params.alpha.copy()
        self.z_b = res.params.z_b.copy()
        period = cfg.p if cfg.remap else NO_REMAP_PERIOD
        self._state = map_full(self.w, res.params, period)

    @property
    def params(self):
        return BCQParams(self.values["alpha"], self.z_b)

    @property
    def state(self):
        return self._state

    def forward(self):
        if not self.trainable:
            return super().forward()
        self._state = map_local_periodic(self.w, self.params, self._state, self.cfg.window)
        zb = nx.expand(nx.constant(self.z_b[:, None]), (self.n, self.g))
        return nx.code_matvec(self._state.codes(self.cfg.k), self.node("alpha")) + zb

    def deploy(self):
        params = self.params
        C, _ = bcq.best_codes(self.w, bcq.build_level_table(params))
        return C, params


class FlexBank(Bank):
    """FlexRound-style baseline: learnable transform, uniform rounding, STE."""

    trainable = True
    families = {"delta": "flex", "log_delta": "flex", "zero_point": "flex", "log_s": "flex", "log_sr": "flex"}

    def __init__(self, w, cfg):
        super().__init__(w, cfg)
        rtn = quantize_rtn(self.w, cfg.k, cfg.G, cfg.strategy)
        self._init_flex(rtn.params)

    def _init_flex(self, uq: UQParams):
        delta = np.asarray(uq.delta, dtype=np.float64).copy()
        if self.cfg.log_delta:
            self.values["log_delta"] = np.log(delta)
        else:
            self.values["delta"] = delta
        self.values["zero_point"] = np.asarray(uq.zero_point, dtype=np.float64).copy()
        self.values["log_s"] = np.zeros_like(self.w)
        self.values["log_sr"] = np.zeros(self.n)

    @property
    def uq(self) -> UQParams:
        delta = np.exp(self.values["log_delta"]) if self.cfg.log_delta else self.values["delta"]
        return UQParams(delta, self.values["zero_point"])

    @property
    def flex(self) -> FlexParams:
        return FlexParams(self.uq, np.exp(self.values["log_s"]), np.exp(self.values["log_sr"]))

    def _transform_nodes(self):
        shape = (self.n, self.g)
        d = nx.exp(self.node("log_delta")) if self.cfg.log_delta else self.node("delta")
        d = nx.expand(d, shape)
        zu = nx.expand(self.node("zero_point"), shape)
        s = nx.exp(self.node("log_s"))
        s_r = nx.expand(nx.exp(self.node("log_sr")), shape)
        return nx.constant(self.w) / (d * s * s_r) + zu, d, zu

    def forward(self):
        w_bar, d, zu = self._transform_nodes()
        top = 2**self.cfg.k - 1
        mask = (w_bar.value >= -0.5) & (w_bar.value <= top + 0.5)
        w_tilde = nx.ste_passthrough(map_uniform(w_bar.value, self.cfg.k), w_bar, mask)
        return d * (w_tilde - zu)

    def deploy(self):
        mapped = map_uniform(transform_flex(self.w, self.flex), self.cfg.k)
        return bcq.uq_codes(mapped, self.cfg.k), bcq.embed_uq(self.uq, self.cfg.k)


class UnifiedBank(FlexBank):
    """The unified quantizer with local and periodic remapping."""

    families = dict(FlexBank.families, alpha="bcq", z_b="bcq")

    def __init__(self, w, cfg):
        Bank.__init__(self, w, cfg)
        k = cfg.k
        init = init_unified(self.w, k, cfg.G, cfg.T, cfg.strategy)
        self.init_error = init.error
        p = init.params
        self._init_flex(p.uq if cfg.unified_init_flex else UQParams(np.ones(self.n), np.zeros(self.n)))
        if cfg.unified_init_bcq:
            bp = p.bcq
        else:
            # uniformly spaced levels 0..2^k-1 in the transformed space
            bp = bcq.embed_uq(UQParams(np.ones(self.n), np.zeros(self.n)), k)
        self.values["alpha"] = bp.alpha.copy()
        self.values["z_b"] = np.asarray(bp.z_b, dtype=np.float64).copy()
        period = cfg.p if cfg.remap else NO_REMAP_PERIOD
        self._state = map_full(transform_flex(self.w, self.flex), self.bcq_params, period)
        self.filtered_fraction = 0.0

    @property
    def bcq_params(self) -> BCQParams:
        return BCQParams(self.values["alpha"], self.values["z_b"])

    @property
    def params(self) -> UnifiedParams:
        return UnifiedParams(self.flex, self.bcq_params)

    @property
    def state(self):
        return self._state

    def forward(self):
        shape = (self.n, self.g)
        w_bar, d, zu = self._transform_nodes()
        self._state = map_local_periodic(w_bar.value, self.bcq_params, self._state, self.cfg.window)
        mask = gradient_filter_mask(w_bar.value, self._state.w_tilde, self.values["alpha"])
        self.filtered_fraction = 1.0 - float(mask.mean())
        direct = nx.code_matvec(self._state.codes(self.cfg.k), self.node("alpha"))
        direct = direct + nx.expand(self.node("z_b"), shape)
        w_tilde = direct + nx.ste_passthrough(np.zeros(shape), w_bar, mask)
        return d * (w_tilde - zu)

    def code_target(self, final_codes=None) -> np.ndarray:
        """Weights the final codes are fit to.

        Since ``D_R(T_F(w)) = w / (s * s_r)``, fitting the folded levels to
        that keeps the mapping the scales learned; ``"raw"`` uses ``w``.
        """
        if (final_codes or self.cfg.final_codes) == "raw":
            return self.w
        f = self.flex
        return self.w / (f.s * f.s_r[:, None])

    def deploy(self):
        folded = fold(self.params)
        return assign_codes(self.code_target(), folded), folded

    def code_discrepancy(self) -> int:
        """Weights whose final code differs from the last training-time code."""
        C, _ = self.deploy()
        return int(np.sum(np.any(C != self._state.codes(self.cfg.k), axis=-1)))


def gradient_filter_mask(w_bar, w_tilde, alpha) -> np.ndarray:
    """1 where ``|w_bar - w_tilde| <= min_j |alpha_j|`` (per group), else 0."""
    tau = np.min(np.abs(np.asarray(alpha, dtype=np.float64)), axis=-1)
    return (np.abs(np.asarray(w_bar) - np.asarray(w_tilde)) <= tau[..., None]).astype(np.float64)


def make_bank(w, cfg: OptimizerConfig) -> Bank:
    if cfg.method == "rtn":
        return RTNBank(w, cfg)
    if cfg.method == "alternating":
        return AlternatingBank(w, cfg, trainable=False)
    if cfg.method == "alternating-star":
        return AlternatingBank(w, cfg, trainable=True)
    if cfg.method == "flexround":
        return FlexBank(w, cfg)
    return UnifiedBank(w, cfg)


# ---------------------------------------------------------------------- block

@dataclass
class Block:
    """Affine layers with GELU between them (not after the last)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def forward(self, x, weights=None) -> np.ndarray:
        weights = self.weights if weights is None else weights
        h = np.asarray(x, dtype=np.float64)
        for i, (W, b) in enumerate(zip(weights, self.biases)):
            h = h @ np.asarray(W).T + b
            if i < len(weights) - 1:
                h = nx.gelu_value(h)
        return h

    def forward_nodes(self, x: nx.Node, weights: list[nx.Node]) -> nx.Node:
        h = x
        for i, (W, b) in enumerate(zip(weights, self.biases)):
            h = nx.affine(h, W, nx.constant(b))
            if i < len(weights) - 1:
                h = nx.gelu(h)
        return h


@dataclass
class GroupQuantResult:
    codes: np.ndarray
    folded: BCQParams
    final_error: float
    loss_curve: list[float]


@dataclass
class LayerResult:
    layout: GroupLayout
    banks: list[tuple[np.ndarray, BCQParams]]  # (codes (n, g, k), folded params) per bank
    group_errors: np.ndarray

    def dequantize(self) -> np.ndarray:
        return self.layout.join([bcq.reconstruct(C, p) for C, p in self.banks])


@dataclass
class BlockResult:
    layers: list[LayerResult]
    loss_curve: list[float]
    init_recon_error: float
    final_recon_error: float
    trace: list[np.ndarray] = field(default_factory=list)
    refresh_steps: list[int] = field(default_factory=list)
    wall_clock: float = 0.0
    code_discrepancy: int = 0
    epoch_errors: list[float] = field(default_factory=list)  # deployed error at init and each epoch end
    best_epoch: int = 0

    def quantized_weights(self) -> list[np.ndarray]:
        return [layer.dequantize() for layer in self.layers]

    def groups(self):
        for layer in self.layers:
            i = 0
            for C, p in layer.banks:
                for j in range(C.shape[0]):
                    yield GroupQuantResult(C[j], BCQParams(p.alpha[j], p.z_b[j]),
                                           float(layer.group_errors[i]), self.loss_curve)
                    i += 1


def _batches(n_samples: int, batch_size: int):
    for lo in range(0, n_samples, batch_size):
        yield lo, min(lo + batch_size, n_samples)


def recon_error(block: Block, clean_inputs, quant_inputs, weights) -> float:
    """Mean over samples of ``||f(X) - f(X_hat; W_hat)||_F^2``."""
    errs = [np.sum((block.forward(x) - block.forward(xq, weights)) ** 2)
            for x, xq in zip(clean_inputs, quant_inputs)]
    return float(np.mean(errs))


def _deployed_layer(layout: GroupLayout, banks: list[Bank]) -> tuple[LayerResult, np.ndarray]:
    deployed, errs, parts = [], [], []
    for bank in banks:
        w_hat, (C, p) = bank.deploy_weights()
        deployed.append((C, p))
        parts.append(w_hat)
        errs.append(np.sum((bank.w - w_hat) ** 2, axis=-1))
    return LayerResult(layout, deployed, np.concatenate(errs)), layout.join(parts)


def _build_banks(block: Block, cfg: OptimizerConfig):
    layouts = [GroupLayout(W.shape, cfg.group_size) for W in block.weights]
    jobs = [(li, part) for li, (layout, W) in enumerate(zip(layouts, block.weights)) for part in layout.split(W)]
    with ThreadPoolExecutor(max_workers=min(thread_count(), len(jobs))) as pool:
        built = list(pool.map(lambda job: make_bank(job[1], cfg), jobs))
    banks = [[] for _ in layouts]
    for (li, _), bank in zip(jobs, built):
        banks[li].append(bank)
    return layouts, banks


def quantize_block(block: Block, clean_inputs, quant_inputs, cfg: OptimizerConfig) -> BlockResult:
    """Initialize, optimize for ``cfg.epochs`` passes, then fold and assign codes."""
    clean_inputs = [np.asarray(x, dtype=np.float64) for x in clean_inputs]
    quant_inputs = [np.asarray(x, dtype=np.float64) for x in quant_inputs]
    if len(clean_inputs) != len(quant_inputs) or any(a.shape != b.shape for a, b in zip(clean_inputs, quant_inputs)):
        raise ValueError("clean and quantized input streams are misaligned")
    start = time.perf_counter()
    layouts, banks = _build_banks(block, cfg)

    def deployed_error():
        weights = [_deployed_layer(layout, bs)[1] for layout, bs in zip(layouts, banks)]
        return recon_error(block, clean_inputs, quant_inputs, weights)

    def snapshot():
        return [[b.snapshot() for b in bs] for bs in banks]

    init_err = deployed_error()
    epoch_errors, best = [init_err], (init_err, 0, snapshot())

    targets = [block.forward(x) for x in clean_inputs]
    curve, trace, refresh = [], [], []
    trainable = cfg.method in TRAINABLE
    rule, lrs = make_rule(cfg.optimizer), {"flex": cfg.lr_flex, "bcq": cfg.lr_bcq}
    step = 0
    for epoch in range(cfg.epochs if trainable else 0):
        for lo, hi in _batches(len(clean_inputs), cfg.batch_size):
            x_hat = nx.constant(np.concatenate(quant_inputs[lo:hi]))
            target = nx.constant(np.concatenate(targets[lo:hi]))
            refreshing = [b.state is not None and b.state.step % b.state.period == 0 for bs in banks for b in bs]
            weights = [layout.join_nodes([b.forward() for b in bs]) for layout, bs in zip(layouts, banks)]
            loss = nx.frobenius_sq(block.forward_nodes(x_hat, weights), target)
            value = float(loss.value)
            if not np.isfinite(value):
                raise OptimizationError(f"non-finite loss at epoch {epoch}, step {step}")
            loss.backward()
            for bs in banks:
                for b in bs:
                    b.apply(rule, lrs)
            curve.append(value)
            if cfg.record_trace and any(refreshing):
                trace.append(np.concatenate([b.state.index.ravel() for bs in banks for b in bs]).astype(np.int16))
                refresh.append(step)
            step += 1
        if cfg.keep_best:
            err = deployed_error()
            epoch_errors.append(err)
            if err < best[0]:
                best = (err, epoch + 1, snapshot())

    best_epoch = len(epoch_errors) - 1
    if cfg.keep_best and trainable and best[1] != best_epoch:
        best_epoch = best[1]
        for bs, snaps in zip(banks, best[2]):
            for b, snap in zip(bs, snaps):
                b.restore(snap)
        log.info("restoring parameters from epoch %d (block error %.6g)", best_epoch, best[0])

    layers, final_weights = [], []
    for layout, bs in zip(layouts, banks):
        res, W_hat = _deployed_layer(layout, bs)
        layers.append(res)
        final_weights.append(W_hat)
    final_err = recon_error(block, clean_inputs, quant_inputs, final_weights)

    discrepancy = 0
    for bs in banks:
        for b in bs:
            if isinstance(b, UnifiedBank):
                discrepancy += b.code_discrepancy()
    if discrepancy:
        log.info("%d weights differ between the last training mapping and the final codes", discrepancy)
    return BlockResult(layers, curve, init_err, final_err, trace, refresh,
                       time.perf_counter() - start, discrepancy, epoch_errors, best_epoch)


def quantize_model(blocks: list[Block], dataset, cfg: OptimizerConfig) -> list[BlockResult]:
    """Quantize blocks bottom-up; block n sees inputs from quantized blocks 1..n-1."""
    clean = [np.asarray(x, dtype=np.float64) for x in dataset]
    quant = list(clean)
    results = []
    for i, block in enumerate(blocks):
        try:
            res = quantize_block(block, clean, quant, cfg)
        except Exception as exc:
            raise OptimizationError(f"block {i}: {exc}") from exc
        results.append(res)
        weights = res.quantized_weights()
        quant = [block.forward(x, weights) for x in quant]
        clean = [block.forward(x) for x in clean]
    return results


_LOG_RANGE = (np.log(np.finfo(np.float64).tiny), np.log(np.finfo(np.float64).max))


def _log_step(x, step):
    # clamp so the result stays a positive, finite double
    return np.exp(np.clip(np.log(x) - step, *_LOG_RANGE))


def sgd_update(params: UnifiedParams, grads: dict, cfg: OptimizerConfig) -> UnifiedParams:
    """One plain SGD step on a single parameter set.

    ``grads`` maps ``delta, zero_point, s, s_r, alpha, z_b`` to gradients of
    the loss w.r.t. those (not log) parameters; s and s_r step in log space.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise OptimizationError(f"non-finite gradient for {name}")
    zero = lambda name: np.asarray(grads.get(name, 0.0), dtype=np.float64)  # noqa: E731
    uq, flex = params.uq, params.flex
    delta = uq.delta - cfg.lr_flex * zero("delta")
    zp = uq.zero_point - cfg.lr_flex * zero("zero_point")
    s = _log_step(flex.s, cfg.lr_flex * zero("s") * flex.s)
    s_r = _log_step(flex.s_r, cfg.lr_flex * zero("s_r") * flex.s_r)
    alpha = params.bcq.alpha - cfg.lr_bcq * zero("alpha")
    z_b = params.bcq.z_b - cfg.lr_bcq * zero("z_b")
    return UnifiedParams(FlexParams(UQParams(delta, zp), s, s_r), BCQParams(alpha, z_b))
