"""Optimization: Adam, incremental coefficient training, scale fine-tuning."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import sample_batch
from .model import CaeConfig, CaeModel, CoeffMask, ScaleSet, Tradeoff, training_forward
from .tensor import Rng, Tape, Tensor

log = logging.getLogger(__name__)

NOISE_STREAM = 1
CROP_STREAM = 2


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> bool:
    """Bias-corrected Adam update in place. Returns False (no change) on non-finite grads."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"adam_step: grad {name} shape {g.shape} != {params[name].shape}")
        if not np.all(np.isfinite(g)):
            log.warning("adam_step: non-finite gradient for %s, step rejected", name)
            return False
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name].data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


@dataclass
class TrainConfig:
    batch_size: int = 8
    crop_size: int = 32
    lr: float = 3e-3
    lr_final: float = 3e-4
    max_updates: int = 2000
    alpha: float | None = 0.05
    beta: float | None = None
    surrogate: str = "round_ste"
    incremental: bool = True
    initial_enabled: int = 2
    window: int = 50
    threshold: float = 0.005
    divergence_factor: float = 1e3
    finetune_iterations: int = 400
    finetune_lr: float = 1e-2
    tau: float = 1000.0
    kappa: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if (self.alpha is None) == (self.beta is None):
            raise ValueError("exactly one of alpha / beta must be set")
        for name in ("lr", "lr_final", "finetune_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.window < 2:
            raise ValueError("window must be >= 2")

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        base = dict(batch_size=32, crop_size=128, lr=1e-4, lr_final=1e-5, max_updates=10 ** 6,
                    window=100, finetune_iterations=10_000, finetune_lr=1e-3)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def tradeoff(self) -> Tradeoff:
        return Tradeoff.alpha(self.alpha) if self.alpha is not None else Tradeoff.beta(self.beta)


@dataclass
class TraceRow:
    step: int
    enabled_coeffs: int
    rate_bits: float
    mse: float
    loss: float
    lr: float


TRACE_FIELDS = [f.name for f in fields(TraceRow)]


def trace_to_csv(trace: list[TraceRow]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TRACE_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in trace:
        w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in asdict(row).items()})
    return buf.getvalue()


@dataclass
class TrainResult:
    model: CaeModel
    trace: list[TraceRow]
    mask_history: list[int]         # popcount after each step
    enable_steps: list[int]
    lr_drop_step: int | None


def _plateaued(losses: list[float], since: int, window: int, threshold: float) -> bool:
    if len(losses) - since < 2 * window:
        return False
    prev = float(np.mean(losses[-2 * window:-window]))
    cur = float(np.mean(losses[-window:]))
    return (prev - cur) / abs(prev) < threshold


def train_incremental(model: CaeModel, data, config: TrainConfig) -> TrainResult:
    """Train all network parameters with Adam, enabling coefficients one at a time.

    A coefficient is enabled whenever the mean loss over the last ``window``
    steps improves on the previous window by less than ``threshold``
    (relative). Once all are enabled, the next plateau drops the learning
    rate to ``lr_final``.
    """
    model.fit_normalization(data)
    c = model.code_channels
    model.mask = CoeffMask(c, min(config.initial_enabled, c) if config.incremental else c)
    noise = Rng(config.seed, NOISE_STREAM)
    crops = Rng(config.seed, CROP_STREAM)
    params = model.network_parameters()
    state = AdamState(lr=config.lr)
    tradeoff = config.tradeoff
    trace: list[TraceRow] = []
    losses: list[float] = []
    history: list[int] = []
    enable_steps: list[int] = []
    lr_drop = None
    since = 0
    initial = None
    for step in range(config.max_updates):
        batch = sample_batch(data, crops, config.batch_size, config.crop_size)
        model.zero_grad()
        with Tape() as tape:
            res = training_forward(model, batch, tradeoff, noise, 0, config.surrogate)
        tape.backward(res.loss)
        adam_step(state, params, {k: p.grad for k, p in params.items()})
        loss = res.loss.item()
        trace.append(TraceRow(step, model.mask.popcount, res.rate_bits, res.mse, loss, state.lr))
        losses.append(loss)
        if initial is None:
            initial = loss
        if loss > config.divergence_factor * initial:
            raise TrainingDiverged(f"loss {loss:.4g} exceeded {config.divergence_factor}x initial "
                                   f"{initial:.4g} at step {step}", trace)
        if lr_drop is None and _plateaued(losses, since, config.window, config.threshold):
            since = len(losses)
            if not model.mask.full:
                model.mask.enable_next()
                enable_steps.append(step)
            else:
                state.lr = config.lr_final
                lr_drop = step
        history.append(model.mask.popcount)
    model.scale_sets[0].alpha = config.alpha
    model.scale_sets[0].label = f"alpha={config.alpha}" if config.alpha is not None else f"beta={config.beta}"
    return TrainResult(model, trace, history, enable_steps, lr_drop)


def finetune_lr(t: int, base: float = 1e-3, tau: float = 1000.0, kappa: float = 0.8) -> float:
    """Learning rate after ``t`` updates: base * tau**kappa / (tau + t)**kappa."""
    return base * tau ** kappa / (tau + t) ** kappa


def finetune_scales(model: CaeModel, data, tradeoff: Tradeoff, config: TrainConfig,
                    iterations: int | None = None, init_from: int = 0,
                    label: str | None = None) -> int:
    """Optimize a new scale set for ``tradeoff`` with all other parameters frozen.

    Appends the set to ``model.scale_sets`` and returns its index.
    """
    if not tradeoff.value > 0:
        raise ValueError("tradeoff must be positive")
    iterations = config.finetune_iterations if iterations is None else iterations
    base = model.scale_sets[init_from]
    new = ScaleSet(Tensor(base.log_scales.data.copy(), requires_grad=True),
                   label or f"{tradeoff.kind}={tradeoff.value}",
                   tradeoff.value if tradeoff.kind == "alpha" else None)
    model.scale_sets.append(new)
    idx = len(model.scale_sets) - 1
    noise = Rng(config.seed, NOISE_STREAM + 100 * idx)
    crops = Rng(config.seed, CROP_STREAM + 100 * idx)
    state = AdamState(lr=config.finetune_lr)
    target = {"scales": new.log_scales}
    for t in range(iterations):
        state.lr = finetune_lr(t, config.finetune_lr, config.tau, config.kappa)
        batch = sample_batch(data, crops, config.batch_size, config.crop_size)
        new.log_scales.zero_grad()
        with Tape() as tape:
            res = training_forward(model, batch, tradeoff, noise, idx, config.surrogate)
        tape.backward(res.loss)
        adam_step(state, target, {"scales": new.log_scales.grad})
    model.zero_grad()
    return idx


def interpolate_scales(a: ScaleSet, b: ScaleSet, w: float, parents=None) -> ScaleSet:
    """Linear interpolation of log-scales; w=0 gives ``a``, w=1 gives ``b``."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"interpolation weight {w} outside [0, 1]")
    if a.log_scales.shape != b.log_scales.shape:
        raise ValueError(f"scale set length mismatch {a.log_scales.shape} vs {b.log_scales.shape}")
    if w == 0.0:
        ls = a.log_scales.data.copy()
    elif w == 1.0:
        ls = b.log_scales.data.copy()
    else:
        ls = (1.0 - w) * a.log_scales.data + w * b.log_scales.data
    return ScaleSet(Tensor(ls, requires_grad=True), f"interp({a.label},{b.label},{w:g})",
                    None, parents, float(w))


def add_interpolated(model: CaeModel, i: int, j: int, w: float) -> int:
    model.scale_sets.append(interpolate_scales(model.scale_sets[i], model.scale_sets[j], w, (i, j)))
    return len(model.scale_sets) - 1


@dataclass
class EnsembleSpec:
    presets: list[tuple[float, int]]

    def __post_init__(self):
        self.presets = [(float(a), int(c)) for a, c in self.presets]
        if not self.presets:
            raise ValueError("ensemble needs at least one preset")
        if len(self.presets) > 256:
            raise ValueError("at most 256 models fit the one-byte model id")
        alphas = [a for a, _ in self.presets]
        if alphas != sorted(alphas):
            raise ValueError("presets must be ordered by ascending alpha")

    @classmethod
    def paper(cls) -> "EnsembleSpec":
        return cls([(0.01, 96), (0.05, 96), (0.2, 64)])

    @classmethod
    def desk(cls) -> "EnsembleSpec":
        return cls([(0.01, 16), (0.05, 16), (0.2, 12)])


def train_ensemble(spec: EnsembleSpec, data, config: TrainConfig,
                   net: CaeConfig | None = None) -> list[TrainResult]:
    """Train one model per preset; model ids follow preset order."""
    net = net or CaeConfig()
    results = []
    for i, (alpha, channels) in enumerate(spec.presets):
        cfg = CaeConfig(**{**asdict(net), "code_channels": channels})
        tcfg = TrainConfig(**{**asdict(config), "alpha": alpha, "beta": None})
        results.append(train_incremental(CaeModel(cfg, model_id=i), data, tcfg))
    return results
