"""Zero-mean Gaussian scale mixture over coefficient channels.

Parametrized by per-channel log-weights (softmax-normalized) and
log-precisions. Provides the differentiable training rate (a noisy upper
bound on code length) and exact discretized code lengths.
"""

from __future__ import annotations

import logging
import math

import numpy as np
from scipy.special import log_ndtr, logsumexp

from .tensor import Rng, Tensor, record

log = logging.getLogger(__name__)

LN2 = math.log(2.0)
INIT_SIGMAS = (0.1, 0.35, 1.0, 3.5, 10.0, 35.0)


class GsmModel:
    def __init__(self, channels: int, scales: int = 6, log_weights=None, log_precisions=None):
        self.channels = channels
        self.scales = scales
        if log_weights is None:
            log_weights = np.zeros((channels, scales))
        if log_precisions is None:
            if scales == len(INIT_SIGMAS):
                sig = np.array(INIT_SIGMAS)
            else:
                sig = np.geomspace(INIT_SIGMAS[0], INIT_SIGMAS[-1], scales)
            log_precisions = np.tile(-2.0 * np.log(sig), (channels, 1))
        self.log_weights = Tensor(log_weights, requires_grad=True)
        self.log_precisions = Tensor(log_precisions, requires_grad=True)
        if self.log_weights.shape != (channels, scales):
            raise ValueError(f"log_weights shape {self.log_weights.shape} != {(channels, scales)}")
        if self.log_precisions.shape != (channels, scales):
            raise ValueError(f"log_precisions shape {self.log_precisions.shape} != {(channels, scales)}")

    @classmethod
    def from_sigmas(cls, sigmas, weights=None) -> "GsmModel":
        sigmas = np.atleast_2d(np.asarray(sigmas, dtype=np.float64))
        k, s = sigmas.shape
        lw = np.zeros((k, s)) if weights is None else np.log(np.atleast_2d(weights))
        return cls(k, s, log_weights=lw, log_precisions=-2.0 * np.log(sigmas))

    def parameters(self) -> dict[str, Tensor]:
        return {"gsm.log_weights": self.log_weights, "gsm.log_precisions": self.log_precisions}

    @property
    def weights(self) -> np.ndarray:
        lw = self.log_weights.data
        return np.exp(lw - logsumexp(lw, axis=1, keepdims=True))

    @property
    def sigmas(self) -> np.ndarray:
        return np.exp(-0.5 * self.log_precisions.data)

    def copy(self) -> "GsmModel":
        return GsmModel(self.channels, self.scales,
                        self.log_weights.data.copy(), self.log_precisions.data.copy())


def _channel_axis(v: np.ndarray) -> int:
    if v.ndim not in (3, 4):
        raise ValueError(f"expected KxHxW or NxKxHxW coefficients, got shape {v.shape}")
    return v.ndim - 3


def gsm_log2_density(model: GsmModel, v: Tensor) -> Tensor:
    """Sum over all positions and channels of log2 q(v); differentiable in v and the GSM."""
    x = v.data
    c_axis = _channel_axis(x)
    if x.shape[c_axis] != model.channels:
        raise ValueError(f"coefficient channels {x.shape[c_axis]} != GSM channels {model.channels}")
    # move channel to the front, positions flattened: (K, P)
    xk = np.moveaxis(x, c_axis, 0).reshape(model.channels, -1)
    lw = model.log_weights.data
    lp = model.log_precisions.data
    log_pi = lw - logsumexp(lw, axis=1, keepdims=True)                     # (K,S)
    prec = np.exp(lp)                                                       # (K,S)
    x2 = xk * xk                                                            # (K,P)
    comp = (log_pi + 0.5 * lp - 0.5 * math.log(2 * math.pi))[:, :, None] \
        - 0.5 * prec[:, :, None] * x2[:, None, :]                           # (K,S,P)
    # log-sum-exp keeps ln q finite however far out v lies, so no floor is
    # needed (a floor would also cap the rate and break the upper bound)
    ln_q = logsumexp(comp, axis=1)                                          # (K,P)
    resp = np.exp(comp - ln_q[:, None, :])                                  # (K,S,P)
    out = np.array(ln_q.sum() / LN2)

    def bwd(g):
        gs = float(g) / LN2
        d_x = -(resp * prec[:, :, None]).sum(axis=1) * xk                  # (K,P)
        moved_shape = np.moveaxis(x, c_axis, 0).shape
        gx = np.moveaxis((gs * d_x).reshape(moved_shape), 0, c_axis)
        r_sum = resp.sum(axis=2)                                            # (K,S)
        pi = np.exp(log_pi)
        g_lw = gs * (r_sum - pi * xk.shape[1])
        g_lp = gs * (0.5 * r_sum - 0.5 * prec * (resp * x2[:, None, :]).sum(axis=2))
        return gx, g_lw, g_lp

    return record("gsm_log2_density", (v, model.log_weights, model.log_precisions), out, bwd)


def rate_upper_bound_estimate(model: GsmModel, z: Tensor, rng: Rng, samples: int = 1) -> Tensor:
    """Single-draw (or averaged) estimate of E_u[-log2 q(z + u)], u ~ U[-.5, .5)."""
    from .nn import add_noise
    from .tensor import scale

    total = None
    for _ in range(samples):
        u = rng.uniform(z.shape, -0.5, 0.5)
        term = gsm_log2_density(model, add_noise(z, u))
        total = term if total is None else total + term
    return scale(total, -1.0 / samples)


def discrete_log2_probs(model: GsmModel, z: np.ndarray) -> np.ndarray:
    """Elementwise log2 Q(z) for integer z laid out as KxHxW or NxKxHxW."""
    z = np.asarray(z, dtype=np.float64)
    c_axis = _channel_axis(z)
    zk = np.moveaxis(z, c_axis, 0).reshape(model.channels, -1)
    log_pi = np.log(model.weights)[:, :, None]
    sig = model.sigmas[:, :, None]
    a = np.abs(zk)[:, None, :]
    # mass of [|z|-.5, |z|+.5] by symmetry; tail form avoids cancellation
    hi = log_ndtr(-(a - 0.5) / sig)
    lo = log_ndtr(-(a + 0.5) / sig)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_mass = hi + np.log1p(-np.exp(lo - hi))
    log_mass = np.where(np.isneginf(hi), -np.inf, log_mass)
    ln_q = logsumexp(log_pi + log_mass, axis=1)
    out = ln_q / LN2
    return np.moveaxis(out.reshape(np.moveaxis(z, c_axis, 0).shape), 0, c_axis)


def exact_code_bits(model: GsmModel, z) -> float:
    """-log2 Q(z) summed over all coefficients; +inf (with a warning) on underflow."""
    if isinstance(z, Tensor):
        z = z.data
    z = np.asarray(z, dtype=np.float64)
    if np.any(z != np.round(z)):
        raise ValueError("exact_code_bits: coefficients must be integer-valued")
    lp = discrete_log2_probs(model, z)
    if not np.all(np.isfinite(lp)):
        log.warning("exact_code_bits: probability underflow, returning inf")
        return math.inf
    return float(-lp.sum())
