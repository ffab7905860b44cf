"""Compressive autoencoder: encoder, decoder, rate model, scales and mask."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import nn
from .entropy import GsmModel, rate_upper_bound_estimate
from .nn import ConvSpec, SurrogateMode
from .rangecoder import SymbolHistogram
from .tensor import NonFiniteError, Rng, Tensor, add, reduce_sum, scale

DIVISOR = 8
LN2 = math.log(2.0)


@dataclass
class CaeConfig:
    base_filters: int = 16
    residual_blocks: int = 1
    code_channels: int = 16
    surrogate: str = SurrogateMode.ROUND_STE.value
    gsm_scales: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.code_channels < 1:
            raise ValueError("code_channels must be >= 1")
        if self.residual_blocks < 0:
            raise ValueError("residual_blocks must be >= 0")
        if self.base_filters < 2 or self.base_filters % 2:
            raise ValueError("base_filters must be an even number >= 2")
        SurrogateMode(self.surrogate)

    @classmethod
    def desk(cls, **kw) -> "CaeConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "CaeConfig":
        kw.setdefault("code_channels", 96)
        return cls(base_filters=128, residual_blocks=3, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "CaeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown CaeConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Tradeoff:
    """Rate-distortion weighting: ``alpha`` (rescaled form) or ``beta`` (bits + beta*MSE)."""

    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in ("alpha", "beta"):
            raise ValueError(f"unknown tradeoff kind {self.kind!r}")
        if not self.value > 0:
            raise ValueError(f"tradeoff must be positive, got {self.value}")
        if self.kind == "alpha" and self.value >= 1:
            raise ValueError("alpha must lie in (0, 1)")

    @classmethod
    def alpha(cls, a: float) -> "Tradeoff":
        return cls("alpha", a)

    @classmethod
    def beta(cls, b: float) -> "Tradeoff":
        return cls("beta", b)


@dataclass
class ScaleSet:
    """Per-channel log-scales; one operating point of a trained model."""

    log_scales: Tensor
    label: str = ""
    alpha: float | None = None
    parents: tuple[int, int] | None = None
    weight: float = 0.0
    histogram: SymbolHistogram | None = None

    @classmethod
    def unit(cls, channels: int, label: str = "base", alpha: float | None = None) -> "ScaleSet":
        return cls(Tensor(np.zeros(channels), requires_grad=True), label, alpha)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales.data)


class CoeffMask:
    """Binary per-channel gate. Entries can be enabled but never disabled."""

    def __init__(self, channels: int, enabled: int | None = None):
        n = channels if enabled is None else enabled
        self.values = np.zeros(channels, dtype=np.uint8)
        self.values[:n] = 1
        self.order: list[int] = list(range(n))

    @property
    def popcount(self) -> int:
        return int(self.values.sum())

    @property
    def full(self) -> bool:
        return self.popcount == self.values.size

    def enable_next(self) -> int:
        off = np.flatnonzero(self.values == 0)
        if off.size == 0:
            raise ValueError("all coefficients already enabled")
        c = int(off[0])
        self.values[c] = 1
        self.order.append(c)
        return c

    def as_float(self) -> np.ndarray:
        return self.values.astype(np.float64)


@dataclass
class ForwardResult:
    loss: Tensor
    rate_bits: float        # per image
    mse: float
    codes: np.ndarray
    recon: Tensor


class CaeModel:
    """Encoder f, decoder g, GSM rate model and the per-model coding state."""

    def __init__(self, config: CaeConfig | None = None, model_id: int = 0):
        self.config = config or CaeConfig()
        self.model_id = model_id
        cfg = self.config
        f, c = cfg.base_filters, cfg.code_channels
        h = f // 2
        self.encoder: dict[str, ConvSpec] = {
            "enc.conv1": ConvSpec(3, h, 5, 2, "mirror"),
            "enc.conv2": ConvSpec(h, f, 5, 2, "mirror"),
        }
        for b in range(cfg.residual_blocks):
            self.encoder[f"enc.res{b}.a"] = ConvSpec(f, f, 3, 1, "mirror")
            self.encoder[f"enc.res{b}.b"] = ConvSpec(f, f, 3, 1, "mirror")
        self.encoder["enc.conv3"] = ConvSpec(f, c, 5, 2, "mirror")
        self.decoder: dict[str, ConvSpec] = {"dec.sub1": ConvSpec(c, 4 * f, 3, 1, "zero")}
        for b in range(cfg.residual_blocks):
            self.decoder[f"dec.res{b}.a"] = ConvSpec(f, f, 3, 1, "zero")
            self.decoder[f"dec.res{b}.b"] = ConvSpec(f, f, 3, 1, "zero")
        self.decoder["dec.sub2"] = ConvSpec(f, 4 * h, 3, 1, "zero")
        self.decoder["dec.sub3"] = ConvSpec(h, 12, 3, 1, "zero")
        for i, (name, spec) in enumerate(self.convs().items()):
            # residual branch outputs start small so blocks begin near identity
            gain = 0.1 if name.endswith(".b") else 1.0
            spec.init_uniform(Rng(cfg.seed, 1000 + i), gain)
        self.gsm = GsmModel(c, cfg.gsm_scales)
        self.norm_mean = np.full(3, 127.5)
        self.norm_std = np.full(3, 64.0)
        self.scale_sets: list[ScaleSet] = [ScaleSet.unit(c)]
        self.mask = CoeffMask(c)

    # -- parameters ------------------------------------------------------------

    def convs(self) -> dict[str, ConvSpec]:
        return {**self.encoder, **self.decoder}

    def network_parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, spec in self.convs().items():
            out[f"{name}.weight"] = spec.weight
            out[f"{name}.bias"] = spec.bias
        out.update(self.gsm.parameters())
        return out

    def parameters(self) -> dict[str, Tensor]:
        out = self.network_parameters()
        for i, s in enumerate(self.scale_sets):
            out[f"scales.{i}"] = s.log_scales
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    @property
    def code_channels(self) -> int:
        return self.config.code_channels

    def fit_normalization(self, images) -> None:
        """Per-channel pixel mean/std over a set of HxWx3 or 3xHxW images."""
        chans = [[], [], []]
        for img in images:
            a = as_chw(img)
            for c in range(3):
                chans[c].append(a[c].reshape(-1))
        allv = [np.concatenate(v) for v in chans]
        self.norm_mean = np.array([v.mean() for v in allv])
        self.norm_std = np.array([max(v.std(), 1e-3) for v in allv])

    # -- network -------------------------------------------------------------------

    def encode(self, image) -> Tensor:
        x = image if isinstance(image, Tensor) else Tensor(as_chw_batch(image))
        h, w = x.shape[-2:]
        if h % DIVISOR or w % DIVISOR:
            raise ValueError(f"encode: spatial dims {(h, w)} not divisible by {DIVISOR}")
        e = self.encoder
        y = nn.normalize(x, self.norm_mean, self.norm_std)
        y = nn.leaky_relu(nn.conv2d(y, e["enc.conv1"]))
        y = nn.leaky_relu(nn.conv2d(y, e["enc.conv2"]))
        for b in range(self.config.residual_blocks):
            t = nn.leaky_relu(nn.conv2d(y, e[f"enc.res{b}.a"]))
            y = add(y, nn.conv2d(t, e[f"enc.res{b}.b"]))
        return nn.conv2d(y, e["enc.conv3"])

    def decode(self, codes) -> Tensor:
        z = codes if isinstance(codes, Tensor) else Tensor(codes)
        c_axis = z.data.ndim - 3
        if z.shape[c_axis] != self.code_channels:
            raise ValueError(f"decode: expected {self.code_channels} channels, got {z.shape[c_axis]}")
        d = self.decoder
        y = nn.leaky_relu(nn.subpixel(nn.conv2d(z, d["dec.sub1"]), 2, "up"))
        for b in range(self.config.residual_blocks):
            t = nn.leaky_relu(nn.conv2d(y, d[f"dec.res{b}.a"]))
            y = add(y, nn.conv2d(t, d[f"dec.res{b}.b"]))
        y = nn.leaky_relu(nn.subpixel(nn.conv2d(y, d["dec.sub2"]), 2, "up"))
        y = nn.subpixel(nn.conv2d(y, d["dec.sub3"]), 2, "up")
        y = nn.denormalize(y, self.norm_mean, self.norm_std)
        return nn.clip_st(y, 0.0, 255.0)

    def quantized_codes(self, image, scale_set: int | ScaleSet = 0, rounding: bool = True) -> np.ndarray:
        """Test-time codes ``round(f(x) * lambda) * m``."""
        s = self._scale_set(scale_set)
        y = self.encode(image).data
        y = y * _cview(s.scales, y.ndim)
        if rounding:
            y = nn.round_half_away(y)
        return y * _cview(self.mask.as_float(), y.ndim)

    def reconstruct(self, codes: np.ndarray, scale_set: int | ScaleSet = 0) -> np.ndarray:
        s = self._scale_set(scale_set)
        return self.decode(codes / _cview(s.scales, codes.ndim)).data

    def _scale_set(self, s) -> ScaleSet:
        return s if isinstance(s, ScaleSet) else self.scale_sets[s]

    def copy(self) -> "CaeModel":
        return load_models_bytes(models_to_bytes([self]))[0]


def _cview(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((-1, 1, 1) if ndim == 3 else (1, -1, 1, 1))


def as_chw(img) -> np.ndarray:
    """HxWx3 (uint8 or float) or 3xHxW → float64 3xHxW."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError(f"expected a 3-d image, got shape {a.shape}")
    if a.shape[0] != 3 and a.shape[-1] == 3:
        a = a.transpose(2, 0, 1)
    if a.shape[0] != 3:
        raise ValueError(f"expected 3 colour channels, got shape {a.shape}")
    return np.ascontiguousarray(a)


def as_chw_batch(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 4:
        return a
    return as_chw(a)


def training_forward(model: CaeModel, images, tradeoff: Tradeoff, rng: Rng,
                     scale_set: int = 0, mode: str | None = None) -> ForwardResult:
    """Loss for a batch (NCHW, pixel range 0..255) under the active surrogate.

    codes = Q(f(x) * lambda) * m, rate from -log2 q(codes + u), distortion
    from g(codes / lambda). Rate and distortion are averaged over images.
    """
    x = as_chw_batch(images)
    if x.ndim == 3:
        x = x[None]
    mode = SurrogateMode(mode or model.config.surrogate)
    s = model.scale_sets[scale_set]
    n_img = x.shape[0]
    y = model.encode(Tensor(x))
    y = nn.channel_scale(y, s.log_scales)
    q = nn.quantize_surrogate(y, mode, rng)
    codes = nn.channel_mask(q, model.mask.as_float())
    rate = rate_upper_bound_estimate(model.gsm, codes, rng)            # bits, whole batch
    recon = model.decode(nn.channel_scale(codes, s.log_scales, inverse=True))
    sse = nn.sum_squared_error(recon, x)
    n_coef = codes.size // n_img
    n_pix = x.size // n_img
    if tradeoff.kind == "alpha":
        a = tradeoff.value
        loss = add(scale(rate, a * LN2 / (n_coef * n_img)),
                   scale(sse, (1.0 - a) / (1000.0 * n_pix * n_img)))
    else:
        loss = add(scale(rate, 1.0 / n_img), scale(sse, tradeoff.value / (n_pix * n_img)))
    if not np.isfinite(loss.data).all():
        raise NonFiniteError(
            f"non-finite loss: rate={rate.item()} sse={sse.item()} "
            f"max|y|={np.abs(y.data).max()}")
    return ForwardResult(loss, rate.item() / n_img, sse.item() / x.size, codes.data, recon)


def alpha_loss(rate_nats: float, sse: float, n_coef: int, n_pix: int, alpha: float) -> float:
    """Scalar form of the rescaled objective for one image."""
    return alpha / n_coef * rate_nats + (1.0 - alpha) / (1000.0 * n_pix) * sse


# -- model file ------------------------------------------------------------------
#
# file    := "CAEM" u8 version u32 n_models model*
# model   := u32 n_sections section*
# section := 4-byte tag, u32 length, payload
# tags: CONF (UTF-8 JSON), PARM, GSM_, NORM, MASK, SCAL, HIST. All integers are
# little-endian; all reals are float64.

MODEL_MAGIC = b"CAEM"
MODEL_VERSION = 1


def _sec(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<I", len(payload)) + payload


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _model_to_bytes(m: CaeModel) -> bytes:
    conf = json.dumps({"config": asdict(m.config), "model_id": m.model_id,
                       "enable_order": m.mask.order}, sort_keys=True).encode()
    params = m.network_parameters()
    parm = [struct.pack("<I", len(params))]
    for name, t in params.items():
        nb = name.encode()
        parm.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", t.data.ndim))
        parm.append(struct.pack(f"<{t.data.ndim}I", *t.shape) + _f64(t.data))
    gsm = struct.pack("<II", m.gsm.channels, m.gsm.scales) + _f64(m.gsm.log_weights.data) \
        + _f64(m.gsm.log_precisions.data)
    norm = _f64(m.norm_mean) + _f64(m.norm_std)
    mask = struct.pack("<I", m.mask.values.size) + m.mask.values.astype(np.uint8).tobytes()
    scal = [struct.pack("<I", len(m.scale_sets))]
    hist = []
    for i, s in enumerate(m.scale_sets):
        lb = s.label.encode()
        pa, pb = s.parents if s.parents else (-1, -1)
        scal.append(struct.pack("<H", len(lb)) + lb)
        scal.append(struct.pack("<dii d I", -1.0 if s.alpha is None else s.alpha, pa, pb,
                                s.weight, s.log_scales.size) + _f64(s.log_scales.data))
        if s.histogram is not None:
            hist.append(struct.pack("<I", i) + s.histogram.to_bytes())
    sections = [
        _sec(b"CONF", conf),
        _sec(b"PARM", b"".join(parm)),
        _sec(b"GSM_", gsm),
        _sec(b"NORM", norm),
        _sec(b"MASK", mask),
        _sec(b"SCAL", b"".join(scal)),
        _sec(b"HIST", struct.pack("<I", len(hist)) + b"".join(hist)),
    ]
    return struct.pack("<I", len(sections)) + b"".join(sections)


def models_to_bytes(models: list[CaeModel]) -> bytes:
    return MODEL_MAGIC + struct.pack("<BI", MODEL_VERSION, len(models)) + \
        b"".join(_model_to_bytes(m) for m in models)


def _read_array(buf, off, count):
    a = np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64)
    return a, off + 8 * count


def _model_from_sections(sections: dict[bytes, bytes]) -> CaeModel:
    conf = json.loads(sections[b"CONF"].decode())
    m = CaeModel(CaeConfig.from_dict(conf["config"]), conf["model_id"])
    params = m.network_parameters()
    buf = sections[b"PARM"]
    (n,) = struct.unpack_from("<I", buf, 0)
    off = 4
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", buf, off)
        name = buf[off + 2: off + 2 + ln].decode()
        off += 2 + ln
        (nd,) = struct.unpack_from("<B", buf, off)
        shape = struct.unpack_from(f"<{nd}I", buf, off + 1)
        off += 1 + 4 * nd
        data, off = _read_array(buf, off, int(np.prod(shape)))
        if name not in params or params[name].shape != tuple(shape):
            raise ValueError(f"model file: parameter {name} {shape} does not match config")
        params[name].data[...] = data.reshape(shape)
    buf = sections[b"GSM_"]
    k, s = struct.unpack_from("<II", buf, 0)
    lw, off = _read_array(buf, 8, k * s)
    lp, _ = _read_array(buf, off, k * s)
    m.gsm = GsmModel(k, s, lw.reshape(k, s), lp.reshape(k, s))
    nm, off = _read_array(sections[b"NORM"], 0, 3)
    ns, _ = _read_array(sections[b"NORM"], off, 3)
    m.norm_mean, m.norm_std = nm, ns
    buf = sections[b"MASK"]
    (n,) = struct.unpack_from("<I", buf, 0)
    m.mask.values = np.frombuffer(buf, dtype=np.uint8, count=n, offset=4).copy()
    m.mask.order = list(conf["enable_order"])
    buf = sections[b"SCAL"]
    (n,) = struct.unpack_from("<I", buf, 0)
    off = 4
    m.scale_sets = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", buf, off)
        label = buf[off + 2: off + 2 + ln].decode()
        off += 2 + ln
        alpha, pa, pb, w, cnt = struct.unpack_from("<dii d I", buf, off)
        off += struct.calcsize("<dii d I")
        ls, off = _read_array(buf, off, cnt)
        m.scale_sets.append(ScaleSet(Tensor(ls, requires_grad=True), label,
                                     None if alpha < 0 else alpha,
                                     None if pa < 0 else (pa, pb), w))
    buf = sections[b"HIST"]
    (n,) = struct.unpack_from("<I", buf, 0)
    off = 4
    for _ in range(n):
        (i,) = struct.unpack_from("<I", buf, off)
        h, off = SymbolHistogram.from_bytes(buf, off + 4)
        m.scale_sets[i].histogram = h
    return m


def load_models_bytes(buf: bytes) -> list[CaeModel]:
    if buf[:4] != MODEL_MAGIC:
        raise ValueError("not a model file (bad magic)")
    version, n = struct.unpack_from("<BI", buf, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model file version {version}")
    off = 9
    models = []
    for _ in range(n):
        (ns,) = struct.unpack_from("<I", buf, off)
        off += 4
        sections = {}
        for _ in range(ns):
            tag = buf[off: off + 4]
            (ln,) = struct.unpack_from("<I", buf, off + 4)
            sections[tag] = buf[off + 8: off + 8 + ln]
            off += 8 + ln
        models.append(_model_from_sections(sections))
    return models


def save_models(path, models: list[CaeModel]) -> None:
    from .io_util import atomic_write

    atomic_write(path, models_to_bytes(models))


def load_models(paths) -> list[CaeModel]:
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    models = []
    for p in paths:
        with open(p, "rb") as fh:
            models.extend(load_models_bytes(fh.read()))
    ids = [m.model_id for m in models]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate model ids in ensemble: {ids}")
    return models
