"""Image compression with a trained ensemble: container format and selection.

Compressed file layout (little-endian, 21-byte header)::

    offset size field
    0      4    magic "CAE1"
    4      1    format version (1)
    5      1    model id (ensemble selector)
    6      1    scale-set id within that model
    7      2    interpolation weight, round(w * 65535)
    9      4    width  (before padding)
    13     4    height (before padding)
    17     4    payload length in bytes
    21     *    range-coded payload

The payload codes every coefficient channel-major (channel 0 positions in
row-major order, then channel 1, ...) with that channel's static table from
the selected scale set's histogram. Channels switched off by the model's
coefficient mask are known to be zero and are not coded at all. Rates are always counted over the whole
file, header included.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .metrics import bpp as bits_per_pixel
from .metrics import mse as mse_of
from .model import DIVISOR, CaeModel
from .rangecoder import (
    DecodeError,
    RangeDecoder,
    RangeEncoder,
    SymbolHistogram,
    decode_symbols,
    encode_symbols,
)

MAGIC = b"CAE1"
VERSION = 1
HEADER = struct.Struct("<4sBBBHIII")
assert HEADER.size == 21


class CodecError(ValueError):
    pass


class NoCandidateError(CodecError):
    def __init__(self, target: float, rates: list[float]):
        rs = ", ".join(f"{r:.4f}" for r in sorted(rates))
        super().__init__(f"no setting reaches {target} bpp; achievable rates: [{rs}]")
        self.target = target
        self.rates = rates


@dataclass
class CompressedFile:
    model_id: int
    scale_set_id: int
    weight_q: int
    width: int
    height: int
    payload: bytes

    def to_bytes(self) -> bytes:
        return HEADER.pack(MAGIC, VERSION, self.model_id, self.scale_set_id, self.weight_q,
                           self.width, self.height, len(self.payload)) + self.payload

    @classmethod
    def from_bytes(cls, buf: bytes) -> "CompressedFile":
        if len(buf) < HEADER.size:
            raise CodecError(f"file too short for header ({len(buf)} bytes)")
        magic, version, mid, sid, wq, w, h, n = HEADER.unpack_from(buf, 0)
        if magic != MAGIC:
            raise CodecError(f"unknown magic {magic!r}")
        if version != VERSION:
            raise CodecError(f"unsupported format version {version}")
        payload = buf[HEADER.size:HEADER.size + n]
        if len(payload) != n:
            raise CodecError(f"payload truncated: header says {n} bytes, got {len(payload)}")
        return cls(mid, sid, wq, w, h, payload)

    @property
    def n_bytes(self) -> int:
        return HEADER.size + len(self.payload)

    @property
    def bpp(self) -> float:
        return bits_per_pixel(self.n_bytes, self.width, self.height)


def weight_to_q(w: float) -> int:
    return int(round(w * 65535))


def pad_image(img: np.ndarray, multiple: int = DIVISOR) -> np.ndarray:
    """Mirror-extend HxWx3 so both dims are multiples of ``multiple``."""
    h, w = img.shape[:2]
    ph, pw = -h % multiple, -w % multiple
    if ph == 0 and pw == 0:
        return img
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect" if min(h, w) > 1 else "edge")


def image_codes(model: CaeModel, img: np.ndarray, scale_set: int) -> np.ndarray:
    """Integer codes (K,h,w) for an HxWx3 image, padded as needed."""
    padded = pad_image(np.asarray(img))
    codes = model.quantized_codes(padded.transpose(2, 0, 1).astype(np.float64), scale_set)
    return codes.astype(np.int64)


def decode_codes(model: CaeModel, codes: np.ndarray, scale_set: int, height: int, width: int) -> np.ndarray:
    """Codes → cropped HxWx3 uint8 image."""
    rec = model.reconstruct(codes.astype(np.float64), scale_set)
    rec = np.clip(np.round(rec), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    return np.ascontiguousarray(rec[:height, :width])


def encode_payload(codes: np.ndarray, hist: SymbolHistogram, mask=None) -> bytes:
    if codes.shape[0] != hist.channels:
        raise CodecError(f"codes have {codes.shape[0]} channels, histogram {hist.channels}")
    mask = np.ones(hist.channels, bool) if mask is None else np.asarray(mask, bool)
    enc = RangeEncoder()
    for c, table in enumerate(hist.tables):
        if not mask[c]:
            if np.any(codes[c]):
                raise CodecError(f"masked channel {c} has nonzero codes")
            continue
        encode_symbols(codes[c].reshape(-1), table, enc)
    return enc.finish()


def decode_payload(payload: bytes, hist: SymbolHistogram, shape: tuple[int, int],
                   mask=None) -> np.ndarray:
    mask = np.ones(hist.channels, bool) if mask is None else np.asarray(mask, bool)
    dec = RangeDecoder(payload)
    out = np.zeros((hist.channels, *shape), dtype=np.int64)
    for c, table in enumerate(hist.tables):
        if mask[c]:
            out[c] = np.array(decode_symbols(dec, table, shape[0] * shape[1])).reshape(shape)
    dec.check_end()
    return out


def fit_histograms(model: CaeModel, images, smoothing: int = 1, margin: int = 2) -> None:
    """Fit one histogram per scale set from the codes of ``images`` (HxWx3)."""
    if len(images) == 0:
        raise ValueError("fit_histograms: no images")
    for i, s in enumerate(model.scale_sets):
        codes = [image_codes(model, img, i) for img in images]
        s.histogram = SymbolHistogram.fit(codes, smoothing, margin)


@dataclass
class Candidate:
    model_id: int
    scale_set_id: int
    file: CompressedFile
    mse: float
    codes: np.ndarray
    decoded: np.ndarray

    @property
    def bpp(self) -> float:
        return self.file.bpp

    @property
    def label(self) -> str:
        return f"cae:m{self.model_id}:s{self.scale_set_id}"


def encode_candidate(model: CaeModel, img: np.ndarray, scale_set: int) -> Candidate:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise CodecError(f"expected an HxWx3 image, got {img.shape}")
    s = model.scale_sets[scale_set]
    if s.histogram is None:
        raise CodecError(f"model {model.model_id} scale set {scale_set} has no histogram")
    h, w = img.shape[:2]
    codes = image_codes(model, img, scale_set)
    payload = encode_payload(codes, s.histogram, model.mask.values)
    f = CompressedFile(model.model_id, scale_set, weight_to_q(s.weight), w, h, payload)
    decoded = decode_codes(model, codes, scale_set, h, w)
    return Candidate(model.model_id, scale_set, f, mse_of(img, decoded), codes, decoded)


def all_candidates(ensemble: list[CaeModel], img: np.ndarray) -> list[Candidate]:
    return [encode_candidate(m, img, i)
            for m in ensemble for i, s in enumerate(m.scale_sets) if s.histogram is not None]


def select(candidates: list[Candidate], target_bpp: float, policy: str = "min-distortion") -> Candidate:
    """Pick among candidates with bpp <= target.

    ``min-distortion``: smallest MSE (ties: lower bpp). ``max-rate``: highest
    bpp (ties: smaller MSE). Remaining ties keep ensemble order.
    """
    ok = [c for c in candidates if c.bpp <= target_bpp]
    if not ok:
        raise NoCandidateError(target_bpp, [c.bpp for c in candidates])
    if policy == "min-distortion":
        return min(ok, key=lambda c: (c.mse, c.bpp))
    if policy == "max-rate":
        return min(ok, key=lambda c: (-c.bpp, c.mse))
    raise ValueError(f"unknown selection policy {policy!r}")


def compress(ensemble: list[CaeModel], img: np.ndarray, target_bpp: float | None = None,
             preset: tuple[int, int] | None = None, policy: str = "min-distortion") -> CompressedFile:
    """Compress an HxWx3 uint8 image at a target rate or a fixed (model id, scale set)."""
    if not ensemble:
        raise CodecError("empty ensemble")
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise CodecError(f"expected 8-bit image, got {img.dtype}")
    if preset is not None:
        model = _model_by_id(ensemble, preset[0])
        return encode_candidate(model, img, preset[1]).file
    if target_bpp is None:
        raise CodecError("compress needs target_bpp or preset")
    return select(all_candidates(ensemble, img), target_bpp, policy).file


def _model_by_id(ensemble, model_id: int) -> CaeModel:
    for m in ensemble:
        if m.model_id == model_id:
            return m
    raise CodecError(f"model id {model_id} not in ensemble {[m.model_id for m in ensemble]}")


def decompress(data: bytes | CompressedFile, ensemble: list[CaeModel],
               return_codes: bool = False):
    f = data if isinstance(data, CompressedFile) else CompressedFile.from_bytes(data)
    model = _model_by_id(ensemble, f.model_id)
    if f.scale_set_id >= len(model.scale_sets):
        raise CodecError(f"scale set {f.scale_set_id} not in model {f.model_id}")
    s = model.scale_sets[f.scale_set_id]
    if weight_to_q(s.weight) != f.weight_q:
        raise CodecError(f"interpolation weight {f.weight_q} does not match model scale set "
                         f"({weight_to_q(s.weight)})")
    if s.histogram is None:
        raise CodecError(f"scale set {f.scale_set_id} of model {f.model_id} has no histogram")
    hp, wp = f.height + (-f.height % DIVISOR), f.width + (-f.width % DIVISOR)
    try:
        codes = decode_payload(f.payload, s.histogram, (hp // DIVISOR, wp // DIVISOR),
                               model.mask.values)
    except DecodeError as e:
        raise CodecError(str(e)) from e
    img = decode_codes(model, codes, f.scale_set_id, f.height, f.width)
    return (img, codes) if return_codes else img
