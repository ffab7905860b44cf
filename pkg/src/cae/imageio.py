"""8-bit PPM (P6) read/write and a minimal PNG reader.

Images are returned as HxWx3 uint8 arrays.
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from .io_util import atomic_write

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageFormatError(ValueError):
    pass


def _ppm_tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise ImageFormatError("truncated PPM header")
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte precedes the raster


def decode_ppm(buf: bytes) -> np.ndarray:
    (magic, w, h, maxval), pos = _ppm_tokens(buf, 4)
    if magic != b"P6":
        raise ImageFormatError(f"unsupported PPM magic {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit PPM supported (maxval {maxval})")
    n = w * h * 3
    raster = buf[pos:pos + n]
    if len(raster) != n:
        raise ImageFormatError("truncated PPM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ImageFormatError(f"expected HxWx3 uint8, got {img.shape} {img.dtype}")
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


def _paeth(a, b, c):
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(raw: bytes, width: int, height: int, bpp: int) -> np.ndarray:
    stride = width * bpp
    out = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int64)
    pos = 0
    for y in range(height):
        ftype = raw[pos]
        line = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=pos + 1).astype(np.int64)
        pos += stride + 1
        if ftype == 0:
            cur = line
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype in (1, 3, 4):
            cur = line.copy()
            for x in range(stride):
                a = cur[x - bpp] if x >= bpp else 0
                c = prev[x - bpp] if x >= bpp else 0
                if ftype == 1:
                    pred = a
                elif ftype == 3:
                    pred = (a + prev[x]) >> 1
                else:
                    pred = _paeth(a, prev[x], c)
                cur[x] = (cur[x] + pred) & 0xFF
        else:
            raise ImageFormatError(f"bad PNG filter type {ftype}")
        out[y] = cur
        prev = cur
    return out


def decode_png(buf: bytes) -> np.ndarray:
    """Decode a non-interlaced 8-bit PNG (grey, grey+alpha, RGB, RGBA) to RGB."""
    if buf[:8] != PNG_SIGNATURE:
        raise ImageFormatError("not a PNG file")
    pos = 8
    idat = []
    header = None
    while pos < len(buf):
        (length,) = struct.unpack_from(">I", buf, pos)
        ctype = buf[pos + 4:pos + 8]
        data = buf[pos + 8:pos + 8 + length]
        pos += 12 + length
        if ctype == b"IHDR":
            header = struct.unpack(">IIBBBBB", data)
        elif ctype == b"IDAT":
            idat.append(data)
        elif ctype == b"IEND":
            break
    if header is None:
        raise ImageFormatError("PNG without IHDR")
    width, height, depth, color, _, _, interlace = header
    channels = {0: 1, 2: 3, 4: 2, 6: 4}.get(color)
    if depth != 8 or channels is None or interlace:
        raise ImageFormatError(f"unsupported PNG (depth={depth}, color={color}, interlace={interlace})")
    pix = _unfilter(zlib.decompress(b"".join(idat)), width, height, channels)
    pix = pix.reshape(height, width, channels)
    if channels in (1, 2):
        return np.repeat(pix[:, :, :1], 3, axis=2)
    return pix[:, :, :3].copy()


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] == PNG_SIGNATURE:
        return decode_png(buf)
    if buf[:2] == b"P6":
        return decode_ppm(buf)
    raise ImageFormatError(f"{os.fspath(path)}: unrecognized image format")


def write_ppm(path, img: np.ndarray) -> None:
    atomic_write(path, encode_ppm(img))


IMAGE_SUFFIXES = (".ppm", ".png")


def list_images(directory) -> list[str]:
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(IMAGE_SUFFIXES))
    return [os.path.join(directory, n) for n in names]
