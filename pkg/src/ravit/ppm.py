"""Binary PPM (P6, 8-bit) reading and writing, plus input normalization."""
from __future__ import annotations

from pathlib import Path

import numpy as np

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class PPMError(ValueError):
    pass


def _token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf):
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif buf[pos : pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PPMError(f"unexpected end of header at offset {start}")
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    """``(H, W, 3)`` uint8 pixels from a P6 byte string, rescaled to maxval 255."""
    if buf[:2] != b"P6":
        raise PPMError(f"not a binary PPM: expected magic 'P6' at offset 0, found {buf[:2]!r}")
    pos = 2
    fields = []
    for what in ("width", "height", "maxval"):
        start = pos
        tok, pos = _token(buf, pos)
        if not tok.isdigit():
            raise PPMError(f"bad {what} {tok!r} at offset {start}")
        fields.append(int(tok))
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise PPMError(f"empty image {w}x{h}")
    if not 0 < maxval < 256:
        raise PPMError(f"only 8-bit PPM is supported, maxval is {maxval}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise PPMError(f"missing whitespace after header at offset {pos}")
    pos += 1
    need = w * h * 3
    if len(buf) - pos < need:
        raise PPMError(f"pixel data truncated at offset {len(buf)}: need {need} bytes from offset {pos}")
    pixels = np.frombuffer(buf, np.uint8, need, pos).reshape(h, w, 3)
    if maxval != 255:
        if pixels.max() > maxval:
            raise PPMError(f"sample exceeds maxval {maxval}")
        pixels = ((pixels.astype(np.uint32) * 255 + maxval // 2) // maxval).astype(np.uint8)
    return pixels


def encode_ppm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) pixels, got shape {pixels.shape}")
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes()


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(pixels))


def normalize(pixels: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """uint8 ``(H, W, 3)`` to a normalized float32 ``(1, H, W, 3)`` batch."""
    x = pixels.astype(np.float32) / np.float32(255.0)
    x = (x - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)
    return x[None].astype(np.float32)
