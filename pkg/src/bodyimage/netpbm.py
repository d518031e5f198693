"""Binary PPM (P6), PGM (P5) and PAM (P7) images, maxval 255."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def _as_bytes(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    if image.dtype == bool:
        return np.where(image, 255, 0).astype(np.uint8)
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    """RGB image, floats in [0, 1] or uint8, to P6 bytes."""
    data = _as_bytes(image)
    if data.ndim != 3 or data.shape[2] != 3:
        raise NetpbmError(f"PPM needs an (H, W, 3) image, got {data.shape}")
    h, w, _ = data.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(data).tobytes()


def encode_pgm(image: np.ndarray) -> bytes:
    """Grey image or boolean mask (as 0/255) to P5 bytes."""
    data = _as_bytes(image)
    if data.ndim != 2:
        raise NetpbmError(f"PGM needs an (H, W) image, got {data.shape}")
    h, w = data.shape
    return f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(data).tobytes()


def encode_pam(image: np.ndarray) -> bytes:
    """(H, W, 4) uint8 RGBA to P7 bytes."""
    data = _as_bytes(image)
    if data.ndim != 3 or data.shape[2] != 4:
        raise NetpbmError(f"PAM RGBA needs an (H, W, 4) image, got {data.shape}")
    h, w, _ = data.shape
    header = f"P7\nWIDTH {w}\nHEIGHT {h}\nDEPTH 4\nMAXVAL 255\nTUPLTYPE RGB_ALPHA\nENDHDR\n"
    return header.encode() + np.ascontiguousarray(data).tobytes()


_PNM_HEADER = re.compile(rb"(P[56])\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def decode(buf: bytes) -> np.ndarray:
    """Decode P5/P6/P7 bytes into a uint8 array (H, W), (H, W, 3) or (H, W, depth)."""
    if buf.startswith(b"P7"):
        end = buf.find(b"ENDHDR\n")
        if end < 0:
            raise NetpbmError("PAM header lacks ENDHDR")
        fields = dict(line.split(None, 1) for line in buf[3:end].decode().splitlines() if line and not line.startswith("#"))
        w, h, depth = int(fields["WIDTH"]), int(fields["HEIGHT"]), int(fields["DEPTH"])
        if int(fields["MAXVAL"]) != 255:
            raise NetpbmError("only MAXVAL 255 is supported")
        payload = buf[end + len(b"ENDHDR\n"):]
        shape = (h, w, depth)
    else:
        m = _PNM_HEADER.match(buf)
        if not m:
            raise NetpbmError("not a binary PGM/PPM file")
        magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
        if maxval != 255:
            raise NetpbmError("only maxval 255 is supported")
        payload = buf[m.end():]
        shape = (h, w, 3) if magic == b"P6" else (h, w)
    size = int(np.prod(shape))
    if len(payload) != size:
        raise NetpbmError(f"payload has {len(payload)} bytes, header implies {size}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape).copy()


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(image))


def write_pam(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pam(image))


def read(path: str | Path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def tile(images: np.ndarray, pad: int = 1, fill: float = 1.0) -> np.ndarray:
    """Lay out a ``(rows, cols, H, W, C)`` stack as one image with ``pad``-pixel gutters."""
    images = np.asarray(images)
    rows, cols, h, w, c = images.shape
    out = np.full((rows * h + (rows + 1) * pad, cols * w + (cols + 1) * pad, c), fill, dtype=images.dtype)
    for r in range(rows):
        for q in range(cols):
            y, x = pad + r * (h + pad), pad + q * (w + pad)
            out[y:y + h, x:x + w] = images[r, q]
    return out
