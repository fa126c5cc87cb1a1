"""Netpbm (P5/P6) and PFM readers and writers."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def write_ppm(path, rgb: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    img = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def _read_netpbm(path, magic: bytes):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} header, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    return w, h, data[pos + 1 :]


def read_ppm(path) -> np.ndarray:
    w, h, raw = _read_netpbm(path, b"P6")
    return np.frombuffer(raw, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3) / 255.0


def read_pgm(path) -> np.ndarray:
    w, h, raw = _read_netpbm(path, b"P5")
    return np.frombuffer(raw, dtype=np.uint8, count=w * h).reshape(h, w) > 127


def write_pfm(path, img: np.ndarray) -> None:
    """Little-endian PFM; 2-D arrays become "Pf", (H, W, 3) arrays "PF"."""
    img = np.asarray(img, dtype="<f4")
    if img.ndim == 2:
        header = "Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError(f"cannot store array of shape {img.shape} as PFM")
    h, w = img.shape[:2]
    body = np.ascontiguousarray(img[::-1]).tobytes()
    Path(path).write_bytes(f"{header}\n{w} {h}\n-1.0\n".encode() + body)


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    lines, pos = [], 0
    while len(lines) < 3:
        end = data.index(b"\n", pos)
        lines.append(data[pos:end].decode().strip())
        pos = end + 1
    kind = lines[0]
    if kind not in ("PF", "Pf"):
        raise ValueError(f"{path}: not a PFM file")
    w, h = (int(t) for t in lines[1].split())
    scale = float(lines[2])
    dtype = "<f4" if scale < 0 else ">f4"
    channels = 3 if kind == "PF" else 1
    arr = np.frombuffer(data, dtype=dtype, count=w * h * channels, offset=pos)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return arr.reshape(shape)[::-1].astype(float)
