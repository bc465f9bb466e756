"""File formats: MDLT tensor containers, PGM masks/heat maps, PPM previews.

MDLT layout: ``b"MDLT"``, version byte ``0x01``, rank byte, ``rank`` little-endian
u32 extents, then the float32 little-endian payload in row-major order.

PPM previews project a C-channel latent to RGB with a fixed matrix: channel
``c`` feeds RGB through row ``c % 4`` of ``LATENT_RGB``. Each output channel is
then min-max scaled over the image to 0..255.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidShapeError, MdlError

MAGIC = b"MDLT"
VERSION = 1

LATENT_RGB = np.array(
    [
        [0.60, 0.25, 0.15],
        [0.15, 0.60, 0.25],
        [0.25, 0.15, 0.60],
        [0.30, 0.30, 0.30],
    ],
    dtype=np.float64,
)


class FormatError(MdlError, ValueError):
    pass


def tensor_to_bytes(x: torch.Tensor) -> bytes:
    arr = np.ascontiguousarray(x.detach().cpu().numpy().astype("<f4"))
    if arr.ndim < 1 or arr.ndim > 4:
        raise InvalidShapeError(f"container rank must be 1..4, got {arr.ndim}")
    head = MAGIC + bytes([VERSION, arr.ndim]) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def tensor_from_bytes(buf: bytes) -> torch.Tensor:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise FormatError("bad magic")
    if buf[4] != VERSION:
        raise FormatError(f"unsupported version {buf[4]}")
    rank = buf[5]
    if rank < 1 or rank > 4:
        raise FormatError(f"bad rank {rank}")
    off = 6 + 4 * rank
    shape = struct.unpack(f"<{rank}I", buf[6:off])
    n = int(np.prod(shape))
    if len(buf) != off + 4 * n:
        raise FormatError("payload length does not match extents")
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape)
    return torch.from_numpy(arr.astype(np.float32))


def save_tensor(path, x: torch.Tensor) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(tensor_to_bytes(x))
    return path


def load_tensor(path) -> torch.Tensor:
    return tensor_from_bytes(Path(path).read_bytes())


def save_pgm(path, img: torch.Tensor | np.ndarray, scale: float = 255.0) -> Path:
    """Write a 2-D map in [0, 1] as binary PGM (P5, maxval 255)."""
    a = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    a = np.squeeze(a)
    if a.ndim != 2:
        raise InvalidShapeError(f"PGM needs a 2-D map, got {a.shape}")
    px = np.clip(np.rint(a.astype(np.float64) * scale), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = px.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + px.tobytes())
    return path


def load_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError("only maxval 255 is supported")
    px = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return px


def save_mask_pgm(path, mask) -> Path:
    return save_pgm(path, mask)


def load_mask_pgm(path) -> torch.Tensor:
    return torch.from_numpy((load_pgm(path) >= 128).astype(np.float32))


def latent_to_rgb(z: torch.Tensor) -> np.ndarray:
    a = z.detach().cpu().numpy().astype(np.float64)
    if a.ndim != 3:
        raise InvalidShapeError(f"expected (C, H, W), got {a.shape}")
    proj = np.zeros((a.shape[1], a.shape[2], 3))
    for c in range(a.shape[0]):
        proj += a[c][..., None] * LATENT_RGB[c % 4]
    lo = proj.min(axis=(0, 1), keepdims=True)
    hi = proj.max(axis=(0, 1), keepdims=True)
    proj = (proj - lo) / np.where(hi > lo, hi - lo, 1.0)
    return np.rint(proj * 255).astype(np.uint8)


def save_ppm(path, z: torch.Tensor) -> Path:
    rgb = latent_to_rgb(z)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w, _ = rgb.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())
    return path


# ---------------------------------------------------------------- checkpoints


def save_state(directory, state: dict[str, torch.Tensor], meta: dict) -> Path:
    """One MDLT file per named tensor plus a plain-text index ``checkpoint.txt``.

    The index holds ``meta <json>`` on its first line, then ``tensor <name> <extents>``.
    """
    import json

    d = Path(directory)
    lines = ["meta " + json.dumps(meta, sort_keys=True)]
    for name, x in state.items():
        save_tensor(d / "tensors" / f"{name}.mdlt", x.reshape(-1) if x.dim() == 0 else x)
        lines.append(f"tensor {name} {'x'.join(str(e) for e in x.shape) or 'scalar'}")
    (d / "checkpoint.txt").write_text("\n".join(lines) + "\n")
    return d


def load_state(directory) -> tuple[dict[str, torch.Tensor], dict]:
    import json

    d = Path(directory)
    idx = d / "checkpoint.txt"
    if not idx.exists():
        raise FormatError(f"no checkpoint index at {idx}")
    meta, state = {}, {}
    for line in idx.read_text().splitlines():
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            meta = json.loads(rest)
        elif kind == "tensor":
            name, extents = rest.split(" ")
            x = load_tensor(d / "tensors" / f"{name}.mdlt")
            state[name] = x.reshape(()) if extents == "scalar" else x
    return state, meta
