"""File formats: binary PGM/PPM images and the flat binary dataset format.

Dataset layout::

    8 bytes   little-endian uint64, length L of the header
    L bytes   UTF-8 JSON header: {"format", "count", "seed", "arrays": [{name, shape, offset}], "meta"}
    rest      little-endian float64 payload, arrays back to back in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .diffusion import TupleDataset

__all__ = ["write_pnm", "read_pnm", "image_strip", "write_dataset", "read_dataset"]

DATASET_FORMAT = "fmdiff-dataset-v1"
_FIELDS = ("O_ctxt", "phi_ctxt", "O_trgt", "phi_trgt", "O_novel", "phi_novel", "signals")


def _to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pnm(path, img) -> None:
    """Write ``H x W`` (PGM) or ``H x W x 3`` (PPM) values in [0, 1] as binary maxval-255.

    A 1D image (``W`` or ``W x 3``) is written as a single row.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 1 or (img.ndim == 2 and img.shape[-1] == 3):
        img = img[None]
    if img.ndim == 2:
        magic, (h, w) = b"P5", img.shape
    elif img.ndim == 3 and img.shape[2] == 3:
        magic, (h, w) = b"P6", img.shape[:2]
    else:
        raise ValueError(f"cannot write an image of shape {img.shape}")
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + _to_bytes(img).tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM/PPM back as floats in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1  # the single whitespace byte after maxval
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"only maxval 255 is supported, got {maxval}")
    ch = {b"P5": 1, b"P6": 3}.get(magic)
    if ch is None:
        raise ValueError(f"not a binary PGM/PPM file: {magic!r}")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * ch, offset=pos).astype(np.float64) / 255.0
    return data.reshape((h, w) if ch == 1 else (h, w, 3))


def image_strip(rows, scale: int = 8) -> np.ndarray:
    """Stack 1D images (each ``W x 3``) into a block image, each pixel enlarged to ``scale x scale``."""
    block = np.stack([np.asarray(r, dtype=np.float64) for r in rows])  # (n, W, 3)
    return np.repeat(np.repeat(block, scale, axis=0), scale, axis=1)


def write_dataset(path, ds: TupleDataset, seed: int | None = None) -> None:
    arrays, entries, offset = [], [], 0
    for name in _FIELDS:
        a = getattr(ds, name)
        if a is None:
            continue
        a = np.ascontiguousarray(a, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        arrays.append(a.reshape(-1))
    meta = {k: v for k, v in ds.meta.items() if isinstance(v, (int, float, str, bool, type(None)))}
    header = {
        "format": DATASET_FORMAT,
        "count": len(ds),
        "seed": seed if seed is not None else ds.meta.get("seed"),
        "arrays": entries,
        "meta": meta,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.concatenate(arrays).tobytes() if arrays else b""
    Path(path).write_bytes(struct.pack("<Q", len(hb)) + hb + payload)


def read_dataset(path) -> TupleDataset:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n].decode("utf-8"))
    if header.get("format") != DATASET_FORMAT:
        raise ValueError(f"unrecognized dataset format {header.get('format')!r}")
    flat = np.frombuffer(raw, dtype="<f8", offset=8 + n)
    fields = {}
    for e in header["arrays"]:
        size = int(np.prod(e["shape"]))
        if e["offset"] + size > flat.size:
            raise ValueError(f"payload too short for array {e['name']}")
        fields[e["name"]] = flat[e["offset"]: e["offset"] + size].reshape(e["shape"]).copy()
    meta = dict(header.get("meta", {}))
    meta["seed"] = header.get("seed")
    return TupleDataset(
        fields["O_ctxt"], fields["phi_ctxt"], fields["O_trgt"], fields["phi_trgt"],
        fields.get("O_novel"), fields.get("phi_novel"), fields.get("signals"), meta,
    )
