"""File formats: ``.tns`` tensor containers, checkpoints, binary PGM images and
on-disk datasets.

.tns layout: ``b"TNS1"`` | u8 dtype (0=f32, 1=f64) | u8 ndim |
little-endian u32 dims | row-major little-endian payload.

Checkpoint layout: ``b"STAU"`` | u32 version | u32 header length | UTF-8 JSON
header | f32 payloads concatenated in header order. All integers little-endian.
"""

from __future__ import annotations

import json
import os
import re
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TNS_MAGIC = b"TNS1"
CKPT_MAGIC = b"STAU"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    pass


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# .tns


def encode_tns(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    code = _CODES[arr.dtype]
    head = TNS_MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tns(buf: bytes) -> np.ndarray:
    if buf[:4] != TNS_MAGIC:
        raise FormatError("not a TNS1 container")
    code, ndim = struct.unpack_from("<BB", buf, 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", buf, 6)
    off = 6 + 4 * ndim
    dt = _DTYPES[code]
    expected = dt.itemsize * int(np.prod(dims, dtype=np.int64))
    if len(buf) - off != expected:
        raise FormatError(f"payload is {len(buf) - off} bytes, header implies {expected}")
    return np.frombuffer(buf, dtype=dt, offset=off).reshape(dims).astype(dt.newbyteorder("="))


def save_tns(path, arr) -> None:
    atomic_write_bytes(path, encode_tns(arr))


def load_tns(path) -> np.ndarray:
    return decode_tns(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# checkpoints


def _dumps(obj) -> bytes:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


@dataclass
class Checkpoint:
    header: dict
    tensors: dict[str, np.ndarray]

    @property
    def run_config(self) -> dict:
        return self.header.get("config", {})


def encode_checkpoint(tensors: dict[str, np.ndarray], config: dict, epoch: int, iteration: int,
                      extra: dict | None = None) -> bytes:
    params = [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]
    header = {"dtype": "f32", "params": params, "config": config, "epoch": epoch, "iteration": iteration}
    if extra:
        header.update(extra)
    return _encode_checkpoint(header, tensors)


def _encode_checkpoint(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    hb = _dumps(header)
    payload = b"".join(np.ascontiguousarray(tensors[p["name"]], dtype="<f4").tobytes() for p in header["params"])
    return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hb)) + hb + payload


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("not an STAU checkpoint")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
    off = 12 + hlen
    tensors = {}
    for p in header["params"]:
        n = int(np.prod(p["shape"], dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(p["shape"]).astype(np.float32)
        tensors[p["name"]] = arr
        off += 4 * n
    if off != len(buf):
        raise FormatError(f"checkpoint payload is {len(buf) - 12 - hlen} bytes, header implies {off - 12 - hlen}")
    return Checkpoint(header, tensors)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, _encode_checkpoint(ckpt.header, ckpt.tensors))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# PGM (binary P5, maxval 255)


def encode_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2:
        raise FormatError(f"PGM needs a 2-D image, got shape {img.shape}")
    if img.dtype != np.uint8:
        if img.min(initial=0) < 0 or img.max(initial=0) > 255:
            raise FormatError("PGM pixel values must lie in [0, 255]")
        img = img.astype(np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def decode_pgm(buf: bytes) -> np.ndarray:
    pos = 0
    fields = []
    for _ in range(4):
        m = _PGM_TOKEN.match(buf, pos)
        if not m:
            raise FormatError("truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    data = buf[pos : pos + w * h]
    if len(data) != w * h:
        raise FormatError(f"PGM payload is {len(data)} bytes, expected {w * h}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def save_pgm(path, img) -> None:
    atomic_write_bytes(path, encode_pgm(img))


def load_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def heatmap_pgm(values: np.ndarray, cell: int = 16) -> np.ndarray:
    """Min-max-normalised matrix as an 8-bit image, each entry a ``cell``×``cell`` square."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    norm = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    img = np.rint(norm * 255).astype(np.uint8)
    return np.kron(img, np.ones((cell, cell), dtype=np.uint8))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    root: Path
    num_classes: int
    splits: dict[str, list[str]]

    def load_split(self, split: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
        """Images as float32 (N, 1, H, W) scaled to [0, 1], masks as int64 (N, H, W)."""
        if split not in self.splits:
            raise KeyError(f"dataset has no split {split!r}; available: {sorted(self.splits)}")
        names = self.splits[split]
        imgs, masks = [], []
        for name in names:
            img = load_pgm(self.root / "images" / f"{name}.pgm")
            msk = load_pgm(self.root / "masks" / f"{name}.pgm")
            if img.shape != msk.shape:
                raise FormatError(f"{name}: image {img.shape} and mask {msk.shape} differ")
            if msk.max(initial=0) >= self.num_classes:
                raise FormatError(f"{name}: mask value {msk.max()} >= num_classes {self.num_classes}")
            imgs.append(img)
            masks.append(msk)
        if not names:
            return np.zeros((0, 1, 0, 0), np.float32), np.zeros((0, 0, 0), np.int64), []
        x = (np.stack(imgs).astype(np.float32) / 255.0)[:, None]
        return x, np.stack(masks).astype(np.int64), list(names)


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = root / "dataset.json"
    if not manifest.is_file():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    meta = json.loads(manifest.read_text())
    return Dataset(root, int(meta["num_classes"]), {k: list(v) for k, v in meta["splits"].items()})


def write_dataset(root, images: list[np.ndarray], masks: list[np.ndarray], names: list[str],
                  splits: dict[str, list[str]], num_classes: int, extra: dict | None = None) -> Dataset:
    root = Path(root)
    for img, msk, name in zip(images, masks, names):
        save_pgm(root / "images" / f"{name}.pgm", img)
        save_pgm(root / "masks" / f"{name}.pgm", msk)
    meta = {"num_classes": num_classes, "splits": splits}
    if extra:
        meta.update(extra)
    atomic_write_text(root / "dataset.json", json.dumps(meta, indent=2) + "\n")
    return Dataset(root, num_classes, splits)
