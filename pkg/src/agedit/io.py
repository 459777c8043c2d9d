"""On-disk formats: tensor files, checkpoints, datasets, codebooks, PGM images.

Binary layouts (all little-endian):

tensor file::

    b"AGTENSOR" | u32 format_version | u8 dtype code | u8 ndim | u64 * ndim shape | data

checkpoint::

    b"AGCKPT01" | u32 format_version | u32 header length | header (UTF-8 JSON)
    | u32 tensor count | per tensor: u16 name length | name | u8 dtype code
    | u8 ndim | u64 * ndim shape | data
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .synthface import AgeCodebook, FaceDataset, manifest_hash

FORMAT_VERSION = 1
TENSOR_MAGIC = b"AGTENSOR"
CKPT_MAGIC = b"AGCKPT01"
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3, np.dtype("<i4"): 4,
               np.dtype("u1"): 5, np.dtype("bool"): 6}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class FormatError(ValueError):
    """A file does not match the expected layout or version."""


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dtype_code(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    try:
        return DTYPE_CODES[np.dtype(dt)]
    except KeyError:
        raise FormatError(f"unsupported dtype {arr.dtype}") from None


def _write_array(fh, arr: np.ndarray) -> None:
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    arr = np.asarray(arr, order="C")
    code = _dtype_code(arr)
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype(CODE_DTYPES[code], copy=False).tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("unexpected end of file")
    return buf


def _read_array(fh) -> np.ndarray:
    code, ndim = struct.unpack("<BB", _read_exact(fh, 2))
    if code not in CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
    dt = CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    data = _read_exact(fh, count * dt.itemsize)
    return np.frombuffer(data, dtype=dt).reshape(shape).copy()


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        _write_array(fh, np.asarray(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != TENSOR_MAGIC:
            raise FormatError(f"{path}: not a tensor file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported format version {version}")
        return _read_array(fh)


def save_checkpoint(path, tensors: dict, header: dict) -> None:
    """Write named arrays with a JSON header (must carry ``config_digest`` and ``stage``)."""
    for key in ("config_digest", "stage"):
        if key not in header:
            raise ValueError(f"checkpoint header needs {key!r}")
    head = dict(header, format_version=FORMAT_VERSION)
    blob = json.dumps(head, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            enc = name.encode()
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            _write_array(fh, np.asarray(tensors[name]))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint")
        version, n = struct.unpack("<II", _read_exact(fh, 8))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported format version {version}")
        header = json.loads(_read_exact(fh, n))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, ln).decode()
            tensors[name] = _read_array(fh)
    return header, tensors


def split_prefix(tensors: dict, prefix: str) -> dict:
    p = prefix + "."
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}


def with_prefix(state: dict, prefix: str) -> dict:
    return {f"{prefix}.{k}": v for k, v in state.items()}


# datasets ------------------------------------------------------------------

def save_dataset(ds: FaceDataset, out_dir) -> list[Path]:
    """One tensor file per column plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in FaceDataset.FIELDS:
        p = out / f"{name}.agt"
        save_tensor(p, getattr(ds, name))
        written.append(p)
    p = out / "manifest.json"
    write_json(p, ds.manifest)
    written.append(p)
    return written


def load_dataset(in_dir, verify: bool = True) -> FaceDataset:
    src = Path(in_dir)
    manifest = read_json(src / "manifest.json")
    ds = FaceDataset(*(load_tensor(src / f"{name}.agt") for name in FaceDataset.FIELDS), manifest=manifest)
    if verify and manifest:
        if manifest.get("manifest_hash") != manifest_hash(manifest):
            raise FormatError("dataset manifest hash does not match its contents")
        if manifest.get("checksums") and manifest["checksums"] != ds.checksums():
            raise FormatError("dataset tensors do not match the manifest checksums")
    return ds


def save_codebook(cb: AgeCodebook, path) -> None:
    write_json(path, cb.to_json())


def load_codebook(path) -> AgeCodebook:
    return AgeCodebook.from_json(read_json(path))


# text formats --------------------------------------------------------------

def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def to_gray8(image) -> np.ndarray:
    """Map [-1, 1] to 0..255 with rounding; values outside are clipped."""
    img = np.asarray(image, dtype=np.float64).reshape(np.shape(image)[-2:])
    return np.round((np.clip(img, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def write_pgm(path, image, scale: int = 1) -> None:
    """Binary (P5) 8-bit graymap, optionally nearest-neighbour upscaled."""
    g = to_gray8(image)
    if scale > 1:
        g = np.kron(g, np.ones((scale, scale), dtype=np.uint8))
    h, w = g.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(g.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise FormatError(f"{path}: truncated PGM header")
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise FormatError(f"{path}: only binary PGM is supported")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported")
    # exactly one whitespace byte separates the header from the raster
    raster = data[pos + 1:pos + 1 + w * h]
    if len(raster) != w * h:
        raise FormatError(f"{path}: raster shorter than {w}x{h}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w)


def image_grid(rows, pad: float = -1.0, gap: int = 1) -> np.ndarray:
    """Tile a list of rows (each a list of HxW images) into one array."""
    rows = [[np.asarray(im).reshape(np.shape(im)[-2:]) for im in r] for r in rows]
    h, w = rows[0][0].shape
    n_rows, n_cols = len(rows), max(len(r) for r in rows)
    grid = np.full((n_rows * (h + gap) - gap, n_cols * (w + gap) - gap), pad)
    for i, r in enumerate(rows):
        for j, im in enumerate(r):
            grid[i * (h + gap):i * (h + gap) + h, j * (w + gap):j * (w + gap) + w] = im
    return grid


def output_root(default="runs") -> Path:
    """Output root, overridable through ``AGEDIT_OUTPUT_ROOT``."""
    return Path(os.environ.get("AGEDIT_OUTPUT_ROOT", default))
