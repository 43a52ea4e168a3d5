"""Binary and text file formats used across the pipeline.

All binary formats start with a 4-byte magic and a little-endian u16
version; readers reject any other version. Payload floats are
little-endian float32.

- NUIV voxel grid: dims as three u32, then the occupancy bit-packed in
  C order (x, then y, then z), least significant bit first.
- Latent set (``NUIL``): count, V, c as u32, then count x V x c floats.
- Latent grid (``NUIG``): rows, cols, V, c as u32, then the cells.
- Checkpoint (``NUIC``): u32 manifest length, a JSON manifest holding the
  model config and each tensor's name, shape and byte offset, then the data.
- Chunk dataset: a directory with ``records.bin`` (``NUID`` header, then
  one record per quad: scene, origin, chunk side and the four chunk heights,
  then each chunk's bit-packed occupancy) and ``index.json`` (record offsets
  and the train/val split).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .chunks import SLOT_OFFSETS, ChunkSample, QuadChunk
from .voxel import Mesh, OccupancyGrid

VERSION = 1
_HEAD = struct.Struct("<4sH")


class FormatError(ValueError):
    pass


def _header(magic: bytes) -> bytes:
    return _HEAD.pack(magic, VERSION)


def _check_header(buf: bytes, magic: bytes, what: str) -> int:
    if len(buf) < _HEAD.size:
        raise FormatError(f"{what}: file too short")
    got, version = _HEAD.unpack_from(buf)
    if got != magic:
        raise FormatError(f"{what}: bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"{what}: unsupported version {version} (this build reads version {VERSION})")
    return _HEAD.size


def sniff(path) -> bytes:
    with open(path, "rb") as f:
        return f.read(4)


# voxel grids

def pack_bits(data: np.ndarray) -> bytes:
    return np.packbits(np.ascontiguousarray(data, dtype=bool).ravel(), bitorder="little").tobytes()


def unpack_bits(buf: bytes, shape) -> np.ndarray:
    n = int(np.prod(shape))
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), count=n, bitorder="little")
    return bits.astype(bool).reshape(shape)


def encode_nuiv(grid: OccupancyGrid) -> bytes:
    return _header(b"NUIV") + struct.pack("<3I", *grid.dims) + pack_bits(grid.data)


def decode_nuiv(buf: bytes) -> OccupancyGrid:
    off = _check_header(buf, b"NUIV", "voxel file")
    dims = struct.unpack_from("<3I", buf, off)
    off += 12
    need = (int(np.prod(dims)) + 7) // 8
    if len(buf) - off != need:
        raise FormatError(f"voxel file: payload is {len(buf) - off} bytes, dims {dims} need {need}")
    return OccupancyGrid(unpack_bits(buf[off:], dims))


def nuiv_dims(path) -> tuple[int, int, int]:
    with open(path, "rb") as f:
        head = f.read(_HEAD.size + 12)
    off = _check_header(head, b"NUIV", "voxel file")
    return struct.unpack_from("<3I", head, off)


def write_nuiv(path, grid: OccupancyGrid):
    Path(path).write_bytes(encode_nuiv(grid))


def read_nuiv(path) -> OccupancyGrid:
    return decode_nuiv(Path(path).read_bytes())


# meshes

def write_obj(path, mesh: Mesh):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def read_obj(path) -> Mesh:
    verts, tris = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            tris.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3))


# latents

def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def encode_latents(z: np.ndarray) -> bytes:
    """``z`` is ``(count, V, c)``."""
    z = np.asarray(z)
    if z.ndim != 3:
        raise ValueError(f"latent set must be (count, V, c), got shape {z.shape}")
    return _header(b"NUIL") + struct.pack("<3I", *z.shape) + _f32(z)


def decode_latents(buf: bytes) -> np.ndarray:
    off = _check_header(buf, b"NUIL", "latent file")
    shape = struct.unpack_from("<3I", buf, off)
    return _payload(buf, off + 12, shape, "latent file")


def _payload(buf, off, shape, what):
    need = 4 * int(np.prod(shape))
    if len(buf) - off != need:
        raise FormatError(f"{what}: payload is {len(buf) - off} bytes, shape {shape} needs {need}")
    return np.frombuffer(buf, dtype="<f4", offset=off).reshape(shape).astype(np.float32)


def write_latents(path, z):
    Path(path).write_bytes(encode_latents(z))


def read_latents(path) -> np.ndarray:
    return decode_latents(Path(path).read_bytes())


def encode_latent_grid(cells: np.ndarray) -> bytes:
    cells = np.asarray(cells)
    if cells.ndim != 4:
        raise ValueError(f"latent grid must be (rows, cols, V, c), got shape {cells.shape}")
    return _header(b"NUIG") + struct.pack("<4I", *cells.shape) + _f32(cells)


def decode_latent_grid(buf: bytes) -> np.ndarray:
    off = _check_header(buf, b"NUIG", "latent grid file")
    shape = struct.unpack_from("<4I", buf, off)
    return _payload(buf, off + 16, shape, "latent grid file")


def write_latent_grid(path, cells):
    Path(path).write_bytes(encode_latent_grid(cells))


def read_latent_grid(path) -> np.ndarray:
    return decode_latent_grid(Path(path).read_bytes())


# checkpoints

def encode_checkpoint(tensors: dict, meta: dict) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        raw = _f32(arr)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode()
    return _header(b"NUIC") + struct.pack("<I", len(manifest)) + manifest + b"".join(chunks)


def decode_checkpoint(buf: bytes) -> tuple[dict, dict]:
    off = _check_header(buf, b"NUIC", "checkpoint")
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    manifest = json.loads(buf[off:off + n])
    base = off + n
    tensors = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"]))
        start = base + e["offset"]
        if start + 4 * count > len(buf):
            raise FormatError(f"checkpoint: tensor {e['name']} runs past the end of the file")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return tensors, manifest["meta"]


def save_module(path, module: torch.nn.Module, kind: str, config: dict, extra: dict | None = None):
    meta = {"kind": kind, "config": config, **(extra or {})}
    Path(path).write_bytes(encode_checkpoint(module.state_dict(), meta))


def load_module(path, builders: dict):
    """Rebuild a module from a checkpoint; ``builders`` maps kind -> callable(config)."""
    tensors, meta = decode_checkpoint(Path(path).read_bytes())
    kind = meta.get("kind")
    if kind not in builders:
        raise FormatError(f"checkpoint holds a {kind!r} model, expected one of {sorted(builders)}")
    module = builders[kind](meta["config"])
    module.load_state_dict(tensors)
    module.eval()
    return module, meta


# chunk datasets

_REC = struct.Struct("<I2iI4I")  # scene, origin x, origin z, chunk side, four chunk heights


def encode_quad(q: QuadChunk) -> bytes:
    s = q.chunks[0].size
    head = _REC.pack(q.scene, q.origin[0], q.origin[1], s, *(c.h_vox for c in q.chunks))
    return head + b"".join(pack_bits(c.occ) for c in q.chunks)


def decode_quad(buf: bytes, offset: int = 0) -> tuple[QuadChunk, int]:
    scene, i, k, s, *heights = _REC.unpack_from(buf, offset)
    offset += _REC.size
    chunks = []
    for (a, b), h in zip(SLOT_OFFSETS, heights):
        nbytes = (s * h * s + 7) // 8
        occ = unpack_bits(buf[offset:offset + nbytes], (s, h, s))
        offset += nbytes
        center = (i - s + a * s + s // 2, k - s + b * s + s // 2)
        chunks.append(ChunkSample(center, occ, h))
    return QuadChunk((i, k), chunks, max(heights), scene), offset


def split_key(q: QuadChunk) -> int:
    digest = hashlib.blake2b(struct.pack("<I2i", q.scene, *q.origin), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def assign_split(quads: list[QuadChunk], val_fraction: float = 0.05) -> list[str]:
    """Deterministic split by origin hash: the quads with the smallest hashes go to validation."""
    n_val = int(round(len(quads) * val_fraction))
    if len(quads) > 1:
        n_val = min(max(n_val, 1 if val_fraction > 0 else 0), len(quads) - 1)
    order = sorted(range(len(quads)), key=lambda i: (split_key(quads[i]), i))
    val = set(order[:n_val])
    return ["val" if i in val else "train" for i in range(len(quads))]


def write_dataset(path, quads: list[QuadChunk], val_fraction: float = 0.05, meta: dict | None = None):
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    splits = assign_split(quads, val_fraction)
    offsets, body = [], bytearray(_header(b"NUID"))
    for q in quads:
        offsets.append(len(body))
        body += encode_quad(q)
    (root / "records.bin").write_bytes(bytes(body))
    index = {"version": VERSION, "count": len(quads), "offsets": offsets, "split": splits,
             "chunk": quads[0].chunks[0].size if quads else None, "meta": meta or {}}
    (root / "index.json").write_text(json.dumps(index, indent=1))


def read_dataset(path, split: str | None = None) -> list[QuadChunk]:
    root = Path(path)
    index = json.loads((root / "index.json").read_text())
    if index.get("version") != VERSION:
        raise FormatError(f"dataset index: unsupported version {index.get('version')}")
    buf = (root / "records.bin").read_bytes()
    _check_header(buf, b"NUID", "dataset records")
    out = []
    for off, sp in zip(index["offsets"], index["split"]):
        if split is None or sp == split:
            out.append(decode_quad(buf, off)[0])
    return out


def dataset_index(path) -> dict:
    return json.loads((Path(path) / "index.json").read_text())
