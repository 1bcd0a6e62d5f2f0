"""Binary checkpoints for parameters and the embedding cache.

Both files share one little-endian container layout::

    magic (4 bytes) | version u32 | entry count u64
    per entry: name length u64 | name (utf-8) | rank u64 | dims u64 * rank | values f64 * prod(dims)
    crc32 u32 of everything before it

Parameter files use magic ``SMPP``; cache snapshots use ``SMPS`` and store
per-layer embeddings, gradient-norm staleness and last-update stamps plus the
iteration and epoch counters.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .history import HistoryStore

PARAM_MAGIC = b"SMPP"
CACHE_MAGIC = b"SMPS"
VERSION = 1


class FormatError(ValueError):
    """Raised when a checkpoint file is malformed or of the wrong kind."""


def encode(entries, magic: bytes) -> bytes:
    """Serialize ``(name, array)`` pairs into the container layout."""
    entries = list(entries)
    parts = [magic, struct.pack("<IQ", VERSION, len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(data: bytes, magic: bytes) -> dict[str, np.ndarray]:
    """Parse a container; raises FormatError on any inconsistency."""
    if len(data) < 20:
        raise FormatError("file too short for a checkpoint header")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if body[:4] != magic:
        raise FormatError(f"bad magic {body[:4]!r}, expected {magic!r}")
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch (file corrupted)")
    version, count = struct.unpack_from("<IQ", body, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise FormatError("truncated entry")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<Q", take(8))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("entry name is not utf-8") from exc
        (rank,) = struct.unpack("<Q", take(8))
        if rank > 8:
            raise FormatError(f"implausible rank {rank} for {name!r}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        values = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
        if name in out:
            raise FormatError(f"duplicate entry {name!r}")
        out[name] = values.reshape(dims)
    if pos != len(body):
        raise FormatError("trailing bytes after last entry")
    return out


def _read(path, magic):
    return decode(Path(path).read_bytes(), magic)


def save_parameters(path, params) -> None:
    """Write a list of Parameters (or LayerParams) keyed by parameter name."""
    flat = []
    for p in params:
        flat.extend(p.parameters() if hasattr(p, "parameters") else [p])
    Path(path).write_bytes(encode(((p.name, p.value) for p in flat), PARAM_MAGIC))


def read_parameters(path) -> dict[str, np.ndarray]:
    return _read(path, PARAM_MAGIC)


def load_parameters(path, params) -> None:
    """Overwrite Parameter values in place; names and shapes must match exactly."""
    stored = read_parameters(path)
    flat = []
    for p in params:
        flat.extend(p.parameters() if hasattr(p, "parameters") else [p])
    names = {p.name for p in flat}
    if names != set(stored):
        missing, extra = sorted(names - set(stored)), sorted(set(stored) - names)
        raise FormatError(f"parameter names differ (missing {missing}, unexpected {extra})")
    for p in flat:
        if stored[p.name].shape != p.value.shape:
            raise FormatError(f"{p.name}: stored shape {stored[p.name].shape} != {p.value.shape}")
    for p in flat:
        p.value[...] = stored[p.name]


def save_cache(path, store: HistoryStore, epoch: int = 0) -> None:
    entries = [("iteration", np.array(float(store.iteration))),
               ("epoch", np.array(float(epoch))),
               ("g_thres", np.array(float(store.g_thres)))]
    for l in range(store.num_layers):
        entries += [(f"embeddings.{l}", store.embeddings[l]),
                    (f"grad_norm.{l}", store.grad_norm[l]),
                    (f"last_update.{l}", store.last_update[l].astype(np.float64))]
    Path(path).write_bytes(encode(entries, CACHE_MAGIC))


def load_cache(path) -> tuple[HistoryStore, int]:
    """Rebuild a HistoryStore from a snapshot; returns ``(store, epoch)``."""
    d = _read(path, CACHE_MAGIC)
    try:
        num_layers = sum(1 for k in d if k.startswith("embeddings."))
        embs = [d[f"embeddings.{l}"] for l in range(num_layers)]
        if num_layers == 0 or any(e.ndim != 2 for e in embs):
            raise FormatError("cache snapshot has no 2-d embedding layers")
        store = HistoryStore(embs[0], [e.shape[1] for e in embs], float(d["g_thres"]))
        for l in range(num_layers):
            s, stamp = d[f"grad_norm.{l}"], d[f"last_update.{l}"]
            if embs[l].shape[0] != store.num_nodes or s.shape != (store.num_nodes,) \
                    or stamp.shape != (store.num_nodes,):
                raise FormatError(f"layer {l}: inconsistent node count")
            store.embeddings[l][:] = embs[l]
            store.grad_norm[l][:] = s
            store.last_update[l][:] = stamp.astype(np.int64)
        store.iteration = int(d["iteration"])
        return store, int(d["epoch"])
    except KeyError as exc:
        raise FormatError(f"cache snapshot missing entry {exc.args[0]!r}") from exc
