"""Binary checkpoint format "PMCK": named float32 tensors plus CRC32.

Layout (little-endian throughout):

    magic   4 bytes  b"PMCK"
    version u32      currently 1
    table            for each tensor:
                       name_len u32, name utf-8,
                       rank u32, dims u32[rank],
                       payload float32[product(dims)]
    crc32   u32      of the table region (everything after version)

The table is read until 4 bytes before EOF; the trailing CRC must match.
Model hyperparameters and the task tag ride along as reserved "meta.*"
entries so a checkpoint is self-describing.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .errors import FormatError
from .model import ModelConfig

MAGIC = b"PMCK"
VERSION = 1

_TASK_CODES = {"flow": 0.0, "depth": 1.0, "joint": 2.0}
_TASK_NAMES = {v: k for k, v in _TASK_CODES.items()}
_MODEL_FIELDS = ("D", "d", "layers", "head_dim", "K_prototypes", "T_cluster",
                 "T_dec", "patch", "hidden_width", "image_size", "channels",
                 "lookup_radius", "sinkhorn_iters")


def save_checkpoint(path, tensors: Dict[str, np.ndarray]):
    """Write named tensors; values are stored as float32."""
    table = bytearray()
    for name, arr in tensors.items():
        blob = np.asarray(arr, dtype="<f4")  # tobytes() serializes C-order
        encoded = name.encode("utf-8")
        table += struct.pack("<I", len(encoded))
        table += encoded
        table += struct.pack("<I", blob.ndim)
        table += struct.pack(f"<{blob.ndim}I", *blob.shape)
        table += blob.tobytes()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(table)
        f.write(struct.pack("<I", zlib.crc32(bytes(table)) & 0xFFFFFFFF))


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated checkpoint ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    table = blob[8:-4]
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    crc_actual = zlib.crc32(table) & 0xFFFFFFFF
    if crc_stored != crc_actual:
        raise FormatError(
            f"{path}: CRC mismatch (stored {crc_stored:#010x}, "
            f"computed {crc_actual:#010x})")
    tensors: Dict[str, np.ndarray] = {}
    pos = 0
    end = len(table)
    while pos < end:
        if pos + 4 > end:
            raise FormatError(f"{path}: truncated entry header at byte {8 + pos}")
        (name_len,) = struct.unpack_from("<I", table, pos)
        pos += 4
        if name_len == 0 or pos + name_len + 4 > end:
            raise FormatError(f"{path}: bad name field at byte {8 + pos}")
        name = table[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", table, pos)
        pos += 4
        if rank > 8 or pos + 4 * rank > end:
            raise FormatError(f"{path}: bad rank {rank} at byte {8 + pos}")
        dims = struct.unpack_from(f"<{rank}I", table, pos)
        pos += 4 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = 4 * count
        if pos + nbytes > end:
            raise FormatError(f"{path}: truncated payload at byte {8 + pos}")
        arr = np.frombuffer(table, dtype="<f4", count=count, offset=pos)
        tensors[name] = arr.reshape(dims).copy()
        pos += nbytes
    return tensors


# ---------------------------------------------------------------------------
# model-aware wrappers

def save_model_checkpoint(path, model) -> None:
    tensors = {name: t.data for name, t in model.named_parameters().items()}
    cfg = model.cfg
    tensors["meta.task"] = np.array([_TASK_CODES[model.task]], dtype=np.float32)
    tensors["meta.model"] = np.array(
        [getattr(cfg, f) for f in _MODEL_FIELDS] + [cfg.sinkhorn_reg],
        dtype=np.float32)
    save_checkpoint(path, tensors)


def load_model_checkpoint(path) -> Tuple[ModelConfig, str, Dict[str, np.ndarray]]:
    tensors = load_checkpoint(path)
    if "meta.task" not in tensors or "meta.model" not in tensors:
        raise FormatError(f"{path}: checkpoint lacks meta entries")
    task_code = float(tensors.pop("meta.task")[0])
    if task_code not in _TASK_NAMES:
        raise FormatError(f"{path}: unknown task code {task_code}")
    meta = tensors.pop("meta.model")
    if meta.size != len(_MODEL_FIELDS) + 1:
        raise FormatError(f"{path}: meta.model has {meta.size} fields, "
                          f"expected {len(_MODEL_FIELDS) + 1}")
    kwargs = {f: int(round(float(meta[i]))) for i, f in enumerate(_MODEL_FIELDS)}
    cfg = ModelConfig(sinkhorn_reg=float(meta[-1]), **kwargs)
    return cfg, _TASK_NAMES[task_code], tensors


def build_model_from_checkpoint(path):
    from .model import MotionModel
    cfg, task, tensors = load_model_checkpoint(path)
    model = MotionModel(cfg, task=task)
    model.load_state(tensors)
    return model
