"""Binary checkpoint container.

Layout (little endian)::

    b"PANK1\\n"
    u32 config length, config text (utf-8 key = value lines)
    u32 tensor count
    per tensor: u16 name length, name, u8 ndim, u32 * ndim shape, float64 data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import TrainConfig

MAGIC = b"PANK1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model, cfg: TrainConfig, path) -> None:
    state = model.state_dict()
    cfg_bytes = cfg.to_text().encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(cfg_bytes)), cfg_bytes, struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[TrainConfig, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, raw, pos)
        pos += struct.calcsize(fmt)
        return vals

    (n_cfg,) = take("<I")
    cfg = TrainConfig.from_text(raw[pos : pos + n_cfg].decode("utf-8"))
    pos += n_cfg
    (count,) = take("<I")
    state = {}
    for _ in range(count):
        (n_name,) = take("<H")
        name = raw[pos : pos + n_name].decode("utf-8")
        pos += n_name
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        state[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return cfg, state


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns ``(model, cfg)``."""
    from .model import PANet

    cfg, state = read_checkpoint(path)
    model = PANet(cfg)
    model.load_state_dict(state)
    return model, cfg
