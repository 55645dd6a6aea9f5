"""Model checkpoint files.

Layout (little-endian)::

    b"PRVC" | u32 version | u32 header_len | header (UTF-8 JSON) | float32 blob

The header records dims, seeds, the resolved training config and its hash,
and the ordered ``[name, shape]`` list of parameters.  The blob holds the
parameters in that order (inheritance then exploration; video then text
encoder; names as in :meth:`EncoderParams.names`), each row-major.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Tensor
from .training import ModelState, TrainConfig, init_model

MAGIC = b"PRVC"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def save_checkpoint(path: str | Path, state: ModelState, config: TrainConfig,
                    dims: dict[str, int], extra: dict | None = None) -> None:
    named = state.named_parameters()
    header = {
        "format": "prvr-checkpoint",
        "dims": {**dims, "hidden_size": config.hidden_size, "heads": config.heads,
                 "depth": config.depth, "ff_mult": config.ff_mult, "max_frames": config.max_frames},
        "seed": config.seed,
        "config_hash": config.hash(),
        "config": config.to_dict(),
        "params": [[name, list(t.shape)] for name, t in named],
        **(extra or {}),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(t.data, dtype="<f4").tobytes() for _, t in named)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(blob)


def read_header(path: str | Path) -> dict:
    return _read(path)[0]


def _read(path: str | Path) -> tuple[dict, bytes]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError("bad checkpoint magic, expected b'PRVC'", str(path), 0)
    if len(raw) < _PREFIX.size:
        raise FormatError("truncated checkpoint header", str(path), len(raw))
    _, version, hlen = _PREFIX.unpack_from(raw, 0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", str(path), 4)
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}", str(path), _PREFIX.size) from None
    return header, raw[_PREFIX.size + hlen:]


def load_checkpoint(path: str | Path) -> tuple[ModelState, TrainConfig, dict]:
    header, blob = _read(path)
    config = TrainConfig.from_dict(header["config"])
    dims = header["dims"]
    state = init_model(config, dims["video_dim"], dims["text_dim"])
    named = state.named_parameters()
    expected = [[n, list(t.shape)] for n, t in named]
    if expected != header["params"]:
        raise FormatError("parameter layout in header does not match the model", str(path))
    total = sum(int(np.prod(t.shape)) for _, t in named)
    if len(blob) != 4 * total:
        raise FormatError(f"parameter blob has {len(blob)} bytes, expected {4 * total}", str(path))
    values = np.frombuffer(blob, dtype="<f4").astype(np.float64)
    offset = 0
    for _, t in named:
        n = int(np.prod(t.shape))
        t.data = values[offset:offset + n].reshape(t.shape).copy()
        offset += n
    return state, config, header
