"""
Checkpoint codec.

Layout (little-endian):
    b"PDEM" | uint32 version | uint32 header length | JSON header | float32 blob

The blob holds every parameter in declaration order followed by the
batch-norm running mean and variance of each layer, also in order.
"""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import ValidationError

from periscope.errors import CheckpointError
from periscope.models.network import CheckpointHeader, ParamEntry
from periscope.stages.network import DepthNet

logger = logging.getLogger(__name__)

MAGIC = b"PDEM"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def encode_checkpoint(model: DepthNet, training: Optional[dict[str, Any]] = None) -> bytes:
    state = model.state()
    params = [ParamEntry(name=n, shape=list(p.shape)) for n, p in model.named_parameters()]
    buffers = [
        ParamEntry(name=f"{name}.{stat}", shape=[len(st.running_mean)])
        for name, st in model.bn_states.items()
        for stat in ("running_mean", "running_var")
    ]
    header = CheckpointHeader(
        network=model.config, training=training or {}, params=params, buffers=buffers,
    )
    header_bytes = json.dumps(header.model_dump(mode="json"), sort_keys=True).encode("utf-8")
    blob = b"".join(
        np.asarray(state[entry.name], dtype="<f4").tobytes()
        for entry in [*params, *buffers]
    )
    return _PREFIX.pack(MAGIC, VERSION, len(header_bytes)) + header_bytes + blob


def decode_checkpoint(raw: bytes) -> tuple[DepthNet, CheckpointHeader]:
    if len(raw) < _PREFIX.size:
        raise CheckpointError("checkpoint truncated before header")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    try:
        header = CheckpointHeader.model_validate_json(raw[start:start + header_len])
    except ValidationError as exc:
        raise CheckpointError(f"invalid checkpoint header: {exc}") from exc

    blob = np.frombuffer(raw, dtype="<f4", offset=start + header_len)
    expected = sum(int(np.prod(e.shape)) for e in [*header.params, *header.buffers])
    if blob.size != expected:
        raise CheckpointError(f"checkpoint blob has {blob.size} floats, header describes {expected}")

    model = DepthNet.build(header.network, seed=0)
    declared = [(n, list(p.shape)) for n, p in model.named_parameters()]
    if declared != [(e.name, e.shape) for e in header.params]:
        raise CheckpointError("checkpoint parameter manifest does not match the network layout")

    snapshot: dict[str, np.ndarray] = {}
    offset = 0
    for entry in [*header.params, *header.buffers]:
        size = int(np.prod(entry.shape))
        snapshot[entry.name] = blob[offset:offset + size].astype(np.float64).reshape(entry.shape)
        offset += size
    model.load_state(snapshot)
    return model, header


def save_checkpoint(path: Path, model: DepthNet, training: Optional[dict[str, Any]] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model, training))
    logger.info("Checkpoint written: %s", path)


def load_checkpoint(path: Path) -> tuple[DepthNet, CheckpointHeader]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(raw)
