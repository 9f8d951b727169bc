import hashlib
import io
import logging
import os
import struct

import torch

from containers import atomic_path
from errors import CheckpointCorruptError, CheckpointError, CheckpointVersionError

# CONFIG
CHECKPOINT_MAGIC = b'VQGC'
CHECKPOINT_VERSION = 1
CHECKPOINT_HEADER = '<4sHQ32s'  # magic, version, payload length, sha256 of payload
CHECKPOINT_HEADER_SIZE = struct.calcsize(CHECKPOINT_HEADER)


def checkpoint_save(state, path, version=CHECKPOINT_VERSION):
    """
    Writes a checkpoint dict (named parameter blocks, optimizer state, cursor,
    config fingerprint) behind a versioned, checksummed header.
    """
    buffer = io.BytesIO()
    torch.save(state, buffer)
    payload = buffer.getvalue()
    header = struct.pack(CHECKPOINT_HEADER, CHECKPOINT_MAGIC, version, len(payload),
                         hashlib.sha256(payload).digest())
    with atomic_path(path) as tmp_path:
        with open(tmp_path, 'wb') as f:
            f.write(header)
            f.write(payload)
    logging.debug(f"Checkpoint written to {path} ({len(payload)} bytes).")


def checkpoint_load(path, expected_kind=None):
    if not os.path.exists(path):
        raise CheckpointError(f"Checkpoint not found: {path}")
    with open(path, 'rb') as f:
        blob = f.read()

    if len(blob) < CHECKPOINT_HEADER_SIZE:
        raise CheckpointCorruptError(f"'{path}' is truncated (no complete header).")
    magic, version, length, digest = struct.unpack_from(CHECKPOINT_HEADER, blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError(f"'{path}' is not a checkpoint (magic {magic!r}).")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"'{path}' has checkpoint version {version}, this build reads {CHECKPOINT_VERSION}.")

    payload = blob[CHECKPOINT_HEADER_SIZE:]
    if len(payload) != length or hashlib.sha256(payload).digest() != digest:
        raise CheckpointCorruptError(f"'{path}' failed its checksum (truncated or modified).")

    state = torch.load(io.BytesIO(payload), map_location='cpu', weights_only=False)
    if expected_kind is not None and state.get('kind') != expected_kind:
        raise CheckpointError(f"'{path}' holds a '{state.get('kind')}' checkpoint, expected '{expected_kind}'.")
    return state


def latest_checkpoint(directory, prefix):
    """Most recent `<prefix>_<step>.ckpt` in a directory, or None."""
    if not os.path.isdir(directory):
        return None
    candidates = []
    for name in os.listdir(directory):
        if name.startswith(prefix + '_') and name.endswith('.ckpt'):
            step = name[len(prefix) + 1:-len('.ckpt')]
            if step.isdigit():
                candidates.append((int(step), os.path.join(directory, name)))
    return max(candidates)[1] if candidates else None
