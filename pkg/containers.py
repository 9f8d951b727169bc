import os
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from errors import GeometryError

# CONFIG
TENSOR_MAGIC = b'SPTN'
TENSOR_VERSION = 1
HEADER_FORMAT = '<4sHHIIH14x'  # magic, version, channels, freq_bins, frames, dtype code
HEADER_SIZE = struct.calcsize(HEADER_FORMAT)
DTYPE_CODES = {1: np.float32}
# token file: repeated (name length, utf-8 name, pitch, count, count uint8 tokens)
TOKEN_RECORD_HEAD = '<H'
TOKEN_RECORD_BODY = '<hI'


@contextmanager
def atomic_path(path):
    """Yields a temp path in the target directory and renames it into place on success."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix='.tmp')
    os.close(fd)
    try:
        yield tmp_path
        os.replace(tmp_path, path)
    finally:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)


# ==========================================
# TENSOR CONTAINER
# ==========================================

def save_tensor(values, path):
    """Writes a (channels, freq_bins, frames) or (freq_bins, frames) grid."""
    values = np.asarray(values, dtype=np.float32)
    if values.ndim == 2:
        values = values[None]
    if values.ndim != 3:
        raise GeometryError(f"Container expects a 2-D or 3-D grid, got shape {values.shape}")
    channels, freq_bins, frames = values.shape
    header = struct.pack(HEADER_FORMAT, TENSOR_MAGIC, TENSOR_VERSION, channels, freq_bins, frames, 1)
    with atomic_path(path) as tmp_path:
        with open(tmp_path, 'wb') as f:
            f.write(header)
            f.write(np.ascontiguousarray(values).tobytes(order='C'))


def read_header(path):
    with open(path, 'rb') as f:
        raw = f.read(HEADER_SIZE)
    if len(raw) != HEADER_SIZE:
        raise GeometryError(f"'{path}' is too short to hold a container header.")
    magic, version, channels, freq_bins, frames, dtype_code = struct.unpack(HEADER_FORMAT, raw)
    if magic != TENSOR_MAGIC:
        raise GeometryError(f"'{path}' is not a feature container (magic {magic!r}).")
    if version != TENSOR_VERSION or dtype_code not in DTYPE_CODES:
        raise GeometryError(f"'{path}' has unsupported version {version} / dtype code {dtype_code}.")
    return channels, freq_bins, frames, DTYPE_CODES[dtype_code]


def load_tensor(path, mmap=False):
    channels, freq_bins, frames, dtype = read_header(path)
    expected = channels * freq_bins * frames * np.dtype(dtype).itemsize
    if os.path.getsize(path) - HEADER_SIZE != expected:
        raise GeometryError(f"'{path}' payload size does not match its header {channels}x{freq_bins}x{frames}.")
    if mmap:
        return np.memmap(path, dtype=dtype, mode='r', offset=HEADER_SIZE, shape=(channels, freq_bins, frames))
    with open(path, 'rb') as f:
        f.seek(HEADER_SIZE)
        data = np.frombuffer(f.read(), dtype=dtype)
    return data.reshape(channels, freq_bins, frames).copy()


# ==========================================
# TOKEN FILES
# ==========================================

@dataclass
class TokenSequence:
    tokens: np.ndarray  # uint8, one entry per analysis frame
    source_id: str = ''
    pitch: int = -1

    def __len__(self):
        return len(self.tokens)


def encode_token_record(seq):
    tokens = np.asarray(seq.tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() > 255):
        raise ValueError("Token values must fit in one byte.")
    name = seq.source_id.encode('utf-8')
    return (struct.pack(TOKEN_RECORD_HEAD, len(name)) + name
            + struct.pack(TOKEN_RECORD_BODY, int(seq.pitch), len(tokens))
            + tokens.astype(np.uint8).tobytes())


def write_tokens(sequences, path):
    if isinstance(sequences, TokenSequence):
        sequences = [sequences]
    with atomic_path(path) as tmp_path:
        with open(tmp_path, 'wb') as f:
            for seq in sequences:
                f.write(encode_token_record(seq))


def read_tokens(path):
    """Returns every record in a token file."""
    with open(path, 'rb') as f:
        blob = f.read()
    records, offset = [], 0
    head_size, body_size = struct.calcsize(TOKEN_RECORD_HEAD), struct.calcsize(TOKEN_RECORD_BODY)
    while offset < len(blob):
        try:
            (name_len,) = struct.unpack_from(TOKEN_RECORD_HEAD, blob, offset)
            offset += head_size
            name = blob[offset:offset + name_len].decode('utf-8')
            offset += name_len
            pitch, count = struct.unpack_from(TOKEN_RECORD_BODY, blob, offset)
            offset += body_size
        except struct.error as e:
            raise GeometryError(f"Truncated token record in '{path}'") from e
        except UnicodeDecodeError as e:
            raise GeometryError(f"Token record name in '{path}' is not UTF-8") from e
        if offset + count > len(blob):
            raise GeometryError(f"Truncated token record in '{path}'")
        tokens = np.frombuffer(blob[offset:offset + count], dtype=np.uint8).copy()
        offset += count
        records.append(TokenSequence(tokens, name, pitch))
    return records


def read_token_sequence(path):
    records = read_tokens(path)
    if not records:
        raise GeometryError(f"Token file '{path}' is empty.")
    return records[0]
