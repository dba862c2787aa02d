"""Binary checkpoints.

Layout: the magic b"REKD1", then one record per tensor

    u32 name length | utf-8 name | u8 dtype tag | u32 rank | u32 extents... | payload

with little-endian row-major payloads. The final record, `__config`, holds the
model configuration as key=value text (dtype tag 2).
"""
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Optional, Tuple, Union

import numpy as np
from src.config import RekdConfig
from src.errors import (
    BadMagicError,
    MissingFileError,
    ShapeMismatchError,
    TruncatedCheckpointError,
)
from src.model import RekdModel
from src.monitoring import logger
from src.tensor import BatchNormState

MAGIC = b"REKD1"
CONFIG_RECORD = "__config"

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TEXT = 2
_BUFFER_SUFFIXES = (".running_mean", ".running_var")
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _write_record(fh: BinaryIO, name: str, tag: int, shape: Tuple[int, ...], payload: bytes):
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<BI", tag, len(shape)))
    fh.write(struct.pack(f"<{len(shape)}I", *shape))
    fh.write(payload)


def save_checkpoint(model: RekdModel, path: Union[str, Path]):
    """Write parameters, batch-norm buffers and the config to `path`."""
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        for name, tensor in model.tensors().items():
            arr = np.ascontiguousarray(tensor)
            tag = _TAGS[arr.dtype]
            _write_record(fh, name, tag, arr.shape, arr.astype(_DTYPES[tag]).tobytes())
        text = model.config.to_text().encode("utf-8")
        _write_record(fh, CONFIG_RECORD, _TEXT, (len(text),), text)
    logger.debug("checkpoint saved", extra={"path": str(path)})


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint ends at byte {len(self.data)}, needed {self.offset + n}"
            )
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def done(self) -> bool:
        return self.offset >= len(self.data)


def read_records(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Optional[str]]:
    """Tensors by name, and the config text if present."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no checkpoint at {path}")
    reader = _Reader(path.read_bytes())
    if reader.data[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path} is not a rekd checkpoint")
    reader.take(len(MAGIC))

    tensors: Dict[str, np.ndarray] = {}
    config_text = None
    while not reader.done:
        (length,) = reader.unpack("<I")
        name = reader.take(length).decode("utf-8")
        tag, rank = reader.unpack("<BI")
        shape = reader.unpack(f"<{rank}I") if rank else ()
        if tag == _TEXT:
            config_text = reader.take(int(np.prod(shape))).decode("utf-8")
            continue
        if tag not in _DTYPES:
            raise TruncatedCheckpointError(f"unknown dtype tag {tag} in record {name}")
        dtype = _DTYPES[tag]
        count = int(np.prod(shape))
        payload = reader.take(count * dtype.itemsize)
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.name)
    return tensors, config_text


def load_checkpoint(path: Union[str, Path], config: Optional[RekdConfig] = None) -> RekdModel:
    """Rebuild a model from `path`.

    With `config`, tensor shapes must match that configuration; otherwise the
    stored configuration is used.
    """
    tensors, config_text = read_records(path)
    stored = RekdConfig.from_text(config_text) if config_text is not None else None
    config = config or stored
    if config is None:
        raise TruncatedCheckpointError(f"{path} has no {CONFIG_RECORD} record")

    expected = RekdModel.initialize(config, seed=0).tensors()
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise ShapeMismatchError(f"checkpoint lacks {', '.join(missing)}")
    for name, ref in expected.items():
        if tensors[name].shape != ref.shape:
            raise ShapeMismatchError(
                f"{name} has shape {tensors[name].shape}, configuration expects {ref.shape}"
            )

    params = {
        name: tensors[name].astype(config.dtype)
        for name in expected
        if not name.endswith(_BUFFER_SUFFIXES)
    }
    bn_states = {
        f"bn{l}": BatchNormState(
            tensors[f"bn{l}.running_mean"].astype(config.dtype),
            tensors[f"bn{l}.running_var"].astype(config.dtype),
        )
        for l in range(config.num_layers)
    }
    return RekdModel(config, params, bn_states)
