"""Binary model files.

Layout (all integers unsigned 32-bit little-endian)::

    b"RGAE" | version | tensor*

    tensor := name_len | name (UTF-8) | rank | dim * rank | float32 LE data (row-major)

Tensors run to the end of the file.  Name prefixes identify the component:
``gae/`` (Q, V, W_m), ``gru/`` (RGAE recurrent part), ``rnn/`` (baseline),
``opt/`` (optimizer accumulators) and ``meta/``.  Integer metadata such as
the GAE context length lives in the *name* of an empty tensor
(``meta/n=16``, dims ``[0]``), so a model file holds exactly as many floats
as the model has parameters.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .data import atomic_write
from .gae import GaeParams
from .recurrent import GRU_NAMES, BaselineRnn, GruParams, RgaeModel

MAGIC = b"RGAE"
VERSION = 1


class ModelFormatError(ValueError):
    pass


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise ModelFormatError("not an RGAE model file (bad magic)")
    if len(buf) < 8:
        raise ModelFormatError("truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    pos = 8
    out = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(buf):
                raise ModelFormatError(f"tensor {name!r} runs past the end of the file")
            out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise ModelFormatError(f"truncated file: {exc}") from None
    return out


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    atomic_write(path, encode_tensors(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def meta_tensor(key: str, value: int) -> tuple[str, np.ndarray]:
    return f"meta/{key}={int(value)}", np.zeros(0, np.float32)


def read_meta(tensors: dict) -> dict[str, int]:
    out = {}
    for name in tensors:
        if name.startswith("meta/") and "=" in name:
            k, _, v = name[5:].partition("=")
            try:
                out[k] = int(v)
            except ValueError:
                raise ModelFormatError(f"bad metadata entry {name!r}") from None
    return out


def model_tensors(model) -> dict[str, np.ndarray]:
    """Everything needed to rebuild ``model``."""
    if isinstance(model, GaeParams):
        out = {f"gae/{k}": v for k, v in model.tensors().items()}
        name, empty = meta_tensor("n", model.n)
    else:
        out = dict(model.tensors())
        if isinstance(model, RgaeModel):
            name, empty = meta_tensor("n", model.gae.n)
        elif isinstance(model, BaselineRnn):
            name, empty = meta_tensor("window", model.window)
        else:
            raise TypeError(f"cannot serialize {type(model).__name__}")
    out[name] = empty
    return out


def model_from_tensors(t: dict[str, np.ndarray]):
    """Rebuild a :class:`GaeParams`, :class:`RgaeModel` or :class:`BaselineRnn`."""
    meta = read_meta(t)
    try:
        if "gae/Q" in t:
            gae = GaeParams(t["gae/Q"], t["gae/V"], t["gae/W_m"], meta["n"])
            if "gru/W_z" in t:
                return RgaeModel(gae, GruParams(**{k: t[f"gru/{k}"] for k in GRU_NAMES}))
            return gae
        if "rnn/W_z" in t:
            return BaselineRnn(GruParams(**{k: t[f"rnn/{k}"] for k in GRU_NAMES}), meta["window"])
    except KeyError as exc:
        raise ModelFormatError(f"model file lacks tensor {exc}") from None
    raise ModelFormatError("file holds neither a GAE, an RGAE nor a baseline RNN")


def save_model(path, model, extra: dict | None = None) -> None:
    tensors = model_tensors(model)
    if extra:
        tensors.update(extra)
    save_tensors(path, tensors)


def load_model(path):
    return model_from_tensors(load_tensors(path))
