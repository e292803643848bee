"""Self-describing binary container for checkpoints and exported models.

Layout (all integers little-endian)::

    b"DGCV1"            5-byte magic
    uint16              format version (1)
    uint32              header length in bytes
    header              UTF-8 JSON, keys sorted
    body                tensors back to back, in header["tensors"] order

Each tensor entry records ``name``, ``dtype`` (``f32``/``f64``/``i64``, all
little-endian), ``shape``, ``offset`` and ``nbytes`` within the body, and the
header carries a CRC-32 of the body. ``header["kind"]`` is ``"checkpoint"``
(trainable model, continuous gates stored as f64, optional optimizer state)
or ``"compiled"`` (lowered group convolutions, no gates).
"""

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass

import numpy as np

from .compiler import CompiledConv2d, CompiledLayer
from .errors import CheckpointError
from .layer import DGConv2d
from .model import GroupableNet, ModelConfig

MAGIC = b"DGCV1"
FORMAT_VERSION = 1
DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8"}
_PREFIX = struct.Struct("<5sHI")


def atomic_write(path, data):
    """Write bytes to ``path`` through a temporary file and a rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_container(header, tensors):
    """Serialize ``header`` (dict) and ``tensors`` (list of ``(name, array, tag)``)."""
    directory, chunks, offset = [], [], 0
    for name, array, tag in tensors:
        data = np.ascontiguousarray(array, dtype=DTYPES[tag]).tobytes()
        directory.append({"name": name, "dtype": tag, "shape": list(array.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    body = b"".join(chunks)
    header = dict(header, tensors=directory, crc32=zlib.crc32(body), format_version=FORMAT_VERSION)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)) + blob + body


def decode_container(raw):
    """Inverse of :func:`encode_container`: ``(header, {name: array})``."""
    if len(raw) < _PREFIX.size:
        raise CheckpointError("file too short for a container header")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise CheckpointError("header is truncated")
    try:
        header = json.loads(raw[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"header is not valid JSON: {e}") from None
    body = raw[start:]
    if zlib.crc32(body) != header.get("crc32"):
        raise CheckpointError("body checksum mismatch")
    tensors = {}
    for entry in header.get("tensors", []):
        end = entry["offset"] + entry["nbytes"]
        if end > len(body):
            raise CheckpointError(f"tensor {entry['name']} extends past end of file")
        arr = np.frombuffer(body, dtype=DTYPES[entry["dtype"]], count=entry["nbytes"] // np.dtype(DTYPES[entry["dtype"]]).itemsize,
                            offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(DTYPES[entry["dtype"]].replace("<", "="))
    return header, tensors


def read_container(path):
    with open(path, "rb") as f:
        return decode_container(f.read())


@dataclass
class Checkpoint:
    model: GroupableNet
    step: int
    budget: dict
    meta: dict
    velocity: dict = None


def _param_tag(name):
    return "f64" if name.endswith(".gates") else "f32"


def encode_checkpoint(model, step=0, optimizer=None, budget=None, meta=None):
    tensors = [(name, p.data, _param_tag(name)) for name, p in model.named_parameters()]
    tensors += [(name, b, "f32") for name, b in model.named_buffers()]
    if optimizer is not None:
        tensors += [(f"opt.{name}", v, _param_tag(name)) for name, v in optimizer.velocity.items()]
    header = {
        "kind": "checkpoint",
        "model_config": model.config.to_dict(),
        "step": int(step),
        "budget": budget,
        "meta": meta or {},
        "has_optimizer": optimizer is not None,
    }
    return encode_container(header, tensors)


def save_checkpoint(path, model, step=0, optimizer=None, budget=None, meta=None):
    atomic_write(path, encode_checkpoint(model, step, optimizer, budget, meta))


def _model_from_header(header):
    try:
        config = ModelConfig.from_dict(header["model_config"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"invalid model config: {e}") from None
    return GroupableNet(config)


def load_checkpoint(path):
    header, tensors = read_container(path)
    if header.get("kind") != "checkpoint":
        raise CheckpointError(f"{path} holds a {header.get('kind')!r} file, not a checkpoint")
    model = _model_from_header(header)
    state = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as e:
        raise CheckpointError(str(e)) from None
    velocity = {k[4:]: v for k, v in tensors.items() if k.startswith("opt.")} or None
    return Checkpoint(model, header["step"], header.get("budget"), header.get("meta", {}), velocity)


def encode_compiled(model, report=None, meta=None):
    """Serialize a compiled network; DGConv kernels and gates are replaced by group kernels."""
    tensors, layers = [], []
    for i, mid in enumerate(model.mid_layers()):
        if isinstance(mid, DGConv2d):
            raise CheckpointError(f"block{i}.mid is not compiled")
    for name, p in model.named_parameters():
        tensors.append((name, p.data, "f32"))
    for name, b in model.named_buffers():
        tensors.append((name, b, "f32"))
    for i, mid in enumerate(model.mid_layers()):
        if isinstance(mid, CompiledConv2d):
            c = mid.compiled
            prefix = f"block{i}.mid."
            tensors += [(prefix + "kernels", c.kernels, "f32"), (prefix + "perm_in", c.perm_in, "i64"),
                        (prefix + "perm_out", c.perm_out, "i64")]
            layers.append({"block": i, "groups": c.groups, "connections": c.connections,
                           "stride": c.stride, "padding": c.padding})
    header = {
        "kind": "compiled",
        "model_config": model.config.to_dict(),
        "compiled_layers": layers,
        "savings": report,
        "meta": meta or {},
    }
    return encode_container(header, tensors)


def save_compiled(path, model, report=None, meta=None):
    atomic_write(path, encode_compiled(model, report, meta))


def load_compiled(path):
    header, tensors = read_container(path)
    if header.get("kind") != "compiled":
        raise CheckpointError(f"{path} holds a {header.get('kind')!r} file, not a compiled model")
    model = _model_from_header(header)
    try:
        for entry in header["compiled_layers"]:
            i = entry["block"]
            prefix = f"block{i}.mid."
            compiled = CompiledLayer(
                perm_in=tensors[prefix + "perm_in"].astype(np.int64),
                perm_out=tensors[prefix + "perm_out"].astype(np.int64),
                kernels=tensors[prefix + "kernels"],
                groups=entry["groups"],
                connections=entry["connections"],
                stride=entry["stride"],
                padding=entry["padding"],
            )
            model.replace_mid(i, CompiledConv2d(compiled))
        # compiled mids own no parameters, so only the dense layers are matched
        model.load_state_dict(tensors)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"corrupt compiled model: {e}") from None
    return model, header


def load_any(path):
    """Load either kind of file; returns ``(model, header)``."""
    header, _ = read_container(path)
    if header.get("kind") == "compiled":
        return load_compiled(path)
    ckpt = load_checkpoint(path)
    return ckpt.model, header
