"""Checkpoint files: one JSON header line, then raw float64 values.

Layout::

    {"format": "vrnn-checkpoint", "version": 1, "model": {...},
     "params": [[name, shape], ...], "extra": [[name, shape], ...],
     "meta": {...}}\\n
    <params values, little-endian float64, header order>
    <extra values, same encoding>

``extra`` carries optimizer moments for resumable training; ``meta`` holds
free-form scalars (epoch counters, metric history).
"""

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import FormatError
from .models import Model, ModelConfig, build_params

FORMAT_NAME = "vrnn-checkpoint"
FORMAT_VERSION = 1


def checkpoint_bytes(model, extra=None, meta=None):
    extra = extra or {}
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "model": asdict(model.config),
        "params": [[n, list(a.shape)] for n, a in model.params.items()],
        "extra": [[n, list(np.shape(a))] for n, a in extra.items()],
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    body = [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in model.params.items()]
    body += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in extra.values()]
    return head + b"".join(body)


def save_checkpoint(path, model, extra=None, meta=None):
    Path(path).write_bytes(checkpoint_bytes(model, extra, meta))


def parse_checkpoint(buf):
    """Return ``(model, extra, meta)``."""
    nl = buf.find(b"\n")
    if nl < 0:
        raise FormatError("missing checkpoint header", 0)
    try:
        header = json.loads(buf[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}", 0) from exc
    if header.get("format") != FORMAT_NAME:
        raise FormatError(f"not a checkpoint (format {header.get('format')!r})", 0)
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('version')!r}", 0)
    config = ModelConfig(**header["model"])
    store = build_params(config)
    expected = [[n, list(a.shape)] for n, a in store.items()]
    if header["params"] != expected:
        raise FormatError("parameter table does not match the model configuration", 0)
    off = nl + 1

    def take(shape):
        nonlocal off
        n = int(np.prod(shape)) if shape else 1
        if off + 8 * n > len(buf):
            raise FormatError("truncated checkpoint values", off)
        a = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
        return a

    for name, shape in header["params"]:
        store[name] = take(shape)
    extra = {name: take(shape) for name, shape in header["extra"]}
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", off)
    return Model(config, store), extra, header["meta"]


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())
