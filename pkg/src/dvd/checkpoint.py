"""Binary checkpoints for encoders, classifier heads and drift models.

Layout (little-endian)::

    b"DVD1"  u16 version  u8 role  u8 flags(bit0 = frozen)
    [role D only]  u32 T  u8 n_freqs
    u32 n_layers
    per layer: u32 rows  u32 cols  u8 activation  f32 weights (rows*cols)  f32 biases (cols)

Weights are stored as (fan_in, fan_out), row-major.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .databench import atomic_write
from .driftnet import DriftModel
from .errors import CheckpointRoleError, FormatError, ParameterError

MAGIC = b"DVD1"
VERSION = 1
ACTIVATION_TAGS = {"identity": 0, "relu": 1, "softmax": 2}
_TAG_ACTIVATIONS = {v: k for k, v in ACTIVATION_TAGS.items()}

# Source and adapted encoders share a tag so a zero-epoch adaptation
# reproduces the source checkpoint byte for byte.
ROLE_TAGS = {"G": 1, "F": 2, "D": 3}
ROLE_ALIASES = {"Gs": "G", "Gt": "G", "G": "G", "F": "F", "D": "D"}
_TAG_ROLES = {v: k for k, v in ROLE_TAGS.items()}


def _role(name: str) -> str:
    try:
        return ROLE_ALIASES[name]
    except KeyError:
        raise ParameterError(f"unknown checkpoint role {name!r}") from None


def encode_checkpoint(model, role: str, frozen: bool | None = None) -> bytes:
    """Serialise an ``MlpNet`` (roles G/F) or a ``DriftModel`` (role D)."""
    role = _role(role)
    is_drift = isinstance(model, DriftModel)
    if (role == "D") != is_drift:
        raise CheckpointRoleError(f"role {role!r} does not match a {type(model).__name__}")
    net = model.net if is_drift else model
    frozen = net.frozen if frozen is None else frozen
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HBB", VERSION, ROLE_TAGS[role], 1 if frozen else 0))
    if is_drift:
        buf.write(struct.pack("<IB", model.T, model.n_freqs))
    buf.write(struct.pack("<I", len(net.layers)))
    for layer in net.layers:
        rows, cols = layer.weight.shape
        buf.write(struct.pack("<IIB", rows, cols, ACTIVATION_TAGS[layer.activation]))
        buf.write(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model, path, role: str, frozen: bool | None = None) -> Path:
    atomic_write(path, encode_checkpoint(model, role, frozen))
    return Path(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data: bytes, expect: str | None = None):
    """Inverse of ``encode_checkpoint``; returns ``(model, role, frozen)``.

    ``expect`` names the role the caller needs and raises
    ``CheckpointRoleError`` on mismatch.
    """
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version, tag, flags = r.unpack("<HBB", "header")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    if tag not in _TAG_ROLES:
        raise FormatError(f"unknown role tag {tag}", 6)
    role = _TAG_ROLES[tag]
    if expect is not None and _role(expect) != role:
        raise CheckpointRoleError(f"expected a {expect} checkpoint, found role {role}")
    frozen = bool(flags & 1)
    T = n_freqs = None
    if role == "D":
        T, n_freqs = r.unpack("<IB", "drift header")
    (n_layers,) = r.unpack("<I", "layer count")
    if n_layers == 0:
        raise FormatError("checkpoint has no layers", r.pos - 4)
    layers = []
    for i in range(n_layers):
        at = r.pos
        rows, cols, act = r.unpack("<IIB", f"layer {i} header")
        if act not in _TAG_ACTIVATIONS or rows == 0 or cols == 0:
            raise FormatError(f"bad header for layer {i}", at)
        w = np.frombuffer(r.take(4 * rows * cols, f"layer {i} weights"), dtype="<f4")
        b = np.frombuffer(r.take(4 * cols, f"layer {i} biases"), dtype="<f4")
        layers.append(
            dc.Layer(w.reshape(rows, cols).astype(np.float32), b.reshape(1, cols).astype(np.float32), _TAG_ACTIVATIONS[act])
        )
    if r.pos != len(data):
        raise FormatError("trailing bytes after last layer", r.pos)
    try:
        net = dc.MlpNet(layers, frozen=frozen)
        model = DriftModel(net, T, n_freqs) if role == "D" else net
    except ValueError as exc:
        raise FormatError(f"inconsistent layer shapes: {exc}", 0) from exc
    return model, role, frozen


def load_checkpoint(path, expect: str | None = None):
    """Read a checkpoint file; returns the network (or drift model) only."""
    model, _, _ = decode_checkpoint(Path(path).read_bytes(), expect)
    return model


def read_checkpoint(path, expect: str | None = None):
    return decode_checkpoint(Path(path).read_bytes(), expect)
