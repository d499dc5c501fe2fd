"""Feature datasets: synthetic domain-shift generators and the DVDF file format.

DVDF layout (little-endian)::

    magic  b"DVDF"
    u16    version (1)
    u8     flags  bit0 labels, bit1 hidden labels, bit2 source domain
    u32    count
    u32    dim
    f32    features, count*dim, row-major
    u32    labels, count            (if bit0)
    u32    hidden labels, count     (if bit1; sidecar, read only on request)
"""
from __future__ import annotations

import contextlib
import csv
import os
import struct
import tempfile
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DataError,
    EmptyInputError,
    FormatError,
    HiddenLabelAccessError,
    ParameterError,
    SourceAccessError,
)

MAGIC = b"DVDF"
VERSION = 1
FLAG_LABELS = 1
FLAG_HIDDEN = 2
FLAG_SOURCE = 4
_HEADER = struct.Struct("<4sHBII")

# Centres chosen so that a 45 degree rotation about the origin moves roughly a
# third of every class across a source decision boundary while each rotated
# cluster keeps a correct majority.
DEFAULT_CENTERS = ((-0.95, 1.51), (-3.42, 2.54), (3.19, -0.72), (-1.07, -2.76))
DEFAULT_K = (15, 15, 6)  # (k_s_dif, k_t_dif, k_t)
NOISE_SWEEP = (0.1, 0.3, 0.5, 1.0, 1.5)


class FeatureDataset:
    """Feature rows with optional labels.

    Hidden labels (benchmark ground truth for an unlabeled domain) are held
    privately; reading them from a dataset that was built or loaded without
    them raises ``HiddenLabelAccessError``.
    """

    def __init__(self, features, labels=None, hidden_labels=None, name: str = "", domain=None):
        features = np.array(features, dtype=np.float32)
        if features.ndim == 1:
            features = features[None, :]
        if features.ndim != 2 or features.shape[1] == 0:
            raise DataError(f"features must be a (count, dim) array, got {features.shape}")
        n = features.shape[0]
        if labels is not None:
            labels = np.array(labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != n:
                raise DataError(f"{labels.shape[0]} labels for {n} features")
            if np.any(labels < 0):
                raise DataError("class ids must be non-negative")
        if hidden_labels is not None:
            hidden_labels = np.array(hidden_labels, dtype=np.int64).reshape(-1)
            if hidden_labels.shape[0] != n:
                raise DataError(f"{hidden_labels.shape[0]} hidden labels for {n} features")
        if domain not in (None, "source", "target"):
            raise ParameterError(f"unknown domain {domain!r}")
        self.features = features
        self.labels = labels
        self._hidden = hidden_labels
        self.name = name
        self.domain = domain

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def has_hidden_labels(self) -> bool:
        return self._hidden is not None

    @property
    def hidden_labels(self) -> np.ndarray:
        if self._hidden is None:
            raise HiddenLabelAccessError(f"dataset {self.name!r} carries no hidden labels")
        return self._hidden

    @property
    def n_classes(self) -> int:
        ids = [a for a in (self.labels, self._hidden) if a is not None and a.size]
        return int(max(a.max() for a in ids)) + 1 if ids else 0

    def unlabeled(self) -> "FeatureDataset":
        """Copy with labels and hidden labels stripped."""
        return FeatureDataset(self.features, name=self.name, domain=self.domain)

    def revealed(self) -> "FeatureDataset":
        """Scoring view: hidden labels promoted to ordinary labels."""
        return FeatureDataset(self.features, self.hidden_labels, name=self.name, domain=self.domain)

    def __eq__(self, other):
        if not isinstance(other, FeatureDataset):
            return NotImplemented

        def same(a, b):
            return (a is None and b is None) or (
                a is not None and b is not None and np.array_equal(a, b)
            )

        return (
            self.features.dtype == other.features.dtype
            and np.array_equal(self.features, other.features)
            and same(self.labels, other.labels)
            and same(self._hidden, other._hidden)
            and self.domain == other.domain
        )

    def __repr__(self):
        return (
            f"FeatureDataset(name={self.name!r}, n={len(self)}, dim={self.dim}, "
            f"labels={self.labels is not None}, hidden={self.has_hidden_labels}, domain={self.domain})"
        )


# ---------------------------------------------------------------------------
# Synthetic benchmark


@dataclass
class ShiftSpec:
    n_classes: int = 4
    centers: tuple | None = None
    cluster_scale: float = 0.5
    theta: float = 45.0  # degrees
    translation: tuple = (0.0, 0.0)
    scale: float = 1.0
    samples_per_class: int = 200
    seed: int = 0
    target_noise: float = 0.0  # extra isotropic noise on target features
    max_k: int = field(default=max(DEFAULT_K), repr=False)

    def resolved_centers(self) -> np.ndarray:
        if self.centers is not None:
            c = np.asarray(self.centers, dtype=np.float64)
        elif self.n_classes == len(DEFAULT_CENTERS):
            c = np.asarray(DEFAULT_CENTERS, dtype=np.float64)
        else:
            # neighbouring classes at most 70 degrees apart, so a 45 degree
            # rotation carries part of each cluster over a boundary
            step = min(np.deg2rad(70.0), 2 * np.pi / self.n_classes)
            ang = step * np.arange(self.n_classes) + 0.3
            radius = 3.0 + 0.6 * (np.arange(self.n_classes) % 2)
            c = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
        return c

    def validate(self):
        if self.n_classes < 2:
            raise ParameterError("need at least two classes")
        if not 0.0 <= self.theta < 360.0:
            raise ParameterError(f"theta={self.theta} must lie in [0, 360) degrees")
        if self.cluster_scale <= 0 or self.scale <= 0:
            raise ParameterError("cluster scale and shift scale must be positive")
        if self.samples_per_class < 2 * self.max_k:
            raise ParameterError(
                f"samples_per_class={self.samples_per_class} < 2*max k ({2 * self.max_k})"
            )
        if self.target_noise < 0:
            raise ParameterError("target noise must be non-negative")
        c = self.resolved_centers()
        if c.ndim != 2 or c.shape[0] != self.n_classes:
            raise ParameterError("need one centre per class")
        if len(self.translation) != c.shape[1]:
            raise ParameterError("translation dimension must match centres")


def rotation(theta_deg: float, dim: int = 2) -> np.ndarray:
    """Rotation by ``theta_deg`` in the first coordinate plane of ``dim`` dims."""
    t = np.deg2rad(theta_deg)
    R = np.eye(dim)
    R[:2, :2] = [[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]
    return R


def _blobs(centers, scale, per_class, rng):
    labels = np.repeat(np.arange(len(centers)), per_class)
    x = centers[labels] + scale * rng.standard_normal((len(labels), centers.shape[1]))
    return x, labels


def gen_two_domain_shift(spec: ShiftSpec):
    """Labeled source blobs and a shifted target with hidden labels.

    Returns ``(source, target, test)``; ``test`` is a held-out labeled sample
    from the source distribution for in-domain evaluation.
    """
    spec.validate()
    centers = spec.resolved_centers()
    src_ss, tgt_ss, test_ss, noise_ss = np.random.SeedSequence(spec.seed).spawn(4)
    xs, ys = _blobs(centers, spec.cluster_scale, spec.samples_per_class, np.random.default_rng(src_ss))
    xt, yt = _blobs(centers, spec.cluster_scale, spec.samples_per_class, np.random.default_rng(tgt_ss))
    xq, yq = _blobs(centers, spec.cluster_scale, spec.samples_per_class, np.random.default_rng(test_ss))
    R = rotation(spec.theta, centers.shape[1])
    xt = spec.scale * xt @ R.T + np.asarray(spec.translation, dtype=np.float64)
    if spec.target_noise > 0:
        xt = xt + spec.target_noise * np.random.default_rng(noise_ss).standard_normal(xt.shape)
    source = FeatureDataset(xs, ys, name="source", domain="source")
    target = FeatureDataset(xt, hidden_labels=yt, name="target", domain="target")
    test = FeatureDataset(xq, yq, name="test", domain="source")
    return source, target, test


def gen_openset_variant(spec: ShiftSpec, unknown: int):
    """Shift benchmark whose first ``unknown`` classes exist only in the target.

    Known classes are renumbered ``0..C-unknown-1`` in every split; target
    hidden labels map every unknown class to the id ``C - unknown``.
    """
    if not 1 <= unknown < spec.n_classes:
        raise ParameterError(f"unknown class count must lie in [1, {spec.n_classes - 1}]")
    source, target, test = gen_two_domain_shift(spec)
    n_known = spec.n_classes - unknown

    def known_only(ds):
        keep = ds.labels >= unknown
        return FeatureDataset(ds.features[keep], ds.labels[keep] - unknown, name=ds.name, domain=ds.domain)

    hidden = target.hidden_labels
    hidden = np.where(hidden < unknown, n_known, hidden - unknown)
    target = FeatureDataset(target.features, hidden_labels=hidden, name="target", domain="target")
    return known_only(source), target, known_only(test)


def add_noise(ds: FeatureDataset, sigma: float, seed: int = 0) -> FeatureDataset:
    """Gaussian perturbation of features (robustness sweep)."""
    if sigma < 0:
        raise ParameterError("noise sigma must be non-negative")
    rng = np.random.default_rng(seed)
    x = ds.features + sigma * rng.standard_normal(ds.features.shape)
    return FeatureDataset(x, ds.labels, ds._hidden, name=ds.name, domain=ds.domain)


# ---------------------------------------------------------------------------
# Source-free guard

_guard = threading.local()


@contextlib.contextmanager
def source_free():
    """Within this block, any attempt to load a source-domain file raises."""
    depth = getattr(_guard, "depth", 0)
    _guard.depth = depth + 1
    try:
        yield
    finally:
        _guard.depth = depth


def in_source_free_region() -> bool:
    return getattr(_guard, "depth", 0) > 0


# ---------------------------------------------------------------------------
# Persistence


def atomic_write(path, payload: bytes):
    """Write via a temp file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def encode_feature_file(ds: FeatureDataset) -> bytes:
    n, d = ds.features.shape
    flags = 0
    if ds.labels is not None:
        flags |= FLAG_LABELS
    if ds.has_hidden_labels:
        flags |= FLAG_HIDDEN
    if ds.domain == "source":
        flags |= FLAG_SOURCE
    parts = [_HEADER.pack(MAGIC, VERSION, flags, n, d), ds.features.astype("<f4").tobytes()]
    if ds.labels is not None:
        parts.append(ds.labels.astype("<u4").tobytes())
    if ds.has_hidden_labels:
        parts.append(ds.hidden_labels.astype("<u4").tobytes())
    return b"".join(parts)


def save_feature_file(ds: FeatureDataset, path):
    atomic_write(path, encode_feature_file(ds))


def peek_domain(path) -> str | None:
    """Domain recorded in a DVDF header, without reading the body."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size or head[:4] != MAGIC:
        raise FormatError("not a DVDF file", 0)
    flags = head[6]
    return "source" if flags & FLAG_SOURCE else "target"


def load_feature_file(path, mode: str = "full") -> FeatureDataset:
    """Read a DVDF file.

    ``mode``: ``"full"`` (labels and hidden labels), ``"labeled"`` (labels,
    hidden section never read), ``"unlabeled"`` (features only).
    """
    if mode not in ("full", "labeled", "unlabeled"):
        raise ParameterError(f"unknown load mode {mode!r}")
    path = os.fspath(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FormatError("truncated header", len(head))
        magic, version, flags, n, d = _HEADER.unpack(head)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}", 0)
        if version != VERSION:
            raise FormatError(f"unsupported version {version}", 4)
        if flags & ~(FLAG_LABELS | FLAG_HIDDEN | FLAG_SOURCE):
            raise FormatError(f"unknown flag bits {flags:#04x}", 6)
        if flags & FLAG_SOURCE and in_source_free_region():
            raise SourceAccessError(f"refusing to read source-domain file {path!r} during adaptation")
        if n == 0:
            raise EmptyInputError(f"{path!r} holds no samples")
        if d == 0:
            raise FormatError("zero feature dimension", 11)

        offset = _HEADER.size

        def read(nbytes, what):
            nonlocal offset
            buf = fh.read(nbytes)
            if len(buf) != nbytes:
                raise FormatError(f"truncated {what}: wanted {nbytes} bytes, got {len(buf)}", offset + len(buf))
            offset += nbytes
            return buf

        feats = np.frombuffer(read(4 * n * d, "features"), dtype="<f4").reshape(n, d).astype(np.float32)
        labels = hidden = None
        if flags & FLAG_LABELS:
            raw = read(4 * n, "labels")
            if mode != "unlabeled":
                labels = np.frombuffer(raw, dtype="<u4").astype(np.int64)
        if flags & FLAG_HIDDEN:
            if mode == "full":
                hidden = np.frombuffer(read(4 * n, "hidden labels"), dtype="<u4").astype(np.int64)
            else:
                # sidecar is skipped without being read
                fh.seek(4 * n, os.SEEK_CUR)
                offset += 4 * n
        fh.seek(0, os.SEEK_END)
        if fh.tell() != offset:
            raise FormatError(f"file size {fh.tell()} does not match header", offset)
    domain = "source" if flags & FLAG_SOURCE else "target"
    name = os.path.splitext(os.path.basename(path))[0]
    return FeatureDataset(feats, labels, hidden, name=name, domain=domain)


def load_csv(path, domain=None) -> FeatureDataset:
    """Import ``f0,...,f{d-1}[,label]`` CSV written by an external encoder."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError("empty CSV", 0) from None
        has_label = header[-1] == "label"
        fcols = header[:-1] if has_label else header
        if not fcols or fcols != [f"f{i}" for i in range(len(fcols))]:
            raise FormatError(f"CSV header must be f0..f{{d-1}}[,label], got {header}")
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                feats.append([float(v) for v in row[: len(fcols)]])
                if has_label:
                    labels.append(int(row[-1]))
            except ValueError as exc:
                raise FormatError(f"line {lineno}: {exc}") from None
    if not feats:
        raise EmptyInputError(f"{path!r} holds no samples")
    name = os.path.splitext(os.path.basename(path))[0]
    return FeatureDataset(feats, labels if has_label else None, name=name, domain=domain)
