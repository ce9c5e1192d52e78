"""Sequence datasets: ingestion, normalization, splits, containers, batching."""

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, FormatError
from .rng import stream

VSEQ_MAGIC = b"VSEQ"
VSEQ_VERSION = 1
STD_FLOOR = 1e-8
FRAME_LEN = 200
SPLIT_RATIOS = (0.9, 0.05, 0.05)


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise DimensionError(f"stats shapes mean={self.mean.shape} std={self.std.shape} differ")

    @property
    def dim(self):
        return self.mean.shape[0]

    def to_json(self):
        return json.dumps({"mean": self.mean.tolist(), "std": self.std.tolist()}, indent=1) + "\n"

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        return cls(np.array(obj["mean"]), np.array(obj["std"]))


@dataclass
class SequenceDataset:
    """Variable-length sequences of float32 frames sharing a frame dimension.

    ``labels`` is an optional per-sequence side channel (e.g. the hidden
    regime of synthetic data); models never see it.
    """

    sequences: list
    dim: int = 0
    stats: NormalizationStats = None
    labels: list = None

    def __post_init__(self):
        self.sequences = [np.asarray(s, dtype=np.float32) for s in self.sequences]
        if self.sequences and not self.dim:
            self.dim = self.sequences[0].shape[1]
        for i, s in enumerate(self.sequences):
            if s.ndim != 2 or s.shape[1] != self.dim:
                raise DimensionError(f"sequence {i} has shape {s.shape}, expected [T x {self.dim}]")
            if s.shape[0] < 1:
                raise DimensionError(f"sequence {i} is empty")
        if self.labels is not None and len(self.labels) != len(self.sequences):
            raise ContractError("labels must align with sequences")

    def __len__(self):
        return len(self.sequences)

    def subset(self, idx):
        labels = None if self.labels is None else [self.labels[i] for i in idx]
        return SequenceDataset([self.sequences[i] for i in idx], self.dim, self.stats, labels)

    @property
    def frames(self):
        return int(sum(s.shape[0] for s in self.sequences))


@dataclass
class SequenceBatch:
    values: np.ndarray  # [B x T_max x d], zero-padded
    mask: np.ndarray  # [B x T_max], prefix of ones
    lengths: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.lengths is None:
            self.lengths = self.mask.sum(axis=1).astype(np.int64)

    @property
    def frames(self):
        return int(self.mask.sum())


def make_batch(sequences, pad_to=None):
    lengths = np.array([s.shape[0] for s in sequences], dtype=np.int64)
    t_max = int(max(lengths.max(), pad_to or 0))
    d = sequences[0].shape[1]
    values = np.zeros((len(sequences), t_max, d))
    mask = np.zeros((len(sequences), t_max))
    for i, s in enumerate(sequences):
        values[i, : s.shape[0]] = s
        mask[i, : s.shape[0]] = 1.0
    return SequenceBatch(values, mask, lengths)


def iter_batches(ds, batch_size, order=None):
    order = np.arange(len(ds)) if order is None else np.asarray(order)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield make_batch([ds.sequences[i] for i in idx])


# --- WAV -------------------------------------------------------------------


@dataclass
class WavFile:
    rate: int
    channels: int
    data: np.ndarray  # int16, [n_samples x channels]

    @property
    def n_samples(self):
        return self.data.shape[0]

    def mono(self):
        """Per-sample mean over channels (float64, integer scale)."""
        return self.data.astype(np.float64).mean(axis=1)


def _u16(buf, off):
    return struct.unpack_from("<H", buf, off)[0]


def _u32(buf, off):
    return struct.unpack_from("<I", buf, off)[0]


def load_wav(data):
    """Parse a RIFF/WAVE byte string holding 16-bit PCM audio."""
    buf = bytes(data)
    if len(buf) < 12:
        raise FormatError("truncated RIFF header", 0)
    if buf[0:4] != b"RIFF":
        raise FormatError(f"bad RIFF magic {buf[0:4]!r}", 0)
    if buf[8:12] != b"WAVE":
        raise FormatError(f"bad WAVE form type {buf[8:12]!r}", 8)
    fmt = None
    samples = None
    off = 12
    while off < len(buf):
        if off + 8 > len(buf):
            raise FormatError("truncated chunk header", off)
        cid = buf[off : off + 4]
        size = _u32(buf, off + 4)
        body = off + 8
        if body + size > len(buf):
            raise FormatError(f"chunk {cid!r} of {size} bytes runs past end of file", off)
        if cid == b"fmt ":
            if size < 16:
                raise FormatError("fmt chunk shorter than 16 bytes", off)
            tag, channels, rate = _u16(buf, body), _u16(buf, body + 2), _u32(buf, body + 4)
            bits = _u16(buf, body + 14)
            if tag != 1:
                raise FormatError(f"unsupported format code {tag} (only PCM=1)", body)
            if bits != 16:
                raise FormatError(f"unsupported bit depth {bits}", body + 14)
            if channels < 1:
                raise FormatError("channel count must be positive", body + 2)
            fmt = (channels, rate)
        elif cid == b"data":
            if fmt is None:
                raise FormatError("data chunk before fmt chunk", off)
            channels = fmt[0]
            if size % (2 * channels):
                raise FormatError("data chunk is not a whole number of sample frames", off)
            raw = np.frombuffer(buf, dtype="<i2", count=size // 2, offset=body)
            samples = raw.reshape(-1, channels).astype(np.int16)
        off = body + size + (size & 1)
    if fmt is None:
        raise FormatError("missing fmt chunk", 12)
    if samples is None:
        raise FormatError("missing data chunk", len(buf))
    return WavFile(fmt[1], fmt[0], samples)


def encode_wav(rate, samples):
    """Serialize int16 samples ([n] mono or [n x channels]) as 16-bit PCM WAV."""
    s = np.asarray(samples, dtype="<i2")
    if s.ndim == 1:
        s = s[:, None]
    channels = s.shape[1]
    payload = s.tobytes()
    out = io.BytesIO()
    out.write(b"RIFF")
    out.write(struct.pack("<I", 36 + len(payload)))
    out.write(b"WAVE")
    out.write(b"fmt ")
    out.write(struct.pack("<IHHIIHH", 16, 1, channels, rate, rate * channels * 2, channels * 2, 16))
    out.write(b"data")
    out.write(struct.pack("<I", len(payload)))
    out.write(payload)
    return out.getvalue()


def frame(wav, frame_len=FRAME_LEN):
    """Cut mono audio into non-overlapping frames scaled to [-1, 1)."""
    x = wav.mono() / 32768.0
    n = x.shape[0] // frame_len
    if n < 1:
        raise ContractError(f"need at least {frame_len} samples, got {x.shape[0]}")
    return x[: n * frame_len].reshape(n, frame_len)


# --- normalization and splits --------------------------------------------


def compute_stats(ds, exclude=()):
    """Global per-dimension mean/std over all frames; ``exclude`` dims get (0, 1)."""
    if not len(ds):
        raise ContractError("cannot compute statistics of an empty dataset")
    allf = np.concatenate([s.astype(np.float64) for s in ds.sequences], axis=0)
    mean = allf.mean(axis=0)
    std = allf.std(axis=0)
    for i in exclude:
        mean[i] = 0.0
        std[i] = 1.0
    return NormalizationStats(mean, std)


def _check_stats(ds, stats):
    if len(ds) and ds.dim != stats.dim:
        raise DimensionError(f"dataset dim {ds.dim} does not match stats dim {stats.dim}")


def normalize(ds, stats):
    _check_stats(ds, stats)
    seqs = [((s.astype(np.float64) - stats.mean) / stats.std) for s in ds.sequences]
    return SequenceDataset(seqs, ds.dim, stats, ds.labels)


def denormalize(ds, stats):
    _check_stats(ds, stats)
    seqs = [s.astype(np.float64) * stats.std + stats.mean for s in ds.sequences]
    return SequenceDataset(seqs, ds.dim, None, ds.labels)


def split(ds, seed, ratios=SPLIT_RATIOS):
    """Seeded shuffle, then floor cuts at 90% and 95%."""
    n = len(ds)
    if n < 20:
        raise ContractError(f"split needs at least 20 sequences, got {n}")
    order = stream(seed, "split").permutation(n)
    a = math.floor(ratios[0] * n)
    b = math.floor((ratios[0] + ratios[1]) * n)
    return ds.subset(order[:a]), ds.subset(order[a:b]), ds.subset(order[b:])


# --- synthetic data -------------------------------------------------------


def synth_regime_switching(n, T, d, seed, stay=0.95, noise=0.05, cycles=(1, 2)):
    """Sinusoid frames driven by a hidden two-state Markov chain.

    Each frame holds ``d`` consecutive samples of a sinusoid whose frequency
    is ``cycles[state]`` periods per frame; phase is continuous across frames
    and randomized per sequence, and N(0, noise^2) is added per sample. The
    chain keeps its state with probability ``stay``. Hidden states are
    returned as ``labels``.
    """
    rng = stream(seed, "synth", "regime")
    cyc = np.asarray(cycles, dtype=np.float64)
    seqs, labels = [], []
    for _ in range(n):
        states = np.empty(T, dtype=np.int64)
        states[0] = rng.integers(2)
        flips = rng.uniform(size=T) >= stay
        for t in range(1, T):
            states[t] = 1 - states[t - 1] if flips[t] else states[t - 1]
        phase0 = rng.uniform(0.0, 2.0 * np.pi)
        steps = 2.0 * np.pi * cyc[states][:, None] / d
        # phase accumulates sample by sample, so it stays continuous at switches
        per_sample = np.broadcast_to(steps, (T, d)).reshape(-1)
        phase = phase0 + np.concatenate([[0.0], np.cumsum(per_sample)[:-1]])
        x = np.sin(phase).reshape(T, d) + noise * rng.standard_normal((T, d))
        seqs.append(x)
        labels.append(states)
    return SequenceDataset(seqs, d, None, labels)


def switch_points(states):
    """Indices t with states[t] != states[t-1]."""
    s = np.asarray(states)
    return np.nonzero(s[1:] != s[:-1])[0] + 1


# --- VSEQ container -------------------------------------------------------


def container_bytes(ds):
    out = io.BytesIO()
    out.write(VSEQ_MAGIC)
    out.write(struct.pack("<II", VSEQ_VERSION, len(ds)))
    for s in ds.sequences:
        out.write(struct.pack("<II", s.shape[0], s.shape[1]))
    for s in ds.sequences:
        out.write(np.ascontiguousarray(s, dtype="<f4").tobytes())
    return out.getvalue()


def container_write(ds, path):
    Path(path).write_bytes(container_bytes(ds))


def container_parse(buf):
    if len(buf) < 4 or buf[:4] != VSEQ_MAGIC:
        raise FormatError(f"bad VSEQ magic {bytes(buf[:4])!r}", 0)
    if len(buf) < 12:
        raise FormatError("truncated VSEQ header", 4)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VSEQ_VERSION:
        raise FormatError(f"unsupported VSEQ version {version}", 4)
    off = 12
    if off + 8 * count > len(buf):
        raise FormatError(f"truncated sequence table for {count} sequences", off)
    shapes = [struct.unpack_from("<II", buf, off + 8 * i) for i in range(count)]
    off += 8 * count
    dims = {d for _, d in shapes}
    if len(dims) > 1:
        raise FormatError(f"sequences disagree on frame dim: {sorted(dims)}", 12)
    seqs = []
    for t, d in shapes:
        nbytes = 4 * t * d
        if off + nbytes > len(buf):
            raise FormatError("truncated frame data", off)
        seqs.append(np.frombuffer(buf, dtype="<f4", count=t * d, offset=off).reshape(t, d).copy())
        off += nbytes
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", off)
    return SequenceDataset(seqs, dims.pop() if dims else 0)


def container_read(path):
    return container_parse(Path(path).read_bytes())


# --- handwriting strokes --------------------------------------------------


def load_strokes(text):
    """Parse ``x y pen`` lines (blank line between sequences) into offsets.

    Row 0 of each sequence keeps the absolute first point; later rows hold
    (dx, dy, pen), so a cumulative sum over the first two columns recovers
    absolute coordinates.
    """
    seqs, cur = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            if cur:
                seqs.append(cur)
                cur = []
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"expected 'x y pen', got {line!r}", lineno)
        try:
            x, y, pen = float(parts[0]), float(parts[1]), float(parts[2])
        except ValueError as exc:
            raise FormatError(f"non-numeric value in {line!r}", lineno) from exc
        if pen not in (0.0, 1.0):
            raise FormatError(f"pen must be 0 or 1, got {parts[2]!r}", lineno)
        if not (math.isfinite(x) and math.isfinite(y)):
            raise FormatError("non-finite coordinate", lineno)
        cur.append((x, y, pen))
    if cur:
        seqs.append(cur)
    out = []
    for pts in seqs:
        a = np.array(pts, dtype=np.float64)
        off = a.copy()
        off[1:, :2] = a[1:, :2] - a[:-1, :2]
        out.append(off)
    return SequenceDataset(out, 3)
