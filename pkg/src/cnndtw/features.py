"""Acoustic front end: WAV ingestion, MFCCs, CMVN and the feature archive format.

The toolkit works on frame sequences of shape ``(T, D)``. Audio is turned
into 13 MFCCs with deltas and delta-deltas (D = 39) by default; every
setting lives in :class:`MfccConfig` and can be loaded from TOML.

Silence policy: mel energies are floored at ``MfccConfig.energy_floor``
before the log, so silent audio yields finite, constant frames. After
per-utterance CMVN such an utterance collapses to all-zero frames, which
the archive writer rejects (cosine distance is undefined for them); the
CLI lists those utterances in a sidecar manifest instead of archiving them.
"""

from __future__ import annotations

import logging
import math
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import binfmt
from .errors import (
    CorruptArchive,
    CorruptAudio,
    DimensionMismatch,
    EmptyInput,
    TooShort,
    ZeroNormFrame,
)

logger = logging.getLogger(__name__)

ARCHIVE_MAGIC = b"KWFA"
ARCHIVE_VERSION = 1


@dataclass
class FeatureSequence:
    """A ``(T, D)`` matrix of acoustic frames for one utterance or exemplar."""

    frames: np.ndarray
    source_id: str = ""
    frame_shift_ms: float = 10.0

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if not np.issubdtype(frames.dtype, np.floating):
            frames = frames.astype(np.float64)
        if frames.ndim == 1:
            frames = frames[:, None]
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise EmptyInput(f"frames must be a non-empty (T, D) matrix, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise CorruptAudio(f"non-finite feature values in {self.source_id!r}")
        if self.frame_shift_ms <= 0:
            raise ValueError("frame_shift_ms must be positive")
        self.frames = frames

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def seconds(self) -> float:
        return self.n_frames * self.frame_shift_ms / 1000.0

    def __len__(self) -> int:
        return self.n_frames


@dataclass
class FeatureArchive:
    """Ordered collection of feature sequences sharing one dimension."""

    dimension: int
    entries: list[FeatureSequence]
    checksum: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for seq in self.entries:
            if seq.dim != self.dimension:
                raise DimensionMismatch(
                    f"entry {seq.source_id!r} has D={seq.dim}, archive has D={self.dimension}"
                )
            if seq.source_id in seen:
                raise ValueError(f"duplicate source_id {seq.source_id!r}")
            seen.add(seq.source_id)
        self._index = {seq.source_id: i for i, seq in enumerate(self.entries)}

    @classmethod
    def from_sequences(cls, seqs: Iterable[FeatureSequence], meta: dict | None = None) -> "FeatureArchive":
        seqs = list(seqs)
        if not seqs:
            raise EmptyInput("archive needs at least one entry")
        return cls(dimension=seqs[0].dim, entries=seqs, meta=dict(meta or {}))

    @property
    def ids(self) -> list[str]:
        return [s.source_id for s in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[FeatureSequence]:
        return iter(self.entries)

    def __getitem__(self, source_id: str) -> FeatureSequence:
        return self.entries[self._index[source_id]]

    def __contains__(self, source_id: str) -> bool:
        return source_id in self._index

    @property
    def total_seconds(self) -> float:
        return sum(s.seconds for s in self.entries)


# ---------------------------------------------------------------------------
# MFCC extraction
# ---------------------------------------------------------------------------


@dataclass
class MfccConfig:
    win_ms: float = 25.0
    shift_ms: float = 10.0
    n_ceps: int = 13
    n_filters: int = 26
    n_fft: int | None = None  # next power of two >= window length
    low_hz: float = 0.0
    high_hz: float | None = None  # Nyquist
    preemph: float = 0.97
    lifter: int = 22
    append_energy: bool = True  # replace c0 with log frame energy
    use_deltas: bool = True
    use_delta_deltas: bool = True
    delta_width: int = 2
    energy_floor: float = 1e-10
    cmvn: bool = True

    @property
    def dim(self) -> int:
        return self.n_ceps * (1 + int(self.use_deltas) + int(self.use_delta_deltas))

    @classmethod
    def from_dict(cls, d: dict) -> "MfccConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown mfcc options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_filters: int, n_fft: int, sample_rate: int, low_hz: float, high_hz: float) -> np.ndarray:
    """Triangular filters on integer FFT bins, shape ``(n_filters, n_fft // 2 + 1)``."""
    mels = np.linspace(_hz_to_mel(low_hz), _hz_to_mel(high_hz), n_filters + 2)
    bins = np.floor((n_fft + 1) * _mel_to_hz(mels) / sample_rate).astype(int)
    fb = np.zeros((n_filters, n_fft // 2 + 1))
    for j in range(n_filters):
        lo, mid, hi = bins[j], bins[j + 1], bins[j + 2]
        for i in range(lo, mid):
            fb[j, i] = (i - lo) / (mid - lo)
        for i in range(mid, hi):
            fb[j, i] = (hi - i) / (hi - mid)
    return fb


def _dct2_ortho(x: np.ndarray, n_out: int) -> np.ndarray:
    n = x.shape[-1]
    k = np.arange(n_out)[:, None]
    basis = np.cos(np.pi * k * (2 * np.arange(n)[None, :] + 1) / (2 * n))
    scale = np.full(n_out, math.sqrt(2.0 / n))
    scale[0] = math.sqrt(1.0 / n)
    return (x @ basis.T) * scale


def deltas(feat: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over +-``width`` frames with edge replication."""
    denom = 2 * sum(n * n for n in range(1, width + 1))
    padded = np.pad(feat, ((width, width), (0, 0)), mode="edge")
    T = feat.shape[0]
    out = np.zeros_like(feat, dtype=np.float64)
    for n in range(1, width + 1):
        out += n * (padded[width + n:width + n + T] - padded[width - n:width - n + T])
    return out / denom


def n_frames_for(n_samples: int, win: int, shift: int) -> int:
    return (n_samples - win) // shift + 1


def extract_mfcc(
    audio: np.ndarray,
    sample_rate: int,
    config: MfccConfig | None = None,
    source_id: str = "",
) -> FeatureSequence:
    """Compute MFCC (+ delta, delta-delta) frames for mono PCM ``audio``.

    CMVN is *not* applied here; see :func:`normalize_cmvn`.

    Raises:
        EmptyInput: audio shorter than one analysis window.
        CorruptAudio: non-finite samples.
    """
    cfg = config or MfccConfig()
    if sample_rate < 8000:
        raise ValueError(f"sample_rate must be >= 8000 Hz, got {sample_rate}")
    x = np.asarray(audio, dtype=np.float64).ravel()
    if not np.all(np.isfinite(x)):
        raise CorruptAudio(f"non-finite samples in {source_id!r}")
    win = int(math.floor(cfg.win_ms * sample_rate / 1000.0 + 0.5))
    shift = int(math.floor(cfg.shift_ms * sample_rate / 1000.0 + 0.5))
    if len(x) < win:
        raise EmptyInput(f"{len(x)} samples is shorter than one {win}-sample window")
    n_fft = cfg.n_fft or 1 << (win - 1).bit_length()
    high_hz = cfg.high_hz or sample_rate / 2.0

    if cfg.preemph:
        x = np.append(x[0], x[1:] - cfg.preemph * x[:-1])
    T = n_frames_for(len(x), win, shift)
    idx = np.arange(win)[None, :] + shift * np.arange(T)[:, None]
    frames = x[idx] * np.hamming(win)[None, :]
    power = np.abs(np.fft.rfft(frames, n_fft)) ** 2 / n_fft

    fb = mel_filterbank(cfg.n_filters, n_fft, sample_rate, cfg.low_hz, high_hz)
    mel_energy = np.maximum(power @ fb.T, cfg.energy_floor)
    ceps = _dct2_ortho(np.log(mel_energy), cfg.n_ceps)
    if cfg.lifter > 0:
        n = np.arange(cfg.n_ceps)
        ceps *= 1.0 + (cfg.lifter / 2.0) * np.sin(np.pi * n / cfg.lifter)
    if cfg.append_energy:
        ceps[:, 0] = np.log(np.maximum(power.sum(axis=1), cfg.energy_floor))

    parts = [ceps]
    if cfg.use_deltas or cfg.use_delta_deltas:
        d1 = deltas(ceps, cfg.delta_width)
        if cfg.use_deltas:
            parts.append(d1)
        if cfg.use_delta_deltas:
            parts.append(deltas(d1, cfg.delta_width))
    return FeatureSequence(np.hstack(parts), source_id=source_id, frame_shift_ms=cfg.shift_ms)


def normalize_cmvn(seq: FeatureSequence) -> FeatureSequence:
    """Per-utterance, per-dimension mean and variance normalization.

    Zero-variance dimensions are only mean-subtracted.
    """
    if seq.n_frames < 2:
        raise TooShort(f"CMVN needs at least 2 frames, {seq.source_id!r} has {seq.n_frames}")
    x = seq.frames.astype(np.float64)
    mean = x.mean(axis=0)
    centered = x - mean
    std = np.sqrt(np.mean(centered ** 2, axis=0))
    # float round-off leaves ~1e-17 residue on constant columns; don't amplify it
    flat = std <= 1e-10 * np.maximum(1.0, np.abs(mean))
    out = centered / np.where(flat, 1.0, std)
    # recentre: division can reintroduce a tiny mean offset
    out -= out.mean(axis=0)
    return FeatureSequence(out, source_id=seq.source_id, frame_shift_ms=seq.frame_shift_ms)


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read 16-bit PCM WAV as float samples in [-1, 1); stereo is averaged to mono."""
    try:
        with wave.open(str(path), "rb") as w:
            n_ch, width, rate, n = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            raw = w.readframes(n)
    except (wave.Error, EOFError) as e:
        raise CorruptAudio(f"{path}: {e}") from None
    if width != 2:
        raise CorruptAudio(f"{path}: only 16-bit PCM is supported (sample width {width})")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if len(data) % n_ch:
        raise CorruptAudio(f"{path}: truncated sample data")
    data = data.reshape(-1, n_ch).mean(axis=1)
    return data, rate


def write_wav(path: str | Path, audio: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(audio) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def wav_to_features(path: str | Path, config: MfccConfig | None = None, source_id: str | None = None) -> FeatureSequence:
    cfg = config or MfccConfig()
    audio, rate = read_wav(path)
    seq = extract_mfcc(audio, rate, cfg, source_id=source_id or Path(path).stem)
    return normalize_cmvn(seq) if cfg.cmvn else seq


# ---------------------------------------------------------------------------
# Archive format
# ---------------------------------------------------------------------------


def encode_archive(entries: Iterable[FeatureSequence], meta: dict | None = None) -> bytes:
    entries = list(entries)
    if not entries:
        raise EmptyInput("cannot write an empty archive")
    dim = entries[0].dim
    seen = set()
    for seq in entries:
        if seq.dim != dim:
            raise DimensionMismatch(f"entry {seq.source_id!r} has D={seq.dim}, expected D={dim}")
        if seq.source_id in seen:
            raise ValueError(f"duplicate source_id {seq.source_id!r}")
        seen.add(seq.source_id)
        f32 = seq.frames.astype(np.float32)
        norms = np.linalg.norm(f32, axis=1)
        if np.any(norms == 0):
            raise ZeroNormFrame(f"entry {seq.source_id!r} has an all-zero frame at {int(np.argmin(norms))}")

    meta = dict(meta or {})
    meta.setdefault("frame_shift_ms", entries[0].frame_shift_ms)
    w = binfmt.Writer(ARCHIVE_MAGIC, ARCHIVE_VERSION)
    w.u32(dim)
    w.json(meta)
    for seq in entries:
        w.text(seq.source_id)
        w.u32(seq.n_frames)
        w.array(seq.frames, "f4")
    return w.finish()


def write_archive(entries: Iterable[FeatureSequence], path: str | Path, meta: dict | None = None) -> None:
    """Write sequences as a float32 feature archive.

    Frames are stored as little-endian float32; float32 input therefore
    round-trips bit-exactly through :func:`read_archive`.
    """
    if isinstance(entries, FeatureArchive):
        meta = {**entries.meta, **(meta or {})}
    binfmt.atomic_write(path, encode_archive(entries, meta))


def decode_archive(data: bytes) -> FeatureArchive:
    _, r = binfmt.open_container(data, ARCHIVE_MAGIC, ARCHIVE_VERSION, CorruptArchive)
    dim = r.u32()
    meta = r.json()
    shift = float(meta.get("frame_shift_ms", 10.0))
    entries = []
    while not r.exhausted:
        sid = r.text()
        T = r.u32()
        frames = r.array(T * dim, "f4", (T, dim))
        entries.append(FeatureSequence(frames, source_id=sid, frame_shift_ms=shift))
    if not entries:
        raise CorruptArchive("archive has no entries")
    return FeatureArchive(dim, entries, checksum=binfmt.checksum(data[:-binfmt.CHECKSUM_SIZE]).hex(), meta=meta)


def read_archive(path: str | Path) -> FeatureArchive:
    return decode_archive(Path(path).read_bytes())


def load_mfcc_config(path: str | Path | None) -> MfccConfig:
    if path is None:
        return MfccConfig()
    from .config import load_toml

    data = load_toml(path)
    return MfccConfig.from_dict(data.get("mfcc", data))
