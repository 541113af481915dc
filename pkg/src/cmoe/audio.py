"""RIFF/WAVE decoding into normalized mono clips, and a PCM16 writer.

Supported encodings: PCM 16-bit, PCM 32-bit integer, IEEE float 32-bit; one
or two channels. Stereo folds down by per-frame averaging. Integer samples
scale by 1/2^(bits-1), so full-scale negative maps to -1.0 exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cmoe.errors import AudioFormatError, EmptyAudioError, UnsupportedFormatError


@dataclass
class AudioClip:
    samples: np.ndarray  # float32, mono, in [-1, 1]
    sample_rate: int
    source_id: str
    label: str = ""

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def segment(self, start_s: float, end_s: float) -> np.ndarray:
        lo = int(round(start_s * self.sample_rate))
        hi = int(round(end_s * self.sample_rate))
        return self.samples[lo:hi]


def _read_chunks(fh, path):
    """Yield (chunk id, payload offset, size) for every top-level RIFF chunk."""
    head = fh.read(12)
    if len(head) != 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
        raise AudioFormatError(f"{path}: not a RIFF/WAVE file")
    while True:
        hdr = fh.read(8)
        if len(hdr) == 0:
            return
        if len(hdr) != 8:
            raise AudioFormatError(f"{path}: truncated chunk header")
        cid, size = hdr[:4], struct.unpack("<I", hdr[4:])[0]
        off = fh.tell()
        yield cid, off, size
        # absolute, so consumers may read the payload inside the loop;
        # chunks are word-aligned
        fh.seek(off + size + (size & 1))


def load_audio(path, source_id: str | None = None, label: str = "") -> AudioClip:
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise AudioFormatError(f"{path}: {e}") from None
    with fh:
        fmt = None
        data_span = None
        for cid, off, size in _read_chunks(fh, path):
            if cid == b"fmt ":
                fh.seek(off)
                raw = fh.read(min(size, 16))
                if len(raw) < 16:
                    raise AudioFormatError(f"{path}: fmt chunk too short")
                fmt = struct.unpack("<HHIIHH", raw)
            elif cid == b"data":
                data_span = (off, size)
        if fmt is None:
            raise AudioFormatError(f"{path}: missing fmt chunk")
        if data_span is None:
            raise AudioFormatError(f"{path}: missing data chunk")
        tag, channels, rate, _, _, bits = fmt
        if channels not in (1, 2):
            raise UnsupportedFormatError(f"{path}: {channels} channels unsupported")
        if (tag, bits) == (1, 16):
            dtype, scale = np.dtype("<i2"), 1.0 / 2**15
        elif (tag, bits) == (1, 32):
            dtype, scale = np.dtype("<i4"), 1.0 / 2**31
        elif (tag, bits) == (3, 32):
            dtype, scale = np.dtype("<f4"), 1.0
        else:
            raise UnsupportedFormatError(f"{path}: format tag {tag} at {bits} bits unsupported")

        off, size = data_span
        fh.seek(off)
        payload = fh.read(size)
    if len(payload) < size:
        raise AudioFormatError(f"{path}: data chunk shorter than declared")
    frame_bytes = dtype.itemsize * channels
    n_frames = len(payload) // frame_bytes
    if n_frames == 0:
        raise EmptyAudioError(f"{path}: no audio frames")
    raw = np.frombuffer(payload, dtype=dtype, count=n_frames * channels)
    x = raw.astype(np.float64) * scale
    if channels == 2:
        x = x.reshape(-1, 2).mean(axis=1)
    x = np.clip(x, -1.0, 1.0).astype(np.float32)
    return AudioClip(
        samples=x,
        sample_rate=rate,
        source_id=source_id if source_id is not None else path.stem,
        label=label,
    )


def probe_wav(path) -> tuple[int, int]:
    """(sample_rate, frame count) from the header, without decoding samples."""
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise AudioFormatError(f"{path}: {e}") from None
    with fh:
        fmt_span = None
        data_size = None
        for cid, off, size in _read_chunks(fh, path):
            if cid == b"fmt ":
                fmt_span = (off, size)
            elif cid == b"data":
                data_size = size
        if fmt_span is None or data_size is None:
            raise AudioFormatError(f"{path}: missing fmt or data chunk")
        off, size = fmt_span
        if size < 16:
            raise AudioFormatError(f"{path}: fmt chunk too short")
        fh.seek(off)
        _, _, rate, _, block_align, _ = struct.unpack("<HHIIHH", fh.read(16))
        if block_align == 0:
            raise AudioFormatError(f"{path}: zero block alignment")
        return rate, data_size // block_align


def write_wav_pcm16(path, samples: np.ndarray, sample_rate: int) -> None:
    """Mono PCM16 writer; reloading changes each sample by at most 2^-15."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.clip(np.rint(x * 2**15), -(2**15), 2**15 - 1).astype("<i2")
    payload = pcm.tobytes()
    with open(path, "wb") as fh:
        fh.write(b"RIFF")
        fh.write(struct.pack("<I", 36 + len(payload)))
        fh.write(b"WAVE")
        fh.write(b"fmt ")
        fh.write(struct.pack("<IHHIIHH", 16, 1, 1, sample_rate, sample_rate * 2, 2, 16))
        fh.write(b"data")
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        if len(payload) & 1:
            fh.write(b"\0")
