"""Spectrogram features: STFT, Mel, Bark, and constant-Q, band-restricted.

Conventions shared by all four kinds:
  - frame/hop lengths in samples are truncated from milliseconds
    (int(ms * sr / 1000)), which reproduces 2636-sample frames and 1314
    retained STFT bins for a 52734 Hz / 50 ms configuration;
  - frame count = round(duration_ms / shift_ms), frames centered at
    i * shift with reflected edges, so a 30 s segment always yields 1200
    frames (900 at the 33.33 ms constant-Q hop);
  - FFT size = frame length, no zero padding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from cmoe.errors import (
    BandError,
    CheckpointError,
    FilterBankError,
    PlanError,
    ShapeError,
    TooShortError,
)

LOG_FLOOR = 1e-10
FEATURE_KINDS = ("stft", "mel", "bark", "cqt")

_WINDOWS = {"hann": np.hanning, "hamming": np.hamming, "rect": np.ones}


def mel_scale(f):
    """Mel(f) = 2595 * log10(1 + f/700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_inverse(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def bark_scale(f):
    """Bark(f) = 6 * arsinh(f/600)."""
    return 6.0 * np.arcsinh(np.asarray(f, dtype=np.float64) / 600.0)


def bark_inverse(z):
    return 600.0 * np.sinh(np.asarray(z, dtype=np.float64) / 6.0)


_SCALES = {"mel": (mel_scale, mel_inverse), "bark": (bark_scale, bark_inverse)}


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class EffectiveBand:
    f_lo: float
    f_hi: float

    def validate(self, sample_rate: int) -> "EffectiveBand":
        if not (0 <= self.f_lo < self.f_hi):
            raise BandError(f"band [{self.f_lo}, {self.f_hi}] is inverted or negative")
        if self.f_hi > sample_rate / 2:
            raise BandError(
                f"band upper edge {self.f_hi} Hz above Nyquist {sample_rate / 2} Hz"
            )
        return self


@dataclass(frozen=True)
class FramingPlan:
    frame_ms: float = 50.0
    shift_ms: float | None = None  # defaults to frame_ms / 2
    window: str = "hann"

    def __post_init__(self):
        if self.shift_ms is None:
            object.__setattr__(self, "shift_ms", self.frame_ms / 2.0)
        if not 0 < self.shift_ms <= self.frame_ms:
            raise PlanError(f"shift {self.shift_ms} ms must be in (0, frame {self.frame_ms} ms]")
        if self.window not in _WINDOWS:
            raise PlanError(f"unknown window {self.window!r}")


@dataclass(frozen=True)
class CqtPlan:
    f_min: float
    f_max: float
    bins_per_octave: int = 48
    hop_ms: float = 100.0 / 3.0

    def __post_init__(self):
        if self.f_min <= 0:
            raise PlanError(f"constant-Q f_min must be positive, got {self.f_min}")
        if self.f_max <= self.f_min:
            raise PlanError("constant-Q f_max must exceed f_min")
        if self.bins_per_octave < 1 or self.hop_ms <= 0:
            raise PlanError("constant-Q needs bins_per_octave >= 1 and a positive hop")

    @property
    def center_freqs(self) -> np.ndarray:
        """f_k = 2^(k/b) * f_min for every k with f_k <= f_max."""
        n = int(np.floor(self.bins_per_octave * np.log2(self.f_max / self.f_min))) + 1
        k = np.arange(n)
        return self.f_min * 2.0 ** (k / self.bins_per_octave)

    @property
    def q_factor(self) -> float:
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)


@dataclass
class FilterBank:
    scale: str
    n_filters: int
    f_lo: float
    f_hi: float
    matrix: np.ndarray  # [n_filters, n_bins]
    center_freqs: np.ndarray


@dataclass
class Spectrogram:
    kind: str
    data: np.ndarray  # float32 [time, freq]
    band: tuple
    sample_rate: int
    segment_id: str = ""

    @property
    def time_frames(self) -> int:
        return self.data.shape[0]

    @property
    def freq_bins(self) -> int:
        return self.data.shape[1]


def frame_signal(x: np.ndarray, sample_rate: int, plan: FramingPlan) -> np.ndarray:
    """Slice a waveform into overlapping windowed frames.

    Frames are centered at i * shift samples; edges reflect. Frame count is
    round(duration_ms / shift_ms) regardless of how the last frame straddles
    the end, which is what pins 1200 frames for 30 s defaults.
    """
    x = np.asarray(x, dtype=np.float64)
    flen = int(plan.frame_ms * sample_rate / 1000.0)
    shift = int(plan.shift_ms * sample_rate / 1000.0)
    if flen < 1 or shift < 1:
        raise PlanError(f"frame {plan.frame_ms} ms is shorter than one sample at {sample_rate} Hz")
    if len(x) < flen:
        raise TooShortError(f"signal of {len(x)} samples shorter than one {flen}-sample frame")
    duration_ms = len(x) / sample_rate * 1000.0
    n_frames = _round_half_up(duration_ms / plan.shift_ms)
    centers = np.arange(n_frames) * shift
    starts = centers - flen // 2
    pad_lo = max(0, -int(starts[0]))
    pad_hi = max(0, int(starts[-1]) + flen - len(x))
    xp = np.pad(x, (pad_lo, pad_hi), mode="reflect")
    idx = (starts + pad_lo)[:, None] + np.arange(flen)[None, :]
    return xp[idx] * _WINDOWS[plan.window](flen)


def stft_spectrogram(
    frames: np.ndarray,
    sample_rate: int,
    band: EffectiveBand,
    component: str = "real",
    segment_id: str = "",
) -> Spectrogram:
    """Per-frame DFT, one chosen component, bins cropped to the band."""
    if component not in ("real", "magnitude"):
        raise PlanError(f"unknown STFT component {component!r}")
    band.validate(sample_rate)
    flen = frames.shape[1]
    spec = np.fft.rfft(frames, axis=1)
    freqs = np.arange(spec.shape[1]) * sample_rate / flen
    keep = (freqs >= band.f_lo) & (freqs <= band.f_hi)
    if not keep.any():
        raise BandError(f"band [{band.f_lo}, {band.f_hi}] retains no FFT bins")
    spec = spec[:, keep]
    data = spec.real if component == "real" else np.abs(spec)
    return Spectrogram(
        kind="stft",
        data=np.ascontiguousarray(data, dtype=np.float32),
        band=(band.f_lo, band.f_hi),
        sample_rate=sample_rate,
        segment_id=segment_id,
    )


def build_filterbank(
    scale: str,
    n_filters: int,
    band: EffectiveBand,
    sample_rate: int,
    n_fft: int,
) -> FilterBank:
    """Triangular filters with centers uniform on the warped scale.

    Uniform spacing in Mel/Bark units makes the filters denser in Hz at low
    frequency. Every filter must cover at least one FFT bin with positive
    weight; too many filters for the available bins is rejected.
    """
    if scale not in _SCALES:
        raise PlanError(f"unknown filterbank scale {scale!r}")
    if n_filters < 1:
        raise FilterBankError("need at least one filter")
    band.validate(sample_rate)
    warp, unwarp = _SCALES[scale]
    points = unwarp(np.linspace(warp(band.f_lo), warp(band.f_hi), n_filters + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = points[:-2], points[1:-1], points[2:]
    up = (freqs[None, :] - lo[:, None]) / (mid - lo)[:, None]
    down = (hi[:, None] - freqs[None, :]) / (hi - mid)[:, None]
    matrix = np.clip(np.minimum(up, down), 0.0, None)
    row_sums = matrix.sum(axis=1)
    if (row_sums <= 0).any():
        bad = int(np.nonzero(row_sums <= 0)[0][0])
        raise FilterBankError(
            f"filter {bad} covers no FFT bins ({n_filters} filters over "
            f"{n_fft // 2 + 1} bins is too dense)"
        )
    return FilterBank(
        scale=scale,
        n_filters=n_filters,
        f_lo=band.f_lo,
        f_hi=band.f_hi,
        matrix=matrix,
        center_freqs=mid.copy(),
    )


def apply_filterbank(
    power: np.ndarray,
    fb: FilterBank,
    log_floor: float = LOG_FLOOR,
    sample_rate: int = 0,
    segment_id: str = "",
) -> Spectrogram:
    """out[t, j] = log10(max(sum_bin fb[j, bin] * power[t, bin], floor))."""
    if power.ndim != 2 or power.shape[1] != fb.matrix.shape[1]:
        raise ShapeError(
            f"power matrix with {power.shape[-1] if power.ndim else 0} bins does not "
            f"match a {fb.matrix.shape[1]}-bin filter bank"
        )
    banked = power @ fb.matrix.T
    data = np.log10(np.maximum(banked, log_floor))
    return Spectrogram(
        kind=fb.scale,
        data=np.ascontiguousarray(data, dtype=np.float32),
        band=(fb.f_lo, fb.f_hi),
        sample_rate=sample_rate,
        segment_id=segment_id,
    )


def warped_spectrogram(
    x: np.ndarray,
    sample_rate: int,
    scale: str,
    n_filters: int,
    band: EffectiveBand,
    plan: FramingPlan | None = None,
    segment_id: str = "",
) -> Spectrogram:
    """Waveform -> framed power spectrum -> Mel or Bark filter bank -> log10."""
    plan = plan or FramingPlan()
    frames = frame_signal(x, sample_rate, plan)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    fb = build_filterbank(scale, n_filters, band, sample_rate, frames.shape[1])
    return apply_filterbank(power, fb, sample_rate=sample_rate, segment_id=segment_id)


def cqt_spectrogram(
    x: np.ndarray,
    sample_rate: int,
    plan: CqtPlan,
    segment_id: str = "",
) -> Spectrogram:
    """Correlate hops against Hann-windowed complex kernels, keep magnitudes.

    Kernel k spans ceil(Q * sr / f_k) samples (longer at low frequency),
    amplitude-normalized by the window sum; hops center at i * hop with zero
    padding outside the segment.
    """
    x = np.asarray(x, dtype=np.float64)
    if plan.f_max > sample_rate / 2:
        raise PlanError(f"constant-Q f_max {plan.f_max} Hz above Nyquist {sample_rate / 2} Hz")
    hop = int(plan.hop_ms * sample_rate / 1000.0)
    if hop < 1:
        raise PlanError(f"hop {plan.hop_ms} ms is shorter than one sample at {sample_rate} Hz")
    duration_ms = len(x) / sample_rate * 1000.0
    n_frames = _round_half_up(duration_ms / plan.hop_ms)
    if n_frames < 1:
        raise TooShortError("signal shorter than one constant-Q hop")
    centers = np.arange(n_frames) * hop
    freqs = plan.center_freqs
    q = plan.q_factor
    lengths = np.ceil(q * sample_rate / freqs).astype(np.int64)
    pad = int(lengths.max() // 2 + 1)
    xp = np.pad(x, (pad, pad))
    out = np.empty((n_frames, len(freqs)), dtype=np.float64)
    chunk = max(1, int(4e6 // max(1, lengths.max())))
    for k, (fk, nk) in enumerate(zip(freqs, lengths)):
        n = np.arange(nk) - nk // 2
        win = np.hanning(nk)
        kernel = win * np.exp(-2j * np.pi * fk * n / sample_rate) / win.sum()
        for t0 in range(0, n_frames, chunk):
            cs = centers[t0 : t0 + chunk]
            idx = (cs + pad - nk // 2)[:, None] + np.arange(nk)[None, :]
            out[t0 : t0 + chunk, k] = np.abs(xp[idx] @ kernel)
    return Spectrogram(
        kind="cqt",
        data=np.ascontiguousarray(out, dtype=np.float32),
        band=(plan.f_min, plan.f_max),
        sample_rate=sample_rate,
        segment_id=segment_id,
    )


# -- cache files ------------------------------------------------------

CACHE_MAGIC = b"CMOEFEAT\0"
CACHE_VERSION = 1
_KIND_TAGS = {k: i for i, k in enumerate(FEATURE_KINDS)}


def save_feature(path, spec: Spectrogram) -> None:
    sid = spec.segment_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(bytes([CACHE_VERSION, _KIND_TAGS[spec.kind]]))
        fh.write(struct.pack("<II", spec.time_frames, spec.freq_bins))
        fh.write(struct.pack("<dd", *spec.band))
        fh.write(struct.pack("<I", spec.sample_rate))
        fh.write(struct.pack("<H", len(sid)))
        fh.write(sid)
        fh.write(np.ascontiguousarray(spec.data, dtype="<f4").tobytes())


def load_feature(path) -> Spectrogram:
    with open(path, "rb") as fh:
        if fh.read(9) != CACHE_MAGIC:
            raise CheckpointError(f"{path}: not a feature cache file")
        version, kind_tag = fh.read(1)[0], fh.read(1)[0]
        if version != CACHE_VERSION:
            raise CheckpointError(f"{path}: unsupported cache version {version}")
        if kind_tag >= len(FEATURE_KINDS):
            raise CheckpointError(f"{path}: unknown feature kind tag {kind_tag}")
        t, f = struct.unpack("<II", fh.read(8))
        band = struct.unpack("<dd", fh.read(16))
        (sr,) = struct.unpack("<I", fh.read(4))
        (slen,) = struct.unpack("<H", fh.read(2))
        sid = fh.read(slen).decode("utf-8")
        buf = fh.read(t * f * 4)
    if len(buf) != t * f * 4:
        raise CheckpointError(f"{path}: truncated feature data")
    data = np.frombuffer(buf, dtype="<f4").reshape(t, f).copy()
    return Spectrogram(
        kind=FEATURE_KINDS[kind_tag],
        data=data,
        band=band,
        sample_rate=sr,
        segment_id=sid,
    )


def extract(
    kind: str,
    x: np.ndarray,
    sample_rate: int,
    band: EffectiveBand,
    frame_ms: float = 50.0,
    shift_ms: float | None = None,
    n_filters: int = 300,
    stft_component: str = "real",
    cqt_b: int = 48,
    cqt_hop_ms: float = 100.0 / 3.0,
    segment_id: str = "",
) -> Spectrogram:
    """Single entry point used by the cache builder and the CLI."""
    if kind == "stft":
        frames = frame_signal(x, sample_rate, FramingPlan(frame_ms, shift_ms))
        return stft_spectrogram(frames, sample_rate, band, stft_component, segment_id)
    if kind in ("mel", "bark"):
        return warped_spectrogram(
            x, sample_rate, kind, n_filters, band,
            FramingPlan(frame_ms, shift_ms), segment_id,
        )
    if kind == "cqt":
        plan = CqtPlan(band.f_lo, band.f_hi, bins_per_octave=cqt_b, hop_ms=cqt_hop_ms)
        return cqt_spectrogram(x, sample_rate, plan, segment_id)
    raise PlanError(f"unknown feature kind {kind!r}; choose from {FEATURE_KINDS}")
