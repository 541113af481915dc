"""Dataset plumbing: manifests, source-level splits, 30 s segmentation, batching.

A manifest row names one recording (source). Splits are assigned per source,
never per segment, so no 30 s window can leak across the train/test boundary.
Split tables ship as CSV with an ``Else`` wildcard row per class for datasets
whose published table only enumerates the test ids.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioClip, load_audio, probe_wav, write_wav_pcm16
from .errors import (
    CacheMissError,
    CmoeError,
    ConfigError,
    LeakageError,
    ManifestError,
    ShapeError,
)
from .features import EffectiveBand, Spectrogram, extract, load_feature, save_feature

logger = logging.getLogger(__name__)

SEGMENT_LEN_S = 30.0
SEGMENT_HOP_S = 15.0
SPLITS = ("train", "test")


@dataclass
class ManifestEntry:
    source_id: str
    path: Path
    label: str
    split: str = ""


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    class_names: list[str]
    sample_rate: int | None = None
    band: EffectiveBand | None = None

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.source_id in seen:
                raise ManifestError(f"duplicate source id {e.source_id!r}")
            seen.add(e.source_id)
            if e.label not in self.class_names:
                raise ManifestError(f"{e.source_id}: label {e.label!r} not in class list")

    def label_to_index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.class_names)}

    def by_source(self) -> dict[str, ManifestEntry]:
        return {e.source_id: e for e in self.entries}


def load_manifest(path, sample_rate=None, band=None) -> Manifest:
    """Read a `source_id,path,label,split` CSV; relative paths resolve
    against the CSV's own directory."""
    path = Path(path)
    entries = []
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from None
    with fh:
        reader = csv.DictReader(fh)
        need = {"source_id", "path", "label", "split"}
        if reader.fieldnames is None or not need.issubset(reader.fieldnames):
            raise ManifestError(f"{path}: header must contain {sorted(need)}")
        for row in reader:
            split = (row["split"] or "").strip()
            if split and split not in SPLITS:
                raise ManifestError(f"{path}: bad split {split!r} for {row['source_id']}")
            p = Path(row["path"])
            if not p.is_absolute():
                p = path.parent / p
            entries.append(ManifestEntry(row["source_id"].strip(), p, row["label"].strip(), split))
    class_names = sorted({e.label for e in entries})
    return Manifest(entries, class_names, sample_rate, band)


def write_manifest(path, entries) -> None:
    """Paths under the CSV's own directory are written relative to it, so the
    manifest keeps working if the tree is moved or read from another cwd."""
    path = Path(path)
    base = path.resolve().parent
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source_id", "path", "label", "split"])
        for e in entries:
            try:
                p = Path(e.path).resolve().relative_to(base)
            except ValueError:
                p = Path(e.path)
            w.writerow([e.source_id, str(p), e.label, e.split])


# -- split tables ------------------------------------------------------------


def _canon_id(sid: str) -> str:
    # published tables write "06" where filenames may say "6"; compare numerically
    return sid.lstrip("0") or "0" if sid.isdigit() else sid


@dataclass
class SplitTable:
    assigned: dict  # (label, canonical id) -> split
    else_split: dict  # label -> split for ids not listed

    def resolve(self, label: str, source_id: str) -> str:
        key = (label, _canon_id(source_id))
        if key in self.assigned:
            return self.assigned[key]
        if label in self.else_split:
            return self.else_split[label]
        raise ManifestError(f"source {source_id!r} ({label}) not covered by the split table")


def load_split_table(path) -> SplitTable:
    """Read a `label,source_id,split` CSV; a literal ``Else`` id assigns the
    remainder of that class."""
    path = Path(path)
    assigned, else_split = {}, {}
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise ManifestError(f"cannot read split table {path}: {e}") from None
    with fh:
        reader = csv.DictReader(fh)
        need = {"label", "source_id", "split"}
        if reader.fieldnames is None or not need.issubset(reader.fieldnames):
            raise ManifestError(f"{path}: header must contain {sorted(need)}")
        for row in reader:
            label = row["label"].strip()
            sid = row["source_id"].strip()
            split = row["split"].strip()
            if split not in SPLITS:
                raise ManifestError(f"{path}: bad split {split!r}")
            if sid == "Else":
                if label in else_split:
                    raise ManifestError(f"{path}: two Else rows for {label!r}")
                else_split[label] = split
                continue
            key = (label, _canon_id(sid))
            if key in assigned:
                if assigned[key] != split:
                    raise LeakageError(f"{path}: {label}/{sid} listed in both splits")
                raise ManifestError(f"{path}: {label}/{sid} listed twice")
            assigned[key] = split
    return SplitTable(assigned, else_split)


def builtin_split_table(name: str) -> SplitTable:
    path = Path(__file__).parent / "splits" / f"{name}.csv"
    if not path.exists():
        raise ConfigError(f"no bundled split table named {name!r}")
    return load_split_table(path)


# -- segmentation ------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    source_id: str
    start_s: float
    end_s: float
    label: str
    split: str

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s

    @property
    def segment_id(self) -> str:
        return f"{self.source_id}_{int(round(self.start_s)):05d}"


@dataclass
class SegmentIndex:
    segments: list[Segment] = field(default_factory=list)

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    def sources(self) -> set[str]:
        return {s.source_id for s in self.segments}


def segment_starts(duration_s: float, len_s=SEGMENT_LEN_S, hop_s=SEGMENT_HOP_S) -> list[float]:
    if len_s <= 0 or hop_s <= 0:
        raise ConfigError("segment length and hop must be positive")
    if duration_s < len_s:
        return []
    count = int(math.floor((duration_s - len_s) / hop_s)) + 1
    return [i * hop_s for i in range(count)]


def segment_clip(clip: AudioClip, len_s=SEGMENT_LEN_S, hop_s=SEGMENT_HOP_S, split="") -> list[Segment]:
    starts = segment_starts(clip.duration_s, len_s, hop_s)
    if not starts:
        logger.warning("skipping %s: %.1f s is shorter than one %g s window",
                       clip.source_id, clip.duration_s, len_s)
    return [Segment(clip.source_id, s, s + len_s, clip.label, split) for s in starts]


def build_split(manifest: Manifest, split_table: SplitTable | None = None,
                len_s=SEGMENT_LEN_S, hop_s=SEGMENT_HOP_S) -> tuple[SegmentIndex, SegmentIndex]:
    """Assign each source to train or test, then window it into segments.

    With a split table the table is authoritative and the manifest's split
    column is overwritten to match; without one the manifest column is used.
    """
    train, test = SegmentIndex(), SegmentIndex()
    for entry in manifest.entries:
        if split_table is not None:
            entry.split = split_table.resolve(entry.label, entry.source_id)
        if entry.split not in SPLITS:
            raise ManifestError(f"{entry.source_id}: no split assigned and no table given")
        sr, n = probe_wav(entry.path)
        if manifest.sample_rate is not None and sr != manifest.sample_rate:
            raise ManifestError(
                f"{entry.source_id}: file rate {sr} != manifest rate {manifest.sample_rate}")
        starts = segment_starts(n / sr, len_s, hop_s)
        if not starts:
            logger.warning("skipping %s: %.1f s is shorter than one %g s window",
                           entry.source_id, n / sr, len_s)
            continue
        dest = train if entry.split == "train" else test
        for s in starts:
            dest.segments.append(Segment(entry.source_id, s, s + len_s, entry.label, entry.split))
    overlap = train.sources() & test.sources()
    if overlap:
        raise LeakageError(f"sources in both splits: {sorted(overlap)}")
    return train, test


def carve_validation(train: SegmentIndex, fraction=0.15, seed=0,
                     by_source=False, stratified=False) -> tuple[SegmentIndex, SegmentIndex]:
    """Split off a validation set, by default uniformly over segments (the
    carved sources then have segments on both sides, which is the intended
    behaviour; pass by_source=True for source-disjoint hygiene)."""
    if not 0 < fraction < 1:
        raise ConfigError(f"validation fraction must lie in (0,1), got {fraction}")
    n = len(train)
    if n == 0:
        raise CmoeError("cannot carve a validation set from an empty training index")
    n_val = int(math.floor(fraction * n + 0.5))
    rng = np.random.default_rng([seed, 0x56414C])
    chosen: set[int] = set()
    if by_source:
        sources = sorted(train.sources())
        for src in rng.permutation(sources):
            if len(chosen) >= n_val:
                break
            chosen |= {i for i, s in enumerate(train.segments) if s.source_id == src}
    elif stratified:
        by_label: dict[str, list[int]] = {}
        for i, s in enumerate(train.segments):
            by_label.setdefault(s.label, []).append(i)
        for label in sorted(by_label):
            idx = by_label[label]
            k = int(math.floor(fraction * len(idx) + 0.5))
            chosen |= set(rng.permutation(idx)[:k].tolist())
    else:
        chosen = set(rng.permutation(n)[:n_val].tolist())
    keep = SegmentIndex([s for i, s in enumerate(train.segments) if i not in chosen])
    val = SegmentIndex([s for i, s in enumerate(train.segments) if i in chosen])
    return keep, val


# -- feature store and batching ----------------------------------------------


class FeatureStore:
    """Disk cache of extracted spectrograms, one file per segment id.

    With an ``extract_fn(segment) -> Spectrogram`` the store fills misses on
    demand; without one a miss is an error (cache-only mode). ``memo`` keeps
    decoded arrays in memory, which repeated training runs want.
    """

    def __init__(self, cache_dir, extract_fn=None, memo=False):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._extract_fn = extract_fn
        self._memo: dict | None = {} if memo else None

    def path_for(self, segment_id: str) -> Path:
        safe = "".join(c if c.isalnum() or c in "._-" else "_" for c in segment_id)
        return self.cache_dir / f"{safe}.feat"

    def has(self, segment_id: str) -> bool:
        return self.path_for(segment_id).exists()

    def put(self, spec: Spectrogram) -> Path:
        path = self.path_for(spec.segment_id)
        save_feature(path, spec)
        return path

    def get(self, segment: Segment) -> np.ndarray:
        sid = segment.segment_id
        if self._memo is not None and sid in self._memo:
            return self._memo[sid]
        path = self.path_for(sid)
        if path.exists():
            arr = load_feature(path).data
        elif self._extract_fn is not None:
            spec = self._extract_fn(segment)
            save_feature(path, spec)
            arr = spec.data
        else:
            raise CacheMissError(f"no cached feature for segment {sid!r}")
        if self._memo is not None:
            self._memo[sid] = arr
        return arr


def make_extract_fn(manifest: Manifest, kind: str, band: EffectiveBand, **kw):
    """Closure that decodes a segment's source file and extracts one feature.

    Decoded audio for the most recent source is kept so consecutive segments
    of one file (the common access pattern) decode it once.
    """
    sources = manifest.by_source()
    last: list = [None, None]

    def fn(segment: Segment) -> Spectrogram:
        if last[0] != segment.source_id:
            entry = sources.get(segment.source_id)
            if entry is None:
                raise ManifestError(f"segment references unknown source {segment.source_id!r}")
            last[0] = segment.source_id
            last[1] = load_audio(entry.path, source_id=entry.source_id, label=entry.label)
        clip = last[1]
        x = clip.segment(segment.start_s, segment.end_s)
        return extract(kind, x, clip.sample_rate, band, segment_id=segment.segment_id, **kw)

    return fn


@dataclass
class Batch:
    x: np.ndarray  # float32 [N, 1, T, Fq]
    y: np.ndarray  # int64 [N]
    segment_ids: tuple


def make_batches(index: SegmentIndex, store: FeatureStore, label_to_index: dict,
                 batch_size: int, shuffle_seed=0, epoch=0, shuffle=True):
    """Yield Batches in a per-epoch deterministic permutation; the last
    partial batch is kept."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    n = len(index)
    if shuffle:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    else:
        order = np.arange(n)
    for lo in range(0, n, batch_size):
        segs = [index.segments[i] for i in order[lo:lo + batch_size]]
        feats = [store.get(s) for s in segs]
        shape = feats[0].shape
        for s, f in zip(segs, feats):
            if f.shape != shape:
                raise ShapeError(
                    f"segment {s.segment_id}: feature {f.shape} != batch-mate {shape}")
        x = np.stack(feats).astype(np.float32)[:, None, :, :]
        y = np.array([label_to_index[s.label] for s in segs], dtype=np.int64)
        yield Batch(x, y, tuple(s.segment_id for s in segs))


# -- synthetic dataset -------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Tonal toy dataset: every class is a union of latent sub-modes, each
    mode a fixed tone set, so class identity is learnable while the modes
    give a routing layer something real to separate."""

    num_classes: int = 4
    modes_per_class: int = 2
    tones_per_mode: int = 2
    train_per_class: int = 8
    test_per_class: int = 4
    sample_rate: int = 2000
    clip_s: float = 30.0
    snr_db: float | None = 10.0
    amp_jitter_db: float = 3.0
    f_lo: float = 100.0
    f_hi: float = 950.0
    seed: int = 0
    mode_tones: tuple | None = None  # explicit per-(class,mode) tone sets, Hz

    def __post_init__(self):
        if min(self.num_classes, self.modes_per_class, self.tones_per_mode,
               self.train_per_class) < 1 or self.test_per_class < 0:
            raise ConfigError("synthetic counts must be positive")
        if self.train_per_class % self.modes_per_class or (
                self.test_per_class and self.test_per_class % self.modes_per_class):
            raise ConfigError("per-class counts must divide evenly over the latent modes")
        if not 0 < self.f_lo < self.f_hi <= self.sample_rate / 2:
            raise ConfigError(f"tone band [{self.f_lo}, {self.f_hi}] does not fit "
                              f"below Nyquist {self.sample_rate / 2}")
        if self.clip_s <= 0 or self.sample_rate <= 0:
            raise ConfigError("clip length and sample rate must be positive")

    @property
    def num_modes(self) -> int:
        return self.num_classes * self.modes_per_class

    def tone_table(self) -> list[list[float]]:
        """Tone frequencies per global mode, geometric across the band so
        every (class, mode) population is spectrally distinct."""
        if self.mode_tones is not None:
            table = [list(map(float, tones)) for tones in self.mode_tones]
            if len(table) != self.num_modes:
                raise ConfigError(f"mode_tones needs {self.num_modes} tone sets")
        else:
            ratios = [1.0, 1.29, 1.63, 2.04][: self.tones_per_mode]
            if self.tones_per_mode > 4:
                raise ConfigError("at most 4 derived tones per mode; pass mode_tones instead")
            top = self.f_hi / ratios[-1]
            table = []
            for k in range(self.num_modes):
                f0 = self.f_lo * (top / self.f_lo) ** (k / max(1, self.num_modes - 1))
                table.append([f0 * r for r in ratios])
        flat = [round(f, 1) for tones in table for f in tones]
        if len(set(flat)) != len(flat):
            raise ConfigError("tone frequencies collide across (class, mode) pairs")
        return table


def generate_synthetic(spec: SyntheticSpec, out_dir) -> tuple[Manifest, Path]:
    """Write WAVs, a manifest, and a `source_id,latent_mode` sidecar.

    The sidecar is ground truth for analysis only; nothing downstream of the
    manifest ever reads it. Byte-identical output under a fixed seed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tones = spec.tone_table()
    rng = np.random.default_rng(spec.seed)
    t = np.arange(int(round(spec.clip_s * spec.sample_rate)), dtype=np.float64) / spec.sample_rate
    entries, sidecar = [], []
    for c in range(spec.num_classes):
        label = f"class{c}"
        per_split = (("train", spec.train_per_class), ("test", spec.test_per_class))
        idx = 0
        for split, count in per_split:
            for _ in range(count):
                mode = idx % spec.modes_per_class
                gmode = c * spec.modes_per_class + mode
                x = np.zeros_like(t)
                for f in tones[gmode]:
                    amp = 10.0 ** (rng.uniform(-spec.amp_jitter_db, 0.0) / 20.0)
                    x += amp * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
                if spec.snr_db is not None:
                    p_sig = float(np.mean(x ** 2))
                    sigma = math.sqrt(p_sig / 10.0 ** (spec.snr_db / 10.0))
                    x = x + rng.normal(0.0, sigma, x.shape)
                x *= 0.9 / max(1e-12, float(np.max(np.abs(x))))
                sid = f"c{c}s{idx:03d}"
                path = out_dir / f"{sid}.wav"
                write_wav_pcm16(path, x.astype(np.float32), spec.sample_rate)
                entries.append(ManifestEntry(sid, path, label, split))
                sidecar.append((sid, gmode))
                idx += 1
    write_manifest(out_dir / "manifest.csv", entries)
    sidecar_path = out_dir / "latent_modes.csv"
    with open(sidecar_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source_id", "latent_mode"])
        w.writerows(sidecar)
    class_names = sorted({e.label for e in entries})
    band = EffectiveBand(spec.f_lo / 2, min(spec.f_hi * 1.2, spec.sample_rate / 2))
    return Manifest(entries, class_names, spec.sample_rate, band), sidecar_path


def load_sidecar(path) -> dict:
    with open(path, newline="") as fh:
        return {row["source_id"]: int(row["latent_mode"]) for row in csv.DictReader(fh)}
