"""EEG preprocessing: band-pass, decimation, trimming, normalization, chunking.

Raw trials (40 channels x 8064 samples at 128 Hz in the DEAP preprocessed
layout) become stacks of six 1-second 32x128 frames, each normalized to
[0, 1] and labeled by thresholding the trial's self-reported rating. A
synthetic generator produces license-free EEG-like trials that run through
the exact same operations, so every downstream test works without the
real dataset.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .errors import ConfigError
from .tensor import Rng, read_ntf, write_ntf

RAW_CHANNELS = 40
EEG_CHANNELS = 32
RAW_SAMPLES = 8064
RATING_KEYS = ("valence", "arousal", "dominance", "liking")


@dataclass(frozen=True)
class PipelineConfig:
    band_low: float = 4.0
    band_high: float = 45.0
    target_rate: int = 128
    baseline_seconds: float = 3.0
    window: int = 128
    overlap: float = 0.5
    frames_per_chunk: int = 6
    chunk_hop_frames: int = 6
    label_threshold: float = 5.0
    label_kind: str = "valence"

    def __post_init__(self):
        if not 0 <= self.overlap < 1:
            raise ConfigError(f"overlap must be in [0,1), got {self.overlap}")
        if not 0 < self.band_low < self.band_high < self.target_rate / 2:
            raise ConfigError(
                f"need 0 < low < high < rate/2, got ({self.band_low}, {self.band_high}) "
                f"at {self.target_rate} Hz"
            )
        if self.window < 1 or self.frames_per_chunk < 1 or self.chunk_hop_frames < 1:
            raise ConfigError("window, frames_per_chunk and chunk_hop_frames must be >= 1")
        if self.label_kind not in ("valence", "arousal"):
            raise ConfigError(f"label_kind must be valence or arousal, got {self.label_kind!r}")

    @property
    def frame_hop(self) -> int:
        hop = int(round(self.window * (1 - self.overlap)))
        return max(hop, 1)

    def as_dict(self) -> dict:
        return {
            "band": [self.band_low, self.band_high],
            "target_rate": self.target_rate,
            "baseline_seconds": self.baseline_seconds,
            "window": self.window,
            "overlap": self.overlap,
            "frames_per_chunk": self.frames_per_chunk,
            "chunk_hop_frames": self.chunk_hop_frames,
            "label_threshold": self.label_threshold,
            "label_kind": self.label_kind,
        }


@dataclass
class Trial:
    samples: np.ndarray  # (channels, time), microvolt-scale float32
    sample_rate: int
    ratings: dict[str, float]  # valence/arousal/dominance/liking in [1, 9]
    subject_id: int
    trial_id: int

    def __post_init__(self):
        if self.sample_rate not in (512, 128):
            raise ValueError(f"sample_rate must be 512 or 128, got {self.sample_rate}")
        if self.samples.ndim != 2 or self.samples.shape[0] not in (40, 32):
            raise ValueError(f"expected (40|32, T) samples, got {tuple(self.samples.shape)}")


@dataclass(frozen=True)
class EegChunk:
    data: np.ndarray  # (frames, channels, samples) in [0, 1]
    label: int
    provenance: tuple[int, int, int]  # (subject, trial, start frame)


# ---------------------------------------------------------------------------
# Signal operations
# ---------------------------------------------------------------------------

def bandpass(x: np.ndarray, rate: float, low: float, high: float) -> np.ndarray:
    """Zero-phase 4th-order Butterworth band-pass, per channel."""
    if not 0 < low < high < rate / 2:
        raise ValueError(f"invalid band ({low}, {high}) at {rate} Hz")
    sos = sps.butter(4, [low, high], btype="band", fs=rate, output="sos")
    return sps.sosfiltfilt(sos, x, axis=-1).astype(np.float32)


def decimate(x: np.ndarray, from_rate: int, to_rate: int) -> np.ndarray:
    """Anti-aliased integer-ratio downsampling (low-pass at 0.8 * Nyquist of target)."""
    if from_rate == to_rate:
        return np.asarray(x, dtype=np.float32)
    if from_rate % to_rate:
        raise ValueError(f"rate ratio {from_rate}/{to_rate} is not an integer")
    factor = from_rate // to_rate
    sos = sps.butter(8, 0.8 * (to_rate / 2), btype="low", fs=from_rate, output="sos")
    smooth = sps.sosfiltfilt(sos, x, axis=-1)
    return smooth[..., ::factor].astype(np.float32)


def trim_and_select(trial: Trial, baseline_seconds: float = 3.0,
                    keep_channels: int = EEG_CHANNELS) -> np.ndarray:
    """Drop the pre-trial baseline and the side channels; expects 128 Hz input."""
    if trial.sample_rate != 128:
        raise ValueError(f"trim_and_select expects a 128 Hz trial, got {trial.sample_rate} Hz")
    drop = int(round(baseline_seconds * trial.sample_rate))
    if trial.samples.shape[1] <= drop:
        raise ValueError(
            f"trial too short: {trial.samples.shape[1]} samples <= {drop} baseline samples"
        )
    return np.ascontiguousarray(trial.samples[:keep_channels, drop:])


def normalize_per_channel(x: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1] per channel; a constant channel maps to all 0.5."""
    lo = x.min(axis=-1, keepdims=True)
    hi = x.max(axis=-1, keepdims=True)
    span = hi - lo
    flat = span == 0
    safe = np.where(flat, 1, span)
    out = (x - lo) / safe
    return np.where(flat, np.float32(0.5), out.astype(np.float32))


def frame_count(t: int, window: int, hop: int) -> int:
    return 0 if t < window else (t - window) // hop + 1


def chunk_count(n_frames: int, frames_per_chunk: int, chunk_hop: int) -> int:
    if n_frames < frames_per_chunk:
        return 0
    return (n_frames - frames_per_chunk) // chunk_hop + 1


def frame_and_chunk(x: np.ndarray, cfg: PipelineConfig) -> tuple[np.ndarray, np.ndarray]:
    """Slice (C, T') into overlapping frames, then stack frames into chunks.

    Returns (chunks, start_frames): chunks (n, frames_per_chunk, C, window).
    """
    c, t = x.shape
    if t < cfg.window:
        raise ValueError(f"signal length {t} is shorter than the window {cfg.window}")
    hop = cfg.frame_hop
    nf = frame_count(t, cfg.window, hop)
    if nf < cfg.frames_per_chunk:
        raise ValueError(f"only {nf} frames, need at least {cfg.frames_per_chunk} per chunk")
    frames = np.stack([x[:, i * hop : i * hop + cfg.window] for i in range(nf)])
    nc = chunk_count(nf, cfg.frames_per_chunk, cfg.chunk_hop_frames)
    starts = np.arange(nc) * cfg.chunk_hop_frames
    chunks = np.stack([frames[s : s + cfg.frames_per_chunk] for s in starts])
    return chunks.astype(np.float32), starts


def threshold_label(rating: float, threshold: float) -> int:
    """1 iff rating is strictly greater than the threshold (ties go to class 0)."""
    return int(rating > threshold)


def _preprocess_trial(trial: Trial, cfg: PipelineConfig) -> tuple[np.ndarray, np.ndarray]:
    x = decimate(trial.samples, trial.sample_rate, cfg.target_rate)
    x = bandpass(x, cfg.target_rate, cfg.band_low, cfg.band_high)
    staged = Trial(x, cfg.target_rate, trial.ratings, trial.subject_id, trial.trial_id)
    x = trim_and_select(staged, cfg.baseline_seconds)
    x = normalize_per_channel(x)
    return frame_and_chunk(x, cfg)


def process_trial(trial: Trial, cfg: PipelineConfig) -> list[EegChunk]:
    """Full per-trial pipeline: decimate, band-pass, trim, normalize, frame, chunk."""
    chunks, starts = _preprocess_trial(trial, cfg)
    label = threshold_label(trial.ratings[cfg.label_kind], cfg.label_threshold)
    return [
        EegChunk(chunks[i], label, (trial.subject_id, trial.trial_id, int(starts[i])))
        for i in range(len(starts))
    ]


# ---------------------------------------------------------------------------
# Chunk sets (in-memory dataset with both label axes and provenance)
# ---------------------------------------------------------------------------

@dataclass
class ChunkSet:
    data: np.ndarray            # (n, frames, channels, window) float32 in [0, 1]
    label_valence: np.ndarray   # (n,) int64
    label_arousal: np.ndarray   # (n,) int64
    subjects: np.ndarray        # (n,) int64
    trials: np.ndarray          # (n,) int64
    start_frames: np.ndarray    # (n,) int64

    def __len__(self) -> int:
        return len(self.data)

    def labels(self, kind: str) -> np.ndarray:
        if kind == "valence":
            return self.label_valence
        if kind == "arousal":
            return self.label_arousal
        raise ConfigError(f"unknown label kind {kind!r}")

    def label_histogram(self) -> dict:
        return {
            kind: {str(v): int(np.sum(self.labels(kind) == v)) for v in (0, 1)}
            for kind in ("valence", "arousal")
        }


def build_chunkset(trials: list[Trial], cfg: PipelineConfig) -> ChunkSet:
    """Process trials in canonical (subject, trial, start-frame) order."""
    trials = sorted(trials, key=lambda t: (t.subject_id, t.trial_id))
    data, lv, la, subj, tri, starts = [], [], [], [], [], []
    for trial in trials:
        chunks, s = _preprocess_trial(trial, cfg)
        data.append(chunks)
        lv.append(np.full(len(s), threshold_label(trial.ratings["valence"], cfg.label_threshold)))
        la.append(np.full(len(s), threshold_label(trial.ratings["arousal"], cfg.label_threshold)))
        subj.append(np.full(len(s), trial.subject_id))
        tri.append(np.full(len(s), trial.trial_id))
        starts.append(s)
    return ChunkSet(
        data=np.concatenate(data).astype(np.float32),
        label_valence=np.concatenate(lv).astype(np.int64),
        label_arousal=np.concatenate(la).astype(np.int64),
        subjects=np.concatenate(subj).astype(np.int64),
        trials=np.concatenate(tri).astype(np.int64),
        start_frames=np.concatenate(starts).astype(np.int64),
    )


# ---------------------------------------------------------------------------
# Synthetic EEG-like data (license-free stand-in exercising the same pipeline)
# ---------------------------------------------------------------------------

SYNTH_SIGNAL_CHANNELS = 16   # EEG channels carrying the class oscillation
SYNTH_CLASS_FREQS = (10.0, 22.0)  # class 0: alpha-band, class 1: beta-band


def _pink_noise(rng: Rng, channels: int, t: int) -> np.ndarray:
    spec_re = rng.normal((channels, t // 2 + 1))
    spec_im = rng.normal((channels, t // 2 + 1))
    freqs = np.fft.rfftfreq(t, d=1.0)
    amp = 1.0 / np.sqrt(np.maximum(freqs, freqs[1]))
    spectrum = (spec_re + 1j * spec_im) * amp
    x = np.fft.irfft(spectrum, n=t, axis=-1)
    return (x / x.std(axis=-1, keepdims=True)).astype(np.float32)


def synth_trial(label: int, seed_rng: Rng, subject_id: int, trial_id: int,
                rate: int = 128, t: int = RAW_SAMPLES) -> Trial:
    """One synthetic 40-channel trial whose EEG channels carry a class-band tone."""
    noise = _pink_noise(seed_rng.child(1), RAW_CHANNELS, t)
    white = seed_rng.child(2).normal((RAW_CHANNELS, t), std=0.3)
    x = noise + white
    freq = SYNTH_CLASS_FREQS[label]
    other = SYNTH_CLASS_FREQS[1 - label]
    tt = np.arange(t) / rate
    phases = seed_rng.child(3).uniform((SYNTH_SIGNAL_CHANNELS, 1), 0, 2 * np.pi)
    amps = seed_rng.child(4).uniform((SYNTH_SIGNAL_CHANNELS, 1), 1.6, 2.4)
    tone = amps * np.sin(2 * np.pi * freq * tt[None, :] + phases)
    tone += 0.3 * np.sin(2 * np.pi * other * tt[None, :] + phases[::-1])
    x[:SYNTH_SIGNAL_CHANNELS] += tone.astype(np.float32)
    rating = 7.0 if label == 1 else 3.0
    ratings = {k: rating for k in RATING_KEYS}
    return Trial(x.astype(np.float32), rate, ratings, subject_id, trial_id)


def synth_dataset(n_per_class: int, seed: int, cfg: PipelineConfig | None = None) -> ChunkSet:
    """Deterministic synthetic chunk set with exactly n_per_class chunks per class."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    cfg = cfg or PipelineConfig()
    rng = Rng(seed)
    probe = synth_trial(0, rng.child(0, 0), 0, 0)
    per_trial = len(process_trial(probe, cfg))
    need = -(-n_per_class // per_trial)
    trials = []
    for label in (0, 1):
        for i in range(need):
            trials.append(synth_trial(label, rng.child(label, i), subject_id=label, trial_id=i))
    full = build_chunkset(trials, cfg)
    keep = []
    for label in (0, 1):
        idx = np.flatnonzero(full.label_valence == label)[:n_per_class]
        if len(idx) < n_per_class:
            raise ValueError("synthetic generation produced too few chunks")
        keep.append(idx)
    idx = np.sort(np.concatenate(keep))
    return ChunkSet(
        data=full.data[idx],
        label_valence=full.label_valence[idx],
        label_arousal=full.label_arousal[idx],
        subjects=full.subjects[idx],
        trials=full.trials[idx],
        start_frames=full.start_frames[idx],
    )


# ---------------------------------------------------------------------------
# Trial directory input (the converter's NTF + ratings-sidecar layout)
# ---------------------------------------------------------------------------

def read_trials_dir(data_dir: str) -> list[Trial]:
    """Load trials from per-trial NTF files plus per-subject ratings JSON sidecars."""
    sidecars = sorted(f for f in os.listdir(data_dir) if f.endswith("_ratings.json"))
    if not sidecars:
        raise FileNotFoundError(f"no *_ratings.json sidecars found in {data_dir}")
    trials = []
    for sidecar in sidecars:
        with open(os.path.join(data_dir, sidecar), "r", encoding="utf-8") as fh:
            entries = json.load(fh)
        for e in entries:
            path = os.path.join(data_dir, f"s{e['subject']:02d}_t{e['trial']:02d}.ntf")
            samples = read_ntf(path)
            trials.append(
                Trial(
                    samples=samples,
                    sample_rate=int(e.get("sample_rate", 128)),
                    ratings={k: float(e[k]) for k in RATING_KEYS},
                    subject_id=int(e["subject"]),
                    trial_id=int(e["trial"]),
                )
            )
    return trials


# ---------------------------------------------------------------------------
# Chunk shards on disk: NTF data + NTF per-chunk metadata + JSON manifest
# ---------------------------------------------------------------------------

SHARD_SIZE = 4096
META_COLUMNS = ("label_valence", "label_arousal", "subject", "trial", "start_frame")


def write_shards(out_dir: str, chunks: ChunkSet, cfg: PipelineConfig,
                 extra_meta: dict | None = None, shard_size: int = SHARD_SIZE) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    n = len(chunks)
    meta_matrix = np.stack(
        [
            chunks.label_valence,
            chunks.label_arousal,
            chunks.subjects,
            chunks.trials,
            chunks.start_frames,
        ],
        axis=1,
    ).astype(np.float32)
    shards = []
    for i, start in enumerate(range(0, n, shard_size)):
        stop = min(start + shard_size, n)
        data_file = f"chunks_{i:03d}.ntf"
        meta_file = f"meta_{i:03d}.ntf"
        write_ntf(os.path.join(out_dir, data_file), chunks.data[start:stop])
        write_ntf(os.path.join(out_dir, meta_file), meta_matrix[start:stop])
        shards.append({"data": data_file, "meta": meta_file, "count": stop - start})
    manifest = {
        "format": "eeg-chunk-shards-v1",
        "config": cfg.as_dict(),
        "count": n,
        "shards": shards,
        "meta_columns": list(META_COLUMNS),
        "label_histogram": chunks.label_histogram(),
    }
    if extra_meta:
        manifest.update(extra_meta)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_shards(data_dir: str) -> tuple[ChunkSet, dict]:
    with open(os.path.join(data_dir, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    data, meta = [], []
    for shard in manifest["shards"]:
        data.append(read_ntf(os.path.join(data_dir, shard["data"])))
        meta.append(read_ntf(os.path.join(data_dir, shard["meta"])))
    data = np.concatenate(data)
    meta = np.concatenate(meta)
    chunks = ChunkSet(
        data=data,
        label_valence=meta[:, 0].astype(np.int64),
        label_arousal=meta[:, 1].astype(np.int64),
        subjects=meta[:, 2].astype(np.int64),
        trials=meta[:, 3].astype(np.int64),
        start_frames=meta[:, 4].astype(np.int64),
    )
    return chunks, manifest
