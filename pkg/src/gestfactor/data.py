"""Corpus handling: the EMA text format, normalization, splits, and the
synthetic ground-truth generator that anchors end-to-end verification.

An utterance is a channel-major (C, t) float matrix at a fixed sample
rate; EMA data has 12 channels (x, y per coil: upper lip, lower lip,
lower incisor, tongue tip, tongue blade, tongue dorsum, in that order)
at 200 Hz.  Files are plain text so corpora diff and round-trip exactly.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import objectives
from .factorization import convolutive_synthesis
from .tensor import Tensor

EMA_CHANNELS = ["ULx", "ULy", "LLx", "LLy", "LIx", "LIy",
                "TTx", "TTy", "TBx", "TBy", "TDx", "TDy"]
EMA_RATE = 200.0


class DataError(ValueError):
    """Malformed corpus file; message carries file and line context."""


@dataclass
class Utterance:
    id: str
    frames: np.ndarray          # (C, t)
    sample_rate: float = EMA_RATE
    labels: list[str] | None = None

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] < 1:
            raise DataError(f"utterance {self.id}: frames must be (C, t>=1), "
                            f"got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise DataError(f"utterance {self.id}: non-finite sample values")

    @property
    def channels(self) -> int:
        return self.frames.shape[0]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[1]


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def save_utterance(utt: Utterance, path: str) -> None:
    rate = utt.sample_rate
    rate_txt = str(int(rate)) if float(rate).is_integer() else repr(rate)
    lines = [f"ema v1 channels={utt.channels} rate={rate_txt}"]
    for frame in utt.frames.T:
        lines.append(" ".join(repr(float(v)) for v in frame))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_utterance(path: str, utt_id: str | None = None,
                   expect_channels: int | None = None) -> Utterance:
    with open(path) as fh:
        raw = fh.read().splitlines()
    if not raw:
        raise DataError(f"{path}: empty file")
    head = raw[0].split()
    if len(head) != 4 or head[0] != "ema" or head[1] != "v1" \
            or not head[2].startswith("channels=") or not head[3].startswith("rate="):
        raise DataError(f"{path}:1: bad header {raw[0]!r}")
    try:
        channels = int(head[2].split("=", 1)[1])
        rate = float(head[3].split("=", 1)[1])
    except ValueError:
        raise DataError(f"{path}:1: bad header numbers {raw[0]!r}") from None
    if expect_channels is not None and channels != expect_channels:
        raise DataError(f"{path}: declares {channels} channels, expected {expect_channels}")
    frames = []
    for lineno, line in enumerate(raw[1:], start=2):
        if not line.strip():
            continue
        cols = line.split()
        if len(cols) != channels:
            raise DataError(f"{path}:{lineno}: {len(cols)} columns, expected {channels}")
        try:
            frames.append([float(c) for c in cols])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric value") from None
    if not frames:
        raise DataError(f"{path}: no frames")
    arr = np.array(frames, dtype=np.float64).T
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: non-finite sample values")
    return Utterance(id=utt_id or os.path.splitext(os.path.basename(path))[0],
                     frames=arr, sample_rate=rate)


def save_labels(corpus: list[Utterance], path: str) -> None:
    with open(path, "w") as fh:
        for utt in corpus:
            if utt.labels:
                fh.write(f"{utt.id} {' '.join(utt.labels)}\n")


def load_labels(path: str) -> dict[str, list[str]]:
    table = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 2:
                raise DataError(f"{path}:{lineno}: utterance id without labels")
            table[parts[0]] = parts[1:]
    return table


def save_corpus(corpus: list[Utterance], out_dir: str,
                manifest_name: str = "manifest.csv",
                labels_name: str = "labels.txt") -> str:
    """Write one data file per utterance plus a manifest (and labels when
    any utterance carries them).  Returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    rows = ["id,path"]
    for utt in corpus:
        rel = f"{utt.id}.ema"
        save_utterance(utt, os.path.join(out_dir, rel))
        rows.append(f"{utt.id},{rel}")
    manifest = os.path.join(out_dir, manifest_name)
    with open(manifest, "w") as fh:
        fh.write("\n".join(rows) + "\n")
    if any(u.labels for u in corpus):
        save_labels(corpus, os.path.join(out_dir, labels_name))
    return manifest


def load_corpus(manifest_path: str, labels_path: str | None = None,
                expect_channels: int | None = None) -> list[Utterance]:
    """Load every (id, path) manifest row; attach labels when given."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    entries = []
    with open(manifest_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or (lineno == 1 and line.lower() == "id,path"):
                continue
            parts = line.split(",")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DataError(f"{manifest_path}:{lineno}: expected 'id,path'")
            entries.append((parts[0], parts[1]))
    if not entries:
        raise DataError(f"{manifest_path}: no utterances listed")
    labels = load_labels(labels_path) if labels_path else {}
    corpus = []
    for utt_id, rel in entries:
        path = rel if os.path.isabs(rel) else os.path.join(base, rel)
        utt = load_utterance(path, utt_id=utt_id, expect_channels=expect_channels)
        utt.labels = labels.get(utt_id)
        corpus.append(utt)
    return corpus


# ---------------------------------------------------------------------------
# Normalization and splits
# ---------------------------------------------------------------------------

@dataclass
class NormStats:
    """Per-channel z-score statistics, computed on the training split only
    and stored in checkpoints so inference normalizes identically."""
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise DataError("normalization std must be strictly positive")


def compute_norm_stats(corpus: list[Utterance]) -> NormStats:
    stacked = np.concatenate([u.frames for u in corpus], axis=1)
    std = stacked.std(axis=1)
    if np.any(std == 0):
        dead = [EMA_CHANNELS[i] if i < len(EMA_CHANNELS) else str(i)
                for i in np.flatnonzero(std == 0)]
        raise DataError(f"zero-variance channel(s): {', '.join(dead)}")
    return NormStats(mean=stacked.mean(axis=1), std=std)


def normalize(corpus: list[Utterance],
              stats: NormStats | None = None) -> tuple[list[Utterance], NormStats]:
    """Z-score per channel.  Without ``stats`` they are computed from the
    given corpus (which must then be the training split)."""
    if stats is None:
        stats = compute_norm_stats(corpus)
    out = [Utterance(id=u.id,
                     frames=(u.frames - stats.mean[:, None]) / stats.std[:, None],
                     sample_rate=u.sample_rate, labels=u.labels)
           for u in corpus]
    return out, stats


def denormalize(frames: np.ndarray, stats: NormStats) -> np.ndarray:
    return frames * stats.std[:, None] + stats.mean[:, None]


def split(corpus: list[Utterance], ratio: float = 0.8,
          seed: int = 0) -> tuple[list[Utterance], list[Utterance]]:
    """Seeded shuffle, then prefix split with floor(ratio * n) training
    utterances.  Disjoint and exhaustive by construction."""
    if len(corpus) < 5:
        raise ValueError("need at least 5 utterances to split")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B17]))
    order = rng.permutation(len(corpus))
    n_train = int(np.floor(ratio * len(corpus)))
    train = [corpus[i] for i in order[:n_train]]
    test = [corpus[i] for i in order[n_train:]]
    return train, test


# ---------------------------------------------------------------------------
# Synthetic ground truth
# ---------------------------------------------------------------------------

@dataclass
class SyntheticTruth:
    """The planted factorization behind a generated corpus.

    ``events`` lists (onset frame, gesture, peak amplitude) per utterance;
    ``scores`` holds the activation matrices those events paint.
    """
    dictionary: np.ndarray                 # (T, C, D*)
    scores: dict[str, np.ndarray] = field(default_factory=dict)
    events: dict[str, list] = field(default_factory=dict)
    noise: float = 0.0
    min_s1: float = 1.0
    min_s2: float = 1.0


def _smooth_kernel(rng: np.random.Generator, kernel_len: int, channels: int,
                   scale: float) -> np.ndarray:
    """Low-pass filtered noise, tapered at the ends, Frobenius norm ``scale``."""
    pad = 8
    raw = rng.standard_normal((kernel_len + 2 * pad, channels))
    box = np.ones(7) / 7.0
    for _ in range(3):
        raw = np.apply_along_axis(lambda v: np.convolve(v, box, mode="same"), 0, raw)
    kern = raw[pad:pad + kernel_len]
    ramp = np.minimum(np.arange(kernel_len), np.arange(kernel_len)[::-1])
    taper = np.clip(ramp / 4.0, 0.0, 1.0)
    kern = kern * taper[:, None]
    return kern * (scale / np.linalg.norm(kern))


def _impulse_train(rng: np.random.Generator, n_frames: int, refractory: int,
                   mean_extra_gap: float) -> list[int]:
    onsets = []
    pos = float(rng.exponential(mean_extra_gap))
    while pos < n_frames:
        onsets.append(int(pos))
        pos += refractory + float(rng.exponential(mean_extra_gap))
    return onsets


# short tapered activation pulse; a bare 1-frame impulse is outside what the
# 19-frame linear encoder can express, so events carry this 3-tap shape
PULSE_SHAPE = np.array([0.35, 1.0, 0.35])


def generate_synthetic(n_gestures: int, n_utterances: int,
                       t_range: tuple[int, int] = (400, 800),
                       noise: float = 0.01, seed: int = 0,
                       channels: int = 12, kernel_len: int = 41,
                       mean_extra_gap: float = 280.0,
                       kernel_scale: float = 3.0,
                       with_labels: bool = True,
                       sample_rate: float = EMA_RATE,
                       min_s1: float = 0.92, min_s2: float = 0.90
                       ) -> tuple[list[Utterance], SyntheticTruth]:
    """Plant a dictionary and sparse activation scores, then synthesize.

    Each gesture fires at Poisson-spaced onsets (refractory gap of at least
    half a kernel), stamping a 3-frame tapered pulse with peak amplitude in
    [0.5, 2].  The spacing keeps every score's sparseness above ``min_s1``
    / ``min_s2`` (checked; spacings too dense for the bounds raise).
    Labels, when requested, are the gesture ids in onset order (ties broken
    by gesture index), a deterministic toy recognition target.
    """
    if n_gestures < 2:
        raise ValueError("need at least 2 gestures for channel sparseness")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5F17]))
    dictionary = np.stack(
        [_smooth_kernel(rng, kernel_len, channels, kernel_scale)
         for _ in range(n_gestures)], axis=2)
    refractory = int(np.ceil(kernel_len / 2)) + 1
    half_pulse = len(PULSE_SHAPE) // 2

    truth = SyntheticTruth(dictionary=dictionary, noise=noise)
    corpus: list[Utterance] = []
    width = len(str(max(n_utterances - 1, 1)))
    for u in range(n_utterances):
        n_frames = int(rng.integers(t_range[0], t_range[1] + 1))
        score = np.zeros((n_gestures, n_frames))
        events: list[tuple[int, int, float]] = []
        for d in range(n_gestures):
            for onset in _impulse_train(rng, n_frames, refractory, mean_extra_gap):
                amp = rng.uniform(0.5, 2.0)
                events.append((onset, d, amp))
        if not events:
            events.append((n_frames // 2, 0, 1.0))
        events.sort(key=lambda e: (e[0], e[1]))
        for onset, d, amp in events:
            lo = max(0, onset - half_pulse)
            hi = min(n_frames, onset + half_pulse + 1)
            score[d, lo:hi] += amp * PULSE_SHAPE[lo - onset + half_pulse:
                                                 hi - onset + half_pulse]

        s1 = objectives.time_sparsity(Tensor(score)).item()
        s2 = objectives.channel_sparsity(Tensor(score)).item()
        if s1 < min_s1 or s2 < min_s2:
            raise ValueError(
                f"utterance {u}: sparseness S1={s1:.3f} S2={s2:.3f} below the "
                f"declared bounds; t_range or spacing too dense")
        truth.min_s1 = min(truth.min_s1, s1)
        truth.min_s2 = min(truth.min_s2, s2)

        frames = convolutive_synthesis(dictionary, score)
        if noise > 0:
            frames = frames + rng.normal(0.0, noise, size=frames.shape)
        utt_id = f"synth{u:0{width}d}"
        labels = [f"g{d}" for _, d, _ in events] if with_labels else None
        corpus.append(Utterance(id=utt_id, frames=frames,
                                sample_rate=sample_rate, labels=labels))
        truth.scores[utt_id] = score
        truth.events[utt_id] = events
    return corpus, truth


def synthetic_alphabet(n_gestures: int, merge_first_pair: bool = False):
    """Label alphabet g0..g{D-1}; optionally merges (g0, g1) into one class."""
    from .ctc import LabelAlphabet
    symbols = [f"g{i}" for i in range(n_gestures)]
    groups = [("g0", "g1")] if merge_first_pair and n_gestures >= 2 else []
    return LabelAlphabet(symbols, groups)
