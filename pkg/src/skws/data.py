"""Google Speech Commands ingestion and synthetic task generation.

Handles RIFF/WAVE PCM16 decoding, the official validation/testing split
lists, 12- and 35-class label mapping, and silence-class synthesis by
splicing the bundled background-noise recordings. Each split draws silence
from a disjoint time range of every noise file (first 80% train, next 10%
validation, last 10% test) so the synthesized class cannot leak across
splits.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, DataError, ParseError

SAMPLE_RATE = 16000
SAMPLE_LEN = 16000
BACKGROUND_DIR = "_background_noise_"
SILENCE_LABEL = "_silence_"
UNKNOWN_LABEL = "_unknown_"

CORE_COMMANDS = ("yes", "no", "up", "down", "left", "right",
                 "on", "off", "stop", "go")

V2_KEYWORDS = (
    "backward", "bed", "bird", "cat", "dog", "down", "eight", "five",
    "follow", "forward", "four", "go", "happy", "house", "learn", "left",
    "marvin", "nine", "no", "off", "on", "one", "right", "seven", "sheila",
    "six", "stop", "three", "tree", "two", "up", "visual", "wow", "yes",
    "zero",
)

V1_KEYWORDS = tuple(k for k in V2_KEYWORDS
                    if k not in ("backward", "follow", "forward", "learn", "visual"))

MODES = ("v1-12", "v2-12", "v2-35")

_SILENCE_RANGES = {"train": (0.0, 0.8), "validation": (0.8, 0.9), "test": (0.9, 1.0)}
_SPLIT_IDS = {"train": 0, "validation": 1, "test": 2}


# ---------------------------------------------------------------------------
# WAV decoding

def parse_wav(blob: bytes) -> np.ndarray:
    """Decode a RIFF/WAVE PCM16 mono 16 kHz file to float32 in [-1, 1].

    Chunks after the data chunk (metadata) are tolerated; anything that is
    not 16-bit mono PCM at 16 kHz is rejected naming the offending field.
    """
    if len(blob) < 12 or blob[0:4] != b"RIFF":
        raise ParseError("missing RIFF header at offset 0")
    if blob[8:12] != b"WAVE":
        raise ParseError("missing WAVE form type at offset 8")

    fmt = None
    samples = None
    off = 12
    while off + 8 <= len(blob):
        chunk_id = blob[off:off + 4]
        size = struct.unpack_from("<I", blob, off + 4)[0]
        body_start = off + 8
        if body_start + size > len(blob):
            raise ParseError(
                f"truncated {chunk_id.decode('latin1')!r} chunk at offset {off}: "
                f"declares {size} bytes, {len(blob) - body_start} remain")
        body = blob[body_start:body_start + size]
        if chunk_id == b"fmt ":
            if size < 16:
                raise ParseError(f"fmt chunk too short at offset {off}")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            if fmt is None:
                raise ParseError(f"data chunk at offset {off} precedes fmt chunk")
            samples = body
        off = body_start + size + (size & 1)  # chunks are word-aligned
    if fmt is None:
        raise ParseError("no fmt chunk found")
    if samples is None:
        raise ParseError("no data chunk found")

    audio_format, channels, rate, _, _, bits = fmt
    if audio_format != 1:
        raise DataError(f"unsupported audio format {audio_format} (want PCM=1)")
    if channels != 1:
        raise DataError(f"unsupported channel count {channels} (want mono)")
    if rate != SAMPLE_RATE:
        raise DataError(f"unsupported sample rate {rate} (want {SAMPLE_RATE})")
    if bits != 16:
        raise DataError(f"unsupported bit depth {bits} (want 16)")
    return np.frombuffer(samples, dtype="<i2").astype(np.float32) / 32768.0


def normalize_length(samples: np.ndarray, target: int = SAMPLE_LEN) -> np.ndarray:
    """Zero-pad symmetrically or center-crop to exactly `target` samples."""
    n = len(samples)
    if n == 0:
        raise ContractError("cannot length-normalize an empty sample array")
    if n == target:
        return np.asarray(samples, dtype=np.float32)
    if n < target:
        left = (target - n) // 2
        right = target - n - left
        return np.pad(np.asarray(samples, dtype=np.float32), (left, right))
    start = (n - target) // 2
    return np.asarray(samples[start:start + target], dtype=np.float32)


def read_wav_file(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_wav(fh.read())


# ---------------------------------------------------------------------------
# label mapping

class LabelMap:
    """Keyword-directory to class-index mapping for one protocol mode."""

    def __init__(self, mode: str):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        if mode == "v2-35":
            self.label_names = tuple(sorted(V2_KEYWORDS))
            self.silence_index = None
            self.unknown_index = None
            self._table = {k: i for i, k in enumerate(self.label_names)}
        else:
            self.label_names = CORE_COMMANDS + (SILENCE_LABEL, UNKNOWN_LABEL)
            self.silence_index = len(CORE_COMMANDS)
            self.unknown_index = len(CORE_COMMANDS) + 1
            self._table = {k: i for i, k in enumerate(CORE_COMMANDS)}

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    @property
    def keywords(self) -> tuple:
        return V1_KEYWORDS if self.mode == "v1-12" else V2_KEYWORDS

    def index_for(self, keyword: str) -> int:
        if self.mode == "v2-35":
            if keyword not in self._table:
                raise DataError(f"keyword directory {keyword!r} is not one of the "
                                "35 V2 commands")
            return self._table[keyword]
        return self._table.get(keyword, self.unknown_index)

    def unknown_keywords(self) -> tuple:
        return tuple(k for k in self.keywords if k not in CORE_COMMANDS)


# ---------------------------------------------------------------------------
# dataset assembly

@dataclass
class Utterance:
    """One second of 16 kHz mono audio with its class index."""

    samples: np.ndarray
    label: int
    source_path: str


@dataclass
class _Entry:
    label: int
    source_path: str
    path: Optional[str] = None          # keyword file on disk
    samples: Optional[np.ndarray] = None  # in-memory audio (synthetic tasks)
    noise: Optional[np.ndarray] = None  # silence: backing noise recording
    offset: int = 0

    def load(self) -> Utterance:
        if self.samples is not None:
            samples = self.samples
        elif self.noise is not None:
            samples = self.noise[self.offset:self.offset + SAMPLE_LEN]
        else:
            samples = normalize_length(read_wav_file(self.path))
        return Utterance(samples=samples, label=self.label,
                         source_path=self.source_path)


class SplitView:
    """Ordered, indexable collection of utterances for one split."""

    def __init__(self, entries: list, num_classes: int):
        self.entries = entries
        self.num_classes = num_classes

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> Utterance:
        return self.entries[i].load()

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        """(waves [B, 1, L], labels [B]) for the given entry indices."""
        waves = np.stack([self.entries[i].load().samples for i in indices])
        labels = np.array([self.entries[i].label for i in indices], dtype=np.int64)
        return waves[:, None, :], labels


@dataclass
class Dataset:
    splits: dict
    label_names: tuple
    keyword_file_counts: dict
    silence_counts: dict

    @property
    def num_classes(self) -> int:
        return len(self.label_names)


def synthesize_silence(noise_files: list, count: int, seed: int,
                       split: str) -> list:
    """Cut `count` one-second silence segments from the noise recordings.

    noise_files is a list of (path, samples) pairs; offsets are drawn with a
    seeded generator from this split's disjoint portion of every file.
    """
    if split not in _SILENCE_RANGES:
        raise ConfigError(f"unknown split {split!r}")
    if count == 0:
        return []
    if not noise_files:
        raise ConfigError("no background noise files available for silence synthesis")
    lo, hi = _SILENCE_RANGES[split]
    usable = []
    for path, samples in noise_files:
        start = int(len(samples) * lo)
        stop = int(len(samples) * hi) - SAMPLE_LEN
        if stop > start:
            usable.append((path, samples, start, stop))
    if not usable:
        raise ConfigError("background noise recordings are too short to splice")
    rng = np.random.default_rng((seed, _SPLIT_IDS[split]))
    entries = []
    label = LabelMap("v1-12").silence_index
    for i in range(count):
        path, samples, start, stop = usable[int(rng.integers(len(usable)))]
        offset = int(rng.integers(start, stop))
        entries.append(_Entry(label=label,
                              source_path=f"{SILENCE_LABEL}/{split}_{i:05d}@{path}",
                              noise=samples, offset=offset))
    return entries


def _read_split_list(root: str, name: str) -> set:
    path = os.path.join(root, name)
    if not os.path.isfile(path):
        raise ConfigError(f"missing split list {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return {line.strip() for line in fh if line.strip()}


def load_dataset(root: str, mode: str, seed: int = 0) -> Dataset:
    """Assemble the split-indexed dataset from a GSC directory tree.

    Files listed in validation_list.txt / testing_list.txt go to their
    split, everything else to train. In 12-class modes a silence class of
    about 10% of each split is synthesized from the background noise.
    """
    label_map = LabelMap(mode)
    if not os.path.isdir(root):
        raise ConfigError(f"dataset root {root} does not exist")
    keyword_dirs = sorted(
        d for d in os.listdir(root)
        if os.path.isdir(os.path.join(root, d)) and d != BACKGROUND_DIR)
    if not keyword_dirs:
        raise ConfigError(f"dataset root {root} contains no keyword directories")

    validation = _read_split_list(root, "validation_list.txt")
    testing = _read_split_list(root, "testing_list.txt")

    entries = {"train": [], "validation": [], "test": []}
    for keyword in keyword_dirs:
        label = label_map.index_for(keyword)
        directory = os.path.join(root, keyword)
        for fname in sorted(os.listdir(directory)):
            if not fname.endswith(".wav"):
                continue
            rel = f"{keyword}/{fname}"
            split = ("validation" if rel in validation
                     else "test" if rel in testing else "train")
            entries[split].append(_Entry(label=label, source_path=rel,
                                         path=os.path.join(directory, fname)))
    keyword_file_counts = {split: len(items) for split, items in entries.items()}

    silence_counts = {split: 0 for split in entries}
    if label_map.silence_index is not None:
        noise_dir = os.path.join(root, BACKGROUND_DIR)
        if not os.path.isdir(noise_dir):
            raise ConfigError(f"missing background noise directory {noise_dir}")
        noise_files = [
            (fname, read_wav_file(os.path.join(noise_dir, fname)))
            for fname in sorted(os.listdir(noise_dir)) if fname.endswith(".wav")
        ]
        for split, items in entries.items():
            # one silence utterance per nine keyword files ~= 10% of the split
            count = int(round(len(items) / 9.0))
            silence = synthesize_silence(noise_files, count, seed, split)
            items.extend(silence)
            silence_counts[split] = len(silence)

    splits = {name: SplitView(items, label_map.num_classes)
              for name, items in entries.items()}
    return Dataset(splits=splits, label_names=label_map.label_names,
                   keyword_file_counts=keyword_file_counts,
                   silence_counts=silence_counts)


def dump_manifest(dataset: Dataset, path: str) -> None:
    """Write line-delimited path,label,split records."""
    with open(path, "w", encoding="utf-8") as fh:
        for split, view in dataset.splits.items():
            for entry in view.entries:
                fh.write(f"{entry.source_path},{entry.label},{split}\n")


# ---------------------------------------------------------------------------
# synthetic tasks

def _tone_burst(rng: np.random.Generator, freq: float) -> np.ndarray:
    t = np.arange(SAMPLE_LEN, dtype=np.float32) / SAMPLE_RATE
    start = int(rng.integers(0, SAMPLE_LEN // 4))
    length = int(rng.integers(SAMPLE_LEN // 2, (3 * SAMPLE_LEN) // 4))
    phase = rng.uniform(0.0, 2.0 * np.pi)
    amplitude = rng.uniform(0.35, 0.6)
    wave = np.zeros(SAMPLE_LEN, dtype=np.float32)
    stop = min(SAMPLE_LEN, start + length)
    segment = np.sin(2.0 * np.pi * freq * t[: stop - start] + phase)
    wave[start:stop] = amplitude * segment.astype(np.float32)
    wave += rng.normal(0.0, 0.05, SAMPLE_LEN).astype(np.float32)
    return np.clip(wave, -1.0, 1.0)


def synthetic_tone_dataset(n_train: int = 200, n_test: int = 0,
                           seed: int = 0) -> Dataset:
    """Two-class tone-burst discrimination task (600 Hz vs 1.5 kHz + noise)."""
    rng = np.random.default_rng(seed)
    freqs = (600.0, 1500.0)
    names = ("tone600", "tone1500")

    def make_entries(n: int, tag: str) -> list:
        items = []
        for i in range(n):
            label = i % 2
            samples = _tone_burst(rng, freqs[label])
            items.append(_Entry(label=label, samples=samples,
                                source_path=f"synthetic/{tag}_{i:04d}"))
        return items

    splits = {"train": SplitView(make_entries(n_train, "train"), 2)}
    if n_test:
        splits["test"] = SplitView(make_entries(n_test, "test"), 2)
    return Dataset(splits=splits, label_names=names,
                   keyword_file_counts={k: len(v) for k, v in splits.items()},
                   silence_counts={k: 0 for k in splits})
