"""Deterministic synthetic two-speaker corpus.

Speakers come in two "gender-analog" families with disjoint fundamental
ranges (A: 90-140 Hz, B: 170-250 Hz), standing in for the female/male
split of real corpora so pair-type (AA/BB/AB) analyses carry over.  An
utterance is a few voiced segments: a strong fundamental plus a glottal
pulse train shaped by the speaker's three formant resonances, with
vibrato, per-segment pitch drift and brief silences.

Everything is a pure function of (n_speakers, n_mixtures, split_seed):
regenerating a corpus reproduces the manifests and audio bit for bit.
Test speakers live in a separate index namespace of fixed size, so
sweeping the number of training speakers keeps the test distribution
fixed.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from . import dsp
from .dsp import AudioSignal
from .errors import DataError, EngineError

SAMPLE_RATE = 8000
UTTERANCE_RMS = 0.05
F0_RANGES = {"A": (90.0, 140.0), "B": (170.0, 250.0)}
N_TEST_SPEAKERS = 4          # two per family, fixed across speaker sweeps
TEST_INDEX_OFFSET = 900      # test speakers use their own index namespace
MANIFEST_FIELDS = ("mixture_id", "mixture_path", "src1_path", "src2_path",
                   "adapt_path", "target_spk", "interferer_spk", "snr_db",
                   "pair_type", "delay1", "delay2")


@dataclass
class SyntheticSpeaker:
    speaker_id: str
    family: str                 # "A" (low f0) or "B" (high f0)
    f0_hz: float
    formants: list              # three (center_hz, bandwidth_hz) pairs
    vibrato_rate: float
    vibrato_depth: float


@dataclass
class MixtureRecord:
    mixture_id: str
    mixture_path: str
    src1_path: str               # src1 is always the target's reference
    src2_path: str
    adapt_path: str
    target_spk: str
    interferer_spk: str
    snr_db: float
    pair_type: str               # AA, BB or AB
    delay1: int
    delay2: int


def make_speaker(family: str, index: int, corpus_seed: int) -> SyntheticSpeaker:
    """Profile derived deterministically from (corpus_seed, family, index)."""
    if family not in F0_RANGES:
        raise DataError(f"unknown speaker family {family!r}")
    rng = np.random.default_rng((corpus_seed, ord(family), index))
    lo, hi = F0_RANGES[family]
    f0 = rng.uniform(lo, hi)
    shift = 1.0 if family == "A" else 1.1
    centers = [rng.uniform(300, 850) * shift,
               rng.uniform(1000, 2100) * shift,
               rng.uniform(2300, 3300) * shift]
    formants = [(c, rng.uniform(60, 200)) for c in centers]
    return SyntheticSpeaker(
        speaker_id=f"{family}{index:03d}", family=family, f0_hz=f0,
        formants=formants, vibrato_rate=rng.uniform(4.0, 7.0),
        vibrato_depth=rng.uniform(0.01, 0.04))


def _speaker_key(speaker_id: str) -> int:
    return zlib.crc32(speaker_id.encode())


def _resonator_coeffs(center_hz, bandwidth_hz, fs):
    r = np.exp(-np.pi * bandwidth_hz / fs)
    theta = 2.0 * np.pi * center_hz / fs
    return np.array([1.0 - r]), np.array([1.0, -2.0 * r * np.cos(theta), r * r])


def synth_utterance(spk: SyntheticSpeaker, seed: int,
                    duration_s: float = 2.0) -> AudioSignal:
    """One voiced utterance, RMS-normalized to 0.05; deterministic per
    (speaker_id, seed)."""
    if not 0.5 <= duration_s <= 4.0:
        raise DataError(f"utterance duration must lie in [0.5, 4] s, got {duration_s}")
    fs = SAMPLE_RATE
    rng = np.random.default_rng((_speaker_key(spk.speaker_id), seed))
    total = int(round(duration_s * fs))
    n_seg = int(rng.integers(3, 9))

    silence_frac = rng.uniform(0.08, 0.15)
    gap_budget = silence_frac * total
    gaps = rng.uniform(0.5, 1.5, size=n_seg + 1)
    gaps = np.maximum((gaps / gaps.sum() * gap_budget).astype(int), 1)
    voiced_budget = total - gaps.sum()
    parts = rng.uniform(0.6, 1.4, size=n_seg)
    seg_lens = np.maximum((parts / parts.sum() * voiced_budget).astype(int), fs // 50)

    chunks = [np.zeros(gaps[0])]
    for si in range(n_seg):
        n = seg_lens[si]
        t = np.arange(n) / fs
        drift = rng.uniform(-0.06, 0.06)
        phi0 = rng.uniform(0, 2 * np.pi)
        f_inst = spk.f0_hz * (1.0 + drift) * (
            1.0 + spk.vibrato_depth * np.sin(2 * np.pi * spk.vibrato_rate * t + phi0))
        phase = np.cumsum(f_inst) / fs
        fundamental = np.sin(2 * np.pi * phase)

        pulses = np.zeros(n)
        pulses[1:][np.diff(np.floor(phase)) > 0] = 1.0
        shaped = pulses
        for center, bw in spk.formants:
            b, a = _resonator_coeffs(center, bw, fs)
            shaped = lfilter(b, a, shaped)
        srms = np.sqrt(np.mean(shaped ** 2))
        if srms > 0:
            shaped = shaped / srms * np.sqrt(np.mean(fundamental ** 2)) * 0.5

        ramp = min(int(0.01 * fs), n // 4)
        env = np.ones(n)
        if ramp > 0:
            win = 0.5 * (1 - np.cos(np.pi * np.arange(ramp) / ramp))
            env[:ramp], env[-ramp:] = win, win[::-1]
        chunks.append((fundamental + shaped) * env * rng.uniform(0.7, 1.0))
        chunks.append(np.zeros(gaps[si + 1]))

    x = np.concatenate(chunks)
    x = x[:total] if x.size >= total else np.pad(x, (0, total - x.size))
    rms = np.sqrt(np.mean(x ** 2))
    return AudioSignal((x / rms * UTTERANCE_RMS)[None, :], fs)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def write_manifest(path, records: list) -> None:
    lines = ["#" + "\t".join(MANIFEST_FIELDS)]
    for r in records:
        lines.append("\t".join([
            r.mixture_id, r.mixture_path, r.src1_path, r.src2_path,
            r.adapt_path, r.target_spk, r.interferer_spk, repr(r.snr_db),
            r.pair_type, str(r.delay1), str(r.delay2)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    records = []
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != len(MANIFEST_FIELDS):
            raise DataError(f"{path}:{ln}: expected {len(MANIFEST_FIELDS)} "
                            f"tab-separated fields, got {len(parts)}")
        records.append(MixtureRecord(
            mixture_id=parts[0], mixture_path=parts[1], src1_path=parts[2],
            src2_path=parts[3], adapt_path=parts[4], target_spk=parts[5],
            interferer_spk=parts[6], snr_db=float(parts[7]), pair_type=parts[8],
            delay1=int(parts[9]), delay2=int(parts[10])))
    return records


def resolve_path(manifest_path, rel: str) -> Path:
    return Path(manifest_path).parent / rel


def speaker_label_map(records: list) -> dict:
    """Stable speaker-id -> class-index map over a manifest."""
    ids = sorted({r.target_spk for r in records} | {r.interferer_spk for r in records})
    return {sid: i for i, sid in enumerate(ids)}


# ---------------------------------------------------------------------------
# Corpus building
# ---------------------------------------------------------------------------

@dataclass
class CorpusReport:
    root: Path
    train_manifest: Path
    test_manifest: Path
    train_speakers: list
    test_speakers: list
    measured_snr_db: dict       # mixture_id -> SNR re-measured pre-quantization
    family_counts: dict         # split -> {family: n_speakers}


def _train_speakers(n: int, seed: int) -> list:
    n_a = (n + 1) // 2
    return ([make_speaker("A", i, seed) for i in range(n_a)]
            + [make_speaker("B", i, seed) for i in range(n - n_a)])


def _test_speakers(seed: int) -> list:
    per_family = N_TEST_SPEAKERS // 2
    return ([make_speaker("A", TEST_INDEX_OFFSET + i, seed) for i in range(per_family)]
            + [make_speaker("B", TEST_INDEX_OFFSET + i, seed) for i in range(per_family)])


def _make_split(root: Path, split: str, speakers: list, n_mixtures: int,
                rng, channels: int, report: CorpusReport) -> list:
    by_family = {"A": [s for s in speakers if s.family == "A"],
                 "B": [s for s in speakers if s.family == "B"]}
    pair_types = [("AA", "BB", "AB")[i % 3] for i in range(n_mixtures)]
    rng.shuffle(pair_types)

    records = []
    for i in range(n_mixtures):
        pt = pair_types[i]
        if pt == "AB":
            fam_t, fam_i = ("A", "B") if rng.random() < 0.5 else ("B", "A")
        else:
            fam_t = fam_i = pt[0]
        if fam_t == fam_i:
            target, interferer = [by_family[fam_t][j] for j in
                                  rng.choice(len(by_family[fam_t]), 2, replace=False)]
        else:
            target = by_family[fam_t][rng.integers(len(by_family[fam_t]))]
            interferer = by_family[fam_i][rng.integers(len(by_family[fam_i]))]

        duration = rng.uniform(1.5, 2.5)
        adapt_duration = rng.uniform(1.5, 2.5)
        seed_t = int(rng.integers(2 ** 31))
        seed_i = int(rng.integers(2 ** 31))
        seed_a = int(rng.integers(2 ** 31))
        while seed_a == seed_t:
            seed_a = int(rng.integers(2 ** 31))
        snr = float(rng.uniform(-5.0, 5.0))
        if channels == 2:
            d1 = int(rng.integers(0, 5))
            d2 = int(rng.integers(0, 5))
            while d2 == d1:  # distinct delays keep the spatial cue informative
                d2 = int(rng.integers(0, 5))
            delays = (d1, d2)
        else:
            d1 = d2 = 0
            delays = None

        x_t = synth_utterance(target, seed_t, duration)
        x_i = synth_utterance(interferer, seed_i, duration)
        adapt = synth_utterance(target, seed_a, adapt_duration)
        mixture, ref1, ref2 = dsp.mix_at_snr(x_t, x_i, snr, delays)

        measured = 10.0 * np.log10(np.mean(ref1.channel(0) ** 2)
                                   / np.mean(ref2.channel(0) ** 2))
        if abs(measured - snr) > 1e-6:
            raise EngineError(f"SNR self-check failed for mixture {i}: "
                              f"{measured} vs {snr}")

        mid = f"mix_{split}_{i:05d}"
        mix_dir = root / "wav" / split / mid
        mix_dir.mkdir(parents=True, exist_ok=True)
        dsp.wav_write(mix_dir / "mix.wav", mixture)
        dsp.wav_write(mix_dir / "src1.wav", ref1)
        dsp.wav_write(mix_dir / "src2.wav", ref2)
        dsp.wav_write(mix_dir / "adapt.wav", adapt)

        rel = f"wav/{split}/{mid}"
        records.append(MixtureRecord(
            mixture_id=mid, mixture_path=f"{rel}/mix.wav",
            src1_path=f"{rel}/src1.wav", src2_path=f"{rel}/src2.wav",
            adapt_path=f"{rel}/adapt.wav", target_spk=target.speaker_id,
            interferer_spk=interferer.speaker_id, snr_db=snr,
            pair_type="".join(sorted(fam_t + fam_i)), delay1=d1, delay2=d2))
        report.measured_snr_db[mid] = float(measured)
    return records


def build_corpus(out_dir, n_speakers: int, n_mixtures: int, split_seed: int,
                 channels: int = 1, test_fraction: float = 0.2) -> CorpusReport:
    """Write a train/test wav tree plus manifests under out_dir.

    n_speakers counts *training* speakers (split evenly across the two
    families); the held-out test split always uses its own fixed set of
    4 unseen speakers.  n_mixtures is the total count, divided
    (1 - test_fraction)/test_fraction between train and test.
    """
    if n_speakers < 4:
        raise DataError(f"insufficient speakers: need at least 4, got {n_speakers}")
    if n_mixtures < 2:
        raise DataError(f"need at least 2 mixtures, got {n_mixtures}")
    if channels not in (1, 2):
        raise DataError(f"channels must be 1 or 2, got {channels}")

    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    train_spk = _train_speakers(n_speakers, split_seed)
    test_spk = _test_speakers(split_seed)

    n_test = max(1, int(round(n_mixtures * test_fraction)))
    n_train = n_mixtures - n_test

    report = CorpusReport(
        root=root, train_manifest=root / "manifest_train.tsv",
        test_manifest=root / "manifest_test.tsv",
        train_speakers=train_spk, test_speakers=test_spk,
        measured_snr_db={},
        family_counts={
            "train": {f: sum(s.family == f for s in train_spk) for f in "AB"},
            "test": {f: sum(s.family == f for s in test_spk) for f in "AB"}})

    rng_train = np.random.default_rng((split_seed, 1))
    rng_test = np.random.default_rng((split_seed, 2))
    train_records = _make_split(root, "train", train_spk, n_train, rng_train,
                                channels, report)
    test_records = _make_split(root, "test", test_spk, n_test, rng_test,
                               channels, report)
    write_manifest(report.train_manifest, train_records)
    write_manifest(report.test_manifest, test_records)
    return report
