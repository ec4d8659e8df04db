import hashlib
from pathlib import Path

import numpy as np
import numpy.testing as npt
import pytest

from tsekit import corpus, dsp
from tsekit.errors import DataError


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestSynthUtterance:
    def test_bit_identical_for_same_speaker_and_seed(self):
        spk = corpus.make_speaker("A", 3, 11)
        u1 = corpus.synth_utterance(spk, 42, 1.5)
        u2 = corpus.synth_utterance(spk, 42, 1.5)
        assert np.array_equal(u1.samples, u2.samples)

    def test_different_seeds_differ(self):
        spk = corpus.make_speaker("B", 1, 11)
        u1 = corpus.synth_utterance(spk, 1, 1.5)
        u2 = corpus.synth_utterance(spk, 2, 1.5)
        assert not np.array_equal(u1.samples, u2.samples)

    def test_rms_normalization(self):
        spk = corpus.make_speaker("A", 0, 5)
        for seed in range(4):
            x = corpus.synth_utterance(spk, seed, 2.0).channel(0)
            assert abs(np.sqrt(np.mean(x ** 2)) - 0.05) < 1e-9

    def test_family_a_peak_below_every_family_b_peak(self):
        def dominant_hz(sig):
            x = sig.channel(0)
            spec = np.abs(np.fft.rfft(x))
            return np.fft.rfftfreq(x.size, 1 / corpus.SAMPLE_RATE)[np.argmax(spec)]

        peaks_a = [dominant_hz(corpus.synth_utterance(corpus.make_speaker("A", i, 9), s, 2.0))
                   for i in range(3) for s in range(2)]
        peaks_b = [dominant_hz(corpus.synth_utterance(corpus.make_speaker("B", i, 9), s, 2.0))
                   for i in range(3) for s in range(2)]
        assert max(peaks_a) < min(peaks_b)

    def test_duration_precondition(self):
        spk = corpus.make_speaker("A", 0, 1)
        with pytest.raises(DataError, match="duration"):
            corpus.synth_utterance(spk, 0, 0.2)
        with pytest.raises(DataError, match="duration"):
            corpus.synth_utterance(spk, 0, 5.0)

    def test_speaker_profiles_deterministic(self):
        a = corpus.make_speaker("A", 7, 123)
        b = corpus.make_speaker("A", 7, 123)
        assert a == b
        c = corpus.make_speaker("A", 7, 124)
        assert a.f0_hz != c.f0_hz


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    report = corpus.build_corpus(out, n_speakers=4, n_mixtures=24,
                                 split_seed=17, channels=1)
    return out, report


class TestBuildCorpus:

    def test_split_speaker_disjointness(self, built):
        _, report = built
        train_ids = {s.speaker_id for s in report.train_speakers}
        test_ids = {s.speaker_id for s in report.test_speakers}
        assert not train_ids & test_ids
        test_records = corpus.read_manifest(report.test_manifest)
        used = {r.target_spk for r in test_records} | {r.interferer_spk for r in test_records}
        assert used <= test_ids

    def test_adaptation_differs_from_in_mixture_utterance(self, built):
        _, report = built
        for manifest in (report.train_manifest, report.test_manifest):
            for r in corpus.read_manifest(manifest):
                assert r.adapt_path != r.src1_path
                adapt = dsp.wav_read(corpus.resolve_path(manifest, r.adapt_path))
                src1 = dsp.wav_read(corpus.resolve_path(manifest, r.src1_path))
                assert not np.array_equal(adapt.samples, src1.samples)

    def test_measured_snr_matches_manifest(self, built):
        _, report = built
        records = corpus.read_manifest(report.train_manifest)
        for r in records:
            assert abs(report.measured_snr_db[r.mixture_id] - r.snr_db) < 1e-6

    def test_file_level_snr_within_quantization(self, built):
        _, report = built
        for r in corpus.read_manifest(report.train_manifest):
            s1 = dsp.wav_read(corpus.resolve_path(report.train_manifest, r.src1_path))
            s2 = dsp.wav_read(corpus.resolve_path(report.train_manifest, r.src2_path))
            snr = 10 * np.log10(np.mean(s1.channel(0) ** 2) / np.mean(s2.channel(0) ** 2))
            assert abs(snr - r.snr_db) < 0.05

    def test_every_wav_exists_and_reads(self, built):
        _, report = built
        for manifest in (report.train_manifest, report.test_manifest):
            for r in corpus.read_manifest(manifest):
                for rel in (r.mixture_path, r.src1_path, r.src2_path, r.adapt_path):
                    sig = dsp.wav_read(corpus.resolve_path(manifest, rel))
                    assert sig.n_samples > 0

    def test_pair_types_covered(self, built):
        _, report = built
        types = {r.pair_type for r in corpus.read_manifest(report.train_manifest)}
        assert types == {"AA", "BB", "AB"}

    def test_regeneration_is_bit_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        corpus.build_corpus(a, 4, 12, split_seed=3, channels=2)
        corpus.build_corpus(b, 4, 12, split_seed=3, channels=2)
        assert tree_digest(a) == tree_digest(b)
        c = tmp_path / "c"
        corpus.build_corpus(c, 4, 12, split_seed=4, channels=2)
        assert tree_digest(a) != tree_digest(c)

    def test_two_channel_corpus(self, tmp_path):
        report = corpus.build_corpus(tmp_path / "st", 4, 10, split_seed=5, channels=2)
        records = corpus.read_manifest(report.train_manifest)
        for r in records:
            mix = dsp.wav_read(corpus.resolve_path(report.train_manifest, r.mixture_path))
            assert mix.n_channels == 2
            assert 0 <= r.delay1 <= 4 and 0 <= r.delay2 <= 4 and r.delay1 != r.delay2

    def test_insufficient_speakers(self, tmp_path):
        with pytest.raises(DataError, match="insufficient speakers"):
            corpus.build_corpus(tmp_path / "x", 3, 10, split_seed=0)

    def test_manifest_round_trip(self, built):
        _, report = built
        records = corpus.read_manifest(report.train_manifest)
        again = Path(report.root) / "again.tsv"
        corpus.write_manifest(again, records)
        assert corpus.read_manifest(again) == records

    def test_speaker_label_map_is_stable(self, built):
        _, report = built
        records = corpus.read_manifest(report.train_manifest)
        m1 = corpus.speaker_label_map(records)
        m2 = corpus.speaker_label_map(list(reversed(records)))
        assert m1 == m2
        assert sorted(m1.values()) == list(range(len(m1)))
