"""Speaker-selection strategies for the separation baseline and
per-pair-type reporting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import loss
from .errors import DataError


@dataclass
class SelectionResult:
    chosen_index: int      # 1 or 2
    score_gap: float       # chosen minus rejected score
    method: str            # "oracle" or "cosine"


def oracle_select(xhat1, xhat2, target) -> SelectionResult:
    """Pick the output with the higher SiSNR against the true target;
    ties go to index 1."""
    s1 = loss.sisnr(target, xhat1)
    s2 = loss.sisnr(target, xhat2)
    chosen = 1 if s1 >= s2 else 2
    return SelectionResult(chosen_index=chosen, score_gap=abs(s1 - s2),
                           method="oracle")


def embed_waveform(aux, wav: np.ndarray) -> np.ndarray:
    """Embedding of a waveform under a trained auxiliary network."""
    return aux.embed_utterance(wav)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return -1.0
    return float(np.dot(a, b) / (na * nb))


def cosine_select(xhat1, xhat2, adaptation, aux) -> SelectionResult:
    """Pick the output whose embedding is most similar to the adaptation
    utterance's; ties go to index 1, zero-norm embeddings score -1."""
    ref = embed_waveform(aux, adaptation)
    c1 = _cosine(embed_waveform(aux, xhat1), ref)
    c2 = _cosine(embed_waveform(aux, xhat2), ref)
    chosen = 1 if c1 >= c2 else 2
    return SelectionResult(chosen_index=chosen, score_gap=abs(c1 - c2),
                           method="cosine")


@dataclass
class HistogramReport:
    bin_width: float
    bin_lows: list                 # ascending bin lower edges
    counts: dict                   # pair_type -> counts per bin
    failure_rate: dict             # pair_type -> fraction with SiSNRi <= 0
    overall_failure_rate: float

    def to_tsv(self) -> str:
        types = sorted(self.counts)
        lines = ["#bin_low\t" + "\t".join(f"count_{t}" for t in types)]
        for i, low in enumerate(self.bin_lows):
            lines.append(f"{low!r}\t" + "\t".join(str(self.counts[t][i]) for t in types))
        return "\n".join(lines) + "\n"


def histogram_report(rows, bin_width_db: float) -> HistogramReport:
    """Per-pair-type histogram of SiSNR improvements.

    `rows` are (mixture_id, pair_type, sisnri_db) triples; the failure
    rate counts improvements of 0 dB or less.
    """
    if bin_width_db <= 0:
        raise DataError(f"bin width must be positive, got {bin_width_db}")
    if not rows:
        raise DataError("histogram: no records")
    values = np.array([v for _, _, v in rows])
    lo = int(np.floor(values.min() / bin_width_db))
    hi = int(np.floor(values.max() / bin_width_db))
    bin_lows = [i * bin_width_db for i in range(lo, hi + 1)]
    types = sorted({pt for _, pt, _ in rows})
    counts = {t: [0] * len(bin_lows) for t in types}
    failures = {t: 0 for t in types}
    totals = {t: 0 for t in types}
    for _, pt, v in rows:
        counts[pt][int(np.floor(v / bin_width_db)) - lo] += 1
        totals[pt] += 1
        if v <= 0.0:
            failures[pt] += 1
    rate = {t: failures[t] / totals[t] for t in types}
    overall = sum(failures.values()) / len(rows)
    return HistogramReport(bin_width=bin_width_db, bin_lows=bin_lows,
                           counts=counts, failure_rate=rate,
                           overall_failure_rate=overall)
