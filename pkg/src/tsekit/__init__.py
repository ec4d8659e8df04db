"""Desk-scale time-domain target speech extraction.

A from-scratch engine: float64 reverse-mode autodiff, temporal
convolutional extraction/separation networks conditioned on speaker
embeddings, spatial (interchannel phase) features, SiSNR and
speaker-identification losses, a deterministic synthetic two-speaker
corpus, and training/evaluation tooling with a single CLI.
"""

__version__ = "0.1.0"
