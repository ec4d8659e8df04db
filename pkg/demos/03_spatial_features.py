# Interchannel phase differences: the spatial features the 2-channel
# models consume, and the delay theorem they encode.

import numpy as np

from tsekit import corpus, dsp

# A two-channel signal whose second channel lags by 3 samples
spk = corpus.make_speaker("A", 1, corpus_seed=0)
utt = corpus.synth_utterance(spk, seed=0, duration_s=2.0)
delay = 3
lead = utt.channel(0)[delay:]
lag = utt.channel(0)[:-delay]
stereo = dsp.AudioSignal(np.stack([lead, lag]), utt.sample_rate)

spec = dsp.stft(stereo, frame_len=256, hop=128)
feat = dsp.ipd_features(spec)
print(f"STFT: {spec.n_frames} frames x {spec.n_bins} bins; "
      f"IPD features {feat.shape} (cos block then sin block)")

# cos^2 + sin^2 == 1 everywhere
f_bins = spec.n_bins
radius = feat[:, :f_bins] ** 2 + feat[:, f_bins:] ** 2
print(f"unit-circle identity: max |cos^2+sin^2 - 1| = {np.abs(radius - 1).max():.2e}")

# At energetic bins of energetic (voiced) frames the phase slope follows
# 2*pi*f*d/fs; silence gaps carry no usable phase and are masked out
phi = np.arctan2(feat[:, f_bins:], feat[:, :f_bins])
f_hz = np.fft.rfftfreq(256, 1 / stereo.sample_rate)
expected = np.angle(np.exp(1j * 2 * np.pi * f_hz * delay / stereo.sample_rate))
energy = np.abs(spec.coeffs[0]) ** 2
frame_energy = energy.sum(axis=1, keepdims=True)
strong = (energy >= 0.05 * frame_energy) & (frame_energy >= 0.1 * frame_energy.max())
err = np.abs(np.angle(np.exp(1j * (phi - expected[None, :]))))
print(f"median phase error at strong voiced bins: {np.median(err[strong]):.3f} rad "
      f"(delay {delay} samples)")

# Feature frames are upsampled to the encoder frame rate before entering
# the network:
up = dsp.upsample_frames(feat, target_frames=4 * feat.shape[0])
print(f"upsampled {feat.shape[0]} -> {up.shape[0]} frames (nearest neighbor)")
