"""Full network assemblies.

Two topologies share one trunk design: a target-speech extractor driven
by a speaker embedding through a multiplicative adaptation layer, and a
two-output separation baseline without adaptation.  Spatial (IPD)
features can merge either at the trunk input (before block 0) or
internally (after the adaptation layer); the separator supports only the
input merge.

The trunk: strided conv encoder -> 1x1 bottleneck -> R*X residual conv
blocks with per-repeat dilations 1, 2, ..., 2^(X-1) -> 1x1 mask head ->
sigmoid mask applied to the encoder output -> transposed-conv decoder,
trimmed or zero-padded back to the input length.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import dsp
from . import nn
from .autodiff import Tensor
from .errors import DataError, ShapeError

CHECKPOINT_MAGIC = b"TSECKPT1"

IPD_MODES = ("none", "input", "internal")


@dataclass
class TopologyConfig:
    """Trunk hyper-parameters (Conv-TasNet letter notation) plus wiring.

    N encoder filters, L encoder window, B trunk width, H block hidden
    width, P block kernel, X blocks per repeat, R repeats.  ipd_dim is
    the feature width (2F) when ipd_mode is not "none".
    """

    N: int = 64
    L: int = 16
    B: int = 32
    H: int = 64
    P: int = 3
    X: int = 4
    R: int = 2
    ipd_mode: str = "none"
    num_outputs: int = 1
    embedding_dim: int = 0  # 0 means "same as B"
    ipd_dim: int = 0

    def __post_init__(self):
        if self.embedding_dim == 0:
            self.embedding_dim = self.B
        self.validate()

    def validate(self):
        for name in ("N", "L", "B", "H", "P", "X", "R"):
            if getattr(self, name) < 1:
                raise DataError(f"topology: {name} must be positive")
        if self.L % 2:
            raise DataError(f"topology: L must be even, got {self.L}")
        if self.ipd_mode not in IPD_MODES:
            raise DataError(f"topology: ipd_mode must be one of {IPD_MODES}, "
                            f"got {self.ipd_mode!r}")
        if self.num_outputs not in (1, 2):
            raise DataError(f"topology: num_outputs must be 1 or 2, got {self.num_outputs}")
        if self.num_outputs == 2 and self.ipd_mode == "internal":
            raise DataError("topology: the separation baseline supports only "
                            "ipd_mode none or input")
        if self.embedding_dim != self.B:
            raise DataError(f"topology: embedding_dim ({self.embedding_dim}) must "
                            f"equal B ({self.B}); the adaptation layer multiplies "
                            "channelwise")
        if self.ipd_mode != "none" and self.ipd_dim < 2:
            raise DataError("topology: ipd_mode set but ipd_dim missing")


PRESETS = {
    # the published configuration
    "paper": dict(N=256, L=20, B=256, H=512, P=3, X=8, R=4),
    # desk-scale default
    "desk": dict(N=64, L=16, B=32, H=64, P=3, X=4, R=2),
}


def rms_gain(x: np.ndarray) -> float:
    """Gain that brings a waveform to unit RMS; networks train and infer
    on unit-RMS inputs (the reconstruction loss is scale-invariant)."""
    return 1.0 / (float(np.sqrt(np.mean(np.square(x)))) + 1e-12)


def adaptation_layer(h: Tensor, e: Tensor) -> Tensor:
    """Channelwise multiplicative conditioning: out[c, t] = h[c, t] * e[c]."""
    if e.shape[-2] != h.shape[-2]:
        raise ShapeError(f"adaptation_layer: embedding dim {e.shape[-2]} != "
                         f"channel count {h.shape[-2]}")
    return ad.mul(h, e)


def _ipd_to_tensor(ipd) -> Tensor:
    """[T_stft, 2F] features (or a batch [n, T_stft, 2F]) -> channels-first."""
    arr = np.asarray(ipd, dtype=np.float64)
    if arr.ndim == 2:
        return Tensor(arr.T)
    if arr.ndim == 3:
        return Tensor(arr.transpose(0, 2, 1))
    raise ShapeError(f"ipd features must be [T, 2F] or [n, T, 2F], got {arr.shape}")


class _Trunk:
    """Shared encoder/block machinery; subclasses add their heads."""

    def __init__(self, cfg: TopologyConfig, rng):
        self.cfg = cfg
        self.encoder = nn.Encoder(cfg.N, cfg.L, rng)
        self.bottleneck = nn.Conv1x1(cfg.N, cfg.B, rng)
        if cfg.ipd_mode != "none":
            self.ipd_proj = nn.Conv1x1(cfg.ipd_dim, cfg.B, rng)
            self.ipd_merge = nn.Conv1x1(2 * cfg.B, cfg.B, rng)
        if cfg.ipd_mode == "internal":
            self.ipd_block = nn.ConvBlock(cfg.B, cfg.H, cfg.P, 1, rng)
        self.blocks = [nn.ConvBlock(cfg.B, cfg.H, cfg.P, 2 ** (i % cfg.X), rng)
                       for i in range(cfg.R * cfg.X)]

    def _layer_map(self) -> dict:
        layers = {"encoder": self.encoder, "bottleneck": self.bottleneck}
        if self.cfg.ipd_mode != "none":
            layers["ipd_proj"] = self.ipd_proj
            layers["ipd_merge"] = self.ipd_merge
        if self.cfg.ipd_mode == "internal":
            layers["ipd_block"] = self.ipd_block
        for i, blk in enumerate(self.blocks):
            layers[f"block_{i}"] = blk
        return layers

    def _check_ipd(self, ipd):
        if self.cfg.ipd_mode == "none" and ipd is not None:
            raise DataError("this topology takes no IPD features (ipd_mode=none)")
        if self.cfg.ipd_mode != "none" and ipd is None:
            raise DataError(f"ipd_mode={self.cfg.ipd_mode} requires IPD features")

    def _ipd_branch(self, ipd, t_enc: int, internal: bool) -> Tensor:
        feats = _ipd_to_tensor(ipd)  # [.., 2F, T_stft]
        if feats.shape[-2] != self.cfg.ipd_dim:
            raise ShapeError(f"IPD feature width {feats.shape[-2]} does not match "
                             f"topology ipd_dim {self.cfg.ipd_dim}")
        h = self.ipd_proj(feats)
        up = Tensor(dsp.upsample_matrix(h.shape[-1], t_enc))
        h = ad.matmul(h, up)
        if internal:
            h = self.ipd_block(h)
        return h

    def _merge(self, trunk: Tensor, branch: Tensor) -> Tensor:
        return self.ipd_merge(ad.concat([trunk, branch], axis=-2))


class ExtractorNet(_Trunk):
    """Target-speech extractor conditioned on an adaptation utterance.

    The auxiliary network (encoder, 1x1 bottleneck, one conv block, time
    average) produces the speaker embedding; the adaptation layer
    multiplies it into the trunk after block 0.
    """

    def __init__(self, cfg: TopologyConfig, rng=None):
        if cfg.num_outputs != 1:
            raise DataError("ExtractorNet requires num_outputs == 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        super().__init__(cfg, rng)
        self.mask_conv = nn.Conv1x1(cfg.B, cfg.N, rng)
        self.decoder = nn.Decoder(cfg.N, cfg.L, rng)
        self.aux_encoder = nn.Encoder(cfg.N, cfg.L, rng)
        self.aux_bottleneck = nn.Conv1x1(cfg.N, cfg.B, rng)
        self.aux_block = nn.ConvBlock(cfg.B, cfg.H, cfg.P, 1, rng)

        self.stage_names = ["encoder", "bottleneck"]
        if cfg.ipd_mode == "input":
            self.stage_names.append("ipd_input_merge")
        self.stage_names += ["block_0", "adaptation"]
        if cfg.ipd_mode == "internal":
            self.stage_names.append("ipd_internal_merge")
        self.stage_names += [f"block_{i}" for i in range(1, cfg.R * cfg.X)]
        self.stage_names += ["mask", "decoder"]

    def params(self) -> dict:
        layers = self._layer_map()
        layers.update({"mask_conv": self.mask_conv, "decoder": self.decoder,
                       "aux_encoder": self.aux_encoder,
                       "aux_bottleneck": self.aux_bottleneck,
                       "aux_block": self.aux_block})
        return nn.collect_params(layers)

    def embed(self, a: Tensor) -> Tensor:
        """Adaptation waveform [.., 1, T] -> embedding [.., B, 1]."""
        h = self.aux_bottleneck(self.aux_encoder(a))
        h = self.aux_block(h)
        return ad.mean(h, axis=-1, keepdims=True)

    def embed_utterance(self, wav: np.ndarray) -> np.ndarray:
        """Inference-path embedding of one waveform, RMS-normalized the
        same way training crops are."""
        wav = np.asarray(wav, dtype=np.float64)
        with ad.no_grad():
            e = self.embed(Tensor(wav[None, :] * rms_gain(wav)))
        return e.data[:, 0]

    def forward(self, y: Tensor, a: Tensor | None = None,
                e: Tensor | None = None, ipd=None):
        """Mixture [.., 1, T] plus adaptation (or precomputed embedding)
        -> (waveform [.., 1, T], embedding, mask)."""
        self._check_ipd(ipd)
        if e is None:
            if a is None:
                raise DataError("forward needs an adaptation waveform or embedding")
            e = self.embed(a)
        if e.shape[-2] != self.cfg.B:
            raise ShapeError(f"embedding dim {e.shape[-2]} != B {self.cfg.B}")

        n_samples = y.shape[-1]
        enc = self.encoder(y)
        h = self.bottleneck(enc)
        t_enc = h.shape[-1]
        if self.cfg.ipd_mode == "input":
            h = self._merge(h, self._ipd_branch(ipd, t_enc, internal=False))
        h = self.blocks[0](h)
        h = adaptation_layer(h, e)
        if self.cfg.ipd_mode == "internal":
            h = self._merge(h, self._ipd_branch(ipd, t_enc, internal=True))
        for blk in self.blocks[1:]:
            h = blk(h)
        mask = ad.sigmoid(self.mask_conv(h))
        wav = self.decoder(ad.mul(enc, mask))
        return _fit_length(wav, n_samples), e, mask

    def extract(self, mixture: np.ndarray, adaptation: np.ndarray,
                ipd=None) -> np.ndarray:
        """Inference on one utterance; returns the estimated waveform.

        Inputs are RMS-normalized before the forward pass (matching the
        training-time preprocessing) and the output is scaled back to the
        mixture's level.
        """
        mixture = np.asarray(mixture, dtype=np.float64)
        adaptation = np.asarray(adaptation, dtype=np.float64)
        g = rms_gain(mixture)
        with ad.no_grad():
            y = Tensor(mixture[None, :] * g)
            a = Tensor(adaptation[None, :] * rms_gain(adaptation))
            wav, _, _ = self.forward(y, a=a, ipd=ipd)
        return wav.data[0] / g


class SeparatorNet(_Trunk):
    """Two-output separation baseline: same trunk, no adaptation layer,
    a 2N-channel mask head, one shared decoder."""

    def __init__(self, cfg: TopologyConfig, rng=None):
        if cfg.num_outputs != 2:
            raise DataError("SeparatorNet requires num_outputs == 2")
        rng = rng if rng is not None else np.random.default_rng(0)
        super().__init__(cfg, rng)
        self.mask_conv = nn.Conv1x1(cfg.B, 2 * cfg.N, rng)
        self.decoder = nn.Decoder(cfg.N, cfg.L, rng)

        self.stage_names = ["encoder", "bottleneck"]
        if cfg.ipd_mode == "input":
            self.stage_names.append("ipd_input_merge")
        self.stage_names += [f"block_{i}" for i in range(cfg.R * cfg.X)]
        self.stage_names += ["mask", "decoder"]

    def params(self) -> dict:
        layers = self._layer_map()
        layers.update({"mask_conv": self.mask_conv, "decoder": self.decoder})
        return nn.collect_params(layers)

    def forward(self, y: Tensor, ipd=None):
        self._check_ipd(ipd)
        n_samples = y.shape[-1]
        enc = self.encoder(y)
        h = self.bottleneck(enc)
        if self.cfg.ipd_mode == "input":
            h = self._merge(h, self._ipd_branch(ipd, h.shape[-1], internal=False))
        for blk in self.blocks:
            h = blk(h)
        masks = ad.sigmoid(self.mask_conv(h))
        n = self.cfg.N
        outs = []
        for i in range(2):
            m = ad.tensor_slice(masks, axis=-2, start=i * n, stop=(i + 1) * n)
            outs.append(_fit_length(self.decoder(ad.mul(enc, m)), n_samples))
        return tuple(outs)

    def separate(self, mixture: np.ndarray, ipd=None):
        mixture = np.asarray(mixture, dtype=np.float64)
        g = rms_gain(mixture)
        with ad.no_grad():
            y = Tensor(mixture[None, :] * g)
            x1, x2 = self.forward(y, ipd=ipd)
        return x1.data[0] / g, x2.data[0] / g


def _fit_length(wav: Tensor, n_samples: int) -> Tensor:
    """Trim or zero-pad the decoder output (last axis) to n_samples."""
    n = wav.shape[-1]
    if n == n_samples:
        return wav
    if n > n_samples:
        return ad.tensor_slice(wav, axis=-1, start=0, stop=n_samples)
    pad_shape = wav.shape[:-1] + (n_samples - n,)
    return ad.concat([wav, Tensor(np.zeros(pad_shape))], axis=-1)


def build_net(cfg: TopologyConfig, seed: int = 0):
    rng = np.random.default_rng(seed)
    if cfg.num_outputs == 1:
        return ExtractorNet(cfg, rng)
    return SeparatorNet(cfg, rng)


# ---------------------------------------------------------------------------
# Checkpoint container: magic, topology, named float64 records, metadata
# ---------------------------------------------------------------------------

def save_checkpoint(path, cfg: TopologyConfig, records: dict, meta: dict | None = None):
    """Versioned binary checkpoint; byte-identical across save/load/save.

    Records are (name -> float64 array), written sorted by name as
    length-prefixed (name, shape, data) entries.
    """
    topo_json = json.dumps(asdict(cfg), sort_keys=True).encode()
    meta_json = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(topo_json)))
        f.write(topo_json)
        f.write(struct.pack("<I", len(records)))
        for name in sorted(records):
            arr = np.ascontiguousarray(records[name], dtype="<f8")
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
        f.write(struct.pack("<I", len(meta_json)))
        f.write(meta_json)


def load_checkpoint(path):
    """Returns (TopologyConfig, records dict, meta dict)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        chunk = raw[pos:pos + n]
        if len(chunk) != n:
            raise DataError(f"{path}: truncated checkpoint")
        pos += n
        return chunk

    (tlen,) = struct.unpack("<I", take(4))
    cfg = TopologyConfig(**json.loads(take(tlen)))
    (count,) = struct.unpack("<I", take(4))
    records = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape)
        records[name] = data.copy()
    (mlen,) = struct.unpack("<I", take(4))
    meta = json.loads(take(mlen))
    return cfg, records, meta


def net_from_records(cfg: TopologyConfig, records: dict, prefix: str = "net."):
    """Rebuild a network and load its parameters from checkpoint records."""
    net = build_net(cfg, seed=0)
    params = net.params()
    for name, t in params.items():
        key = prefix + name
        if key not in records:
            raise DataError(f"checkpoint is missing parameter {key!r}")
        if records[key].shape != t.data.shape:
            raise DataError(f"checkpoint parameter {key!r} has shape "
                            f"{records[key].shape}, topology wants {t.data.shape}")
        t.data = records[key].astype(np.float64).copy()
    return net


# ---------------------------------------------------------------------------
# Miniature end-to-end gradient-check cases
# ---------------------------------------------------------------------------

def miniature_config(ipd_mode="none", num_outputs=1, ipd_dim=0) -> TopologyConfig:
    return TopologyConfig(N=8, L=4, B=8, H=12, P=3, X=2, R=1,
                          ipd_mode=ipd_mode, num_outputs=num_outputs,
                          ipd_dim=ipd_dim)


def model_gradient_cases(seed: int = 0):
    """(name, build_loss, params) triples for finite-difference checking.

    Miniature topologies (60-sample input), all IPD modes, both network
    kinds, and both loss weightings; `params` includes the projection W
    whenever the speaker-identification term is active.
    """
    from . import loss as loss_mod

    rng = np.random.default_rng(seed)
    n_samples = 60
    frame, hop = 16, 8
    mix2 = rng.normal(size=(2, n_samples)) * 0.3
    spec = dsp.stft(dsp.AudioSignal(mix2), frame, hop)
    ipd_feat = dsp.ipd_features(spec)
    y = Tensor(mix2[0][None, :])
    adapt = Tensor(rng.normal(size=(1, n_samples)) * 0.3)
    x_ref = rng.normal(size=(1, n_samples)) * 0.3
    x_ref2 = rng.normal(size=(1, n_samples)) * 0.3

    cases = []
    for ipd_mode in IPD_MODES:
        for alpha in (0.0, 10.0):
            cfg = miniature_config(ipd_mode, 1,
                                   ipd_dim=ipd_feat.shape[1] if ipd_mode != "none" else 0)
            net = ExtractorNet(cfg, np.random.default_rng(seed + 1))
            params = dict(net.params())
            w = Tensor(rng.normal(size=(3, cfg.B)) * 0.2, requires_grad=True)
            if alpha > 0:
                params["si_head.W"] = w
            feats = ipd_feat if ipd_mode != "none" else None

            def build_loss(net=net, w=w, alpha=alpha, feats=feats):
                xhat, e, _ = net.forward(y, a=adapt, ipd=feats)
                rep = loss_mod.multitask_loss(
                    x_ref, xhat, e=e, w=w, label=1, alpha=alpha)
                return rep.total

            cases.append((f"extractor[ipd={ipd_mode},alpha={alpha:g}]",
                          build_loss, params))

    for ipd_mode in ("none", "input"):
        cfg = miniature_config(ipd_mode, 2,
                               ipd_dim=ipd_feat.shape[1] if ipd_mode != "none" else 0)
        net = SeparatorNet(cfg, np.random.default_rng(seed + 2))
        feats = ipd_feat if ipd_mode != "none" else None

        def build_loss(net=net, feats=feats):
            xh1, xh2 = net.forward(y, ipd=feats)
            val, _ = loss_mod.pit_loss(x_ref, x_ref2, xh1, xh2)
            return val

        cases.append((f"separator[ipd={ipd_mode}]", build_loss, dict(net.params())))

    return cases
