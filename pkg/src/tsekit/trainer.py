"""Training loop, optimizer, experiment config, checkpointing, evaluation.

A run is fully determined by (manifest, config, mode): batching, crops
and initialization all flow from one seeded generator whose state is
serialized into the checkpoint, so same-seed runs reproduce loss logs
bitwise and a resumed run continues exactly where an uninterrupted one
would have been.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import corpus, dsp, loss, model
from .autodiff import Tensor
from .errors import DataError, NumericError
from .model import TopologyConfig

MODES = ("td-spkbeam", "tasnet")


@dataclass
class TrainConfig:
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    alpha: float = 0.0
    lr: float = 1e-3
    max_epochs: int = 30
    batch_size: int = 8
    clip_norm: float = 5.0
    seed: int = 0
    segment_s: float = 1.0
    adapt_segment_s: float = 0.0   # 0 means "same as segment_s"
    eval_every: int = 5
    valid_fraction: float = 0.1
    stft_frame: int = 256
    stft_hop: int = 128

    def __post_init__(self):
        if self.lr <= 0:
            raise DataError(f"config: lr must be positive, got {self.lr}")
        if self.alpha < 0:
            raise DataError(f"config: alpha must be >= 0, got {self.alpha}")
        if self.segment_s * corpus.SAMPLE_RATE < self.topology.L:
            raise DataError("config: segment shorter than the encoder window")
        if self.adapt_segment_s <= 0:
            self.adapt_segment_s = self.segment_s


_CONFIG_KEYS = {
    "preset": str, "N": int, "L": int, "B": int, "H": int, "P": int,
    "X": int, "R": int, "alpha": float, "lr": float, "max_epochs": int,
    "batch_size": int, "clip_norm": float, "seed": int, "segment_s": float,
    "adapt_segment_s": float, "eval_every": int, "valid_fraction": float,
    "stft_frame": int, "stft_hop": int,
}


def parse_config_file(path) -> dict:
    """key=value lines, '#' comments; unknown or malformed keys raise with
    their line number."""
    raw = {}
    text = Path(path).read_text(encoding="utf-8")
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{ln}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise DataError(f"{path}:{ln}: unknown config key {key!r}")
        if key in raw:
            raise DataError(f"{path}:{ln}: duplicate config key {key!r}")
        try:
            raw[key] = _CONFIG_KEYS[key](value)
        except ValueError:
            raise DataError(f"{path}:{ln}: bad value for {key}: {value!r}") from None
    return raw


def make_train_config(raw: dict | None = None, ipd_mode: str = "none",
                      num_outputs: int = 1, alpha: float | None = None) -> TrainConfig:
    """Assemble a TrainConfig from parsed file keys plus CLI-level choices."""
    raw = dict(raw or {})
    preset = raw.pop("preset", "desk")
    if preset not in model.PRESETS:
        raise DataError(f"config: unknown preset {preset!r} "
                        f"(have {sorted(model.PRESETS)})")
    topo_kw = dict(model.PRESETS[preset])
    for letter in "NLBHPXR":
        if letter in raw:
            topo_kw[letter] = raw.pop(letter)
    train_kw = {k: raw[k] for k in raw}
    stft_frame = train_kw.get("stft_frame", 256)
    ipd_dim = 2 * (stft_frame // 2 + 1) if ipd_mode != "none" else 0
    topology = TopologyConfig(ipd_mode=ipd_mode, num_outputs=num_outputs,
                              ipd_dim=ipd_dim, **topo_kw)
    cfg = TrainConfig(topology=topology, **train_kw)
    if alpha is not None:
        cfg.alpha = float(alpha)
    return cfg


class Adam:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params: dict, lr: float):
        self.params = params
        self.lr = lr
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        b1c = 1.0 - 0.9 ** self.t
        b2c = 1.0 - 0.999 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= 0.9
            m += 0.1 * g
            v *= 0.999
            v += 0.001 * g * g
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + 1e-8)

    def state_records(self) -> dict:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state(self, records: dict, t: int):
        for k in self.params:
            self.m[k] = records[f"adam.m.{k}"].copy()
            self.v[k] = records[f"adam.v.{k}"].copy()
        self.t = t


def clip_gradients(params: dict, clip_norm: float) -> float:
    """Global-norm clipping; returns the pre-clip norm."""
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float(np.sum(t.grad ** 2))
    norm = math.sqrt(total)
    if clip_norm > 0 and norm > clip_norm:
        scale = clip_norm / norm
        for t in params.values():
            if t.grad is not None:
                t.grad *= scale
    return norm


class Dataset:
    """Manifest-backed signal store with random training crops."""

    def __init__(self, manifest_path, records, cfg: TrainConfig, need_ipd: bool):
        self.manifest_path = Path(manifest_path)
        self.records = records
        self.cfg = cfg
        self.need_ipd = need_ipd
        self.cache: dict = {}
        if not records:
            raise DataError(f"{manifest_path}: empty manifest")
        first = self._signal(records[0].mixture_path)
        self.n_channels = first.shape[0]
        if need_ipd and self.n_channels != 2:
            raise DataError(f"{manifest_path}: IPD features need a 2-channel "
                            f"corpus, manifest has {self.n_channels} channel(s)")

    def _signal(self, rel: str) -> np.ndarray:
        if rel not in self.cache:
            path = corpus.resolve_path(self.manifest_path, rel)
            if not path.exists():
                raise DataError(f"missing audio file: {path}")
            self.cache[rel] = dsp.wav_read(path).samples
        return self.cache[rel]

    def full(self, rec) -> dict:
        return {"mix": self._signal(rec.mixture_path),
                "src1": self._signal(rec.src1_path),
                "src2": self._signal(rec.src2_path),
                "adapt": self._signal(rec.adapt_path)}

    def _crop(self, x: np.ndarray, n: int, start: int) -> np.ndarray:
        if x.shape[1] >= n:
            return x[:, start:start + n]
        return np.pad(x, ((0, 0), (0, n - x.shape[1])))

    def batch(self, recs, rng, center: bool = False):
        """Stacked crops for one step: mixtures, references, adaptations,
        IPD features (or None).

        Mixture crops (with their references, so mixture == sum of refs
        still holds) and adaptation crops are brought to unit RMS; the
        scale-invariant loss is unaffected and the networks see O(1)
        inputs, matching the inference-time normalization.
        """
        n = int(self.cfg.segment_s * corpus.SAMPLE_RATE)
        na = int(self.cfg.adapt_segment_s * corpus.SAMPLE_RATE)
        ys, x1s, x2s, ads, ipds = [], [], [], [], []
        for rec in recs:
            sig = self.full(rec)
            room = max(sig["mix"].shape[1] - n, 0)
            aroom = max(sig["adapt"].shape[1] - na, 0)
            if center:
                start, astart = room // 2, aroom // 2
            else:
                start = int(rng.integers(0, room + 1)) if room else 0
                astart = int(rng.integers(0, aroom + 1)) if aroom else 0
            mix = self._crop(sig["mix"], n, start)
            g = model.rms_gain(mix[0])
            adapt = self._crop(sig["adapt"], na, astart)[0:1]
            ys.append(mix[0:1] * g)
            x1s.append(self._crop(sig["src1"], n, start)[0:1] * g)
            x2s.append(self._crop(sig["src2"], n, start)[0:1] * g)
            ads.append(adapt * model.rms_gain(adapt))
            if self.need_ipd:
                spec = dsp.stft(dsp.AudioSignal(mix), self.cfg.stft_frame,
                                self.cfg.stft_hop)
                ipds.append(dsp.ipd_features(spec))
        ipd = np.stack(ipds) if self.need_ipd else None
        return (np.stack(ys), np.stack(x1s), np.stack(x2s), np.stack(ads), ipd)


@dataclass
class TrainResult:
    ckpt_path: Path | None
    metrics: list
    best_valid_loss: float
    net: object
    w: Tensor | None
    speakers: list
    cfg: TrainConfig
    mode: str


def _metrics_lines(metrics: list) -> str:
    lines = ["#epoch\tloss\tsisnr\tce"]
    for row in metrics:
        lines.append(f"{row['epoch']}\t{row['loss']!r}\t{row['sisnr']!r}\t{row['ce']!r}")
    return "\n".join(lines) + "\n"


def train(train_manifest, cfg: TrainConfig, mode: str = "td-spkbeam",
          out_path=None, resume_from=None, log_path=None,
          quiet: bool = True) -> TrainResult:
    """Adam training on Eq.-style multitask loss (extraction) or
    utterance-level PIT (separation baseline)."""
    if mode not in MODES:
        raise DataError(f"unknown mode {mode!r}, expected one of {MODES}")
    if mode == "tasnet" and cfg.topology.num_outputs != 2:
        raise DataError("tasnet mode needs a 2-output topology")
    if mode == "td-spkbeam" and cfg.topology.num_outputs != 1:
        raise DataError("td-spkbeam mode needs a 1-output topology")

    records = corpus.read_manifest(train_manifest)
    dataset = Dataset(train_manifest, records, cfg,
                      need_ipd=cfg.topology.ipd_mode != "none")
    label_map = corpus.speaker_label_map(records)
    speakers = sorted(label_map)

    rng = np.random.default_rng(cfg.seed)
    start_epoch = 0
    best_valid = math.inf
    best_records = None
    metrics: list = []

    net = model.build_net(cfg.topology, seed=cfg.seed)
    params = {f"net.{k}": t for k, t in net.params().items()}
    w = None
    if mode == "td-spkbeam" and cfg.alpha > 0:
        w_rng = np.random.default_rng((cfg.seed, 7))
        w = Tensor(w_rng.uniform(-1, 1, size=(len(speakers), cfg.topology.B))
                   / math.sqrt(cfg.topology.B), requires_grad=True)
        params["si_head.W"] = w
    opt = Adam(params, cfg.lr)

    if resume_from is not None:
        topo, ckrecords, meta = model.load_checkpoint(resume_from)
        if asdict(topo) != asdict(cfg.topology):
            raise DataError(f"resume: checkpoint topology {asdict(topo)} differs "
                            "from the configured one")
        if meta["mode"] != mode or meta["alpha"] != cfg.alpha:
            raise DataError("resume: checkpoint was trained with a different "
                            "mode or alpha")
        for k, t in params.items():
            t.data = ckrecords[k].copy()
        opt.load_state(ckrecords, meta["step"])
        rng.bit_generator.state = meta["rng_state"]
        start_epoch = meta["epoch"]
        best_valid = meta["best_valid_loss"]
        speakers = meta["speakers"]
        best_records = {k: v for k, v in ckrecords.items() if k.startswith("best.")}

    # deterministic validation split
    split_rng = np.random.default_rng((cfg.seed, 3))
    order = split_rng.permutation(len(records))
    n_valid = int(len(records) * cfg.valid_fraction)
    valid_recs = [records[i] for i in order[:n_valid]]
    train_recs = [records[i] for i in order[n_valid:]]
    if not train_recs:
        train_recs = records
    if not valid_recs:
        valid_recs = train_recs  # tiny runs validate on the training set

    def batch_loss(recs, generator, center=False):
        y, x1, x2, a, ipd = dataset.batch(recs, generator, center)
        if mode == "td-spkbeam":
            xhat, e, _ = net.forward(Tensor(y), a=Tensor(a), ipd=ipd)
            labels = [label_map[r.target_spk] for r in recs]
            if cfg.alpha > 0:
                return loss.multitask_loss(x1, xhat, e=e, w=w, label=labels,
                                           alpha=cfg.alpha)
            return loss.multitask_loss(x1, xhat, alpha=0.0)
        xh1, xh2 = net.forward(Tensor(y), ipd=ipd)
        val, perms = loss.pit_loss(x1, x2, xh1, xh2)
        return loss.LossReport(total=val, sisnr_db=-val.item(), ce=math.nan,
                               alpha=0.0, permutation=perms)

    def valid_loss() -> float:
        vals = []
        still = np.random.default_rng(0)
        with ad.no_grad():
            for i in range(0, len(valid_recs), cfg.batch_size):
                rep = batch_loss(valid_recs[i:i + cfg.batch_size], still, center=True)
                vals.append(rep.total.item())
        ad.tape().clear()
        return float(np.mean(vals))

    for epoch in range(start_epoch + 1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_recs))
        ep_loss, ep_sisnr, ep_ce, n_batches, n_ce = 0.0, 0.0, 0.0, 0, 0
        for i in range(0, len(order), cfg.batch_size):
            recs = [train_recs[j] for j in order[i:i + cfg.batch_size]]
            ad.tape().clear()
            rep = batch_loss(recs, rng)
            if not np.isfinite(rep.total.data).all():
                raise NumericError(
                    f"NaN loss at epoch {epoch} on mixtures "
                    f"{[r.mixture_id for r in recs]}")
            ad.backward(rep.total)
            clip_gradients(params, cfg.clip_norm)
            opt.step()
            for t in params.values():
                t.zero_grad()
            ep_loss += rep.total.item()
            ep_sisnr += rep.sisnr_db
            if not math.isnan(rep.ce):
                ep_ce += rep.ce
                n_ce += 1
            n_batches += 1
        ad.tape().clear()

        row = {"epoch": epoch, "loss": ep_loss / n_batches,
               "sisnr": ep_sisnr / n_batches,
               "ce": ep_ce / n_ce if n_ce else math.nan}
        metrics.append(row)
        if not quiet:
            print(f"epoch {epoch}: loss {row['loss']:.3f} "
                  f"sisnr {row['sisnr']:.2f} ce {row['ce']:.3f}")

        if epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs:
            v = valid_loss()
            if v < best_valid:
                best_valid = v
                best_records = {f"best.{k}": t.data.copy() for k, t in params.items()}

        for t in params.values():
            if not np.isfinite(t.data).all():
                raise NumericError(f"non-finite parameter after epoch {epoch}")

    if best_records is None:
        best_records = {f"best.{k}": t.data.copy() for k, t in params.items()}

    ckpt_path = None
    if out_path is not None:
        ckpt_path = Path(out_path)
        save_train_checkpoint(ckpt_path, cfg, mode, params, opt, rng,
                              cfg.max_epochs, best_valid, best_records, speakers)
    if log_path is not None:
        Path(log_path).write_text(_metrics_lines(metrics), encoding="utf-8")

    return TrainResult(ckpt_path=ckpt_path, metrics=metrics,
                       best_valid_loss=best_valid, net=net, w=w,
                       speakers=speakers, cfg=cfg, mode=mode)


def save_train_checkpoint(path, cfg: TrainConfig, mode: str, params: dict,
                          opt: Adam, rng, epoch: int, best_valid: float,
                          best_records: dict, speakers: list):
    records = {k: t.data for k, t in params.items()}
    records.update(opt.state_records())
    records.update(best_records)
    meta = {
        "mode": mode, "alpha": cfg.alpha, "epoch": epoch, "step": opt.t,
        "best_valid_loss": best_valid, "speakers": speakers,
        "rng_state": rng.bit_generator.state,
        "train_config": {k: v for k, v in asdict(cfg).items() if k != "topology"},
    }
    model.save_checkpoint(path, cfg.topology, records, meta)


def load_eval_net(ckpt_path, use_best: bool = True):
    """Rebuild the network (best-validation weights by default) plus the
    projection W and metadata."""
    topo, records, meta = model.load_checkpoint(ckpt_path)
    prefix = "best.net." if use_best and any(k.startswith("best.net.") for k in records) \
        else "net."
    net = model.net_from_records(topo, records, prefix=prefix)
    wkey = "best.si_head.W" if use_best and "best.si_head.W" in records else "si_head.W"
    w = Tensor(records[wkey].copy()) if wkey in records else None
    return net, w, meta


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    rows: list                    # (mixture_id, pair_type, sisnri_db)
    table: dict                   # pair_type -> (mean_db, count)
    avg: float                    # mixture-count-weighted mean

    def to_text(self) -> str:
        cells = [f"{pt}: {self.table[pt][0]:+6.2f} dB (n={self.table[pt][1]})"
                 for pt in ("AA", "BB", "AB") if pt in self.table]
        return "SiSNR improvement  " + "  ".join(cells) + \
            f"  avg: {self.avg:+6.2f} dB"

    def to_tsv(self) -> str:
        lines = ["#pair_type\tmean_sisnri_db\tcount"]
        for pt in sorted(self.table):
            mean, count = self.table[pt]
            lines.append(f"{pt}\t{mean!r}\t{count}")
        lines.append(f"avg\t{self.avg!r}\t{len(self.rows)}")
        lines.append("")
        lines.append("#mixture_id\tpair_type\tsisnri_db")
        for mid, pt, v in self.rows:
            lines.append(f"{mid}\t{pt}\t{v!r}")
        return "\n".join(lines) + "\n"


def summarize(rows: list) -> EvalReport:
    table = {}
    for pt in sorted({r[1] for r in rows}):
        vals = [v for _, p, v in rows if p == pt]
        table[pt] = (float(np.mean(vals)), len(vals))
    avg = float(np.mean([v for _, _, v in rows])) if rows else math.nan
    return EvalReport(rows=rows, table=table, avg=avg)


def evaluate_records(manifest_path, records, estimator) -> EvalReport:
    """Mean SiSNR improvement of estimator(signals, record) over the raw
    mixture, grouped by pair type."""
    rows = []
    cache = {}

    def read(rel):
        if rel not in cache:
            cache[rel] = dsp.wav_read(corpus.resolve_path(manifest_path, rel)).samples
        return cache[rel]

    for rec in records:
        mix = read(rec.mixture_path)
        ref = read(rec.src1_path)[0]
        xhat = estimator({"mix": mix, "ref": ref,
                          "adapt": read(rec.adapt_path)[0]}, rec)
        improvement = loss.sisnr(ref, xhat) - loss.sisnr(ref, mix[0])
        rows.append((rec.mixture_id, rec.pair_type, float(improvement)))
    return summarize(rows)


def _ipd_from_mix(mix: np.ndarray, cfg_meta: dict):
    frame = cfg_meta.get("stft_frame", 256)
    hop = cfg_meta.get("stft_hop", 128)
    spec = dsp.stft(dsp.AudioSignal(mix), frame, hop)
    return dsp.ipd_features(spec)


def evaluate_checkpoint(ckpt_path, manifest, select: str = "oracle",
                        aux_ckpt=None) -> EvalReport:
    """Per-pair-type SiSNRi table for a trained checkpoint.

    Extraction checkpoints run directly; separation checkpoints pick one
    of their two outputs per record by oracle or cosine selection (cosine
    needs an auxiliary network, from aux_ckpt or the same file).
    """
    from . import evaluate as ev

    net, _, meta = load_eval_net(ckpt_path)
    records = corpus.read_manifest(manifest)
    dataset = Dataset(manifest, records, TrainConfig(topology=net.cfg), need_ipd=False)
    if net.cfg.ipd_mode != "none" and dataset.n_channels != 2:
        raise DataError("checkpoint topology expects IPD features but the "
                        f"manifest has {dataset.n_channels} channel(s)")
    tcfg = meta.get("train_config", {})

    if net.cfg.num_outputs == 1:
        def estimator(sig, rec):
            ipd = _ipd_from_mix(sig["mix"], tcfg) if net.cfg.ipd_mode != "none" else None
            return net.extract(sig["mix"][0], sig["adapt"], ipd=ipd)
    else:
        aux = None
        if select == "cosine":
            if aux_ckpt is None:
                raise DataError("cosine selection needs an extraction checkpoint "
                                "providing the auxiliary network (aux_ckpt)")
            aux, _, _ = load_eval_net(aux_ckpt)

        def estimator(sig, rec):
            ipd = _ipd_from_mix(sig["mix"], tcfg) if net.cfg.ipd_mode != "none" else None
            xh1, xh2 = net.separate(sig["mix"][0], ipd=ipd)
            if select == "oracle":
                choice = ev.oracle_select(xh1, xh2, sig["ref"])
            else:
                choice = ev.cosine_select(xh1, xh2, sig["adapt"], aux)
            return xh1 if choice.chosen_index == 1 else xh2

    return evaluate_records(manifest, records, estimator)


def classification_accuracy(net, w: Tensor, manifest, records, speakers) -> float:
    """Fraction of adaptation utterances whose projected embedding argmax
    hits the target speaker."""
    label_map = {sid: i for i, sid in enumerate(speakers)}
    cache = Dataset(manifest, records, TrainConfig(topology=net.cfg), need_ipd=False)
    hits = 0
    for rec in records:
        e = net.embed_utterance(cache.full(rec)["adapt"][0])
        hits += int(np.argmax(w.data @ e) == label_map[rec.target_spk])
    return hits / len(records)
