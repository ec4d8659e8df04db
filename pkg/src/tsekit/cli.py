"""Command-line entry point.

Subcommands: mixgen (synthetic corpus), train, extract, eval, gradcheck.
Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import corpus, dsp, evaluate, gradsuite, model, trainer
from .errors import EngineError, NumericError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsekit",
        description="Desk-scale time-domain target speech extraction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mixgen", help="generate a synthetic two-speaker corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--speakers", type=int, required=True,
                   help="number of training speakers (>= 4, split across families)")
    p.add_argument("--mixtures", type=int, required=True,
                   help="total mixtures (80%% train / 20%% test)")
    p.add_argument("--seed", type=int, required=True, help="corpus seed")
    p.add_argument("--channels", type=int, choices=(1, 2), default=1,
                   help="1 for mono, 2 adds per-source interchannel delays")

    p = sub.add_parser("train", help="train an extraction or separation model")
    p.add_argument("--manifest", required=True, help="training manifest")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--mode", choices=trainer.MODES, default="td-spkbeam")
    p.add_argument("--ipd", choices=model.IPD_MODES, default="none",
                   help="spatial-feature combination")
    p.add_argument("--alpha", type=float, default=None,
                   help="speaker-identification loss weight (overrides config)")
    p.add_argument("--log", help="metrics log path (epoch\\tloss\\tsisnr\\tce)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--verbose", action="store_true", help="print per-epoch losses")

    p = sub.add_parser("extract", help="extract the target speaker from a mixture")
    p.add_argument("--ckpt", required=True, help="extraction checkpoint")
    p.add_argument("--mixture", required=True, help="mixture wav (1 or 2 channels)")
    p.add_argument("--adapt", required=True, help="adaptation utterance wav")
    p.add_argument("--out", required=True, help="output wav path")
    p.add_argument("--reference", help="clean target wav; prints SiSNR when given")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True, help="directory for report files")
    p.add_argument("--select", choices=("oracle", "cosine"), default="oracle",
                   help="output selection for separation checkpoints")
    p.add_argument("--aux-ckpt", help="extraction checkpoint providing the "
                   "auxiliary network for cosine selection")
    p.add_argument("--bin-width", type=float, default=1.0,
                   help="histogram bin width in dB")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)

    return parser


def _cmd_mixgen(args) -> int:
    report = corpus.build_corpus(args.out, args.speakers, args.mixtures,
                                 args.seed, channels=args.channels)
    train_recs = corpus.read_manifest(report.train_manifest)
    test_recs = corpus.read_manifest(report.test_manifest)
    print("split\t#mixtures\t#spk\t#A\t#B")
    for split, recs, spk in (("train", train_recs, report.train_speakers),
                             ("test", test_recs, report.test_speakers)):
        fams = report.family_counts[split]
        print(f"{split}\t{len(recs)}\t{len(spk)}\t{fams['A']}\t{fams['B']}")
    counts = {}
    for r in train_recs + test_recs:
        counts[r.pair_type] = counts.get(r.pair_type, 0) + 1
    print("pair types: " + "  ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    print(f"manifests: {report.train_manifest} {report.test_manifest}")
    return 0


def _cmd_train(args, parser) -> int:
    if args.mode == "tasnet" and args.ipd == "internal":
        parser.error("unsupported combination: tasnet with internal IPD "
                     "(input combination only)")
    raw = trainer.parse_config_file(args.config) if args.config else {}
    num_outputs = 2 if args.mode == "tasnet" else 1
    cfg = trainer.make_train_config(raw, ipd_mode=args.ipd,
                                    num_outputs=num_outputs, alpha=args.alpha)
    if args.mode == "tasnet" and cfg.alpha != 0.0:
        parser.error("the tasnet baseline has no speaker head; --alpha must be 0")
    result = trainer.train(args.manifest, cfg, mode=args.mode,
                           out_path=args.out, resume_from=args.resume,
                           log_path=args.log, quiet=not args.verbose)
    last = result.metrics[-1] if result.metrics else {"loss": float("nan")}
    print(f"trained {args.mode} (ipd={args.ipd}, alpha={cfg.alpha:g}) "
          f"for {cfg.max_epochs} epochs; final loss {last['loss']:.3f}; "
          f"checkpoint: {result.ckpt_path}")
    return 0


def _cmd_extract(args) -> int:
    net, _, meta = trainer.load_eval_net(args.ckpt)
    mix = dsp.wav_read(args.mixture)
    adapt = dsp.wav_read(args.adapt)
    ipd = None
    if net.cfg.ipd_mode != "none":
        if mix.n_channels != 2:
            raise EngineError(f"checkpoint expects IPD features but "
                              f"{args.mixture} has {mix.n_channels} channel(s)")
        tcfg = meta.get("train_config", {})
        spec = dsp.stft(mix, tcfg.get("stft_frame", 256), tcfg.get("stft_hop", 128))
        ipd = dsp.ipd_features(spec)
    xhat = net.extract(mix.channel(0), adapt.channel(0), ipd=ipd)
    dsp.wav_write(args.out, dsp.AudioSignal(xhat, mix.sample_rate))
    print(f"wrote {args.out} ({xhat.size} samples)")
    if args.reference:
        from . import loss
        ref = dsp.wav_read(args.reference)
        print(f"SiSNR vs reference: {loss.sisnr(ref.channel(0), xhat):.2f} dB")
    return 0


def _cmd_eval(args) -> int:
    report = trainer.evaluate_checkpoint(args.ckpt, args.manifest,
                                         select=args.select,
                                         aux_ckpt=args.aux_ckpt)
    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.tsv").write_text(report.to_tsv(), encoding="utf-8")
    hist = evaluate.histogram_report(report.rows, args.bin_width)
    (out / "histogram.tsv").write_text(hist.to_tsv(), encoding="utf-8")
    print(report.to_text())
    rates = "  ".join(f"{t}: {hist.failure_rate[t]:.1%}" for t in sorted(hist.failure_rate))
    print(f"failure rate (SiSNRi <= 0 dB)  {rates}  "
          f"overall: {hist.overall_failure_rate:.1%}")
    print(f"reports written to {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    failures = 0
    results = gradsuite.run_op_suite(seed=args.seed)
    results += gradsuite.run_model_suite(seed=args.seed)
    for name, err in results:
        ok = err < gradsuite.TOLERANCE
        failures += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name:50s} {err:.3e}")
    print(f"{len(results) - failures}/{len(results)} gradient checks passed "
          f"(tolerance {gradsuite.TOLERANCE:g})")
    if failures:
        raise NumericError(f"{failures} gradient check(s) above tolerance")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "mixgen":
            return _cmd_mixgen(args)
        if args.command == "train":
            return _cmd_train(args, parser)
        if args.command == "extract":
            return _cmd_extract(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        parser.error(f"unknown command {args.command!r}")
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
