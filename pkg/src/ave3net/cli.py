"""Command-line entry point: ``ave3 <subcommand> ...``.

Exit codes: 0 success, 1 usage or invalid configuration, 2 data error,
3 check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import AveError, CheckFailure, InvalidConfig
from .formats import (RunConfig, load_run_config, parse_run_config, roi_read, roi_write,
                      save_run_config, wav_read, wav_write, weights_load, weights_save)
from .losses import sdr
from .model import PRESETS, build_model, param_report, preset
from .streaming import enhance_offline, enhance_streaming

log = logging.getLogger("ave3net")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(obj, as_json, text):
    if as_json:
        print(json.dumps(obj, indent=2, sort_keys=True))
    else:
        print(text)


def _run_config(args):
    """Run config from --config, else from --preset; AVE3_SEED and --seed apply on top."""
    if getattr(args, "config", None):
        rc = load_run_config(args.config)
    else:
        rc = parse_run_config({"model": {"preset": getattr(args, "preset", None) or "av-gs"}})
    if getattr(args, "seed", None) is not None and not os.environ.get("AVE3_SEED"):
        rc.seed = args.seed
    if getattr(args, "toy", False):
        rc.toy = True
    return rc


# -- subcommands --------------------------------------------------------------------


def cmd_simulate(args):
    from .corpus import generate_corpus

    rc = _run_config(args)
    if rc.simulate is None:
        raise InvalidConfig("run config has no 'simulate' section")
    out = args.out or rc.paths.get("corpus")
    if not out:
        raise InvalidConfig("give --out or paths.corpus")
    manifest = generate_corpus(rc.simulate, out, rc.seed)
    _emit({"corpus": str(out), "num_scenes": manifest["num_scenes"]}, args.json,
          f"wrote {manifest['num_scenes']} scenes to {out}")
    return EXIT_OK


def cmd_enhance(args):
    rc = _run_config(args)
    cfg = rc.build_config()
    model = build_model(cfg, rc.seed)
    weights = args.weights or rc.paths.get("weights")
    if weights:
        weights_load(model, weights)
    audio, _ = wav_read(args.input)
    roi = None
    if args.roi:
        if not cfg.uses_video:
            raise InvalidConfig("a ROI file was given but the configuration is audio-only")
        roi, fps = roi_read(args.roi)
        if fps != cfg.fps:
            raise InvalidConfig(f"ROI stream is {fps} fps, model expects {cfg.fps}")
    if args.mode == "offline":
        out = enhance_offline(model, audio, roi)
    else:
        out = enhance_streaming(model, audio, roi, chunk=args.chunk)
    wav_write(args.output, out)
    report = {"output": args.output, "samples": int(len(out)), "mode": args.mode}
    text = f"wrote {len(out)} samples to {args.output} ({args.mode})"
    if args.reference:
        ref, _ = wav_read(args.reference)
        report["sdr_input_db"] = sdr(audio, ref)
        report["sdr_output_db"] = sdr(out, ref)
        text += (f"\nSDR noisy->ref {report['sdr_input_db']:.2f} dB, "
                 f"enhanced->ref {report['sdr_output_db']:.2f} dB")
    _emit(report, args.json, text)
    return EXIT_OK


def cmd_params(args):
    names = sorted(PRESETS) if args.all else None
    if names is None:
        rc = _run_config(args)
        items = [(rc.preset or "custom", rc.build_config())]
    else:
        items = [(n, preset(n)) for n in names]
    result = {}
    lines = []
    for name, cfg in items:
        rows, total = param_report(cfg)
        result[name] = {"total": total, "modules": dict(rows)}
        lines.append(f"{name}: {total:,} parameters ({total / 1e6:.2f}M)")
        if not args.all:
            lines += [f"  {k:<20s} {v:>12,}" for k, v in rows]
    _emit(result, args.json, "\n".join(lines))
    return EXIT_OK


def cmd_bench(args):
    from .bench import run_bench

    rc = _run_config(args)
    cfg = rc.build_config()
    model = build_model(cfg, rc.seed)
    if args.weights:
        weights_load(model, args.weights)
    rep = run_bench(cfg, rc.preset or "custom", model=model, runs=args.runs,
                    warmup=args.warmup, duration=args.duration, chunk=args.chunk,
                    threads=args.threads, seed=rc.seed)
    stages = ", ".join(f"{k} {v:.3f}" for k, v in rep.stage_rtf().items())
    _emit(rep.to_dict(), args.json,
          f"{rep.config}: RTF {rep.rtf:.3f} (p50 {rep.p50:.3f}, p95 {rep.p95:.3f}) over "
          f"{rep.runs} runs, {rep.duration_s:g} s input, chunk {rep.chunk}, threads {rep.threads}\n"
          f"stage RTF: {stages}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .tensor import inject_fault
    from .train import model_grad_check

    rc = _run_config(args)

    def run():
        return model_grad_check(rc.model, seed=rc.seed, tol=args.tol, samples=args.samples)

    if args.inject_fault:
        with inject_fault(args.inject_fault):
            s = run()
    else:
        s = run()
    report = {"max_rel_err": s.max_rel_err, "passed": s.passed, "checked": s.checked,
              "tol": s.tol, "per_group": {k: {"checked": n, "max_rel_err": e}
                                          for k, (n, e) in s.per_group.items()},
              "worst": list(s.worst) if s.worst else None}
    groups = ", ".join(f"{k} {n}" for k, (n, _) in sorted(s.per_group.items()))
    _emit(report, args.json,
          f"gradcheck {'PASS' if s.passed else 'FAIL'}: max rel err {s.max_rel_err:.3g} "
          f"(tol {s.tol:g}) over {s.checked} parameters [{groups}]")
    if not s.passed:
        raise CheckFailure(f"max relative error {s.max_rel_err:.3g} exceeds {s.tol:g}")
    return EXIT_OK


def cmd_train_toy(args):
    from .corpus import demo_scene
    from .train import build_train_model, train_toy

    rc = _run_config(args)
    tc = rc.train
    steps = args.steps if args.steps is not None else tc.steps
    lr = args.lr if args.lr is not None else tc.lr
    if args.mixture:
        if not args.reference:
            raise InvalidConfig("--mixture needs --reference")
        mix, _ = wav_read(args.mixture)
        ref, _ = wav_read(args.reference)
        roi = roi_read(args.roi)[0] if args.roi else None
    else:
        mix, ref, roi = demo_scene(rc.seed)
    model = build_train_model(rc.model, rc.seed, tc.decoder_init)
    if not args.json:
        def show(step, value):
            if step % 20 == 0 or step == steps:
                print(f"step {step:4d} loss {value:.5f}")
    else:
        show = None
    rep = train_toy(model, mix, ref, roi, steps=steps, lr=lr, seed=rc.seed,
                    warmup_fraction=tc.warmup_fraction, betas=tuple(tc.betas), eps=tc.eps,
                    weight_decay=tc.weight_decay, log=show)
    ckpt = args.checkpoint or rc.paths.get("checkpoint") or "toy_checkpoint.ave3"
    weights_save(model, ckpt)
    save_run_config(RunConfig(model=model.cfg, seed=rc.seed, train=tc,
                              paths={"weights": str(ckpt)}), str(ckpt) + ".json")
    out = rep.to_dict()
    out["checkpoint"] = str(ckpt)
    if args.report:
        Path(args.report).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    _emit(out, args.json,
          f"loss {rep.losses[0]:.5f} -> {rep.losses[-1]:.5f} (ratio {rep.loss_ratio:.3f}); "
          f"SDR input {rep.sdr_input:.2f} dB, enhanced {rep.sdr_final:.2f} dB "
          f"(gain {rep.sdr_gain:+.2f} dB); checkpoint {ckpt}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def _model_args(p):
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--preset", choices=sorted(PRESETS), help="model preset (default av-gs)")
    p.add_argument("--seed", type=int, help="seed (AVE3_SEED overrides)")
    p.add_argument("--toy", action="store_true", help="shrink the model to toy scale")
    p.add_argument("--json", action="store_true", help="machine-readable output")


def build_parser():
    parser = _Parser(prog="ave3", description="Streaming audio-visual speech enhancement")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a simulated corpus")
    _model_args(p)
    p.add_argument("--out", help="output directory (else paths.corpus)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("enhance", help="enhance a WAV file")
    _model_args(p)
    p.add_argument("--weights")
    p.add_argument("--input", required=True)
    p.add_argument("--roi")
    p.add_argument("--output", required=True)
    p.add_argument("--mode", choices=("offline", "streaming"), default="offline")
    p.add_argument("--chunk", type=int, default=160, help="streaming chunk size in samples")
    p.add_argument("--reference", help="reference WAV for an SDR report")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("params", help="parameter counts per submodule")
    _model_args(p)
    p.add_argument("--all", action="store_true", help="report every preset")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("bench", help="real-time-factor benchmark")
    _model_args(p)
    p.add_argument("--weights")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--duration", type=float, default=3.0)
    p.add_argument("--chunk", type=int, help="samples per push (default: whole input)")
    p.add_argument("--threads", type=int, default=1, help="concurrent sessions")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of the toy-scaled model")
    _model_args(p)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--samples", type=int, default=300)
    p.add_argument("--inject-fault", choices=("sigmoid",), help="negative control")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="overfit a toy model to one scene")
    _model_args(p)
    p.add_argument("--mixture")
    p.add_argument("--reference")
    p.add_argument("--roi")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--checkpoint")
    p.add_argument("--report", help="write the training report JSON here")
    p.set_defaults(func=cmd_train_toy)
    return parser


def main(argv=None):
    """Run one subcommand; returns the exit code (usage errors included)."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for name in ("runs", "threads", "steps", "samples"):
            value = getattr(args, name, None)
            if value is not None and value < (0 if name == "steps" else 1):
                parser.error(f"--{name} must be positive")
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InvalidConfig as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (AveError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
