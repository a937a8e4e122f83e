"""Command-line entry point: ``mptscale <subcommand> ...``.

Exit codes: 0 success, 1 validation or precondition failure, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import complexity, evaluation, pipeline
from .dsp import WavFormatError, wav_read, wav_write
from .mptnet import ConfigError, ModelConfig, build

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load_config(path) -> ModelConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CLIError(f"cannot read config {path}: {exc.strerror}", EXIT_IO) from None
    return ModelConfig.from_text(text)


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CLIError(f"cannot read {path}: {exc.strerror}", EXIT_IO) from None


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise CLIError(f"cannot write {path}: {exc.strerror}", EXIT_IO) from None


def cmd_plan(args) -> None:
    cfg = complexity.plan(complexity.Budget(args.macs, args.tol))
    rep = complexity.cost_report(cfg)
    _write_text(args.out, cfg.to_text())
    print(rep.table())


def cmd_macs(args) -> None:
    rep = complexity.cost_report(_load_config(args.config))
    print(rep.table())
    if args.csv:
        _write_text(args.csv, rep.to_csv())
    else:
        print()
        print(rep.to_csv(), end="")


def cmd_train(args) -> None:
    cfg = _load_config(args.config)
    data = pipeline.gen_dataset(pipeline.SynthSpec(seed=args.data_seed, n_clips=args.clips))
    run = pipeline.TrainRun(cfg, args.steps, batch_size=args.batch_size, lr=args.lr,
                            seed=args.seed)
    res = pipeline.train(run, data)
    out = Path(args.out)
    try:
        out.write_bytes(res.final)
        out.with_name(out.name + ".best").write_bytes(res.best)
    except OSError as exc:
        raise CLIError(f"cannot write checkpoint: {exc}", EXIT_IO) from None
    _, val = pipeline.split(data)
    print(f"steps {args.steps}  final loss {res.history.loss[-1] if res.history.loss else float('nan'):.3f}")
    print(f"validation SI-SNR {res.best_val:.2f} dB (noisy {pipeline.baseline(val):.2f} dB)")


def cmd_denoise(args) -> None:
    cfg = _load_config(args.config)
    blob = _read_bytes(args.ckpt)
    try:
        wave, rate = wav_read(args.inp)
    except FileNotFoundError:
        raise CLIError(f"no such file: {args.inp}", EXIT_IO) from None
    except WavFormatError as exc:
        raise CLIError(str(exc), EXIT_IO) from None
    if rate != cfg.sample_rate:
        raise CLIError(f"{args.inp} is {rate} Hz, model expects {cfg.sample_rate} Hz", EXIT_INVALID)
    est = pipeline.denoise(wave, cfg, blob)
    try:
        wav_write(args.out, est, rate)
    except OSError as exc:
        raise CLIError(f"cannot write {args.out}: {exc.strerror}", EXIT_IO) from None


def cmd_probe(args) -> None:
    cfg = _load_config(args.config)
    if args.ckpt:
        model = pipeline.load_model(cfg, _read_bytes(args.ckpt))
    else:
        model = build(cfg, seed=args.seed)
    rep = evaluation.causality_probe(model, args.frames, args.t0, args.trials, args.seed)
    status = "PASS" if rep.passed else "FAIL"
    print(f"{status} max deviation {rep.max_deviation:.3e} (tol {rep.tol:.0e}) "
          f"over {args.trials} trials, T={args.frames}, t0={args.t0}")
    if not rep.passed:
        raise CLIError("model output depends on future frames", EXIT_INVALID)


def cmd_fit(args) -> None:
    try:
        points = evaluation.read_points_csv(args.csv)
    except OSError as exc:
        raise CLIError(f"cannot read {args.csv}: {exc.strerror}", EXIT_IO) from None
    fit = evaluation.fit_scaling(points)
    print(f"slope {fit.slope:.6g}  intercept {fit.intercept:.6g}  r2 {fit.r2:.6f}")
    if args.out:
        _write_text(args.out, fit.to_csv())


def cmd_scaling(args) -> None:
    try:
        budgets = [float(b) for b in args.budgets.split(",")]
    except ValueError:
        raise CLIError(f"bad budget list {args.budgets!r}", EXIT_INVALID) from None
    spec = pipeline.SynthSpec(seed=args.data_seed, n_clips=args.clips)
    try:
        res = pipeline.run_scaling_experiment(budgets, spec, args.steps, seed=args.seed,
                                              out_dir=args.out)
    except OSError as exc:
        raise CLIError(f"cannot write results: {exc}", EXIT_IO) from None
    for (m, v), cfg in zip(res.points, res.configs):
        print(f"{complexity.fmt_si(m):>10} MACs/s  K={cfg.K} B={cfg.B} E={cfg.E}  SI-SNR {v:.2f} dB")
    print(f"slope {res.fit.slope:.4f} dB/doubling  intercept {res.fit.intercept:.3f}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mptscale", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("plan", help="pick a configuration for a MACs/s budget")
    s.add_argument("--macs", type=float, required=True)
    s.add_argument("--tol", type=float, default=0.15)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("macs", help="cost report for a configuration")
    s.add_argument("--config", required=True)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_macs)

    s = sub.add_parser("train", help="train on synthetic data")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--data-seed", type=int, default=0)
    s.add_argument("--clips", type=int, default=200)
    s.add_argument("--batch-size", type=int, default=4)
    s.add_argument("--lr", type=float, default=1e-3)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("denoise", help="denoise a PCM16 WAV file")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("probe-causality", help="check that outputs ignore future frames")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt")
    s.add_argument("--frames", type=int, default=64)
    s.add_argument("--t0", type=int, default=32)
    s.add_argument("--trials", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("fit-scaling", help="fit metric against log2 MACs/s")
    s.add_argument("--csv", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("scaling-run", help="plan, train and fit across budgets")
    s.add_argument("--budgets", required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--data-seed", type=int, default=0)
    s.add_argument("--clips", type=int, default=200)
    s.set_defaults(func=cmd_scaling)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, complexity.InfeasibleBudget, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
