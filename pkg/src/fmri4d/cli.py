"""``fmri4d`` command line: synth, train, eval, gradcheck, bench, inspect.

Every setting in :mod:`fmri4d.config` is available as ``--<dotted.key>``
on the commands that use it; ``--config FILE`` loads a file first, and flags
override it. Exit codes: 0 success, 1 usage or configuration error, 2 data
error, 3 numerical failure.

Setting ``FMRI4D_PURE_PYTHON=1`` disables the compiled kernels.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels
from .bench import DEFAULT_SWEEP, PRESETS, parse_case, run_bench
from .checks import MICRO_SHAPE, gradcheck_model, micro_spec
from .config import KEYS, ConfigError, RunConfig, format_value
from .data import (
    Manifest, T4dfError, generate_synthetic, read_header, sliding_window_starts,
)
from .models import VARIANTS, build, parse_variant
from .tensor import ShapeError
from .training import (
    CKPT_MAGIC, CheckpointError, NonFiniteGradient, checkpoint_load, checkpoint_save, evaluate_subjects,
    fit, read_checkpoint_header, restore, use_best,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


# per-command config sections; aliases map short flags onto dotted keys
SECTIONS = {
    "synth": ("data.",),
    "train": ("model.", "train.", "data.manifest", "data.stride", "run."),
    "eval": ("data.manifest", "data.stride"),
}
ALIASES = {
    "synth": {"--out": ["data.out_dir"], "--seed": ["data.seed"], "--subjects-per-class": ["data.train_per_class"],
              "--mode": ["data.mode"], "--amplitude": ["data.amplitude"]},
    "train": {"--variant": ["model.variant"], "--epochs": ["train.epochs"], "--lr": ["train.lr"],
              "--seed": ["train.seed", "model.seed"], "--manifest": ["data.manifest"], "--out": ["run.out_dir"],
              "--stride": ["data.stride"], "--dtype": ["model.dtype"]},
    "eval": {"--manifest": ["data.manifest"], "--stride": ["data.stride"]},
}


def _add_config_flags(p: argparse.ArgumentParser, command: str) -> None:
    p.add_argument("--config", metavar="FILE", help="config file of 'key = value' lines, applied before flags")
    group = p.add_argument_group("settings (config keys)")
    for name, key in KEYS.items():
        if any(name.startswith(s) for s in SECTIONS[command]):
            group.add_argument(f"--{name}", dest=f"cfg:{name}", metavar="V", default=argparse.SUPPRESS,
                               help=f"{key.help} (default: {format_value(key.default)})")
    for flag, names in ALIASES.get(command, {}).items():
        group.add_argument(flag, dest=f"alias:{flag}", metavar="V", default=argparse.SUPPRESS,
                           help=f"same as --{' and --'.join(names)}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fmri4d", description="4D convolutional and recurrent fMRI classifiers.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a seeded synthetic dataset (manifest + T4DF files)")
    _add_config_flags(s, "synth")

    t = sub.add_parser("train", help="train a model on a manifest and report test metrics")
    _add_config_flags(t, "train")
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint written by train")

    e = sub.add_parser("eval", help="sliding-window evaluation of a checkpoint")
    _add_config_flags(e, "eval")
    e.add_argument("--checkpoint", required=True, metavar="CKPT")
    e.add_argument("--split", default="test", choices=("train", "val", "test"), help="(default: test)")
    e.add_argument("--variant", help="expected variant; error if the checkpoint differs")

    g = sub.add_parser("gradcheck", help="64-bit finite-difference check of a micro-scale model")
    g.add_argument("--variant", required=True, help=f"one of {', '.join(v.lower() for v in VARIANTS)}")
    g.add_argument("--scale", default="micro", choices=("micro",),
                   help=f"micro = {'x'.join(map(str, MICRO_SHAPE))} crops, full depth, width 2 (default: micro)")
    g.add_argument("--tolerance", type=float, default=1e-6, help="max relative error (default: 1e-06)")
    g.add_argument("--max-entries", type=int, default=4, help="entries sampled per tensor; 0 = all (default: 4)")
    g.add_argument("--batch", type=int, default=8, help="crops in the checked batch (default: 8)")
    g.add_argument("--seed", type=int, default=0, help="(default: 0)")
    g.add_argument("--inject-fault", metavar="OP[:FACTOR]",
                   help="test hook: scale the gradients of one op's backward rule (default factor 1.1)")

    b = sub.add_parser("bench", help="time direct vs im2col convolution on each kernel backend")
    b.add_argument("--case", action="append", default=[], metavar="SPEC",
                   help=f"case 'rank=4,cin=1,...' or a preset ({', '.join(PRESETS)}); repeatable")
    b.add_argument("--sweep", metavar="FILE", help="file with one case per line ('#' comments)")
    b.add_argument("--backend", action="append", choices=sorted(kernels.BACKENDS),
                   help=f"repeatable (default: all available: {', '.join(kernels.BACKENDS)})")
    b.add_argument("--dtype", default="float32", choices=("float32", "float64"), help="(default: float32)")
    b.add_argument("--repeats", type=int, default=3, help="best-of repeats (default: 3)")
    b.add_argument("--tolerance", type=float, default=None,
                   help="path equivalence bound (default: 1e-5 for float32, 1e-10 for float64)")

    i = sub.add_parser("inspect", help="print T4DF headers, checkpoint manifests or manifest summaries")
    i.add_argument("paths", nargs="+")
    return p


def _config(args, command: str) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg.load(args.config)
    for dest, value in vars(args).items():
        if dest.startswith("cfg:"):
            cfg.set(dest[4:], value, "flag")
    for flag, names in ALIASES.get(command, {}).items():
        value = getattr(args, f"alias:{flag}", None)
        if value is not None:
            for name in names:
                cfg.set(name, value, "flag")
    return cfg


def _manifest(path: str) -> Manifest:
    if not path:
        raise UsageError("no manifest given (use --manifest or data.manifest)")
    try:
        return Manifest.read(path)
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e.strerror}") from None
    except ValueError as e:
        raise DataError(f"bad manifest {path}: {e}") from None


def _records(manifest: Manifest, split: str):
    try:
        return manifest.load(split)
    except OSError as e:
        raise DataError(f"cannot read image: {e}") from None
    except (T4dfError, ShapeError, ValueError) as e:
        raise DataError(str(e)) from None


def _extents(manifest: Manifest, records) -> tuple[int, ...]:
    if manifest.shape is not None:
        return manifest.shape
    if not records:
        raise DataError("manifest has no shape header and no records")
    return records[0].image.shape[2:]


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _config(args, "synth")
    synth = cfg.synth_config()
    try:
        manifest, report = generate_synthetic(synth, cfg["data.out_dir"])
    except OSError as e:
        raise DataError(f"cannot write dataset: {e}") from None
    print(f"wrote {len(manifest.entries)} subjects to {cfg['data.out_dir']}")
    for line in report.lines():
        print(line)
    if not report.passed:
        raise NumericalFailure("generator self-check failed: class-1 region variance below the configured margin")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args, "train")
    manifest = _manifest(cfg["data.manifest"])
    train_records = _records(manifest, "train")
    val_records = _records(manifest, "val")
    test_records = _records(manifest, "test")
    if not train_records or not val_records:
        raise DataError("manifest needs nonempty train and val splits")
    extents = _extents(manifest, train_records)
    tc = cfg.train_config()
    if tc.val_interval != cfg["train.val_interval"]:
        print(f"note: val_interval clamped to {tc.val_interval} (epochs={tc.epochs})")
    model = build(cfg.model_spec(extents), cfg.dtype, cfg["model.conv_path"])
    state = None
    if args.resume:
        try:
            ckpt = checkpoint_load(args.resume)
        except OSError as e:
            raise DataError(f"cannot read checkpoint {args.resume}: {e.strerror}") from None
        state = restore(model, ckpt)
        print(f"resumed from {args.resume} at epoch {state.epoch}, step {state.step}")
    out = Path(cfg["run.out_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.dumps())
        log_file = open(out / "train.log", "a" if args.resume else "w")
    except OSError as e:
        raise DataError(f"cannot write to {out}: {e}") from None
    with log_file:
        def on_log(line: str) -> None:
            print(line, flush=True)
            log_file.write(line + "\n")

        try:
            state = fit(model, train_records, val_records, tc, state, on_log=on_log)
        except NonFiniteGradient as e:
            raise NumericalFailure(str(e)) from None
    checkpoint_save(model, state, out / "last.ckpt", tc)
    use_best(model, state)
    checkpoint_save(model, state, out / "best.ckpt", tc)
    print(f"best epoch {state.best_epoch} ({tc.selection_metric}={state.best_metric}); "
          f"checkpoints in {out}")
    if test_records:
        report = evaluate_subjects(model, test_records, tc.crop_length, tc.eval_stride)
        print("test:", report.text())
        print(report.line(split="test", variant=model.spec.variant))
        (out / "metrics.txt").write_text(report.text() + "\n" + report.line(split="test") + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args, "eval")
    try:
        ckpt = checkpoint_load(args.checkpoint)
    except OSError as e:
        raise DataError(f"cannot read checkpoint {args.checkpoint}: {e.strerror}") from None
    if args.variant is not None and parse_variant(args.variant) != ckpt.spec.variant:
        raise CheckpointError(f"checkpoint holds a {ckpt.spec.variant} model, not {parse_variant(args.variant)}")
    model = build(ckpt.spec, ckpt.dtype)
    restore(model, ckpt)
    manifest = _manifest(cfg["data.manifest"])
    records = _records(manifest, args.split)
    if not records:
        raise DataError(f"split {args.split} is empty")
    w = ckpt.spec.input_shape[3]
    for r in records:
        if r.image.shape[2:5] != ckpt.spec.input_shape[:3]:
            raise DataError(f"{r.subject_id}: extents {list(r.image.shape[2:5])} do not match the checkpoint "
                            f"model {list(ckpt.spec.input_shape[:3])}")
    stride = cfg["data.stride"]
    report = evaluate_subjects(model, records, w, stride)
    for r in records:
        n = len(sliding_window_starts(r.length, w, stride))
        print(f"subject={r.subject_id} label={r.label} p_asd={report.probabilities[r.subject_id]:.6f} crops={n}")
    per_subject = sorted({len(sliding_window_starts(r.length, w, stride)) for r in records})
    print(report.text())
    print(report.line(split=args.split, stride=stride, window=w,
                      crops_per_subject="/".join(map(str, per_subject))))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    spec = micro_spec(parse_variant(args.variant), seed=args.seed)
    fault = None
    if args.inject_fault:
        op, _, factor = args.inject_fault.partition(":")
        fault = (op, float(factor) if factor else 1.1)
    max_entries = None if args.max_entries == 0 else args.max_entries
    if fault is not None:
        with ad.inject_fault(*fault):
            report = gradcheck_model(spec, args.tolerance, max_entries, args.seed, args.batch)
    else:
        report = gradcheck_model(spec, args.tolerance, max_entries, args.seed, args.batch)
    for line in report.lines():
        print(line)
    status = "pass" if report.passed else "FAIL"
    print(f"variant={spec.variant} scale={args.scale} dtype=float64 params={len(report.params)} "
          f"max_rel_err={report.max_rel_error:.3e} tolerance={args.tolerance:g} status={status}")
    if not report.passed:
        raise NumericalFailure(f"gradcheck failed for {len(report.failures)} parameter tensor(s)")
    return EXIT_OK


def cmd_bench(args) -> int:
    texts = list(args.case)
    if args.sweep:
        try:
            lines = Path(args.sweep).read_text().splitlines()
        except OSError as e:
            raise DataError(f"cannot read sweep {args.sweep}: {e.strerror}") from None
        texts += [ln.split("#", 1)[0].strip() for ln in lines if ln.split("#", 1)[0].strip()]
    elif not texts:
        texts = list(DEFAULT_SWEEP)
    try:
        cases = [parse_case(t) for t in texts]
    except (ValueError, ShapeError) as e:
        raise UsageError(str(e)) from None
    dtype = np.dtype(args.dtype)
    tol = args.tolerance if args.tolerance is not None else (1e-5 if dtype == np.float32 else 1e-10)
    rows = run_bench(cases, args.backend, dtype, args.repeats, tol)
    print(f"# rows={len(rows)} backends={','.join(args.backend or kernels.BACKENDS)} tolerance={tol:g}")
    for row in rows:
        print(row.line())
    bad = [r for r in rows if not r.equal]
    if bad:
        raise NumericalFailure(f"{len(bad)} row(s) exceed the path-equivalence tolerance")
    return EXIT_OK


def _inspect_one(path: Path) -> None:
    try:
        with open(path, "rb") as f:
            magic = f.read(4)
            f.seek(0)
            if magic == b"T4DF":
                dtype, shape = read_header(f)
                print(f"path={path} format=T4DF dtype={dtype.name} rank={len(shape)} "
                      f"shape={'x'.join(map(str, shape))} bytes={path.stat().st_size}")
                return
            if magic == CKPT_MAGIC:
                h = read_checkpoint_header(f)
                spec = h["spec"]
                print(f"path={path} format=checkpoint variant={spec['variant']} digest={h['spec_digest']} "
                      f"dtype={h['dtype']} epoch={h['epoch']} step={h['step']} best_epoch={h['best_epoch']} "
                      f"best_metric={h['best_metric']} tensors={len(h['entries'])}")
                print("spec " + " ".join(f"{k}={format_value(tuple(v) if isinstance(v, list) else v)}"
                                         for k, v in spec.items()))
                for name in h["entries"]:
                    dtype, shape = read_header(f)
                    f.seek(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize, 1)
                    print(f"  {name} {dtype.name} {'x'.join(map(str, shape)) or 'scalar'}")
                return
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from None
    except (T4dfError, CheckpointError) as e:
        raise DataError(f"{path}: {e}") from None
    try:
        m = Manifest.read(path)
    except (ValueError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: not a T4DF file, checkpoint or manifest ({e})") from None
    shape = "x".join(map(str, m.shape)) if m.shape else "unknown"
    print(f"path={path} format=manifest records={len(m.entries)} shape={shape} sampling_period={m.sampling_period}")
    for split, (c0, c1) in m.counts().items():
        print(f"  split={split} controls={c0} asd={c1}")


def cmd_inspect(args) -> int:
    for p in args.paths:
        _inspect_one(Path(p))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "bench": cmd_bench, "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, CheckpointError) as e:
        print(f"fmri4d {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"fmri4d {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFailure as e:
        print(f"fmri4d {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        # invalid settings rejected by ModelSpec/TrainConfig/SynthConfig and friends
        print(f"fmri4d {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
