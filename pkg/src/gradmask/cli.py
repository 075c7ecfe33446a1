"""Command-line entry point: ``gradmask <command> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence or failed trials.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as D
from .errors import DivergenceError, FormatError, GradMaskError, ValidationError
from .loss import PenaltyConfig, contrast_saliency, outside_mask, saliency_per_class
from .metrics import best_by_valid, summarize_runs
from .model import ModelConfig, load_checkpoint
from .trainer import SweepConfig, TrainConfig, read_runs, record_trial, sweep, train

log = logging.getLogger("gradmask")

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4
VARIANT_LABELS = {"none": "-None-", "perclass": "PerClass", "contrast": "Contrast"}
REPORT_COLUMNS = ["variant", "test_auc_mean", "test_auc_sd", "n_samples", "n_trials"]


class ConfigError(GradMaskError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="base seed for every random choice")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--threads", type=int, default=1, help="parallel trial workers")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _data_flags(p):
    g = p.add_argument_group("synthetic data")
    g.add_argument("--data", type=Path, help="read this dataset directory instead of generating")
    g.add_argument("--n-train", type=int, default=128)
    g.add_argument("--n-valid", type=int, default=128)
    g.add_argument("--n-test", type=int, default=512)
    g.add_argument("--rho-train", type=float, default=0.95)
    g.add_argument("--rho-test", type=float, default=0.5)
    g.add_argument("--lesion-intensity", type=float, default=0.35)
    g.add_argument("--size", type=int, default=32, help="image height and width")


def _model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--filters", default="8,16", help="comma-separated conv block widths")
    g.add_argument("--hidden", type=int, default=32)
    g.add_argument("--activation", choices=("relu", "softplus"), default="relu")


def _train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=60)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--patience", type=int, default=10)
    g.add_argument("--norm", choices=("l2", "l2_squared"), default="l2_squared")
    g.add_argument("--target", choices=("logits", "probabilities"), default="logits")
    g.add_argument("--healthy-policy", choices=("penalize_all", "skip"), default="penalize_all")


def _sweep_flags(p):
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--lam-range", type=float, nargs=2, default=(1e-3, 1e1), metavar=("LO", "HI"))
    p.add_argument("--lr-range", type=float, nargs=2, default=(1e-4, 1e-2), metavar=("LO", "HI"))


def build_parser():
    common = _common()
    parser = _Parser(prog="gradmask", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    _data_flags(p)

    p = sub.add_parser("train", parents=[common], help="train one model")
    for add in (_data_flags, _model_flags, _train_flags):
        add(p)
    p.add_argument("--variant", choices=tuple(VARIANT_LABELS), default="contrast")
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=1e-3)

    p = sub.add_parser("sweep", parents=[common], help="random-search trials for one variant")
    for add in (_data_flags, _model_flags, _train_flags, _sweep_flags):
        add(p)
    p.add_argument("--variant", choices=tuple(VARIANT_LABELS), default="contrast")

    p = sub.add_parser("experiment", parents=[common], help="sweep several variants and write a report")
    for add in (_data_flags, _model_flags, _train_flags, _sweep_flags):
        add(p)
    p.add_argument("--variants", default="none,contrast")

    p = sub.add_parser("saliency", parents=[common], help="export saliency overlays as PGM images")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=D.SPLITS, default="test")
    p.add_argument("--index", type=int, default=0, help="sample index within the split")
    p.add_argument("--variant", choices=("perclass", "contrast"), default="contrast")
    p.add_argument("--target", choices=("logits", "probabilities"), default="logits")

    p = sub.add_parser("report", parents=[common], help="rebuild report files from runs.jsonl")
    p.add_argument("--runs", type=Path, help="defaults to OUT/runs.jsonl")
    return parser


# --- config assembly --------------------------------------------------------

def _dtype(args):
    return "float32" if args.dtype == "f32" else "float64"


def synth_config(args):
    return D.SynthConfig(
        height=args.size, width=args.size,
        n_train=args.n_train, n_valid=args.n_valid, n_test=args.n_test,
        rho_train=args.rho_train, rho_test=args.rho_test,
        lesion_intensity=args.lesion_intensity, seed=args.seed, dtype=_dtype(args),
    )


def model_config(args, input_shape):
    try:
        filters = tuple(int(f) for f in args.filters.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad --filters {args.filters!r}") from exc
    return ModelConfig(input_shape=input_shape, conv_filters=filters, hidden=args.hidden,
                       activation=args.activation, seed=args.seed, dtype=_dtype(args))


def train_config(args, variant, lam=1.0, lr=1e-3):
    penalty = PenaltyConfig(variant=variant, lam=lam, norm=args.norm, saliency_target=args.target,
                            healthy_policy=args.healthy_policy)
    return TrainConfig(epochs_max=args.epochs, batch_size=args.batch_size, lr=lr, patience=args.patience,
                       penalty=penalty, seed=args.seed)


def sweep_config(args):
    return SweepConfig(n_trials=args.trials, lam_range=tuple(args.lam_range), lr_range=tuple(args.lr_range),
                       base_seed=args.seed)


def _dataset_or_config(args):
    """(fixed dataset or None, SynthConfig, input shape)."""
    if args.data is not None:
        ds = D.read_dataset(args.data)
        return ds, ds.config, (1, ds.config.height, ds.config.width)
    cfg = synth_config(args)
    return None, cfg, (1, cfg.height, cfg.width)


def _fresh_runs(out):
    out.mkdir(parents=True, exist_ok=True)
    runs = out / "runs.jsonl"
    if runs.exists():
        runs.unlink()
    return runs


# --- commands ----------------------------------------------------------------

def cmd_generate(args):
    cfg = synth_config(args)
    ds = D.generate(cfg)
    D.write_dataset(args.out, ds)
    rows, cols = ds.patch_slices()
    print(f"wrote {args.out}: train={len(ds.train)} valid={len(ds.valid)} test={len(ds.test)}")
    print(f"rho_train={cfg.rho_train} rho_test={cfg.rho_test} (valid split uses rho_train)")
    print(f"confounder patch: rows {rows.start}-{rows.stop - 1}, cols {cols.start}-{cols.stop - 1}")
    return 0


def cmd_train(args):
    fixed, dcfg, shape = _dataset_or_config(args)
    ds = fixed if fixed is not None else D.generate(dcfg)
    mcfg = model_config(args, shape)
    result, model = train(mcfg, ds, train_config(args, args.variant, args.lam, args.lr))
    _fresh_runs(args.out)
    record_trial(args.out, result, model.state(), mcfg)
    print(f"{VARIANT_LABELS[result.variant]}: best valid AUC {result.best_valid_auc:.4f} (epoch {result.best_epoch}), "
          f"test AUC {result.test_auc:.4f}, train AUC {result.train_auc:.4f}")
    return 0


def _run_sweep(args, variant, fixed, dcfg, shape):
    return sweep(model_config(args, shape), dcfg, sweep_config(args), variant,
                 train_config(args, variant), threads=args.threads, out_dir=args.out, dataset=fixed)


def cmd_sweep(args):
    fixed, dcfg, shape = _dataset_or_config(args)
    _fresh_runs(args.out)
    results = _run_sweep(args, args.variant, fixed, dcfg, shape)
    write_report(args.out, results)
    return 0 if all(r.status == "ok" for r in results) else EXIT_DIVERGED


def cmd_experiment(args):
    variants = [v.strip().lower() for v in args.variants.split(",") if v.strip()]
    if not variants or any(v not in VARIANT_LABELS for v in variants):
        raise ConfigError(f"--variants must list some of {sorted(VARIANT_LABELS)}")
    fixed, dcfg, shape = _dataset_or_config(args)
    _fresh_runs(args.out)
    results = []
    for variant in variants:
        log.info("sweeping %s over %d trials", variant, args.trials)
        try:
            results += _run_sweep(args, variant, fixed, dcfg, shape)
        finally:
            if results:
                write_report(args.out, results)
    print(render_table(results), end="")
    return 0 if all(r.status == "ok" for r in results) else EXIT_DIVERGED


def cmd_report(args):
    runs = args.runs or args.out / "runs.jsonl"
    if not runs.exists():
        raise FileNotFoundError(runs)
    results = read_runs(runs)
    write_report(args.out, results)
    print(render_table(results), end="")
    return 0


def cmd_saliency(args):
    model, _ = load_checkpoint(args.checkpoint)
    ds = D.read_dataset(args.data)
    split = ds.split(args.split)
    if not 0 <= args.index < len(split):
        raise ConfigError(f"--index {args.index} outside {args.split} split of {len(split)} samples")
    sample = split[args.index]
    paths = export_saliency(model, sample, args.variant, args.target, args.out)
    for p in paths:
        print(p)
    return 0


# --- reports -----------------------------------------------------------------

def report_rows(results):
    rows = []
    for variant in dict.fromkeys(r.variant for r in results):
        group = [r for r in results if r.variant == variant]
        ok = [r for r in group if r.status == "ok"]
        if len(ok) >= 2:
            s = summarize_runs(ok)
            mean, sd = s["test_auc"]["mean"], s["test_auc"]["sd"]
        elif ok:
            mean, sd = ok[0].test_auc, float("nan")
        else:
            mean = sd = float("nan")
        rows.append({"variant": variant, "test_auc_mean": mean, "test_auc_sd": sd,
                     "n_samples": group[0].n_train, "n_trials": len(ok), "runs": ok})
    return rows


def write_report(out, results):
    rows = report_rows(results)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([r["variant"], repr(r["test_auc_mean"]), repr(r["test_auc_sd"]), r["n_samples"], r["n_trials"]])
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(buf.getvalue())
    (out / "report.txt").write_text(render_table(results))


def render_table(results):
    """Plain-text table: mean ± SD of test AUC per variant, plus the best-valid pick."""
    rows = report_rows(results)
    header = ["GradMask Variant", "Test AUC Mean + SD", "# Samples", "Trials", "Train-Test Gap", "Best-Valid Pick"]
    lines = []
    for r in rows:
        ok = r["runs"]
        gap = f"{np.mean([x.gap for x in ok]):.3f}" if ok else "n/a"
        pick = best_by_valid(ok) if ok else None
        pick_s = f"{pick.test_auc:.3f} (seed {pick.seed})" if pick else "n/a"
        lines.append([VARIANT_LABELS.get(r["variant"], r["variant"]),
                      f"{r['test_auc_mean']:.3f} ± {r['test_auc_sd']:.3f}",
                      str(r["n_samples"]), str(r["n_trials"]), gap, pick_s])
    widths = [max(len(h), *(len(l[i]) for l in lines)) if lines else len(h) for i, h in enumerate(header)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
    out = [fmt.format(*header), rule] + [fmt.format(*l) for l in lines] + [rule]
    return "\n".join(out) + "\n"


# --- saliency overlays -------------------------------------------------------

def write_pgm(path, img):
    """8-bit binary PGM (P5)."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path):
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise FormatError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def _to_byte(v, scale):
    if scale <= 0:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.rint(np.clip(v / scale, 0.0, 1.0) * 255).astype(np.uint8)


def export_saliency(model, sample, variant="contrast", target="logits", out="."):
    """Write input, |saliency| and outside-lesion |saliency| as PGM images.

    Both saliency images share the unmasked map's maximum as their scale, so
    the masked image never exceeds the unmasked one; an all-zero map stays
    black.
    """
    dtype = model.params[0].dtype
    x = ad.lift(sample.x.astype(dtype), requires_grad=True)
    if variant == "perclass":
        s = saliency_per_class(model, x, 1, target)
    else:
        s = contrast_saliency(model, x, target)
    mag = np.abs(s.numpy()).sum(axis=0)
    masked = mag * outside_mask(sample.seg, (1, *mag.shape), np.float64).data[0]
    scale = float(mag.max())
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "input.pgm", out / "saliency.pgm", out / "saliency_masked.pgm"]
    write_pgm(paths[0], _to_byte(sample.x.data[0].astype(np.float64), 1.0))
    write_pgm(paths[1], _to_byte(mag, scale))
    write_pgm(paths[2], _to_byte(masked, scale))
    return paths


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "experiment": cmd_experiment,
    "saliency": cmd_saliency,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        return COMMANDS[args.command](args)
    except (ConfigError, ValidationError) as exc:
        print(f"gradmask: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"gradmask: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, OSError) as exc:
        print(f"gradmask: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
