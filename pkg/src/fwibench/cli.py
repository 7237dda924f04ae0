"""Command-line entry point: ``fwibench <command> ...``.

Exit status is 0 on success, 2 for configuration or input errors and 3 for
numerical failures (unstable propagation, diverged training).
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataset, formats, fwi
from .velmodel import GenConfig, GenerationError
from .wavesim import Acquisition, Grid2D, InstabilityError, VelocityModel, ricker

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
TIMING_NAME = "timing.txt"
PRESENTATION_SCALE = 1e-2


class CommandError(Exception):
    pass


def sample_file(index: int) -> str:
    return f"sample_{index:05d}.vel"


# gen-data

def default_splits(n: int) -> tuple[int, int, int]:
    k = max(1, min(64, n // 5))
    if n - 2 * k < 1:
        raise CommandError(f"--n {n} is too small for train/val/test splits")
    return n - 2 * k, k, k


def cmd_gen_data(args) -> int:
    cfg = GenConfig.for_family(args.family, rng_seed=args.seed)
    splits = tuple(formats.parse_ints(args.splits)) if args.splits else default_splits(args.n)
    if len(splits) != 3:
        raise CommandError("--splits takes three comma-separated counts")
    dataset.build_dataset(cfg, args.n, splits, args.out)
    print(Path(args.out) / dataset.MANIFEST_NAME)
    return 0


# invert-physics

def load_true_model(spec: str) -> tuple[VelocityModel, str]:
    """A VEL1 file, or ``DATASET_DIR:SPLIT:POSITION`` naming a stored label."""
    path = Path(spec)
    if path.is_file():
        return formats.read_velocity(path), path.stem
    parts = spec.rsplit(":", 2)
    if len(parts) != 3:
        raise CommandError(f"--data {spec!r} is neither a velocity file nor DIR:SPLIT:POSITION")
    root, split, pos = parts
    manifest = dataset.load_manifest(root)
    if split not in manifest.splits:
        raise CommandError(f"unknown split {split!r}")
    sample = dataset.load_batch(manifest, split, [int(pos)])[0]
    v = manifest.normalization.velocity(sample.label)
    return VelocityModel(Grid2D(*v.shape), v), f"sample_{sample.index:05d}"


def initial_model(spec: str, truth: VelocityModel, sigma: float, bounds) -> VelocityModel:
    if spec == "smooth":
        m0 = fwi.smooth_model(truth, sigma)
    elif spec.startswith("constant:"):
        try:
            value = float(spec.split(":", 1)[1])
        except ValueError:
            raise CommandError(f"bad constant in --init {spec!r}") from None
        m0 = truth.with_values(np.full(truth.grid.shape, value))
    else:
        raise CommandError(f"--init must be 'smooth' or 'constant:V', got {spec!r}")
    if m0.v.min() < bounds[0] or m0.v.max() > bounds[1]:
        raise CommandError(f"initial model leaves the velocity bounds {bounds}")
    return m0


def cmd_invert(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth, name = load_true_model(args.data)
    bounds = (args.vmin, args.vmax)
    acq = Acquisition.surface(truth.grid, args.receivers, args.n_time, args.dt_out)
    wavelet = ricker(args.freq, 1.2 / args.freq, 1e-4, int(round((args.n_time * args.dt_out + 0.1) / 1e-4)))
    base = fwi.InversionConfig(max_iters=args.iters, regularizer=args.reg, tv_epsilon=args.tv_epsilon,
                               precondition=not args.no_precondition, v_bounds=bounds,
                               max_update=args.max_update)
    m0 = initial_model(args.init, truth, args.sigma, bounds)
    observed = fwi.simulate_observed(truth, acq, wavelet, base)
    lam = args.reg_weight
    if lam is None:
        data0 = fwi.data_misfit(m0, observed, acq, wavelet, base)
        lam = fwi.balance_lambda(data0, fwi.regularization(m0.v, base), args.reg_ratio)
    cfg = replace(base, lambda_reg=lam)

    snaps = out / f"{name}.snapshots"

    def snapshot(k, m):
        if args.snapshot_every and k % args.snapshot_every == 0:
            snaps.mkdir(exist_ok=True)
            formats.write_velocity(snaps / f"iter_{k:04d}.vel", m)

    t0 = time.perf_counter()
    model, state = fwi.invert(observed, acq, wavelet, m0, cfg, truth=truth, snapshot=snapshot,
                              log=None if args.quiet else print)
    elapsed = time.perf_counter() - t0
    # outputs are keyed by sample name so one directory can hold a whole split
    fwi.write_report(out / f"{name}.report.csv", state.report)
    formats.write_velocity(out / f"{name}.initial.vel", m0)
    formats.write_velocity(out / f"{name}.vel", model)
    summary = dict(source=args.data, iterations=len(state.report) - 1, stagnated=state.stagnated,
                   lambda_reg=lam, initial_mae=state.report[0]["mae"], final_mae=state.report[-1]["mae"],
                   seconds=elapsed)
    (out / f"{name}.summary.txt").write_text(formats.dump_kv(summary, "physics inversion"))
    print(out / f"{name}.vel")
    return 0


# train / infer

def cmd_train(args) -> int:
    from . import gan
    hyper = gan.GanHyper.from_text(Path(args.config).read_text()) if args.config else gan.GanHyper.desk()
    overrides = {k: v for k, v in dict(epochs=args.epochs, batch=args.batch, lambda_mae=args.lambda_mae,
                                        lambda_mse=args.lambda_mse, lambda_gp=args.lambda_gp,
                                        critic_steps=args.critic_steps, seed=args.seed, lr=args.lr,
                                        warm_epochs=args.warm_epochs, decay_epochs=args.decay_epochs,
                                        width=args.width).items() if v is not None}
    if args.no_adversarial:
        overrides["adversarial"] = False
    if args.no_disc_batchnorm:
        overrides["disc_batchnorm"] = False
    hyper = replace(hyper, **overrides)
    manifest = dataset.load_manifest(args.data)
    final, _ = gan.train(manifest, hyper, args.out, log=None if args.quiet else print)
    print(final)
    return 0


def write_timing(path, times_ms: list[float]) -> None:
    path.write_text(formats.dump_kv(dict(samples=len(times_ms), mean_ms=float(np.mean(times_ms)),
                                         max_ms=float(np.max(times_ms))), "per-sample inference time"))


def read_timing(directory: Path) -> float | None:
    """Mean ms per sample from ``timing.txt``, else from inversion summaries."""
    path = directory / TIMING_NAME
    if path.is_file():
        return float(formats.parse_kv(path.read_text())["mean_ms"])
    seconds = [float(formats.parse_kv(p.read_text())["seconds"])
               for p in sorted(directory.glob("*.summary.txt"))]
    return 1e3 * float(np.mean(seconds)) if seconds else None


def cmd_infer(args) -> int:
    from . import gan
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = gan.Inference(args.checkpoint)
    inputs = []
    if args.data:
        manifest = dataset.load_manifest(args.data)
        positions = range(len(manifest.splits[args.split]))
        for s in dataset.load_batch(manifest, args.split, positions):
            inputs.append((sample_file(s.index), s.seismic))
    for path in args.seismic or []:
        inputs.append((Path(path).stem + ".vel", formats.read_seismic(path)))
    if not inputs:
        raise CommandError("nothing to infer: give --data or --seismic")
    times = []
    for name, seismic in inputs:
        # time the network call only; file IO is excluded
        t0 = time.perf_counter()
        v = model(seismic)[0]
        times.append(1e3 * (time.perf_counter() - t0))
        formats.write_velocity(out / name, v)
    write_timing(out / TIMING_NAME, times)
    print(f"{len(inputs)} models written to {out}; mean {np.mean(times):.1f} ms per sample")
    return 0


# eval

def parse_methods(items: list[str]) -> list[tuple[str, str]]:
    methods = []
    for item in items:
        name, sep, where = item.partition("=")
        if not sep or not name or not where:
            raise CommandError(f"--method takes NAME=DIR (or NAME=truth), got {item!r}")
        methods.append((name, where))
    names = [n for n, _ in methods]
    if len(set(names)) != len(names):
        raise CommandError("method names must be unique")
    return methods


def parse_profiles(items: list[str]) -> list[int]:
    cols = []
    for item in items:
        key, sep, value = item.partition("=")
        if key != "x" or not sep:
            raise CommandError(f"--profile takes x=COL, got {item!r}")
        cols.append(int(value))
    return cols


def per_sample_metrics(pred: np.ndarray, label: np.ndarray) -> tuple[float, float]:
    d = pred.astype(np.float64) - label.astype(np.float64)
    return float(np.mean(np.abs(d))), float(np.mean(d ** 2))


def presentation(value: float) -> str:
    """Metric on the 1e-2 scale used in the report tables."""
    return f"{value / PRESENTATION_SCALE:.2f}"


def method_predictions(where: str, samples, norm) -> list[np.ndarray]:
    if where == "truth":
        return [s.label for s in samples]
    directory = Path(where)
    preds = []
    for s in samples:
        path = directory / sample_file(s.index)
        if not path.is_file():
            raise CommandError(f"{path} is missing")
        v = formats.read_velocity(path).v
        if v.shape != s.label.shape:
            raise CommandError(f"{path}: shape {v.shape} does not match label {s.label.shape}")
        preds.append(norm.label(v))
    return preds


def evaluate_methods(manifest, split: str, methods):
    samples = dataset.load_batch(manifest, split, range(len(manifest.splits[split])))
    norm = manifest.normalization
    results = {}
    for name, where in methods:
        preds = method_predictions(where, samples, norm)
        rows = [per_sample_metrics(p, s.label) for p, s in zip(preds, samples)]
        timing = None if where == "truth" else read_timing(Path(where))
        results[name] = dict(per_sample=rows, preds=preds,
                             mae=float(np.mean([r[0] for r in rows])),
                             mse=float(np.mean([r[1] for r in rows])), ms=timing)
    return samples, results


def format_table(results: dict) -> str:
    width = max([len("method")] + [len(n) for n in results])
    lines = [f"{'method':<{width}}  {'MAE(1e-2)':>9}  {'MSE(1e-2)':>9}  {'ms/sample':>9}"]
    for name, r in results.items():
        ms = "-" if r["ms"] is None else f"{r['ms']:.1f}"
        lines.append(f"{name:<{width}}  {presentation(r['mae']):>9}  {presentation(r['mse']):>9}  {ms:>9}")
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = dataset.load_manifest(args.data)
    if args.split not in manifest.splits:
        raise CommandError(f"unknown split {args.split!r}")
    methods = parse_methods(args.method)
    profiles = parse_profiles(args.profile or [])
    samples, results = evaluate_methods(manifest, args.split, methods)
    table = format_table(results)
    (out / "report.txt").write_text(table)
    with open(out / "per_sample.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index"] + [f"{n}_{m}" for n in results for m in ("mae", "mse")])
        for i, s in enumerate(samples):
            w.writerow([s.index] + [repr(r["per_sample"][i][k]) for r in results.values() for k in (0, 1)])

    if profiles:
        if not 0 <= args.profile_sample < len(samples):
            raise CommandError(f"--profile-sample outside split of size {len(samples)}")
        s = samples[args.profile_sample]
        nz, nx = s.label.shape
        dx = 5.0
        for col in profiles:
            if not 0 <= col < nx:
                raise CommandError(f"profile column {col} outside 0..{nx - 1}")
            with open(out / f"profile_x{col}.csv", "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(["depth_m"] + [f"v_{n}" for n in results])
                for row in range(nz):
                    vals = [manifest.normalization.velocity(r["preds"][args.profile_sample][row, col])
                            for r in results.values()]
                    w.writerow([repr(row * dx)] + [repr(float(v)) for v in vals])
    sys.stdout.write(table)
    return 0


# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fwibench", description="Seismic velocity inversion workbench.")
    p.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--family", choices=["st", "curved"], required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--splits", help="train,val,test counts (default: 20%% each for val/test, at most 64)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    i = sub.add_parser("invert-physics", help="adjoint-state inversion of one model")
    i.add_argument("--data", required=True, help="VEL1 file or DATASET_DIR:SPLIT:POSITION")
    i.add_argument("--init", default="smooth", help="'smooth' or 'constant:V'")
    i.add_argument("--reg", choices=list(fwi.REGULARIZERS), default="tv")
    i.add_argument("--iters", type=int, default=30)
    i.add_argument("--out", required=True)
    i.add_argument("--sigma", type=float, default=8.0, help="blur of the smooth start, in cells")
    i.add_argument("--freq", type=float, default=8.0, help="Ricker peak frequency in Hz")
    i.add_argument("--n-time", type=int, default=500)
    i.add_argument("--dt-out", type=float, default=1e-3)
    i.add_argument("--receivers", type=int, default=32)
    i.add_argument("--reg-weight", type=float, default=None, help="absolute penalty weight")
    i.add_argument("--reg-ratio", type=float, default=0.01,
                   help="penalty as a fraction of the starting data misfit (used when --reg-weight is absent)")
    i.add_argument("--tv-epsilon", type=float, default=1.0)
    i.add_argument("--max-update", type=float, default=100.0)
    i.add_argument("--vmin", type=float, default=1500.0)
    i.add_argument("--vmax", type=float, default=4500.0)
    i.add_argument("--no-precondition", action="store_true")
    i.add_argument("--snapshot-every", type=int, default=0)
    i.set_defaults(func=cmd_invert)

    t = sub.add_parser("train", help="train the generator/critic pair")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key = value file of training settings")
    for name, kind in (("epochs", int), ("batch", int), ("lambda-mae", float), ("lambda-mse", float),
                       ("lambda-gp", float), ("critic-steps", int), ("seed", int), ("lr", float),
                       ("warm-epochs", int), ("decay-epochs", int), ("width", float)):
        t.add_argument(f"--{name}", type=kind, default=None)
    t.add_argument("--no-adversarial", action="store_true", help="content loss only")
    t.add_argument("--no-disc-batchnorm", action="store_true")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("infer", help="predict velocity models with a trained generator")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--data", help="dataset directory")
    f.add_argument("--split", default="test")
    f.add_argument("--seismic", nargs="*", help="FWI1 seismic tensor files")
    f.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="metric table and profiles for predicted models")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--method", action="append", required=True, help="NAME=DIR or NAME=truth")
    e.add_argument("--profile", action="append", help="x=COL vertical profile export")
    e.add_argument("--profile-sample", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)
    return p


CONFIG_ERRORS = (CommandError, GenerationError, fwi.InversionError, formats.FormatError,
                 FileNotFoundError, IsADirectoryError, KeyError, IndexError, ValueError)
NUMERIC_ERRORS = (InstabilityError, dataset.SampleError, FloatingPointError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        from .gan import ConfigError, TrainingDiverged
        if isinstance(exc, TrainingDiverged):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(exc, CONFIG_ERRORS + (ConfigError,)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        raise


if __name__ == "__main__":
    sys.exit(main())
