"""Command-line entry point: ``fiberm2 <command> [options]``.

Exit codes: 0 success, 2 usage error, 3 data or integrity error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .beam_quality import NumericalError, m2_direct, m2_vcm
from .dataset import (
    SPLITS,
    DatasetError,
    LabelRangeError,
    PatternGenerator,
    generate_dataset,
    load_arrays,
    scaling_constant,
)
from .fiber_modes import DEFAULT_FIBER, FiberSpec, ModeSolveError, solve_modes
from .field_synthesis import CASES, STREAM_TEST, superpose
from .pgm import read_pgm, write_pgm
from .regressor import (
    NonFiniteError,
    TrainingDivergedError,
    evaluate,
    load_checkpoint,
    predict_m2,
    save_checkpoint,
    train,
)
from .regressor.training import PE_THRESHOLDS

log = logging.getLogger("fiberm2")

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    pass


def parse_range(text: str) -> list[float]:
    """``"start:stop:step"`` (inclusive) or a comma list of floats."""
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            n = int(round((stop - start) / step)) + 1
            return [round(start + i * step, 12) for i in range(n)]
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid range {text!r}, expected start:stop:step")


def _fiber_args(p):
    p.add_argument("--core-um", type=float, default=2 * DEFAULT_FIBER.core_radius,
                   help="core diameter in micrometres (default 25)")
    p.add_argument("--na", type=float, default=DEFAULT_FIBER.numerical_aperture)
    p.add_argument("--wavelength-nm", type=float, default=DEFAULT_FIBER.wavelength * 1000)


def _spec(args) -> FiberSpec:
    try:
        return FiberSpec.from_diameter(args.core_um, args.na, args.wavelength_nm / 1000.0)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _case_arg(p, required=True):
    p.add_argument("--case", type=int, choices=CASES, required=required,
                   help="number of guided modes in the superposition")


def _write_run_config(out_dir: Path, args):
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg["version"] = __version__
    (out_dir / "run_config.json").write_text(json.dumps(cfg, indent=2, default=str),
                                             encoding="utf-8")


def _check_case_modes(spec: FiberSpec, case: int):
    n = len(solve_modes(spec))
    if case > n:
        raise UsageError(f"fiber with V={spec.v:.3f} guides only {n} modes; --case {case}")


def cmd_modes(args):
    spec = _spec(args)
    modes = solve_modes(spec)
    if args.json:
        print(json.dumps({"v_number": spec.v, "modes": [m.to_dict() for m in modes]}, indent=2))
        return 0
    print(f"V = {spec.v:.4f}, {len(modes)} modes")
    print(f"{'mode':<7}{'l':>3}{'m':>3}  {'parity':<6}{'u':>16}{'w':>16}")
    for m in modes:
        print(f"{m.name:<7}{m.l:>3}{m.m:>3}  {m.parity:<6}{m.u:>16.10f}{m.w:>16.10f}")
    return 0


def _sample(args, spec):
    gen = PatternGenerator(args.case, spec, resolution=args.res)
    stream = SPLITS[args.split]
    mv = gen.modal_vectors(args.seed, stream, 0, [args.index])[0]
    return gen, mv


def cmd_synth(args):
    spec = _spec(args)
    _check_case_modes(spec, args.case)
    gen, mv = _sample(args, spec)
    rngs = None
    if args.noise > 0:
        from .field_synthesis import STREAM_NOISE, derive_rng
        rngs = [derive_rng(args.seed, STREAM_NOISE, SPLITS[args.split], 0, args.index)]
    img = gen.images(mv.coefficients[None], args.noise, rngs)[0]
    label = gen.labels(mv.coefficients[None])[0]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(out, img)
    sidecar = {
        "case": args.case, "seed": args.seed, "index": args.index, "split": args.split,
        "noise_sigma": args.noise, "resolution": args.res,
        "grid_half_width": gen.image_grid.half_width,
        "fiber": {"core_radius": spec.core_radius, "numerical_aperture": spec.numerical_aperture,
                  "wavelength": spec.wavelength},
        "modes": [m.name for m in solve_modes(spec)[:args.case]],
        "rho": mv.rho.tolist(), "theta": mv.theta.tolist(),
        "m2_direct": {"m2_x": float(label[0]), "m2_y": float(label[1]),
                      "m2_eff": float(np.sqrt(label[0] * label[1]))},
    }
    out.with_suffix(".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    if args.json:
        print(json.dumps(sidecar, indent=2))
    return 0


def _sweep(args):
    if not (args.model and args.testset):
        raise UsageError("--sweep-noise needs --model and --testset")
    state = load_checkpoint(args.model)
    ds = load_arrays(args.testset)
    rows = evaluate(state.model, ds.images, ds.labels, args.sweep_noise, seed=args.seed)
    fh = open(args.csv, "w", newline="", encoding="utf-8") if args.csv else nullcontext(sys.stdout)
    with fh as stream:
        w = csv.writer(stream)
        w.writerow(["sigma", "mean_pe"])
        for r in rows:
            w.writerow([f"{r['sigma']:.6g}", f"{r['mean_pe']:.8g}"])
    return 0


def cmd_m2(args):
    if args.sweep_noise is not None:
        return _sweep(args)
    if args.case is None:
        raise UsageError("m2 needs --case")
    spec = _spec(args)
    _check_case_modes(spec, args.case)
    gen, mv = _sample(args, spec)
    field = superpose(gen.label_modes, mv, gen.label_grid)
    results = {}
    if args.method in ("direct", "both"):
        results["direct"] = m2_direct(field).to_dict()
    if args.method in ("vcm", "both"):
        r = m2_vcm(field, spec.wavelength)
        results["vcm"] = r.to_dict()
    if "direct" in results and "vcm" in results:
        d, v = results["direct"], results["vcm"]
        results["relative_difference"] = max(abs(d[k] - v[k]) / v[k] for k in ("m2_x", "m2_y"))
    payload = {"case": args.case, "seed": args.seed, "index": args.index,
               "rho": mv.rho.tolist(), "theta": mv.theta.tolist(), **results}
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        for name in ("direct", "vcm"):
            if name in results:
                r = results[name]
                print(f"{name:<7} M2_x={r['m2_x']:.6f} M2_y={r['m2_y']:.6f} "
                      f"M2_eff={r['m2_eff']:.6f}")
    return 0


def cmd_gen(args):
    spec = _spec(args)
    _check_case_modes(spec, args.case)
    out = Path(args.out)
    manifest = generate_dataset(
        args.case, args.count, args.seed, out, resolution=args.res, noise_sigma=args.noise,
        spec=spec, split=args.split,
        label_overflow="warn" if args.allow_label_overflow else "raise",
    )
    _write_run_config(out, args)
    if args.json:
        print(manifest.to_json())
    else:
        print(f"wrote {manifest.count} samples to {out}")
    return 0


def _held_out(args, res):
    if args.testset:
        ds = load_arrays(args.testset)
        if ds.manifest.case_id != args.case or ds.manifest.split != "test":
            raise UsageError("--testset must be a 'test' split of the same case")
        return ds.images, ds.labels
    gen = PatternGenerator(args.case, resolution=res)
    imgs, labels, _ = gen.batch(args.eval_seed, STREAM_TEST, 0, range(args.eval_count),
                                label_overflow="warn")
    return imgs, labels


def cmd_train(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_run_config(out, args)
    eval_set = _held_out(args, args.res)

    def checkpoint(state):
        save_checkpoint(state, out)

    state = train(args.case, args.epochs, args.seed, eval_set=eval_set, resolution=args.res,
                  samples_per_epoch=args.samples_per_epoch, batch_size=args.batch_size,
                  momentum=args.momentum, callback=checkpoint,
                  label_overflow="warn" if args.allow_label_overflow else "raise")
    save_checkpoint(state, out)
    _write_history(out / "history.csv", state.history)
    last = state.history[-1]
    if args.json:
        print(json.dumps({"epochs": state.epoch, "final_loss": last["train_loss"],
                          "final_mean_pe": last.get("mean_pe")}, indent=2))
    else:
        print(f"trained {state.epoch} epochs, loss {last['train_loss']:.6g}, "
              f"mean PE {last.get('mean_pe', float('nan')):.4%}")
    return 0


def _write_history(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "learning_rate", "mean_pe"])
        for h in history:
            w.writerow([h["epoch"], f"{h['train_loss']:.10g}", h["learning_rate"],
                        f"{h.get('mean_pe', float('nan')):.8g}"])


def cmd_predict(args):
    state = load_checkpoint(args.model)
    try:
        image = read_pgm(args.image)
    except FileNotFoundError as exc:
        raise DatasetError(f"no image at {args.image}") from exc
    result = predict_m2(state.model, image)
    if args.json:
        print(json.dumps(result.to_dict(), indent=2))
    else:
        print(f"M2_x={result.m2_x:.6f} M2_y={result.m2_y:.6f} M2_eff={result.m2_eff:.6f} "
              f"({result.elapsed * 1000:.2f} ms)")
    return 0


def cmd_eval(args):
    state = load_checkpoint(args.model)
    ds = load_arrays(args.testset)
    rows = evaluate(state.model, ds.images, ds.labels, args.noise, seed=args.seed)
    header = ["sigma", "mean_pe", "median_pe", "p95_pe"] + [f"pe_lt_{t}pct" for t in PE_THRESHOLDS]
    fh = open(args.csv, "w", newline="", encoding="utf-8") if args.csv else nullcontext(sys.stdout)
    with fh as stream:
        w = csv.writer(stream)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{r['sigma']:.6g}", f"{r['mean_pe']:.8g}", f"{r['median_pe']:.8g}",
                        f"{r['p95_pe']:.8g}"] + [f"{r['cumulative'][t]:.4f}" for t in PE_THRESHOLDS])
    return 0


def cmd_report(args):
    state = load_checkpoint(args.model)
    if not state.history:
        raise DatasetError("checkpoint has no training history")
    ds = load_arrays(args.testset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_run_config(out, args)
    _write_history(out / "pe_vs_epoch.csv", state.history)

    row = evaluate(state.model, ds.images, ds.labels, (0.0,), seed=args.seed)[0]
    with open(out / "pe_distribution.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["pe_threshold_pct", "percent_samples_below"])
        for t in PE_THRESHOLDS:
            w.writerow([t, f"{row['cumulative'][t]:.4f}"])

    n = min(args.samples, len(ds))
    label_eff = ds.m2_eff[:n]
    pred = row["pred"][:n]
    pred_eff = np.sqrt(pred[:, 0] * pred[:, 1])
    order = np.argsort(label_eff, kind="stable")
    with open(out / "label_vs_prediction.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "sample_index", "label_m2_eff", "predicted_m2_eff"])
        for rank, i in enumerate(order):
            w.writerow([rank, int(i), f"{label_eff[i]:.8g}", f"{pred_eff[i]:.8g}"])
    if not args.json:
        print(f"wrote report to {out}")
    else:
        print(json.dumps({"out": str(out), "mean_pe": row["mean_pe"]}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fiberm2", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread limit; 1 gives the deterministic path")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser("modes", help="solve the LP modes of a step-index fiber")
    _fiber_args(p)
    common(p)
    p.set_defaults(func=cmd_modes)

    p = sub.add_parser("synth", help="render one beam pattern as a 16-bit PGM")
    _case_arg(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--split", choices=sorted(SPLITS), default="train")
    p.add_argument("--out", required=True)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--res", type=int, default=128)
    _fiber_args(p)
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("m2", help="direct and virtual-caustic M^2 of one pattern")
    _case_arg(p, required=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--split", choices=sorted(SPLITS), default="train")
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--method", choices=("direct", "vcm", "both"), default="both")
    p.add_argument("--sweep-noise", type=parse_range, default=None,
                   help="start:stop:step noise levels; emits sigma,mean_pe CSV")
    p.add_argument("--model")
    p.add_argument("--testset")
    p.add_argument("--csv")
    _fiber_args(p)
    common(p)
    p.set_defaults(func=cmd_m2)

    p = sub.add_parser("gen", help="generate a labelled dataset")
    _case_arg(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--split", choices=sorted(SPLITS), default="train")
    p.add_argument("--allow-label-overflow", action="store_true",
                   help="warn instead of failing when effective M^2 exceeds the case constant")
    _fiber_args(p)
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the CNN on online-generated samples")
    _case_arg(p)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--samples-per-epoch", type=int, default=10000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--testset", help="held-out dataset directory (split 'test')")
    p.add_argument("--eval-count", type=int, default=1000)
    p.add_argument("--eval-seed", type=int, default=1000)
    p.add_argument("--allow-label-overflow", action="store_true")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict M^2 for one PGM image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="prediction error versus noise level")
    p.add_argument("--model", required=True)
    p.add_argument("--testset", required=True)
    p.add_argument("--noise", type=parse_range, default=[0.0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="PE-vs-epoch, PE distribution and sorted prediction CSVs")
    p.add_argument("--model", required=True)
    p.add_argument("--testset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limits = threadpool_limits(args.threads)
    else:
        limits = nullcontext()
    try:
        with limits:
            return args.func(args)
    except UsageError as exc:
        print(f"fiberm2 {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, FileNotFoundError) as exc:
        print(f"fiberm2 {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, ModeSolveError, TrainingDivergedError, NonFiniteError,
            LabelRangeError) as exc:
        print(f"fiberm2 {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"fiberm2 {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
