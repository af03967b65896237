"""Command-line entry point: ``mrfrecon <command> [flags]``.

Exit codes: 0 ok, 1 I/O failure, 2 invalid configuration, 3 schedule digest mismatch.
Every command also accepts ``--config FILE`` holding flat ``key=value`` lines; flags
given on the command line win over the file.
"""
import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .dictionary import (Dictionary, DigestMismatchError, ParamGrid, build_dictionary, default_workers,
                         match_batch)
from .models import MODES, build_model, load_model
from .sequence import (ScheduleConfig, SequenceSchedule, add_complex_noise, generate_schedule, read_schedule,
                       simulate_fingerprints, write_schedule)
from .trainer import (Dataset, TrainConfig, compare_architectures, dataset_from_slices, evaluate_model,
                      format_report, make_synthetic_slices, train, write_history_csv, write_report_csv)

log = logging.getLogger("mrfrecon")

EXIT_IO, EXIT_CONFIG, EXIT_DIGEST = 1, 2, 3
T1_WINDOW_MS = (0.0, 4000.0)
T2_WINDOW_MS = (0.0, 600.0)


class ConfigError(ValueError):
    """Bad user input; reported with exit code 2."""


def _need(args, name):
    val = getattr(args, name)
    if val is None:
        raise ConfigError(f"--{name.replace('_', '-')} is required")
    return val


# -- shared argument groups -------------------------------------------------

def _add_schedule_args(p):
    g = p.add_argument_group("sequence schedule")
    g.add_argument("--schedule", help="read the schedule from this CSV instead of generating one")
    g.add_argument("--n-reps", type=int, default=300)
    g.add_argument("--fa-min", type=float, default=5.0, help="degrees")
    g.add_argument("--fa-max", type=float, default=74.0, help="degrees")
    g.add_argument("--tr-min", type=float, default=12.0, help="ms")
    g.add_argument("--tr-max", type=float, default=15.0, help="ms")
    g.add_argument("--pattern", choices=("sinusoidal", "random"), default="sinusoidal")
    g.add_argument("--schedule-seed", type=int, default=7)
    g.add_argument("--no-inversion", action="store_true", help="skip the initial inversion pulse")
    g.add_argument("--inversion-delay", type=float, default=20.0, help="ms")


def _schedule_from_args(args) -> SequenceSchedule:
    if args.schedule:
        return read_schedule(args.schedule)
    flags = [("--fa-min", "--fa-max", args.fa_min, args.fa_max), ("--tr-min", "--tr-max", args.tr_min, args.tr_max)]
    for lo_flag, hi_flag, lo, hi in flags:
        if lo > hi:
            raise ConfigError(f"{lo_flag} ({lo}) must not exceed {hi_flag} ({hi})")
    if args.n_reps < 1:
        raise ConfigError(f"--n-reps must be >= 1, got {args.n_reps}")
    cfg = ScheduleConfig(n_reps=args.n_reps, fa_min_deg=args.fa_min, fa_max_deg=args.fa_max,
                         tr_min_ms=args.tr_min, tr_max_ms=args.tr_max, pattern=args.pattern,
                         seed=args.schedule_seed, initial_inversion=not args.no_inversion,
                         inversion_delay_ms=args.inversion_delay)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"schedule: {exc}") from exc
    return generate_schedule(cfg)


def _add_phantom_args(p):
    g = p.add_argument_group("synthetic phantoms")
    g.add_argument("--n-slices", type=int, default=8)
    g.add_argument("--height", type=int, default=80)
    g.add_argument("--width", type=int, default=80)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--snr", type=float, default=30.0, help="peak-amplitude SNR; 0 or inf for noise-free")


def _snr(args):
    if args.snr is None or args.snr == 0 or np.isinf(args.snr):
        return None
    if args.snr < 0:
        raise ConfigError(f"--snr must be positive, got {args.snr}")
    return args.snr


def _slices_from_args(args, schedule):
    if args.n_slices < 3:
        raise ConfigError("--n-slices must be >= 3 (train/val/test)")
    if args.height < 16 or args.width < 16:
        raise ConfigError("--height and --width must be >= 16")
    return make_synthetic_slices(args.n_slices, args.height, args.width, schedule, seed=args.seed, snr=_snr(args))


def _add_train_args(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=30)
    g.add_argument("--batch-size", type=int, default=64)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--beta1", type=float, default=0.9)
    g.add_argument("--beta2", type=float, default=0.999)
    g.add_argument("--epsilon", type=float, default=1e-8)
    g.add_argument("--train-seed", type=int, default=0)
    g.add_argument("--precision", choices=("float32", "float64"), default="float32")
    g.add_argument("--lr-schedule", choices=("constant", "cosine"), default="cosine",
                   help="cosine decays the step size to 0 over the run")
    g.add_argument("--preset", choices=("desk", "full"), default="desk")


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, beta1=args.beta1,
                      beta2=args.beta2, epsilon=args.epsilon, seed=args.train_seed, precision=args.precision,
                      lr_schedule=args.lr_schedule)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _load_dataset(args) -> Dataset:
    path = Path(_need(args, "data"))
    if not path.exists():
        raise ConfigError(f"--data: no such file {path}")
    return Dataset.load(path)


def _load_model_arg(args):
    path = Path(_need(args, "weights"))
    if not path.exists():
        raise ConfigError(f"--weights: no such file {path}")
    return load_model(path)


# -- commands ---------------------------------------------------------------

def cmd_gen_dict(args):
    for name in ("t1", "t2", "b1"):
        lo, hi, n = getattr(args, f"{name}_min"), getattr(args, f"{name}_max"), getattr(args, f"{name}_n")
        if n < 1:
            raise ConfigError(f"--{name}-n must be >= 1, got {n}")
        if lo > hi or (n > 1 and lo == hi):
            raise ConfigError(f"--{name}-min ({lo}) must be below --{name}-max ({hi})")
        if lo <= 0 and name != "b1":
            raise ConfigError(f"--{name}-min must be positive")
        if lo < 0:
            raise ConfigError("--b1-min must be non-negative")
    schedule = _schedule_from_args(args)
    grid = ParamGrid.from_ranges(t1=(args.t1_min, args.t1_max, args.t1_n), t2=(args.t2_min, args.t2_max, args.t2_n),
                                 b1=(args.b1_min, args.b1_max, args.b1_n), spacing=args.spacing)
    if len(grid) == 0:
        raise ConfigError("grid has no entries with t2 <= t1; check --t1-*/--t2-* ranges")
    d = build_dictionary(grid, schedule)
    out = Path(_need(args, "out"))
    d.save(out)
    sched_out = Path(args.schedule_out) if args.schedule_out else out.with_suffix(".schedule.csv")
    write_schedule(schedule, sched_out)
    norm_err = float(np.abs(np.linalg.norm(d.entries, axis=1) - 1).max())
    print(f"wrote {len(d)} entries x {d.n_seq} samples to {out} (max |norm - 1| = {norm_err:.2e}); "
          f"schedule in {sched_out}")
    return 0


def cmd_gen_data(args):
    schedule = _schedule_from_args(args)
    ds = dataset_from_slices(_slices_from_args(args, schedule))
    out = Path(_need(args, "out"))
    ds.save(out)
    if args.schedule_out:
        write_schedule(schedule, args.schedule_out)
    counts = {s: int((ds.split == s).sum()) for s in ("train", "val", "test")}
    print(f"wrote {len(ds)} voxels to {out} ({', '.join(f'{k} {v}' for k, v in counts.items())})")
    return 0


def cmd_train(args):
    cfg = _train_config(args)
    ds = _load_dataset(args)
    out = Path(_need(args, "out"))
    model = build_model(args.arch, args.mode, ds.n_seq, preset=args.preset, seed=args.train_seed)
    res = train(model, ds, cfg)
    res.model.save(out)
    hist = Path(args.history) if args.history else out.with_suffix(".history.csv")
    write_history_csv(res.history, hist)
    print(f"{model.label}: best epoch {res.best_epoch}/{cfg.epochs}, "
          f"val loss {res.history[res.best_epoch - 1][2]:.6g}, {res.seconds:.1f} s; weights in {out}")
    return 0


def cmd_eval(args):
    model = _load_model_arg(args)
    ds = _load_dataset(args)
    if ds.n_seq != model.n_seq:
        raise ConfigError(f"model expects {model.n_seq} samples, dataset has {ds.n_seq}")
    print(evaluate_model(model, ds, args.split))
    return 0


def cmd_compare(args):
    cfg = _train_config(args)
    ds = _load_dataset(args)
    rows = compare_architectures(ds, cfg, preset=args.preset)
    print(format_report(rows))
    if args.out:
        write_report_csv(rows, args.out)
    return 0


def _read_fingerprints(path, split=None):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"--fingerprints: no such file {path}")
    if path.suffix == ".npz":
        ds = Dataset.load(path)
        return ds.subset(split)[0] if split else ds.fingerprints
    fps = np.load(path)
    return fps[None] if fps.ndim == 1 else fps


def cmd_match(args):
    dict_path = Path(_need(args, "dict"))
    if not dict_path.exists():
        raise ConfigError(f"--dict: no such file {dict_path}")
    schedule = read_schedule(args.schedule) if args.schedule else None
    d = Dictionary.load(dict_path, schedule)
    fps = _read_fingerprints(_need(args, "fingerprints"), args.split)
    workers = args.workers if args.workers is not None else default_workers()
    if workers < 1:
        raise ConfigError("--workers must be >= 1")
    results = match_batch(fps, d, workers=workers)
    out = Path(_need(args, "out"))
    n_err = 0
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "t1_ms", "t2_ms", "b1", "score"])
        for i, r in enumerate(results):
            if r.params is None:
                n_err += 1
                log.warning("query %d: %s", i, r.error)
                w.writerow([i, "nan", "nan", "nan", "nan"])
            else:
                w.writerow([i, repr(r.params.t1_ms), repr(r.params.t2_ms), repr(r.params.b1), repr(r.score)])
    print(f"matched {len(results) - n_err}/{len(results)} queries against {len(d)} entries -> {out}")
    return 0


def cmd_bench(args):
    sizes = sorted(int(s) for s in args.sizes.split(","))
    if len(sizes) < 1 or sizes[0] < 1:
        raise ConfigError("--sizes must be positive integers")
    if args.reps < 1 or args.n_queries < 1:
        raise ConfigError("--reps and --n-queries must be >= 1")
    schedule = _schedule_from_args(args)
    rng = np.random.default_rng(args.seed)
    n = sizes[-1]
    t1 = np.exp(rng.uniform(np.log(50), np.log(4500), n))
    t2 = np.minimum(np.exp(rng.uniform(np.log(20), np.log(800), n)), t1)
    b1 = rng.uniform(0.7, 1.3, n)
    log.info("simulating %d bench entries", n)
    pool = simulate_fingerprints(t1, t2, b1, schedule)
    params = np.stack([t1, t2, b1], axis=1)
    queries = add_complex_noise(pool[rng.integers(0, sizes[0], args.n_queries)], 30.0, seed=args.seed)

    nets = {}
    for arch in ("rnn", "cnn"):
        wpath = getattr(args, f"{arch}_weights")
        nets[arch] = load_model(wpath) if wpath else build_model(arch, "complex", schedule.n_reps, seed=args.seed)
        if nets[arch].n_seq != schedule.n_reps:
            raise ConfigError(f"--{arch}-weights expects {nets[arch].n_seq} samples, schedule has {schedule.n_reps}")

    tasks = {}
    for size in sizes:
        d = Dictionary(pool[:size], params[:size], schedule.digest())
        tasks[("match", size)] = lambda d=d: match_batch(queries, d, workers=1)
        for arch, model in nets.items():
            tasks[(arch, size)] = lambda model=model: model.predict(queries)
    # round-robin over all (method, size) cells so slow spells of the machine hit
    # every cell alike; one untimed warm-up pass first
    times = {key: [] for key in tasks}
    for rep in range(args.reps + 1):
        for key, fn in tasks.items():
            t0 = time.perf_counter()
            fn()
            if rep:
                times[key].append(time.perf_counter() - t0)
    rows = [(m, size, float(np.median(times[(m, size)])) / args.n_queries * 1e6) for m, size in tasks]
    out = Path(_need(args, "out"))
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "dict_entries", "per_query_us"])
        for method, size, us in rows:
            w.writerow([method, size, f"{us:.3f}"])
    for method, size, us in rows:
        print(f"{method:<6}{size:>8}{us:>14.1f} us/query")
    return 0


def window_u16(values, lo, hi):
    """Linear map [lo, hi] -> [0, 65535]; values outside the window are clipped."""
    v = np.clip(np.asarray(values, dtype=np.float64), lo, hi)
    return np.rint((v - lo) / (hi - lo) * 65535).astype(np.uint16)


def write_pgm16(path, image_u16):
    img = np.asarray(image_u16, dtype=">u2")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm16(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 65535:
        raise ValueError(f"{path}: not a 16-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=">u2", count=w * h).reshape(h, w)


def relative_error(pred, gt, mask):
    err = np.zeros_like(gt, dtype=np.float64)
    err[mask] = np.abs(pred[mask] - gt[mask]) / gt[mask]
    return err


def cmd_maps(args):
    if (args.weights is None) == (args.dict is None):
        raise ConfigError("give exactly one of --weights or --dict")
    schedule = _schedule_from_args(args)
    slices = _slices_from_args(args, schedule)
    idx = args.slice if args.slice is not None else len(slices) - 1
    if not 0 <= idx < len(slices):
        raise ConfigError(f"--slice must be in [0, {len(slices) - 1}]")
    sl = slices[idx]
    fps = sl.fingerprints[sl.mask]
    if args.weights is not None:
        model = _load_model_arg(args)
        if model.n_seq != schedule.n_reps:
            raise ConfigError(f"model expects {model.n_seq} samples, schedule has {schedule.n_reps}")
        pred_fg = model.predict(fps)
    else:
        d = Dictionary.load(args.dict, schedule)
        res = match_batch(fps, d, workers=args.workers or default_workers())
        pred_fg = np.array([[r.params.t1_ms, r.params.t2_ms] for r in res])
    out_dir = Path(_need(args, "out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    for k, (name, window) in enumerate((("t1", T1_WINDOW_MS), ("t2", T2_WINDOW_MS))):
        gt = sl.params[..., k]
        pred = np.zeros_like(gt)
        pred[sl.mask] = pred_fg[:, k]
        err = relative_error(pred, gt, sl.mask)
        for kind, img, win in (("gt", gt, window), ("pred", pred, window), ("relerr", err, (0.0, 1.0))):
            write_pgm16(out_dir / f"{name}_{kind}.pgm", window_u16(img, *win))
            np.savetxt(out_dir / f"{name}_{kind}.csv", img, delimiter=",", fmt="%.17g")
        fg = err[sl.mask]
        print(f"{name.upper()}: median relative error {np.median(fg):.3%}, "
              f"{np.mean(fg > 1.0):.2%} of voxels beyond 100%")
    print(f"maps for slice {idx} ({sl.shape[0]}x{sl.shape[1]}) in {out_dir}")
    return 0


# -- parser -----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="mrfrecon", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="flat key=value file; command-line flags take precedence")
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-dict", cmd_gen_dict, "simulate a template dictionary and write it as an MRFD file")
    sp.add_argument("--out", help="dictionary file to write")
    sp.add_argument("--schedule-out", help="schedule CSV to write (default: next to --out)")
    for name, lo, hi, n in (("t1", 50.0, 4500.0, 60), ("t2", 20.0, 800.0, 50), ("b1", 0.7, 1.3, 7)):
        unit = "" if name == "b1" else " (ms)"
        sp.add_argument(f"--{name}-min", type=float, default=lo, help=f"lowest {name.upper()}{unit}")
        sp.add_argument(f"--{name}-max", type=float, default=hi, help=f"highest {name.upper()}{unit}")
        sp.add_argument(f"--{name}-n", type=int, default=n, help=f"number of {name.upper()} grid points")
    sp.add_argument("--spacing", choices=("log", "linear"), default="log", help="T1/T2 axis spacing")
    _add_schedule_args(sp)

    sp = add("gen-data", cmd_gen_data, "synthesize phantom slices and write a train/val/test dataset (.npz)")
    sp.add_argument("--out", help="dataset file to write")
    sp.add_argument("--schedule-out", help="also write the schedule CSV here")
    _add_phantom_args(sp)
    _add_schedule_args(sp)

    sp = add("train", cmd_train, "train one model and write its weights and loss history")
    sp.add_argument("--data", help="dataset .npz from gen-data")
    sp.add_argument("--arch", choices=("rnn", "cnn"), default="rnn")
    sp.add_argument("--mode", choices=MODES, default="complex")
    sp.add_argument("--out", help="weights file to write (architecture goes to the .json next to it)")
    sp.add_argument("--history", help="loss history CSV (default: next to --out)")
    _add_train_args(sp)

    sp = add("eval", cmd_eval, "report mean and std of absolute T1/T2 errors of a saved model")
    sp.add_argument("--weights", help="weights file written by train")
    sp.add_argument("--data", help="dataset .npz")
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")

    sp = add("compare", cmd_compare, "train and test all four architecture/input-mode combinations")
    sp.add_argument("--data", help="dataset .npz")
    sp.add_argument("--out", help="report CSV to write")
    _add_train_args(sp)

    sp = add("match", cmd_match, "template-match fingerprints against a dictionary")
    sp.add_argument("--dict", help="dictionary file")
    sp.add_argument("--fingerprints", help=".npy complex array (N, n_seq) or dataset .npz")
    sp.add_argument("--split", choices=("train", "val", "test"), help="with a dataset, match only this split")
    sp.add_argument("--schedule", help="schedule CSV the fingerprints were acquired with; checked against the dictionary")
    sp.add_argument("--workers", type=int, help="worker threads (default: $MRF_THREADS or 1)")
    sp.add_argument("--out", help="results CSV")

    sp = add("bench", cmd_bench, "time template matching against network inference")
    sp.add_argument("--sizes", default="10000,20000,40000", help="comma-separated dictionary sizes")
    sp.add_argument("--reps", type=int, default=5, help="repetitions per timing (median is reported)")
    sp.add_argument("--n-queries", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--rnn-weights", help="time this trained RNN instead of a fresh one")
    sp.add_argument("--cnn-weights", help="time this trained CNN instead of a fresh one")
    sp.add_argument("--out", help="timing CSV")
    _add_schedule_args(sp)

    sp = add("maps", cmd_maps, "reconstruct one phantom slice and write parameter and error maps")
    sp.add_argument("--weights", help="reconstruct with this trained model")
    sp.add_argument("--dict", help="reconstruct by template matching with this dictionary")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--slice", type=int, help="slice index (default: the test slice)")
    sp.add_argument("--out-dir", help="directory for the PGM and CSV maps")
    _add_phantom_args(sp)
    _add_schedule_args(sp)
    return p


def read_config(path):
    cfg = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        cfg[key.lstrip("-").replace("-", "_")] = val
    return cfg


def _apply_config(parser, argv, args):
    """Re-parse with the config file's values installed as defaults, so flags still win."""
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, val in read_config(args.config).items():
        if key not in actions or key in ("help", "config"):
            raise ConfigError(f"{args.config}: unknown key {key!r} for {args.command}")
        if actions[key].nargs == 0:     # store_true flags
            if val.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ConfigError(f"{args.config}: {key} must be true or false")
            defaults[key] = val.lower() in ("1", "true", "yes")
        else:
            defaults[key] = val
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        if args.config:
            args = _apply_config(parser, argv, args)
        return args.func(args)
    except DigestMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIGEST
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
