"""Command-line front end: ``fd2cl gen|train|robust|report``."""
import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, parse_order
from .continual import predict, run_protocol
from .errors import ConfigError, DataError, FD2CLError, FormatError, NumericalAbort
from .metrics import TaskMatrix, auc, average_accuracy, average_forgetting
from .model import Model, load_checkpoint, save_checkpoint
from .synthdata import PERTURB_KINDS, PERTURB_LEVELS, generate_dataset, perturb, read_dataset, write_dataset

log = logging.getLogger("fd2cl")

METRICS_SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3
MONOTONE_SLACK = 0.05
ABLATION_FLAGS = {
    "no_ewc": ("no_ewc", "drop the class-aware EWC penalty"),
    "no_freq": ("no_freq_branches", "train on the spatial branch only"),
    "no_align": ("no_align_loss", "drop the anchor alignment loss"),
    "no_ogc": ("no_ogc", "drop gradient projection and the orthogonality term"),
    "naive": ("naive", "plain fine-tuning: no EWC, no projection"),
}


class MissingInput(FD2CLError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def _fmt(x):
    return f"{x:.6f}"


def _write_text(path, text):
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def _write_json(path, obj):
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    _write_text(path, buf.getvalue())


def _threads():
    raw = os.environ.get("FD2CL_THREADS", "")
    try:
        n = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        raise ConfigError(f"FD2CL_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _resolve(args):
    cfg = RunConfig.load(args.config)
    flags = [ABLATION_FLAGS[k][0] for k in ABLATION_FLAGS if getattr(args, k, False)]
    order = parse_order(args.order) if getattr(args, "order", None) else None
    return cfg.with_overrides(seed=getattr(args, "seed", None), order=order, flags=flags)


def _data_dir(cfg, args):
    return Path(getattr(args, "data_dir", None) or cfg.doc["data_dir"])


def _load_tasks(cfg, data_dir):
    tasks = []
    for spec in cfg.task_specs():
        d = data_dir / spec.name
        if not (d / "data.bin").exists() or not (d / "manifest.json").exists():
            raise MissingInput(f"dataset for task {spec.name!r} not found in {d}; run `fd2cl gen` first")
        ds = read_dataset(d)
        if ds.spec.to_dict() != spec.to_dict():
            raise ConfigError(f"tasks: dataset in {d} was generated from a different task spec; regenerate with --force")
        tasks.append(ds)
    return tasks


def _file_logger(path):
    handler = logging.FileHandler(path, mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("fd2cl")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


# ---------------------------------------------------------------- gen

def cmd_gen(args):
    cfg = _resolve(args)
    out = _data_dir(cfg, args)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} is not empty; pass --force to overwrite")
    digests = {}
    for spec in cfg.task_specs():
        write_dataset(generate_dataset(spec), out / spec.name)
        digest = hashlib.sha256((out / spec.name / "manifest.json").read_bytes()).hexdigest()
        digests[spec.name] = digest
        print(f"{spec.name} {digest}")
    return digests


# ---------------------------------------------------------------- train

def stage_rows(method, matrix):
    names = matrix.task_names
    rows = []
    for t, row in enumerate(matrix.rows):
        cells = [_fmt(row[i]) if i < len(row) else "" for i in range(len(names))]
        rows.append([method, t + 1, *cells, _fmt(float(np.mean(row)))])
    return ["method", "stage", *names, "Avg"], rows


def cmd_train(args):
    cfg = _resolve(args)
    run_dir = Path(args.out) if args.out else Path(cfg.doc["output_dir"]) / cfg.run_name()
    tasks = _load_tasks(cfg, _data_dir(cfg, args))
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = _file_logger(run_dir / "run.log")
    try:
        _write_text(run_dir / "config.json", cfg.to_json())
        log.info("fd2cl %s: training %s into %s", __version__, cfg.run_name(), run_dir)
        started = time.time()
        model = Model(cfg.model_config(), cfg.seed)
        log_rows = []
        tcfg = cfg.train_config()
        try:
            result = run_protocol(model, tasks, tcfg, log_rows)
        finally:
            if log_rows:
                keys = ["step", "task", "epoch", "bce", "ewc", "orth", "align", "total"]
                _write_csv(run_dir / "train_log.csv", keys,
                           [[r[k] if k in ("step", "task", "epoch") else repr(float(r[k])) for k in keys]
                            for r in log_rows])
        method = cfg.method()
        names = [t.spec.name for t in tasks]
        save_checkpoint(run_dir / "model.ckpt", model,
                        {"run": cfg.run_name(), "tasks": names, "thresholds": result.thresholds})
        _write_text(run_dir / "task_matrix.json", result.matrix.to_json())
        _write_json(run_dir / "reports.json", [r.as_dict() for r in result.reports])
        header, rows = stage_rows(method, result.matrix)
        _write_csv(run_dir / "stages.csv", header, rows)
        metrics = {
            "schema_version": METRICS_SCHEMA_VERSION,
            "run": cfg.run_name(),
            "protocol": cfg.protocol,
            "method": method,
            "seed": cfg.seed,
            "tasks": names,
            "AA": average_accuracy(result.matrix),
            "AF": average_forgetting(result.matrix),
            "AUC": dict(zip(names, result.final_auc)),
            "AUC_mean": float(np.mean(result.final_auc)),
            "thresholds": dict(zip(names, result.thresholds)),
        }
        _write_json(run_dir / "metrics.json", metrics)
        log.info("done in %.1fs: AA %.4f AF %.4f", time.time() - started, metrics["AA"], metrics["AF"])
        print(f"{run_dir}: AA={metrics['AA']:.4f} AF={metrics['AF']:.4f} AUC={metrics['AUC_mean']:.4f}")
        return metrics
    finally:
        logging.getLogger("fd2cl").removeHandler(handler)
        handler.close()


# ---------------------------------------------------------------- robust

def perturbed_auc(model, ds, kind, level, seed, batch_size=64, with_freq=True):
    """AUC on ``ds``'s test split with every image perturbed at ``level``."""
    x, y = ds.split("test")
    if level:
        base = seed * 1_000_003 + ds.spec.task_id * 10_007
        x = np.stack([perturb(img, kind, level, base + n) for n, img in enumerate(x)])
    return auc(predict(model, x, batch_size, with_freq), y)


def robustness_grid(model, tasks, seed, batch_size=64, with_freq=True, workers=1):
    """``{(kind, level): [auc per task]}`` over all kinds and levels 0..4."""
    cells = [(k, lv, t) for k in PERTURB_KINDS for lv in range(5) for t in range(len(tasks))]

    def one(cell):
        k, lv, t = cell
        return perturbed_auc(model, tasks[t], k, lv, seed, batch_size, with_freq)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(one, cells))
    else:
        values = [one(c) for c in cells]
    grid = {}
    for (k, lv, _), v in zip(cells, values):
        grid.setdefault((k, lv), []).append(v)
    return grid


def monotonicity_flags(grid, names, slack=MONOTONE_SLACK):
    flags = []
    for k in PERTURB_KINDS:
        for lv in range(1, 5):
            for i, name in enumerate(names):
                prev, cur = grid[(k, lv - 1)][i], grid[(k, lv)][i]
                if cur - prev > slack:
                    flags.append(f"{k} level {lv} {name}: AUC rose {prev:.4f} -> {cur:.4f}")
    return flags


def cmd_robust(args):
    run_dir = Path(args.run_dir)
    ckpt = run_dir / "model.ckpt"
    if not ckpt.exists():
        raise MissingInput(f"no checkpoint at {ckpt}; train the run first")
    if not (run_dir / "config.json").exists():
        raise MissingInput(f"no config.json in {run_dir}")
    cfg = RunConfig.load(run_dir / "config.json")
    model, header = load_checkpoint(ckpt)
    meta = header.get("meta", {})
    tasks = _load_tasks(cfg, _data_dir(cfg, args))
    names = [t.spec.name for t in tasks]
    if meta.get("tasks") != names:
        raise ConfigError(f"checkpoint tasks {meta.get('tasks')} do not match config tasks {names}")
    tcfg = cfg.train_config()
    grid = robustness_grid(model, tasks, cfg.seed, tcfg.eval_batch_size, tcfg.use_freq, _threads())
    rows = []
    for k in PERTURB_KINDS:
        for lv in range(5):
            vals = grid[(k, lv)]
            param = "" if lv == 0 else PERTURB_LEVELS[k][lv - 1]
            rows.append([cfg.method(), k, lv, param, *map(_fmt, vals), _fmt(float(np.mean(vals)))])
    _write_csv(run_dir / "robustness.csv", ["method", "kind", "level", "param", *names, "Avg"], rows)
    flags = monotonicity_flags(grid, names)
    _write_text(run_dir / "robustness_flags.txt", "".join(f + "\n" for f in flags) or "none\n")
    print(f"{run_dir / 'robustness.csv'}: {len(rows)} rows, {len(flags)} monotonicity flags")
    return grid


# ---------------------------------------------------------------- report

def _load_metrics(run_dir):
    path = Path(run_dir) / "metrics.json"
    if not path.exists():
        raise MissingInput(f"run {run_dir}: no metrics.json")
    m = json.loads(path.read_text())
    if m.get("schema_version") != METRICS_SCHEMA_VERSION:
        raise ConfigError(f"run {run_dir}: metrics schema_version {m.get('schema_version')!r} "
                          f"is not supported (expected {METRICS_SCHEMA_VERSION})")
    return m


def cmd_report(args):
    runs = [_load_metrics(d) for d in args.run_dirs]
    runs.sort(key=lambda m: (-m["AA"], m["run"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "comparison.csv", ["run", "protocol", "method", "seed", "AA", "AF", "AUC"],
               [[m["run"], m["protocol"], m["method"], m["seed"], _fmt(m["AA"]), _fmt(m["AF"]),
                 _fmt(m["AUC_mean"])] for m in runs])

    # configuration x protocol pivot, averaged over seeds
    protocols = sorted({m["protocol"] for m in runs})
    methods = []
    for m in runs:
        if m["method"] not in methods:
            methods.append(m["method"])
    table = []
    for meth in methods:
        row = [meth]
        for p in protocols:
            sel = [m for m in runs if m["method"] == meth and m["protocol"] == p]
            row += [_fmt(float(np.mean([m["AA"] for m in sel]))), _fmt(float(np.mean([m["AF"] for m in sel])))] \
                if sel else ["", ""]
        table.append(row)
    _write_csv(out / "ablation.csv", ["Configuration", *[f"{p} {c}" for p in protocols for c in ("AA", "AF")]], table)

    width = max(len(m["run"]) for m in runs)
    lines = [f"{'run':<{width}}  {'AA':>7}  {'AF':>7}  {'AUC':>7}"]
    lines += [f"{m['run']:<{width}}  {m['AA']:7.4f}  {m['AF']:7.4f}  {m['AUC_mean']:7.4f}" for m in runs]
    _write_text(out / "summary.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return runs


# ---------------------------------------------------------------- entry

def build_parser():
    p = _Parser(prog="fd2cl", description="Desk-scale continual deepfake detection experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seeded=True):
        sp.add_argument("--config", default="protocol2",
                        help="config file, or a packaged name (protocol1, protocol2); default protocol2")
        sp.add_argument("--data-dir", help="override the config's data_dir")
        if seeded:
            sp.add_argument("--seed", type=int, help="override the config seed")
            sp.add_argument("--order", help="task order as comma-separated indices, e.g. 3,1,2,0")

    g = sub.add_parser("gen", help="generate task datasets")
    common(g, seeded=False)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty data directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="run the continual protocol")
    common(t)
    t.add_argument("--out", help="run directory (default: <output_dir>/<run name>)")
    for flag, (_, text) in ABLATION_FLAGS.items():
        t.add_argument("--" + flag.replace("_", "-"), dest=flag, action="store_true", help=text)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("robust", help="perturbation sweep on a trained run")
    r.add_argument("run_dir")
    r.add_argument("--data-dir", help="override the run config's data_dir")
    r.set_defaults(func=cmd_robust)

    rep = sub.add_parser("report", help="merge runs into comparison tables")
    rep.add_argument("run_dirs", nargs="+")
    rep.add_argument("--out", default="report", help="output directory (default: report)")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NumericalAbort as exc:
        print(f"fd2cl: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MissingInput, FileNotFoundError, FormatError, DataError) as exc:
        print(f"fd2cl: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FD2CLError as exc:
        print(f"fd2cl: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
