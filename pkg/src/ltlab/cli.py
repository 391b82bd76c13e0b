"""Command-line experiment runner.

Verbs: ``generate``, ``train``, ``sweep``, ``eval``, ``figures``. Run
``ltlab <verb> --help`` for flags. Verbosity comes from ``LTLAB_LOG``
(DEBUG, INFO, WARNING, ...; default WARNING).

Exit codes:
    0  success
    1  unexpected internal error
    2  configuration error (bad syntax, unknown key, violated constraint)
    3  dataset error (glyph capacity, unreadable or malformed dataset file)
    4  training diverged (non-finite loss)
    5  missing prerequisite runs for ``figures``
    6  checkpoint error
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import evalkit
from . import model as M
from .config import ConfigError, load_config
from .ndgrad import CheckpointError, load_checkpoint, save_checkpoint
from .synthlt import (DatasetFileError, GlyphCapacityError, balanced_counts,
                      generate_glyph_dataset, load_dataset_file, make_longtail_counts,
                      save_dataset_file, shot_split)
from .train import (CBS_ONLY, CBS_RRS, RRS_ONLY, TrainingDiverged, final_quarter_class_loss,
                    log_group_losses, train)

log = logging.getLogger("ltlab")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_DIVERGED = 4
EXIT_MISSING_RUNS = 5
EXIT_CHECKPOINT = 6

MANIFEST = "manifest.json"
CELL_FILES = ("train_log.csv", "eval_log.csv", "report.json", "checkpoint.ltck",
              "weight_norms.csv", "group_losses.csv", "class_losses.csv")


class MissingRunsError(RuntimeError):
    def __init__(self, missing):
        super().__init__("missing prerequisite runs: " + ", ".join(missing))
        self.missing = missing


def _setup_logging():
    level = os.environ.get("LTLAB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# datasets

def _derived_seed(*parts):
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@lru_cache(maxsize=8)
def _synthetic(ds, run_seed):
    counts = make_longtail_counts(ds.classes, ds.n_max, ds.n_min)
    train_set = generate_glyph_dataset(counts, ds.image_size, ds.noise_sd,
                                       _derived_seed(ds.seed, run_seed, 0),
                                       ds.contrast, ds.background)
    test_set = generate_glyph_dataset(balanced_counts(ds.classes, ds.test_per_class),
                                      ds.image_size, ds.noise_sd,
                                      _derived_seed(ds.seed, run_seed, 1),
                                      ds.contrast, ds.background)
    return train_set, test_set


def datasets_for(cfg, run_seed):
    """(train set, test set, shot split) for one run seed.

    Synthetic data is redrawn per run seed; imported files are used as-is.
    """
    ds = cfg.dataset
    if ds.path is not None:
        train_set = load_dataset_file(ds.path)
        if ds.test_path is None:
            raise ConfigError("[dataset] test_path is required when path is set")
        test_set = load_dataset_file(ds.test_path)
    else:
        train_set, test_set = _synthetic(ds, run_seed)
    split = shot_split(train_set.class_counts, ds.t_many, ds.t_low)
    return train_set, test_set, split


# ---------------------------------------------------------------------------
# single cell

def _write_class_losses(path, tlog):
    cbs = final_quarter_class_loss(tlog, "cbs")
    rrs = final_quarter_class_loss(tlog, "rrs")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_rank", "final_quarter_loss_cbs", "final_quarter_loss_rrs"])
        for c in range(len(cbs)):
            w.writerow([c, repr(float(cbs[c])), repr(float(rrs[c]))])


def _write_group_losses(path, tlog, split, window):
    groups = {"head": split.many, "tail": split.low}
    groups = {k: v for k, v in groups.items() if v}
    traces = log_group_losses(tlog, groups, window) if len(tlog) and groups else {}
    keys = sorted(traces)
    n = min((len(t[0]) for t in traces.values()), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration"] + [f"{g}_{s}" for g, s in keys])
        # one row per completed window keeps the file small
        for i in range(window - 1, n, window):
            w.writerow([i + 1] + [repr(float(traces[k][0][i])) for k in keys])


def run_cell(cfg, cell, out_dir):
    """Train, evaluate and write every artifact of one sweep cell."""
    train_set, test_set, split = datasets_for(cfg, cell.seed)
    tcfg = cfg.train_config(cell)

    def evaluator(params):
        return evalkit.evaluate(params, test_set, split).summary()

    t0 = time.perf_counter()
    params, tlog = train(tcfg, train_set, evaluator if tcfg.eval_every else None)
    report = evalkit.evaluate(params, test_set, split)
    if tcfg.iterations and (not tlog.evals or tlog.evals[-1]["iteration"] != tcfg.iterations):
        tlog.evals.append({"iteration": tcfg.iterations, **report.summary()})
    log.info("cell %s: overall=%.4f (%.1fs)", cell.name, report.acc_overall,
             time.perf_counter() - t0)

    cell_dir = Path(out_dir) / cell.name
    cell_dir.mkdir(parents=True, exist_ok=True)
    tlog.write_csv(cell_dir / "train_log.csv")
    tlog.write_eval_csv(cell_dir / "eval_log.csv")
    (cell_dir / "report.json").write_text(report.to_json() + "\n")
    save_checkpoint(cell_dir / "checkpoint.ltck", M.to_blocks(params))
    evalkit.write_rank_value_csv(cell_dir / "weight_norms.csv", report.weight_norms, "weight_norm")
    _write_group_losses(cell_dir / "group_losses.csv", tlog, split, cfg.loss_window)
    _write_class_losses(cell_dir / "class_losses.csv", tlog)
    return cell.name


def _run_cell_job(args):
    config_path, seed_override, cell, out_dir = args
    cfg = load_config(config_path, seed_override)
    return run_cell(cfg, cell, out_dir)


# ---------------------------------------------------------------------------
# manifest

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, files):
    """Hash every written file (paths relative to ``out_dir``)."""
    out_dir = Path(out_dir)
    entries = []
    for rel in sorted(set(files)):
        p = out_dir / rel
        entries.append({"path": rel, "sha256": sha256_file(p), "bytes": p.stat().st_size})
    manifest = {
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "files": entries,
    }
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def manifest_digest(manifest):
    """Digest of the manifest's file list (timestamp excluded)."""
    payload = json.dumps(manifest["files"], sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


# ---------------------------------------------------------------------------
# verbs

def cmd_generate(args):
    cfg = load_config(args.config, args.seed_override)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for seed in cfg.seeds:
        train_set, test_set, _ = datasets_for(cfg, seed)
        for name, ds in ((f"train_s{seed}.ltds", train_set), (f"test_s{seed}.ltds", test_set)):
            save_dataset_file(ds, out / name)
            files.append(name)
    write_manifest(out, files)
    return EXIT_OK


def _run_cells(args, cfg, cells):
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    print(f"running {len(cells)} cell(s) -> {out}", file=sys.stderr)
    workers = max(1, int(args.workers))
    if workers == 1:
        names = [run_cell(cfg, c, out) for c in cells]
    else:
        jobs = [(str(cfg.source), args.seed_override, c, str(out)) for c in cells]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            names = list(pool.map(_run_cell_job, jobs))
    files = [f"{n}/{f}" for n in names for f in CELL_FILES]
    write_manifest(out, files)
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args.config, args.seed_override)
    from .config import Cell, _cell_weights
    t = cfg.train
    cell = Cell(t.strategy, t.seed, _cell_weights(t.strategy, t.weights))
    return _run_cells(args, cfg, [cell])


def cmd_sweep(args):
    cfg = load_config(args.config, args.seed_override)
    return _run_cells(args, cfg, cfg.cells())


def cmd_eval(args):
    cfg = load_config(args.config, args.seed_override)
    testset = load_dataset_file(args.dataset)
    counts = load_dataset_file(args.train_dataset).class_counts if args.train_dataset \
        else testset.class_counts
    split = shot_split(counts, cfg.dataset.t_many, cfg.dataset.t_low)
    params = M.from_blocks(load_checkpoint(args.checkpoint), testset.image_size)
    report = evalkit.evaluate(params, testset, split)
    text = report.to_json() + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _load_report(run_dir, name):
    return evalkit.MetricsReport.from_dict(json.loads((run_dir / name / "report.json").read_text()))


def reproduce_figures(run_dir, out_dir=None):
    """Emit plot-ready CSVs from a completed sweep directory.

    Needs RRSOnly, CBSOnly and the proposed CBS_RRS cell for each seed
    present. Returns the list of written paths (relative to ``out_dir``).
    """
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "figures"
    cells = sorted(p.name for p in run_dir.iterdir() if (p / "report.json").exists())
    by_seed = {}
    for name in cells:
        strategy, seed, lam = name.rsplit("_", 2)
        by_seed.setdefault(seed, {}).setdefault(strategy, []).append(name)
    missing = []
    for seed, strategies in sorted(by_seed.items()):
        for need in (RRS_ONLY, CBS_ONLY, CBS_RRS):
            if need not in strategies:
                missing.append(f"{need}_{seed}")
    if not by_seed:
        missing = [f"{s}_s*" for s in (RRS_ONLY, CBS_ONLY, CBS_RRS)]
    if missing:
        raise MissingRunsError(missing)

    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for seed, strategies in sorted(by_seed.items()):
        rrs, cbs = strategies[RRS_ONLY][0], strategies[CBS_ONLY][0]
        proposed = _proposed_cell(strategies[CBS_RRS])

        # (a) head / tail loss curves, RRS-Only vs CBS-Only
        rrs_rows = _read_csv(run_dir / rrs / "group_losses.csv")
        cbs_rows = _read_csv(run_dir / cbs / "group_losses.csv")
        name = f"loss_curves_{seed}.csv"
        with open(out_dir / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "head_rrs", "head_cbs", "tail_rrs", "tail_cbs"])
            for r_row, c_row in zip(rrs_rows, cbs_rows):
                w.writerow([r_row["iteration"], r_row.get("head_rrs", ""),
                            c_row.get("head_cbs", ""), r_row.get("tail_rrs", ""),
                            c_row.get("tail_cbs", "")])
        written.append(name)

        # (b) per-class accuracy gains of the proposed model vs both baselines
        rep_p = _load_report(run_dir, proposed)
        for base in (rrs, cbs):
            gain = evalkit.accuracy_gain(rep_p, _load_report(run_dir, base))
            name = f"gain_{proposed}_vs_{base}.csv"
            evalkit.write_rank_value_csv(out_dir / name, gain, "accuracy_gain")
            written.append(name)

        # (c) classifier weight norms
        for cell in (rrs, cbs, proposed):
            name = f"weight_norms_{cell}.csv"
            evalkit.write_rank_value_csv(out_dir / name, _load_report(run_dir, cell).weight_norms,
                                         "weight_norm")
            written.append(name)
    return written


def _proposed_cell(names):
    for n in names:
        if n.endswith("_l0.5-1-0"):
            return n
    return sorted(names)[0]


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_figures(args):
    run_dir = Path(args.run_dir)
    out = Path(args.out) if args.out else run_dir / "figures"
    written = reproduce_figures(run_dir, out)
    write_manifest(out, written)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="ltlab", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment config (INI)")
        sp.add_argument("--out", help="output directory (defaults to [output] dir)")
        sp.add_argument("--seed-override", type=int, default=None,
                        help="replace every training seed with this one")
        sp.add_argument("--workers", type=int, default=1, help="parallel sweep workers")

    common(sub.add_parser("generate", help="write dataset files"))
    common(sub.add_parser("train", help="run the single [train] cell"))
    common(sub.add_parser("sweep", help="run the strategy x lambda x seed cross product"))
    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    common(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True, help="test set (.ltds)")
    ev.add_argument("--train-dataset", help="training set whose counts define shot splits")
    fig = sub.add_parser("figures", help="emit plot-data CSVs from a sweep directory")
    common(fig, config_required=False)
    fig.add_argument("--run-dir", required=True)
    return p


VERBS = {"generate": cmd_generate, "train": cmd_train, "sweep": cmd_sweep,
         "eval": cmd_eval, "figures": cmd_figures}


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return VERBS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GlyphCapacityError, DatasetFileError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except TrainingDiverged as exc:
        print(f"training diverged: {exc} {exc.record}", file=sys.stderr)
        return EXIT_DIVERGED
    except MissingRunsError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_MISSING_RUNS
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except Exception:
        log.exception("unexpected error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
