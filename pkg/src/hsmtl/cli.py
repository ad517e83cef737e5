"""Command-line entry point.

Subcommands:
    convert   raw array file -> canonical BSQ cube/labels pair
    synth     generate synthetic multitask scenes + palette + manifest
    train     run the manifest's (method x n_per_class x seed) training sweep
    eval      voted predictions over stored test splits -> reports + OA table
    map       render a voted classification map of a whole scene

Cells of the training/evaluation sweep are independent; set HSMTL_WORKERS to
run them in parallel processes (each cell stays internally serial, so strict
determinism is unaffected).
"""

from __future__ import annotations

import argparse
import csv
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from functools import lru_cache

import numpy as np

from . import data as D
from . import metrics as M
from . import trainer as TR
from .manifest import ManifestError, RunManifest, load_manifest
from .network import TaskSpec


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("HSMTL_WORKERS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# convert
# ---------------------------------------------------------------------------

def cmd_convert(args) -> int:
    dtype = np.dtype({"float32": "<f4", "float64": "<f8", "uint16": "<u2"}[args.dtype])
    h, w, c = args.height, args.width, args.bands
    expected = h * w * c * dtype.itemsize
    actual = os.path.getsize(args.input)
    if actual != expected:
        raise D.DataFormatError(
            f"{args.input}: declared shape {h}x{w}x{c} of {args.dtype} needs "
            f"{expected} bytes, file holds {actual} bytes")
    raw = np.fromfile(args.input, dtype=dtype)
    if args.interleave == "bip":      # pixel-interleaved: H x W x C row-major
        arr = raw.reshape(h, w, c)
    else:                             # bsq: band-major
        arr = raw.reshape(c, h, w).transpose(1, 2, 0)
    os.makedirs(os.path.dirname(os.path.abspath(args.output)) or ".", exist_ok=True)
    if args.kind == "labels":
        if c != 1:
            raise D.DataFormatError("label rasters must have exactly one band")
        if args.dtype != "uint16":
            arr = arr.astype(np.int64)
            if (arr < 0).any() or (arr > np.iinfo(np.uint16).max).any():
                raise D.DataFormatError("label values do not fit uint16")
        D.write_labels(D.LabelRaster(arr[:, :, 0].astype(np.int64)), args.output)
    else:
        D.write_cube(D.HyperCube(np.ascontiguousarray(arr, dtype=np.float32)), args.output)
    print(f"wrote {args.output}: {h} x {w} x {c} ({args.kind})")
    return 0


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    scenes = D.synth_generate(args.tasks, args.classes, args.bands, args.size,
                              args.overlap, args.noise, args.seed)
    os.makedirs(args.output_dir, exist_ok=True)
    task_rows = []
    for i, (cube, labels) in enumerate(scenes, start=1):
        name = f"task{i}"
        D.write_cube(cube, os.path.join(args.output_dir, f"{name}.bsq"))
        D.write_labels(labels, os.path.join(args.output_dir, f"{name}_labels.bsq"))
        task_rows.append(name)
        print(f"wrote {name}: {cube.shape[0]} x {cube.shape[1]} x {cube.bands}, "
              f"{labels.num_classes} classes")
    M.write_palette(M.default_palette(args.classes),
                    os.path.join(args.output_dir, "palette.csv"))
    if args.overlap == 1.0 and args.tasks > 1:
        print("tasks share one endmember library (overlap = 1.0)")

    manifest_lines = ["output_dir: out", "tasks:"]
    for name in task_rows:
        manifest_lines += [f"  - id: {name}",
                           f"    cube: {name}.bsq",
                           f"    labels: {name}_labels.bsq",
                           f"    num_classes: {args.classes}"]
    manifest_lines += ["eval:",
                       "  n_per_class: [5]",
                       "  seeds: [0]",
                       f"  methods: [{'multitask' if args.tasks > 1 else 'single'}]",
                       ""]
    with open(os.path.join(args.output_dir, "manifest.yaml"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(manifest_lines))
    print(f"wrote {os.path.join(args.output_dir, 'manifest.yaml')}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _load_task_scene(cube_path: str, labels_path: str, align_key: tuple,
                     inverted: bool) -> tuple[D.HyperCube, D.LabelRaster]:
    cube = D.read_cube(cube_path)
    labels = D.read_labels(labels_path)
    if cube.shape[:2] != labels.shape:
        raise D.DataFormatError(
            f"cube {cube.shape[:2]} and labels {labels.shape} disagree "
            f"({cube_path} vs {labels_path})")
    spec = D.AlignmentSpec.parse(list(align_key))
    if inverted:
        spec = spec.with_invert()
    cube = D.align_bands(cube, spec)
    return D.standardize(cube), labels


def _prepare_tasks(manifest: RunManifest, inverse_ids: tuple) -> list[tuple[TaskSpec, D.HyperCube, D.LabelRaster]]:
    out = []
    for entry in manifest.tasks:
        inverted = entry.task_id in inverse_ids
        cube, labels = _load_task_scene(entry.cube_path, entry.labels_path,
                                        tuple(entry.align.to_strings()), inverted)
        if labels.num_classes != entry.num_classes:
            raise ManifestError(
                f"task {entry.task_id!r}: manifest declares {entry.num_classes} "
                f"classes but labels hold {labels.num_classes}")
        spec = TaskSpec(entry.task_id, entry.num_classes, cube.bands,
                        alignment=entry.align,
                        cube_path=entry.cube_path, labels_path=entry.labels_path)
        out.append((spec, cube, labels))
    return out


def _write_split_csv(split: D.SampleSplit, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "class", "subset"])
        for r, c, y in zip(split.train_rows, split.train_cols, split.train_labels):
            writer.writerow([r, c, y, "train"])
        for r, c, y in zip(split.test_rows, split.test_cols, split.test_labels):
            writer.writerow([r, c, y, "test"])


def _read_split_csv(path: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Test-pixel coordinates and labels from a stored split file."""
    rows, cols, labels = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            if rec["subset"] == "test":
                rows.append(int(rec["row"]))
                cols.append(int(rec["col"]))
                labels.append(int(rec["class"]))
    return np.asarray(rows), np.asarray(cols), np.asarray(labels)


def _run_dir_name(method: str, task_id: str | None, n: int, seed: int) -> str:
    if method == "single":
        return f"single_{task_id}_n{n}_seed{seed}"
    return f"multitask_n{n}_seed{seed}"


def _train_cell(manifest_path: str, method: str, n: int, seed: int,
                inverse_ids: tuple, strict: bool) -> list[str]:
    """Train every run of one (method, n, seed) sweep cell; returns log lines."""
    manifest = load_manifest(manifest_path)
    prepared = _prepare_tasks(manifest, inverse_ids)
    config = replace(manifest.train, seed=seed,
                     strict_determinism=manifest.train.strict_determinism or strict)
    runs_dir = os.path.join(manifest.output_dir, "runs")
    lines = []

    splits = {}
    pools = {}
    for spec, cube, labels in prepared:
        split = D.stratified_split(labels, n, seed)
        splits[spec.task_id] = split
        pools[spec.task_id] = D.build_training_pool(cube, split, manifest.arch.patch_size)

    if method == "single":
        for spec, cube, labels in prepared:
            run_dir = os.path.join(runs_dir, _run_dir_name("single", spec.task_id, n, seed))
            os.makedirs(os.path.join(run_dir, "split"), exist_ok=True)
            _write_split_csv(splits[spec.task_id],
                             os.path.join(run_dir, "split", f"{spec.task_id}.csv"))
            x, y = pools[spec.task_id]
            t0 = time.perf_counter()
            tr = TR.SingleTaskTrainer(spec, x, y, manifest.arch, config)
            tr.run(run_dir=run_dir)
            elapsed = time.perf_counter() - t0
            lines.append(f"single {spec.task_id} n={n} seed={seed}: "
                         f"shared {tr.phase_seconds['shared']:.2f}s + "
                         f"finetune {tr.phase_seconds['finetune']:.2f}s = {elapsed:.2f}s")
    else:
        run_dir = os.path.join(runs_dir, _run_dir_name("multitask", None, n, seed))
        os.makedirs(os.path.join(run_dir, "split"), exist_ok=True)
        for spec, _, _ in prepared:
            _write_split_csv(splits[spec.task_id],
                             os.path.join(run_dir, "split", f"{spec.task_id}.csv"))
        t0 = time.perf_counter()
        tr = TR.MultitaskTrainer([s for s, _, _ in prepared], pools, manifest.arch, config)
        tr.run(run_dir=run_dir)
        elapsed = time.perf_counter() - t0
        lines.append(f"multitask n={n} seed={seed}: "
                     f"shared {tr.phase_seconds['shared']:.2f}s + "
                     f"finetune {tr.phase_seconds['finetune']:.2f}s = {elapsed:.2f}s")
    return lines


def cmd_train(args) -> int:
    manifest = load_manifest(args.config)
    inverse_ids = tuple(args.inverse or [])
    for tid in inverse_ids:
        manifest.task(tid)  # validate before any output
    seeds = [args.seed] if args.seed is not None else manifest.seeds
    os.makedirs(manifest.output_dir, exist_ok=True)
    shutil.copy(manifest.source_path, os.path.join(manifest.output_dir, "manifest.yaml"))

    cells = [(method, n, seed) for method in manifest.methods
             for n in manifest.n_per_class for seed in seeds]
    t0 = time.perf_counter()
    if _workers() > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=_workers()) as pool:
            futures = [pool.submit(_train_cell, args.config, method, n, seed,
                                   inverse_ids, args.strict)
                       for method, n, seed in cells]
            for fut in futures:
                for line in fut.result():
                    print(line)
    else:
        for method, n, seed in cells:
            for line in _train_cell(args.config, method, n, seed, inverse_ids,
                                    args.strict):
                print(line)
    print(f"total wall time: {time.perf_counter() - t0:.2f}s "
          f"({len(cells)} cells, {_workers()} workers)")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _eval_cell(manifest_path: str, method: str, task_id: str, n: int, seed: int,
               inverse_ids: tuple) -> tuple[str, int, int, str, float]:
    manifest = load_manifest(manifest_path)
    prepared = {spec.task_id: (spec, cube, labels)
                for spec, cube, labels in _prepare_tasks(manifest, inverse_ids)}
    spec, cube, _ = prepared[task_id]
    run_dir = os.path.join(manifest.output_dir, "runs",
                           _run_dir_name(method, task_id, n, seed))
    if not os.path.isdir(run_dir):
        raise FileNotFoundError(f"run directory {run_dir} is missing; train first")
    snapshots = TR.load_snapshot_set(run_dir, task_id)
    rows, cols, truth = _read_split_csv(os.path.join(run_dir, "split", f"{task_id}.csv"))
    pred = TR.predict_coords(snapshots, cube, rows, cols, manifest.arch.patch_size)
    report = M.make_report(task_id, n, seed, pred, truth, num_classes=spec.num_classes)
    report_dir = os.path.join(manifest.output_dir, "reports", task_id)
    os.makedirs(report_dir, exist_ok=True)
    M.write_report_csv(report, os.path.join(report_dir, f"n{n}_seed{seed}_{method}.csv"))
    return task_id, n, seed, method, report.overall_accuracy


def cmd_eval(args) -> int:
    manifest = load_manifest(args.config)
    inverse_ids = tuple(args.inverse or [])
    seeds = [args.seed] if args.seed is not None else manifest.seeds
    cells = [(method, t.task_id, n, seed) for method in manifest.methods
             for t in manifest.tasks for n in manifest.n_per_class for seed in seeds]

    results = []
    if _workers() > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=_workers()) as pool:
            futures = [pool.submit(_eval_cell, args.config, method, tid, n, seed,
                                   inverse_ids)
                       for method, tid, n, seed in cells]
            results = [fut.result() for fut in futures]
    else:
        results = [_eval_cell(args.config, method, tid, n, seed, inverse_ids)
                   for method, tid, n, seed in cells]

    from .figures import render_oa_figure
    from .metrics import AggregateReport

    for task in manifest.tasks:
        tid = task.task_id
        cells_for_task: dict[tuple[int, str], AggregateReport] = {}
        for method in manifest.methods:
            for n in manifest.n_per_class:
                oas = [oa for t, nn, _, m, oa in results
                       if t == tid and nn == n and m == method]
                if not oas:
                    continue
                mean = float(np.mean(oas))
                std = float(np.std(oas, ddof=1)) if len(oas) >= 2 else None
                agg = AggregateReport(tid, n, mean, std, len(oas), list(oas))
                cells_for_task[(n, method)] = agg
                shown = M.format_percent(agg)
                print(f"{tid} n={n} {method}: OA {shown} ({len(oas)} runs)")
        table_path = os.path.join(manifest.output_dir, "reports", f"table_{tid}.csv")
        os.makedirs(os.path.dirname(table_path), exist_ok=True)
        M.emit_table(cells_for_task, table_path)
        render_oa_figure(cells_for_task, tid,
                         os.path.join(manifest.output_dir, "reports", f"table_{tid}.png"))
        print(f"wrote {table_path}")
    return 0


# ---------------------------------------------------------------------------
# map
# ---------------------------------------------------------------------------

def cmd_map(args) -> int:
    manifest = load_manifest(args.config)
    inverse_ids = tuple(args.inverse or [])
    prepared = {spec.task_id: (spec, cube, labels)
                for spec, cube, labels in _prepare_tasks(manifest, inverse_ids)}
    if args.task not in prepared:
        raise ManifestError(f"manifest has no task {args.task!r}")
    spec, cube, _ = prepared[args.task]
    snapshots = TR.load_snapshot_set(args.run, args.task)
    palette = (M.read_palette(args.palette) if args.palette
               else M.default_palette(spec.num_classes))
    for cls in range(0, spec.num_classes + 1):
        if cls not in palette:
            raise ValueError(f"palette has no entry for class {cls}")
    h, w, _ = cube.shape
    rows, cols = np.divmod(np.arange(h * w), w)
    pred = TR.predict_coords(snapshots, cube, rows, cols, manifest.arch.patch_size)
    M.render_map(pred.reshape(h, w), palette, args.output)
    print(f"wrote {args.output}: {w} x {h}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(parser) -> None:
    parser.add_argument("--config", required=True, help="run manifest (YAML)")
    parser.add_argument("--seed", type=int, default=None,
                        help="restrict the sweep to one seed")
    parser.add_argument("--strict", action="store_true",
                        help="force strict determinism")
    parser.add_argument("--inverse", action="append", metavar="TASK_ID",
                        help="invert the given task's spectral bands "
                             "(repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hsmtl",
        description="Multitask small-sample hyperspectral patch classification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="raw array file -> canonical BSQ pair")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help="output data file (.bsq)")
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--bands", type=int, required=True)
    p.add_argument("--dtype", choices=["float32", "float64", "uint16"],
                   default="float32")
    p.add_argument("--interleave", choices=["bip", "bsq"], default="bip",
                   help="layout of the raw input (bip = H x W x C row-major)")
    p.add_argument("--kind", choices=["cube", "labels"], default="cube")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("synth", help="generate synthetic multitask scenes")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--tasks", type=int, default=2)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--bands", type=int, default=16)
    p.add_argument("--size", type=int, default=24)
    p.add_argument("--overlap", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the manifest's training sweep")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate stored runs, emit reports + table")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("map", help="render a voted classification map")
    _add_common(p)
    p.add_argument("--run", required=True, help="run directory with snapshots")
    p.add_argument("--task", required=True)
    p.add_argument("--palette", default=None, help="palette csv (class,r,g,b)")
    p.add_argument("--output", required=True, help="output P6 image path")
    p.set_defaults(func=cmd_map)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ManifestError, D.DataFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IOError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
