"""Command-line entry point: ``splatembed <subcommand> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import report
from .config import BENCH, ENCODE, EVAL, FIXTURE, PARTITION, QUERY, SUBCOMMANDS, RunConfig, add_options
from .errors import ConfigError, ContractError, DataError, SplatEmbedError

DESCRIPTIONS = {
    ENCODE: "capture rasterization weights and aggregate mask embeddings into a per-Gaussian table",
    PARTITION: "split the vector store into spatial cell snapshots",
    QUERY: "retrieve Gaussians matching text queries",
    EVAL: "score retrieval against ground truth (binary or multiclass protocol)",
    BENCH: "time encoding across worker counts and queries across store sizes",
    FIXTURE: "write a synthetic dataset with known object membership",
}


def _say(*lines) -> None:
    for line in lines:
        print(line)
    sys.stdout.flush()


def _text_provider(cfg: RunConfig, dim: int):
    from .query import LookupTextEncoder, SyntheticTextEncoder

    if cfg.lookup is not None:
        provider = LookupTextEncoder.from_file(cfg.lookup, strict=cfg.strict)
        if provider.dim != dim:
            raise ContractError(f"lookup vectors have dimension {provider.dim}, store has {dim}")
        return provider
    return SyntheticTextEncoder(dim)


def _query_mode(cfg: RunConfig):
    from .query import QueryMode

    return QueryMode.topk(cfg.top_k) if cfg.top_k is not None else QueryMode.threshold(cfg.threshold)


def cmd_encode(cfg: RunConfig) -> int:
    from .pipeline import EncodeOptions, run_encode, save_table
    from .providers import DatasetManifest
    from .scene import load_scene

    cfg.require("scene", "manifest", "out")
    manifest = DatasetManifest.load(cfg.manifest)
    t0 = time.perf_counter()
    scene = load_scene(cfg.scene)
    load_s = time.perf_counter() - t0
    opts = EncodeOptions(workers=cfg.workers, chunk_rows=cfg.chunk_rows, raw_falloff=cfg.raw_falloff,
                         contiguous=cfg.contiguous,
                         spill_dir=None if cfg.spill_dir is None else str(cfg.spill_dir),
                         max_resident_entries=cfg.max_resident_entries)
    table, stats = run_encode(scene, manifest, opts)
    t1 = time.perf_counter()
    cfg.out.parent.mkdir(parents=True, exist_ok=True)
    save_table(table, cfg.out)
    write_s = time.perf_counter() - t1

    rows = [{"worker": w.rank, "images": len(w.images), "io_s": w.io_s, "rasterize_s": w.rasterize_s,
             "masking_s": w.masking_s, "aggregate_s": w.aggregate_s, "total_s": w.total_s,
             "masked_entries": w.masked_entries, "spilled": w.spilled_images, "status": w.status}
            for w in stats.workers]
    covered = int(np.count_nonzero(table.covered))
    _say(report.format_table(rows), "",
         report.format_kv({"gaussians": table.n, "covered": covered, "images": len(manifest.images),
                           "workers": cfg.workers, "chunks": stats.chunks, "load_s": load_s,
                           "phase1_s": stats.phase1_s, "phase2_s": stats.phase2_s, "write_s": write_s,
                           "table": cfg.out}))
    report_dir = cfg.report_dir or cfg.out.parent / (cfg.out.stem + "_report")
    report.write_delimited(rows, report_dir / "workers.tsv")
    report.write_delimited([{"phase": "load", "seconds": load_s}, {"phase": "phase1", "seconds": stats.phase1_s},
                            {"phase": "phase2", "seconds": stats.phase2_s}, {"phase": "write", "seconds": write_s}],
                           report_dir / "phases.tsv")
    report.plot_worker_breakdown(stats, report_dir / "workers.png")
    cfg.save(report_dir / "config.ini")
    return 0


def _load_store(cfg: RunConfig):
    from .pipeline import load_table
    from .scene import load_scene
    from .vecstore import build_store

    scene = load_scene(cfg.scene)
    table = load_table(cfg.table)
    return build_store(table, scene)


def cmd_partition(cfg: RunConfig) -> int:
    from .vecstore import partition_store, write_partitions

    cfg.require("scene", "table", "cell_size", "out_dir")
    store = _load_store(cfg)
    snaps = partition_store(store, cfg.cell_size)
    index = write_partitions(snaps, cfg.out_dir, cfg.cell_size)
    rows = [{"cell": ",".join(map(str, s.cell)), "count": s.store.count} for s in snaps]
    _say(report.format_table(rows), "",
         report.format_kv({"records": store.count, "partitions": len(snaps), "index": index}))
    cfg.save(Path(cfg.out_dir) / "config.ini")
    return 0


def _query_store(cfg: RunConfig):
    from .vecstore import load_partitions, merge_stores, partition_store, select_partitions

    center = None if cfg.center is None else np.asarray(cfg.center, dtype=np.float64)
    if cfg.partitions is not None:
        snaps, dim = load_partitions(cfg.partitions, center, cfg.radius)
        return merge_stores([s.store for s in snaps], dim), len(snaps)
    cfg.require("scene", "table")
    store = _load_store(cfg)
    if center is None:
        return store, 1
    if cfg.cell_size is None:
        raise ConfigError("a region query on a full store needs --cell-size")
    snaps = partition_store(store, cfg.cell_size)
    chosen = [s for s in snaps if s.intersects_ball(center, cfg.radius)]
    return select_partitions(snaps, center, cfg.radius, store.dim), len(chosen)


def _query_texts(cfg: RunConfig) -> list[str]:
    from .evaluation import read_labels

    texts = list(cfg.text or [])
    if cfg.labels is not None:
        texts += read_labels(cfg.labels)
    if not texts:
        raise ConfigError("query needs --text or --labels")
    return texts


def cmd_query(cfg: RunConfig) -> int:
    from .query import export_matches_ply, run_query

    texts = _query_texts(cfg)
    store, n_parts = _query_store(cfg)
    provider = _text_provider(cfg, store.dim if store.count else cfg.dim)
    mode = _query_mode(cfg)
    rows, summary = [], []
    out_dir = cfg.out_dir
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    for j, text in enumerate(texts):
        result = run_query(store, text, mode, provider)
        for rank, m in enumerate(result.matches):
            rows.append({"text": text, "rank": rank, "gaussian_id": m.gaussian_id, "similarity": m.similarity})
        summary.append({"text": text, "matches": len(result.matches)})
        if out_dir is not None:
            export_matches_ply(result, out_dir / f"matches_{j:03d}.ply")
    if rows:
        _say(report.format_table(rows), "")
    _say(report.format_kv({"records": store.count, "partitions": n_parts, "mode": mode.kind,
                           "value": mode.value, "matches": len(rows)}))
    if out_dir is not None:
        report.write_delimited(rows, out_dir / "matches.tsv", fields=["text", "rank", "gaussian_id", "similarity"])
        report.write_delimited(summary, out_dir / "summary.tsv")
        cfg.save(out_dir / "config.ini")
    return 0


def _gt_bitmaps(path: Path, count: int):
    from .providers import read_masks

    if not path.is_file():
        raise DataError(f"ground-truth masks {path} are missing")
    ms = read_masks(path)
    if ms.declared != count:
        raise DataError(f"{path}: {ms.declared} ground-truth masks for {count} labels")
    out = np.zeros((count, ms.height, ms.width), dtype=bool)
    for m in ms.masks:
        out[m.mask_id] = m.bitmap
    return out


def _eval_binary(cfg: RunConfig, report_dir):
    from .evaluation import binary_metrics, pixel_accuracy, project_result_to_mask, read_labels
    from .pipeline import load_table
    from .providers import DatasetManifest
    from .query import run_query
    from .scene import load_scene
    from .vecstore import build_store

    cfg.require("scene", "table", "manifest", "labels", "gt_masks")
    labels = read_labels(cfg.labels)
    manifest = DatasetManifest.load(cfg.manifest)
    cams = manifest.load_cameras()
    scene = load_scene(cfg.scene)
    table = load_table(cfg.table)
    if table.n != len(scene):
        raise ContractError(f"table has {table.n} rows, scene has {len(scene)} Gaussians")
    store = build_store(table, scene)
    provider = _text_provider(cfg, store.dim if store.count else cfg.dim)
    mode = _query_mode(cfg)
    results = [run_query(store, text, mode, provider) for text in labels]
    raster = tuple(manifest.raster_resolution)
    rows = []
    for e in manifest.images:
        gt = _gt_bitmaps(cfg.gt_masks / f"{e.image_id:04d}.rle", len(labels))
        if (gt.shape[2], gt.shape[1]) != raster:
            raise ContractError(f"image {e.image_id}: ground truth is {gt.shape[2]}x{gt.shape[1]}, "
                                f"raster is {raster[0]}x{raster[1]}")
        cam = cams[e.camera_id].rescaled(*raster)
        for j, (text, result) in enumerate(zip(labels, results)):
            if not gt[j].any():
                continue  # only views where the object appears are scored
            pred = project_result_to_mask(result, scene, cam, cfg.alpha_threshold)
            iou, loc = binary_metrics(pred, gt[j])
            acc = loc if cfg.accuracy == "localization" else pixel_accuracy(pred, gt[j])
            rows.append({"label": text, "image_id": e.image_id, "matches": len(result.matches),
                         "iou": iou, "accuracy": acc})
    if not rows:
        raise DataError("no view contains any labeled object")
    ious = np.array([r["iou"] for r in rows])
    accs = np.array([r["accuracy"] for r in rows])
    per_label = []
    for text in labels:
        sel = [r for r in rows if r["label"] == text]
        if sel:
            per_label.append({"label": text, "views": len(sel), "iou": float(np.mean([r["iou"] for r in sel])),
                              "accuracy": float(np.mean([r["accuracy"] for r in sel]))})
    _say(report.format_table(per_label), "",
         report.format_kv({"protocol": "binary", "accuracy_def": cfg.accuracy, "evaluations": len(rows),
                           "mean_iou": float(ious.mean()), "min_iou": float(ious.min()),
                           "mean_accuracy": float(accs.mean())}))
    if report_dir is not None:
        report.write_delimited(rows, report_dir / "binary_views.tsv")
        report.write_delimited(per_label, report_dir / "binary_labels.tsv")


def _eval_multiclass(cfg: RunConfig, report_dir):
    from .evaluation import (assign_classes, class_scores, load_point_cloud, load_segments, map_to_points,
                             prediction_filter, read_labels)
    from .pipeline import load_table
    from .scene import load_scene

    cfg.require("scene", "table", "labels", "points")
    labels = read_labels(cfg.labels)
    scene = load_scene(cfg.scene)
    table = load_table(cfg.table)
    if table.n != len(scene):
        raise ContractError(f"table has {table.n} rows, scene has {len(scene)} Gaussians")
    provider = _text_provider(cfg, table.dim)
    from .query import encode_text

    classes = assign_classes(table, [(j, encode_text(t, provider)) for j, t in enumerate(labels)])
    cloud = load_point_cloud(cfg.points)
    pred = map_to_points(scene, classes, cloud)
    scores = class_scores(pred, cloud.gt_class, cfg.class_subset, len(labels))
    kv = {"protocol": "multiclass", "points": len(pred), "classes": len(scores.class_ids),
          "miou": scores.miou, "macc": scores.macc}
    filtered = None
    if cfg.segments is not None:
        filtered = class_scores(prediction_filter(pred, load_segments(cfg.segments)), cloud.gt_class,
                                cfg.class_subset, len(labels))
        kv.update({"filtered_miou": filtered.miou, "filtered_macc": filtered.macc})
    rows = []
    for i, c in enumerate(scores.class_ids):
        row = {"class": int(c), "label": labels[c], "iou": float(scores.iou[i]), "accuracy": float(scores.acc[i])}
        if filtered is not None:
            row["filtered_iou"] = float(filtered.iou[i])
            row["filtered_accuracy"] = float(filtered.acc[i])
        rows.append(row)
    _say(report.format_table(rows), "", report.format_kv(kv))
    if report_dir is not None:
        report.write_delimited(rows, report_dir / "classes.tsv")
        report.plot_class_scores(scores, labels, report_dir / "classes.png")


def cmd_eval(cfg: RunConfig) -> int:
    report_dir = cfg.report_dir
    if cfg.protocol == "binary":
        _eval_binary(cfg, report_dir)
    else:
        _eval_multiclass(cfg, report_dir)
    if report_dir is not None:
        cfg.save(report_dir / "config.ini")
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    from .bench import bench_encode, bench_queries, workload_scene, write_workload

    report_dir = cfg.report_dir or Path("bench_report").resolve()
    report_dir.mkdir(parents=True, exist_ok=True)
    enc_rows, q_rows = [], []
    runs = []
    if cfg.worker_counts:
        scene = workload_scene(cfg.gaussians, seed=cfg.seed)
        with tempfile.TemporaryDirectory(prefix="splatembed_bench_") as tmp:
            manifest = write_workload(tmp, cfg.gaussians, cfg.images, cfg.resolution, cfg.dim, cfg.seed)
            runs = bench_encode(scene, manifest, cfg.worker_counts, cfg.chunk_rows)
        base = runs[0].seconds
        for r in runs:
            enc_rows.append({"workers": r.workers, "gaussians": r.gaussians, "images": r.images,
                             "seconds": r.seconds, "phase1_s": r.phase1_s, "phase2_s": r.phase2_s,
                             "speedup": base / r.seconds, "digest": r.digest})
        _say(report.format_table(enc_rows), "")
        report.write_delimited(enc_rows, report_dir / "encode.tsv")
        report.plot_scaling(runs, report_dir / "scaling.png")
        report.plot_worker_breakdown(runs[-1].stats, report_dir / f"workers_{runs[-1].workers}.png")
    if cfg.store_sizes:
        qruns = bench_queries(cfg.store_sizes, cfg.dim, cfg.response, seed=cfg.seed)
        q_rows = [{"store_size": q.store_size, "mode": q.mode, "results": q.results, "seconds": q.seconds}
                  for q in qruns]
        _say(report.format_table(q_rows), "")
        report.write_delimited(q_rows, report_dir / "query.tsv")
        report.plot_query_latency(qruns, report_dir / "query_latency.png")
    kv = {"report_dir": report_dir}
    if runs:
        kv["max_speedup"] = max(r["speedup"] for r in enc_rows)
    _say(report.format_kv(kv))
    cfg.save(report_dir / "config.ini")
    return 0


def cmd_fixture(cfg: RunConfig) -> int:
    from .synthetic import generate_fixture

    cfg.require("out_dir")
    fx = generate_fixture(objects=cfg.objects, gaussians_per_object=cfg.gaussians_per_object, views=cfg.views,
                          resolution=cfg.resolution, seed=cfg.seed, dim=cfg.dim)
    fx.write(cfg.out_dir)
    _say(report.format_kv({"gaussians": len(fx.scene), "objects": len(fx.labels), "views": len(fx.cameras),
                           "labels": ", ".join(fx.labels), "manifest": cfg.out_dir / "manifest.txt"}))
    cfg.save(cfg.out_dir / "config.ini")
    return 0


COMMANDS = {ENCODE: cmd_encode, PARTITION: cmd_partition, QUERY: cmd_query, EVAL: cmd_eval,
            BENCH: cmd_bench, FIXTURE: cmd_fixture}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatembed", description="Language embeddings for Gaussian splat scenes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=DESCRIPTIONS[name], description=DESCRIPTIONS[name])
        add_options(p, name)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args = vars(ns)
    command = args.pop("command")
    config_path = args.pop("config", None)
    try:
        cfg = RunConfig.build(command, args, config_path)
        return COMMANDS[command](cfg)
    except SplatEmbedError as exc:
        print(f"splatembed {command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, MemoryError) as exc:
        print(f"splatembed {command}: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except Exception as exc:  # noqa: BLE001 - anything else is a bug
        print(f"splatembed {command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return SplatEmbedError.exit_code


if __name__ == "__main__":
    sys.exit(main())
