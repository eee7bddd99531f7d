"""Synthetic throughput and query-latency workloads."""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pipeline import EmbeddingTable, EncodeOptions, run_encode
from .providers import DatasetManifest, ImageEntry, save_embeddings, save_masks, synth_embedding
from .scene import CameraPose, GaussianScene, save_cameras
from .vecstore import VectorStore


def workload_scene(n: int, seed: int = 0, extent: float = 10.0) -> GaussianScene:
    """Uniform field of small Gaussians over a ``2*extent`` square, two units deep."""
    rng = np.random.default_rng(seed)
    means = np.column_stack([rng.uniform(-extent, extent, (n, 2)), rng.uniform(0.0, 2.0, n)])
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianScene(means, rng.uniform(0.03, 0.1, (n, 3)), q, rng.uniform(0.2, 0.8, n),
                         rng.uniform(0, 1, (n, 3)))


def segment_masks(width: int, height: int, rng, grid: int = 4, extra: int = 3) -> list[np.ndarray]:
    """A grid partition of the frame plus a few overlapping rectangles, like automatic mask output."""
    masks = []
    xs = np.linspace(0, width, grid + 1).astype(int)
    ys = np.linspace(0, height, grid + 1).astype(int)
    for gy in range(grid):
        for gx in range(grid):
            m = np.zeros((height, width), dtype=bool)
            m[ys[gy]:ys[gy + 1], xs[gx]:xs[gx + 1]] = True
            masks.append(m)
    for _ in range(extra):
        x0, y0 = rng.integers(0, width // 2), rng.integers(0, height // 2)
        m = np.zeros((height, width), dtype=bool)
        m[y0:y0 + height // 2, x0:x0 + width // 2] = True
        masks.append(m)
    return masks


def write_workload(out_dir, n_gaussians: int = 100_000, n_images: int = 200, resolution: int = 128,
                   dim: int = 512, seed: int = 0, extent: float = 10.0):
    """Write a scene-independent dataset (cameras, masks, embeddings, manifest)."""
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "emb").mkdir(exist_ok=True)
    rng = np.random.default_rng(seed + 1)
    cams, entries = [], []
    focal = resolution * 0.9
    for i in range(n_images):
        target = np.append(rng.uniform(-0.8 * extent, 0.8 * extent, 2), 1.0)
        eye = target + np.append(rng.uniform(-2, 2, 2), 6.0)
        cams.append(CameraPose.look_at(i, eye, target, [0, 1, 0], focal, focal, resolution, resolution))
        masks = segment_masks(resolution, resolution, rng)
        save_masks(out / "masks" / f"{i:04d}.rle", masks, resolution, resolution)
        vecs = np.stack([synth_embedding(f"view{i}/segment{j}", dim) for j in range(len(masks))])
        save_embeddings(out / "emb" / f"{i:04d}.emb", vecs)
        entries.append(ImageEntry(i, None, i, f"masks/{i:04d}.rle", f"emb/{i:04d}.emb"))
    save_cameras(cams, out / "cameras.txt")
    manifest = DatasetManifest(out, "cameras.txt", (resolution, resolution), (resolution, resolution), dim, entries)
    manifest.save(out / "manifest.txt")
    return manifest


def table_digest(table: EmbeddingTable) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(table.embeddings).tobytes())
    h.update(np.ascontiguousarray(table.coverage).tobytes())
    return h.hexdigest()[:16]


@dataclass
class EncodeRun:
    workers: int
    gaussians: int
    images: int
    seconds: float
    phase1_s: float
    phase2_s: float
    digest: str
    stats: object = None


def bench_encode(scene, manifest, worker_counts=(1, 2, 4, 8), chunk_rows=None) -> list[EncodeRun]:
    runs = []
    for w in worker_counts:
        t0 = time.perf_counter()
        table, stats = run_encode(scene, manifest, EncodeOptions(workers=w, chunk_rows=chunk_rows))
        elapsed = time.perf_counter() - t0
        runs.append(EncodeRun(w, len(scene), len(manifest.images), elapsed, stats.phase1_s,
                              stats.phase2_s, table_digest(table), stats))
        del table
    return runs


def random_store(count: int, dim: int = 512, seed: int = 0, planted: int = 0, query=None,
                 planted_similarity: float = 0.6, block: int = 65536) -> VectorStore:
    """Store of random unit vectors; ``planted`` of them sit near ``query``.

    Built block-wise in float32 to keep peak memory near the final size.
    """
    rng = np.random.default_rng(seed)
    vecs = np.empty((count, dim), dtype=np.float32)
    for lo in range(0, count, block):
        hi = min(lo + block, count)
        vecs[lo:hi] = rng.standard_normal((hi - lo, dim), dtype=np.float32)
    if planted:
        q = np.asarray(query, dtype=np.float32)
        q = q / np.linalg.norm(q)
        rows = rng.choice(count, planted, replace=False)
        noise = vecs[rows]
        noise /= np.linalg.norm(noise, axis=1, keepdims=True)
        vecs[rows] = planted_similarity * q + np.sqrt(1 - planted_similarity ** 2) * noise
    for lo in range(0, count, block):
        blk = vecs[lo:lo + block]
        blk /= np.linalg.norm(blk, axis=1, keepdims=True)
    means = rng.uniform(-50, 50, (count, 3))
    zeros3 = np.zeros((count, 3))
    rot = np.zeros((count, 4))
    rot[:, 0] = 1
    return VectorStore(np.arange(count, dtype=np.int64), vecs, means, zeros3 + 0.05, rot,
                       np.full(count, 0.5), zeros3 + 0.5)


@dataclass
class QueryRun:
    store_size: int
    mode: str
    results: int
    seconds: float


def bench_queries(sizes=(100_000, 1_000_000), dim: int = 512, response: int = 10_000,
                  repeats: int = 3, seed: int = 0) -> list[QueryRun]:
    runs = []
    q = synth_embedding("bench query", dim)
    for size in sizes:
        planted = min(response, size)
        store = random_store(size, dim, seed, planted=planted, query=q)
        for mode in ("topk", "threshold"):
            best, n = np.inf, 0
            for _ in range(repeats):
                t0 = time.perf_counter()
                if mode == "topk":
                    rows, _ = store.topk_rows(q, response)
                else:
                    rows, _ = store.threshold_rows(q, 0.4)
                best = min(best, time.perf_counter() - t0)
                n = len(rows)
            runs.append(QueryRun(size, mode, n, best))
        del store
    return runs
