"""Per-Gaussian embedding aggregation.

Each view is rasterized with weight capture, the weights are gated by every
mask of that view and summed per Gaussian, and the mask embeddings are then
averaged per Gaussian with those sums as weights::

    E_k = sum_{i,j} (sum_{p in M_j} w_kp) e_j  /  sum_{i,j} sum_{p in M_j} w_kp

Images are split across workers for the masking phase. Aggregation then
walks the Gaussian id range in chunks; inside a chunk every worker sums its
own images into a private accumulator and the accumulators are added in
worker-rank order, so a fixed worker count gives bitwise-reproducible output
for any chunk size.
"""

from __future__ import annotations

import dataclasses
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .errors import ConfigError, ContractError, DataError, FormatError, PipelineError
from .providers import DatasetManifest, load_mask_embeddings, load_maskset, resample_mask
from .rasterizer import WeightMap, rasterize_weights_only
from .scene import GaussianScene

log = logging.getLogger(__name__)

COVERAGE_EPS = 1e-8

_TABLE_MAGIC = b"SLET"
_TABLE_VERSION = 1
_TABLE_HDR = struct.Struct("<4sIQI")

_SPILL_MAGIC = b"SLMW"
_SPILL_HDR = struct.Struct("<4sIIIQ")
SPILL_RECORD = np.dtype([("mask_id", "<u4"), ("gaussian_id", "<u4"), ("weight", "<f4")])


@dataclass
class MaskedWeights:
    image_id: int
    mask_id: int
    gaussian_ids: np.ndarray  # ascending, unique
    weights: np.ndarray  # per-Gaussian sum over the mask's pixels

    def __len__(self):
        return len(self.gaussian_ids)


@dataclass
class PartialAccumulator:
    lo: int
    hi: int
    weighted_sum: np.ndarray
    weight_total: np.ndarray

    @classmethod
    def zeros(cls, lo: int, hi: int, dim: int) -> "PartialAccumulator":
        return cls(lo, hi, np.zeros((hi - lo, dim)), np.zeros(hi - lo))

    @property
    def dim(self) -> int:
        return self.weighted_sum.shape[1]


@dataclass
class EmbeddingTable:
    embeddings: np.ndarray  # (N, D) float32
    coverage: np.ndarray  # (N,) float32

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def covered(self) -> np.ndarray:
        return self.coverage > COVERAGE_EPS

    @classmethod
    def empty(cls, n: int, dim: int) -> "EmbeddingTable":
        return cls(np.zeros((n, dim), np.float32), np.zeros(n, np.float32))


@njit(cache=True, nogil=True)
def _mask_sum(offsets, gids, weights, mask_pixels, scratch, seen):
    touched = np.empty(16, np.int64)
    n = 0
    for i in range(mask_pixels.shape[0]):
        p = mask_pixels[i]
        for e in range(offsets[p], offsets[p + 1]):
            k = gids[e]
            if not seen[k]:
                seen[k] = True
                if n == touched.shape[0]:
                    grown = np.empty(2 * n, np.int64)
                    grown[:n] = touched
                    touched = grown
                touched[n] = k
                n += 1
            scratch[k] += weights[e]
    ks = np.sort(touched[:n])
    ws = np.empty(n, np.float64)
    for i in range(n):
        k = ks[i]
        ws[i] = scratch[k]
        scratch[k] = 0.0
        seen[k] = False
    return ks, ws


@njit(cache=True, nogil=True)
def _accumulate(wsum, wtot, lo, ks, ws, e):
    dim = e.shape[0]
    for i in range(ks.shape[0]):
        r = ks[i] - lo
        w = ws[i]
        wtot[r] += w
        for d in range(dim):
            wsum[r, d] += w * e[d]


class _Scratch:
    def __init__(self, n):
        self.values = np.zeros(max(n, 1))
        self.seen = np.zeros(max(n, 1), dtype=np.bool_)


def _masked(wm: WeightMap, offsets, bitmap, image_id, mask_id, scratch: _Scratch) -> MaskedWeights:
    mask_pixels = np.flatnonzero(bitmap.ravel())
    ks, ws = _mask_sum(offsets, wm.gaussian_ids, wm.weights, mask_pixels, scratch.values, scratch.seen)
    keep = ws > 0
    return MaskedWeights(image_id, mask_id, ks[keep].astype(np.int32), ws[keep])


def mask_weights(wm: WeightMap, bitmap: np.ndarray, image_id: int, mask_id: int) -> MaskedWeights:
    """Sum ``w_kp * M(p)`` over pixels for every Gaussian hit inside the mask."""
    bitmap = np.asarray(bitmap, dtype=bool)
    if bitmap.shape != (wm.height, wm.width):
        raise ContractError(
            f"mask is {bitmap.shape[1]}x{bitmap.shape[0]}, weight map is {wm.width}x{wm.height}"
        )
    n = int(wm.gaussian_ids.max()) + 1 if len(wm) else 0
    return _masked(wm, wm.pixel_offsets(), bitmap, image_id, mask_id, _Scratch(n))


def _restrict(mw: MaskedWeights, lo: int, hi: int):
    a, b = np.searchsorted(mw.gaussian_ids, [lo, hi])
    return mw.gaussian_ids[a:b], mw.weights[a:b]


def accumulate(acc: PartialAccumulator, mw: MaskedWeights, vector) -> PartialAccumulator:
    """Add one mask's weighted embedding into ``acc`` in place.

    ``vector`` may be a :class:`MaskEmbedding` or a plain array. Gaussians
    outside ``[acc.lo, acc.hi)`` are ignored.
    """
    if hasattr(vector, "vector"):
        if (vector.image_id, vector.mask_id) != (mw.image_id, mw.mask_id):
            raise ContractError(
                f"embedding ({vector.image_id}, {vector.mask_id}) paired with masked weights "
                f"({mw.image_id}, {mw.mask_id})"
            )
        vector = vector.vector
    e = np.asarray(vector, dtype=np.float64)
    if e.shape != (acc.dim,):
        raise ContractError(f"embedding dimension {e.shape[-1]} != accumulator dimension {acc.dim}")
    ks, ws = _restrict(mw, acc.lo, acc.hi)
    _accumulate(acc.weighted_sum, acc.weight_total, acc.lo, ks.astype(np.int64), ws, e)
    return acc


def combine_partials(parts: list[PartialAccumulator]) -> PartialAccumulator:
    if not parts:
        raise ContractError("nothing to combine")
    first = parts[0]
    for p in parts[1:]:
        if (p.lo, p.hi) != (first.lo, first.hi) or p.dim != first.dim:
            raise ContractError(
                f"cannot combine range [{p.lo}, {p.hi}) x {p.dim} with [{first.lo}, {first.hi}) x {first.dim}"
            )
    out = PartialAccumulator(first.lo, first.hi, first.weighted_sum.copy(), first.weight_total.copy())
    for p in parts[1:]:
        out.weighted_sum += p.weighted_sum
        out.weight_total += p.weight_total
    return out


def finalize(acc: PartialAccumulator) -> EmbeddingTable:
    coverage = acc.weight_total.astype(np.float32)
    covered = coverage > COVERAGE_EPS
    emb = np.zeros_like(acc.weighted_sum)
    emb[covered] = acc.weighted_sum[covered] / acc.weight_total[covered, None]
    coverage[~covered] = 0.0
    return EmbeddingTable(emb.astype(np.float32), coverage)


def save_table(table: EmbeddingTable, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_TABLE_HDR.pack(_TABLE_MAGIC, _TABLE_VERSION, table.n, table.dim))
        fh.write(np.ascontiguousarray(table.embeddings, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(table.coverage, dtype="<f4").tobytes())


def load_table(path) -> EmbeddingTable:
    data = Path(path).read_bytes()
    if len(data) < _TABLE_HDR.size:
        raise FormatError(f"{path}: truncated table header")
    magic, version, n, dim = _TABLE_HDR.unpack_from(data)
    if magic != _TABLE_MAGIC or version != _TABLE_VERSION:
        raise FormatError(f"{path}: not a version-{_TABLE_VERSION} embedding table")
    expected = _TABLE_HDR.size + 4 * n * (dim + 1)
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {n}x{dim} table, found {len(data)}")
    emb = np.frombuffer(data, "<f4", n * dim, _TABLE_HDR.size).reshape(n, dim).astype(np.float32)
    cov = np.frombuffer(data, "<f4", n, _TABLE_HDR.size + 4 * n * dim).astype(np.float32)
    return EmbeddingTable(emb, cov)


@dataclass
class WorkerStats:
    rank: int
    images: list[int] = field(default_factory=list)
    rasterize_s: float = 0.0
    masking_s: float = 0.0
    io_s: float = 0.0
    aggregate_s: float = 0.0
    masked_entries: int = 0
    spilled_images: int = 0
    status: str = "ok"

    @property
    def total_s(self) -> float:
        return self.rasterize_s + self.masking_s + self.io_s + self.aggregate_s


@dataclass
class EncodeStats:
    workers: list[WorkerStats]
    phase1_s: float = 0.0
    phase2_s: float = 0.0
    chunks: int = 0

    @property
    def total_s(self) -> float:
        return self.phase1_s + self.phase2_s


@dataclass
class _ImageResult:
    image_id: int
    masked: list[MaskedWeights] | None
    vectors: list[np.ndarray]
    spill_path: Path | None = None

    def items(self):
        masked = self.masked if self.masked is not None else _read_spill(self.spill_path)
        return zip(masked, self.vectors)


def _write_spill(path: Path, image_id: int, masked: list[MaskedWeights]) -> None:
    total = sum(len(m) for m in masked)
    rec = np.empty(total, dtype=SPILL_RECORD)
    pos = 0
    for m in masked:
        rec["mask_id"][pos:pos + len(m)] = m.mask_id
        rec["gaussian_id"][pos:pos + len(m)] = m.gaussian_ids
        rec["weight"][pos:pos + len(m)] = m.weights
        pos += len(m)
    with open(path, "wb") as fh:
        fh.write(_SPILL_HDR.pack(_SPILL_MAGIC, 1, image_id, len(masked), total))
        fh.write(rec.tobytes())


def _read_spill(path: Path) -> list[MaskedWeights]:
    data = path.read_bytes()
    _, _, image_id, n_masks, total = _SPILL_HDR.unpack_from(data)
    rec = np.frombuffer(data, SPILL_RECORD, total, _SPILL_HDR.size)
    out = []
    bounds = np.flatnonzero(np.diff(rec["mask_id"].astype(np.int64))) + 1
    for chunk in np.split(rec, bounds) if total else []:
        out.append(MaskedWeights(image_id, int(chunk["mask_id"][0]), chunk["gaussian_id"].astype(np.int32),
                                 chunk["weight"].astype(np.float64)))
    return out


def assign_images(n_images: int, workers: int, contiguous: bool = False) -> list[list[int]]:
    """Image indices per worker: round-robin by default, contiguous blocks on request."""
    if contiguous:
        bounds = np.linspace(0, n_images, workers + 1).round().astype(int)
        return [list(range(bounds[r], bounds[r + 1])) for r in range(workers)]
    return [list(range(r, n_images, workers)) for r in range(workers)]


@dataclass
class EncodeOptions:
    workers: int = 1
    chunk_rows: int | None = None
    raw_falloff: bool = False
    contiguous: bool = False
    spill_dir: str | None = None
    max_resident_entries: int | None = None


def _phase1(rank, image_idx, scene, cov3d, manifest, cams, opts, stats: WorkerStats):
    out = []
    scratch = _Scratch(len(scene))
    resident = 0
    raster_res = tuple(manifest.raster_resolution)
    for idx in image_idx:
        entry = manifest.images[idx]
        stats.images.append(entry.image_id)
        t0 = time.perf_counter()
        masks = load_maskset(manifest, entry.image_id)
        embs = load_mask_embeddings(manifest, entry.image_id, masks)
        t1 = time.perf_counter()
        cam = dataclasses.replace(cams[entry.camera_id].rescaled(*raster_res), image_id=entry.image_id)
        wm = rasterize_weights_only(scene, cam, raw_falloff=opts.raw_falloff, cov3d=cov3d)
        t2 = time.perf_counter()
        offsets = wm.pixel_offsets()
        masked, vectors = [], []
        for m in masks.masks:
            bm = resample_mask(m.bitmap, raster_res)
            mw = _masked(wm, offsets, bm, entry.image_id, m.mask_id, scratch)
            if len(mw):
                masked.append(mw)
                vectors.append(np.asarray(embs[m.mask_id].vector, dtype=np.float64))
        t3 = time.perf_counter()
        n_entries = sum(len(m) for m in masked)
        stats.masked_entries += n_entries
        result = _ImageResult(entry.image_id, masked, vectors)
        if opts.max_resident_entries is not None and resident + n_entries > opts.max_resident_entries:
            if opts.spill_dir is None:
                raise ConfigError("max_resident_entries needs a spill directory")
            path = Path(opts.spill_dir) / f"worker{rank}_image{entry.image_id}.mw"
            _write_spill(path, entry.image_id, masked)
            result = _ImageResult(entry.image_id, None, vectors, path)
            stats.spilled_images += 1
        else:
            resident += n_entries
        out.append(result)
        stats.io_s += t1 - t0
        stats.rasterize_s += t2 - t1
        stats.masking_s += t3 - t2
    return out


def _aggregate_worker(results: list[_ImageResult], lo, hi, dim, stats: WorkerStats):
    t0 = time.perf_counter()
    acc = PartialAccumulator.zeros(lo, hi, dim)
    for res in results:
        for mw, vec in res.items():
            ks, ws = _restrict(mw, lo, hi)
            if len(ks):
                _accumulate(acc.weighted_sum, acc.weight_total, lo, ks.astype(np.int64), ws, vec)
    stats.aggregate_s += time.perf_counter() - t0
    return acc


def _raise_failures(stats: list[WorkerStats], errors: dict[int, BaseException]):
    summary = "; ".join(f"worker {r}: {e}" for r, e in sorted(errors.items()))
    err = PipelineError(f"encode failed ({summary})", {s.rank: s.status for s in stats})
    if all(isinstance(e, DataError) for e in errors.values()):
        err.exit_code = DataError.exit_code
    elif all(isinstance(e, ConfigError) for e in errors.values()):
        err.exit_code = ConfigError.exit_code
    raise err from next(iter(errors.values()))


def run_encode(scene: GaussianScene, manifest: DatasetManifest, opts: EncodeOptions | None = None):
    """Encode ``scene`` and return ``(EmbeddingTable, EncodeStats)``."""
    opts = opts or EncodeOptions()
    if opts.workers < 1:
        raise ConfigError("workers must be >= 1")
    if opts.chunk_rows is not None and opts.chunk_rows < 1:
        raise ConfigError("chunk_rows must be >= 1")
    n, dim = len(scene), manifest.embedding_dim
    cams = manifest.load_cameras()
    cov3d = scene.covariances()
    assignment = assign_images(len(manifest.images), opts.workers, opts.contiguous)
    stats = [WorkerStats(rank=r) for r in range(opts.workers)]
    if opts.spill_dir is not None:
        Path(opts.spill_dir).mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    per_worker: list[list[_ImageResult]] = [[] for _ in range(opts.workers)]
    errors: dict[int, BaseException] = {}
    with ThreadPoolExecutor(max_workers=opts.workers) as pool:
        futures = {
            r: pool.submit(_phase1, r, assignment[r], scene, cov3d, manifest, cams, opts, stats[r])
            for r in range(opts.workers)
        }
        for r, fut in futures.items():
            try:
                per_worker[r] = fut.result()
            except Exception as exc:  # noqa: BLE001 - reported per worker
                stats[r].status = f"failed: {exc}"
                errors[r] = exc
    if errors:
        _raise_failures(stats, errors)
    t1 = time.perf_counter()

    table = EmbeddingTable.empty(n, dim)
    step = n if opts.chunk_rows is None else opts.chunk_rows
    chunks = [(lo, min(lo + step, n)) for lo in range(0, n, max(step, 1))]
    with ThreadPoolExecutor(max_workers=opts.workers) as pool:
        for lo, hi in chunks:
            futures = [pool.submit(_aggregate_worker, per_worker[r], lo, hi, dim, stats[r])
                       for r in range(opts.workers)]
            parts = [f.result() for f in futures]
            part = finalize(combine_partials(parts))
            table.embeddings[lo:hi] = part.embeddings
            table.coverage[lo:hi] = part.coverage
    t2 = time.perf_counter()
    for r in range(opts.workers):
        for res in per_worker[r]:
            if res.spill_path is not None:
                res.spill_path.unlink(missing_ok=True)
    return table, EncodeStats(stats, phase1_s=t1 - t0, phase2_s=t2 - t1, chunks=len(chunks))


def encode_scene(scene: GaussianScene, manifest: DatasetManifest, workers: int = 1,
                 chunk_rows: int | None = None, **options) -> EmbeddingTable:
    table, _ = run_encode(scene, manifest, EncodeOptions(workers=workers, chunk_rows=chunk_rows, **options))
    return table
