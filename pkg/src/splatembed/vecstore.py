"""Flat cosine-similarity store over per-Gaussian embeddings.

Records keep the unit embedding (float32) and the Gaussian parameters as
payload. Search is an exact scan: a float32 matrix-vector product selects
candidates, and every candidate near the cut is rescored in float64 so the
returned ranking matches a float64 brute-force scan.

Snapshot file (little-endian)::

    magic "SLSNAP\\0\\0" | u32 version | u32 dim | u64 count
    i32 cell[3] | f64 lo[3] | f64 hi[3]
    records[count]: i64 id | f32 vector[dim] | f64 mean[3] | f64 scale[3]
                    | f64 rotation[4] | f64 opacity | f64 color[3]
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError, FormatError
from .pipeline import EmbeddingTable
from .scene import GaussianScene

SNAPSHOT_MAGIC = b"SLSNAP\0\0"
SNAPSHOT_VERSION = 1
_SNAP_HDR = struct.Struct("<8sIIQ3i3d3d")

# float32 dot products of unit vectors err by far less than this
_RESCORE_MARGIN = 1e-4


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([
        ("id", "<i8"), ("vector", "<f4", (dim,)), ("mean", "<f8", (3,)), ("scale", "<f8", (3,)),
        ("rotation", "<f8", (4,)), ("opacity", "<f8"), ("color", "<f8", (3,)),
    ])


@dataclass
class VectorStore:
    ids: np.ndarray  # int64
    vectors: np.ndarray  # (count, dim) float32, unit rows
    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    @property
    def count(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.count

    @classmethod
    def empty(cls, dim: int) -> "VectorStore":
        return cls(np.zeros(0, np.int64), np.zeros((0, dim), np.float32), np.zeros((0, 3)),
                   np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    def take(self, rows) -> "VectorStore":
        rows = np.asarray(rows, dtype=np.int64)
        return VectorStore(self.ids[rows], self.vectors[rows], self.means[rows], self.scales[rows],
                           self.rotations[rows], self.opacities[rows], self.colors[rows])

    def payload(self, row: int) -> dict:
        return {
            "mean": self.means[row], "scale": self.scales[row], "rotation": self.rotations[row],
            "opacity": float(self.opacities[row]), "color": self.colors[row],
        }

    def as_scene(self, rows=None) -> GaussianScene:
        s = self if rows is None else self.take(rows)
        return GaussianScene(s.means, s.scales, s.rotations, s.opacities, s.colors)

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if self.count == 0:
            return np.zeros(3), np.zeros(3)
        return self.means.min(axis=0), self.means.max(axis=0)

    # -- search -----------------------------------------------------------

    def _unit_query(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64).ravel()
        if q.shape[0] != self.dim:
            raise ContractError(f"query dimension {q.shape[0]} != store dimension {self.dim}")
        norm = np.linalg.norm(q)
        if not norm > 0:
            raise ContractError("query vector has zero norm")
        return q / norm

    def _rescore(self, rows: np.ndarray, q: np.ndarray) -> np.ndarray:
        return self.vectors[rows].astype(np.float64) @ q

    def _ranked(self, rows, sims):
        order = np.lexsort((self.ids[rows], -sims))
        return rows[order], sims[order]

    def topk_rows(self, q, k: int):
        q = self._unit_query(q)
        if k <= 0 or self.count == 0:
            return np.zeros(0, np.int64), np.zeros(0)
        if k >= self.count:
            rows = np.arange(self.count)
            return self._ranked(rows, self._rescore(rows, q))
        approx = self.vectors @ q.astype(np.float32)
        kth = np.partition(approx, self.count - k)[self.count - k]
        rows = np.flatnonzero(approx >= kth - _RESCORE_MARGIN)
        rows, sims = self._ranked(rows, self._rescore(rows, q))
        return rows[:k], sims[:k]

    def threshold_rows(self, q, tau: float):
        if not -1.0 <= tau <= 1.0:
            raise ConfigError(f"threshold {tau} outside [-1, 1]")
        q = self._unit_query(q)
        if self.count == 0:
            return np.zeros(0, np.int64), np.zeros(0)
        approx = self.vectors @ q.astype(np.float32)
        rows = np.flatnonzero(approx >= tau - _RESCORE_MARGIN)
        sims = self._rescore(rows, q)
        keep = sims >= tau
        return self._ranked(rows[keep], sims[keep])


def build_store(table: EmbeddingTable, scene: GaussianScene) -> VectorStore:
    if table.n != len(scene):
        raise ContractError(f"table has {table.n} rows but scene has {len(scene)} Gaussians")
    rows = np.flatnonzero(table.covered)
    vec = table.embeddings[rows].astype(np.float64)
    norms = np.linalg.norm(vec, axis=1)
    if np.any(norms == 0):
        raise DataError(f"covered gaussian {rows[np.argmin(norms)]} has a zero embedding")
    unit = (vec / norms[:, None]).astype(np.float32)
    return VectorStore(rows.astype(np.int64), unit, scene.means[rows], scene.scales[rows],
                       scene.rotations[rows], scene.opacities[rows], scene.colors[rows])


def query_topk(store: VectorStore, q, k: int) -> list[tuple[int, float]]:
    rows, sims = store.topk_rows(q, k)
    return [(int(store.ids[r]), float(s)) for r, s in zip(rows, sims)]


def query_threshold(store: VectorStore, q, tau: float) -> list[tuple[int, float]]:
    rows, sims = store.threshold_rows(q, tau)
    return [(int(store.ids[r]), float(s)) for r, s in zip(rows, sims)]


@dataclass
class PartitionSnapshot:
    cell: tuple[int, int, int]
    lo: np.ndarray
    hi: np.ndarray
    store: VectorStore
    version: int = SNAPSHOT_VERSION

    def intersects_ball(self, center, radius: float) -> bool:
        c = np.asarray(center, dtype=np.float64)
        nearest = np.clip(c, self.lo, self.hi)
        return float(np.sum((nearest - c) ** 2)) <= radius * radius


def partition_store(store: VectorStore, cell_size: float, origin=None) -> list[PartitionSnapshot]:
    """Split records over a uniform grid of half-open cells anchored at the bbox minimum.

    The grid spans ``ceil(extent / cell_size)`` cells per axis (at least one);
    points on the far bbox face belong to the last cell.
    """
    if not cell_size > 0:
        raise ConfigError(f"cell_size must be positive, got {cell_size}")
    if store.count == 0:
        return []
    lo, hi = store.bbox
    if origin is not None:
        lo = np.asarray(origin, dtype=np.float64)
    ncell = np.maximum(1, np.ceil((hi - lo) / cell_size).astype(np.int64))
    idx = np.floor((store.means - lo) / cell_size).astype(np.int64)
    idx = np.clip(idx, 0, ncell - 1)
    # Reconcile with the bounds as they are computed below.
    for _ in range(2):
        cell_lo = lo + idx * cell_size
        cell_hi = lo + (idx + 1) * cell_size
        idx = np.where((store.means < cell_lo) & (idx > 0), idx - 1, idx)
        idx = np.where((store.means >= cell_hi) & (idx < ncell - 1), idx + 1, idx)
    keys, inverse = np.unique(idx, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    order = np.argsort(inverse, kind="stable")
    splits = np.searchsorted(inverse[order], np.arange(1, len(keys)))
    snaps = []
    for key, rows in zip(keys, np.split(order, splits)):
        cell_lo = lo + key * cell_size
        cell_hi = lo + (key + 1) * cell_size
        snaps.append(PartitionSnapshot(tuple(int(v) for v in key), cell_lo, cell_hi, store.take(rows)))
    return snaps


def merge_stores(stores: list[VectorStore], dim: int) -> VectorStore:
    if not stores:
        return VectorStore.empty(dim)
    cat = lambda name: np.concatenate([getattr(s, name) for s in stores])  # noqa: E731
    return VectorStore(cat("ids"), cat("vectors"), cat("means"), cat("scales"),
                       cat("rotations"), cat("opacities"), cat("colors"))


def select_partitions(snapshots: list[PartitionSnapshot], center, radius: float, dim: int | None = None) -> VectorStore:
    """Merge every snapshot whose cell box touches the ball ``(center, radius)``."""
    if radius < 0:
        raise ConfigError("radius must be >= 0")
    chosen = [s.store for s in snapshots if s.intersects_ball(center, radius)]
    if dim is None:
        dim = snapshots[0].store.dim if snapshots else 0
    return merge_stores(chosen, dim)


def save_snapshot(snap: PartitionSnapshot, path) -> None:
    s = snap.store
    rec = np.empty(s.count, dtype=_record_dtype(s.dim))
    rec["id"] = s.ids
    rec["vector"] = s.vectors
    rec["mean"] = s.means
    rec["scale"] = s.scales
    rec["rotation"] = s.rotations
    rec["opacity"] = s.opacities
    rec["color"] = s.colors
    with open(path, "wb") as fh:
        fh.write(_SNAP_HDR.pack(SNAPSHOT_MAGIC, snap.version, s.dim, s.count, *snap.cell, *snap.lo, *snap.hi))
        fh.write(rec.tobytes())


def load_snapshot(path) -> PartitionSnapshot:
    data = Path(path).read_bytes()
    if len(data) < _SNAP_HDR.size:
        raise FormatError(f"{path}: truncated snapshot header")
    head = _SNAP_HDR.unpack_from(data)
    magic, version, dim, count = head[:4]
    if magic != SNAPSHOT_MAGIC:
        raise FormatError(f"{path}: bad snapshot magic")
    if version != SNAPSHOT_VERSION:
        raise FormatError(f"{path}: snapshot version {version}, expected {SNAPSHOT_VERSION}")
    dt = _record_dtype(dim)
    if len(data) - _SNAP_HDR.size != count * dt.itemsize:
        raise FormatError(f"{path}: expected {count} records")
    rec = np.frombuffer(data, dt, count, _SNAP_HDR.size)
    store = VectorStore(rec["id"].copy(), rec["vector"].copy(), rec["mean"].copy(), rec["scale"].copy(),
                        rec["rotation"].copy(), rec["opacity"].copy(), rec["color"].copy())
    return PartitionSnapshot(tuple(head[4:7]), np.array(head[7:10]), np.array(head[10:13]), store, version)


def write_partitions(snapshots: list[PartitionSnapshot], out_dir, cell_size: float) -> Path:
    """Write every snapshot plus a JSON index listing cell, bounds, path and count."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in snapshots:
        name = "cell_{}_{}_{}.snap".format(*s.cell)
        save_snapshot(s, out_dir / name)
        entries.append({"cell": list(s.cell), "lo": s.lo.tolist(), "hi": s.hi.tolist(),
                        "path": name, "count": s.store.count})
    index = out_dir / "partitions.json"
    dim = snapshots[0].store.dim if snapshots else 0
    index.write_text(json.dumps({"cell_size": cell_size, "dim": dim, "snapshots": entries}, indent=1))
    return index


def read_partition_index(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot read partition index ({exc})") from None
    doc["root"] = path.parent
    return doc


def load_partitions(index_path, center=None, radius: float | None = None) -> tuple[list[PartitionSnapshot], int]:
    """Load the snapshots named in an index, only those touching the ball when one is given."""
    doc = read_partition_index(index_path)
    snaps = []
    for e in doc["snapshots"]:
        if center is not None:
            probe = PartitionSnapshot(tuple(e["cell"]), np.array(e["lo"]), np.array(e["hi"]), None)
            if not probe.intersects_ball(center, radius):
                continue
        snaps.append(load_snapshot(doc["root"] / e["path"]))
    return snaps, int(doc.get("dim", 0))
