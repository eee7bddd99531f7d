"""Inputs that stand in for the segmenter and image-embedding models.

Masks and their embeddings are produced upstream and read from files listed
in a dataset manifest. This module owns those file formats, the crop
preparation an external embedder consumes, and a deterministic synthetic
embedding used by tests and fixtures.

Mask file (little-endian)::

    magic "SLRL" | u32 version | u32 width | u32 height | u32 mask_count
    per mask: u32 mask_id | u32 run_count | u32 runs[run_count]

Runs alternate between 0 and 1 pixels over the row-major bitmap, starting
with a (possibly empty) run of zeros.

Embedding file (little-endian)::

    magic "SLEM" | u32 version | u32 dim | u32 count | f32 records[count][dim]

Record ``j`` is the embedding of mask ``j``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError, FormatError
from .scene import ImageRGB, to_uint8

log = logging.getLogger(__name__)

_RLE_MAGIC = b"SLRL"
_EMB_MAGIC = b"SLEM"
_VERSION = 1
_HDR = struct.Struct("<4sIIII")
_EMB_HDR = struct.Struct("<4sIII")

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


@dataclass
class Mask:
    mask_id: int
    bitmap: np.ndarray  # (height, width) bool
    bbox: tuple[int, int, int, int] | None  # x0, y0, x1, y1 inclusive

    @property
    def area(self) -> int:
        return int(self.bitmap.sum())


@dataclass
class MaskSet:
    image_id: int
    width: int
    height: int
    masks: list[Mask] = field(default_factory=list)
    declared: int = 0  # mask streams in the file, empty ones included

    def __len__(self):
        return len(self.masks)


@dataclass
class MaskEmbedding:
    image_id: int
    mask_id: int
    vector: np.ndarray


def tight_bbox(bitmap: np.ndarray):
    ys = np.flatnonzero(bitmap.any(axis=1))
    if ys.size == 0:
        return None
    xs = np.flatnonzero(bitmap.any(axis=0))
    return (int(xs[0]), int(ys[0]), int(xs[-1]), int(ys[-1]))


def rle_encode(bitmap: np.ndarray) -> np.ndarray:
    flat = np.asarray(bitmap, dtype=bool).ravel()
    if flat.size == 0:
        return np.zeros(0, dtype=np.uint32)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate([[0], runs])
    return runs.astype(np.uint32)


def rle_decode(runs, width: int, height: int) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64)
    if runs.sum() != width * height:
        raise FormatError(f"RLE covers {runs.sum()} pixels, expected {width * height}")
    values = (np.arange(len(runs)) % 2).astype(bool)
    return np.repeat(values, runs).reshape(height, width)


def save_masks(path, bitmaps, width: int, height: int) -> None:
    with open(path, "wb") as fh:
        fh.write(_HDR.pack(_RLE_MAGIC, _VERSION, width, height, len(bitmaps)))
        for j, bm in enumerate(bitmaps):
            if bm.shape != (height, width):
                raise ContractError(f"mask shape {bm.shape} does not match {(height, width)}")
            runs = rle_encode(bm)
            fh.write(struct.pack("<II", j, len(runs)))
            fh.write(runs.astype("<u4").tobytes())


def read_masks(path, image_id: int = 0) -> MaskSet:
    """Decode every mask stream; all-zero masks are dropped but keep their slot."""
    data = Path(path).read_bytes()
    if len(data) < _HDR.size:
        raise FormatError(f"{path}: truncated mask header")
    magic, version, width, height, count = _HDR.unpack_from(data)
    if magic != _RLE_MAGIC or version != _VERSION:
        raise FormatError(f"{path}: not a version-{_VERSION} mask file")
    off = _HDR.size
    ms = MaskSet(image_id, width, height, declared=count)
    for _ in range(count):
        if off + 8 > len(data):
            raise FormatError(f"{path}: truncated mask stream")
        mask_id, nruns = struct.unpack_from("<II", data, off)
        off += 8
        if off + 4 * nruns > len(data):
            raise FormatError(f"{path}: truncated runs for mask {mask_id}")
        runs = np.frombuffer(data, dtype="<u4", count=nruns, offset=off)
        off += 4 * nruns
        bm = rle_decode(runs, width, height)
        bbox = tight_bbox(bm)
        if bbox is not None:
            ms.masks.append(Mask(mask_id, bm, bbox))
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes after {count} masks")
    return ms


def save_embeddings(path, vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors, dtype="<f4")
    if vectors.ndim != 2:
        raise DataError("embeddings must be a 2D array")
    with open(path, "wb") as fh:
        fh.write(_EMB_HDR.pack(_EMB_MAGIC, _VERSION, vectors.shape[1], vectors.shape[0]))
        fh.write(vectors.tobytes())


def read_embeddings(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _EMB_HDR.size:
        raise FormatError(f"{path}: truncated embedding header")
    magic, version, dim, count = _EMB_HDR.unpack_from(data)
    if magic != _EMB_MAGIC or version != _VERSION:
        raise FormatError(f"{path}: not a version-{_VERSION} embedding file")
    if len(data) - _EMB_HDR.size != 4 * dim * count:
        raise FormatError(f"{path}: header declares {count}x{dim} floats, body has {(len(data) - _EMB_HDR.size) // 4}")
    vec = np.frombuffer(data, dtype="<f4", offset=_EMB_HDR.size).reshape(count, dim)
    if not np.isfinite(vec).all():
        raise DataError(f"{path}: non-finite embedding value")
    return vec


@dataclass
class ImageEntry:
    image_id: int
    rgb: str | None
    camera_id: int
    masks: str
    embeddings: str


@dataclass
class DatasetManifest:
    """Dataset index.

    Text layout: ``key = value`` lines (``cameras``, ``mask_resolution``,
    ``raster_resolution``, ``embedding_dim``), then an ``[images]`` section
    with one ``image_id rgb camera_id masks embeddings`` record per line.
    Paths are relative to the manifest's directory; ``-`` marks a missing RGB.
    """

    root: Path
    cameras: str
    mask_resolution: tuple[int, int]
    raster_resolution: tuple[int, int]
    embedding_dim: int
    images: list[ImageEntry]

    def path(self, rel) -> Path:
        return self.root / rel

    def entry(self, image_id: int) -> ImageEntry:
        for e in self.images:
            if e.image_id == image_id:
                return e
        raise DataError(f"image {image_id} is not in the manifest")

    def load_cameras(self):
        from .scene import load_cameras

        cams = {c.image_id: c for c in load_cameras(self.path(self.cameras))}
        for e in self.images:
            if e.camera_id not in cams:
                raise DataError(f"image {e.image_id}: camera {e.camera_id} not found in {self.cameras}")
        return cams

    def save(self, path) -> None:
        lines = [
            "# splatembed dataset manifest",
            f"cameras = {self.cameras}",
            f"mask_resolution = {self.mask_resolution[0]} {self.mask_resolution[1]}",
            f"raster_resolution = {self.raster_resolution[0]} {self.raster_resolution[1]}",
            f"embedding_dim = {self.embedding_dim}",
            "",
            "[images]",
        ]
        for e in self.images:
            lines.append(f"{e.image_id} {e.rgb or '-'} {e.camera_id} {e.masks} {e.embeddings}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"manifest not found: {path}")
        kv: dict[str, str] = {}
        images = []
        in_images = False
        for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line == "[images]":
                in_images = True
                continue
            if in_images:
                tok = line.split()
                if len(tok) != 5:
                    raise FormatError(f"{path}:{lineno}: image record needs 5 fields")
                try:
                    images.append(ImageEntry(int(tok[0]), None if tok[1] == "-" else tok[1], int(tok[2]), tok[3], tok[4]))
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from None
            else:
                if "=" not in line:
                    raise FormatError(f"{path}:{lineno}: expected 'key = value'")
                k, v = (s.strip() for s in line.split("=", 1))
                kv[k] = v
        for key in ("cameras", "mask_resolution", "raster_resolution"):
            if key not in kv:
                raise FormatError(f"{path}: missing '{key}'")

        def res(v):
            w, h = (int(x) for x in v.split())
            if w <= 0 or h <= 0:
                raise FormatError(f"{path}: resolution must be positive")
            return (w, h)

        ids = [e.image_id for e in images]
        if len(set(ids)) != len(ids):
            raise DataError(f"{path}: duplicate image ids")
        return cls(path.parent, kv["cameras"], res(kv["mask_resolution"]), res(kv["raster_resolution"]),
                   int(kv.get("embedding_dim", 512)), images)


def load_maskset(manifest: DatasetManifest, image_id: int) -> MaskSet:
    entry = manifest.entry(image_id)
    p = manifest.path(entry.masks)
    if not p.is_file():
        raise DataError(f"image {image_id}: mask file {p} is missing")
    ms = read_masks(p, image_id)
    if (ms.width, ms.height) != tuple(manifest.mask_resolution):
        raise DataError(
            f"image {image_id}: masks are {ms.width}x{ms.height}, manifest says "
            f"{manifest.mask_resolution[0]}x{manifest.mask_resolution[1]}"
        )
    return ms


def load_mask_embeddings(manifest: DatasetManifest, image_id: int, masks: MaskSet | None = None) -> list[MaskEmbedding]:
    entry = manifest.entry(image_id)
    p = manifest.path(entry.embeddings)
    if not p.is_file():
        raise DataError(f"image {image_id}: embedding file {p} is missing")
    vec = read_embeddings(p)
    if vec.shape[1] != manifest.embedding_dim:
        raise DataError(f"image {image_id}: embedding dim {vec.shape[1]} != manifest dim {manifest.embedding_dim}")
    if masks is None:
        masks = load_maskset(manifest, image_id)
    if vec.shape[0] != masks.declared:
        raise DataError(f"image {image_id}: {vec.shape[0]} embeddings for {masks.declared} masks")
    return [MaskEmbedding(image_id, j, vec[j]) for j in range(vec.shape[0])]


def prepare_crops(image: ImageRGB, masks: MaskSet, out_dir) -> list[Path]:
    """Write one white-background PNG crop per mask, named ``{image_id}_{mask_id}.png``."""
    if (image.width, image.height) != (masks.width, masks.height):
        raise ContractError(
            f"image {image.width}x{image.height} does not match mask resolution {masks.width}x{masks.height}"
        )
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for m in masks.masks:
        if m.bbox is None:
            log.warning("image %s mask %s is empty; no crop written", image.image_id, m.mask_id)
            continue
        crop = crop_array(image.pixels, m)
        path = out_dir / f"{image.image_id}_{m.mask_id}.png"
        Image.fromarray(to_uint8(crop)).save(path)
        written.append(path)
    return written


def crop_array(pixels: np.ndarray, mask: Mask) -> np.ndarray:
    x0, y0, x1, y1 = mask.bbox
    out = np.where(mask.bitmap[..., None], pixels, 1.0)
    return out[y0:y1 + 1, x0:x1 + 1]


def resample_mask(bitmap: np.ndarray, target_resolution) -> np.ndarray:
    """Nearest-neighbor resample of a binary mask to ``(width, height)``."""
    h, w = bitmap.shape
    tw, th = target_resolution
    if (tw, th) == (w, h):
        return np.asarray(bitmap, dtype=bool).copy()
    ys = np.minimum(((np.arange(th) + 0.5) * h / th).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(tw) + 0.5) * w / tw).astype(np.int64), w - 1)
    return np.asarray(bitmap, dtype=bool)[np.ix_(ys, xs)]


def fnv1a64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def synth_embedding(label: str, dim: int = 512) -> np.ndarray:
    """Deterministic unit vector for a label (stand-in for a text/image embedder)."""
    if dim < 2:
        raise ConfigError("embedding dimension must be at least 2")
    rng = np.random.Generator(np.random.PCG64(fnv1a64(label.encode("utf-8"))))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)
