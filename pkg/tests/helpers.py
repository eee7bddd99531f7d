"""Scene, camera and dataset builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from splatembed.providers import DatasetManifest, ImageEntry, save_embeddings, save_masks
from splatembed.scene import CameraPose, GaussianScene, save_cameras


def random_scene(rng, n=100, spread=1.0, depth=(0.0, 0.0), scale=(0.03, 0.15), opacity=(0.05, 1.0)):
    means = np.column_stack([rng.uniform(-spread, spread, (n, 2)), rng.uniform(*depth, n) if depth[1] > depth[0]
                             else np.zeros(n)])
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianScene(means, rng.uniform(*scale, (n, 3)), q, rng.uniform(*opacity, n), rng.uniform(0, 1, (n, 3)))


def front_camera(image_id=0, size=64, distance=4.0, jitter=0.0, rng=None, focal=None):
    """Camera looking down -z at the origin from ``distance`` above, optionally jittered."""
    eye = np.array([0.0, 0.0, distance])
    if jitter and rng is not None:
        eye[:2] += rng.uniform(-jitter, jitter, 2)
    f = focal if focal is not None else 0.9 * size
    return CameraPose.look_at(image_id, eye, [0, 0, 0], [0, 1, 0], f, f, size, size)


def random_masks(rng, count, width, height):
    """Overlapping rectangles and ellipses; never all-zero."""
    yy, xx = np.mgrid[0:height, 0:width]
    out = []
    for j in range(count):
        if j % 2 == 0:
            x0, y0 = rng.integers(0, width - 2), rng.integers(0, height - 2)
            x1, y1 = rng.integers(x0 + 1, width + 1), rng.integers(y0 + 1, height + 1)
            m = (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
        else:
            cx, cy = rng.uniform(0, width), rng.uniform(0, height)
            rx, ry = rng.uniform(2, width / 2), rng.uniform(2, height / 2)
            m = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1
        if not m.any():
            m[height // 2, width // 2] = True
        out.append(m)
    return np.stack(out)


def unit_rows(rng, count, dim):
    v = rng.standard_normal((count, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def write_dataset(root, cameras, masks, embeddings, raster=None):
    """Write masks, embeddings, cameras and a manifest; returns the manifest.

    ``masks[i]`` is a (M, H, W) bool stack and ``embeddings[i]`` its (M, D) rows.
    """
    root.mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    (root / "emb").mkdir(exist_ok=True)
    h, w = masks[0].shape[1:]
    entries = []
    for cam, m, e in zip(cameras, masks, embeddings):
        i = cam.image_id
        save_masks(root / "masks" / f"{i}.rle", list(m), w, h)
        save_embeddings(root / "emb" / f"{i}.emb", e)
        entries.append(ImageEntry(i, None, i, f"masks/{i}.rle", f"emb/{i}.emb"))
    save_cameras(cameras, root / "cameras.txt")
    manifest = DatasetManifest(root, "cameras.txt", (w, h), raster or (w, h), embeddings[0].shape[1], entries)
    manifest.save(root / "manifest.txt")
    return DatasetManifest.load(root / "manifest.txt")


def oracle_dataset(rng, root, n_gauss=40, views=4, size=32, n_masks=5, dim=16):
    """Small random scene plus random masks and embeddings, written to ``root``."""
    scene = random_scene(rng, n_gauss, spread=1.0, depth=(-0.3, 0.3), scale=(0.05, 0.2), opacity=(0.1, 0.95))
    cams = [front_camera(i, size, distance=3.5, jitter=0.8, rng=rng) for i in range(views)]
    masks = [random_masks(rng, n_masks, size, size) for _ in cams]
    embs = [unit_rows(rng, n_masks, dim) for _ in cams]
    manifest = write_dataset(root, cams, masks, embs)
    return scene, cams, masks, embs, manifest


def row_rel_error(a, b):
    """Per-row ||a - b|| / max(||b||, tiny)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.linalg.norm(a - b, axis=1) / np.maximum(np.linalg.norm(b, axis=1), 1e-30)
