"""Synthetic scenes with known object membership.

Objects are compact Gaussian clusters laid out on a plane and seen from
above, spaced so that no two objects share a pixel in any view. Masks are
the exact per-object alpha footprints, so the expected embedding of every
Gaussian is its object's label embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .evaluation import LabeledPointCloud
from .providers import DatasetManifest, ImageEntry, save_embeddings, save_masks, synth_embedding
from .rasterizer import rasterize
from .scene import CameraPose, GaussianScene, ImageRGB, save_cameras, save_scene

LABEL_NAMES = [
    "chair", "table", "lamp", "sofa", "plant", "mug", "bookshelf", "monitor",
    "keyboard", "backpack", "bottle", "clock", "pillow", "vase", "teapot", "shoe",
]


def label_names(count: int) -> list[str]:
    return [LABEL_NAMES[i] if i < len(LABEL_NAMES) else f"object_{i}" for i in range(count)]


@dataclass
class SyntheticFixture:
    scene: GaussianScene
    object_of: np.ndarray  # object index per Gaussian
    labels: list[str]
    cameras: list[CameraPose]
    gt_masks: np.ndarray  # (views, objects, H, W) bool
    images: list[ImageRGB]
    dim: int
    cluster_radius: float
    seed: int
    points: LabeledPointCloud | None = None
    segments: np.ndarray | None = None
    manifest: DatasetManifest | None = field(default=None, repr=False)

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.cameras[0].width, self.cameras[0].height)

    def label_vectors(self) -> list[tuple[int, np.ndarray]]:
        return [(j, synth_embedding(name, self.dim)) for j, name in enumerate(self.labels)]

    def write(self, out_dir, write_images: bool = True) -> DatasetManifest:
        """Write scene, cameras, masks, embeddings, ground truth and a manifest."""
        out = Path(out_dir)
        for sub in ("masks", "emb", "gt", "gt/masks", "rgb"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        save_scene(self.scene, out / "scene.ply")
        save_cameras(self.cameras, out / "cameras.txt")
        w, h = self.resolution
        vectors = np.stack([synth_embedding(name, self.dim) for name in self.labels])
        entries = []
        for v, cam in enumerate(self.cameras):
            i = cam.image_id
            save_masks(out / "masks" / f"{i:04d}.rle", list(self.gt_masks[v]), w, h)
            # Ground truth keeps one mask per label, in label order.
            save_masks(out / "gt" / "masks" / f"{i:04d}.rle", list(self.gt_masks[v]), w, h)
            save_embeddings(out / "emb" / f"{i:04d}.emb", vectors)
            rgb = None
            if write_images:
                rgb = f"rgb/{i:04d}.png"
                self.images[v].save(out / rgb)
            entries.append(ImageEntry(i, rgb, i, f"masks/{i:04d}.rle", f"emb/{i:04d}.emb"))
        (out / "labels.txt").write_text("\n".join(self.labels) + "\n", encoding="utf-8")
        np.savetxt(out / "gt" / "object_of.txt", self.object_of, fmt="%d")
        if self.points is not None:
            from .evaluation import save_point_cloud, save_segments

            save_point_cloud(self.points, out / "gt" / "points.txt")
            save_segments(self.segments, out / "gt" / "segments.txt")
        manifest = DatasetManifest(out, "cameras.txt", (w, h), (w, h), self.dim, entries)
        manifest.save(out / "manifest.txt")
        self.manifest = manifest
        return manifest


def _random_quats(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def generate_fixture(objects: int = 5, gaussians_per_object: int = 200, views: int = 8,
                     resolution: int | tuple[int, int] = 128, seed: int = 0, dim: int = 512,
                     cluster_radius: float = 0.35, spacing: float = 1.25,
                     opacity_range=(0.3, 0.7), scale_range=(0.02, 0.05),
                     flatten: float = 0.25) -> SyntheticFixture:
    if min(objects, gaussians_per_object, views) < 1:
        raise ConfigError("objects, gaussians_per_object and views must be positive")
    width, height = (resolution, resolution) if np.isscalar(resolution) else resolution
    rng = np.random.default_rng(seed)
    support = cluster_radius + 3.0 * scale_range[1]
    if spacing <= 2.0 * support:
        raise ConfigError(f"spacing {spacing} does not separate clusters of 3-sigma radius {support:.3f}")

    cols = int(np.ceil(np.sqrt(objects)))
    rows = int(np.ceil(objects / cols))
    centers = np.array([[(j % cols) - (cols - 1) / 2, (j // cols) - (rows - 1) / 2, 0.0]
                        for j in range(objects)]) * spacing

    n = objects * gaussians_per_object
    obj = np.repeat(np.arange(objects), gaussians_per_object)
    direction = rng.standard_normal((n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = cluster_radius * rng.uniform(0, 1, n) ** (1 / 3)
    # Squashing clusters along the view axis keeps interior Gaussians observable.
    offsets = direction * radius[:, None]
    offsets[:, 2] *= flatten
    means = centers[obj] + offsets
    scales = rng.uniform(*scale_range, size=(n, 3))
    base = rng.uniform(0.1, 0.9, size=(objects, 3))
    colors = np.clip(base[obj] + rng.normal(0, 0.05, (n, 3)), 0, 1)
    scene = GaussianScene(means, scales, _random_quats(rng, n), rng.uniform(*opacity_range, n), colors)

    extent = np.abs(centers[:, :2]).max() + support
    height_above = 4.0 + 2.0 * extent
    focal = 0.42 * min(width, height) * height_above / (extent * 1.25)
    cameras = []
    for v in range(views):
        tilt = rng.uniform(-0.15, 0.15, 2) * height_above
        eye = np.array([tilt[0], tilt[1], height_above])
        target = rng.uniform(-0.05, 0.05, 3) * extent
        target[2] = 0.0
        cameras.append(CameraPose.look_at(v, eye, target, [0, 1, 0], focal, focal, width, height))

    cov3d = scene.covariances()
    gt = np.zeros((views, objects, height, width), dtype=bool)
    images = []
    for v, cam in enumerate(cameras):
        img, wm = rasterize(scene, cam, cov3d=cov3d)
        images.append(img)
        owner = obj[wm.gaussian_ids]
        footprint = np.zeros((objects, height * width), dtype=bool)
        footprint[owner, wm.pixels] = True
        if np.any(footprint.sum(axis=0) > 1):
            raise DataError(f"objects overlap on screen in view {v}; increase spacing")
        alpha = np.zeros((objects, height * width))
        np.add.at(alpha, (owner, wm.pixels), wm.weights)
        gt[v] = (alpha > 0.5).reshape(objects, height, width)
    missing = np.flatnonzero(~gt.any(axis=(0, 2, 3)))
    if missing.size:
        raise DataError(f"object {missing[0]} is not visible in any view")

    noise = rng.normal(0, 0.1 * cluster_radius, (n, 3))
    cloud = LabeledPointCloud(means + noise, obj.copy())
    return SyntheticFixture(scene, obj, label_names(objects), cameras, gt, images, dim,
                            cluster_radius, seed, points=cloud, segments=obj.copy())
