"""EWA-style projection of 3D Gaussians into a pinhole camera."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import CameraPose, Gaussian3D, GaussianScene, covariances

NEAR_PLANE = 0.01
LOWPASS = 0.3


@dataclass(frozen=True)
class Projected2D:
    gaussian_id: int
    mu2d: np.ndarray
    cov2d: tuple[float, float, float]  # (a, b, c) of [[a, b], [b, c]]
    depth: float
    visible: bool

    def cov_matrix(self) -> np.ndarray:
        a, b, c = self.cov2d
        return np.array([[a, b], [b, c]])


@dataclass
class ProjectedBatch:
    """Projection of a whole scene; arrays are indexed by Gaussian id."""

    mu2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 3) as (a, b, c)
    depth: np.ndarray
    visible: np.ndarray

    def conics(self) -> np.ndarray:
        """Inverse covariances as (A, B, C) of [[A, B], [B, C]]."""
        a, b, c = self.cov2d.T
        det = a * c - b * b
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.stack([c / det, -b / det, a / det], axis=1)


def project_scene(scene: GaussianScene, cam: CameraPose, cov3d: np.ndarray | None = None) -> ProjectedBatch:
    R = np.asarray(cam.R, dtype=np.float64)
    xc = scene.means @ R.T + np.asarray(cam.t, dtype=np.float64)
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    visible = z > NEAR_PLANE
    zs = np.where(visible, z, 1.0)
    inv_z = 1.0 / zs
    mu2d = np.stack([cam.fx * x * inv_z + cam.cx, cam.fy * y * inv_z + cam.cy], axis=1)

    n = len(scene)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx * inv_z
    J[:, 0, 2] = -cam.fx * x * inv_z * inv_z
    J[:, 1, 1] = cam.fy * inv_z
    J[:, 1, 2] = -cam.fy * y * inv_z * inv_z
    if cov3d is None:
        cov3d = covariances(scene.scales, scene.rotations)
    M = J @ R
    cov = M @ cov3d @ np.swapaxes(M, 1, 2)
    cov2d = np.stack([cov[:, 0, 0] + LOWPASS, 0.5 * (cov[:, 0, 1] + cov[:, 1, 0]), cov[:, 1, 1] + LOWPASS], axis=1)
    return ProjectedBatch(mu2d=mu2d, cov2d=cov2d, depth=z, visible=visible)


def project_gaussian(g: Gaussian3D, cam: CameraPose) -> Projected2D:
    scene = GaussianScene(g.mean[None], g.scale[None], g.rotation[None], [g.opacity], g.color[None])
    batch = project_scene(scene, cam)
    return Projected2D(
        gaussian_id=g.id,
        mu2d=batch.mu2d[0],
        cov2d=tuple(float(v) for v in batch.cov2d[0]),
        depth=float(batch.depth[0]),
        visible=bool(batch.visible[0]),
    )


def depth_order(depth: np.ndarray, ids: np.ndarray | None = None) -> np.ndarray:
    """Indices sorting by ascending depth, ties broken by ascending id."""
    if ids is None:
        ids = np.arange(len(depth))
    return np.lexsort((ids, depth))


def depth_sort(projected: list[Projected2D]) -> list[Projected2D]:
    if not projected:
        return []
    depth = np.array([p.depth for p in projected])
    ids = np.array([p.gaussian_id for p in projected])
    return [projected[i] for i in depth_order(depth, ids)]
