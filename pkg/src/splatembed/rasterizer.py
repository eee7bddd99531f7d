"""Tile-based CPU rasterizer that records per-pixel contribution weights.

Every Gaussian that adds to a pixel during front-to-back compositing leaves a
``(pixel, gaussian_id, weight)`` triplet in a :class:`WeightMap`. The rendered
color is the weight-normalized blend of Gaussian colors, so the captured
triplets reproduce the image exactly.

A Gaussian's support is clipped at Mahalanobis distance 3; tiles cull with
the axis-aligned box of that ellipse, which makes tiled and naive traversal
produce identical output.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import FormatError, NumericError
from .projection import LOWPASS, NEAR_PLANE, Projected2D, depth_order, project_scene
from .scene import CameraPose, GaussianScene, ImageRGB

TILE = 16
WEIGHT_CUTOFF = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4
SUPPORT_SIGMA = 3.0
NORM_EPS = 1e-6

_WM_MAGIC = b"SLWM"
_WM_VERSION = 1
_WM_HEADER = struct.Struct("<4sIIIIQ")
WM_RECORD = np.dtype([("pixel", "<u4"), ("gaussian_id", "<u4"), ("weight", "<f4")])


@dataclass
class WeightMap:
    image_id: int
    width: int
    height: int
    pixels: np.ndarray  # int32 linear index y * width + x
    gaussian_ids: np.ndarray  # int32
    weights: np.ndarray  # float64
    per_pixel_total: np.ndarray  # (height * width,)

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.width, self.height)

    def __len__(self) -> int:
        return len(self.weights)

    def pixel_offsets(self) -> np.ndarray:
        """CSR offsets: entries of pixel p live in ``[off[p], off[p + 1])``."""
        counts = np.bincount(self.pixels, minlength=self.width * self.height)
        off = np.zeros(len(counts) + 1, dtype=np.int64)
        np.cumsum(counts, out=off[1:])
        return off

    def per_gaussian_totals(self, n_gaussians: int) -> np.ndarray:
        return np.bincount(self.gaussian_ids, weights=self.weights, minlength=n_gaussians)

    def dump(self, path) -> None:
        rec = np.empty(len(self), dtype=WM_RECORD)
        rec["pixel"] = self.pixels
        rec["gaussian_id"] = self.gaussian_ids
        rec["weight"] = self.weights
        with open(path, "wb") as fh:
            fh.write(_WM_HEADER.pack(_WM_MAGIC, _WM_VERSION, self.image_id, self.width, self.height, len(rec)))
            fh.write(rec.tobytes())

    @classmethod
    def load(cls, path) -> "WeightMap":
        with open(path, "rb") as fh:
            head = fh.read(_WM_HEADER.size)
            if len(head) != _WM_HEADER.size:
                raise FormatError(f"{path}: truncated weight-map header")
            magic, version, image_id, width, height, count = _WM_HEADER.unpack(head)
            if magic != _WM_MAGIC or version != _WM_VERSION:
                raise FormatError(f"{path}: not a version-{_WM_VERSION} weight map")
            body = fh.read()
        if len(body) != count * WM_RECORD.itemsize:
            raise FormatError(f"{path}: expected {count} records, found {len(body) // WM_RECORD.itemsize}")
        rec = np.frombuffer(body, dtype=WM_RECORD)
        pixels = rec["pixel"].astype(np.int32)
        weights = rec["weight"].astype(np.float64)
        total = np.bincount(pixels, weights=weights, minlength=width * height)
        return cls(image_id, width, height, pixels, rec["gaussian_id"].astype(np.int32), weights, total)


def gaussian_weight_at(proj: Projected2D, opacity: float, pixel, transmittance: float) -> float:
    """Compositing weight ``min(0.99, o * g) * T`` of one Gaussian at one pixel.

    ``g`` is the unnormalized screen-space Gaussian falloff. Weights not above
    the 1/255 cutoff are reported as 0.
    """
    a, b, c = proj.cov2d
    det = a * c - b * b
    if det < 1e-12:
        raise NumericError(f"gaussian {proj.gaussian_id}: singular screen covariance (det={det:.3g})")
    dx = float(pixel[0]) - proj.mu2d[0]
    dy = float(pixel[1]) - proj.mu2d[1]
    d2 = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    g = np.exp(-0.5 * d2)
    w = min(ALPHA_MAX, opacity * g) * transmittance
    return float(w) if w > WEIGHT_CUTOFF else 0.0


@njit(cache=True, nogil=True)
def _grow(arr, need):
    cap = arr.shape[0]
    while cap < need:
        cap = cap * 2 + 1024
    out = np.empty(cap, dtype=arr.dtype)
    out[: arr.shape[0]] = arr
    return out


@njit(cache=True, nogil=True)
def _shade(px, py, cand, mu, conic, opac, colors, literal, want_color,
           out_pix, out_gid, out_w, pos, gids, totals, image):
    """Composite the candidate list at one pixel; returns the new write position."""
    T = 1.0
    total = 0.0
    cr = 0.0
    cg = 0.0
    cb = 0.0
    p = py * image.shape[1] + px
    lim = SUPPORT_SIGMA * SUPPORT_SIGMA
    for i in range(cand.shape[0]):
        r = cand[i]
        dx = px - mu[r, 0]
        dy = py - mu[r, 1]
        d2 = conic[r, 0] * dx * dx + 2.0 * conic[r, 1] * dx * dy + conic[r, 2] * dy * dy
        if d2 > lim:
            continue
        g = np.exp(-0.5 * d2)
        if literal:
            alpha = g
            w = g
        else:
            alpha = min(ALPHA_MAX, opac[r] * g)
            w = alpha * T
        if w <= WEIGHT_CUTOFF:
            continue
        out_pix[pos] = p
        out_gid[pos] = gids[r]
        out_w[pos] = w
        pos += 1
        total += w
        if want_color:
            cr += w * colors[r, 0]
            cg += w * colors[r, 1]
            cb += w * colors[r, 2]
        if not literal:
            T = T * (1.0 - alpha)
            # T * ALPHA_MAX <= cutoff means no later weight can pass the cutoff.
            if T < T_MIN or T * ALPHA_MAX <= WEIGHT_CUTOFF:
                break
    totals[p] = total
    if want_color and total > NORM_EPS:
        image[py, px, 0] = cr / total
        image[py, px, 1] = cg / total
        image[py, px, 2] = cb / total
    return pos


@njit(cache=True, nogil=True)
def _bin_tiles(mu, ext, width, height):
    """CSR lists of sorted-rank indices overlapping each 16x16 tile."""
    tw = (width + TILE - 1) // TILE
    th = (height + TILE - 1) // TILE
    n = mu.shape[0]
    x0 = np.empty(n, np.int64)
    x1 = np.empty(n, np.int64)
    y0 = np.empty(n, np.int64)
    y1 = np.empty(n, np.int64)
    counts = np.zeros(tw * th + 1, np.int64)
    for r in range(n):
        lo_x = mu[r, 0] - ext[r, 0]
        hi_x = mu[r, 0] + ext[r, 0]
        lo_y = mu[r, 1] - ext[r, 1]
        hi_y = mu[r, 1] + ext[r, 1]
        if hi_x < 0 or hi_y < 0 or lo_x > width - 1 or lo_y > height - 1:
            x0[r] = 1
            x1[r] = 0
            y0[r] = 1
            y1[r] = 0
            continue
        x0[r] = max(0, int(np.floor(max(lo_x, 0.0))) // TILE)
        x1[r] = min(tw - 1, int(np.floor(min(hi_x, width - 1.0))) // TILE)
        y0[r] = max(0, int(np.floor(max(lo_y, 0.0))) // TILE)
        y1[r] = min(th - 1, int(np.floor(min(hi_y, height - 1.0))) // TILE)
        for ty in range(y0[r], y1[r] + 1):
            for tx in range(x0[r], x1[r] + 1):
                counts[ty * tw + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    items = np.empty(offsets[-1], np.int64)
    for r in range(n):
        for ty in range(y0[r], y1[r] + 1):
            for tx in range(x0[r], x1[r] + 1):
                t = ty * tw + tx
                items[fill[t]] = r
                fill[t] += 1
    return offsets, items


@njit(cache=True, nogil=True)
def _raster_tiled(width, height, mu, conic, ext, opac, colors, gids, literal, want_color):
    offsets, items = _bin_tiles(mu, ext, width, height)
    tw = (width + TILE - 1) // TILE
    th = (height + TILE - 1) // TILE
    cap = max(1024, 4 * width * height)
    out_pix = np.empty(cap, np.int32)
    out_gid = np.empty(cap, np.int32)
    out_w = np.empty(cap, np.float64)
    totals = np.zeros(width * height, np.float64)
    image = np.zeros((height, width, 3), np.float64)
    pos = 0
    for ty in range(th):
        for tx in range(tw):
            t = ty * tw + tx
            cand = items[offsets[t]:offsets[t + 1]]
            if cand.shape[0] == 0:
                continue
            for py in range(ty * TILE, min(height, (ty + 1) * TILE)):
                for px in range(tx * TILE, min(width, (tx + 1) * TILE)):
                    if pos + cand.shape[0] > out_w.shape[0]:
                        out_pix = _grow(out_pix, pos + cand.shape[0])
                        out_gid = _grow(out_gid, pos + cand.shape[0])
                        out_w = _grow(out_w, pos + cand.shape[0])
                    pos = _shade(px, py, cand, mu, conic, opac, colors, literal, want_color,
                                 out_pix, out_gid, out_w, pos, gids, totals, image)
    return out_pix[:pos], out_gid[:pos], out_w[:pos], totals, image


@njit(cache=True, nogil=True)
def _raster_naive(width, height, mu, conic, opac, colors, gids, literal, want_color):
    n = mu.shape[0]
    cand = np.arange(n)
    cap = max(1024, 4 * width * height)
    out_pix = np.empty(cap, np.int32)
    out_gid = np.empty(cap, np.int32)
    out_w = np.empty(cap, np.float64)
    totals = np.zeros(width * height, np.float64)
    image = np.zeros((height, width, 3), np.float64)
    pos = 0
    for py in range(height):
        for px in range(width):
            if pos + n > out_w.shape[0]:
                out_pix = _grow(out_pix, pos + n)
                out_gid = _grow(out_gid, pos + n)
                out_w = _grow(out_w, pos + n)
            pos = _shade(px, py, cand, mu, conic, opac, colors, literal, want_color,
                         out_pix, out_gid, out_w, pos, gids, totals, image)
    return out_pix[:pos], out_gid[:pos], out_w[:pos], totals, image


def _candidates(scene: GaussianScene, cam: CameraPose) -> np.ndarray:
    """Ids of Gaussians that may touch the image.

    The screen extent is bounded through the Frobenius norm of the projection
    Jacobian and the largest axis scale, so the cull never drops a Gaussian
    whose 3-sigma ellipse reaches a pixel.
    """
    R = np.asarray(cam.R, dtype=np.float64)
    xc = scene.means @ R.T + np.asarray(cam.t, dtype=np.float64)
    z = xc[:, 2]
    ok = (z > NEAR_PLANE) & (scene.opacities > 0)
    zs = np.where(ok, z, 1.0)
    u = xc[:, 0] / zs
    v = xc[:, 1] / zs
    f = max(cam.fx, cam.fy)
    jnorm2 = (f / zs) ** 2 * (2.0 + u * u + v * v)
    smax = scene.scales.max(axis=1)
    bound = SUPPORT_SIGMA * np.sqrt(jnorm2 * smax * smax + LOWPASS) + 1.0
    mx = cam.fx * u + cam.cx
    my = cam.fy * v + cam.cy
    ok &= (mx + bound >= 0) & (mx - bound <= cam.width - 1)
    ok &= (my + bound >= 0) & (my - bound <= cam.height - 1)
    return np.flatnonzero(ok)


def _prepare(scene: GaussianScene, cam: CameraPose, cov3d=None):
    if cov3d is None:
        cov3d = scene.covariances()
    idx = _candidates(scene, cam)
    proj = project_scene(scene.select(idx), cam, cov3d[idx])
    conic = proj.conics()
    det = proj.cov2d[:, 0] * proj.cov2d[:, 2] - proj.cov2d[:, 1] ** 2
    bad = np.flatnonzero(~(det >= 1e-12))
    if bad.size:
        raise NumericError(f"gaussian {idx[bad[0]]}: singular screen covariance")
    local = depth_order(proj.depth, idx)
    order = idx[local]
    ext = SUPPORT_SIGMA * np.sqrt(proj.cov2d[local][:, [0, 2]])
    # Half-pixel margin keeps tile culling conservative under rounding.
    ext = ext + 0.5
    return (
        np.ascontiguousarray(proj.mu2d[local]),
        np.ascontiguousarray(conic[local]),
        np.ascontiguousarray(ext),
        np.ascontiguousarray(scene.opacities[order]),
        np.ascontiguousarray(scene.colors[order]),
        order.astype(np.int32),
    )


def _run(scene, cam, literal, want_color, naive, cov3d=None):
    w, h = cam.width, cam.height
    if len(scene) == 0:
        empty = np.zeros(0, np.int32)
        return empty, empty.copy(), np.zeros(0), np.zeros(w * h), np.zeros((h, w, 3))
    mu, conic, ext, opac, colors, gids = _prepare(scene, cam, cov3d)
    if naive:
        pix, gid, wts, totals, image = _raster_naive(w, h, mu, conic, opac, colors, gids, literal, want_color)
    else:
        pix, gid, wts, totals, image = _raster_tiled(w, h, mu, conic, ext, opac, colors, gids, literal, want_color)
        order = np.argsort(pix, kind="stable")
        pix, gid, wts = pix[order], gid[order], wts[order]
    return pix, gid, wts, totals, image


def rasterize(scene: GaussianScene, cam: CameraPose, *, raw_falloff: bool = False, naive: bool = False,
              cov3d=None) -> tuple[ImageRGB, WeightMap]:
    """Render ``cam``'s view and capture every contribution weight.

    With ``raw_falloff`` the weight is the bare Gaussian falloff with no
    opacity or occlusion; ``naive`` tests every Gaussian at every pixel.
    """
    pix, gid, wts, totals, image = _run(scene, cam, raw_falloff, True, naive, cov3d)
    wm = WeightMap(cam.image_id, cam.width, cam.height, pix, gid, wts, totals)
    return ImageRGB(cam.image_id, cam.width, cam.height, image), wm


def rasterize_weights_only(scene: GaussianScene, cam: CameraPose, *, raw_falloff: bool = False,
                           naive: bool = False, cov3d=None) -> WeightMap:
    pix, gid, wts, totals, _ = _run(scene, cam, raw_falloff, False, naive, cov3d)
    return WeightMap(cam.image_id, cam.width, cam.height, pix, gid, wts, totals)


def recombine_colors(wm: WeightMap, colors: np.ndarray) -> np.ndarray:
    """Rebuild an image from captured weights as sum(w * c) / sum(w) per pixel."""
    n = wm.width * wm.height
    out = np.zeros((n, 3))
    total = np.bincount(wm.pixels, weights=wm.weights, minlength=n)
    for ch in range(3):
        out[:, ch] = np.bincount(wm.pixels, weights=wm.weights * colors[wm.gaussian_ids, ch], minlength=n)
    covered = total > NORM_EPS
    out[covered] /= total[covered, None]
    out[~covered] = 0.0
    return out.reshape(wm.height, wm.width, 3)
