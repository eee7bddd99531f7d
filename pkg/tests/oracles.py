"""Slow reference implementations used to check the production code.

These are written from the contracts alone and share no code with the
package: projection is checked against a finite-difference Jacobian,
compositing walks Gaussians in sorted order over a dense pixel grid, and
aggregation is the literal triple sum over images, masks and pixels.
"""

from __future__ import annotations

import numpy as np

CUTOFF = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4


def rotmat(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def cov3d(scale, q):
    R = rotmat(q)
    return R @ np.diag(np.asarray(scale, dtype=np.float64) ** 2) @ R.T


def project_point(X, cam):
    xc = cam.R @ X + cam.t
    return np.array([cam.fx * xc[0] / xc[2] + cam.cx, cam.fy * xc[1] / xc[2] + cam.cy])


def numeric_cov2d(mean, sigma, cam, h=1e-6):
    """Screen covariance from a central-difference Jacobian of the world-to-pixel map."""
    mean = np.asarray(mean, dtype=np.float64)
    J = np.zeros((2, 3))
    for a in range(3):
        d = np.zeros(3)
        d[a] = h
        J[:, a] = (project_point(mean + d, cam) - project_point(mean - d, cam)) / (2 * h)
    return J @ sigma @ J.T + 0.3 * np.eye(2)


def analytic_cov2d(mean, sigma, cam):
    x, y, z = cam.R @ np.asarray(mean, dtype=np.float64) + cam.t
    J = np.array([[cam.fx / z, 0.0, -cam.fx * x / (z * z)],
                  [0.0, cam.fy / z, -cam.fy * y / (z * z)]])
    M = J @ cam.R
    return M @ sigma @ M.T + 0.3 * np.eye(2)


def composite(scene, cam, literal=False):
    """Dense front-to-back compositing.

    Returns ``(weights, image)`` where ``weights`` is an (H*W, N) array of
    captured weights and ``image`` the (H, W, 3) normalized composite color.
    """
    n = len(scene)
    W, H = cam.width, cam.height
    weights = np.zeros((H * W, n))
    if n == 0:
        return weights, np.zeros((H, W, 3))
    px, py = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    px, py = px.ravel(), py.ravel()
    depth = np.array([(cam.R @ m + cam.t)[2] for m in scene.means])
    order = sorted(range(n), key=lambda k: (depth[k], k))
    T = np.ones(H * W)
    done = np.zeros(H * W, dtype=bool)
    for k in order:
        if depth[k] <= 0.01:
            continue
        mu = project_point(scene.means[k], cam)
        C = analytic_cov2d(scene.means[k], cov3d(scene.scales[k], scene.rotations[k]), cam)
        Ci = np.linalg.inv(C)
        dx, dy = px - mu[0], py - mu[1]
        d2 = Ci[0, 0] * dx * dx + 2 * Ci[0, 1] * dx * dy + Ci[1, 1] * dy * dy
        g = np.exp(-0.5 * d2)
        if literal:
            alpha = g
            w = g
        else:
            alpha = np.minimum(ALPHA_MAX, scene.opacities[k] * g)
            w = alpha * T
        take = ~done & (d2 <= 9.0) & (w > CUTOFF)
        weights[take, k] = w[take]
        if not literal:
            T = np.where(take, T * (1 - alpha), T)
            done |= take & ((T < T_MIN) | (T * ALPHA_MAX <= CUTOFF))
    total = weights.sum(axis=1)
    color = weights @ scene.colors
    image = np.zeros((H * W, 3))
    ok = total > 1e-6
    image[ok] = color[ok] / total[ok, None]
    return weights, image.reshape(H, W, 3)


def dense_encode(scene, cameras, masks, embeddings, literal=False):
    """Literal E_k = sum_i sum_j sum_{p in M_ij} w_kp E_ij / sum_i sum_j sum_{p in M_ij} w_kp.

    ``masks[i]`` is a (M_i, H, W) bool array at raster resolution and
    ``embeddings[i]`` the matching (M_i, D) array.
    """
    n = len(scene)
    dim = embeddings[0].shape[1]
    num = np.zeros((n, dim))
    den = np.zeros(n)
    for cam, m_i, e_i in zip(cameras, masks, embeddings):
        weights, _ = composite(scene, cam, literal)
        for j in range(len(m_i)):
            inside = m_i[j].ravel()
            for p in np.flatnonzero(inside):
                for k in np.flatnonzero(weights[p]):
                    num[k] += weights[p, k] * e_i[j]
                    den[k] += weights[p, k]
    emb = np.zeros((n, dim))
    cov = den > 1e-8
    emb[cov] = num[cov] / den[cov, None]
    return emb, den


def brute_topk(vectors, ids, q, k):
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    sims = [float(np.dot(v.astype(np.float64), q)) for v in vectors]
    order = sorted(range(len(ids)), key=lambda r: (-sims[r], ids[r]))
    return [(int(ids[r]), sims[r]) for r in order[:k]]


def brute_threshold(vectors, ids, q, tau):
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    sims = [float(np.dot(v.astype(np.float64), q)) for v in vectors]
    keep = [r for r in range(len(ids)) if sims[r] >= tau]
    keep.sort(key=lambda r: (-sims[r], ids[r]))
    return [(int(ids[r]), sims[r]) for r in keep]
