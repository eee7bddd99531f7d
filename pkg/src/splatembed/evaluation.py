"""Segmentation metrics for the binary and multi-class query protocols."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError, DataError, FormatError
from .pipeline import EmbeddingTable
from .rasterizer import rasterize_weights_only
from .scene import CameraPose, GaussianScene

UNLABELED = -1
DEFAULT_ALPHA_THRESHOLD = 0.5


@dataclass
class LabeledPointCloud:
    points: np.ndarray  # (P, 3)
    gt_class: np.ndarray  # (P,) int, UNLABELED for no label

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.gt_class = np.asarray(self.gt_class, dtype=np.int64)
        if len(self.gt_class) != len(self.points):
            raise DataError("point and label counts differ")


def save_point_cloud(cloud: LabeledPointCloud, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# x y z class  (class -1 = unlabeled)\n")
        for p, c in zip(cloud.points, cloud.gt_class):
            fh.write(" ".join(repr(float(v)) for v in p) + f" {int(c)}\n")


def load_point_cloud(path) -> LabeledPointCloud:
    try:
        arr = np.loadtxt(path, comments="#", ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if arr.size == 0:
        return LabeledPointCloud(np.zeros((0, 3)), np.zeros(0, np.int64))
    if arr.shape[1] != 4:
        raise FormatError(f"{path}: expected 4 columns (x y z class)")
    return LabeledPointCloud(arr[:, :3], arr[:, 3].astype(np.int64))


def save_segments(segments, path) -> None:
    np.savetxt(path, np.asarray(segments, dtype=np.int64), fmt="%d", header="segment id per point")


def load_segments(path) -> np.ndarray:
    try:
        return np.loadtxt(path, comments="#", dtype=np.int64, ndmin=1)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def render_alpha(scene: GaussianScene, cam: CameraPose, ids=None) -> np.ndarray:
    """Accumulated alpha ``1 - T`` per pixel, optionally for a subset of Gaussians."""
    sub = scene if ids is None else scene.select(ids)
    wm = rasterize_weights_only(sub, cam)
    return wm.per_pixel_total.reshape(cam.height, cam.width)


def project_result_to_mask(result, scene: GaussianScene, cam: CameraPose,
                           alpha_threshold: float = DEFAULT_ALPHA_THRESHOLD) -> np.ndarray:
    """Binary mask of pixels where the matched Gaussians alone exceed the alpha threshold.

    ``result`` is a QueryResult or an array of Gaussian ids.
    """
    ids = result.ids if hasattr(result, "ids") else np.asarray(result, dtype=np.int64)
    if len(ids) == 0:
        return np.zeros((cam.height, cam.width), dtype=bool)
    if ids.min() < 0 or ids.max() >= len(scene):
        raise ContractError("result references Gaussians outside the scene")
    return render_alpha(scene, cam, ids) > alpha_threshold


def binary_metrics(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """IoU and localization accuracy (1 when IoU > 0.5) for one query in one view."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    union = np.count_nonzero(pred | gt)
    iou = 1.0 if union == 0 else np.count_nonzero(pred & gt) / union
    return float(iou), 1.0 if iou > 0.5 else 0.0


def pixel_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return float(np.mean(pred == gt))


def assign_classes(table: EmbeddingTable, labels) -> np.ndarray:
    """Argmax-cosine class per Gaussian; uncovered Gaussians stay unlabeled.

    ``labels`` is a sequence of ``(class_id, vector)``; ties go to the lower id.
    """
    labels = sorted(labels, key=lambda x: x[0])
    if not labels:
        raise ContractError("need at least one label")
    class_ids = np.array([c for c, _ in labels], dtype=np.int64)
    L = np.stack([np.asarray(v, dtype=np.float64) for _, v in labels])
    if L.shape[1] != table.dim:
        raise ContractError(f"label dimension {L.shape[1]} != table dimension {table.dim}")
    L /= np.linalg.norm(L, axis=1, keepdims=True)
    out = np.full(table.n, UNLABELED, dtype=np.int64)
    covered = np.flatnonzero(table.covered)
    if covered.size:
        E = table.embeddings[covered].astype(np.float64)
        E /= np.linalg.norm(E, axis=1, keepdims=True)
        out[covered] = class_ids[np.argmax(E @ L.T, axis=1)]
    return out


def map_to_points(scene: GaussianScene, gaussian_classes, cloud) -> np.ndarray:
    """Each point takes the class of the nearest Gaussian mean (lower id on ties)."""
    if len(scene) == 0:
        raise ContractError("scene is empty")
    points = cloud.points if hasattr(cloud, "points") else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    gaussian_classes = np.asarray(gaussian_classes)
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    tree = cKDTree(scene.means)
    k = min(4, len(scene))
    dist, idx = tree.query(points, k=k)
    dist = np.asarray(dist).reshape(len(points), k)
    idx = np.asarray(idx).reshape(len(points), k)
    # Among neighbors tied at the minimum distance pick the lowest id.
    tied = dist == dist[:, :1]
    best = np.where(tied, idx, np.iinfo(np.int64).max).min(axis=1)
    # All k neighbors tied: there may be more, so fetch the whole tie set.
    for p in np.flatnonzero(tied.all(axis=1) & (k < len(scene))):
        cand = np.array(tree.query_ball_point(points[p], dist[p, 0] * (1 + 1e-12) + 1e-300), dtype=np.int64)
        d = np.sum((scene.means[cand] - points[p]) ** 2, axis=1)
        best[p] = cand[d == d.min()].min()
    return gaussian_classes[best]


def prediction_filter(point_classes, segments) -> np.ndarray:
    """Replace each segment's predictions with its majority labeled class."""
    point_classes = np.asarray(point_classes, dtype=np.int64)
    segments = np.asarray(segments, dtype=np.int64)
    if point_classes.shape != segments.shape:
        raise ContractError(f"{len(point_classes)} predictions but {len(segments)} segment ids")
    out = np.full_like(point_classes, UNLABELED)
    if len(point_classes) == 0:
        return out
    seg_keys, seg_inv = np.unique(segments, return_inverse=True)
    labeled = point_classes != UNLABELED
    pairs = np.stack([seg_inv[labeled], point_classes[labeled]], axis=1)
    if len(pairs) == 0:
        return out
    uniq, counts = np.unique(pairs, axis=0, return_counts=True)
    # uniq is sorted by (segment, class): the first max per segment is the lowest class.
    order = np.lexsort((uniq[:, 1], -counts, uniq[:, 0]))
    uniq = uniq[order]
    first = np.ones(len(uniq), dtype=bool)
    first[1:] = uniq[1:, 0] != uniq[:-1, 0]
    winner = np.full(len(seg_keys), UNLABELED, dtype=np.int64)
    winner[uniq[first, 0]] = uniq[first, 1]
    return winner[seg_inv]


@dataclass
class ClassScores:
    class_ids: np.ndarray
    iou: np.ndarray
    acc: np.ndarray

    @property
    def miou(self) -> float:
        return float(self.iou.mean()) if len(self.iou) else 0.0

    @property
    def macc(self) -> float:
        return float(self.acc.mean()) if len(self.acc) else 0.0


def class_scores(pred, gt, class_subset=None, num_classes: int | None = None) -> ClassScores:
    """Per-class IoU and recall over points whose ground truth is in the subset.

    Unlabeled predictions count as misses; classes absent from the ground
    truth are left out of the means.
    """
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ContractError(f"{len(pred)} predictions for {len(gt)} ground-truth points")
    if num_classes is None:
        num_classes = int(max(pred.max(initial=-1), gt.max(initial=-1))) + 1
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        bad = (arr != UNLABELED) & ((arr < 0) | (arr >= num_classes))
        if bad.any():
            raise DataError(f"unknown class id {arr[bad][0]} in {name}")
    subset = np.arange(num_classes) if class_subset is None else np.asarray(sorted(class_subset), dtype=np.int64)
    if len(subset) and (subset.min() < 0 or subset.max() >= num_classes):
        raise DataError("class subset references unknown class ids")
    valid = np.isin(gt, subset)
    p, g = pred[valid], gt[valid]
    ids, ious, accs = [], [], []
    for c in subset:
        gt_c = g == c
        n_gt = np.count_nonzero(gt_c)
        if n_gt == 0:
            continue
        pred_c = p == c
        tp = np.count_nonzero(gt_c & pred_c)
        union = np.count_nonzero(gt_c | pred_c)
        ids.append(c)
        ious.append(tp / union)
        accs.append(tp / n_gt)
    return ClassScores(np.array(ids, dtype=np.int64), np.array(ious), np.array(accs))


def multiclass_metrics(pred, gt, class_subset=None, num_classes: int | None = None) -> tuple[float, float]:
    s = class_scores(pred, gt, class_subset, num_classes)
    return s.miou, s.macc


def read_labels(path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.startswith("#")]
