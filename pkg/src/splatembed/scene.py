"""Gaussian scenes, camera poses and their on-disk formats.

Scenes are stored column-wise (one array per attribute) so that projection
and rasterization stay vectorized; ``scene[k]`` materializes a single
:class:`Gaussian3D` when per-record access is convenient.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import DataError, FormatError

SH_C0 = 0.28209479177387814
LOGIT_CLAMP = 15.0

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

_REQUIRED = (
    ["x", "y", "z"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
    + ["opacity"]
    + [f"f_dc_{i}" for i in range(3)]
)

# Field order written by save_scene (3DGS export order without SH rest bands).
_WRITE_FIELDS = (
    ["x", "y", "z", "nx", "ny", "nz"]
    + [f"f_dc_{i}" for i in range(3)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)


@dataclass(frozen=True)
class Gaussian3D:
    id: int
    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray  # (w, x, y, z)
    opacity: float
    color: np.ndarray

    def covariance(self) -> np.ndarray:
        return covariances(self.scale[None], self.rotation[None])[0]


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for an ``(N, 4)`` array of unit (w, x, y, z) quaternions."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def covariances(scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """World-space covariances ``R diag(s^2) R^T`` for every Gaussian."""
    R = quat_to_rotmat(rotations)
    M = R * np.asarray(scales, dtype=np.float64)[:, None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass
class GaussianScene:
    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    _bbox: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.means = np.ascontiguousarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacities = np.ascontiguousarray(self.opacities, dtype=np.float64).reshape(n)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(n, 3)

    @classmethod
    def empty(cls) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, k: int) -> Gaussian3D:
        return Gaussian3D(
            id=int(k),
            mean=self.means[k].copy(),
            scale=self.scales[k].copy(),
            rotation=self.rotations[k].copy(),
            opacity=float(self.opacities[k]),
            color=self.colors[k].copy(),
        )

    def __iter__(self) -> Iterator[Gaussian3D]:
        for k in range(len(self)):
            yield self[k]

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self), dtype=np.int64)

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if self._bbox is None:
            if len(self) == 0:
                self._bbox = (np.zeros(3), np.zeros(3))
            else:
                self._bbox = (self.means.min(axis=0), self.means.max(axis=0))
        return self._bbox

    def covariances(self) -> np.ndarray:
        return covariances(self.scales, self.rotations)

    def select(self, ids) -> "GaussianScene":
        """Sub-scene holding the given Gaussians, renumbered densely in the given order."""
        ids = np.asarray(ids, dtype=np.int64)
        return GaussianScene(
            self.means[ids], self.scales[ids], self.rotations[ids],
            self.opacities[ids], self.colors[ids],
        )

    def validate(self) -> None:
        qn = np.linalg.norm(self.rotations, axis=1)
        bad = np.flatnonzero(np.abs(qn - 1.0) > 1e-6)
        if bad.size:
            raise DataError(f"gaussian {bad[0]}: quaternion norm {qn[bad[0]]:.9f} is not 1")
        bad = np.flatnonzero(~(self.scales > 0).all(axis=1))
        if bad.size:
            raise DataError(f"gaussian {bad[0]}: non-positive scale")
        bad = np.flatnonzero((self.opacities < 0) | (self.opacities > 1))
        if bad.size:
            raise DataError(f"gaussian {bad[0]}: opacity {self.opacities[bad[0]]} outside [0, 1]")


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _parse_ply_header(fh) -> tuple[int, list, str]:
    first = fh.readline()
    if first.strip() != b"ply":
        raise FormatError("not a PLY file (missing 'ply' magic)")
    fmt = None
    elements: list[list] = []  # [name, count, [(prop, dtype)]]
    while True:
        line = fh.readline()
        if not line:
            raise FormatError("PLY header not terminated by end_header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "end_header":
            break
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append([tokens[1], int(tokens[2]), []])
        elif tokens[0] == "property":
            if not elements:
                raise FormatError("PLY property declared before any element")
            if tokens[1] == "list":
                raise FormatError(f"PLY list property '{tokens[-1]}' is not supported")
            if tokens[1] not in _PLY_TYPES:
                raise FormatError(f"unknown PLY property type '{tokens[1]}'")
            elements[-1][2].append((tokens[2], "<" + _PLY_TYPES[tokens[1]]))
    if fmt != "binary_little_endian":
        raise FormatError(f"unsupported PLY format '{fmt}', expected binary_little_endian")
    return fh.tell(), elements, fmt


def load_scene(path) -> GaussianScene:
    """Read a 3DGS-layout binary PLY.

    Scales are stored as logs, opacity as a logit and color as the SH DC
    coefficient; all three are decoded here. Extra properties (normals, SH
    rest bands) are ignored.
    """
    with open(path, "rb") as fh:
        _, elements, _ = _parse_ply_header(fh)
        vertex = None
        for name, count, props in elements:
            dtype = np.dtype(props)
            if name == "vertex":
                buf = fh.read(dtype.itemsize * count)
                if len(buf) != dtype.itemsize * count:
                    raise FormatError(f"PLY vertex data truncated: expected {count} records")
                vertex = np.frombuffer(buf, dtype=dtype, count=count)
                break
            fh.seek(dtype.itemsize * count, os.SEEK_CUR)
    if vertex is None:
        raise FormatError("PLY has no 'vertex' element")
    names = vertex.dtype.names or ()
    for prop in _REQUIRED:
        if prop not in names:
            raise FormatError(f"PLY is missing required property '{prop}'")

    def cols(prefix_names):
        return np.stack([vertex[n].astype(np.float64) for n in prefix_names], axis=1)

    means = cols(["x", "y", "z"])
    log_scales = cols([f"scale_{i}" for i in range(3)])
    rots = cols([f"rot_{i}" for i in range(4)])
    logits = vertex["opacity"].astype(np.float64)
    f_dc = cols([f"f_dc_{i}" for i in range(3)])

    raw = np.concatenate([means, log_scales, rots, logits[:, None], f_dc], axis=1)
    bad = np.flatnonzero(~np.isfinite(raw).all(axis=1))
    if bad.size:
        raise DataError(f"non-finite value in PLY record {bad[0]}")
    qn = np.linalg.norm(rots, axis=1)
    bad = np.flatnonzero(qn == 0)
    if bad.size:
        raise DataError(f"zero quaternion in PLY record {bad[0]}")

    return GaussianScene(
        means=means,
        scales=np.exp(log_scales),
        rotations=rots / qn[:, None],
        opacities=_sigmoid(logits),
        colors=np.clip(0.5 + SH_C0 * f_dc, 0.0, 1.0),
    )


def save_scene(scene: GaussianScene, path) -> None:
    n = len(scene)
    dtype = np.dtype([(name, "<f4") for name in _WRITE_FIELDS])
    rec = np.zeros(n, dtype=dtype)
    for i, axis in enumerate("xyz"):
        rec[axis] = scene.means[:, i]
    f_dc = (scene.colors - 0.5) / SH_C0
    for i in range(3):
        rec[f"f_dc_{i}"] = f_dc[:, i]
        rec[f"scale_{i}"] = np.log(scene.scales[:, i])
    o = np.clip(scene.opacities, 0.0, 1.0)
    with np.errstate(divide="ignore"):
        logit = np.log(o) - np.log1p(-o)
    rec["opacity"] = np.clip(logit, -LOGIT_CLAMP, LOGIT_CLAMP)
    for i in range(4):
        rec[f"rot_{i}"] = scene.rotations[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in _WRITE_FIELDS]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


@dataclass(frozen=True)
class CameraPose:
    image_id: int
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray  # world-to-camera rotation
    t: np.ndarray
    width: int
    height: int

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.width, self.height)

    def validate(self) -> None:
        R = np.asarray(self.R, dtype=np.float64)
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > 1e-4:
            raise DataError(f"camera {self.image_id}: rotation is not orthonormal (|R^T R - I| = {err:.3g})")
        det = np.linalg.det(R)
        if abs(det - 1.0) > 1e-4:
            raise DataError(f"camera {self.image_id}: rotation determinant {det:.6f} is not +1")
        if self.fx <= 0 or self.fy <= 0:
            raise DataError(f"camera {self.image_id}: focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise DataError(f"camera {self.image_id}: principal point outside the image")

    def rescaled(self, width: int, height: int) -> "CameraPose":
        """Same pose at another resolution; pixel centers sit on integer coordinates."""
        if (width, height) == (self.width, self.height):
            return self
        sx, sy = width / self.width, height / self.height
        return CameraPose(
            self.image_id, self.fx * sx, self.fy * sy,
            (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5,
            self.R, self.t, width, height,
        )

    @classmethod
    def look_at(cls, image_id, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> "CameraPose":
        """OpenCV-style pose (+z forward, +y down) looking from ``eye`` to ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(
            image_id, fx, fy,
            width / 2 if cx is None else cx, height / 2 if cy is None else cy,
            R, -R @ eye, width, height,
        )


def load_cameras(path) -> list[CameraPose]:
    """Parse the line-oriented camera file.

    Each record is ``image_id fx fy cx cy r00 .. r22 tx ty tz width height``;
    ``#`` starts a comment.
    """
    poses = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if len(tok) != 19:
                raise FormatError(f"{path}:{lineno}: expected 19 fields, got {len(tok)}")
            try:
                vals = [float(v) for v in tok[1:17]]
                image_id, width, height = int(tok[0]), int(tok[17]), int(tok[18])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if not np.isfinite(vals).all():
                raise DataError(f"{path}:{lineno}: non-finite camera value")
            cam = CameraPose(
                image_id, vals[0], vals[1], vals[2], vals[3],
                np.array(vals[4:13]).reshape(3, 3), np.array(vals[13:16]), width, height,
            )
            cam.validate()
            poses.append(cam)
    return poses


def save_cameras(cameras, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# image_id fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz width height\n")
        for c in cameras:
            nums = [c.fx, c.fy, c.cx, c.cy, *np.asarray(c.R).ravel(), *np.asarray(c.t)]
            fh.write(f"{c.image_id} " + " ".join(repr(float(v)) for v in nums) + f" {c.width} {c.height}\n")


@dataclass
class ImageRGB:
    image_id: int
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) in [0, 1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.shape != (self.height, self.width, 3):
            raise DataError(
                f"image {self.image_id}: pixel array {self.pixels.shape} does not match "
                f"{self.width}x{self.height}"
            )

    @classmethod
    def load(cls, path, image_id: int) -> "ImageRGB":
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        return cls(image_id, arr.shape[1], arr.shape[0], arr)

    def save(self, path) -> None:
        from PIL import Image

        Image.fromarray(to_uint8(self.pixels)).save(path)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
