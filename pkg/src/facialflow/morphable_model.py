"""
Linear 3D morphable face model: reconstruction and orthographic projection.

A face with N vertices is stored as a flat 3N vector (x0, y0, z0, x1, ...)::

    X = s * R @ (mean_shape + A_id @ alpha_id + A_exp @ alpha_exp) + t

applied per vertex, followed by an orthographic projection that keeps x and y.
The model frame is x right, y up, z toward the viewer. Image coordinates
(y down) only appear when rasterizing flows or building image masks.
"""

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, InvalidParameterError, ShapeError

N_LANDMARKS = 68

# iBUG 68-point groups (0-based, inclusive ranges).
JAW = range(0, 17)
BROWS = range(17, 27)
NOSE = range(27, 36)
RIGHT_EYE = range(36, 42)
LEFT_EYE = range(42, 48)
MOUTH = range(48, 68)

F3B_MAGIC = b"F3B1"
F3B_VERSION = 1


@dataclass(frozen=True, eq=False)
class MorphableBasis:
    """Mean shape, identity/expression bases and the landmark vertex indices.

    ``mean_shape`` has length 3N, ``id_basis`` is 3N x K and ``exp_basis``
    is 3N x L. Instances are treated as immutable.
    """

    mean_shape: np.ndarray
    id_basis: np.ndarray
    exp_basis: np.ndarray
    landmark_indices: np.ndarray
    triangles: Optional[np.ndarray] = None

    def __post_init__(self):
        mean = np.asarray(self.mean_shape, dtype=np.float64).reshape(-1)
        a_id = np.asarray(self.id_basis, dtype=np.float64)
        a_exp = np.asarray(self.exp_basis, dtype=np.float64)
        lmk = np.asarray(self.landmark_indices, dtype=np.int64).reshape(-1)
        if mean.size % 3:
            raise ShapeError(f"mean_shape length {mean.size} is not a multiple of 3")
        n = mean.size // 3
        if a_id.ndim != 2 or a_exp.ndim != 2:
            raise ShapeError("bases must be 2-D matrices")
        if a_id.shape[0] != 3 * n or a_exp.shape[0] != 3 * n:
            raise ShapeError(
                f"basis rows {a_id.shape[0]}/{a_exp.shape[0]} do not match 3N = {3 * n}")
        if a_id.shape[1] < 1 or a_exp.shape[1] < 1:
            raise ShapeError("K and L must be at least 1")
        if n < N_LANDMARKS:
            raise ShapeError(f"need at least {N_LANDMARKS} vertices, got {n}")
        if lmk.size != N_LANDMARKS:
            raise ShapeError(f"expected {N_LANDMARKS} landmark indices, got {lmk.size}")
        if len(np.unique(lmk)) != lmk.size or lmk.min() < 0 or lmk.max() >= n:
            raise ShapeError("landmark indices must be unique and lie in [0, N)")
        tri = self.triangles
        if tri is not None:
            tri = np.asarray(tri, dtype=np.int64).reshape(-1, 3)
            if tri.size and (tri.min() < 0 or tri.max() >= n):
                raise ShapeError("triangle indices out of range")
        for name, value in (("mean_shape", mean), ("id_basis", a_id), ("exp_basis", a_exp),
                            ("landmark_indices", lmk), ("triangles", tri)):
            if value is not None:
                value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.size // 3

    @property
    def n_id(self) -> int:
        return self.id_basis.shape[1]

    @property
    def n_exp(self) -> int:
        return self.exp_basis.shape[1]

    def landmark_rows(self) -> np.ndarray:
        """Row indices into the 3N vectors for the landmark vertices, shape (68, 3)."""
        return 3 * self.landmark_indices[:, None] + np.arange(3)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """The parameter set {alpha_id, alpha_exp, rotation, translation, scale}.

    Rotation holds (pitch, yaw, roll) in radians. Translation is in pixels
    for x and y and in model units for z.
    """

    alpha_id: np.ndarray
    alpha_exp: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        for name in ("alpha_id", "alpha_exp", "rotation", "translation"):
            value = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(value)):
                raise InvalidParameterError(f"{name} contains non-finite values")
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        if self.rotation.size != 3 or self.translation.size != 3:
            raise ShapeError("rotation and translation must have 3 entries")
        scale = float(self.scale)
        if not np.isfinite(scale) or scale <= 0:
            raise InvalidParameterError(f"scale must be positive and finite, got {scale}")
        object.__setattr__(self, "scale", scale)

    @classmethod
    def zeros(cls, n_id, n_exp, scale=1.0):
        return cls(np.zeros(n_id), np.zeros(n_exp), np.zeros(3), np.zeros(3), scale)

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    def to_vector(self) -> np.ndarray:
        """Flat vector ordered (alpha_id, alpha_exp, rotation, translation, scale)."""
        return np.concatenate([self.alpha_id, self.alpha_exp, self.rotation,
                               self.translation, [self.scale]])

    @classmethod
    def from_vector(cls, vec, n_id, n_exp):
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.size != n_id + n_exp + 7:
            raise ShapeError(f"vector length {vec.size} != K + L + 7 = {n_id + n_exp + 7}")
        k, l = n_id, n_id + n_exp
        return cls(vec[:k], vec[k:l], vec[l:l + 3], vec[l + 3:l + 6], vec[l + 6])

    def to_dict(self) -> dict:
        return {
            "alpha_id": self.alpha_id.tolist(),
            "alpha_exp": self.alpha_exp.tolist(),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(data["alpha_id"], data["alpha_exp"], data["rotation"],
                       data["translation"], data["scale"])
        except (KeyError, TypeError, IndexError) as exc:
            raise FormatError(f"malformed params record: {exc!r}") from exc

    def check_matches(self, basis: MorphableBasis):
        if self.alpha_id.size != basis.n_id or self.alpha_exp.size != basis.n_exp:
            raise ShapeError(
                f"params have K={self.alpha_id.size}, L={self.alpha_exp.size}; "
                f"basis has K={basis.n_id}, L={basis.n_exp}")


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """68 2-D landmark points in pixels with per-point positive weights."""

    points: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.shape != (N_LANDMARKS, 2):
            raise ShapeError(f"expected landmark points of shape (68, 2), got {points.shape}")
        weights = (np.ones(N_LANDMARKS) if self.weights is None
                   else np.array(self.weights, dtype=np.float64).reshape(-1))
        if weights.size != N_LANDMARKS:
            raise ShapeError(f"expected 68 landmark weights, got {weights.size}")
        if not (np.all(np.isfinite(points)) and np.all(np.isfinite(weights))):
            raise InvalidParameterError("landmarks must be finite")
        if np.any(weights <= 0):
            raise InvalidParameterError("landmark weights must be positive")
        points.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    def with_weights(self, weights) -> "LandmarkSet":
        return LandmarkSet(self.points, weights)


def _check_finite_rotation(rotation):
    r = np.asarray(rotation, dtype=np.float64).reshape(-1)
    if r.size != 3:
        raise ShapeError("rotation must have 3 Euler angles")
    if not np.all(np.isfinite(r)):
        raise InvalidParameterError("rotation angles must be finite")
    return r


def _axis_matrices(rotation):
    pitch, yaw, roll = rotation
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    cr, sr = np.cos(roll), np.sin(roll)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sp, -cp], [0.0, cp, -sp]])
    dry = np.array([[-sy, 0.0, cy], [0.0, 0.0, 0.0], [-cy, 0.0, -sy]])
    drz = np.array([[-sr, -cr, 0.0], [cr, -sr, 0.0], [0.0, 0.0, 0.0]])
    return (rx, ry, rz), (drx, dry, drz)


def rotation_matrix(rotation) -> np.ndarray:
    """Rotation from (pitch, yaw, roll) radians as R = Rx(pitch) @ Ry(yaw) @ Rz(roll)."""
    (rx, ry, rz), _ = _axis_matrices(_check_finite_rotation(rotation))
    return rx @ ry @ rz


def rotation_matrix_derivatives(rotation) -> np.ndarray:
    """Partial derivatives of :func:`rotation_matrix`, shape (3, 3, 3), one per angle."""
    (rx, ry, rz), (drx, dry, drz) = _axis_matrices(_check_finite_rotation(rotation))
    return np.stack([drx @ ry @ rz, rx @ dry @ rz, rx @ ry @ drz])


def shape_offsets(basis: MorphableBasis, params: ModelParams) -> np.ndarray:
    """A_id @ alpha_id + A_exp @ alpha_exp as a flat 3N vector."""
    params.check_matches(basis)
    return basis.id_basis @ params.alpha_id + basis.exp_basis @ params.alpha_exp


def reconstruct(basis: MorphableBasis, params: ModelParams) -> np.ndarray:
    """Vertices of the posed face, shape (N, 3)."""
    shape = (basis.mean_shape + shape_offsets(basis, params)).reshape(-1, 3)
    rot = rotation_matrix(params.rotation)
    return params.scale * shape @ rot.T + params.translation


# Orthographic projection matrix Pr.
ORTHOGRAPHIC = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def project(cloud) -> np.ndarray:
    """Orthographic projection dropping z; returns shape (N, 2)."""
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    return cloud[:, :2].copy()


def landmarks_2d(basis: MorphableBasis, params: ModelParams) -> LandmarkSet:
    """Projected landmark vertices of the reconstructed face, unit weights."""
    return LandmarkSet(project(reconstruct(basis, params))[basis.landmark_indices])


def model_to_image(points, height) -> np.ndarray:
    """Map model-frame (x, y-up) pixel positions to image (column, row-down) positions.

    Row = (height - 1) - y, so a y-up pixel coordinate in [0, H-1] lands in
    the same range of rows, flipped.
    """
    points = np.array(points, dtype=np.float64)
    points[..., 1] = (height - 1) - points[..., 1]
    return points


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def encode_basis(basis: MorphableBasis) -> bytes:
    """Serialize to the little-endian F3B1 layout (32-bit floats, column-major bases)."""
    n, k, l = basis.n_vertices, basis.n_id, basis.n_exp
    tri = basis.triangles if basis.triangles is not None else np.zeros((0, 3), np.int64)
    buf = io.BytesIO()
    buf.write(F3B_MAGIC)
    buf.write(struct.pack("<5I", F3B_VERSION, n, k, l, N_LANDMARKS))
    buf.write(basis.mean_shape.astype("<f4").tobytes())
    buf.write(basis.id_basis.astype("<f4").tobytes(order="F"))
    buf.write(basis.exp_basis.astype("<f4").tobytes(order="F"))
    buf.write(basis.landmark_indices.astype("<u4").tobytes())
    buf.write(struct.pack("<I", len(tri)))
    buf.write(tri.astype("<u4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = memoryview(data)
        self.pos = 0
        self.what = what

    def take(self, nbytes):
        if self.pos + nbytes > len(self.data):
            raise FormatError(f"truncated {self.what} payload")
        chunk = self.data[self.pos:self.pos + nbytes]
        self.pos += nbytes
        return chunk

    def u32(self, count=1):
        values = struct.unpack(f"<{count}I", self.take(4 * count))
        return values[0] if count == 1 else values

    def array(self, dtype, count):
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype).copy()

    def finish(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes in {self.what}")


def decode_basis(data: bytes) -> MorphableBasis:
    reader = _Reader(data, "F3B")
    if bytes(reader.take(4)) != F3B_MAGIC:
        raise FormatError("bad F3B magic")
    version, n, k, l, n_lmk = reader.u32(5)
    if version != F3B_VERSION:
        raise FormatError(f"unsupported F3B version {version}")
    if n_lmk != N_LANDMARKS:
        raise FormatError(f"F3B declares {n_lmk} landmarks, expected {N_LANDMARKS}")
    mean = reader.array("<f4", 3 * n)
    a_id = reader.array("<f4", 3 * n * k).reshape((3 * n, k), order="F")
    a_exp = reader.array("<f4", 3 * n * l).reshape((3 * n, l), order="F")
    lmk = reader.array("<u4", n_lmk)
    n_tri = reader.u32()
    tri = reader.array("<u4", 3 * n_tri).reshape(-1, 3)
    reader.finish()
    try:
        return MorphableBasis(mean, a_id, a_exp, lmk, tri)
    except ShapeError as exc:
        raise FormatError(f"inconsistent F3B content: {exc}") from exc


def save_basis(basis: MorphableBasis, path):
    Path(path).write_bytes(encode_basis(basis))


def load_basis(path) -> MorphableBasis:
    return decode_basis(Path(path).read_bytes())


def save_params(params: ModelParams, path):
    Path(path).write_text(json.dumps(params.to_dict(), indent=2) + "\n")


def load_params(path) -> ModelParams:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    try:
        return ModelParams.from_dict(data)
    except (ShapeError, InvalidParameterError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def to_obj(cloud, triangles=None) -> str:
    """Wavefront OBJ text for a vertex cloud and optional 0-based triangle list."""
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in np.asarray(cloud).reshape(-1, 3)]
    if triangles is not None:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(triangles)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Synthetic basis
# ---------------------------------------------------------------------------

def _landmark_template() -> np.ndarray:
    """A rough iBUG-ordered 68-point face layout in model units (y up)."""
    def ellipse(cx, cy, rx, ry, n, start=np.pi):
        ang = start - np.linspace(0.0, 2 * np.pi, n, endpoint=False)
        return np.stack([cx + rx * np.cos(ang), cy + ry * np.sin(ang)], axis=1)

    phi = np.linspace(np.pi, 2 * np.pi, 17)
    jaw = np.stack([0.9 * np.cos(phi), 0.25 + 1.3 * np.sin(phi)], axis=1)
    bx = np.linspace(-0.75, -0.2, 5)
    brow_r = np.stack([bx, 0.58 + 0.1 * np.sin(np.linspace(0, np.pi, 5))], axis=1)
    brow_l = brow_r[::-1] * [-1.0, 1.0]
    bridge = np.stack([np.zeros(4), np.linspace(0.4, -0.05, 4)], axis=1)
    nostrils = np.stack([np.linspace(-0.2, 0.2, 5), np.full(5, -0.17)], axis=1)
    eye_r = ellipse(-0.45, 0.3, 0.17, 0.08, 6)
    eye_l = ellipse(0.45, 0.3, 0.17, 0.08, 6)
    mouth_outer = ellipse(0.0, -0.55, 0.42, 0.2, 12)
    mouth_inner = ellipse(0.0, -0.55, 0.26, 0.08, 8)
    return np.concatenate([jaw, brow_r, brow_l, bridge, nostrils, eye_r, eye_l,
                           mouth_outer, mouth_inner])


def synthetic_basis(n_id=10, n_exp=10, cols=25, rows=20, seed=0) -> MorphableBasis:
    """Deterministic face-like basis on a cols x rows height-field grid.

    The mean shape is an elongated dome with a nose bump; the bases are
    orthonormal columns (QR of seeded Gaussians). All values are rounded to
    float32 so the basis survives the F3B file format unchanged.
    """
    rng = np.random.default_rng(seed)
    gx, gy = np.meshgrid(np.linspace(-1.0, 1.0, cols), np.linspace(-1.25, 1.25, rows))
    gx, gy = gx.ravel(), gy.ravel()
    dome = np.sqrt(np.clip(1.0 - gx ** 2 - (gy / 1.35) ** 2, 0.0, None))
    gz = 0.8 * dome + 0.25 * np.exp(-(gx ** 2 + (gy + 0.05) ** 2) / 0.03)
    mean = np.stack([gx, gy, gz], axis=1).ravel()
    n3 = mean.size
    a_id, _ = np.linalg.qr(rng.standard_normal((n3, n_id)))
    a_exp, _ = np.linalg.qr(rng.standard_normal((n3, n_exp)))

    free = np.ones(cols * rows, dtype=bool)
    landmarks = []
    for point in _landmark_template():
        dist = np.hypot(gx - point[0], gy - point[1])
        dist[~free] = np.inf
        idx = int(np.argmin(dist))
        free[idx] = False
        landmarks.append(idx)

    tri = []
    for r in range(rows - 1):
        for c in range(cols - 1):
            v = r * cols + c
            tri.append((v, v + 1, v + cols))
            tri.append((v + 1, v + cols + 1, v + cols))

    f32 = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)
    return MorphableBasis(f32(mean), f32(a_id), f32(a_exp), np.array(landmarks), np.array(tri))


def random_params(basis: MorphableBasis, rng, frame=128, coef_std=1.0, max_angle=0.25,
                  scale_range=(36.0, 44.0)) -> ModelParams:
    """Draw plausible parameters that keep the face inside a frame x frame image."""
    centre = frame / 2.0
    return ModelParams(
        alpha_id=rng.normal(0.0, coef_std, basis.n_id),
        alpha_exp=rng.normal(0.0, coef_std, basis.n_exp),
        rotation=rng.uniform(-max_angle, max_angle, 3),
        translation=np.array([centre + rng.uniform(-4, 4), centre + rng.uniform(-4, 4), 0.0]),
        scale=rng.uniform(*scale_range),
    )
