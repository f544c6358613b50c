"""
Facial flows: per-pixel 3-D motion between two reconstructed faces.

A flow is an H x W x 3 map holding (dx, dy, dz) = source - intermediate for
the vertex visible at each pixel. Motion is splatted at the source face's
projected positions (source anchoring), one nearest pixel per vertex, with a
z-buffer that keeps the vertex nearest the viewer (largest source z) and
breaks exact depth ties by the smaller vertex index. Pixels that no vertex
reaches carry zero motion.
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image, PngImagePlugin

from .errors import FormatError, InvalidParameterError, RangeError, ShapeError
from .morphable_model import ModelParams, MorphableBasis, model_to_image, reconstruct

F3F_MAGIC = b"F3F1"
F3F_VERSION = 1


@dataclass(frozen=True, eq=False)
class FacialFlow:
    data: np.ndarray      # (H, W, 3) float64
    coverage: np.ndarray  # (H, W) bool

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        coverage = np.array(self.coverage, dtype=bool)
        if data.ndim != 3 or data.shape[2] != 3 or coverage.shape != data.shape[:2]:
            raise ShapeError(f"flow data {data.shape} / coverage {coverage.shape} mismatch")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise RangeError("flow width and height must be >= 1")
        if not np.all(np.isfinite(data)):
            raise InvalidParameterError("flow data must be finite")
        if np.any(data[~coverage] != 0.0):
            raise InvalidParameterError("uncovered pixels must hold zero motion")
        data.setflags(write=False)
        coverage.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "coverage", coverage)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def s_max(self) -> float:
        """Largest absolute motion value; 0 for an all-zero flow."""
        return float(np.max(np.abs(self.data))) if self.data.size else 0.0

    @classmethod
    def zeros(cls, width, height):
        return cls(np.zeros((height, width, 3)), np.zeros((height, width), dtype=bool))


@dataclass(frozen=True)
class FlowSequence:
    frames: Tuple[FacialFlow, ...]
    thetas: Tuple[float, ...]

    def __post_init__(self):
        if len(self.frames) != len(self.thetas):
            raise ShapeError("frames and thetas differ in length")
        d = np.diff(self.thetas)
        if len(d) and not (np.all(d > 0) or np.all(d < 0)):
            raise InvalidParameterError("thetas must be strictly monotone")

    def __len__(self):
        return len(self.frames)


def _check_size(size):
    width, height = (int(v) for v in size)
    if width < 1 or height < 1:
        raise RangeError(f"flow size must be positive, got {width}x{height}")
    return width, height


def interpolate_params(p_s: ModelParams, p_t: ModelParams, theta: float) -> ModelParams:
    """theta * p_s + (1 - theta) * p_t on every field, Euler angles included."""
    if not 0.0 <= theta <= 1.0:
        raise RangeError(f"theta must lie in [0, 1], got {theta}")
    if (p_s.alpha_id.size != p_t.alpha_id.size
            or p_s.alpha_exp.size != p_t.alpha_exp.size):
        raise ShapeError("parameter sets have different coefficient counts")
    mix = lambda a, b: theta * a + (1.0 - theta) * b
    return ModelParams(
        mix(p_s.alpha_id, p_t.alpha_id),
        mix(p_s.alpha_exp, p_t.alpha_exp),
        mix(p_s.rotation, p_t.rotation),
        mix(p_s.translation, p_t.translation),
        mix(p_s.scale, p_t.scale),
    )


def motion(x_s, x_m) -> np.ndarray:
    """Per-vertex motion, source minus intermediate."""
    x_s = np.asarray(x_s, dtype=np.float64)
    x_m = np.asarray(x_m, dtype=np.float64)
    if x_s.shape != x_m.shape:
        raise ShapeError(f"clouds differ in shape: {x_s.shape} vs {x_m.shape}")
    return x_s - x_m


def motion_field(basis: MorphableBasis, p_s: ModelParams, p_m: ModelParams) -> np.ndarray:
    """Per-vertex motion before rasterization, shape (N, 3)."""
    return motion(reconstruct(basis, p_s), reconstruct(basis, p_m))


def pixel_positions(cloud, height) -> np.ndarray:
    """Integer (column, row) of the pixel nearest each vertex; rounding is half-up."""
    img = model_to_image(np.asarray(cloud, dtype=np.float64)[:, :2], height)
    return np.floor(img + 0.5).astype(np.int64)


def splat(source_cloud, motions, size) -> FacialFlow:
    """Z-buffered splat of per-vertex ``motions`` at the source vertices' pixels."""
    width, height = _check_size(size)
    source_cloud = np.asarray(source_cloud, dtype=np.float64).reshape(-1, 3)
    motions = np.asarray(motions, dtype=np.float64).reshape(-1, 3)
    if source_cloud.shape != motions.shape:
        raise ShapeError("source cloud and motions differ in length")
    data = np.zeros((height, width, 3))
    coverage = np.zeros((height, width), dtype=bool)
    if not len(source_cloud):
        return FacialFlow(data, coverage)

    px = pixel_positions(source_cloud, height)
    inside = (px[:, 0] >= 0) & (px[:, 0] < width) & (px[:, 1] >= 0) & (px[:, 1] < height)
    idx = np.flatnonzero(inside)
    lin = px[idx, 1] * width + px[idx, 0]
    # Sort by pixel, then nearest-first (largest z), then lowest vertex index.
    order = np.lexsort((idx, -source_cloud[idx, 2], lin))
    lin, idx = lin[order], idx[order]
    first = np.ones(len(lin), dtype=bool)
    first[1:] = lin[1:] != lin[:-1]
    winners, pixels = idx[first], lin[first]
    data.reshape(-1, 3)[pixels] = motions[winners]
    coverage.reshape(-1)[pixels] = True
    return FacialFlow(data, coverage)


def rasterize_flow(basis: MorphableBasis, p_s: ModelParams, p_m: ModelParams,
                   size) -> FacialFlow:
    """Flow from the source face to an intermediate face, anchored at the source."""
    _check_size(size)
    x_s = reconstruct(basis, p_s)
    x_m = reconstruct(basis, p_m)
    return splat(x_s, motion(x_s, x_m), size)


def flow_thetas(n_frames: int) -> np.ndarray:
    if n_frames < 2:
        raise RangeError(f"need at least 2 frames, got {n_frames}")
    return np.linspace(1.0, 0.0, n_frames)


def flow_sequence(basis: MorphableBasis, p_s: ModelParams, p_t: ModelParams,
                  n_frames: int, size) -> FlowSequence:
    """Flows from the source to ``n_frames`` uniformly interpolated faces.

    Thetas run from 1 (the source itself, zero flow) down to 0 (the target).
    Every frame is measured against the source, not against the previous frame.
    """
    thetas = flow_thetas(n_frames)
    frames = tuple(rasterize_flow(basis, p_s, interpolate_params(p_s, p_t, th), size)
                   for th in thetas)
    return FlowSequence(frames, tuple(float(t) for t in thetas))


def substitute_params(source: ModelParams, driver: ModelParams, take_expression: bool,
                      take_pose: bool) -> ModelParams:
    """Cross-reenactment: keep the source identity, optionally take the driver's
    expression coefficients and/or rotation. Translation and scale stay with the source."""
    if (source.alpha_id.size != driver.alpha_id.size
            or source.alpha_exp.size != driver.alpha_exp.size):
        raise ShapeError("source and driver have different coefficient counts")
    return source.replace(
        alpha_exp=driver.alpha_exp if take_expression else source.alpha_exp,
        rotation=driver.rotation if take_pose else source.rotation,
    )


def perturb_params(params: ModelParams, std: float, seed=0) -> ModelParams:
    """Add seeded N(0, std^2) noise to the identity and expression coefficients."""
    if std < 0:
        raise RangeError(f"noise std must be >= 0, got {std}")
    if std == 0:
        return params.replace()
    rng = np.random.default_rng(seed)
    noise = std * rng.standard_normal(params.alpha_id.size + params.alpha_exp.size)
    k = params.alpha_id.size
    return params.replace(alpha_id=params.alpha_id + noise[:k],
                          alpha_exp=params.alpha_exp + noise[k:])


# ---------------------------------------------------------------------------
# F3F files and visualization
# ---------------------------------------------------------------------------

def encode_flow(flow: FacialFlow) -> bytes:
    """Little-endian F3F1 record: header, f32 s_max, f32 data (row-major), u8 coverage."""
    data32 = flow.data.astype("<f4")
    s_max = float(np.max(np.abs(data32))) if data32.size else 0.0
    header = F3F_MAGIC + struct.pack("<3If", F3F_VERSION, flow.width, flow.height, s_max)
    return header + data32.tobytes() + flow.coverage.astype(np.uint8).tobytes()


def decode_flow(payload: bytes) -> FacialFlow:
    if len(payload) < 20:
        raise FormatError("truncated F3F header")
    if payload[:4] != F3F_MAGIC:
        raise FormatError("bad F3F magic")
    version, width, height, _s_max = struct.unpack("<3If", payload[4:20])
    if version != F3F_VERSION:
        raise FormatError(f"unsupported F3F version {version}")
    n = width * height
    expected = 20 + 12 * n + n
    if len(payload) != expected:
        raise FormatError(f"F3F payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4", count=3 * n, offset=20)
    cov = np.frombuffer(payload, dtype=np.uint8, count=n, offset=20 + 12 * n)
    if np.any(cov > 1):
        raise FormatError("coverage bytes must be 0 or 1")
    try:
        return FacialFlow(data.reshape(height, width, 3).astype(np.float64),
                          cov.reshape(height, width).astype(bool))
    except (ShapeError, RangeError, InvalidParameterError) as exc:
        raise FormatError(f"invalid F3F content: {exc}") from exc


def save_flow(flow: FacialFlow, path):
    Path(path).write_bytes(encode_flow(flow))


def load_flow(path) -> FacialFlow:
    return decode_flow(Path(path).read_bytes())


def flow_to_rgb(flow: FacialFlow, s_max=None) -> np.ndarray:
    """8-bit RGB encoding, R/G/B = dx/dy/dz: byte = clamp(round(128 + 127 v / s_max)).

    Rounding is half-up; zero motion maps to 128. ``s_max`` defaults to the
    flow's own max |v|; an all-zero flow encodes as 128 everywhere.
    """
    s_max = flow.s_max if s_max is None else float(s_max)
    if s_max <= 0:
        return np.full(flow.data.shape, 128, dtype=np.uint8)
    q = np.floor(128.0 + 127.0 * flow.data / s_max + 0.5)
    return np.clip(q, 0, 255).astype(np.uint8)


def rgb_to_flow(rgb, s_max: float) -> np.ndarray:
    """Approximate inverse of :func:`flow_to_rgb`; returns the (H, W, 3) motion values."""
    return (np.asarray(rgb, dtype=np.float64) - 128.0) * (s_max / 127.0)


def save_visualization(flow: FacialFlow, path):
    """Write the RGB encoding as a PNG with ``s_max`` in a text chunk."""
    info = PngImagePlugin.PngInfo()
    info.add_text("s_max", repr(flow.s_max))
    Image.fromarray(flow_to_rgb(flow)).save(path, format="PNG", pnginfo=info)


def load_visualization(path):
    """Return (rgb bytes array, s_max) from a PNG written by :func:`save_visualization`."""
    with Image.open(path) as img:
        rgb = np.asarray(img.convert("RGB"))
        s_max = float(img.info.get("s_max", "0"))
    return rgb, s_max
