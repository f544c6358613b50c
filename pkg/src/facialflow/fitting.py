"""
Landmark-driven estimation of morphable-model parameters.

The losses mirror the supervised warm-up objective (shape + landmark +
transform + L1 coefficient penalty) and the self-supervised objective
(landmark + penalty). Every L1 term is smoothed with a Huber kink of width
``delta`` so that gradients are defined everywhere; ``delta = 0`` gives the
exact L1 value.

Gradients are analytic and returned as flat vectors ordered
(alpha_id, alpha_exp, rotation, translation, scale), length K + L + 7.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import FormatError, InvalidParameterError, OptimizationError, ShapeError
from .morphable_model import (
    LEFT_EYE, MOUTH, N_LANDMARKS, RIGHT_EYE, LandmarkSet, ModelParams, MorphableBasis,
    landmarks_2d, rotation_matrix, rotation_matrix_derivatives,
)

DEFAULT_HUBER_DELTA = 1e-3
MOMENTUM = 0.9


def huber(r, delta):
    """Smoothed absolute value: r^2/(2 delta) inside |r| < delta, |r| - delta/2 outside."""
    r = np.asarray(r, dtype=np.float64)
    a = np.abs(r)
    if delta <= 0:
        return a
    return np.where(a < delta, 0.5 * r * r / delta, a - 0.5 * delta)


def huber_grad(r, delta):
    r = np.asarray(r, dtype=np.float64)
    if delta <= 0:
        return np.sign(r)
    return np.clip(r / delta, -1.0, 1.0)


def feature_landmark_weights(mouth=10.0, eyes=5.0) -> np.ndarray:
    """Per-landmark weights emphasising the mouth (10x) and eyes (5x)."""
    w = np.ones(N_LANDMARKS)
    w[list(MOUTH)] = mouth
    w[list(RIGHT_EYE) + list(LEFT_EYE)] = eyes
    return w


@dataclass
class FitConfig:
    max_iterations: int = 2000
    step_size: float = 1e-2
    convergence_tol: float = 1e-7
    lambda1: float = 10.0
    lambda2: float = 1.0
    lambda3: float = 1e-3
    huber_delta: float = DEFAULT_HUBER_DELTA
    landmark_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if int(self.max_iterations) < 1:
            raise InvalidParameterError("max_iterations must be >= 1")
        if self.step_size <= 0 or self.convergence_tol <= 0 or self.huber_delta <= 0:
            raise InvalidParameterError("step_size, convergence_tol and huber_delta must be > 0")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise InvalidParameterError("loss weights must be non-negative")
        if self.landmark_weights is not None:
            w = np.asarray(self.landmark_weights, dtype=np.float64).reshape(-1)
            if w.size != N_LANDMARKS or np.any(w <= 0):
                raise InvalidParameterError("landmark_weights must be 68 positive reals")
            self.landmark_weights = w

    def weighted(self, target: LandmarkSet) -> LandmarkSet:
        """Target with this config's landmark weights applied, if any."""
        if self.landmark_weights is None:
            return target
        return target.with_weights(self.landmark_weights)


@dataclass
class FitReport:
    final_params: ModelParams
    final_loss: float
    loss_trace: List[float] = field(default_factory=list)
    iterations_used: int = 0
    mean_landmark_error_px: float = 0.0
    objective: str = "sub"

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "final_params": self.final_params.to_dict(),
            "final_loss": self.final_loss,
            "iterations_used": self.iterations_used,
            "mean_landmark_error_px": self.mean_landmark_error_px,
            "loss_trace": list(self.loss_trace),
        }


# ---------------------------------------------------------------------------
# Loss terms. Each private helper returns (value, gradient vector).
# ---------------------------------------------------------------------------

def _landmark(basis, params, target, delta):
    params.check_matches(basis)
    rows = basis.landmark_rows()
    a_id = basis.id_basis[rows]          # (68, 3, K)
    a_exp = basis.exp_basis[rows]        # (68, 3, L)
    local = basis.mean_shape[rows] + a_id @ params.alpha_id + a_exp @ params.alpha_exp
    rot = rotation_matrix(params.rotation)
    rotated = local @ rot.T
    # Same arithmetic path as landmarks_2d, so an exact fit gives exactly 0.
    resid = landmarks_2d(basis, params).points - target.points
    w = target.weights / N_LANDMARKS
    value = float(np.sum(w[:, None] * huber(resid, delta)))

    g = w[:, None] * huber_grad(resid, delta)           # d loss / d pred, (68, 2)
    g_local = params.scale * g @ rot[:2]                  # (68, 3)
    d_rot = rotation_matrix_derivatives(params.rotation)  # (3, 3, 3)
    grad = np.concatenate([
        np.einsum("nc,nck->k", g_local, a_id),
        np.einsum("nc,nck->k", g_local, a_exp),
        params.scale * np.einsum("nj,ajk,nk->a", g, d_rot[:, :2, :], local),
        [g[:, 0].sum(), g[:, 1].sum(), 0.0],
        [np.sum(g * rotated[:, :2])],
    ])
    return value, grad


def _shape(basis, params, gt, delta):
    params.check_matches(basis)
    gt.check_matches(basis)
    diff = (basis.id_basis @ (params.alpha_id - gt.alpha_id)
            + basis.exp_basis @ (params.alpha_exp - gt.alpha_exp))
    value = float(np.mean(huber(diff, delta)))
    g = huber_grad(diff, delta) / diff.size
    grad = np.concatenate([basis.id_basis.T @ g, basis.exp_basis.T @ g, np.zeros(7)])
    return value, grad


def _transform(params, gt, delta):
    dr = params.rotation - gt.rotation
    dt = params.translation - gt.translation
    ds = params.scale - gt.scale
    value = float(huber(dr, delta).sum() + huber(ds, delta) + huber(dt, delta).sum())
    grad = np.concatenate([np.zeros(params.alpha_id.size + params.alpha_exp.size),
                           huber_grad(dr, delta), huber_grad(dt, delta),
                           [float(huber_grad(ds, delta))]])
    return value, grad


def _reg(params, delta):
    value = float(huber(params.alpha_id, delta).sum() + huber(params.alpha_exp, delta).sum())
    grad = np.concatenate([huber_grad(params.alpha_id, delta),
                           huber_grad(params.alpha_exp, delta), np.zeros(7)])
    return value, grad


def _check_gt(params, gt):
    if (gt.alpha_id.size != params.alpha_id.size
            or gt.alpha_exp.size != params.alpha_exp.size):
        raise ShapeError("ground-truth params do not match the estimate's dimensions")


def loss_landmark(basis: MorphableBasis, params: ModelParams, target: LandmarkSet,
                  delta: float = 0.0) -> float:
    """Weighted mean over the 68 landmarks of |dx| + |dy| (Huber-smoothed).

    The weights are taken from ``target`` and are not normalised, so scaling
    every weight by c scales the loss by c.
    """
    return _landmark(basis, params, target, delta)[0]


def loss_shape(basis: MorphableBasis, params: ModelParams, gt: ModelParams,
               delta: float = 0.0) -> float:
    """Mean absolute difference of the coefficient-driven shape offsets over all 3N entries."""
    return _shape(basis, params, gt, delta)[0]


def loss_transform(params: ModelParams, gt: ModelParams, delta: float = 0.0) -> float:
    """|r - r_gt|_1 + |s - s_gt| + |t - t_gt|_1."""
    return _transform(params, gt, delta)[0]


def loss_reg(params: ModelParams, delta: float = 0.0) -> float:
    """|alpha_id|_1 + |alpha_exp|_1."""
    return _reg(params, delta)[0]


def _warm(basis, params, target, gt, cfg):
    _check_gt(params, gt)
    d = cfg.huber_delta
    target = cfg.weighted(target)
    terms = [
        (1.0, _shape(basis, params, gt, d)),
        (cfg.lambda1, _landmark(basis, params, target, d)),
        (cfg.lambda2, _transform(params, gt, d)),
        (cfg.lambda3, _reg(params, d)),
    ]
    return (sum(c * v for c, (v, _) in terms), sum(c * g for c, (_, g) in terms))


def _sub(basis, params, target, cfg):
    d = cfg.huber_delta
    lm_v, lm_g = _landmark(basis, params, cfg.weighted(target), d)
    reg_v, reg_g = _reg(params, d)
    return lm_v + cfg.lambda3 * reg_v, lm_g + cfg.lambda3 * reg_g


def loss_warm(basis, params, target, gt, cfg: Optional[FitConfig] = None) -> float:
    """Supervised objective L_shp + l1 L_lm + l2 L_tr + l3 L_reg (defaults 10, 1, 1e-3)."""
    return _warm(basis, params, target, gt, cfg or FitConfig())[0]


def loss_sub(basis, params, target, cfg: Optional[FitConfig] = None) -> float:
    """Self-supervised objective L_lm + l3 L_reg."""
    return _sub(basis, params, target, cfg or FitConfig())[0]


def objective_and_gradient(objective, basis, params, target, gt=None, cfg=None):
    """(value, gradient) of the ``"warm"`` or ``"sub"`` objective."""
    cfg = cfg or FitConfig()
    if objective == "warm":
        if gt is None:
            raise InvalidParameterError("the warm objective needs ground-truth params")
        return _warm(basis, params, target, gt, cfg)
    if objective == "sub":
        return _sub(basis, params, target, cfg)
    raise InvalidParameterError(f"unknown objective {objective!r}")


def gradient(objective, basis, params, target, gt=None, cfg=None) -> np.ndarray:
    """Analytic gradient of the chosen objective w.r.t. (alpha_id, alpha_exp, r, t, s)."""
    return objective_and_gradient(objective, basis, params, target, gt, cfg)[1]


# Per-term gradients, exposed for verification against finite differences.

def grad_landmark(basis, params, target, delta=0.0):
    return _landmark(basis, params, target, delta)[1]


def grad_shape(basis, params, gt, delta=0.0):
    return _shape(basis, params, gt, delta)[1]


def grad_transform(params, gt, delta=0.0):
    return _transform(params, gt, delta)[1]


def grad_reg(params, delta=0.0):
    return _reg(params, delta)[1]


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def initial_params(basis: MorphableBasis, target: LandmarkSet) -> ModelParams:
    """Closed-form pose-free start: zero coefficients and rotation, bbox-matched scale,
    centroid-matched x/y translation, z translation 0."""
    mean_lmk = basis.mean_shape.reshape(-1, 3)[basis.landmark_indices, :2]
    tgt = target.points
    diag = lambda p: float(np.hypot(*(p.max(axis=0) - p.min(axis=0))))
    denom = diag(mean_lmk)
    scale = diag(tgt) / denom if denom > 0 else 1.0
    if not scale > 0:
        scale = 1.0
    t_xy = tgt.mean(axis=0) - scale * mean_lmk.mean(axis=0)
    return ModelParams(np.zeros(basis.n_id), np.zeros(basis.n_exp), np.zeros(3),
                       np.array([t_xy[0], t_xy[1], 0.0]), scale)


def mean_landmark_error(basis, params, target) -> float:
    """Mean Euclidean distance in pixels between model landmarks and the target."""
    pred = landmarks_2d(basis, params).points
    return float(np.mean(np.linalg.norm(pred - target.points, axis=1)))


def landmark_jacobian(basis: MorphableBasis, params: ModelParams) -> np.ndarray:
    """d(projected landmarks)/d(alpha_id, alpha_exp, r, t, s), shape (136, K + L + 7).

    Rows are ordered (x0, y0, x1, y1, ...).
    """
    params.check_matches(basis)
    rows = basis.landmark_rows()
    a_id = basis.id_basis[rows]
    a_exp = basis.exp_basis[rows]
    local = basis.mean_shape[rows] + a_id @ params.alpha_id + a_exp @ params.alpha_exp
    rot = rotation_matrix(params.rotation)
    d_rot = rotation_matrix_derivatives(params.rotation)
    n = N_LANDMARKS
    jac = np.zeros((n, 2, basis.n_id + basis.n_exp + 7))
    k, l = basis.n_id, basis.n_id + basis.n_exp
    jac[:, :, :k] = params.scale * np.einsum("jc,nck->njk", rot[:2], a_id)
    jac[:, :, k:l] = params.scale * np.einsum("jc,nck->njk", rot[:2], a_exp)
    jac[:, :, l:l + 3] = params.scale * np.einsum("ajc,nc->nja", d_rot[:, :2], local)
    jac[:, 0, l + 3] = 1.0
    jac[:, 1, l + 4] = 1.0
    jac[:, :, l + 6] = local @ rot[:2].T
    return jac.reshape(2 * n, -1)


def _coordinate_scales(basis, params):
    """Per-coordinate step scaling for the optimizer's (.., log s) vector.

    Each coordinate is divided by the RMS landmark displacement it causes at
    the start point, so a unit step moves the landmarks by about one pixel
    whichever parameter it touches. Coordinates that do not move landmarks
    (t_z) keep unit scaling.
    """
    jac = landmark_jacobian(basis, params)
    jac[:, -1] *= params.scale
    rms = np.linalg.norm(jac, axis=0) / np.sqrt(N_LANDMARKS)
    rms[rms < 1e-12] = 1.0
    return 1.0 / rms


def fit(basis: MorphableBasis, target: LandmarkSet, cfg: Optional[FitConfig] = None,
        gt: Optional[ModelParams] = None, init: Optional[ModelParams] = None) -> FitReport:
    """Estimate parameters for ``target`` by momentum gradient descent.

    Minimises the warm objective when ``gt`` is given and the self-supervised
    objective otherwise. The search runs over (alpha_id, alpha_exp, r, t,
    log s), each coordinate rescaled by its landmark sensitivity at the start
    point (see ``_coordinate_scales``); log s keeps the scale positive. A step
    that does not lower the loss is rejected, the step size is halved and the
    momentum is reset. Accepted steps let the step size creep back toward
    ``cfg.step_size``. Stops after ``cfg.max_iterations`` or once a trial
    step changes the loss by less than ``cfg.convergence_tol``.
    """
    cfg = cfg or FitConfig()
    objective = "warm" if gt is not None else "sub"
    start = init if init is not None else initial_params(basis, target)
    start.check_matches(basis)
    k, l = basis.n_id, basis.n_exp
    dscale = _coordinate_scales(basis, start)

    def unpack(y):
        vec = y * dscale
        vec[-1] = np.exp(vec[-1])
        return ModelParams.from_vector(vec, k, l)

    def evaluate(y):
        try:
            params = unpack(y)
        except InvalidParameterError:
            return np.inf, None
        value, grad = objective_and_gradient(objective, basis, params, target, gt, cfg)
        grad = grad.copy()
        grad[-1] *= params.scale
        return value, grad * dscale

    z = start.to_vector()
    z[-1] = np.log(z[-1])
    y = z / dscale
    f, g = evaluate(y)
    if not np.isfinite(f):
        raise OptimizationError("objective is not finite at the initial parameters", [f])
    trace = [f]
    velocity = np.zeros_like(y)
    step = cfg.step_size
    rejections = 0
    iterations = 0
    for iterations in range(1, int(cfg.max_iterations) + 1):
        proposal = MOMENTUM * velocity - step * g
        f_new, g_new = evaluate(y + proposal)
        if np.isnan(f_new):
            raise OptimizationError("objective evaluated to NaN", trace)
        change = abs(f - f_new)
        if f_new < f:
            y, velocity = y + proposal, proposal
            f, g = f_new, g_new
            rejections = 0
            step = min(cfg.step_size, step * 1.1)
        else:
            velocity[:] = 0.0
            step *= 0.5
            rejections += 1
        trace.append(f)
        # rejections > 60: the step has shrunk below 1e-18 of its base value.
        if change < cfg.convergence_tol or rejections > 60:
            break

    params = unpack(y)
    return FitReport(
        final_params=params,
        final_loss=float(f),
        loss_trace=[float(v) for v in trace],
        iterations_used=iterations,
        mean_landmark_error_px=mean_landmark_error(basis, params, target),
        objective=objective,
    )


# ---------------------------------------------------------------------------
# Landmark files
# ---------------------------------------------------------------------------

def load_landmarks(path) -> LandmarkSet:
    """Read a landmark JSON file.

    Accepted layouts: a bare list of 68 ``[x, y]`` pairs, or an object
    ``{"points": [[x, y], ...], "weights": [...]}`` with optional weights.
    """
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(data, dict):
        points, weights = data.get("points"), data.get("weights")
    else:
        points, weights = data, None
    try:
        return LandmarkSet(points, weights)
    except (ShapeError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_landmarks(landmarks: LandmarkSet, path, with_weights=True):
    data = {"points": landmarks.points.tolist()}
    if with_weights:
        data["weights"] = landmarks.weights.tolist()
    Path(path).write_text(json.dumps(data, indent=2) + "\n")
